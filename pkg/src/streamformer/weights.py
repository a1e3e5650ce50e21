"""Seeded weight generation and the binary weight file format.

File layout (all integers little-endian)::

    magic      8 bytes  b"STRMFMR\\0"
    version    u32
    config     u32 length + UTF-8 JSON of the ModelConfig
    count      u32 number of tensor records
    record     u16 name length, name (UTF-8), u8 rank, rank x u64 extents,
               float64 little-endian data in row-major order
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .attention import MhaWeights, TalkingHeadsWeights
from .config import ModelConfig
from .conv import ConvWeights
from .layer import FfnWeights, LayerWeights, NormWeights
from .numerics import ShapeError, Tensor

MAGIC = b"STRMFMR\0"
FORMAT_VERSION = 1


class WeightFileError(ValueError):
    pass


@dataclass(frozen=True)
class ModelWeights:
    config: ModelConfig
    input_proj: Tensor  # [(input_dim * stack_factor) x d]
    layers: Tuple[LayerWeights, ...]

    def check(self) -> None:
        cfg = self.config
        if self.input_proj.shape != (cfg.superframe_dim, cfg.model_dim):
            raise ShapeError(f"input projection {self.input_proj.shape} != ({cfg.superframe_dim}, {cfg.model_dim})")
        if len(self.layers) != cfg.num_layers:
            raise ValueError(f"{len(self.layers)} layers of weights, config wants {cfg.num_layers}")
        for lw in self.layers:
            lw.check(cfg)

    def astype(self, dtype) -> "ModelWeights":
        tensors = {name: t.astype(dtype) for name, t in to_tensors(self).items()}
        return from_tensors(self.config, tensors)

    @property
    def num_parameters(self) -> int:
        return sum(t.size for t in to_tensors(self).values())


def _uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _norm(d: int) -> NormWeights:
    return NormWeights(np.ones(d), np.zeros(d))


def gen_weights(cfg: ModelConfig, seed: int = 0, th_epsilon: float = 0.01) -> ModelWeights:
    """Deterministic random weights for ``cfg``.

    Matrices are ``U(-a, a)`` with ``a = 1/sqrt(fan_in)``; norms start at
    gain 1 / bias 0; head-mixing matrices are ``I + th_epsilon * N(0, 1)``;
    compression weights start uniform (a block mean).
    """
    rng = np.random.default_rng(seed)
    d, f, h = cfg.model_dim, cfg.ffn_dim, cfg.num_heads

    def ffn_weights() -> FfnWeights:
        return FfnWeights(_uniform(rng, (d, f), d), _uniform(rng, (f, d), f), _norm(d))

    input_proj = _uniform(rng, (cfg.superframe_dim, d), cfg.superframe_dim)
    layers = []
    for _ in range(cfg.num_layers):
        ffn1 = ffn_weights() if cfg.use_macaron else None
        attn = MhaWeights(*(_uniform(rng, (d, d), d) for _ in range(4)), num_heads=h)
        th = None
        if cfg.use_talking_heads:
            th = TalkingHeadsWeights(
                np.eye(h) + th_epsilon * rng.standard_normal((h, h)),
                np.eye(h) + th_epsilon * rng.standard_normal((h, h)),
            )
        conv = None
        if cfg.use_conv:
            conv = ConvWeights(
                pw1=_uniform(rng, (d, 2 * d), d),
                dw=_uniform(rng, (d, cfg.kernel), cfg.kernel),
                ln_gain=np.ones(d),
                ln_bias=np.zeros(d),
                pw2=_uniform(rng, (d, d), d),
            )
        layers.append(
            LayerWeights(
                attn=attn,
                norm_attn_in=_norm(d),
                ffn2=ffn_weights(),
                norm_final=_norm(d),
                ffn1=ffn1,
                talking_heads=th,
                conv=conv,
                norm_conv_in=_norm(d) if cfg.use_conv else None,
                compress=np.full(cfg.block_size, 1.0 / cfg.block_size) if cfg.memory_slots > 0 else None,
            )
        )
    weights = ModelWeights(cfg, input_proj, tuple(layers))
    weights.check()
    return weights


def to_tensors(weights: ModelWeights) -> Dict[str, Tensor]:
    """Flatten into an ordered name -> array mapping."""
    out: Dict[str, Tensor] = {"input_proj": weights.input_proj}
    for n, lw in enumerate(weights.layers):
        p = f"layers.{n}."

        def put_ffn(name: str, fw: FfnWeights) -> None:
            out[p + name + ".lin_in"] = fw.lin_in
            out[p + name + ".lin_out"] = fw.lin_out
            out[p + name + ".norm.gain"] = fw.norm.gain
            out[p + name + ".norm.bias"] = fw.norm.bias

        if lw.ffn1 is not None:
            put_ffn("ffn1", lw.ffn1)
        out[p + "norm_attn_in.gain"] = lw.norm_attn_in.gain
        out[p + "norm_attn_in.bias"] = lw.norm_attn_in.bias
        for name in ("w_q", "w_k", "w_v", "w_o"):
            out[p + "attn." + name] = getattr(lw.attn, name)
        if lw.talking_heads is not None:
            out[p + "talking_heads.w_l"] = lw.talking_heads.w_l
            out[p + "talking_heads.w_r"] = lw.talking_heads.w_r
        if lw.conv is not None:
            out[p + "norm_conv_in.gain"] = lw.norm_conv_in.gain
            out[p + "norm_conv_in.bias"] = lw.norm_conv_in.bias
            for name in ("pw1", "dw", "ln_gain", "ln_bias", "pw2"):
                out[p + "conv." + name] = getattr(lw.conv, name)
        put_ffn("ffn2", lw.ffn2)
        out[p + "norm_final.gain"] = lw.norm_final.gain
        out[p + "norm_final.bias"] = lw.norm_final.bias
        if lw.compress is not None:
            out[p + "compress"] = lw.compress
    return out


def from_tensors(cfg: ModelConfig, tensors: Dict[str, Tensor]) -> ModelWeights:
    remaining = dict(tensors)

    def take(name: str) -> Tensor:
        try:
            return remaining.pop(name)
        except KeyError:
            raise WeightFileError(f"missing tensor {name!r}") from None

    def norm(name: str) -> NormWeights:
        return NormWeights(take(name + ".gain"), take(name + ".bias"))

    def ffn(name: str) -> FfnWeights:
        return FfnWeights(take(name + ".lin_in"), take(name + ".lin_out"), norm(name + ".norm"))

    input_proj = take("input_proj")
    layers: List[LayerWeights] = []
    for n in range(cfg.num_layers):
        p = f"layers.{n}."
        ffn1 = ffn(p + "ffn1") if cfg.use_macaron else None
        attn = MhaWeights(*(take(p + "attn." + k) for k in ("w_q", "w_k", "w_v", "w_o")), num_heads=cfg.num_heads)
        th = None
        if cfg.use_talking_heads:
            th = TalkingHeadsWeights(take(p + "talking_heads.w_l"), take(p + "talking_heads.w_r"))
        conv = conv_norm = None
        if cfg.use_conv:
            conv_norm = norm(p + "norm_conv_in")
            conv = ConvWeights(*(take(p + "conv." + k) for k in ("pw1", "dw", "ln_gain", "ln_bias", "pw2")))
        layers.append(
            LayerWeights(
                attn=attn,
                norm_attn_in=norm(p + "norm_attn_in"),
                ffn2=ffn(p + "ffn2"),
                norm_final=norm(p + "norm_final"),
                ffn1=ffn1,
                talking_heads=th,
                conv=conv,
                norm_conv_in=conv_norm,
                compress=take(p + "compress") if cfg.memory_slots > 0 else None,
            )
        )
    if remaining:
        raise WeightFileError(f"unexpected tensors: {sorted(remaining)}")
    weights = ModelWeights(cfg, input_proj, tuple(layers))
    weights.check()
    return weights


def serialize(weights: ModelWeights) -> bytes:
    cfg_blob = json.dumps(weights.config.to_dict(), sort_keys=True).encode()
    tensors = to_tensors(weights)
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(cfg_blob)), cfg_blob]
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def deserialize(blob: bytes) -> ModelWeights:
    view = memoryview(blob)
    pos = 0

    def read(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(view):
            raise WeightFileError("truncated weight file")
        chunk = bytes(view[pos : pos + n])
        pos += n
        return chunk

    if read(len(MAGIC)) != MAGIC:
        raise WeightFileError("not a weight file (bad magic)")
    (version,) = struct.unpack("<I", read(4))
    if version != FORMAT_VERSION:
        raise WeightFileError(f"unsupported format version {version}")
    (cfg_len,) = struct.unpack("<I", read(4))
    cfg = ModelConfig.from_mapping(json.loads(read(cfg_len)))
    (count,) = struct.unpack("<I", read(4))
    tensors: Dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", read(2))
        name = read(name_len).decode()
        (rank,) = struct.unpack("<B", read(1))
        shape = struct.unpack(f"<{rank}Q", read(8 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(read(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(view):
        raise WeightFileError(f"{len(view) - pos} trailing bytes after last tensor")
    return from_tensors(cfg, tensors)


def save_weights(weights: ModelWeights, path) -> None:
    Path(path).write_bytes(serialize(weights))


def load_weights(path) -> ModelWeights:
    return deserialize(Path(path).read_bytes())


def with_config(weights: ModelWeights, cfg: ModelConfig) -> ModelWeights:
    """Rebind weights to a config differing only in non-shape fields."""
    out = replace(weights, config=cfg)
    out.check()
    return out
