"""Utterance-level encoder: whole-utterance and streaming forward paths."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from .blocks import BlockPlan, plan_blocks, superframe_stack
from .config import ModelConfig
from .layer import LayerState, layer_forward_parallel, layer_forward_streaming
from .numerics import Tensor, get_dtype, matmul, precision
from .weights import ModelWeights


def _prepare(frames, cfg: ModelConfig, weights: ModelWeights) -> Tuple[np.ndarray, ModelWeights]:
    weights.check()
    if weights.config != cfg:
        raise ValueError("weights were generated for a different configuration")
    dtype = get_dtype()
    frames = np.asarray(frames, dtype=dtype)
    if frames.ndim != 2 or frames.shape[1] != cfg.input_dim:
        raise ValueError(f"expected frames of shape (T, {cfg.input_dim}), got {frames.shape}")
    if weights.input_proj.dtype != dtype:
        weights = weights.astype(dtype)
    return frames, weights


def encoder_forward_parallel(frames, cfg: ModelConfig, weights: ModelWeights) -> Tensor:
    """Encode a whole utterance at once.

    Returns one row per complete superframe: the top layer's center outputs.
    Lookahead copies are consumed internally.
    """
    frames, weights = _prepare(frames, cfg, weights)
    x = matmul(superframe_stack(frames, cfg.stack_factor), weights.input_proj)
    if x.shape[0] == 0:
        return x
    plan = plan_blocks(x.shape[0], cfg.block_size, cfg.lookahead)
    right = [x[s:e] for s, e in plan.lookaheads]
    center = x
    for lw in weights.layers:
        center, right = layer_forward_parallel(center, right, plan, cfg, lw)
    return center


@dataclass
class StreamingState:
    cfg: ModelConfig
    weights: ModelWeights
    layers: List[LayerState]
    raw: Tensor  # frames not yet forming a full superframe
    pending: Tensor  # projected superframes not yet emitted as center frames
    blocks_done: int = 0
    frames_seen: int = 0
    flushed: bool = False
    block_seconds: List[float] = field(default_factory=list)
    on_block: Optional[Callable[["StreamingState", int], None]] = None


def stream_open(
    cfg: ModelConfig,
    weights: ModelWeights,
    on_block: Optional[Callable[[StreamingState, int], None]] = None,
) -> StreamingState:
    """Start a stream. ``on_block(state, i)`` runs after block ``i`` is processed."""
    _, weights = _prepare(np.zeros((0, cfg.input_dim)), cfg, weights)
    dtype = get_dtype()
    return StreamingState(
        cfg=cfg,
        weights=weights,
        layers=[LayerState.initial(cfg, dtype) for _ in range(cfg.num_layers)],
        raw=np.zeros((0, cfg.input_dim), dtype=dtype),
        pending=np.zeros((0, cfg.model_dim), dtype=dtype),
        on_block=on_block,
    )


def _run_block(state: StreamingState, c: int, r: int) -> Tensor:
    start = time.perf_counter()
    center = state.pending[:c]
    right = state.pending[c : c + r]
    for n, lw in enumerate(state.weights.layers):
        center, right, state.layers[n] = layer_forward_streaming(center, right, state.layers[n], state.cfg, lw)
    state.pending = state.pending[c:]
    state.block_seconds.append(time.perf_counter() - start)
    if state.on_block is not None:
        state.on_block(state, state.blocks_done)
    state.blocks_done += 1
    return center


def stream_push(state: StreamingState, frames) -> List[Tensor]:
    """Feed raw frames; returns center outputs of every block completed."""
    if state.flushed:
        raise RuntimeError("stream already flushed")
    cfg = state.cfg
    frames = np.asarray(frames, dtype=state.raw.dtype).reshape(-1, cfg.input_dim)
    if frames.shape[0] == 0:
        return []
    state.frames_seen += frames.shape[0]
    raw = np.concatenate([state.raw, frames])
    n_full = raw.shape[0] // cfg.stack_factor
    if n_full:
        sup = superframe_stack(raw, cfg.stack_factor)
        state.pending = np.concatenate([state.pending, matmul(sup, state.weights.input_proj)])
    state.raw = raw[n_full * cfg.stack_factor :]
    out = []
    while state.pending.shape[0] >= cfg.block_size + cfg.lookahead:
        out.append(_run_block(state, cfg.block_size, cfg.lookahead))
    return out


def stream_flush(state: StreamingState) -> List[Tensor]:
    """Process what is left with clipped lookahead; drops a partial superframe."""
    if state.flushed:
        raise RuntimeError("stream already flushed")
    cfg = state.cfg
    out = []
    while state.pending.shape[0]:
        c = min(cfg.block_size, state.pending.shape[0])
        r = min(cfg.lookahead, state.pending.shape[0] - c)
        out.append(_run_block(state, c, r))
    state.flushed = True
    return out


def encoder_forward_streaming(
    frames,
    cfg: ModelConfig,
    weights: ModelWeights,
    chunk: Optional[int] = None,
    on_block: Optional[Callable[[StreamingState, int], None]] = None,
) -> Tensor:
    """Run a whole utterance through a stream, ``chunk`` frames per push."""
    frames, weights = _prepare(frames, cfg, weights)
    state = stream_open(cfg, weights, on_block)
    step = chunk or max(1, frames.shape[0])
    outs: List[Tensor] = []
    for start in range(0, frames.shape[0], step):
        outs.extend(stream_push(state, frames[start : start + step]))
    outs.extend(stream_flush(state))
    if not outs:
        return np.zeros((0, cfg.model_dim), dtype=get_dtype())
    return np.concatenate(outs)


@dataclass(frozen=True)
class EquivalenceReport:
    max_abs_diff: float  # streaming at working precision vs 64-bit whole-utterance reference
    location: Optional[Tuple[int, int]]
    dual_path_diff: float  # both paths at working precision
    rows: int
    precision: str


def _max_diff(a: Tensor, b: Tensor) -> Tuple[float, Optional[Tuple[int, int]]]:
    if a.shape != b.shape:
        raise ValueError(f"output shapes differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0, None
    diff = np.abs(a.astype(np.float64) - b.astype(np.float64))
    loc = np.unravel_index(int(np.argmax(diff)), diff.shape)
    return float(diff[loc]), (int(loc[0]), int(loc[1]))


def corrupt_conv_state(layer: int = 0, block: int = 0, amount: float = 1.0) -> Callable[[StreamingState, int], None]:
    """Block hook that perturbs one layer's convolution history (negative control)."""

    def hook(state: StreamingState, i: int) -> None:
        conv = state.layers[layer].conv
        if i == block and conv is not None and conv.tail.size:
            conv.tail = conv.tail + amount

    return hook


def check_equivalence(
    frames,
    cfg: ModelConfig,
    weights: ModelWeights,
    corrupt: bool = False,
    chunk: Optional[int] = None,
) -> EquivalenceReport:
    """Compare the streaming path against the whole-utterance path.

    The reference always runs in 64-bit, so in 32-bit mode ``max_abs_diff``
    also measures precision loss; ``dual_path_diff`` compares the two paths
    at the working precision.
    """
    hook = corrupt_conv_state() if corrupt else None
    streamed = encoder_forward_streaming(frames, cfg, weights, chunk=chunk, on_block=hook)
    parallel = encoder_forward_parallel(frames, cfg, weights)
    with precision("float64"):
        reference = encoder_forward_parallel(frames, cfg, weights)
    diff, loc = _max_diff(streamed, reference)
    dual, _ = _max_diff(streamed, parallel)
    return EquivalenceReport(diff, loc, dual, streamed.shape[0], str(get_dtype()))


@dataclass(frozen=True)
class LeakReport:
    max_change: float
    worst_block: Optional[int]
    blocks_checked: int


def leak_check(
    frames,
    cfg: ModelConfig,
    weights: ModelWeights,
    mode: str = "streaming",
    seed: int = 0,
    blocks: Optional[List[int]] = None,
) -> LeakReport:
    """Perturb every superframe past block ``i``'s lookahead; block ``i``'s
    output must not move at all."""
    forward = {"streaming": encoder_forward_streaming, "parallel": encoder_forward_parallel}[mode]
    frames, weights = _prepare(frames, cfg, weights)
    base = forward(frames, cfg, weights)
    plan: BlockPlan = plan_blocks(base.shape[0], cfg.block_size, cfg.lookahead)
    rng = np.random.default_rng(seed)
    worst, worst_block = 0.0, None
    chosen = range(len(plan)) if blocks is None else blocks
    for i in chosen:
        start, end = plan.centers[i]
        cut = plan.lookaheads[i][1] * cfg.stack_factor
        if cut >= frames.shape[0]:
            continue
        perturbed = frames.copy()
        perturbed[cut:] += rng.standard_normal(perturbed[cut:].shape) * 10.0
        moved = float(np.max(np.abs(forward(perturbed, cfg, weights)[start:end] - base[start:end])))
        if worst_block is None or moved > worst:
            worst, worst_block = moved, i
    return LeakReport(worst, worst_block, len(chosen))
