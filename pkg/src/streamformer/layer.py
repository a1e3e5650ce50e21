"""One encoder layer, in whole-utterance and block-by-block form.

Layer pipeline for block ``i`` with input ``X = [C; R]``:

* attention input ``X^ = LN(X + FFN1(X)/2)`` (macaron) or ``LN(X)``;
* keys/values over ``[memory; R_i; left context; C_i]`` where the left
  context is the ``L`` most recent center rows of ``X^`` before the block
  and memory holds compressed layer-input blocks;
* ``Z = Attn(X^) + X``;
* ``Y = ConvBlock(LN(Z))`` when convolution is on, else ``Y = Z``;
* output ``LN(Y + s * FFN2(Y))`` with ``s = 1/2`` for macaron, else 1.

With every addition switched off this reduces to the plain block-processing
layer ``LN(FFN(LN(Z)) + Z)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .attention import AttentionMask, MhaWeights, TalkingHeadsWeights, attend_projected
from .blocks import BlockPlan
from .config import ModelConfig
from .conv import ConvState, ConvWeights, conv_block_parallel, conv_block_streaming
from .numerics import ShapeError, Tensor, layer_norm, matmul, relu

LN_EPS = 1e-5


@dataclass(frozen=True)
class NormWeights:
    gain: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, LN_EPS)


@dataclass(frozen=True)
class FfnWeights:
    """Pre-norm two-layer ReLU feed-forward network (no linear biases)."""

    lin_in: Tensor
    lin_out: Tensor
    norm: NormWeights


@dataclass(frozen=True)
class LayerWeights:
    attn: MhaWeights
    norm_attn_in: NormWeights
    ffn2: FfnWeights
    norm_final: NormWeights
    ffn1: Optional[FfnWeights] = None
    talking_heads: Optional[TalkingHeadsWeights] = None
    conv: Optional[ConvWeights] = None
    norm_conv_in: Optional[NormWeights] = None
    compress: Optional[Tensor] = None

    def check(self, cfg: ModelConfig) -> None:
        expected = {
            "ffn1": cfg.use_macaron,
            "talking_heads": cfg.use_talking_heads,
            "conv": cfg.use_conv,
            "norm_conv_in": cfg.use_conv,
            "compress": cfg.memory_slots > 0,
        }
        for name, wanted in expected.items():
            if (getattr(self, name) is not None) != wanted:
                state = "missing" if wanted else "unexpected"
                raise ValueError(f"layer weights: {name} is {state} for this configuration")
        if self.attn.dim != cfg.model_dim or self.attn.num_heads != cfg.num_heads:
            raise ShapeError(f"attention weights are {self.attn.dim}/{self.attn.num_heads}, config wants {cfg.model_dim}/{cfg.num_heads}")
        if self.conv is not None and self.conv.kernel != cfg.kernel:
            raise ShapeError(f"conv kernel {self.conv.kernel} != config kernel {cfg.kernel}")
        if self.compress is not None and self.compress.shape != (cfg.block_size,):
            raise ShapeError(f"compression weights {self.compress.shape} != ({cfg.block_size},)")


@dataclass(frozen=True)
class MemoryBank:
    slots: Tensor  # [n_slots x d]
    indices: Tuple[int, ...]  # source block of each slot


def ffn(x: Tensor, w: FfnWeights) -> Tensor:
    return matmul(relu(matmul(w.norm(x), w.lin_in)), w.lin_out)


def macaron_ffn_half(x: Tensor, w: FfnWeights, out_norm: NormWeights) -> Tensor:
    return out_norm(x + 0.5 * ffn(x, w))


def compress_block(center_in: Tensor, weights: Tensor) -> Tensor:
    """Collapse a block of frames into one vector by a weighted sum.

    Blocks shorter than ``len(weights)`` use the leading weights rescaled to
    keep their total.
    """
    c = center_in.shape[0]
    if c == 0:
        raise ValueError("cannot compress an empty block")
    if c > weights.shape[0]:
        raise ShapeError(f"block of {c} frames exceeds {weights.shape[0]} compression weights")
    if c < weights.shape[0]:
        weights = weights[:c] * (weights.sum() / weights[:c].sum())
    return matmul(weights[None, :], center_in)[0]


def memory_block_range(i: int, slots: int, offset: int) -> range:
    """Blocks whose compressed vectors block ``i`` may attend."""
    return range(max(0, i - offset - slots), max(0, i - offset))


def memory_bank_select(all_slots: Sequence[Tensor], i: int, slots: int, offset: int) -> MemoryBank:
    idx = tuple(memory_block_range(i, slots, offset))
    if idx:
        bank = np.stack([all_slots[j] for j in idx])
    else:
        d = all_slots[0].shape[0] if len(all_slots) else 0
        bank = np.zeros((0, d))
    return MemoryBank(bank, idx)


def left_context_range(block_start: int, left_context: int) -> range:
    """Center frame indices cached as left context for a block."""
    return range(max(0, block_start - left_context), block_start)


def _attention_input(x: Tensor, w: LayerWeights) -> Tensor:
    if w.ffn1 is not None:
        return macaron_ffn_half(x, w.ffn1, w.norm_attn_in)
    return w.norm_attn_in(x)


def _output(y: Tensor, w: LayerWeights) -> Tensor:
    scale = 0.5 if w.ffn1 is not None else 1.0
    return w.norm_final(y + scale * ffn(y, w.ffn2))


def block_attention_mask(cfg: ModelConfig, plan: BlockPlan) -> AttentionMask:
    """Mask for the whole-utterance layout.

    Rows (queries) and the non-memory keys are ``[R_0, ..., R_{B-1}, C]``;
    memory keys (one per block, only when memory is on) come first.
    """
    n_blocks = len(plan)
    r_lens = [e - s for s, e in plan.lookaheads]
    r_offsets = np.concatenate([[0], np.cumsum(r_lens)]).astype(int)
    n_right = int(r_offsets[-1])
    n_mem = n_blocks if cfg.memory_slots > 0 else 0
    n_rows = n_right + plan.num_frames
    mask = np.zeros((n_rows, n_mem + n_rows), dtype=bool)
    for i, (start, end) in enumerate(plan.centers):
        allowed = np.zeros(n_mem + n_rows, dtype=bool)
        if n_mem:
            for j in memory_block_range(i, cfg.memory_slots, cfg.memory_offset):
                allowed[j] = True
        allowed[n_mem + r_offsets[i] : n_mem + r_offsets[i + 1]] = True
        lc = left_context_range(start, cfg.left_context)
        allowed[n_mem + n_right + lc.start : n_mem + n_right + end] = True
        mask[r_offsets[i] : r_offsets[i + 1]] = allowed
        mask[n_right + start : n_right + end] = allowed
    return mask


def layer_forward_parallel(
    center: Tensor,
    right: Sequence[Tensor],
    plan: BlockPlan,
    cfg: ModelConfig,
    w: LayerWeights,
) -> Tuple[Tensor, List[Tensor]]:
    """Run one layer over a whole utterance at once.

    ``center`` is every center frame in order and ``right[i]`` is block
    ``i``'s hard-copied lookahead. All blocks are processed in one masked
    attention call.
    """
    if len(right) != len(plan):
        raise ValueError(f"{len(right)} lookahead spans for {len(plan)} blocks")
    if center.shape[0] != plan.num_frames:
        raise ShapeError(f"center has {center.shape[0]} frames, plan expects {plan.num_frames}")
    d = cfg.model_dim
    r_lens = [r.shape[0] for r in right]
    n_right = sum(r_lens)
    rows = np.concatenate([*right, center]) if right else center
    x_hat = _attention_input(rows, w)

    keys_in = x_hat
    if cfg.memory_slots > 0:
        mem = np.stack([compress_block(center[s:e], w.compress) for s, e in plan.centers])
        keys_in = np.concatenate([mem, x_hat])
    q = matmul(x_hat, w.attn.w_q)
    k = matmul(keys_in, w.attn.w_k)
    v = matmul(keys_in, w.attn.w_v)
    mask = block_attention_mask(cfg, plan)
    attn = attend_projected(q, k, v, cfg.num_heads, mask, w.talking_heads)
    z = matmul(attn, w.attn.w_o) + rows

    if w.conv is not None:
        zn = w.norm_conv_in(z)
        splits = np.cumsum(r_lens)[:-1] if r_lens else []
        zn_right = np.split(zn[:n_right], splits) if right else []
        c_out, r_out = conv_block_parallel(zn[n_right:], zn_right, plan.centers, w.conv)
        y = np.concatenate([*r_out, c_out]) if right else c_out
    else:
        y = z
    out = _output(y, w)
    out_right = np.split(out[:n_right], np.cumsum(r_lens)[:-1]) if right else []
    return out[n_right:], [r.reshape(-1, d) for r in out_right]


@dataclass
class LayerState:
    """Everything one layer carries from block to block while streaming."""

    keys: Tensor  # projected left-context keys, <= L rows
    values: Tensor
    conv: Optional[ConvState]
    memory: List[Tensor] = field(default_factory=list)  # compressed inputs, <= S + O
    block_index: int = 0

    @classmethod
    def initial(cls, cfg: ModelConfig, dtype=np.float64) -> "LayerState":
        d = cfg.model_dim
        conv = ConvState.initial(cfg.kernel, d, dtype) if cfg.use_conv else None
        return cls(np.zeros((0, d), dtype=dtype), np.zeros((0, d), dtype=dtype), conv)


def _keep_last(x: Tensor, n: int) -> Tensor:
    return x[x.shape[0] - min(n, x.shape[0]) :]


def layer_forward_streaming(
    block: Tensor,
    lookahead: Tensor,
    state: LayerState,
    cfg: ModelConfig,
    w: LayerWeights,
) -> Tuple[Tensor, Tensor, LayerState]:
    """Run one layer on a single block, given the carried state.

    Returns the block's center and lookahead outputs and the next state; the
    input ``state`` is not modified.
    """
    if block.shape[0] == 0:
        raise ValueError("empty center block")
    if block.shape[1] != cfg.model_dim or lookahead.shape[1:] != (cfg.model_dim,):
        raise ShapeError(f"block width must be {cfg.model_dim}")
    if state.keys.shape[0] > cfg.left_context or (state.conv is None) == cfg.use_conv:
        raise ValueError("layer state does not match the configuration")
    r = lookahead.shape[0]
    rows = np.concatenate([lookahead, block])
    x_hat = _attention_input(rows, w)
    q = matmul(x_hat, w.attn.w_q)
    k_rows = matmul(x_hat, w.attn.w_k)
    v_rows = matmul(x_hat, w.attn.w_v)

    if cfg.memory_slots > 0:
        usable = state.memory[: max(0, len(state.memory) - cfg.memory_offset)]
        bank = usable[max(0, len(usable) - cfg.memory_slots) :]
    else:
        bank = []
    if bank:
        mem = np.stack(bank)
        k_mem, v_mem = matmul(mem, w.attn.w_k), matmul(mem, w.attn.w_v)
    else:
        k_mem = v_mem = np.zeros((0, cfg.model_dim), dtype=rows.dtype)
    # same key order as the whole-utterance layout: memory, R_i, left, C_i
    k = np.concatenate([k_mem, k_rows[:r], state.keys, k_rows[r:]])
    v = np.concatenate([v_mem, v_rows[:r], state.values, v_rows[r:]])
    attn = attend_projected(q, k, v, cfg.num_heads, None, w.talking_heads)
    z = matmul(attn, w.attn.w_o) + rows

    conv_state = state.conv
    if w.conv is not None:
        zn = w.norm_conv_in(z)
        y_c, y_r, conv_state = conv_block_streaming(zn[r:], zn[:r], state.conv, w.conv)
        y = np.concatenate([y_r, y_c])
    else:
        y = z
    out = _output(y, w)

    memory = state.memory
    if cfg.memory_slots > 0:
        memory = state.memory + [compress_block(block, w.compress)]
        memory = memory[max(0, len(memory) - cfg.memory_slots - cfg.memory_offset) :]
    new_state = LayerState(
        keys=_keep_last(np.concatenate([state.keys, k_rows[r:]]), cfg.left_context),
        values=_keep_last(np.concatenate([state.values, v_rows[r:]]), cfg.left_context),
        conv=conv_state,
        memory=memory,
        block_index=state.block_index + 1,
    )
    return out[r:], out[:r], new_state
