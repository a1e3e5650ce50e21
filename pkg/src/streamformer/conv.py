"""Convolution block with streaming-consistent depthwise convolution.

The block runs ``pw1 -> GLU -> depthwise -> layer norm -> swish -> pw2`` per
frame with a residual around the whole thing. The depthwise kernel is
left-aligned: output frame ``t`` reads post-GLU frames ``t-k+1 .. t``.

Center frames are convolved as one continuous sequence. Each block's
lookahead frames are convolved separately, prefixed by the last ``k-1``
post-GLU center frames of that same block, so lookahead outputs never see
another block's lookahead and center outputs never see the future.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .numerics import ShapeError, Tensor, glu_lastaxis, layer_norm, matmul, swish

LN_EPS = 1e-5


@dataclass(frozen=True)
class ConvWeights:
    pw1: Tensor  # [d x 2d]
    dw: Tensor  # [d x k]
    ln_gain: Tensor
    ln_bias: Tensor
    pw2: Tensor  # [d x d]

    def __post_init__(self):
        d = self.pw2.shape[0]
        if self.pw1.shape != (d, 2 * d) or self.pw2.shape != (d, d):
            raise ShapeError(f"pointwise shapes {self.pw1.shape}, {self.pw2.shape} inconsistent with d={d}")
        if self.dw.ndim != 2 or self.dw.shape[0] != d or self.dw.shape[1] < 1:
            raise ShapeError(f"depthwise kernel must be [{d} x k>=1], got {self.dw.shape}")
        if self.ln_gain.shape != (d,) or self.ln_bias.shape != (d,):
            raise ShapeError("conv layer-norm parameters must have length d")

    @property
    def kernel(self) -> int:
        return self.dw.shape[1]

    @property
    def dim(self) -> int:
        return self.pw2.shape[0]


@dataclass
class ConvState:
    """Last ``k-1`` post-GLU center frames seen so far (zeros at start)."""

    tail: Tensor

    @classmethod
    def initial(cls, kernel: int, dim: int, dtype=np.float64) -> "ConvState":
        return cls(np.zeros((kernel - 1, dim), dtype=dtype))


def pointwise_glu(x: Tensor, w: ConvWeights) -> Tensor:
    return glu_lastaxis(matmul(x, w.pw1))


def depthwise_valid(padded: Tensor, dw: Tensor) -> Tensor:
    """Valid per-channel convolution: ``len(padded) - k + 1`` output frames.

    Taps are accumulated oldest first.
    """
    k = dw.shape[1]
    n = padded.shape[0] - k + 1
    if n < 0:
        raise ShapeError(f"need at least {k - 1} frames of history, got {padded.shape[0]}")
    out = padded[0:n] * dw[:, 0]
    for j in range(1, k):
        out = out + padded[j : j + n] * dw[:, j]
    return out


def _history(tail: Tensor, k: int) -> Tensor:
    return tail[tail.shape[0] - (k - 1) :]


def lookahead_padding(post_glu_center: Tensor, block_end: int, kernel: int) -> Tensor:
    """The ``k-1`` post-GLU center frames ending at ``block_end``.

    Frames before the start of the utterance are zeros.
    """
    d = post_glu_center.shape[1]
    lead = np.zeros((kernel - 1, d), dtype=post_glu_center.dtype)
    return _history(np.concatenate([lead, post_glu_center[:block_end]]), kernel)


def _finish(y: Tensor, x_in: Tensor, w: ConvWeights) -> Tensor:
    return x_in + matmul(swish(layer_norm(y, w.ln_gain, w.ln_bias, LN_EPS)), w.pw2)


def _check_partition(block_bounds: Sequence[Tuple[int, int]], total: int) -> None:
    cursor = 0
    for start, end in block_bounds:
        if start != cursor or end <= start:
            raise ValueError(f"block bounds {list(block_bounds)} do not partition [0, {total})")
        cursor = end
    if cursor != total:
        raise ValueError(f"block bounds {list(block_bounds)} do not partition [0, {total})")


def conv_block_parallel(
    center: Tensor,
    right: Sequence[Tensor],
    block_bounds: Sequence[Tuple[int, int]],
    w: ConvWeights,
) -> Tuple[Tensor, List[Tensor]]:
    """Whole-utterance conv block.

    ``center`` holds every center frame in order; ``right[i]`` holds block
    ``i``'s lookahead copy. Returns outputs of the same shapes.
    """
    if len(right) != len(block_bounds):
        raise ValueError(f"{len(right)} lookahead spans for {len(block_bounds)} blocks")
    _check_partition(block_bounds, center.shape[0])
    k = w.kernel
    g_center = pointwise_glu(center, w)
    lead = np.zeros((k - 1, center.shape[1]), dtype=g_center.dtype)
    center_out = _finish(depthwise_valid(np.concatenate([lead, g_center]), w.dw), center, w)

    right_out = []
    for (_, end), r in zip(block_bounds, right):
        if r.shape[0] == 0:
            right_out.append(r.copy())
            continue
        padded = np.concatenate([lookahead_padding(g_center, end, k), pointwise_glu(r, w)])
        right_out.append(_finish(depthwise_valid(padded, w.dw), r, w))
    return center_out, right_out


def conv_block_streaming(
    center_i: Tensor, right_i: Tensor, state: ConvState, w: ConvWeights
) -> Tuple[Tensor, Tensor, ConvState]:
    """One block of the conv block, carrying ``k-1`` frames of history."""
    k = w.kernel
    if state.tail.shape != (k - 1, w.dim):
        raise ShapeError(f"conv state tail {state.tail.shape} != ({k - 1}, {w.dim})")
    if center_i.shape[1] != w.dim or right_i.shape[1:] != (w.dim,):
        raise ShapeError(f"block width does not match conv dim {w.dim}")
    history = np.concatenate([state.tail, pointwise_glu(center_i, w)])
    center_out = _finish(depthwise_valid(history, w.dw), center_i, w)
    pad = _history(history, k)
    if right_i.shape[0]:
        padded = np.concatenate([pad, pointwise_glu(right_i, w)])
        right_out = _finish(depthwise_valid(padded, w.dw), right_i, w)
    else:
        right_out = right_i.copy()
    return center_out, right_out, ConvState(pad.copy())


def causal_mode(w: ConvWeights, center: Tensor, state: ConvState) -> Tuple[Tensor, ConvState]:
    """Streaming conv with no lookahead (the ``r = 0`` configuration)."""
    empty = np.zeros((0, center.shape[1]), dtype=center.dtype)
    out, _, new_state = conv_block_streaming(center, empty, state, w)
    return out, new_state
