"""Masked scaled-dot-product, multi-head and talking-heads attention."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numerics import ShapeError, Tensor, matmul, softmax_lastaxis

# Boolean [num_queries x num_keys]; True marks keys a query may attend.
AttentionMask = np.ndarray


@dataclass(frozen=True)
class MhaWeights:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    num_heads: int

    def __post_init__(self):
        d = self.w_q.shape[0]
        for name in ("w_q", "w_k", "w_v", "w_o"):
            if getattr(self, name).shape != (d, d):
                raise ShapeError(f"{name} must be {d}x{d}, got {getattr(self, name).shape}")
        if self.num_heads < 1 or d % self.num_heads:
            raise ShapeError(f"model dim {d} is not divisible by num_heads={self.num_heads}")

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]


@dataclass(frozen=True)
class TalkingHeadsWeights:
    """Head-mixing matrices applied to the logits (``w_l``) and to the
    normalized weights (``w_r``)."""

    w_l: Tensor
    w_r: Tensor

    def __post_init__(self):
        h = self.w_l.shape[0]
        if self.w_l.shape != (h, h) or self.w_r.shape != (h, h):
            raise ShapeError(f"talking-heads matrices must be square and equal, got {self.w_l.shape}, {self.w_r.shape}")


def _check_mask(mask: Optional[AttentionMask], f_q: int, f_k: int) -> Optional[AttentionMask]:
    if mask is None:
        if f_k == 0:
            raise ValueError("attention over zero keys")
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (f_q, f_k):
        raise ShapeError(f"mask shape {mask.shape} does not match ({f_q}, {f_k})")
    empty = np.flatnonzero(~mask.any(axis=1))
    if empty.size:
        raise ValueError(f"query rows {empty.tolist()} have every key masked")
    return mask


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[AttentionMask] = None) -> Tensor:
    """Single-head ``softmax(q k^T / sqrt(d_h)) v`` with masked keys at -inf."""
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"incompatible q/k/v shapes {q.shape}, {k.shape}, {v.shape}")
    mask = _check_mask(mask, q.shape[0], k.shape[0])
    logits = matmul(q, k.T) / math.sqrt(q.shape[1])
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    return matmul(softmax_lastaxis(logits), v)


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    f, d = x.shape
    return x.reshape(f, num_heads, d // num_heads).transpose(1, 0, 2)


def _mix_heads(cube: Tensor, mixing: Tensor) -> Tensor:
    # cube is [h, f_q, f_k]; mixes along h with a deterministic matmul
    h, f_q, f_k = cube.shape
    flat = cube.reshape(h, f_q * f_k).T
    return matmul(flat, mixing).T.reshape(h, f_q, f_k)


def attend_projected(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    num_heads: int,
    mask: Optional[AttentionMask] = None,
    talking_heads: Optional[TalkingHeadsWeights] = None,
) -> Tensor:
    """Attention over already-projected queries/keys/values.

    Returns the concatenated per-head outputs, before the output projection.
    With ``talking_heads`` the logit cube is mixed across heads, then masked,
    normalized over keys and mixed again.
    """
    f_q, d = q.shape
    f_k = k.shape[0]
    if k.shape[1] != d or v.shape != k.shape:
        raise ShapeError(f"incompatible q/k/v shapes {q.shape}, {k.shape}, {v.shape}")
    mask = _check_mask(mask, f_q, f_k)
    qh, kh, vh = (_split_heads(t, num_heads) for t in (q, k, v))
    scale = math.sqrt(d // num_heads)
    logits = np.stack([matmul(qh[i], kh[i].T) / scale for i in range(num_heads)])
    if talking_heads is not None:
        if talking_heads.w_l.shape[0] != num_heads:
            raise ShapeError(f"talking-heads extent {talking_heads.w_l.shape[0]} != num_heads {num_heads}")
        logits = _mix_heads(logits, talking_heads.w_l)
    if mask is not None:
        logits = np.where(mask[None], logits, -np.inf)
    probs = softmax_lastaxis(logits)
    if talking_heads is not None:
        probs = _mix_heads(probs, talking_heads.w_r)
    heads = [matmul(probs[i], vh[i]) for i in range(num_heads)]
    return np.concatenate(heads, axis=1)


def multi_head_attention(
    q_in: Tensor, k_in: Tensor, v_in: Tensor, w: MhaWeights, mask: Optional[AttentionMask] = None
) -> Tensor:
    q, k, v = matmul(q_in, w.w_q), matmul(k_in, w.w_k), matmul(v_in, w.w_v)
    return matmul(attend_projected(q, k, v, w.num_heads, mask), w.w_o)


def talking_heads_attention(
    q_in: Tensor,
    k_in: Tensor,
    v_in: Tensor,
    w: MhaWeights,
    th: TalkingHeadsWeights,
    mask: Optional[AttentionMask] = None,
) -> Tensor:
    q, k, v = matmul(q_in, w.w_q), matmul(k_in, w.w_k), matmul(v_in, w.w_v)
    return matmul(attend_projected(q, k, v, w.num_heads, mask, talking_heads=th), w.w_o)
