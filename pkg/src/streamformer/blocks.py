"""Superframe stacking and block segmentation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .numerics import Tensor

Span = Tuple[int, int]


def superframe_stack(frames: Tensor, factor: int) -> Tensor:
    """Concatenate non-overlapping groups of ``factor`` frames along features.

    A trailing remainder shorter than ``factor`` is dropped.
    """
    if factor < 1:
        raise ValueError(f"stack factor must be >= 1, got {factor}")
    frames = np.asarray(frames)
    n = frames.shape[0] // factor
    return frames[: n * factor].reshape(n, factor * frames.shape[1])


@dataclass(frozen=True)
class BlockPlan:
    """Center spans partitioning ``[0, n)`` and each block's lookahead span.

    Lookahead spans are hard copies of the first frames of later blocks,
    clipped at the end of the utterance.
    """

    num_frames: int
    centers: Tuple[Span, ...]
    lookaheads: Tuple[Span, ...]

    def __len__(self) -> int:
        return len(self.centers)

    def block_of(self, frame: int) -> int:
        for i, (start, end) in enumerate(self.centers):
            if start <= frame < end:
                return i
        raise IndexError(f"frame {frame} outside [0, {self.num_frames})")


def plan_blocks(num_frames: int, block_size: int, lookahead: int) -> BlockPlan:
    if block_size < 1:
        raise ValueError(f"block size must be >= 1, got {block_size}")
    if lookahead < 0:
        raise ValueError(f"lookahead must be >= 0, got {lookahead}")
    centers: List[Span] = []
    lookaheads: List[Span] = []
    for start in range(0, num_frames, block_size):
        end = min(start + block_size, num_frames)
        centers.append((start, end))
        lookaheads.append((end, min(end + lookahead, num_frames)))
    return BlockPlan(num_frames, tuple(centers), tuple(lookaheads))
