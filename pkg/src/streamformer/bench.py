"""Encoder-only real-time-factor measurement and run reports."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from .config import FRAME_MS, ModelConfig
from .encoder import encoder_forward_parallel, encoder_forward_streaming, stream_flush, stream_open, stream_push
from .numerics import precision_name
from .weights import ModelWeights


@dataclass
class RunReport:
    command: str
    config_digest: str
    metrics: Dict[str, object] = field(default_factory=dict)

    def lines(self) -> List[str]:
        out = [f"command={self.command}", f"config_digest={self.config_digest}"]
        for key, value in self.metrics.items():
            if isinstance(value, float):
                value = repr(value)
            elif isinstance(value, bool):
                value = str(value).lower()
            out.append(f"{key}={value}")
        return out

    def format(self) -> str:
        return "\n".join(self.lines())


def audio_seconds(num_superframes: int, stack_factor: int) -> float:
    return num_superframes * stack_factor * FRAME_MS / 1000.0


def _time_streaming(frames, cfg: ModelConfig, weights: ModelWeights):
    state = stream_open(cfg, weights)
    start = time.perf_counter()
    stream_push(state, frames)
    stream_flush(state)
    return time.perf_counter() - start, state.block_seconds


def bench(
    cfg: ModelConfig,
    weights: ModelWeights,
    seconds: float,
    mode: str = "streaming",
    repeat: int = 5,
    seed: int = 0,
) -> RunReport:
    """Time the encoder on ``seconds`` of random features (median of ``repeat``).

    The RTF covers encoder compute only, not decoding.
    """
    if mode not in ("parallel", "streaming"):
        raise ValueError(f"mode must be parallel or streaming, got {mode!r}")
    if repeat < 1:
        raise ValueError("repeat must be >= 1")
    n_frames = int(round(seconds * 1000 / FRAME_MS))
    frames = np.random.default_rng(seed).standard_normal((n_frames, cfg.input_dim))
    n_super = n_frames // cfg.stack_factor
    audio = audio_seconds(n_super, cfg.stack_factor)

    walls: List[float] = []
    block_times: List[float] = []
    for _ in range(repeat):
        if mode == "parallel":
            start = time.perf_counter()
            encoder_forward_parallel(frames, cfg, weights)
            walls.append(time.perf_counter() - start)
        else:
            wall, blocks = _time_streaming(frames, cfg, weights)
            walls.append(wall)
            block_times.extend(blocks)
    wall = statistics.median(walls)
    metrics: Dict[str, object] = {
        "mode": mode,
        "precision": precision_name(),
        "encoder_only": True,
        "frames": n_frames,
        "superframes": n_super,
        "audio_seconds": audio,
        "repeat": repeat,
        "wall_clock_seconds": wall,
        "rtf": wall / audio if audio > 0 else float("nan"),
    }
    if mode == "streaming":
        metrics["blocks"] = len(block_times) // repeat
        metrics["block_latency_ms_median"] = statistics.median(block_times) * 1000 if block_times else 0.0
        metrics["first_emission_ms"] = cfg.first_emission_ms
    return RunReport("bench", cfg.digest(), metrics)
