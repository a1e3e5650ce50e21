"""Streaming block-processing transformer encoder with lookahead-aware convolution,
talking-heads attention and compressed long-range memory."""

from .blocks import BlockPlan, plan_blocks, superframe_stack
from .config import ConfigError, ModelConfig, parameter_count
from .encoder import (
    EquivalenceReport,
    LeakReport,
    StreamingState,
    check_equivalence,
    encoder_forward_parallel,
    encoder_forward_streaming,
    leak_check,
    stream_flush,
    stream_open,
    stream_push,
)
from .estimator import StreamingEncoder
from .weights import ModelWeights, gen_weights, load_weights, save_weights

__version__ = "0.1.0"

__all__ = [
    "BlockPlan",
    "ConfigError",
    "EquivalenceReport",
    "LeakReport",
    "ModelConfig",
    "ModelWeights",
    "StreamingEncoder",
    "StreamingState",
    "check_equivalence",
    "encoder_forward_parallel",
    "encoder_forward_streaming",
    "gen_weights",
    "leak_check",
    "load_weights",
    "parameter_count",
    "plan_blocks",
    "save_weights",
    "stream_flush",
    "stream_open",
    "stream_push",
    "superframe_stack",
]
