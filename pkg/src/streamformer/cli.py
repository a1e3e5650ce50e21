"""Command-line harness.

Exit codes: 0 success, 1 check failure, 2 usage or configuration error.
The ``STREAMFORMER_PRECISION`` environment variable overrides the config's
precision field.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import numerics
from .bench import RunReport, bench
from .config import ConfigError, ModelConfig, parameter_count
from .encoder import check_equivalence, encoder_forward_parallel, encoder_forward_streaming, leak_check
from .features import read_features, write_features
from .weights import WeightFileError, gen_weights, load_weights, save_weights, to_tensors

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _load_config(path: Optional[str]) -> ModelConfig:
    return ModelConfig.load(path) if path else ModelConfig()


def _apply_precision(cfg: ModelConfig) -> None:
    name = os.environ.get(numerics.PRECISION_ENV) or cfg.precision
    try:
        numerics.set_precision(name)
    except ValueError as exc:
        raise UsageError(f"{numerics.PRECISION_ENV}: {exc}") from None


def _model(args) -> tuple:
    """Resolve (config, weights) from --config/--weights/--seed."""
    cfg = _load_config(args.config) if args.config else None
    if args.weights:
        weights = load_weights(args.weights)
        if cfg is not None and cfg != weights.config:
            raise UsageError(f"--config does not match the config stored in {args.weights}")
        cfg = weights.config
    else:
        cfg = cfg or ModelConfig()
        weights = gen_weights(cfg, args.seed)
    _apply_precision(cfg)
    return cfg, weights


def cmd_gen_weights(args) -> int:
    cfg = _load_config(args.config)
    weights = gen_weights(cfg, args.seed)
    save_weights(weights, args.out)
    report = RunReport(
        "gen-weights",
        cfg.digest(),
        {
            "tensors": len(to_tensors(weights)),
            "parameters": weights.num_parameters,
            "parameters_expected": parameter_count(cfg),
            "sha256": hashlib.sha256(Path(args.out).read_bytes()).hexdigest(),
            "out": args.out,
        },
    )
    print(report.format())
    return EXIT_OK


def cmd_run(args) -> int:
    cfg, weights = _model(args)
    frames = read_features(args.input)
    if args.mode == "parallel":
        out = encoder_forward_parallel(frames, cfg, weights)
    else:
        out = encoder_forward_streaming(frames, cfg, weights, chunk=args.chunk)
    write_features(args.output, out, element_size=args.element_size)
    print(RunReport("run", cfg.digest(), {"mode": args.mode, "emitted_frames": out.shape[0], "output": args.output}).format())
    return EXIT_OK


def cmd_check(args) -> int:
    cfg, weights = _model(args)
    if args.input:
        frames = read_features(args.input)
    else:
        frames = np.random.default_rng(args.seed).standard_normal((args.random, cfg.input_dim))
    eq = check_equivalence(frames, cfg, weights)
    leak = leak_check(frames, cfg, weights, seed=args.seed)
    equivalent = eq.max_abs_diff <= args.tolerance
    no_leak = leak.max_change == 0.0
    metrics = {
        "precision": eq.precision,
        "emitted_frames": eq.rows,
        "tolerance": args.tolerance,
        "max_abs_diff": eq.max_abs_diff,
        "argmax_row": eq.location[0] if eq.location else -1,
        "argmax_col": eq.location[1] if eq.location else -1,
        "dual_path_diff": eq.dual_path_diff,
        "leak_max_change": leak.max_change,
        "leak_blocks_checked": leak.blocks_checked,
        "equivalence_pass": equivalent,
        "leak_pass": no_leak,
        "pass": equivalent and no_leak,
    }
    print(RunReport("check", cfg.digest(), metrics).format())
    return EXIT_OK if equivalent and no_leak else EXIT_FAIL


def cmd_bench(args) -> int:
    cfg, weights = _model(args)
    report = bench(cfg, weights, args.seconds, mode=args.mode, repeat=args.repeat, seed=args.seed)
    print(report.format())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="streamformer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-weights", help="write seeded random weights")
    p.add_argument("--config", help="flat key: value config file (default: desk-scale model)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_weights)

    def model_args(p):
        p.add_argument("--config")
        p.add_argument("--weights", help="weight file; generated from --seed when omitted")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("run", help="encode a feature file")
    model_args(p)
    p.add_argument("--mode", choices=("parallel", "streaming"), default="streaming")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--chunk", type=int, default=None, help="frames per push in streaming mode")
    p.add_argument("--element-size", type=int, choices=(4, 8), default=8)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("check", help="streaming/whole-utterance equivalence and leak test")
    model_args(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input")
    src.add_argument("--random", type=int, metavar="T", help="T random 10 ms frames")
    p.add_argument("--tolerance", type=float, default=1e-9)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("bench", help="encoder-only real-time factor")
    model_args(p)
    p.add_argument("--seconds", type=float, default=10.0)
    p.add_argument("--mode", choices=("parallel", "streaming"), default="streaming")
    p.add_argument("--repeat", type=int, default=5)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    previous = numerics.precision_name()
    try:
        return args.func(args)
    except (ConfigError, UsageError, WeightFileError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    finally:
        numerics.set_precision(previous)


if __name__ == "__main__":
    sys.exit(main())
