"""Command-line front end.

    ctkd train CONFIG [--set key=value ...]
    ctkd sweep CONFIG --seeds 1,2,3,4,5 [--jobs N]
    ctkd compare CONFIG --methods baseline,rlkd,ctkd --seeds 1,2,3
    ctkd export-attention CHECKPOINT IMAGES.npy --tap 1 [--p 2] --out DIR
    ctkd resume RUN_DIR

Exit status: 0 success, 1 runtime failure, 2 configuration error. Errors are
reported as one line on stderr, ``error: <Kind>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments
from .config import TrainConfig, apply_overrides, load_config
from .errors import ConfigError, IncompatibilityError, ParameterError

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _config(args) -> TrainConfig:
    overrides = list(args.set or [])
    if args.output_dir:
        overrides.append(f"output_dir={args.output_dir}")
    if args.config is None:
        return TrainConfig.from_dict(apply_overrides({}, overrides)).validate()
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctkd", description="Collaborative teaching knowledge distillation experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def with_config(p):
        p.add_argument("config", nargs="?", help="YAML config file (omit to use documented defaults)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key; repeatable")
        p.add_argument("--output-dir", help="shorthand for --set output_dir=DIR")
        return p

    with_config(sub.add_parser("train", help="Stage 1 if needed, then the configured method"))
    p = with_config(sub.add_parser("sweep", help="one method over several seeds; reports the median"))
    p.add_argument("--seeds", type=_int_list, default=[1, 2, 3, 4, 5])
    p.add_argument("--jobs", type=int, default=1)
    p = with_config(sub.add_parser("compare", help="several methods under identical seeds"))
    p.add_argument("--methods", type=lambda s: [m for m in s.split(",") if m], required=True)
    p.add_argument("--seeds", type=_int_list, default=[1, 2, 3, 4, 5])
    p.add_argument("--jobs", type=int, default=1)
    p = sub.add_parser("export-attention", help="per-sample attention maps as PGM + CSV")
    p.add_argument("checkpoint")
    p.add_argument("images", help=".npy array of model-ready images, [N,3,32,32]")
    p.add_argument("--tap", type=int, required=True)
    p.add_argument("--p", type=float, default=2.0)
    p.add_argument("--out", required=True)
    p = sub.add_parser("resume", help="continue an interrupted run from its last completed epoch")
    p.add_argument("run_dir")
    return parser


def _train(args) -> int:
    summary = experiments.run(_config(args))
    print(json.dumps(summary.__dict__, sort_keys=True))
    return EXIT_OK


def _sweep(args) -> int:
    report = experiments.sweep(_config(args), args.seeds, args.jobs)
    for r in report.runs:
        print(f"seed {r.seed}: " + ("FAILED " + r.error if r.failed else f"{r.final_accuracy:.4f}"))
    print("median: " + ("n/a" if report.median is None else f"{report.median:.4f}"))
    return EXIT_RUNTIME if report.failed else EXIT_OK


def _compare(args) -> int:
    cfg = _config(args)
    reports = experiments.compare(cfg, args.methods, args.seeds, args.jobs)
    sys.stdout.write(experiments.comparison_table(cfg, reports))
    return EXIT_RUNTIME if any(r.failed for r in reports) else EXIT_OK


def _export(args) -> int:
    try:
        images = np.load(args.images)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read images {args.images}: {exc}") from None
    written = experiments.export_attention(args.checkpoint, images, args.tap, args.p, args.out)
    print(f"wrote {len(written)} maps to {args.out}")
    return EXIT_OK


def _resume(args) -> int:
    path = Path(args.run_dir) / "config.yaml"
    if not path.exists():
        raise ConfigError(f"{args.run_dir} has no config.yaml snapshot")
    summary = experiments.run(load_config(path), resume=True)
    print(json.dumps(summary.__dict__, sort_keys=True))
    return EXIT_OK


VERBS = {"train": _train, "sweep": _sweep, "compare": _compare, "export-attention": _export, "resume": _resume}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return VERBS[args.verb](args)
    except (ConfigError, IncompatibilityError, ParameterError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        print("error: Interrupted: run state saved at the last completed epoch", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
