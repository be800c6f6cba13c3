"""Command-line entry point.

Exit codes: 0 success, 1 bad input (files, flags, config), 2 numeric failure
during optimization. The run seed resolves as --seed, then the DUET_SEED
environment variable, then the config's "seed" key, then 0.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import InputError, NumericError
from .metrics import metrics
from .pipeline import STAGES, PipelineConfig, run_pipeline
from .tsvio import read_matrix_tsv

STAGE_COMMANDS = ("synth", "deconv", "align", "regress", "fuse", "retrieve",
                  "predict")


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; the contract wants usage + exit 1
    def error(self, message):
        raise InputError(f"{message}\n{self.format_usage().rstrip()}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="duet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add_run_flags(p):
        p.add_argument("--config", type=Path, default=None,
                       help="JSON config (defaults used when omitted)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=Path, required=True,
                       help="workspace directory")

    for name in STAGE_COMMANDS:
        add_run_flags(sub.add_parser(name, help=f"run the {name} stage"))
    add_run_flags(sub.add_parser("pipeline", help="run every stage in order"))

    ev = sub.add_parser("eval", help="score a prediction TSV against a truth TSV")
    ev.add_argument("--pred", type=Path, required=True)
    ev.add_argument("--truth", type=Path, required=True)
    return parser


def _resolve_seed(args, cfg: PipelineConfig) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("DUET_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise InputError(f"DUET_SEED must be an integer, got {env!r}") from None
    return cfg.seed


def _load_config(args) -> PipelineConfig:
    if args.config is None:
        return PipelineConfig()
    return PipelineConfig.from_json(args.config)


def _run(argv) -> int:
    args = _build_parser().parse_args(argv)

    if args.command == "eval":
        pred, pred_ids, _ = read_matrix_tsv(args.pred)
        truth, truth_ids, _ = read_matrix_tsv(args.truth)
        if pred_ids != truth_ids:
            raise InputError("--pred and --truth row ids disagree")
        report = metrics(pred, truth)
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
        return 0

    cfg = _load_config(args)
    seed = _resolve_seed(args, cfg)
    if args.command == "pipeline":
        report = run_pipeline(cfg, seed, args.out)
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        STAGES[args.command](cfg, seed, args.out)
    return 0


def main(argv=None) -> int:
    try:
        return _run(argv)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
