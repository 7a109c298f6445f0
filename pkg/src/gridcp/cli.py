"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data or configuration error,
3 coverage band violation reported by the coverage-sim subcommand.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

from . import __version__
from .levels import level_fraction, make_scheme
from .pipeline import (METHODS, PipelineConfig, load_config, run_apply,
                       run_calibrate, run_coverage_sim, run_evaluate,
                       run_quantiles, run_report, run_synth)
from .storage import DataError


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _level_arg(text: str):
    try:
        return level_fraction(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="gridcp",
        description="Conformalized quantile grids for downscaled ensembles.",
    )
    parser.add_argument("--version", action="version",
                        version=f"gridcp {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="JSON pipeline config; flags below override it")
    common.add_argument("--method", choices=METHODS,
                        help="interval construction method")
    common.add_argument("--level", metavar="COVERAGE", action="append",
                        type=_level_arg,
                        help="coverage level, repeatable; replaces the level set")
    common.add_argument("--jobs", metavar="N", type=int,
                        help="worker processes for record or trial loops")
    common.add_argument("--seed", metavar="N", type=int,
                        help="override the synthetic noise seed")
    common.add_argument("--out", metavar="DIR",
                        help="override the output directory")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND",
                                parser_class=_Parser)
    sub.add_parser("synth", parents=[common],
                   help="generate calibration and test splits")
    sub.add_parser("quantiles", parents=[common],
                   help="persist per-record ensemble quantile grids")
    sub.add_parser("calibrate", parents=[common],
                   help="compute conformal offsets on the calibration split")
    sub.add_parser("apply", parents=[common],
                   help="write calibrated intervals for the test split")
    sub.add_parser("evaluate", parents=[common],
                   help="run the metric suite on the test split")
    sub.add_parser("coverage-sim", parents=[common],
                   help="Monte-Carlo check of the finite-sample coverage band")
    sub.add_parser("report", parents=[common],
                   help="merge evaluated methods into comparison tables and charts")
    return parser


def _build_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    updates = {}
    if args.method:
        updates["method"] = args.method
    if args.out:
        updates["output_dir"] = args.out
    if args.jobs is not None:
        updates["jobs"] = args.jobs
    if args.level:
        updates["scheme"] = make_scheme(args.level)
    if args.seed is not None:
        updates["synth"] = dataclasses.replace(cfg.synth, noise_seed=args.seed)
    if updates:
        cfg = dataclasses.replace(cfg, **updates)
    return cfg


def _cmd_synth(cfg: PipelineConfig) -> int:
    base = run_synth(cfg)
    print(f"wrote {cfg.n_calibration} calibration + {cfg.n_test} test records"
          f" under {base}")
    return 0


def _cmd_quantiles(cfg: PipelineConfig) -> int:
    out = run_quantiles(cfg)
    print(f"wrote quantile grids under {out}")
    return 0


def _cmd_calibrate(cfg: PipelineConfig) -> int:
    out = run_calibrate(cfg)
    print(f"wrote {cfg.method} offsets under {out}")
    return 0


def _cmd_apply(cfg: PipelineConfig) -> int:
    out = run_apply(cfg)
    print(f"wrote {cfg.method} intervals under {out}")
    return 0


def _cmd_evaluate(cfg: PipelineConfig) -> int:
    method_dir, summary = run_evaluate(cfg)
    for key, row in summary["coverage"].items():
        print(f"coverage {key}: picp {row['picp']:.4f}"
              f" ({row['pct_deviation']:+.2f}%),"
              f" interval score {row['mean_interval_score']:.4f}")
    print(f"wrote evaluation under {method_dir}")
    return 0


def _cmd_coverage_sim(cfg: PipelineConfig) -> int:
    ok, stats = run_coverage_sim(cfg)
    for key, row in stats["levels"].items():
        verdict = "ok" if row["within_band"] else "VIOLATION"
        print(f"coverage {key}: mean {row['mean_coverage']:.5f}"
              f" in [{row['band_lower']:.5f}, {row['band_upper']:.5f}] {verdict}")
    if not ok:
        print("coverage band violated", file=sys.stderr)
        return 3
    print("coverage band satisfied")
    return 0


def _cmd_report(cfg: PipelineConfig) -> int:
    out = run_report(cfg)
    print(f"wrote comparison report under {out}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "quantiles": _cmd_quantiles,
    "calibrate": _cmd_calibrate,
    "apply": _cmd_apply,
    "evaluate": _cmd_evaluate,
    "coverage-sim": _cmd_coverage_sim,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("gridcp: error: a subcommand is required", file=sys.stderr)
        return 1
    try:
        cfg = _build_config(args)
        return _COMMANDS[args.command](cfg)
    except DataError as exc:
        print(f"gridcp: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"gridcp: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
