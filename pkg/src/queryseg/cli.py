"""Command-line entry points.

Subcommands: gen-data, train, eval, ablate, report. Every command exits 0
on success; failures map the exception category to a stable exit code so
scripts can branch on the kind of problem:

    1  unexpected internal error
    2  configuration / usage error
    3  data or phantom-geometry error
    4  non-finite loss during training
    5  degenerate metric input
    6  checkpoint error
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DegenerateInputError,
    GeometryError,
    NonFiniteLossError,
    QuerysegError,
)
from .harness.ablate import ABLATION_AXES, ablate
from .harness.config import ExperimentConfig, output_root
from .harness.data import ensure_dataset
from .harness.evaluate import evaluate
from .harness.report import export_report
from .harness.train import train
from .oodscore import SCORE_METHODS

EXIT_CODES = (
    (ConfigError, 2),
    ((DataError, GeometryError), 3),
    (NonFiniteLossError, 4),
    (DegenerateInputError, 5),
    (CheckpointError, 6),
    (QuerysegError, 1),
)


def _load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return ExperimentConfig.from_file(path)


def cmd_gen_data(args) -> int:
    config = _load_config(args.config)
    run_dir = output_root(args.out) / config.output_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest, cases_dir = ensure_dataset(config, run_dir)
    n = len(manifest.all_cases())
    print(f"wrote {n} cases under {cases_dir.parent}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config)
    record = train(config, args.out)
    print(f"run complete: {record.run_dir}")
    print(f"final checkpoint: {record.checkpoint_final}")
    return 0


def cmd_eval(args) -> int:
    methods = tuple(args.methods.split(",")) if args.methods else None
    report = evaluate(
        args.checkpoint, args.dataset, methods=methods, out_dir=args.out
    )
    for method, m in sorted(report.methods.items()):
        print(
            f"{method}: auroc={m.auroc:.4f} aupr={m.aupr:.4f} "
            f"fpr95={m.fpr95:.4f} case_auc={m.case_auc:.4f}"
        )
    print(f"mean inlier tumor dice: {report.mean_inlier_tumor_dice:.4f}")
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args.config)
    records, table = ablate(config, args.axis, args.out)
    print(f"{len(records)} runs; comparison table: {table}")
    return 0


def cmd_report(args) -> int:
    written = export_report([Path(d) for d in args.runs], args.out)
    print(f"table: {written['table'][0]}")
    print(f"montages: {len(written['montages'])}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="queryseg",
        description="Cluster-center query segmentation with OOD localization on phantoms.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="materialize the phantom dataset for a config")
    p.add_argument("--config", help="experiment config JSON (defaults apply if omitted)")
    p.add_argument("--out", help="output root (else $QUERYSEG_OUTPUT_ROOT or cwd)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the configured training")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--out", help="output root")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="directory containing manifest.json")
    p.add_argument(
        "--methods",
        help=f"comma-separated subset of {','.join(SCORE_METHODS)} (default: all)",
    )
    p.add_argument("--out", help="directory for report + exported maps")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation axis")
    p.add_argument("--config", help="base experiment config JSON")
    p.add_argument(
        "--axis", required=True, choices=ABLATION_AXES, help="ablation axis"
    )
    p.add_argument("--out", help="output root")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="aggregate runs into table + montages")
    p.add_argument("--runs", nargs="+", required=True, help="run directories")
    p.add_argument("--out", required=True, help="report output directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except QuerysegError as err:
        for kinds, code in EXIT_CODES:
            if isinstance(err, kinds):
                print(f"error[{type(err).__name__}]: {err}", file=sys.stderr)
                return code
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
