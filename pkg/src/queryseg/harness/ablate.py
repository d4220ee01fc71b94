"""Ablation matrices: QD loss on/off, the query-partition grid, and the
post-hoc score-method comparison (one checkpoint, four scorings)."""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

from ..errors import ConfigError
from ..metrics import EvalReport
from .config import ExperimentConfig, LossSettings, output_root
from .evaluate import evaluate
from .report import summary_rows, write_metrics_table
from .train import RunRecord, train

__all__ = ["ABLATION_AXES", "PARTITION_GRID", "run_experiment", "ablate"]

ABLATION_AXES = ("qd_on_off", "partition_grid", "score_method")

# Query distributions compared in the partition ablation.
PARTITION_GRID = ((8, 4, 20), (8, 20, 4), (16, 4, 12), (20, 4, 8), (24, 4, 4))


def run_experiment(config: ExperimentConfig, root: str | Path | None = None) -> RunRecord:
    """Train, then evaluate the final checkpoint with the configured methods."""
    record = train(config, root)
    report = evaluate(
        record.checkpoint_final,
        Path(record.run_dir) / "dataset",
        methods=config.eval_methods,
        out_dir=Path(record.run_dir) / "eval",
        config_tag=config.tag,
    )
    record.report_path = str(Path(record.run_dir) / "eval" / "report.json")
    record.save(Path(record.run_dir) / "run_record.json")
    return record


def _variants(base: ExperimentConfig, axis: str) -> list[ExperimentConfig]:
    if axis == "qd_on_off":
        on_weight = base.loss.qd_weight if base.loss.qd_weight > 0 else 0.1
        return [
            replace(
                base,
                loss=LossSettings(qd_weight=0.0, ds_weight=base.loss.ds_weight),
                tag=f"{base.tag}-qd_off",
                output_dir=f"{base.output_dir}-qd_off",
            ),
            replace(
                base,
                loss=LossSettings(qd_weight=on_weight, ds_weight=base.loss.ds_weight),
                tag=f"{base.tag}-qd_on",
                output_dir=f"{base.output_dir}-qd_on",
            ),
        ]
    if axis == "partition_grid":
        variants = []
        for part in PARTITION_GRID:
            name = "-".join(map(str, part))
            variants.append(
                replace(
                    base,
                    model=replace(base.model, partition=part, num_queries=sum(part)),
                    tag=f"{base.tag}-part{name}",
                    output_dir=f"{base.output_dir}-part{name}",
                )
            )
        return variants
    raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")


def ablate(
    base_config: ExperimentConfig, axis: str, root: str | Path | None = None
) -> tuple[list[RunRecord], Path]:
    """Run one ablation axis and write its comparison table.

    `score_method` retrains nothing: it evaluates the base run's checkpoint
    once with all four scoring methods.
    """
    base_root = output_root(str(root) if root else None)
    table_path = base_root / f"{base_config.output_dir}-ablation-{axis}.csv"

    if axis == "score_method":
        config = replace(
            base_config,
            eval_methods=("maxquery_pre", "maxquery_post", "msp", "maxlogit"),
        )
        record = run_experiment(config, root)
        report = EvalReport.from_json(
            (Path(record.run_dir) / "eval" / "report.json").read_text()
        )
        write_metrics_table(summary_rows(record, report), table_path)
        return [record], table_path

    records = []
    rows = []
    for config in _variants(base_config, axis):
        record = run_experiment(config, root)
        records.append(record)
        report = EvalReport.from_json(
            (Path(record.run_dir) / "eval" / "report.json").read_text()
        )
        rows.extend(summary_rows(record, report))
    write_metrics_table(rows, table_path)
    return records, table_path
