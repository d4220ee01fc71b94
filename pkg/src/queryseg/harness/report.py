"""Run artifacts: the metrics summary table and per-case score-map montages."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib
import numpy as np

from ..errors import DataError
from ..metrics import EvalReport
from ..synthdata import load_volume, read_manifest
from .train import RunRecord

matplotlib.use("Agg", force=True)
import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

__all__ = ["TABLE_COLUMNS", "write_metrics_table", "summary_rows", "export_report"]

TABLE_COLUMNS = (
    "tag",
    "config_hash",
    "qd_weight",
    "partition",
    "method",
    "auroc",
    "aupr",
    "fpr95",
    "case_auc",
    "mean_inlier_tumor_dice",
)


def summary_rows(record: RunRecord, report: EvalReport) -> list[dict]:
    """One table row per score method of one run."""
    cfg = json.loads(record.config_json)
    partition = "-".join(str(p) for p in cfg["model"]["partition"])
    rows = []
    for method, m in sorted(report.methods.items()):
        rows.append(
            {
                "tag": report.config_tag,
                "config_hash": record.config_hash,
                "qd_weight": repr(cfg["loss"]["qd_weight"]),
                "partition": partition,
                "method": method,
                "auroc": repr(m.auroc),
                "aupr": repr(m.aupr),
                "fpr95": repr(m.fpr95),
                "case_auc": repr(m.case_auc),
                "mean_inlier_tumor_dice": repr(report.mean_inlier_tumor_dice),
            }
        )
    return rows


def write_metrics_table(rows: list[dict], path: str | Path) -> Path:
    """CSV summary; float cells use repr so reruns are byte-identical."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return path


def _load_run(run_dir: Path) -> tuple[RunRecord, EvalReport]:
    record_path = run_dir / "run_record.json"
    report_path = run_dir / "eval" / "report.json"
    if not record_path.exists():
        raise DataError(f"{run_dir} has no run_record.json")
    if not report_path.exists():
        raise DataError(f"{run_dir} has no evaluation report; run `queryseg eval` first")
    return RunRecord.load(record_path), EvalReport.from_json(report_path.read_text())


def _montage(run_dir: Path, report: EvalReport, out_dir: Path) -> list[Path]:
    """Image / ground truth / per-method score maps for every OOD test case."""
    manifest = read_manifest(run_dir / "dataset" / "manifest.json")
    cases_dir = run_dir / "dataset" / "cases"
    maps_dir = run_dir / "eval" / "anomaly_maps"
    methods = sorted(report.methods)
    written = []
    for rec in manifest.cases("test_ood"):
        vol = load_volume(manifest.spec, rec, cases_dir)
        panels = [("image", vol.image[:, :, 0]), ("ground truth", vol.label_map[:, :, 0])]
        for method in methods:
            map_path = maps_dir / f"{rec.case_id}.{method}.png"
            if map_path.exists():
                panels.append((method, plt.imread(map_path)))
            else:
                arr = np.load(maps_dir / f"{rec.case_id}.{method}.npy")
                panels.append((method, arr[:, :, arr.shape[2] // 2]))
        fig, axes = plt.subplots(1, len(panels), figsize=(2.2 * len(panels), 2.6))
        for ax, (title, plane) in zip(np.atleast_1d(axes), panels):
            cmap = "tab10" if title == "ground truth" else "gray"
            ax.imshow(plane, cmap=cmap, interpolation="nearest")
            ax.set_title(title, fontsize=8)
            ax.axis("off")
        fig.suptitle(f"{report.config_tag} / {rec.case_id}", fontsize=9)
        fig.tight_layout()
        out_path = out_dir / f"{rec.case_id}.png"
        fig.savefig(out_path, dpi=120)
        plt.close(fig)
        written.append(out_path)
    return written


def export_report(run_dirs: list[str | Path], out_dir: str | Path) -> dict[str, list[str]]:
    """Aggregate finished runs into `metrics_table.csv` plus montage images.

    Returns the written file paths keyed by artifact kind.
    """
    if not run_dirs:
        raise DataError("export needs at least one run directory")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    montages: list[str] = []
    for run_dir in map(Path, run_dirs):
        record, report = _load_run(run_dir)
        rows.extend(summary_rows(record, report))
        montage_dir = out_dir / "montages" / (report.config_tag or run_dir.name)
        montage_dir.mkdir(parents=True, exist_ok=True)
        montages.extend(str(p) for p in _montage(run_dir, report, montage_dir))
    table = write_metrics_table(rows, out_dir / "metrics_table.csv")
    return {"table": [str(table)], "montages": montages}
