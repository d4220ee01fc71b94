"""Checkpoint evaluation: forward over the test partitions, anomaly scoring
with every requested method, pooled pixel metrics, case-level AUC, and
inlier Dice on the validation split."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from ..errors import DataError
from ..metrics import (
    EvalReport,
    OodMetrics,
    ScoreAccumulator,
    auroc,
    aupr,
    case_auc,
    fpr_at_tpr,
    mask_dice,
)
from ..oodscore import SCORE_METHODS, compute_map, case_score, export_anomaly_map
from ..synthdata import read_manifest
from .checkpoint import load_model
from .data import image_to_tensor, load_partition

__all__ = ["evaluate", "forward_numpy"]


def forward_numpy(model, volume) -> dict[str, np.ndarray]:
    """Single-volume forward pass, outputs as float64 numpy matrices."""
    with torch.no_grad():
        out = model(image_to_tensor(volume.image).unsqueeze(0))
    return {
        "responses": out.query_responses[0].double().numpy(),
        "assignments": out.assignments[0].double().numpy(),
        "logits": out.seg_logits[0].double().numpy(),
    }


def evaluate(
    checkpoint_path: str | Path,
    dataset_dir: str | Path,
    methods: tuple[str, ...] | None = None,
    out_dir: str | Path | None = None,
    config_tag: str | None = None,
) -> EvalReport:
    """Score a checkpoint on a materialized dataset and export artifacts.

    Writes per-case anomaly maps, pooled score/label arrays per method, and
    `report.json` under `out_dir` (default: `<checkpoint dir>/eval`).
    """
    torch.set_num_threads(1)
    checkpoint_path = Path(checkpoint_path)
    dataset_dir = Path(dataset_dir)
    out_dir = Path(out_dir) if out_dir else checkpoint_path.parent / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)

    model, meta = load_model(checkpoint_path)
    manifest = read_manifest(dataset_dir / "manifest.json")
    spec = manifest.spec
    for needed in ("val", "test_inlier", "test_ood"):
        if needed not in manifest.partitions:
            raise DataError(f"manifest is missing the {needed!r} partition")

    if methods is None:
        methods = tuple(SCORE_METHODS)
    if config_tag is None:
        exp_json = meta.get("experiment_config")
        config_tag = json.loads(exp_json).get("tag", "") if exp_json else ""

    cases_dir = dataset_dir / "cases"
    test_cases = load_partition(spec, manifest, "test_inlier", cases_dir) + load_partition(
        spec, manifest, "test_ood", cases_dir
    )
    if not test_cases:
        raise DataError("no test cases to evaluate")

    grid = spec.shape
    ood_ids = np.array(spec.ood_class_ids)
    per_case = []
    for vol in test_cases:
        outs = forward_numpy(model, vol)
        pred = outs["logits"].argmax(axis=0).reshape(grid)
        ood_labels = np.isin(vol.label_map, ood_ids).astype(np.int8).reshape(-1)
        per_case.append((vol, outs, pred, ood_labels))

    report = EvalReport(config_tag=config_tag)
    maps_dir = out_dir / "anomaly_maps"
    for method in methods:
        pooled = ScoreAccumulator()
        amaps = []
        for vol, outs, pred, ood_labels in per_case:
            amap = compute_map(
                method,
                query_responses=outs["responses"],
                assignments=outs["assignments"],
                class_logits=outs["logits"],
                grid=grid,
            )
            pooled.add(amap.scores.reshape(-1), ood_labels)
            amaps.append(amap)
            export_anomaly_map(amap, vol.case_id, maps_dir)

        sp = pooled.finalize()
        np.savez(
            out_dir / f"pooled_scores.{method}.npz", scores=sp.scores, labels=sp.labels
        )
        dataset_min = min(float(a.scores.min()) for a in amaps)
        case_pairs = [
            (case_score(amap, pred, fallback=dataset_min), vol.is_ood_case)
            for (vol, _, pred, _), amap in zip(per_case, amaps)
        ]
        report.methods[method] = OodMetrics(
            auroc=auroc(sp),
            aupr=aupr(sp),
            fpr95=fpr_at_tpr(sp, 0.95),
            case_auc=case_auc(case_pairs),
        )

    val_cases = load_partition(spec, manifest, "val", cases_dir)
    if val_cases:
        preds, gts = [], []
        for vol in val_cases:
            outs = forward_numpy(model, vol)
            preds.append(outs["logits"].argmax(axis=0).reshape(grid))
            gts.append(vol.label_map)
        pred_stack = np.stack(preds)
        gt_stack = np.stack(gts)
        for class_id in spec.inlier_class_ids:
            report.dice_per_class[class_id] = mask_dice(
                pred_stack == class_id, gt_stack == class_id
            )
        report.mean_inlier_tumor_dice = float(
            np.mean([report.dice_per_class[c] for c in spec.inlier_class_ids])
        )

    report.validate()
    (out_dir / "report.json").write_text(report.to_json())
    return report
