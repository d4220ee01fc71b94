"""Ranking and overlap metrics for OOD localization and inlier segmentation.

All ranking metrics follow the convention "higher score = more anomalous =
predicted positive". Internally every function canonicalizes its input by
sorting on (score, label), so results are exactly independent of the order
in which voxels were pooled (chunked accumulation and single-pass
computation agree bit-for-bit).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import DegenerateInputError, ShapeError

__all__ = [
    "ScoredPixels",
    "ScoreAccumulator",
    "OodMetrics",
    "EvalReport",
    "auroc",
    "aupr",
    "fpr_at_tpr",
    "case_auc",
    "dice",
    "mask_dice",
]


@dataclass(frozen=True)
class ScoredPixels:
    """Flat anomaly scores with binary ground truth (1 = OOD voxel)."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).ravel()
        labels = np.asarray(self.labels).ravel()
        if scores.shape != labels.shape:
            raise ShapeError(
                f"scores and labels must have equal length, got {scores.shape} vs {labels.shape}"
            )
        if labels.size and not np.isin(labels, (0, 1)).all():
            raise ShapeError("labels must be binary (0 or 1)")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels.astype(np.int8))

    def require_both_classes(self) -> None:
        n_pos = int(self.labels.sum())
        if n_pos == 0 or n_pos == self.labels.size:
            raise DegenerateInputError(
                "ranking metrics need at least one positive and one negative label"
            )


class ScoreAccumulator:
    """Mergeable pool of (score, label) chunks.

    Chunks may arrive in any order from parallel workers; `finalize`
    canonicalizes, so the merge order cannot affect any downstream metric.
    """

    def __init__(self):
        self._scores: list[np.ndarray] = []
        self._labels: list[np.ndarray] = []

    def add(self, scores: np.ndarray, labels: np.ndarray) -> None:
        scores = np.asarray(scores, dtype=np.float64).ravel()
        labels = np.asarray(labels).ravel()
        if scores.shape != labels.shape:
            raise ShapeError("chunk scores and labels must have equal length")
        self._scores.append(scores)
        self._labels.append(labels)

    def merge(self, other: "ScoreAccumulator") -> "ScoreAccumulator":
        self._scores.extend(other._scores)
        self._labels.extend(other._labels)
        return self

    def finalize(self) -> ScoredPixels:
        if not self._scores:
            raise DegenerateInputError("accumulator is empty")
        return ScoredPixels(np.concatenate(self._scores), np.concatenate(self._labels))


def _canonical(sp: ScoredPixels) -> tuple[np.ndarray, np.ndarray]:
    """Sort by (score, label) ascending; a fixed total order over voxels."""
    order = np.lexsort((sp.labels, sp.scores))
    return sp.scores[order], sp.labels[order].astype(np.float64)


def _descending_sweep(sp: ScoredPixels) -> tuple[np.ndarray, np.ndarray, int, int]:
    """Cumulative TP/FP at every distinct threshold, thresholds descending.

    Returns (tp, fp, n_pos, n_neg) where tp[k]/fp[k] count voxels with
    score >= the k-th largest distinct score.
    """
    scores, labels = _canonical(sp)
    scores, labels = scores[::-1], labels[::-1]  # descending
    # Last index of each distinct value run marks one threshold.
    boundary = np.nonzero(np.diff(scores))[0]
    last = np.concatenate([boundary, [scores.size - 1]])
    cum_tp = np.cumsum(labels)[last]
    cum_fp = (last + 1) - cum_tp
    n_pos = int(round(cum_tp[-1]))
    n_neg = scores.size - n_pos
    return cum_tp, cum_fp, n_pos, n_neg


def auroc(sp: ScoredPixels) -> float:
    """Probability a random positive outranks a random negative, ties half.

    Sort-based rank statistic (tied scores get their average rank).
    """
    sp.require_both_classes()
    scores, labels = _canonical(sp)
    n = scores.size
    # Average 1-based rank per tie group of equal scores.
    boundary = np.nonzero(np.diff(scores))[0] + 1
    starts = np.concatenate([[0], boundary])
    ends = np.concatenate([boundary, [n]])
    group_rank = (starts + 1 + ends) / 2.0  # mean of positions start+1 .. end
    group_id = np.repeat(np.arange(starts.size), ends - starts)
    rank_sum_pos = float(np.sum(group_rank[group_id] * labels))
    n_pos = int(round(labels.sum()))
    n_neg = n - n_pos
    u_stat = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u_stat / (n_pos * n_neg)


def aupr(sp: ScoredPixels) -> float:
    """Area under precision-recall, step-wise over distinct thresholds."""
    sp.require_both_classes()
    cum_tp, cum_fp, n_pos, _ = _descending_sweep(sp)
    precision = cum_tp / (cum_tp + cum_fp)
    recall = cum_tp / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def fpr_at_tpr(sp: ScoredPixels, tpr_level: float = 0.95) -> float:
    """Smallest FPR among thresholds reaching the TPR target.

    The threshold is the largest score cutoff whose TPR is >= `tpr_level`;
    no interpolation between thresholds.
    """
    sp.require_both_classes()
    cum_tp, cum_fp, n_pos, n_neg = _descending_sweep(sp)
    tpr = cum_tp / n_pos
    fpr = cum_fp / n_neg
    hit = np.nonzero(tpr >= tpr_level)[0]
    if hit.size == 0:  # unreachable: TPR hits 1.0 at the lowest cutoff
        raise DegenerateInputError(f"no threshold reaches TPR {tpr_level}")
    return float(fpr[hit[0]])


def case_auc(case_scores: list[tuple[float, bool]]) -> float:
    """AUROC over per-case anomaly scores; labels are is_ood_case flags."""
    scores = np.array([s for s, _ in case_scores], dtype=np.float64)
    labels = np.array([1 if ood else 0 for _, ood in case_scores])
    return auroc(ScoredPixels(scores, labels))


def mask_dice(a: np.ndarray, b: np.ndarray) -> float:
    """Dice overlap of two binary masks; 1.0 when both empty, 0.0 when one is."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    sa, sb = int(a.sum()), int(b.sum())
    if sa == 0 and sb == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    return 2.0 * inter / (sa + sb)


def dice(pred: np.ndarray, gt_onehot: np.ndarray, class_id: int) -> float:
    """Dice between the predicted-class mask and a ground-truth plane.

    `pred` holds class indices on the grid; `gt_onehot` stacks the binary
    ground-truth planes along axis 0 and is indexed by `class_id`.
    """
    gt_onehot = np.asarray(gt_onehot)
    if not (0 <= class_id < gt_onehot.shape[0]):
        raise ShapeError(f"class_id {class_id} outside ground-truth stack of {gt_onehot.shape[0]}")
    return mask_dice(np.asarray(pred) == class_id, gt_onehot[class_id])


@dataclass
class OodMetrics:
    """Pixel-level ranking metrics plus case-level AUC for one score method."""

    auroc: float
    aupr: float
    fpr95: float
    case_auc: float

    def validate(self) -> None:
        for name, value in asdict(self).items():
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"{name}={value} outside [0, 1]")


@dataclass
class EvalReport:
    """Evaluation summary: per-method OOD metrics plus inlier Dice."""

    methods: dict[str, OodMetrics] = field(default_factory=dict)
    dice_per_class: dict[int, float] = field(default_factory=dict)
    mean_inlier_tumor_dice: float = 0.0
    config_tag: str = ""

    def validate(self) -> None:
        for m in self.methods.values():
            m.validate()
        for cls, value in self.dice_per_class.items():
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"dice[{cls}]={value} outside [0, 1]")

    def to_json(self) -> str:
        payload = {
            "config_tag": self.config_tag,
            "methods": {k: asdict(v) for k, v in self.methods.items()},
            "dice_per_class": {str(k): v for k, v in self.dice_per_class.items()},
            "mean_inlier_tumor_dice": self.mean_inlier_tumor_dice,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        raw = json.loads(text)
        return cls(
            methods={k: OodMetrics(**v) for k, v in raw["methods"].items()},
            dice_per_class={int(k): v for k, v in raw["dice_per_class"].items()},
            mean_inlier_tumor_dice=raw["mean_inlier_tumor_dice"],
            config_tag=raw["config_tag"],
        )
