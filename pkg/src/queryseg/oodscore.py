"""Per-voxel anomaly scoring from forward outputs.

Four score maps, all pure functions of a single forward pass:

- ``maxquery_pre``:  negative of the maximal query response per voxel.
- ``maxquery_post``: negative of the maximal soft cluster-assignment weight.
- ``msp``:           negative maximal class probability (category level).
- ``maxlogit``:      negative maximal class logit (category level).

Metrics run on raw scores; min-max normalization exists for image export
only, since the ranking metrics are invariant to increasing rescaling.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DegenerateInputError, ShapeError

__all__ = [
    "SCORE_METHODS",
    "TUMOR_CLASS_START",
    "AnomalyMap",
    "maxquery_pre",
    "maxquery_post",
    "msp",
    "maxlogit",
    "compute_map",
    "minmax_normalize",
    "case_score",
    "export_anomaly_map",
]

SCORE_METHODS = ("maxquery_pre", "maxquery_post", "msp", "maxlogit")

# Class layout on the label axis: 0 = background, 1 = organ, >= 2 = tumors.
TUMOR_CLASS_START = 2


@dataclass(frozen=True)
class AnomalyMap:
    """Grid-shaped anomaly scores (higher = more anomalous)."""

    scores: np.ndarray
    method: str
    normalized: bool = False

    @property
    def grid(self) -> tuple[int, ...]:
        return self.scores.shape


def _to_grid(flat: np.ndarray, grid: tuple[int, int, int]) -> np.ndarray:
    flat = np.asarray(flat, dtype=np.float64)
    if flat.size != int(np.prod(grid)):
        raise ShapeError(f"{flat.size} voxel scores cannot fill grid {grid}")
    return flat.reshape(grid)


def maxquery_pre(query_responses: np.ndarray, grid: tuple[int, int, int]) -> AnomalyMap:
    """Negative of the per-voxel maximum over the query axis of N x HWD responses."""
    r = np.asarray(query_responses, dtype=np.float64)
    if r.ndim != 2:
        raise ShapeError("query responses must be a 2-D (queries x voxels) matrix")
    return AnomalyMap(_to_grid(-r.max(axis=0), grid), "maxquery_pre")


def maxquery_post(assignments: np.ndarray, grid: tuple[int, int, int]) -> AnomalyMap:
    """Negative of the per-voxel maximum soft assignment; expects
    column-stochastic N x HWD input, so scores lie in [-1, -1/N]."""
    m = np.asarray(assignments, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError("assignments must be a 2-D (queries x voxels) matrix")
    return AnomalyMap(_to_grid(-m.max(axis=0), grid), "maxquery_post")


def msp(class_logits: np.ndarray, grid: tuple[int, int, int]) -> AnomalyMap:
    """Negative maximal class-softmax probability per voxel."""
    z = np.asarray(class_logits, dtype=np.float64)
    if z.ndim != 2:
        raise ShapeError("class logits must be a 2-D (classes x voxels) matrix")
    z = z - z.max(axis=0, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=0, keepdims=True)
    return AnomalyMap(_to_grid(-p.max(axis=0), grid), "msp")


def maxlogit(class_logits: np.ndarray, grid: tuple[int, int, int]) -> AnomalyMap:
    """Negative maximal class logit per voxel."""
    z = np.asarray(class_logits, dtype=np.float64)
    if z.ndim != 2:
        raise ShapeError("class logits must be a 2-D (classes x voxels) matrix")
    return AnomalyMap(_to_grid(-z.max(axis=0), grid), "maxlogit")


def compute_map(
    method: str,
    *,
    query_responses: np.ndarray | None = None,
    assignments: np.ndarray | None = None,
    class_logits: np.ndarray | None = None,
    grid: tuple[int, int, int],
) -> AnomalyMap:
    """Dispatch a score method onto the forward outputs it needs."""
    if method == "maxquery_pre":
        return maxquery_pre(query_responses, grid)
    if method == "maxquery_post":
        return maxquery_post(assignments, grid)
    if method == "msp":
        return msp(class_logits, grid)
    if method == "maxlogit":
        return maxlogit(class_logits, grid)
    raise ValueError(f"unknown score method {method!r}; expected one of {SCORE_METHODS}")


def minmax_normalize(
    amap: AnomalyMap,
    scope: str = "per_case",
    dataset_min: float | None = None,
    dataset_max: float | None = None,
) -> AnomalyMap:
    """Rescale scores to [0, 1] over the chosen scope.

    ``per_case`` uses this map's own extrema; ``per_dataset`` rescales by
    extrema pooled over the whole test set, which callers must supply.
    """
    if scope == "per_case":
        lo, hi = float(amap.scores.min()), float(amap.scores.max())
    elif scope == "per_dataset":
        if dataset_min is None or dataset_max is None:
            raise ValueError("per_dataset scope needs dataset_min and dataset_max")
        lo, hi = float(dataset_min), float(dataset_max)
    else:
        raise ValueError(f"unknown scope {scope!r}")
    if hi <= lo:
        raise DegenerateInputError("constant score map; min-max normalization undefined")
    return replace(amap, scores=(amap.scores - lo) / (hi - lo), normalized=True)


def case_score(
    amap: AnomalyMap,
    predicted_seg: np.ndarray,
    fallback: float | None = None,
) -> float | None:
    """Mean anomaly score over voxels predicted as tumor (class >= 2).

    When no tumor voxel is predicted, returns `fallback`; the harness
    passes the dataset-level minimum score there, treating "no tumor
    found" as least anomalous.
    """
    predicted_seg = np.asarray(predicted_seg)
    if predicted_seg.shape != amap.scores.shape:
        raise ShapeError(
            f"prediction grid {predicted_seg.shape} does not match score grid {amap.scores.shape}"
        )
    tumor = predicted_seg >= TUMOR_CLASS_START
    if not tumor.any():
        return fallback
    return float(amap.scores[tumor].mean())


def export_anomaly_map(amap: AnomalyMap, case_id: str, out_dir: str | Path) -> Path:
    """Write one map as `<case_id>.<method>.<ext>`.

    2-D grids (depth 1) become 8-bit grayscale PNGs of the normalized map;
    anything deeper is saved as a .npy array of the raw scores.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scores = amap.scores
    if scores.ndim == 3 and scores.shape[2] == 1:
        path = out_dir / f"{case_id}.{amap.method}.png"
        plane = scores[:, :, 0]
        lo, hi = plane.min(), plane.max()
        norm = np.zeros_like(plane) if hi <= lo else (plane - lo) / (hi - lo)
        Image.fromarray((norm * 255).round().astype(np.uint8), mode="L").save(path)
    else:
        path = out_dir / f"{case_id}.{amap.method}.npy"
        np.save(path, scores)
    return path
