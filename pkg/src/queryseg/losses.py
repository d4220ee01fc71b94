"""Training objectives: CE+Dice segmentation loss, the query-distribution
loss on group-merged assignments, deep supervision over per-block
attention, and their weighted combination.

Functions accept single volumes (``K x S`` / ``N x S``) or batches with a
leading batch axis; every loss reduces to a scalar by meaning over voxels
(and batch), so weights transfer across grid sizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import ShapeError

__all__ = [
    "QDPartition",
    "MergedAssignments",
    "seg_loss",
    "merge_assignments",
    "qd_loss",
    "deep_supervision_loss",
    "total_loss",
]

DICE_SMOOTH = 1e-5
LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class QDPartition:
    """Counts of queries assigned to the background / organ / tumor groups.

    Queries occupy contiguous index ranges in that order.
    """

    n_background: int
    n_organ: int
    n_tumor: int

    def __post_init__(self):
        if min(self.n_background, self.n_organ, self.n_tumor) < 0:
            raise ShapeError("partition counts must be non-negative")

    @property
    def total(self) -> int:
        return self.n_background + self.n_organ + self.n_tumor

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        a, b = self.n_background, self.n_background + self.n_organ
        return slice(0, a), slice(a, b), slice(b, self.total)

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.n_background, self.n_organ, self.n_tumor)


@dataclass
class MergedAssignments:
    """Group-summed soft assignments and group-merged labels, both 3 x voxels
    (with an optional leading batch axis) and column-stochastic."""

    assignments: Tensor
    labels: Tensor


def _as_batched(x: Tensor, name: str) -> tuple[Tensor, bool]:
    if x.dim() == 2:
        return x.unsqueeze(0), False
    if x.dim() == 3:
        return x, True
    raise ShapeError(f"{name} must be 2-D or batched 3-D, got shape {tuple(x.shape)}")


def _check_onehot(g: Tensor) -> None:
    if not torch.logical_or(g == 0, g == 1).all():
        raise ShapeError("ground truth must be binary")
    colsum = g.sum(dim=-2)
    if not torch.allclose(colsum, torch.ones_like(colsum), atol=1e-6):
        raise ShapeError("ground truth planes must sum to one at every voxel")


def seg_loss(seg_logits: Tensor, gt: Tensor) -> Tensor:
    """Cross-entropy plus soft Dice between class logits and one-hot truth."""
    total, _, _ = seg_loss_parts(seg_logits, gt)
    return total


def seg_loss_parts(seg_logits: Tensor, gt: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """As `seg_loss`, also returning the (ce, dice) terms for logging."""
    z, _ = _as_batched(seg_logits, "logits")
    g, _ = _as_batched(gt, "ground truth")
    if z.shape != g.shape:
        raise ShapeError(f"logits {tuple(z.shape)} vs ground truth {tuple(g.shape)}")
    _check_onehot(g)
    g = g.to(z.dtype)

    logp = F.log_softmax(z, dim=1)
    ce = -(g * logp).sum(dim=1).mean()

    p = logp.exp()
    overlap = 2.0 * (p * g).sum(dim=2) + DICE_SMOOTH
    volume = p.sum(dim=2) + g.sum(dim=2) + DICE_SMOOTH
    dice_term = 1.0 - (overlap / volume).mean(dim=1).mean()
    return ce + dice_term, ce, dice_term


def merge_assignments(assignments: Tensor, gt: Tensor, partition: QDPartition) -> MergedAssignments:
    """Sum assignment rows per query group and merge labels into
    background / organ / all-tumor planes."""
    m, m_batched = _as_batched(assignments, "assignments")
    g, g_batched = _as_batched(gt, "ground truth")
    if m_batched != g_batched or m.shape[0] != g.shape[0] or m.shape[2] != g.shape[2]:
        raise ShapeError(
            f"assignments {tuple(assignments.shape)} and ground truth "
            f"{tuple(gt.shape)} do not describe the same voxels"
        )
    if partition.total != m.shape[1]:
        raise ShapeError(
            f"partition totals {partition.total} queries but assignments have {m.shape[1]}"
        )
    if g.shape[1] < 3:
        raise ShapeError("need at least background, organ and one tumor class")

    bg, organ, tumor = partition.slices
    merged_m = torch.stack(
        [m[:, bg].sum(dim=1), m[:, organ].sum(dim=1), m[:, tumor].sum(dim=1)], dim=1
    )
    g = g.to(m.dtype)
    merged_g = torch.stack([g[:, 0], g[:, 1], g[:, 2:].sum(dim=1)], dim=1)
    if not m_batched:
        merged_m, merged_g = merged_m.squeeze(0), merged_g.squeeze(0)
    return MergedAssignments(assignments=merged_m, labels=merged_g)


def _merged_nll(merged_m: Tensor, merged_g: Tensor) -> Tensor:
    # Clamp the log argument at 1 so a perfect assignment scores exactly 0
    # and the loss stays non-negative despite the additive floor.
    logterm = torch.log((merged_m + LOG_FLOOR).clamp(max=1.0))
    return -(merged_g * logterm).sum(dim=-2).mean()


def qd_loss(merged: MergedAssignments) -> Tensor:
    """Negative log likelihood of merged labels under merged assignments,
    meaned over voxels."""
    return _merged_nll(merged.assignments, merged.labels)


def deep_supervision_loss(
    aux_attention: list,
    gt: Tensor,
    partition: QDPartition,
    grid: tuple[int, int, int],
) -> Tensor:
    """Merged-group NLL applied to each block's soft attention, averaged
    over blocks.

    Each aux entry carries attention logits over its own (coarser) grid;
    labels are mean-pooled onto that grid, which preserves the per-voxel
    partition of unity exactly.
    """
    if not aux_attention:
        raise ShapeError("deep supervision needs at least one attention map")
    g, batched = _as_batched(gt, "ground truth")
    bsz, k, _ = g.shape
    terms = []
    for block in aux_attention:
        logits, block_grid = block.logits, block.grid
        soft = torch.softmax(logits if batched else logits.unsqueeze(0), dim=1)
        # Mean-pooled one-hot labels become soft but keep the per-voxel
        # partition of unity, which is all the merge needs.
        pooled = _pool_labels(g.reshape(bsz, k, *grid), block_grid).reshape(bsz, k, -1)
        merged = merge_assignments(soft, pooled, partition)
        terms.append(_merged_nll(merged.assignments, merged.labels))
    return torch.stack(terms).mean()


def _pool_labels(g: Tensor, target_grid: tuple[int, int, int]) -> Tensor:
    bsz, k, h, w, d = g.shape
    th, tw, td = target_grid
    if h % th or w % tw or d % td:
        raise ShapeError(f"label grid {(h, w, d)} not divisible by block grid {target_grid}")
    fh, fw, fd = h // th, w // tw, d // td
    return (
        g.reshape(bsz, k, th, fh, tw, fw, td, fd)
        .mean(dim=(3, 5, 7))
    )


def total_loss(
    seg_logits: Tensor,
    assignments: Tensor,
    gt: Tensor,
    partition: QDPartition,
    qd_weight: float = 0.1,
    aux_attention: list | None = None,
    ds_weight: float = 0.1,
    grid: tuple[int, int, int] | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Combined objective: seg + qd_weight * QD + ds_weight * deep supervision.

    Returns the scalar loss and a per-term breakdown for logging.
    """
    seg_total, ce, dice_term = seg_loss_parts(seg_logits, gt)
    total = seg_total
    breakdown = {
        "L_seg": float(seg_total.detach()),
        "L_ce": float(ce.detach()),
        "L_dice": float(dice_term.detach()),
        "L_qd": 0.0,
        "L_ds": 0.0,
    }
    if qd_weight != 0.0:
        qd = qd_loss(merge_assignments(assignments, gt, partition))
        total = total + qd_weight * qd
        breakdown["L_qd"] = float(qd.detach())
    if ds_weight != 0.0 and aux_attention:
        if grid is None:
            raise ShapeError("deep supervision needs the full-resolution grid shape")
        ds = deep_supervision_loss(aux_attention, gt, partition, grid)
        total = total + ds_weight * ds
        breakdown["L_ds"] = float(ds.detach())
    breakdown["L"] = float(total.detach())
    return total, breakdown
