"""Independent oracles used across the suite.

Everything here deliberately recomputes results the slow way (pairwise
comparisons, per-threshold recounts, per-coordinate finite differences)
so the fast implementations are checked against a second route.
"""

from __future__ import annotations

import numpy as np
import torch


def pairwise_auroc(scores, labels) -> float:
    """All positive/negative pairs, half credit for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def sweep_aupr(scores, labels) -> float:
    """Recount TP/FP from scratch at every distinct threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    area = 0.0
    prev_recall = 0.0
    for t in np.unique(scores)[::-1]:
        pred = scores >= t
        tp = int(((labels == 1) & pred).sum())
        fp = int(((labels == 0) & pred).sum())
        precision = tp / (tp + fp)
        recall = tp / n_pos
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


def sweep_fpr_at_tpr(scores, labels, level=0.95) -> float:
    """Minimum FPR over all thresholds whose TPR reaches the level."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    best = None
    for t in np.unique(scores)[::-1]:
        pred = scores >= t
        tp = int(((labels == 1) & pred).sum())
        fp = int(((labels == 0) & pred).sum())
        if tp / n_pos >= level:
            fpr = fp / n_neg
            best = fpr if best is None else min(best, fpr)
    return best


def set_dice(a, b) -> float:
    """Dice via explicit voxel-index sets."""
    sa = {tuple(ix) for ix in np.argwhere(np.asarray(a, dtype=bool))}
    sb = {tuple(ix) for ix in np.argwhere(np.asarray(b, dtype=bool))}
    if not sa and not sb:
        return 1.0
    return 2.0 * len(sa & sb) / (len(sa) + len(sb))


def fd_grad(fn, tensor: torch.Tensor, step: float = 1e-3) -> torch.Tensor:
    """Central finite differences of a scalar-valued fn over every entry."""
    grad = torch.zeros_like(tensor)
    flat = tensor.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        hi = float(fn())
        flat[i] = orig - step
        lo = float(fn())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def fd_grad_sampled(fn, tensor: torch.Tensor, coords, step: float = 1e-3) -> list[float]:
    """Central differences for a chosen subset of flat coordinates."""
    flat = tensor.reshape(-1)
    out = []
    for i in coords:
        orig = flat[i].item()
        flat[i] = orig + step
        hi = float(fn())
        flat[i] = orig - step
        lo = float(fn())
        flat[i] = orig
        out.append((hi - lo) / (2.0 * step))
    return out


def max_rel_err(analytic, numeric, floor: float = 1e-6) -> float:
    """Worst relative error, with an absolute floor so near-zero pairs
    compare absolutely."""
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
