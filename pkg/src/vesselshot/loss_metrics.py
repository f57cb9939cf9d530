"""Hybrid training loss (weighted cross-entropy + soft Dice) and hard metrics.

Losses operate on per-class logits (the scaled similarities) so gradients
flow through the softmax; hard metrics operate on binary masks and follow
the usual confusion-matrix definitions. Empty-ground-truth conventions:
empty/empty scores 1 on all metrics; empty gt with a nonempty prediction
scores 0 on DC/IoU/precision and 1 on sensitivity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F


class MetricsError(Exception):
    pass


@dataclass(frozen=True)
class LossConfig:
    w_ce: float = 0.6
    w_dice: float = 0.7
    smooth: float = 1e-5

    def __post_init__(self):
        if self.w_ce < 0 or self.w_dice < 0:
            raise MetricsError("loss weights must be >= 0")
        if self.smooth <= 0:
            raise MetricsError("smoothing epsilon must be > 0")


def ce_loss(logits: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean voxelwise cross-entropy. logits: (C, X, Y, Z); gt: (X, Y, Z) int."""
    if logits.shape[1:] != gt.shape:
        raise MetricsError(f"logits grid {tuple(logits.shape[1:])} != gt {tuple(gt.shape)}")
    return F.cross_entropy(logits[None], gt[None].long())


def dice_loss(logits: torch.Tensor, gt: torch.Tensor, smooth: float = 1e-5) -> torch.Tensor:
    """Soft Dice on the foreground channel(s).

    For the binary task this is 1 - (2 sum(p*g) + eps) / (sum p + sum g + eps)
    on channel 1; with several foreground classes the per-class soft Dice
    losses are averaged.
    """
    if logits.shape[1:] != gt.shape:
        raise MetricsError(f"logits grid {tuple(logits.shape[1:])} != gt {tuple(gt.shape)}")
    probs = torch.softmax(logits, dim=0)
    losses = []
    for c in range(1, logits.shape[0]):
        p = probs[c]
        g = (gt == c).to(p.dtype)
        inter = (p * g).sum()
        losses.append(1.0 - (2.0 * inter + smooth) / (p.sum() + g.sum() + smooth))
    return torch.stack(losses).mean()


def hybrid_loss(logits: torch.Tensor, gt: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """w_ce * CE + w_dice * soft Dice."""
    return cfg.w_ce * ce_loss(logits, gt) + cfg.w_dice * dice_loss(logits, gt, cfg.smooth)


# ---------------------------------------------------------------------------
# Hard metrics

METRIC_NAMES = ("dc", "sensitivity", "precision", "iou")


def _confusion(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int]:
    if pred.shape != gt.shape:
        raise MetricsError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    p = np.asarray(pred) > 0
    g = np.asarray(gt) > 0
    tp = int((p & g).sum())
    fp = int((p & ~g).sum())
    fn = int((~p & g).sum())
    return tp, fp, fn


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


def dice_coefficient(pred, gt) -> float:
    tp, fp, fn = _confusion(pred, gt)
    return _ratio(2 * tp, 2 * tp + fp + fn)


def sensitivity(pred, gt) -> float:
    tp, fp, fn = _confusion(pred, gt)
    return _ratio(tp, tp + fn)


def precision(pred, gt) -> float:
    tp, fp, fn = _confusion(pred, gt)
    return _ratio(tp, tp + fp)


def iou(pred, gt) -> float:
    tp, fp, fn = _confusion(pred, gt)
    return _ratio(tp, tp + fp + fn)


def all_metrics(pred, gt) -> dict[str, float]:
    tp, fp, fn = _confusion(pred, gt)
    return {
        "dc": _ratio(2 * tp, 2 * tp + fp + fn),
        "sensitivity": _ratio(tp, tp + fn),
        "precision": _ratio(tp, tp + fp),
        "iou": _ratio(tp, tp + fp + fn),
    }


@dataclass(frozen=True)
class MetricsReport:
    """Per-case metric values with mean and population SD per metric."""

    case_ids: tuple[str, ...]
    per_case: tuple[dict[str, float], ...]
    mean: dict[str, float]
    sd: dict[str, float]

    def format_row(self, label: str) -> str:
        """One aligned row, 'mean (SD)' per metric."""
        cells = [f"{self.mean[m]:.2f} ({self.sd[m]:.2f})" for m in METRIC_NAMES]
        return f"{label:<16s}" + "".join(f"{c:>14s}" for c in cells)

    def format_pm(self) -> str:
        """Compact 'mean±SD' summary across the four metrics."""
        return ", ".join(
            f"{m}={self.mean[m]:.2f}±{self.sd[m]:.2f}" for m in METRIC_NAMES
        )

    def to_dict(self) -> dict:
        return {
            "cases": {cid: dict(m) for cid, m in zip(self.case_ids, self.per_case)},
            "mean": dict(self.mean),
            "sd": dict(self.sd),
        }


def aggregate(case_ids: list[str], case_metrics: list[dict[str, float]]) -> MetricsReport:
    """Arithmetic mean and population SD across cases."""
    if not case_metrics:
        raise MetricsError("cannot aggregate zero cases")
    mean = {}
    sd = {}
    for m in METRIC_NAMES:
        vals = np.array([c[m] for c in case_metrics], dtype=np.float64)
        mean[m] = float(vals.mean())
        sd[m] = float(vals.std())  # population SD
    return MetricsReport(
        case_ids=tuple(case_ids),
        per_case=tuple(dict(c) for c in case_metrics),
        mean=mean,
        sd=sd,
    )


def format_table(rows: list[tuple[str, MetricsReport]]) -> str:
    """Aligned text table, one row per setting, 'mean (SD)' cells."""
    header = f"{'Method':<16s}" + "".join(
        f"{name.upper():>14s}" for name in METRIC_NAMES
    )
    return "\n".join([header] + [rep.format_row(label) for label, rep in rows])
