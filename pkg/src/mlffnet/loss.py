"""Weighted BCE + weighted IoU basic loss and the three-head total.

Per-pixel weights emphasize boundary-adjacent pixels: w = 1 + 5 * |mean-pool
31x31 of the mask - mask| (zero padding 15, divisor fixed at 961), so interior
pixels of large uniform regions get weight 1 and pixels near a boundary up to 6.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import tensor as T
from .errors import ContractViolation
from .model import PredictionSet
from .tensor import Tensor

POOL_KERNEL = 31
POOL_PAD = 15
WEIGHT_SCALE = 5.0
IOU_SMOOTH = 1.0


@dataclass
class LossBreakdown:
    total: Tensor
    lb_p1: Tensor
    lb_p2: Tensor
    lb_p3: Tensor
    wbce: tuple = None  # per-head components, same order
    wiou: tuple = None

    def values(self):
        return (self.total.item(), self.lb_p1.item(), self.lb_p2.item(),
                self.lb_p3.item())

    def csv_row(self, step):
        t, a, b, c = self.values()
        return f"{step},{t:.10g},{a:.10g},{b:.10g},{c:.10g}"


def _check_pair(p, g):
    if p.shape != g.shape:
        raise ContractViolation(f"loss shape mismatch: {p.shape} vs {g.shape}")


def pixel_weights(g: Tensor) -> Tensor:
    """Boundary-emphasis weight map in [1, 6] from a binary mask."""
    vals = np.unique(g.data)
    if not np.all(np.isin(vals, (0.0, 1.0))):
        raise ContractViolation("pixel_weights needs a strictly binary mask")
    # zero-padded 31x31 window mean, divisor fixed at 961
    pooled = ndimage.uniform_filter(
        g.data, size=(1, 1, POOL_KERNEL, POOL_KERNEL), mode="constant"
    )
    w = 1.0 + WEIGHT_SCALE * np.abs(pooled - g.data)
    return Tensor(w)


def weighted_bce(p: Tensor, g: Tensor, w: Tensor) -> Tensor:
    _check_pair(p, g)
    _check_pair(p, w)
    term = (g * T.log(p) + (1.0 - g) * T.log(1.0 - p)) * w
    return T.reduce(term, "sum", "all") * (-1.0 / float(np.sum(w.data)))


def weighted_iou(p: Tensor, g: Tensor, w: Tensor) -> Tensor:
    _check_pair(p, g)
    _check_pair(p, w)
    inter = T.reduce(p * g * w, "sum", "all")
    union = T.reduce((p + g) * w, "sum", "all") - inter
    return 1.0 - (inter + IOU_SMOOTH) / (union + IOU_SMOOTH)


def basic_loss(p: Tensor, g: Tensor) -> tuple:
    """Returns (loss, wiou, wbce); loss = wiou + wbce with shared weights."""
    w = pixel_weights(g)
    iou = weighted_iou(p, g, w)
    bce = weighted_bce(p, g, w)
    return iou + bce, iou, bce


def total_loss(preds: PredictionSet, g: Tensor) -> LossBreakdown:
    """total = L_b(p1) + L_b(p2) + 0.5 * L_b(p3), fixed evaluation order."""
    l1, iou1, bce1 = basic_loss(preds.p1, g)
    l2, iou2, bce2 = basic_loss(preds.p2, g)
    l3, iou3, bce3 = basic_loss(preds.p3, g)
    total = (l1 + l2) + 0.5 * l3
    return LossBreakdown(total, l1, l2, l3,
                         wbce=(bce1, bce2, bce3), wiou=(iou1, iou2, iou3))
