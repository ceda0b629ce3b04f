"""Evaluation metric suite: Dice/IoU, weighted F-measure, S-measure,
mean/max E-measure, and MAE, per-image and dataset-averaged.

Inputs are probability maps in [0, 1] against strictly binary masks; 4-d
tensors, [h, w] arrays, and anything squeezable to 2-d are accepted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ContractViolation
from .tensor import Tensor

EPS = 1e-8  # dice/iou smoothing
MEPS = float(np.finfo(np.float64).eps)  # alignment/structure terms use machine eps
N_THRESHOLDS = 256


@dataclass
class MetricReport:
    m_dice: float
    m_iou: float
    wfm: float
    s_measure: float
    mean_e: float
    max_e: float
    mae: float

    def as_tuple(self):
        return (self.m_dice, self.m_iou, self.wfm, self.s_measure,
                self.mean_e, self.max_e, self.mae)

    CSV_HEADER = "dataset,model,mDic,mIoU,wFm,Smeasure,meanE,maxE,MAE"

    def csv_row(self, dataset, model):
        vals = ",".join(f"{v:.3f}" for v in self.as_tuple())
        return f"{dataset},{model},{vals}"


def _as_2d(x, name, binary=False):
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    arr = np.squeeze(arr)
    if arr.ndim != 2:
        raise ContractViolation(f"{name} must reduce to 2-d, got {arr.shape}")
    arr = arr.astype(np.float64)
    if binary and not np.all(np.isin(np.unique(arr), (0.0, 1.0))):
        raise ContractViolation(f"{name} must be strictly binary")
    return arr


def _check_same(p, g):
    if p.shape != g.shape:
        raise ContractViolation(f"metric shape mismatch: {p.shape} vs {g.shape}")


def dice_iou(p, g, threshold=0.5):
    p = _as_2d(p, "prediction")
    g = _as_2d(g, "ground truth", binary=True)
    _check_same(p, g)
    pb = p >= threshold
    gb = g >= 0.5
    inter = np.count_nonzero(pb & gb)
    dice = 2.0 * inter / (np.count_nonzero(pb) + np.count_nonzero(gb) + EPS)
    iou = inter / (np.count_nonzero(pb | gb) + EPS)
    return dice, iou


def mae(p, g):
    p = _as_2d(p, "prediction")
    g = _as_2d(g, "ground truth")
    _check_same(p, g)
    return float(np.mean(np.abs(p - g)))


def _gaussian_kernel(size=7, sigma=5.0):
    ax = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def weighted_fmeasure(p, g, beta2=1.0):
    """Foreground-map quality with dependency and distance-decay corrections."""
    p = _as_2d(p, "prediction")
    g = _as_2d(g, "ground truth", binary=True)
    _check_same(p, g)
    gb = g >= 0.5
    if not gb.any():
        return 0.0  # degenerate ground truth
    e = np.abs(p - g)
    dst, idx = ndimage.distance_transform_edt(~gb, return_indices=True)
    et = e.copy()
    et[~gb] = e[idx[0][~gb], idx[1][~gb]]
    ea = ndimage.convolve(et, _gaussian_kernel(), mode="constant")
    min_e_ea = e.copy()
    swap = gb & (ea < e)
    min_e_ea[swap] = ea[swap]
    b = np.ones_like(g)
    b[~gb] = 2.0 - np.exp(np.log(0.5) / 5.0 * dst[~gb])
    ew = min_e_ea * b
    tpw = gb.sum() - ew[gb].sum()
    fpw = ew[~gb].sum()
    recall = 1.0 - ew[gb].mean()
    precision = tpw / (MEPS + tpw + fpw)
    return float(
        (1 + beta2) * recall * precision / (MEPS + recall + beta2 * precision)
    )


def _ssim_region(p, g):
    n = p.size
    x, y = p.mean(), g.mean()
    if n <= 1:
        sx = sy = sxy = 0.0
    else:
        sx = ((p - x) ** 2).sum() / (n - 1)
        sy = ((g - y) ** 2).sum() / (n - 1)
        sxy = ((p - x) * (g - y)).sum() / (n - 1)
    alpha = 4.0 * x * y * sxy
    beta = (x ** 2 + y ** 2) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + MEPS)
    if alpha == 0 and beta == 0:
        return 1.0
    return 0.0


def _object_score(x_region):
    if x_region.size == 0:
        return 0.0
    x = x_region.mean()
    sigma = x_region.std()
    return 2.0 * x / (x * x + 1.0 + sigma + MEPS)


def _s_object(p, g):
    gb = g >= 0.5
    fg = np.where(gb, p, 0.0)
    bg = np.where(gb, 0.0, 1.0 - p)
    u = g.mean()
    return u * _object_score(fg[gb]) + (1 - u) * _object_score(bg[~gb])


def _centroid(g):
    h, w = g.shape
    if g.sum() == 0:
        return h // 2, w // 2
    rows, cols = np.where(g >= 0.5)
    return int(np.round(rows.mean())) + 1, int(np.round(cols.mean())) + 1


def _s_region(p, g):
    ci, cj = _centroid(g)
    h, w = g.shape
    area = h * w
    weights, scores = [], []
    for (rs, re, cs, ce) in (
        (0, ci, 0, cj), (0, ci, cj, w), (ci, h, 0, cj), (ci, h, cj, w)
    ):
        gp = g[rs:re, cs:ce]
        pp = p[rs:re, cs:ce]
        weights.append(gp.size / area)
        scores.append(_ssim_region(pp, gp) if gp.size else 0.0)
    return sum(wt * sc for wt, sc in zip(weights, scores))


def s_measure(p, g, alpha=0.5):
    """Structural similarity: object- plus region-level comparison."""
    p = _as_2d(p, "prediction")
    g = _as_2d(g, "ground truth", binary=True)
    _check_same(p, g)
    y = g.mean()
    if y == 0:  # all background: reward low prediction mass
        return float(1.0 - p.mean())
    if y == 1:  # all foreground
        return float(p.mean())
    score = alpha * _s_object(p, g) + (1 - alpha) * _s_region(p, g)
    return float(max(score, 0.0))


def _e_score_binary(pb, gb):
    h, w = gb.shape
    if not gb.any():
        enhanced = 1.0 - pb.astype(np.float64)
    elif gb.all():
        enhanced = pb.astype(np.float64)
    else:
        fm = pb.astype(np.float64)
        gt = gb.astype(np.float64)
        dfm = fm - fm.mean()
        dgt = gt - gt.mean()
        align = 2.0 * dgt * dfm / (dgt ** 2 + dfm ** 2 + MEPS)
        enhanced = (align + 1.0) ** 2 / 4.0
    return float(enhanced.sum() / (h * w - 1 + MEPS))


def e_measure(p, g):
    """Enhanced-alignment score over 256 fixed thresholds -> (mean, max)."""
    p = _as_2d(p, "prediction")
    g = _as_2d(g, "ground truth", binary=True)
    _check_same(p, g)
    gb = g >= 0.5
    scores = [
        _e_score_binary(p >= t, gb)
        for t in np.arange(N_THRESHOLDS) / (N_THRESHOLDS - 1)
    ]
    return float(np.mean(scores)), float(np.max(scores))


def metric_report(p, g) -> MetricReport:
    dice, iou = dice_iou(p, g)
    mean_e, max_e = e_measure(p, g)
    return MetricReport(
        m_dice=dice,
        m_iou=iou,
        wfm=weighted_fmeasure(p, g),
        s_measure=s_measure(p, g),
        mean_e=mean_e,
        max_e=max_e,
        mae=mae(p, g),
    )


def evaluate_dataset(pairs) -> MetricReport:
    """Unweighted mean of per-image metrics over (prediction, mask) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ContractViolation("evaluate_dataset needs at least one pair")
    reports = [metric_report(p, g) for p, g in pairs]
    cols = np.array([r.as_tuple() for r in reports])
    return MetricReport(*cols.mean(axis=0))
