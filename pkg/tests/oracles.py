"""Independent scalar reference implementations used by the test suite.

Everything here is written as plain per-pixel loops, transcribed from the
defining descriptions of each metric, so the vectorized implementations in
``mlffnet.metrics`` are checked against genuinely separate code. The only
shared primitive is the Euclidean distance transform's choice of *which*
equidistant foreground pixel supplies the substituted error in the weighted
F-measure: the definition does not pin down tie-breaking, so the oracle
adopts the same nearest-index selection as the distance-transform primitive
while computing all distances itself by brute force.
"""

import math

import numpy as np
from scipy import ndimage

MEPS = float(np.finfo(np.float64).eps)


def ref_dice_iou(p, g, threshold=0.5):
    pb = p >= threshold
    gb = g >= 0.5
    inter = union = npb = ngb = 0
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            if pb[i, j]:
                npb += 1
            if gb[i, j]:
                ngb += 1
            if pb[i, j] and gb[i, j]:
                inter += 1
            if pb[i, j] or gb[i, j]:
                union += 1
    return 2.0 * inter / (npb + ngb + 1e-8), inter / (union + 1e-8)


def ref_mae(p, g):
    total = 0.0
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            total += abs(p[i, j] - g[i, j])
    return total / p.size


def ref_weighted_fmeasure(p, g, beta2=1.0):
    h, w = g.shape
    gb = g >= 0.5
    if not gb.any():
        return 0.0
    fg = [(i, j) for i in range(h) for j in range(w) if gb[i, j]]
    e = np.abs(p - g)

    # brute-force Euclidean distance to the foreground
    dist = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            dist[i, j] = min(math.hypot(i - fi, j - fj) for fi, fj in fg)

    # dependency substitution: background error replaced by the error at the
    # nearest foreground pixel (tie-break shared with the EDT primitive)
    _, idx = ndimage.distance_transform_edt(~gb, return_indices=True)
    et = e.copy()
    for i in range(h):
        for j in range(w):
            if not gb[i, j]:
                et[i, j] = e[idx[0][i, j], idx[1][i, j]]

    # 7x7 Gaussian (sigma 5), zero-padded, normalized
    k = np.zeros((7, 7))
    for a in range(7):
        for b in range(7):
            k[a, b] = math.exp(-((a - 3) ** 2 + (b - 3) ** 2) / 50.0)
    k /= k.sum()
    ea = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for a in range(7):
                for b in range(7):
                    ii, jj = i + a - 3, j + b - 3
                    if 0 <= ii < h and 0 <= jj < w:
                        acc += k[a, b] * et[ii, jj]
            ea[i, j] = acc

    min_e_ea = e.copy()
    for i in range(h):
        for j in range(w):
            if gb[i, j] and ea[i, j] < e[i, j]:
                min_e_ea[i, j] = ea[i, j]

    b_map = np.ones((h, w))
    for i in range(h):
        for j in range(w):
            if not gb[i, j]:
                b_map[i, j] = 2.0 - math.exp(math.log(0.5) / 5.0 * dist[i, j])
    ew = min_e_ea * b_map

    nfg = len(fg)
    fg_err = sum(ew[i, j] for (i, j) in fg)
    tpw = nfg - fg_err
    fpw = sum(
        ew[i, j] for i in range(h) for j in range(w) if not gb[i, j]
    )
    recall = 1.0 - fg_err / nfg
    precision = tpw / (MEPS + tpw + fpw)
    return (1 + beta2) * recall * precision / (MEPS + recall + beta2 * precision)


def ref_s_measure(p, g, alpha=0.5):
    h, w = g.shape
    y = g.mean()
    if y == 0:
        return 1.0 - p.mean()
    if y == 1:
        return float(p.mean())
    gb = g >= 0.5

    def object_score(vals):
        if len(vals) == 0:
            return 0.0
        x = np.mean(vals)
        sigma = np.std(vals)
        return 2.0 * x / (x * x + 1.0 + sigma + MEPS)

    fg_vals = [p[i, j] for i in range(h) for j in range(w) if gb[i, j]]
    bg_vals = [1.0 - p[i, j] for i in range(h) for j in range(w) if not gb[i, j]]
    s_obj = y * object_score(fg_vals) + (1 - y) * object_score(bg_vals)

    rows = [i for i in range(h) for j in range(w) if gb[i, j]]
    cols = [j for i in range(h) for j in range(w) if gb[i, j]]
    ci = int(round(np.mean(rows))) + 1
    cj = int(round(np.mean(cols))) + 1

    def ssim(pp, gg):
        n = pp.size
        if n == 0:
            return 0.0
        x, yv = pp.mean(), gg.mean()
        if n <= 1:
            sx = sy = sxy = 0.0
        else:
            sx = ((pp - x) ** 2).sum() / (n - 1)
            sy = ((gg - yv) ** 2).sum() / (n - 1)
            sxy = ((pp - x) * (gg - yv)).sum() / (n - 1)
        a = 4.0 * x * yv * sxy
        b = (x * x + yv * yv) * (sx + sy)
        if a != 0:
            return a / (b + MEPS)
        if a == 0 and b == 0:
            return 1.0
        return 0.0

    s_reg = 0.0
    for (rs, re, cs, ce) in (
        (0, ci, 0, cj), (0, ci, cj, w), (ci, h, 0, cj), (ci, h, cj, w)
    ):
        gg = g[rs:re, cs:ce]
        pp = p[rs:re, cs:ce]
        s_reg += (gg.size / (h * w)) * ssim(pp, gg)
    return max(alpha * s_obj + (1 - alpha) * s_reg, 0.0)


def ref_e_measure(p, g):
    h, w = g.shape
    gb = g >= 0.5
    scores = []
    for ti in range(256):
        t = ti / 255.0
        pb = p >= t
        if not gb.any():
            enhanced = 1.0 - pb.astype(float)
        elif gb.all():
            enhanced = pb.astype(float)
        else:
            fm = pb.astype(float)
            gt = gb.astype(float)
            dfm = fm - fm.mean()
            dgt = gt - gt.mean()
            enhanced = np.zeros((h, w))
            for i in range(h):
                for j in range(w):
                    align = (2.0 * dgt[i, j] * dfm[i, j]
                             / (dgt[i, j] ** 2 + dfm[i, j] ** 2 + MEPS))
                    enhanced[i, j] = (align + 1.0) ** 2 / 4.0
        scores.append(enhanced.sum() / (h * w - 1 + MEPS))
    return float(np.mean(scores)), float(np.max(scores))


def random_instance(rng, size=8):
    """A random probability map and a random (possibly degenerate) mask."""
    p = rng.uniform(0.0, 1.0, (size, size))
    g = (rng.uniform(0.0, 1.0, (size, size)) > rng.uniform(0.2, 0.8))
    return p, g.astype(np.float64)
