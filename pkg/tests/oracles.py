"""Slow, literal reference implementations used to pin the vectorised metrics."""

import math

import numpy as np


def jaccard_ref(pred, gt):
    scores = []
    for p, g in zip(pred, gt):
        inter = union = 0
        for a, b in zip(p.ravel(), g.ravel()):
            inter += bool(a and b)
            union += bool(a or b)
        scores.append(1.0 if union == 0 else inter / union)
    return 100.0 * sum(scores) / len(scores)


def boundary_pixels(mask):
    h, w = mask.shape
    out = []
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                yy, xx = y + dy, x + dx
                if not (0 <= yy < h and 0 <= xx < w) or not mask[yy, xx]:
                    out.append((y, x))
                    break
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def boundary_f_frame_ref(pred, gt):
    h, w = pred.shape
    r = math.ceil(0.008 * math.hypot(h, w))
    bp, bg = boundary_pixels(pred), boundary_pixels(gt)
    if len(bp) == 0 and len(bg) == 0:
        return 1.0
    if len(bp) == 0 or len(bg) == 0:
        return 0.0
    d = np.sqrt(((bp[:, None, :] - bg[None, :, :]) ** 2).sum(-1))
    precision = (d.min(axis=1) <= r).mean()
    recall = (d.min(axis=0) <= r).mean()
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


def boundary_f_ref(pred, gt):
    return 100.0 * float(np.mean([boundary_f_frame_ref(p, g) for p, g in zip(pred, gt)]))


def _reflect(i, n):
    # half-sample symmetric extension: -1 -> 0, n -> n-1, periodic with 2n
    i %= 2 * n
    return i if i < n else 2 * n - 1 - i


def ssim_frame_ref(a, b, size=11, sigma=1.5, data_range=1.0):
    """Literal sliding-window SSIM: explicit weighted window statistics at every pixel."""
    x = np.arange(size) - size // 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    h, w = a.shape
    half = size // 2
    total = 0.0
    for i in range(h):
        rows = [_reflect(i + k, h) for k in range(-half, half + 1)]
        for j in range(w):
            cols = [_reflect(j + k, w) for k in range(-half, half + 1)]
            wa = a[np.ix_(rows, cols)]
            wb = b[np.ix_(rows, cols)]
            wt = np.outer(g, g)
            ma, mb = (wt * wa).sum(), (wt * wb).sum()
            va = (wt * wa * wa).sum() - ma * ma
            vb = (wt * wb * wb).sum() - mb * mb
            cov = (wt * wa * wb).sum() - ma * mb
            total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
    return total / (h * w)


def ssim_masked_ref(generated, original, mask, fill=(0.0, 1.0, 0.0)):
    ref = np.array(original, dtype=np.float64)
    ref[mask] = fill
    luma = np.array([0.299, 0.587, 0.114])
    ga, gb = generated @ luma, ref @ luma
    return 100.0 * float(np.mean([ssim_frame_ref(x, y) for x, y in zip(ga, gb)]))
