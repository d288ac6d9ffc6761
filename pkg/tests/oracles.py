"""Independent, deliberately naive reference implementations used as test oracles.

Nothing here imports from the package's numerical code paths; loops and the
standard library are preferred over vectorized numpy.
"""

from __future__ import annotations

import math
from itertools import product


# -- LBP


def circular_transitions(code: int, p: int) -> int:
    bits = [(code >> k) & 1 for k in range(p)]
    return sum(bits[k] != bits[(k + 1) % p] for k in range(p))


def uniform_bin_of(code: int, p: int) -> int:
    """Uniform patterns numbered in ascending code order; the rest share the last bin."""
    uniform = [c for c in range(2**p) if circular_transitions(c, p) <= 2]
    if code in uniform:
        return uniform.index(code)
    return len(uniform)


def bilinear_sample(img, y: float, x: float) -> float:
    y0, x0 = math.floor(y), math.floor(x)
    fy, fx = y - y0, x - x0
    h, w = len(img), len(img[0])
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    a, b, c, d = img[y0][x0], img[y0][x1], img[y1][x0], img[y1][x1]
    return (1 - fy) * (1 - fx) * a + (1 - fy) * fx * b + fy * (1 - fx) * c + fy * fx * d


def lbp_code(img, y: int, x: int, p: int = 8, r: float = 1.0) -> int:
    """Bit k is the neighbor at angle 2*pi*k/p, counter-clockwise from +x (image y grows down)."""
    c = img[y][x]
    code = 0
    for k in range(p):
        ang = 2 * math.pi * k / p
        dy, dx = -r * math.sin(ang), r * math.cos(ang)
        if abs(dy - round(dy)) < 1e-9:
            dy = float(round(dy))
        if abs(dx - round(dx)) < 1e-9:
            dx = float(round(dx))
        if bilinear_sample(img, y + dy, x + dx) >= c:
            code |= 1 << k
    return code


def block_histograms(analysis, margin: int, size: int, blocks: int, p: int = 8, r: float = 1.0):
    """Per-block uniform-LBP histograms by explicit pixel loops."""
    n_bins = uniform_bin_of(2**p - 1, p) + 1 + 1  # all-ones is the last uniform code
    bs = size // blocks
    out = [[0] * n_bins for _ in range(blocks * blocks)]
    for yy in range(size):
        for xx in range(size):
            code = lbp_code(analysis, yy + margin, xx + margin, p, r)
            out[(yy // bs) * blocks + xx // bs][uniform_bin_of(code, p)] += 1
    return out


# -- statistics


def pearson(a, b) -> float:
    xs = [float(v) for row in a for v in row]
    ys = [float(v) for row in b for v in row]
    n = len(xs)
    mx, my = sum(xs) / n, sum(ys) / n
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    sxx = sum((x - mx) ** 2 for x in xs)
    syy = sum((y - my) ** 2 for y in ys)
    return sxy / math.sqrt(sxx * syy)


# -- metrics


def nme_loop(preds, truths, left_eye, right_eye) -> list[float]:
    out = []
    for p, g in zip(preds, truths):
        lx = sum(g[i][0] for i in left_eye) / len(left_eye)
        ly = sum(g[i][1] for i in left_eye) / len(left_eye)
        rx = sum(g[i][0] for i in right_eye) / len(right_eye)
        ry = sum(g[i][1] for i in right_eye) / len(right_eye)
        iod = math.hypot(lx - rx, ly - ry)
        err = sum(math.hypot(p[i][0] - g[i][0], p[i][1] - g[i][1]) for i in range(len(g))) / len(g)
        out.append(err / iod)
    return out


def ced_loop(errors, thresholds) -> list[float]:
    return [sum(1 for e in errors if e <= t) / len(errors) for t in thresholds]


def confusion_at(scores, truth, threshold):
    tp = fp = fn = 0
    for s, y in zip(scores, truth):
        pred = s >= threshold
        if pred and y:
            tp += 1
        elif pred and not y:
            fp += 1
        elif y:
            fn += 1
    return tp, fp, fn


def pr_bruteforce(scores, truth, thresholds, target=0.8):
    precision, recall = [], []
    best = 0.0
    for t in thresholds:
        tp, fp, fn = confusion_at(scores, truth, t)
        p = tp / (tp + fp) if tp + fp else float("nan")
        r = tp / (tp + fn) if tp + fn else float("nan")
        precision.append(p)
        recall.append(r)
        if tp + fp and p >= target and r > best:
            best = r
    return precision, recall, best


# -- fusion


def spread(preds, normalizer) -> float:
    """sqrt(mean over landmarks of var_x + var_y), population variance, over the predictions."""
    n = len(preds)
    if n < 2:
        return 0.0
    total = 0.0
    n_lm = len(preds[0])
    for j in range(n_lm):
        for d in range(2):
            vals = [p[j][d] for p in preds]
            m = sum(vals) / n
            total += sum((v - m) ** 2 for v in vals) / n
    return math.sqrt(total / n_lm) / normalizer


# -- geometry


def rotation_matrix(rvec):
    """Rodrigues formula."""
    theta = math.sqrt(sum(v * v for v in rvec))
    if theta == 0:
        return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    kx, ky, kz = (v / theta for v in rvec)
    c, s, C = math.cos(theta), math.sin(theta), 1 - math.cos(theta)
    return [
        [c + kx * kx * C, kx * ky * C - kz * s, kx * kz * C + ky * s],
        [ky * kx * C + kz * s, c + ky * ky * C, ky * kz * C - kx * s],
        [kz * kx * C - ky * s, kz * ky * C + kx * s, c + kz * kz * C],
    ]


def pinhole(points, rvec, tvec, f, cx, cy):
    R = rotation_matrix(rvec)
    out = []
    for p in points:
        X = [sum(R[i][k] * p[k] for k in range(3)) + tvec[i] for i in range(3)]
        out.append((f * X[0] / X[2] + cx, f * X[1] / X[2] + cy))
    return out


def grid_zone(x, y, bx, by, bw, bh) -> int:
    col = min(2, max(0, int(3 * (x - bx) / bw)))
    row = min(2, max(0, int(3 * (y - by) / bh)))
    return row * 3 + col


__all__ = [name for name in dir() if not name.startswith("_") and name not in ("math", "product")]
del product
