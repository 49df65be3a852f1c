"""Direct loop evaluations of the stereo operators, used as reference oracles.

These are deliberately written pixel by pixel and share no code with the
vectorised operators they check.
"""

import math

import numpy as np


def correlation1d_naive(left, right, max_disp):
    n, c, h, w = left.shape
    out = np.zeros((n, 2 * max_disp + 1, h, w))
    for b in range(n):
        for j in range(2 * max_disp + 1):
            d = j - max_disp
            for y in range(h):
                for x in range(w):
                    xr = x - d
                    if 0 <= xr < w:
                        s = 0.0
                        for ch in range(c):
                            s += float(left[b, ch, y, x]) * float(right[b, ch, y, xr])
                        out[b, j, y, x] = s / c
    return out


def warp1d_naive(features, disparity):
    n, c, h, w = features.shape
    out = np.zeros((n, c, h, w))
    for b in range(n):
        for y in range(h):
            for x in range(w):
                u = min(max(x - float(disparity[b, 0, y, x]), 0.0), w - 1.0)
                lo = math.floor(u)
                hi = min(lo + 1, w - 1)
                t = u - lo
                for ch in range(c):
                    out[b, ch, y, x] = (1 - t) * features[b, ch, y, lo] + t * features[b, ch, y, hi]
    return out


def max_relative_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0), np.abs(b).max(initial=0), 1e-12)
    return float(np.abs(a - b).max(initial=0) / scale)


def oracle_trials(trials=20, seed=0, max_c=8, max_w=32, max_d=4):
    """Random instances comparing both operators with their loop oracles.

    Returns ``{"correlation1d": [errors], "warp1d": [errors]}``.
    """
    from .stereo_ops import correlation1d, warp1d
    from .tensor import Tensor

    rng = np.random.default_rng(seed)
    corr, warp = [], []
    for _ in range(trials):
        n = int(rng.integers(1, 3))
        c = int(rng.integers(1, max_c + 1))
        h = int(rng.integers(1, 5))
        w = int(rng.integers(1, max_w + 1))
        d = int(rng.integers(0, max_d + 1))
        a, b = rng.standard_normal((2, n, c, h, w))
        got = correlation1d(Tensor(a), Tensor(b), d).data
        corr.append(max_relative_error(got, correlation1d_naive(a, b, d)))
        disp = rng.uniform(-max_d, max_d + 0.999, size=(n, 1, h, w))
        disp[rng.random(disp.shape) < 0.2] = rng.integers(-max_d, max_d + 1)
        got = warp1d(Tensor(a), Tensor(disp)).data
        warp.append(max_relative_error(got, warp1d_naive(a, disp)))
    return {"correlation1d": corr, "warp1d": warp}
