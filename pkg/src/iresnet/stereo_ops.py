"""Differentiable stereo operators: 1-D correlation, horizontal back-warping,
and the feature reconstruction error built from them.

Disparity is measured in pixels in the left-image frame: a left pixel at
column ``x`` matches the right-image pixel at column ``x - d``.
"""

import numpy as np

from .errors import ConfigError
from .tensor import _result, abs_diff


def correlation1d(left, right, max_disp):
    """Horizontal correlation volume of shape (N, 2*max_disp+1, H, W).

    Channel ``j`` holds displacement ``d = j - max_disp``::

        out[n, j, y, x] = mean_c left[n, c, y, x] * right[n, c, y, x - d]

    Positions whose partner column falls outside the image are zero.
    """
    if left.shape != right.shape:
        raise ConfigError(f"correlation1d shape mismatch {left.shape} vs {right.shape}")
    if max_disp < 0:
        raise ConfigError(f"max_disp must be >= 0, got {max_disp}")
    n, c, h, w = left.shape
    L, R = left.data, right.data
    inv_c = L.dtype.type(1.0 / c)
    out = np.zeros((n, 2 * max_disp + 1, h, w), dtype=L.dtype)
    shifts = [(j, j - max_disp) for j in range(2 * max_disp + 1) if abs(j - max_disp) < w]
    for j, d in shifts:
        if d >= 0:
            out[:, j, :, d:] = np.einsum("nchw,nchw->nhw", L[..., d:], R[..., :w - d]) * inv_c
        else:
            e = -d
            out[:, j, :, :w - e] = np.einsum("nchw,nchw->nhw", L[..., :w - e], R[..., e:]) * inv_c

    def backward_fn(g):
        gl = np.zeros_like(L) if left.requires_grad else None
        gr = np.zeros_like(R) if right.requires_grad else None
        for j, d in shifts:
            if d >= 0:
                gj = g[:, j:j + 1, :, d:] * inv_c
                if gl is not None:
                    gl[..., d:] += gj * R[..., :w - d]
                if gr is not None:
                    gr[..., :w - d] += gj * L[..., d:]
            else:
                e = -d
                gj = g[:, j:j + 1, :, :w - e] * inv_c
                if gl is not None:
                    gl[..., :w - e] += gj * R[..., e:]
                if gr is not None:
                    gr[..., e:] += gj * L[..., :w - e]
        return gl, gr

    return _result(out, (left, right), backward_fn, "correlation1d")


def warp1d(features, disparity):
    """Sample ``features`` at column ``x - disparity`` along each row.

    Linear interpolation between the two neighbouring columns; the sample
    coordinate is clamped to ``[0, W-1]`` and the disparity gradient is zero
    where clamping is active.
    """
    n, c, h, w = features.shape
    if disparity.shape != (n, 1, h, w):
        raise ConfigError(f"warp1d: disparity shape {disparity.shape} does not match features {features.shape}")
    f = features.data
    dt = f.dtype
    raw = np.arange(w, dtype=dt) - disparity.data[:, 0]
    u = np.clip(raw, 0, w - 1)
    inside = (raw > 0) & (raw < w - 1)
    if w == 1:
        x0 = np.zeros(u.shape, dtype=np.intp)
    else:
        x0 = np.minimum(np.floor(u).astype(np.intp), w - 2)
    x1 = np.minimum(x0 + 1, w - 1)
    t = (u - x0).astype(dt)[:, None]
    idx0 = np.broadcast_to(x0[:, None], f.shape)
    idx1 = np.broadcast_to(x1[:, None], f.shape)
    f0 = np.take_along_axis(f, idx0, axis=3)
    f1 = np.take_along_axis(f, idx1, axis=3)
    out = (1 - t) * f0 + t * f1

    def backward_fn(g):
        gf = gd = None
        if features.requires_grad:
            base = np.arange(n * c * h).reshape(n, c, h, 1) * w
            size = f.size
            gf = np.bincount((base + idx0).ravel(), ((1 - t) * g).ravel(), minlength=size)
            gf += np.bincount((base + idx1).ravel(), (t * g).ravel(), minlength=size)
            gf = gf.reshape(f.shape).astype(dt)
        if disparity.requires_grad:
            gd = -(g * (f1 - f0)).sum(axis=1, keepdims=True) * inside[:, None]
            gd = gd.astype(dt)
        return gf, gd

    return _result(out, (features, disparity), backward_fn, "warp1d")


def reconstruction_error(left_feat, right_feat, disparity):
    """|left - warp(right, disparity)|, channel by channel."""
    if left_feat.shape != right_feat.shape:
        raise ConfigError(f"reconstruction_error shape mismatch {left_feat.shape} vs {right_feat.shape}")
    return abs_diff(left_feat, warp1d(right_feat, disparity))
