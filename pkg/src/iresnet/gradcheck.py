"""Central finite-difference checks for the differentiable operators."""

import numpy as np

from .tensor import Parameter, Tape, Tensor, weighted_sum


def numeric_grad(f, arrays, eps=1e-6):
    """Central differences of the scalar ``f(*arrays)`` w.r.t. every array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(*arrays)
            flat[i] = orig - eps
            lo = f(*arrays)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_op(op, arrays, rng, eps=1e-6):
    """Largest relative error between analytic and numeric gradients of ``op``.

    ``op`` maps Tensors to a Tensor; the scalar checked is a fixed random
    projection of its output.  All arrays must be float64.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out_shape = op(*[Tensor(a) for a in arrays]).shape
    proj = rng.standard_normal(out_shape)

    def scalar(*arrs):
        return float((op(*[Tensor(a) for a in arrs]).data * proj).sum())

    leaves = [Parameter(a.copy(), name=f"in{i}") for i, a in enumerate(arrays)]
    with Tape() as tape:
        loss = weighted_sum(op(*leaves), proj)
    tape.backward(loss)
    numeric = numeric_grad(scalar, arrays, eps)
    return max(relative_error(p.grad, n) for p, n in zip(leaves, numeric))


# ---------------------------------------------------------------------------
# random instances for every differentiable operator
#
# Inputs are drawn away from non-differentiable points (ReLU kink, |x| at 0,
# integer warp coordinates) so central differences stay valid.


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def case_conv(rng):
    from .tensor import conv2d

    n, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.choice([1, 3, 5]))
    s = int(rng.integers(1, 3))
    h, w = rng.integers(k, k + 4, size=2)
    x = rng.standard_normal((n, c, h, w))
    wt = rng.standard_normal((o, c, k, k))
    b = rng.standard_normal((1, o, 1, 1))
    return (lambda x, wt, b: conv2d(x, wt, b, stride=s, padding=k // 2)), [x, wt, b]


def case_deconv(rng):
    from .tensor import deconv2d

    n, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k, s = [(2, 2), (3, 1), (4, 2), (8, 4)][int(rng.integers(0, 4))]
    h, w = rng.integers(1, 5, size=2)
    x = rng.standard_normal((n, c, h, w))
    wt = rng.standard_normal((o, c, k, k))
    b = rng.standard_normal((1, o, 1, 1))
    return (lambda x, wt, b: deconv2d(x, wt, b, stride=s, padding=(k - s) // 2)), [x, wt, b]


def case_leaky_relu(rng):
    from .tensor import leaky_relu

    shape = tuple(rng.integers(1, 5, size=4))
    slope = float(rng.uniform(0, 0.5))
    return (lambda x: leaky_relu(x, slope)), [_away_from_zero(rng, shape)]


def case_bilinear_resize(rng):
    from .tensor import bilinear_resize

    n, c = rng.integers(1, 3), rng.integers(1, 3)
    h, w = rng.integers(1, 6, size=2)
    oh, ow = rng.integers(1, 10, size=2)
    return (lambda x: bilinear_resize(x, oh, ow)), [rng.standard_normal((n, c, h, w))]


def case_abs_diff(rng):
    from .tensor import abs_diff

    shape = tuple(rng.integers(1, 5, size=4))
    a = rng.standard_normal(shape)
    return abs_diff, [a, a + _away_from_zero(rng, shape)]


def case_masked_l1(rng):
    from .tensor import masked_l1

    shape = (int(rng.integers(1, 3)), 1) + tuple(rng.integers(1, 7, size=2))
    target = rng.standard_normal(shape)
    mask = (rng.random(shape) < 0.6).astype(np.float64)
    mask.reshape(-1)[0] = 1.0
    pred = target + _away_from_zero(rng, shape)
    return (lambda p: masked_l1(p, target, mask)), [pred]


def case_correlation1d(rng):
    from .stereo_ops import correlation1d

    n, c = rng.integers(1, 3), rng.integers(1, 5)
    h, w = rng.integers(1, 4), rng.integers(2, 9)
    d = int(rng.integers(0, 4))
    return (lambda a, b: correlation1d(a, b, d)), [rng.standard_normal((n, c, h, w)),
                                                   rng.standard_normal((n, c, h, w))]


def case_warp1d(rng):
    from .stereo_ops import warp1d

    n, c = rng.integers(1, 3), rng.integers(1, 4)
    h, w = rng.integers(1, 4), rng.integers(3, 9)
    f = rng.standard_normal((n, c, h, w))
    # integer part anywhere, fractional part kept off the kinks at 0 and 1
    disp = rng.integers(-2, w // 2 + 1, size=(n, 1, h, w)) + rng.uniform(0.05, 0.95, size=(n, 1, h, w))
    return warp1d, [f, disp]


GRAD_CASES = {
    "conv": case_conv,
    "deconv": case_deconv,
    "leaky_relu": case_leaky_relu,
    "bilinear_resize": case_bilinear_resize,
    "abs_diff": case_abs_diff,
    "masked_l1": case_masked_l1,
    "correlation1d": case_correlation1d,
    "warp1d": case_warp1d,
}


def gradient_suite(trials=10, seed=0, ops=None):
    """``{op: [relative error per trial]}`` over random shapes."""
    out = {}
    for name in ops or GRAD_CASES:
        rng = np.random.default_rng([seed, sorted(GRAD_CASES).index(name)])
        errs = []
        for _ in range(trials):
            op, arrays = GRAD_CASES[name](rng)
            errs.append(check_op(op, arrays, rng))
        out[name] = errs
    return out
