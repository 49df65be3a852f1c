"""A small dense-tensor engine with tape-based reverse-mode differentiation.

Only the operators the stereo network needs are provided. Tensors wrap numpy
arrays laid out as (N, C, H, W); scalar results (losses) are 0-d.

Recording happens only while a :class:`Tape` is active::

    with Tape() as tape:
        loss = masked_l1(conv2d(x, w, b, padding=1), target, mask)
    tape.backward(loss)

Outside a tape every op is a plain forward computation, which is what
inference uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigError, NumericalError

# every op result is checked for NaN/Inf while this is set
CHECK_FINITE = True

_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_recorded")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._recorded = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, name={self.name!r})"


class Parameter(Tensor):
    """A trainable tensor with a persistent gradient buffer."""

    __slots__ = ()

    def __init__(self, data, name):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class Tape:
    """Ordered record of differentiable ops.

    Ops are appended in execution order, so walking the list backwards visits
    every node after all of its consumers.
    """

    def __init__(self):
        self.ops = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def record(self, out, inputs, backward_fn):
        out._recorded = True
        self.ops.append((out, inputs, backward_fn))

    def backward(self, loss):
        """Accumulate d(loss)/d(leaf) into the ``grad`` of every leaf that requires it."""
        if loss.data.size != 1:
            raise ConfigError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        if not loss._recorded and loss.requires_grad:
            _accumulate_leaf(loss, grads[id(loss)])
        for out, inputs, fn in reversed(self.ops):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t._recorded:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi
                else:
                    _accumulate_leaf(t, gi)


def backward(loss, tape):
    tape.backward(loss)


def _accumulate_leaf(t, g):
    g = g.astype(t.data.dtype, copy=False)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def current_tape():
    return _TAPES[-1] if _TAPES else None


def _result(data, inputs, backward_fn, op):
    if CHECK_FINITE and not np.isfinite(data).all():
        raise NumericalError(f"non-finite values produced by {op}")
    tape = current_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward_fn)
    return out


# ---------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    stride: int
    in_channels: int
    out_channels: int
    padding: int = 0

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ConfigError(f"invalid ConvSpec {self}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError(f"invalid ConvSpec {self}")

    def conv_out(self, size):
        return (size + 2 * self.padding - self.kernel) // self.stride + 1

    def deconv_out(self, size):
        return (size - 1) * self.stride - 2 * self.padding + self.kernel


def _im2col(xp, k, s, ho, wo):
    """Columns (C*k*k, N*ho*wo) of a padded (N, C, Hp, Wp) array.

    Channel-major layout keeps the innermost copy contiguous along width,
    which is several times faster than the (N*ho*wo, C*k*k) layout.
    """
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    win = as_strided(xp, (c, k, k, n, ho, wo), (sc, sh, sw, sn, sh * s, sw * s), writeable=False)
    return win.reshape(c * k * k, n * ho * wo)


def _col2im(cols, shape, k, s, ho, wo):
    # scatter-add (C*k*k, N*ho*wo) columns back into a padded (N, C, Hp, Wp) array
    n, c, hp, wp = shape
    out = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    blocks = cols.reshape(c, k, k, n, ho, wo)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + s * ho:s, j:j + s * wo:s] += blocks[:, i, j]
    return out.transpose(1, 0, 2, 3)


def _check_conv(x, weight, bias, layer):
    where = f" in layer {layer!r}" if layer else ""
    if x.data.ndim != 4:
        raise ConfigError(f"expected (N,C,H,W) input{where}, got shape {x.shape}")
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ConfigError(f"weight must be (out,in,k,k){where}, got {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ConfigError(
            f"channel mismatch{where}: input has {x.shape[1]} channels, "
            f"weight expects {weight.shape[1]}"
        )
    if bias is not None and bias.shape != (1, weight.shape[0], 1, 1):
        raise ConfigError(f"bias must be (1,{weight.shape[0]},1,1){where}, got {bias.shape}")


def conv2d(x, weight, bias=None, stride=1, padding=0, layer=None):
    """Cross-correlation of ``x`` (N,C,H,W) with ``weight`` (O,C,k,k) plus bias."""
    _check_conv(x, weight, bias, layer)
    n, c, h, w = x.shape
    o, _, k, _ = weight.shape
    s, p = stride, padding
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    if ho < 1 or wo < 1:
        raise ConfigError(f"input {h}x{w} too small for kernel {k} in layer {layer!r}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, k, s, ho, wo)
    wmat = weight.data.reshape(o, -1)
    out = (wmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out)
    xp_shape = xp.shape

    def backward_fn(g):
        gm = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gx = gw = gb = None
        if x.requires_grad:
            gx = _col2im(wmat.T @ gm, xp_shape, k, s, ho, wo)
            if p:
                gx = gx[:, :, p:p + h, p:p + w]
        if weight.requires_grad:
            gw = (gm @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3)).reshape(bias.shape)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, inputs, backward_fn, f"conv2d[{layer}]")


def deconv2d(x, weight, bias=None, stride=1, padding=0, layer=None):
    """Transposed convolution; ``weight`` is (O,C,k,k) like :func:`conv2d`.

    Output size is ``(H-1)*stride - 2*padding + k``.
    """
    _check_conv(x, weight, bias, layer)
    n, c, h, w = x.shape
    o, _, k, _ = weight.shape
    s, p = stride, padding
    hf, wf = (h - 1) * s + k, (w - 1) * s + k
    ho, wo = hf - 2 * p, wf - 2 * p
    if ho < 1 or wo < 1:
        raise ConfigError(f"deconv output would be empty in layer {layer!r}")
    xm = x.data.transpose(1, 0, 2, 3).reshape(c, -1)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(o * k * k, c)
    full = _col2im(wmat @ xm, (n, o, hf, wf), k, s, h, w)
    out = full[:, :, p:p + ho, p:p + wo]
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out)

    def backward_fn(g):
        gp = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p))) if p else g
        gcols = _im2col(np.ascontiguousarray(gp), k, s, h, w)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.ascontiguousarray((wmat.T @ gcols).reshape(c, n, h, w).transpose(1, 0, 2, 3))
        if weight.requires_grad:
            gw = (gcols @ xm.T).reshape(o, k, k, c).transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3)).reshape(bias.shape)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, inputs, backward_fn, f"deconv2d[{layer}]")


# ---------------------------------------------------------------------------
# elementwise and structural ops


def leaky_relu(x, slope=0.1):
    if not 0.0 <= slope < 1.0:
        raise ConfigError(f"leaky_relu slope must lie in [0, 1), got {slope}")
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * x.data.dtype.type(slope))

    def backward_fn(g):
        return (np.where(pos, g, g * g.dtype.type(slope)),)

    return _result(out, (x,), backward_fn, "leaky_relu")


def concat_channels(inputs, layer=None):
    """Concatenate along the channel axis, in list order."""
    inputs = list(inputs)
    ref = inputs[0].shape
    for t in inputs[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ConfigError(
                f"concat mismatch feeding layer {layer!r}: "
                f"{[tuple(i.shape) for i in inputs]}"
            )
    if len(inputs) == 1:
        return inputs[0]
    out = np.concatenate([t.data for t in inputs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])

    def backward_fn(g):
        return tuple(g[:, a:b] for a, b in zip(bounds[:-1], bounds[1:]))

    return _result(out, tuple(inputs), backward_fn, f"concat[{layer}]")


def _interp_matrix(n_in, n_out, dtype):
    # align-corners linear interpolation weights, shape (n_out, n_in)
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.minimum(np.floor(pos).astype(int), n_in - 2)
    t = pos - i0
    rows = np.arange(n_out)
    m[rows, i0] = 1.0 - t
    m[rows, i0 + 1] += t
    return m


def bilinear_resize(x, out_h, out_w):
    """Align-corners bilinear resize of the two spatial axes."""
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"resize target must be positive, got {out_h}x{out_w}")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return x
    ah = _interp_matrix(h, out_h, x.dtype)
    aw = _interp_matrix(w, out_w, x.dtype)
    out = ah @ x.data @ aw.T

    def backward_fn(g):
        return (ah.T @ g @ aw,)

    return _result(out, (x,), backward_fn, "bilinear_resize")


def upsample2x(x):
    return bilinear_resize(x, 2 * x.shape[2], 2 * x.shape[3])


def abs_diff(a, b):
    if a.shape != b.shape:
        raise ConfigError(f"abs_diff shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    sign = np.sign(diff)

    def backward_fn(g):
        ga = g * sign
        return ga, -ga

    return _result(np.abs(diff), (a, b), backward_fn, "abs_diff")


def add(a, b):
    if a.shape != b.shape:
        raise ConfigError(f"add shape mismatch {a.shape} vs {b.shape}")

    def backward_fn(g):
        return g, g

    return _result(a.data + b.data, (a, b), backward_fn, "add")


def scale(x, c):
    c = x.dtype.type(c)

    def backward_fn(g):
        return (g * c,)

    return _result(x.data * c, (x,), backward_fn, "scale")


def weighted_sum(x, weights):
    """Scalar ``sum(x * weights)`` with constant ``weights``."""
    weights = np.asarray(weights, dtype=x.dtype)
    out = np.asarray((x.data * weights).sum(), dtype=x.dtype)

    def backward_fn(g):
        return (g * weights,)

    return _result(out, (x,), backward_fn, "weighted_sum")


def masked_l1(pred, target, mask):
    """Mean absolute error of ``pred`` against ``target`` over ``mask == 1``."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    mask = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ConfigError(f"masked_l1 shape mismatch {pred.shape}, {target.shape}, {mask.shape}")
    count = float(mask.sum())
    if count <= 0:
        raise ConfigError("masked_l1: no valid pixels")
    dt = pred.dtype.type
    diff = pred.data - target.astype(pred.dtype, copy=False)
    m = mask.astype(pred.dtype, copy=False)
    out = np.asarray((np.abs(diff) * m).sum() / dt(count), dtype=pred.dtype)

    def backward_fn(g):
        return (g * np.sign(diff) * m / dt(count),)

    return _result(out, (pred,), backward_fn, "masked_l1")


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8, state=None):
    """One bias-corrected Adam update applied in place; returns the state."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if state is None:
        state = AdamState({}, {})
    state.step += 1
    t = state.step
    for p in params:
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        dt = p.data.dtype.type
        m *= dt(beta1)
        m += dt(1 - beta1) * g
        v *= dt(beta2)
        v += dt(1 - beta2) * (g * g)
        mhat = m / dt(1 - beta1 ** t)
        vhat = v / dt(1 - beta2 ** t)
        p.data -= dt(lr) * mhat / (np.sqrt(vhat) + dt(eps))
    return state


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = AdamState({}, {})

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr):
        adam_step(self.params, lr, self.beta1, self.beta2, self.eps, self.state)
