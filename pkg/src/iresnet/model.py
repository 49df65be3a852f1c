"""Network assembly: shared stem, initial disparity net (DES) and the
residual refinement net (DRS) that can be applied iteratively with shared
weights.

Layer and parameter names follow the rows of the architecture table
(``conv2a.weight``, ``r_iconv1.bias`` ...).  The left/right ("a"/"b") stem
branches share one set of weights, stored under the "a" name.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .errors import ConfigError
from .stereo_ops import correlation1d, reconstruction_error
from .tensor import (
    ConvSpec,
    Parameter,
    Tensor,
    add,
    bilinear_resize,
    concat_channels,
    conv2d,
    deconv2d,
    leaky_relu,
    upsample2x,
)

VARIANTS = ("full", "no_fc_no_re", "no_re", "no_fc", "no_disp_in", "single_scale_skip")

LEAKY_SLOPE = 0.1

# Reference architecture: (row, type, k, s, c_in, c_out, input).
# Rows named "xa" stand for both the "xa" and "xb" branches.
ARCHITECTURE = [
    ("conv1a", "Conv", 7, 2, 3, 64, "left image"),
    ("up_1a", "Deconv", 4, 2, 64, 32, "conv1a"),
    ("conv2a", "Conv", 5, 2, 64, 128, "conv1a"),
    ("up_2a", "Deconv", 8, 4, 128, 32, "conv2a"),
    ("up_1a2a", "Conv", 1, 1, 64, 32, "up_1a+up_2a"),
    ("corr1d", "Corr", 1, 1, 128, 81, "conv2a, conv2b"),
    ("conv_redir", "Conv", 1, 1, 128, 64, "conv2a"),
    ("conv3", "Conv", 3, 2, 145, 256, "corr1d+conv_redir"),
    ("conv3_1", "Conv", 3, 1, 256, 256, "conv3"),
    ("conv4", "Conv", 3, 2, 256, 512, "conv3_1"),
    ("conv4_1", "Conv", 3, 1, 512, 512, "conv4"),
    ("conv5", "Conv", 3, 2, 512, 512, "conv4_1"),
    ("conv5_1", "Conv", 3, 1, 512, 512, "conv5"),
    ("conv6", "Conv", 3, 2, 512, 1024, "conv5_1"),
    ("conv6_1", "Conv", 3, 1, 1024, 1024, "conv6"),
    ("disp6", "Conv", 3, 1, 1024, 1, "conv6_1"),
    ("uconv5", "Deconv", 4, 2, 1024, 512, "conv6_1"),
    ("iconv5", "Conv", 3, 1, 1025, 512, "uconv5+disp6+conv5_1"),
    ("disp5", "Conv", 3, 1, 512, 1, "iconv5"),
    ("uconv4", "Deconv", 4, 2, 512, 256, "iconv5"),
    ("iconv4", "Conv", 3, 1, 769, 256, "uconv4+disp5+conv4_1"),
    ("disp4", "Conv", 3, 1, 256, 1, "iconv4"),
    ("uconv3", "Deconv", 4, 2, 256, 128, "iconv4"),
    ("iconv3", "Conv", 3, 1, 385, 128, "uconv3+disp4+conv3_1"),
    ("disp3", "Conv", 3, 1, 128, 1, "iconv3"),
    ("uconv2", "Deconv", 4, 2, 128, 64, "iconv3"),
    ("iconv2", "Conv", 3, 1, 193, 64, "uconv2+disp3+conv2a"),
    ("disp2", "Conv", 3, 1, 64, 1, "iconv2"),
    ("uconv1", "Deconv", 4, 2, 64, 32, "iconv2"),
    ("iconv1", "Conv", 3, 1, 97, 32, "uconv1+disp2+conv1a"),
    ("disp1", "Conv", 3, 1, 32, 1, "iconv1"),
    ("uconv0", "Deconv", 4, 2, 32, 32, "iconv1"),
    ("iconv0", "Conv", 3, 1, 65, 32, "uconv0+disp1+up_1a2a"),
    ("disp0", "Conv", 3, 1, 32, 1, "iconv0"),
    ("w_up_1b2b", "Warp", None, None, 32, 32, "up_1b2b"),
    ("r_conv0", "Conv", 3, 1, 65, 32, "|up_1a2a-w_up_1b2b|+disp0+up_1a2a"),
    ("r_conv1", "Conv", 3, 2, 32, 64, "r_conv0"),
    ("c_conv1a", "Conv", 3, 1, 64, 16, "conv1a"),
    ("r_corr", "Corr", 1, 1, 16, 41, "c_conv1a, c_conv1b"),
    ("r_conv1_1", "Conv", 3, 1, 105, 64, "r_conv1+r_corr"),
    ("r_conv2", "Conv", 3, 2, 64, 128, "r_conv1_1"),
    ("r_conv2_1", "Conv", 3, 1, 128, 128, "r_conv2"),
    ("r_res2", "Conv", 3, 1, 128, 1, "r_conv2_1"),
    ("r_uconv1", "Deconv", 4, 2, 128, 64, "r_conv2_1"),
    ("r_iconv1", "Conv", 3, 1, 127, 64, "r_uconv1+r_res2+r_conv1_1"),
    ("r_res1", "Conv", 3, 1, 64, 1, "r_iconv1"),
    ("r_uconv0", "Deconv", 4, 2, 64, 32, "r_iconv1"),
    ("r_iconv0", "Conv", 3, 1, 65, 32, "r_uconv1+r_res1+r_conv0"),
    ("r_res0", "Conv", 3, 1, 32, 1, "r_iconv0"),
]

# Rows whose listed channel count or input disagrees with the listed wiring;
# the model follows the wiring.
ARCHITECTURE_EXCEPTIONS = {
    "r_iconv1": "table lists 127 input channels; listed inputs 64+1+64 sum to 129",
    "r_iconv0": "table lists input r_uconv1, which is at the wrong scale; wired to r_uconv0",
}

PREDICTION_HEADS = ("disp6", "disp5", "disp4", "disp3", "disp2", "disp1", "disp0",
                    "r_res2", "r_res1", "r_res0")

# Start at zero so an untrained refinement stage passes disp_in through unchanged.
RESIDUAL_HEADS = ("r_res2", "r_res1", "r_res0")

DEFAULT_PARAM_TARGET = 43.34e6
DES_PARAM_TARGET = 42.76e6


@dataclass(frozen=True)
class ModelConfig:
    channel_mult: Fraction = Fraction(1)
    d_coarse: int = 40
    d_fine: int = 20
    refine_iters: int = 1
    seed: int = 0
    variant: str = "full"
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "channel_mult", parse_fraction(self.channel_mult))
        if not 0 < self.channel_mult <= 1:
            raise ConfigError(f"channel_mult must lie in (0, 1], got {self.channel_mult}")
        if self.d_coarse < 0 or self.d_fine < 0:
            raise ConfigError("correlation displacements must be >= 0")
        if self.refine_iters < 0:
            raise ConfigError(f"refine_iters must be >= 0, got {self.refine_iters}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown model variant {self.variant!r}; choose from {VARIANTS}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")


def parse_fraction(value):
    try:
        return Fraction(value) if not isinstance(value, float) else Fraction(value).limit_denominator(1 << 16)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"cannot parse channel multiplier {value!r}") from exc


def scale_channels(c, mult):
    """Round ``c * mult`` half-up, never below one channel."""
    return max(1, math.floor(Fraction(c) * Fraction(mult) + Fraction(1, 2)))


@dataclass
class Layer:
    name: str
    kind: str  # "conv" | "deconv"
    spec: ConvSpec
    weight: Parameter
    bias: Parameter
    activate: bool
    section: str

    def __call__(self, x):
        fn = conv2d if self.kind == "conv" else deconv2d
        y = fn(x, self.weight, self.bias, self.spec.stride, self.spec.padding, layer=self.name)
        return leaky_relu(y, LEAKY_SLOPE) if self.activate else y


@dataclass
class SharedFeatures:
    conv1a: Tensor
    conv1b: Tensor
    conv2a: Tensor
    conv2b: Tensor
    up_1a2a: Tensor
    up_1b2b: Tensor
    c_conv1a: Tensor | None = None
    c_conv1b: Tensor | None = None


@dataclass
class RefineStep:
    disp_in: Tensor
    r_res2: Tensor
    r_res1: Tensor
    r_res0: Tensor
    refined: Tensor


@dataclass
class DisparityPyramid:
    disps: dict
    refined: list = field(default_factory=list)

    @property
    def initial(self):
        return self.disps["disp0"]

    @property
    def final(self):
        return self.refined[-1].refined if self.refined else self.initial

    def at_iteration(self, k):
        """Full-resolution disparity after ``k`` refinement passes (0 = initial)."""
        return self.initial if k == 0 else self.refined[k - 1].refined


class IResNet:
    """Parameter set plus wiring for one model configuration."""

    def __init__(self, config, overrides=None):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        self.layers = {}
        self.params = {}
        self._overrides = dict(overrides or {})
        v = config.variant
        self.multi_scale = v != "single_scale_skip"
        self.has_drs = config.refine_iters > 0
        self.use_re = v not in ("no_re", "no_fc_no_re")
        self.use_fc = v not in ("no_fc", "no_fc_no_re")
        self.use_disp_in = v != "no_disp_in"
        self._rng = np.random.default_rng(config.seed)
        self._build()
        del self._rng

    def ch(self, c):
        return scale_channels(c, self.config.channel_mult)

    def _add(self, name, kind, k, s, cin, cout, section, pad=None, activate=True):
        cout = self._overrides.get(name, cout)
        if pad is None:
            pad = k // 2 if kind == "conv" else (k - s) // 2
        spec = ConvSpec(k, s, cin, cout, pad)
        fan_in = cin * k * k if kind == "conv" else cin * (k / s) ** 2
        w = self._rng.standard_normal((cout, cin, k, k)) * math.sqrt(2.0 / fan_in)
        if name in RESIDUAL_HEADS:
            w[...] = 0  # drawn anyway to keep later layers' draws unchanged
        weight = Parameter(w.astype(self.dtype), f"{name}.weight")
        bias = Parameter(np.zeros((1, cout, 1, 1), dtype=self.dtype), f"{name}.bias")
        self.layers[name] = Layer(name, kind, spec, weight, bias, activate, section)
        self.params[weight.name] = weight
        self.params[bias.name] = bias
        return cout

    def _build(self):
        ch, cfg = self.ch, self.config
        conv = lambda *a, **kw: self._add(a[0], "conv", *a[1:], **kw)
        deconv = lambda *a, **kw: self._add(a[0], "deconv", *a[1:], **kw)

        # stem
        c1, u1, c2 = ch(64), ch(32), ch(128)
        conv("conv1a", 7, 2, 3, c1, "stem")
        deconv("up_1a", 4, 2, c1, u1, "stem")
        conv("conv2a", 5, 2, c1, c2, "stem")
        if self.multi_scale:
            u2 = ch(32)
            deconv("up_2a", 8, 4, c2, u2, "stem")
            fuse = ch(32)
            conv("up_1a2a", 1, 1, u1 + u2, fuse, "stem")
        else:
            fuse = u1
        self.fusion_channels = fuse

        # initial disparity estimation
        corr = 2 * cfg.d_coarse + 1
        redir = ch(64)
        conv("conv_redir", 1, 1, c2, redir, "des")
        e3, e4, e5, e6 = ch(256), ch(512), ch(512), ch(1024)
        conv("conv3", 3, 2, corr + redir, e3, "des")
        conv("conv3_1", 3, 1, e3, e3, "des")
        conv("conv4", 3, 2, e3, e4, "des")
        conv("conv4_1", 3, 1, e4, e4, "des")
        conv("conv5", 3, 2, e4, e5, "des")
        conv("conv5_1", 3, 1, e5, e5, "des")
        conv("conv6", 3, 2, e5, e6, "des")
        conv("conv6_1", 3, 1, e6, e6, "des")
        conv("disp6", 3, 1, e6, 1, "des", activate=False)
        prev = e6
        # (level, upconv width, skip width)
        for lvl, up, skip in ((5, ch(512), e5), (4, ch(256), e4), (3, ch(128), e3),
                              (2, ch(64), c2), (1, ch(32), c1), (0, ch(32), fuse)):
            deconv(f"uconv{lvl}", 4, 2, prev, up, "des")
            conv(f"iconv{lvl}", 3, 1, up + 1 + skip, up, "des")
            conv(f"disp{lvl}", 3, 1, up, 1, "des", activate=False)
            prev = up

        if not self.has_drs:
            return
        # refinement
        r0, r1, r2 = ch(32), ch(64), ch(128)
        r0_in = (fuse if self.use_re else 0) + (1 if self.use_disp_in else 0) + fuse
        conv("r_conv0", 3, 1, r0_in, r0, "drs")
        conv("r_conv1", 3, 2, r0, r1, "drs")
        fc = 0
        if self.use_fc:
            conv("c_conv1a", 3, 1, c1, ch(16), "drs")
            fc = 2 * cfg.d_fine + 1
        conv("r_conv1_1", 3, 1, r1 + fc, r1, "drs")
        conv("r_conv2", 3, 2, r1, r2, "drs")
        conv("r_conv2_1", 3, 1, r2, r2, "drs")
        conv("r_res2", 3, 1, r2, 1, "drs", activate=False)
        deconv("r_uconv1", 4, 2, r2, r1, "drs")
        conv("r_iconv1", 3, 1, r1 + 1 + r1, r1, "drs")
        conv("r_res1", 3, 1, r1, 1, "drs", activate=False)
        deconv("r_uconv0", 4, 2, r1, r0, "drs")
        conv("r_iconv0", 3, 1, r0 + 1 + r0, r0, "drs")
        conv("r_res0", 3, 1, r0, 1, "drs", activate=False)

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def __call__(self, left, right, iters=None):
        return iresnet_forward(self, left, right, iters)


def build_model(config, dry_run=False, overrides=None):
    """Instantiate every layer for ``config``.

    With ``dry_run`` a zero input of 64x64 is pushed through the network so
    any wiring fault surfaces immediately as a :class:`ConfigError` naming the
    offending layer.  ``overrides`` maps row names to output channel counts
    and exists for fault-injection checks.
    """
    model = IResNet(config, overrides)
    if dry_run:
        z = Tensor(np.zeros((1, 3, 64, 64), dtype=model.dtype))
        iresnet_forward(model, z, z, config.refine_iters)
    return model


def build_variant(config, variant):
    if variant not in VARIANTS:
        raise ConfigError(f"unknown ablation variant {variant!r}; choose from {VARIANTS}")
    return build_model(replace(config, variant=variant))


def count_params(model, sections=None):
    """Number of trainable scalars, optionally restricted to stem/des/drs."""
    total = 0
    for layer in model.layers.values():
        if sections is None or layer.section in sections:
            total += layer.weight.data.size + layer.bias.data.size
    return total


def _to_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def stem_forward(model, left, right):
    L = model.layers
    left, right = _to_tensor(left, model.dtype), _to_tensor(right, model.dtype)
    if left.shape != right.shape:
        raise ConfigError(f"left/right shape mismatch {left.shape} vs {right.shape}")
    h, w = left.shape[2:]
    if h % 64 or w % 64:
        raise ConfigError(f"input {h}x{w} is not divisible by 64; pad the images to a multiple of 64 first")

    def branch(img):
        c1 = L["conv1a"](img)
        c2 = L["conv2a"](c1)
        u1 = L["up_1a"](c1)
        if model.multi_scale:
            u2 = L["up_2a"](c2)
            fused = L["up_1a2a"](concat_channels([u1, u2], layer="up_1a2a"))
        else:
            fused = u1
        cc = L["c_conv1a"](c1) if "c_conv1a" in L else None
        return c1, c2, fused, cc

    a, b = branch(left), branch(right)
    return SharedFeatures(a[0], b[0], a[1], b[1], a[2], b[2], a[3], b[3])


def des_forward(model, feats):
    L = model.layers
    corr = correlation1d(feats.conv2a, feats.conv2b, model.config.d_coarse)
    redir = L["conv_redir"](feats.conv2a)
    x = L["conv3"](concat_channels([corr, redir], layer="conv3"))
    enc = {}
    enc[3] = x = L["conv3_1"](x)
    enc[4] = x = L["conv4_1"](L["conv4"](x))
    enc[5] = x = L["conv5_1"](L["conv5"](x))
    x = L["conv6_1"](L["conv6"](x))
    disps = {"disp6": L["disp6"](x)}
    skips = {5: enc[5], 4: enc[4], 3: enc[3], 2: feats.conv2a, 1: feats.conv1a, 0: feats.up_1a2a}
    for lvl in (5, 4, 3, 2, 1, 0):
        up = L[f"uconv{lvl}"](x)
        coarse = upsample2x(disps[f"disp{lvl + 1}"])
        name = f"iconv{lvl}"
        x = L[name](concat_channels([up, coarse, skips[lvl]], layer=name))
        disps[f"disp{lvl}"] = L[f"disp{lvl}"](x)
    return DisparityPyramid(disps)


def feature_correlation(model, feats):
    """Fine-scale correlation term of the refinement net (None when ablated)."""
    if not model.use_fc:
        return None
    return correlation1d(feats.c_conv1a, feats.c_conv1b, model.config.d_fine)


def drs_forward(model, feats, disp_in, fc=None):
    if not model.has_drs:
        raise ConfigError("model was built without a refinement network (refine_iters=0)")
    L = model.layers
    if disp_in.shape[2:] != feats.up_1a2a.shape[2:]:
        raise ConfigError(f"disp_in {disp_in.shape} is not full resolution")
    if fc is None and model.use_fc:
        fc = feature_correlation(model, feats)
    parts = []
    if model.use_re:
        parts.append(reconstruction_error(feats.up_1a2a, feats.up_1b2b, disp_in))
    if model.use_disp_in:
        parts.append(disp_in)
    parts.append(feats.up_1a2a)
    r0 = L["r_conv0"](concat_channels(parts, layer="r_conv0"))
    r1 = L["r_conv1"](r0)
    x = concat_channels([r1, fc], layer="r_conv1_1") if fc is not None else r1
    r11 = L["r_conv1_1"](x)
    x = L["r_conv2_1"](L["r_conv2"](r11))
    res2 = L["r_res2"](x)
    up = L["r_uconv1"](x)
    x = L["r_iconv1"](concat_channels([up, upsample2x(res2), r11], layer="r_iconv1"))
    res1 = L["r_res1"](x)
    up = L["r_uconv0"](x)
    x = L["r_iconv0"](concat_channels([up, upsample2x(res1), r0], layer="r_iconv0"))
    res0 = L["r_res0"](x)
    return RefineStep(disp_in, res2, res1, res0, add(disp_in, res0))


def iresnet_forward(model, left, right, iters=None):
    """Stem and DES once, then ``iters`` weight-shared refinement passes."""
    if iters is None:
        iters = model.config.refine_iters
    if iters < 0:
        raise ConfigError(f"iters must be >= 0, got {iters}")
    feats = stem_forward(model, left, right)
    pyramid = des_forward(model, feats)
    if iters:
        fc = feature_correlation(model, feats)
        disp = pyramid.initial
        for _ in range(iters):
            step = drs_forward(model, feats, disp, fc)
            pyramid.refined.append(step)
            disp = step.refined
    return pyramid


def downsample_to(disp, h, w):
    return bilinear_resize(disp, h, w)


# ---------------------------------------------------------------------------
# architecture audit


def constructed_rows(model):
    """Map each table row to the (c_in, c_out) actually built."""
    rows = {}
    for name, layer in model.layers.items():
        rows[name] = (layer.spec.in_channels, layer.spec.out_channels)
    c2 = model.layers["conv2a"].spec.out_channels
    rows["corr1d"] = (c2, 2 * model.config.d_coarse + 1)
    if model.has_drs:
        f = model.fusion_channels
        rows["w_up_1b2b"] = (f, f)
        if model.use_fc:
            rows["r_corr"] = (model.layers["c_conv1a"].spec.out_channels, 2 * model.config.d_fine + 1)
    return rows


@dataclass
class AuditRow:
    row: str
    expected: tuple
    actual: tuple | None
    ok: bool
    note: str = ""


def audit_architecture(model):
    """Compare the built channel counts with the table, row by row."""
    built = constructed_rows(model)
    out = []
    for row, _type, k, s, cin, cout, _inp in ARCHITECTURE:
        actual = built.get(row)
        note = ARCHITECTURE_EXCEPTIONS.get(row, "")
        if actual is None:
            out.append(AuditRow(row, (cin, cout), None, False, "row not built"))
            continue
        ok = actual == (cin, cout)
        if row == "r_iconv1":
            ok = actual == (129, cout)
        if row in model.layers:
            spec = model.layers[row].spec
            ok = ok and spec.kernel == k and spec.stride == s
        out.append(AuditRow(row, (cin, cout), actual, ok, note))
    return out
