"""Multi-scale loss, learning-rate schedule, augmentation and the training loop."""

from __future__ import annotations

import logging
import os
import re
from dataclasses import dataclass, field, replace

import numpy as np

from .checkpoint import load_checkpoint, load_optimizer, save_checkpoint, save_optimizer
from .data import DatasetIndex, load_batch, stack
from .errors import ConfigError, FormatError, IResNetError, NumericalError
from .tensor import AdamState, Tape, add, adam_step, bilinear_resize, masked_l1, scale

log = logging.getLogger(__name__)

DISP_WEIGHTS = (1.0, 1 / 2, 1 / 4, 1 / 8, 1 / 16, 1 / 32, 1 / 64)  # disp0 .. disp6
REFINE_WEIGHTS = (1.0, 1 / 2, 1 / 4)  # r_res0 .. r_res2
REFINE_FACTORS = (1, 2, 4)


@dataclass(frozen=True)
class AugmentParams:
    crop: tuple | None = None          # (h, w) pixels; None keeps the full frame
    hscale: tuple = (1.0, 1.0)         # horizontal scale factor range
    vshift: tuple = (0, 0)             # vertical shift range in whole pixels, both images
    brightness: tuple = (0.0, 0.0)     # additive, intensity units in [0, 1]
    contrast: tuple = (1.0, 1.0)       # multiplicative about 0.5
    color: tuple = (1.0, 1.0)          # per-channel gain

    def __post_init__(self):
        if self.crop is not None and (len(self.crop) != 2 or min(self.crop) <= 0):
            raise ConfigError(f"crop must be a positive (h, w) pair, got {self.crop}")
        for name in ("hscale", "vshift", "brightness", "contrast", "color"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"augment {name} range is reversed: ({lo}, {hi})")
        if self.hscale[0] <= 0 or self.contrast[0] < 0 or self.color[0] < 0:
            raise ConfigError("augment scale, contrast and colour ranges must be positive")

    @classmethod
    def default(cls, crop=None):
        return cls(crop=crop, hscale=(0.9, 1.1), vshift=(-2, 2), brightness=(-0.1, 0.1),
                   contrast=(0.8, 1.2), color=(0.9, 1.1))


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-4
    lr_milestones: tuple = ((20000, 5e-5), (35000, 2.5e-5), (50000, 1.25e-5))
    max_iters: int = 65000
    batch_size: int = 2
    loss_weights: tuple = DISP_WEIGHTS
    refine_weights: tuple = REFINE_WEIGHTS
    refine_loss_weight: float = 1.0
    seed: int = 0
    checkpoint_every: int = 5000
    augment: AugmentParams | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        its = [int(i) for i, _ in self.lr_milestones]
        if any(b <= a for a, b in zip(its, its[1:])) or any(i < 0 for i in its):
            raise ConfigError(f"lr milestones must be strictly increasing, got {its}")
        if any(lr <= 0 for _, lr in self.lr_milestones):
            raise ConfigError("milestone learning rates must be positive")
        if self.max_iters < 0:
            raise ConfigError(f"max_iters must be >= 0, got {self.max_iters}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.checkpoint_every < 1:
            raise ConfigError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        if len(self.loss_weights) != len(DISP_WEIGHTS) or min(self.loss_weights) < 0:
            raise ConfigError(f"loss_weights needs {len(DISP_WEIGHTS)} non-negative values (disp0..disp6)")
        if len(self.refine_weights) != len(REFINE_WEIGHTS) or min(self.refine_weights) < 0:
            raise ConfigError(f"refine_weights needs {len(REFINE_WEIGHTS)} non-negative values (res0..res2)")
        if self.refine_loss_weight < 0:
            raise ConfigError("refine_loss_weight must be non-negative")

    @classmethod
    def kitti_finetune(cls, **kw):
        kw.setdefault("base_lr", 2e-5)
        kw.setdefault("lr_milestones", ((20000, 1e-5),))
        kw.setdefault("max_iters", 35000)
        return cls(**kw)


def lr_at(iteration, config):
    """Piecewise-constant learning rate in effect at ``iteration`` (0-based)."""
    if iteration < 0:
        raise ConfigError(f"iteration must be >= 0, got {iteration}")
    lr = config.base_lr
    for it, value in config.lr_milestones:
        if iteration >= it:
            lr = value
    return lr


# ---------------------------------------------------------------------------
# loss


def downsample_gt(gt, mask, factor):
    """Nearest-neighbour subsampling (every ``factor``-th pixel); values unchanged."""
    if factor < 1 or factor & (factor - 1):
        raise ConfigError(f"downsample factor must be a power of two, got {factor}")
    return gt[..., ::factor, ::factor], mask[..., ::factor, ::factor]


def _term(pred, gt, mask, factor, stats):
    g, m = downsample_gt(gt, mask, factor)
    if g.shape != pred.shape:
        raise ConfigError(f"prediction {pred.shape} does not match ground truth at 1/{factor} scale {g.shape}")
    if not (m > 0).any():
        stats["empty_scales"] = stats.get("empty_scales", 0) + 1
        log.warning("no valid ground truth at 1/%d scale; term skipped", factor)
        return None
    return masked_l1(pred, g, m)


def _accumulate(total, term, weight):
    if term is None:
        return total
    term = scale(term, weight)
    return term if total is None else add(total, term)


def multiscale_loss(pyramid, gt, mask, config, stats=None):
    """Weighted masked L1 over every supervised prediction.

    Initial predictions ``disp0..disp6`` are weighted by ``loss_weights``.
    Every refinement pass contributes ``refine_loss_weight`` times the
    weighted errors of its refined disparity at 1, 1/2 and 1/4 resolution,
    where the coarse refined disparity is the resized input disparity plus
    the residual at that scale.  Scales with no valid pixels add nothing and
    bump ``stats["empty_scales"]``.
    """
    stats = {} if stats is None else stats
    gt = np.asarray(gt)
    mask = np.asarray(mask)
    total = None
    for lvl, w in enumerate(config.loss_weights):
        if w:
            total = _accumulate(total, _term(pyramid.disps[f"disp{lvl}"], gt, mask, 2 ** lvl, stats), w)
    if config.refine_loss_weight:
        for step in pyramid.refined:
            for res, w, f in zip((step.r_res0, step.r_res1, step.r_res2), config.refine_weights, REFINE_FACTORS):
                if not w:
                    continue
                if f == 1:
                    refined = step.refined
                else:
                    h, wd = res.shape[2:]
                    refined = add(bilinear_resize(step.disp_in, h, wd), res)
                total = _accumulate(total, _term(refined, gt, mask, f, stats), w * config.refine_loss_weight)
    if total is None:
        raise ConfigError("loss has no supervised terms (all weights zero or every mask empty)")
    return total


# ---------------------------------------------------------------------------
# augmentation


def _resample_rows(arr, new_w, nearest=False):
    """Resample the last axis so output column x reads input column x * w / new_w."""
    w = arr.shape[-1]
    src = np.arange(new_w) * (w / new_w)
    if nearest:
        return arr[..., np.clip(np.floor(src + 1e-9).astype(int), 0, w - 1)]
    x0 = np.clip(np.floor(src).astype(int), 0, w - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    t = (src - x0).astype(arr.dtype)
    return arr[..., x0] * (1 - t) + arr[..., x1] * t


def _shift_rows(arr, dy, fill_edge):
    """Shift content down by ``dy`` rows; vacated rows edge-fill or zero."""
    if dy == 0:
        return arr
    h = arr.shape[-2]
    src = np.arange(h) - dy
    out = arr[..., np.clip(src, 0, h - 1), :]
    if not fill_edge:
        out = out.copy()
        out[..., (src < 0) | (src >= h), :] = 0
    return out


def _chromatic(img, rng, p):
    b = rng.uniform(*p.brightness)
    c = rng.uniform(*p.contrast)
    gains = rng.uniform(*p.color, size=(1, 3, 1, 1)).astype(img.dtype)
    if b == 0 and c == 1 and (gains == 1).all():
        return img
    out = (img - 0.5) * img.dtype.type(c) + 0.5
    out = out * gains + img.dtype.type(b)
    return np.clip(out, 0, 1).astype(img.dtype)


def augment_pair(sample, params, rng):
    """Random rectification-preserving spatial and chromatic transform.

    Order: horizontal scale (disparities scale with it), vertical shift
    applied to both views, crop at the same window, then per-image
    chromatic jitter.  Ground truth and masks use nearest sampling so no
    invalid pixel becomes valid.
    """
    left, right, gt, mask, occ = sample.left, sample.right, sample.gt, sample.mask, sample.occ
    s = rng.uniform(*params.hscale)
    if s != 1.0:
        w = left.shape[-1]
        new_w = int(round(w * s))
        s = new_w / w
        left = _resample_rows(left, new_w)
        right = _resample_rows(right, new_w)
        gt = _resample_rows(gt, new_w, nearest=True) * gt.dtype.type(s)
        mask = _resample_rows(mask, new_w, nearest=True)
        # columns sampled past the last input pixel hold clamped image content
        beyond = np.arange(new_w) * (w / new_w) > w - 1
        if beyond.any():
            mask = mask.copy()
            mask[..., beyond] = 0
        occ = None if occ is None else _resample_rows(occ, new_w, nearest=True)
    dy = int(rng.integers(params.vshift[0], params.vshift[1] + 1))
    if dy:
        left, right = _shift_rows(left, dy, True), _shift_rows(right, dy, True)
        gt, mask = _shift_rows(gt, dy, False), _shift_rows(mask, dy, False)
        occ = None if occ is None else _shift_rows(occ, dy, False)
    if params.crop is not None:
        ch, cw = params.crop
        h, w = left.shape[-2:]
        if ch > h or cw > w:
            raise ConfigError(f"crop {ch}x{cw} is larger than the (scaled) image {h}x{w}")
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        win = (..., slice(y0, y0 + ch), slice(x0, x0 + cw))
        left, right, gt, mask = left[win], right[win], gt[win], mask[win]
        occ = None if occ is None else occ[win]
    left = _chromatic(left, rng, params)
    right = _chromatic(right, rng, params)
    return replace(sample, left=np.ascontiguousarray(left), right=np.ascontiguousarray(right),
                   gt=np.ascontiguousarray(gt), mask=np.ascontiguousarray(mask),
                   occ=None if occ is None else np.ascontiguousarray(occ), orig_size=None)


# ---------------------------------------------------------------------------
# optimisation loop


@dataclass
class StepResult:
    loss: float
    epe: float
    empty_scales: int = 0


def train_step(model, batch, state, config, iteration=0):
    """One forward/backward/Adam update on ``batch = (left, right, gt, mask)``."""
    left, right, gt, mask = batch
    model.zero_grad()
    stats = {}
    try:
        with Tape() as tape:
            pyr = model(left, right)
            loss = multiscale_loss(pyr, gt, mask, config, stats)
        value = float(loss.item())
        if not np.isfinite(value):
            raise NumericalError(f"loss is {value}")
        tape.backward(loss)
    except NumericalError as exc:
        raise NumericalError(f"iteration {iteration}: {exc}") from exc
    state = adam_step(model.parameters(), lr_at(iteration, config), config.beta1, config.beta2,
                      config.eps, state)
    valid = mask > 0
    final = pyr.final.data
    err = float(np.abs(final - gt)[valid].mean()) if valid.any() else float("nan")
    return StepResult(value, err, stats.get("empty_scales", 0)), state


def batch_positions(n, iteration, batch_size, seed):
    """Dataset positions for ``iteration``; each epoch is a seeded permutation."""
    out, perms = [], {}
    for j in range(batch_size):
        c = iteration * batch_size + j
        epoch = c // n
        if epoch not in perms:
            perms[epoch] = np.random.default_rng([seed, epoch]).permutation(n)
        out.append(int(perms[epoch][c % n]))
    return out


_CKPT = re.compile(r"ckpt_(\d+)\.irn$")


def checkpoint_path(out_dir, iteration):
    return os.path.join(out_dir, f"ckpt_{iteration}.irn")


def optimizer_path(ckpt_path):
    return os.path.splitext(ckpt_path)[0] + ".adam"


def save_training_state(out_dir, iteration, model, state):
    path = checkpoint_path(out_dir, iteration)
    save_checkpoint(path, model)
    save_optimizer(optimizer_path(path), state)
    return path


def resume_state(path, model):
    """Load model weights and Adam state; returns ``(state, completed iterations)``."""
    load_checkpoint(path, model)
    adam = optimizer_path(path)
    if not os.path.isfile(adam):
        raise FormatError(f"cannot resume: optimizer state {adam} not found next to {path}")
    state = load_optimizer(adam)
    m = _CKPT.search(path)
    if m and int(m.group(1)) != state.step:
        raise FormatError(f"{adam} records {state.step} steps but {path} names iteration {m.group(1)}")
    return state, state.step


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    epes: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    state: AdamState | None = None


def train_loop(model, dataset, config, out_dir, resume=None, echo=None):
    """Run training up to ``config.max_iters`` completed iterations.

    ``dataset`` is a list of StereoSample or a DatasetIndex (decoded per
    batch).  Appends ``iter lr loss epe`` lines to ``out_dir/train.log``,
    writes ``ckpt_<iter>.irn`` (plus ``.adam`` optimizer state) every
    ``checkpoint_every`` iterations and at the end.
    """
    n = len(dataset)
    if n == 0:
        raise IResNetError("training dataset is empty")
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise FormatError(f"cannot create output directory {out_dir}: {exc}") from exc
    state, start = AdamState({}, {}), 0
    if resume:
        state, start = resume_state(resume, model)
    log_path = os.path.join(out_dir, "train.log")
    result = TrainResult(state=state)
    try:
        logf = open(log_path, "a" if resume else "w")
    except OSError as exc:
        raise FormatError(f"cannot open log {log_path}: {exc}") from exc
    with logf:
        for it in range(start, config.max_iters):
            pos = batch_positions(n, it, config.batch_size, config.seed)
            if isinstance(dataset, DatasetIndex):
                samples = load_batch(dataset, pos)
            else:
                samples = [dataset[p] for p in pos]
            if config.augment is not None:
                rng = np.random.default_rng([config.seed, 1, it])
                samples = [augment_pair(s, config.augment, rng) for s in samples]
            step, state = train_step(model, stack(samples), state, config, it)
            line = f"{it}\t{lr_at(it, config):.6g}\t{step.loss:.9g}\t{step.epe:.9g}"
            logf.write(line + "\n")
            logf.flush()
            if echo:
                echo(line)
            result.losses.append(step.loss)
            result.epes.append(step.epe)
            done = it + 1
            if done % config.checkpoint_every == 0 and done != config.max_iters:
                result.checkpoints.append(save_training_state(out_dir, done, model, state))
        final = max(start, config.max_iters)
        result.checkpoints.append(save_training_state(out_dir, final, model, state))
    result.state = state
    return result
