import os
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import example, given, settings, strategies as st

from iresnet.data import StereoSample, stack
from iresnet.errors import ConfigError, IResNetError, NumericalError
from iresnet.model import DisparityPyramid, ModelConfig, RefineStep, build_model
from iresnet.stereo_ops import warp1d
from iresnet.synth import Layer, make_texture, render_layers
from iresnet.tensor import Tensor
from iresnet.training import (AugmentParams, TrainConfig, augment_pair, batch_positions, downsample_gt,
                              lr_at, multiscale_loss, train_loop, train_step)

TINY = ModelConfig(channel_mult=Fraction(1, 8))


# ---------------------------------------------------------------------------
# schedule


def test_lr_schedule_milestones():
    cfg = TrainConfig()
    assert [lr_at(i, cfg) for i in (0, 19999, 20000, 35000, 50000, 64999)] == \
        [1e-4, 1e-4, 5e-5, 2.5e-5, 1.25e-5, 1.25e-5]


def test_lr_finetune_profile():
    cfg = TrainConfig.kitti_finetune()
    assert lr_at(0, cfg) == 2e-5 and lr_at(20000, cfg) == 1e-5


def test_lr_single_milestone_before():
    assert lr_at(5, TrainConfig(base_lr=3e-4, lr_milestones=((10, 1e-4),))) == 3e-4


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 200_000), st.integers(0, 200_000))
def test_lr_non_increasing(a, b):
    for cfg in (TrainConfig(), TrainConfig.kitti_finetune()):
        lo, hi = min(a, b), max(a, b)
        assert lr_at(hi, cfg) <= lr_at(lo, cfg)


@pytest.mark.parametrize("kw", [dict(lr_milestones=((10, 1e-4), (10, 5e-5))), dict(lr_milestones=((10, 0.0),)),
                                dict(base_lr=0), dict(batch_size=0), dict(loss_weights=(1.0,))])
def test_train_config_rejects(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_lr_rejects_negative_iteration():
    with pytest.raises(ConfigError):
        lr_at(-1, TrainConfig())


# ---------------------------------------------------------------------------
# ground-truth subsampling


def test_downsample_identity_and_constant():
    gt = np.random.default_rng(0).random((1, 1, 8, 8))
    mask = np.ones_like(gt)
    g, m = downsample_gt(gt, mask, 1)
    np.testing.assert_array_equal(g, gt)
    g, _ = downsample_gt(np.full((1, 1, 16, 16), 3.5), mask, 4)
    assert g.shape == (1, 1, 4, 4) and (g == 3.5).all()


@pytest.mark.parametrize("factor", [2, 4, 8])
def test_downsample_checkerboard_counts(factor):
    # checkerboard of factor x factor cells: subsampling hits one pixel per cell
    h = w = 64
    yy, xx = np.mgrid[0:h, 0:w]
    mask = (((yy // factor) + (xx // factor)) % 2 == 0).astype(float)[None, None]
    _, m = downsample_gt(np.zeros_like(mask), mask, factor)
    count = sum(mask[0, 0, y, x] for y in range(0, h, factor) for x in range(0, w, factor))
    assert m.sum() == count == (h // factor) * (w // factor) / 2
    assert m.mean() == mask.mean()


def test_downsample_rejects_non_power_of_two():
    with pytest.raises(ConfigError):
        downsample_gt(np.zeros((1, 1, 6, 6)), np.zeros((1, 1, 6, 6)), 3)


# ---------------------------------------------------------------------------
# loss


def _pyramid(gt, offset=0.0, refined=None):
    disps = {f"disp{k}": Tensor(gt[..., ::2 ** k, ::2 ** k] + offset) for k in range(7)}
    return DisparityPyramid(disps, refined or [])


def test_loss_zero_for_perfect_predictions():
    gt = np.random.default_rng(0).uniform(0, 20, (1, 1, 64, 64))
    mask = np.ones_like(gt)
    step = RefineStep(Tensor(gt), Tensor(gt[..., ::4, ::4] * 0), Tensor(gt[..., ::2, ::2] * 0),
                      Tensor(np.zeros_like(gt)), Tensor(gt))
    # only the full-resolution refined output is supervised here
    cfg = TrainConfig(refine_loss_weight=0.0)
    assert multiscale_loss(_pyramid(gt), gt, mask, cfg).item() == 0.0
    assert multiscale_loss(_pyramid(gt, refined=[replace(step)]), gt, mask,
                           TrainConfig(refine_weights=(1.0, 0.0, 0.0))).item() == 0.0


def test_loss_uniform_error_full_res_only():
    gt = np.zeros((1, 1, 64, 64))
    cfg = TrainConfig(loss_weights=(1, 0, 0, 0, 0, 0, 0), refine_loss_weight=0)
    assert multiscale_loss(_pyramid(gt, 1.0), gt, np.ones_like(gt), cfg).item() == 1.0


def test_loss_two_scale_hand_sum():
    rng = np.random.default_rng(1)
    gt = rng.uniform(0, 10, (1, 1, 64, 64))
    mask = (rng.random(gt.shape) < 0.5).astype(float)
    pyr = _pyramid(gt)
    pyr.disps["disp0"] = Tensor(gt + 2.0)
    pyr.disps["disp1"] = Tensor(gt[..., ::2, ::2] - 3.0)
    cfg = TrainConfig(loss_weights=(1, 0.5, 0, 0, 0, 0, 0), refine_loss_weight=0)
    assert multiscale_loss(pyr, gt, mask, cfg).item() == pytest.approx(1 * 2.0 + 0.5 * 3.0)


def test_loss_refined_terms_hand_sum():
    gt = np.full((1, 1, 64, 64), 5.0)
    disp_in = np.full_like(gt, 4.0)
    res2 = np.full((1, 1, 16, 16), 0.5)   # refined 4.5 -> error 0.5
    res1 = np.full((1, 1, 32, 32), 2.0)   # refined 6.0 -> error 1.0
    res0 = np.full_like(gt, 1.0)          # refined 5.0 -> error 0
    step = RefineStep(Tensor(disp_in), Tensor(res2), Tensor(res1), Tensor(res0), Tensor(disp_in + res0))
    pyr = _pyramid(gt, refined=[step, step])
    cfg = TrainConfig(refine_loss_weight=2.0)
    want = 2.0 * 2 * (1.0 * 0 + 0.5 * 1.0 + 0.25 * 0.5)
    assert multiscale_loss(pyr, gt, np.ones_like(gt), cfg).item() == pytest.approx(want)


def test_loss_empty_scale_counts_warning():
    gt = np.zeros((1, 1, 64, 64))
    mask = np.zeros_like(gt)
    mask[0, 0, 1, 1] = 1  # invisible to every subsampled scale
    stats = {}
    cfg = TrainConfig(refine_loss_weight=0)
    loss = multiscale_loss(_pyramid(gt, 1.0), gt, mask, cfg, stats)
    assert loss.item() == 1.0 and stats["empty_scales"] == 6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0, 10, (1, 1, 64, 64))
    loss = multiscale_loss(_pyramid(gt, rng.normal()), gt, np.ones_like(gt), TrainConfig())
    assert loss.item() >= 0


# ---------------------------------------------------------------------------
# augmentation


def _shift_sample(d=3, h=64, w=128, seed=0):
    rng = np.random.default_rng(seed)
    layer = Layer(d, make_texture(rng, h, w + 16), np.ones((h, w + 16), dtype=bool))
    left, right, disp, occ = render_layers([layer], h, w)
    f = lambda a: (a[None] / 255.0).astype(np.float64)
    return StereoSample(f(left), f(right), disp[None, None].astype(np.float64),
                        np.ones((1, 1, h, w)), "shift", occ[None, None].astype(np.float64))


def test_identity_augmentation_is_noop():
    s = _shift_sample()
    out = augment_pair(s, AugmentParams(), np.random.default_rng(0))
    for name in ("left", "right", "gt", "mask", "occ"):
        np.testing.assert_array_equal(getattr(out, name), getattr(s, name))


def test_horizontal_scale_two_doubles_disparity():
    s = _shift_sample()
    out = augment_pair(s, AugmentParams(hscale=(2.0, 2.0)), np.random.default_rng(0))
    assert out.gt.shape[-1] == 2 * s.gt.shape[-1]
    np.testing.assert_array_equal(out.gt, 6.0)


def test_crop_window_matches_direct_indexing():
    s = _shift_sample()
    p = AugmentParams(crop=(32, 64))
    out = augment_pair(s, p, np.random.default_rng(5))
    rng = np.random.default_rng(5)
    rng.uniform(1.0, 1.0)
    rng.integers(0, 1)
    y0, x0 = int(rng.integers(0, 33)), int(rng.integers(0, 65))
    np.testing.assert_array_equal(out.left, s.left[..., y0:y0 + 32, x0:x0 + 64])
    np.testing.assert_array_equal(out.gt, s.gt[..., y0:y0 + 32, x0:x0 + 64])


def test_crop_larger_than_image_is_fault():
    with pytest.raises(ConfigError):
        augment_pair(_shift_sample(), AugmentParams(crop=(128, 128)), np.random.default_rng(0))


def test_vertical_shift_keeps_rows_aligned_and_invalidates_vacated_rows():
    s = _shift_sample()
    out = augment_pair(s, AugmentParams(vshift=(2, 2)), np.random.default_rng(0))
    np.testing.assert_array_equal(out.left[..., 2:, :], s.left[..., :-2, :])
    np.testing.assert_array_equal(out.right[..., 2:, :], s.right[..., :-2, :])
    assert out.mask[..., :2, :].sum() == 0


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 8), st.integers(-3, 3), st.integers(0, 2 ** 31))
@example(d=1, dy=0, seed=256)  # crop reaching the extrapolated right edge
def test_augmentation_preserves_photometric_consistency(d, dy, seed):
    s = _shift_sample(d=d, seed=seed % 1000)
    p = AugmentParams(crop=(48, 192), hscale=(2.0, 2.0), vshift=(dy, dy))
    out = augment_pair(s, p, np.random.default_rng(seed))
    warped = warp1d(Tensor(out.right), Tensor(out.gt)).data
    ok = (out.mask[0, 0] > 0) & (out.occ[0, 0] == 0)
    # the crop may cut off the left border where the right view has no partner
    xs = np.arange(out.gt.shape[-1])[None, :] - out.gt[0, 0] >= 0
    ok &= xs
    assert np.abs(warped - out.left)[0][:, ok].max(initial=0) <= 1e-3


@settings(max_examples=20, deadline=None)
@given(st.floats(0.5, 2.0), st.integers(0, 2 ** 31))
def test_augmentation_never_creates_valid_pixels(s_lo, seed):
    s = _shift_sample()
    mask = s.mask.copy()
    mask[..., ::3, ::2] = 0
    s = replace(s, mask=mask)
    p = AugmentParams(hscale=(s_lo, s_lo), vshift=(-2, 2))
    out = augment_pair(s, p, np.random.default_rng(seed))
    assert set(np.unique(out.mask)) <= {0.0, 1.0}
    assert out.mask.mean() <= mask.mean() + 0.05


def test_chromatic_jitter_stays_in_range_and_differs_per_image():
    s = _shift_sample()
    p = AugmentParams(brightness=(-0.2, 0.2), contrast=(0.5, 1.5), color=(0.8, 1.2))
    out = augment_pair(s, p, np.random.default_rng(3))
    assert out.left.min() >= 0 and out.left.max() <= 1
    assert not np.allclose(out.left - s.left, out.right - s.right)
    np.testing.assert_array_equal(out.gt, s.gt)


# ---------------------------------------------------------------------------
# training


def _batch(n=2, seed=0, w=64):
    samples = [_shift_sample(d=2 + i, h=64, w=w, seed=seed + i) for i in range(n)]
    samples = [replace(s, left=s.left.astype(np.float32), right=s.right.astype(np.float32),
                       gt=s.gt.astype(np.float32), mask=s.mask.astype(np.float32)) for s in samples]
    return samples


def test_train_step_is_deterministic():
    batch = stack(_batch())
    cfg = TrainConfig()
    losses = []
    for _ in range(2):
        model = build_model(TINY)
        state = None
        r1, state = train_step(model, batch, state, cfg, 0)
        r2, state = train_step(model, batch, state, cfg, 1)
        losses.append((r1.loss, r2.loss))
    assert losses[0] == losses[1]


def test_loss_decreases_on_repeated_sample():
    batch = stack(_batch(1))
    model = build_model(TINY)
    cfg = TrainConfig(batch_size=1, base_lr=1e-3)
    state, losses = None, []
    for it in range(50):
        r, state = train_step(model, batch, state, cfg, it)
        losses.append(r.loss)
    assert np.mean(losses[-10:]) < 0.5 * losses[0]
    assert losses[-1] < losses[0]


@pytest.mark.parametrize("iters", [0, 2])
def test_refine_iteration_counts_train(iters):
    model = build_model(ModelConfig(channel_mult=Fraction(1, 8), refine_iters=iters))
    r, _ = train_step(model, stack(_batch()), None, TrainConfig(), 0)
    assert np.isfinite(r.loss)


def test_nan_loss_reports_iteration():
    batch = list(stack(_batch()))
    batch[0] = batch[0].copy()
    batch[0][0, 0, 0, 0] = np.nan
    with pytest.raises(NumericalError, match="iteration 7"):
        train_step(build_model(TINY), tuple(batch), None, TrainConfig(), 7)


def test_batch_positions_cover_each_epoch():
    seen = [p for it in range(8) for p in batch_positions(16, it, 2, 3)]
    assert sorted(seen) == list(range(16))
    assert batch_positions(16, 3, 2, 3) == batch_positions(16, 3, 2, 3)


def test_smoke_run_outputs(tmp_path):
    model = build_model(TINY)
    res = train_loop(model, _batch(), TrainConfig(max_iters=10), tmp_path)
    lines = (tmp_path / "train.log").read_text().splitlines()
    assert len(lines) == 10 and lines[0].split("\t")[0] == "0"
    assert sorted(f for f in os.listdir(tmp_path) if f.endswith(".irn")) == ["ckpt_10.irn"]
    assert len(res.losses) == 10


def test_resume_reproduces_losses(tmp_path):
    data = _batch(3)
    cfg = TrainConfig(max_iters=6, checkpoint_every=3)
    train_loop(build_model(TINY), data, cfg, tmp_path / "a")
    full = (tmp_path / "a" / "train.log").read_text().splitlines()
    resumed = build_model(ModelConfig(channel_mult=Fraction(1, 8), seed=42))
    train_loop(resumed, data, cfg, tmp_path / "b", resume=str(tmp_path / "a" / "ckpt_3.irn"))
    tail = (tmp_path / "b" / "train.log").read_text().splitlines()
    assert tail == full[3:]


def test_resume_needs_optimizer_state(tmp_path):
    model = build_model(TINY)
    train_loop(model, _batch(), TrainConfig(max_iters=1), tmp_path)
    os.remove(tmp_path / "ckpt_1.adam")
    with pytest.raises(IResNetError, match="optimizer state"):
        train_loop(model, _batch(), TrainConfig(max_iters=2), tmp_path, resume=str(tmp_path / "ckpt_1.irn"))


def test_empty_dataset_is_fault(tmp_path):
    with pytest.raises(IResNetError, match="empty"):
        train_loop(build_model(TINY), [], TrainConfig(max_iters=1), tmp_path)


def test_training_with_augmentation_runs(tmp_path):
    cfg = TrainConfig(max_iters=2, augment=AugmentParams.default(crop=(64, 64)))
    res = train_loop(build_model(TINY), _batch(w=128), cfg, tmp_path)
    assert len(res.losses) == 2
