from fractions import Fraction

import pytest

from iresnet.config import load_run_config, parse_override, write_run_config
from iresnet.errors import ConfigError


def test_defaults_without_file():
    run = load_run_config()
    assert run.model.channel_mult == 1 and run.train.base_lr == 1e-4 and run.train.augment is None


def test_file_and_overrides(tmp_path):
    (tmp_path / "c.ini").write_text(
        "[model]\nchannel_mult = 1/8\nrefine_iters = 2\n"
        "[train]\nmax_iters = 50\nlr_milestones = 20:5e-5, 40:2.5e-5\n"
        "[augment]\ncrop = 64, 128\nhscale = 0.9, 1.1\n")
    run = load_run_config(tmp_path / "c.ini", ["train.max_iters=7", "model.variant=no_re"])
    assert run.model.channel_mult == Fraction(1, 8) and run.model.refine_iters == 2
    assert run.model.variant == "no_re" and run.train.max_iters == 7
    assert run.train.lr_milestones == ((20, 5e-5), (40, 2.5e-5))
    assert run.train.augment.crop == (64, 128) and run.train.augment.hscale == (0.9, 1.1)


def test_round_trip(tmp_path):
    run = load_run_config(None, ["model.channel_mult=1/8", "augment.enabled=true", "augment.crop=64,64",
                                 "augment.vshift=-2,2", "train.refine_loss_weight=0.5"])
    write_run_config(tmp_path / "out.ini", run)
    assert load_run_config(tmp_path / "out.ini") == run


@pytest.mark.parametrize("override", ["model.width=3", "optim.lr=1", "train.max_iters=abc",
                                      "model.variant=huge", "train.loss_weights=1,2",
                                      "train.lr_milestones=10:1e-4,5:1e-5", "augment.enabled=maybe"])
def test_rejects_bad_values(override):
    with pytest.raises(ConfigError):
        load_run_config(None, [override])


def test_unknown_key_named(tmp_path):
    (tmp_path / "c.ini").write_text("[train]\nlearning_rate = 1\n")
    with pytest.raises(ConfigError, match="train.learning_rate"):
        load_run_config(tmp_path / "c.ini")


def test_override_syntax():
    assert parse_override("model.seed=3") == ("model", "seed", "3")
    with pytest.raises(ConfigError):
        parse_override("seed=3")


def test_inline_comments_are_ignored(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[model]\nvariant = no_re   ; ablation\nchannel_mult = 1/8  # desk scale\n")
    cfg = load_run_config(path)
    assert cfg.model.variant == "no_re" and cfg.model.channel_mult == Fraction(1, 8)
