"""Run configuration files."""

import pytest

from depthstack.config import ConfigError, RunConfig, load_config, parse_config
from depthstack.model import desk_spec

SAMPLE = """
[spec]
input_width = 64
input_height = 48
lr_mult.coarse1 = 0.01   # raised for random init

[train]
lr = 10
coarse_samples = 640
seed = 4

[augment]
preset = kitti
"""


class TestParse:
    def test_defaults(self):
        cfg = RunConfig()
        assert cfg.spec() == desk_spec()
        tc = cfg.train_config()
        assert (tc.batch_size, tc.momentum, tc.lam) == (32, 0.9, 0.5)
        assert tc.augment is not None and tc.augment.rotate

    def test_values(self):
        cfg = parse_config(SAMPLE)
        spec = cfg.spec()
        assert (spec.input_width, spec.input_height) == (64, 48)
        assert spec.learned_layers("coarse")[0][1].lr_mult == 0.01
        assert spec.learned_layers("coarse")[1][1].lr_mult == 0.001
        tc = cfg.train_config((0.1, 0.2, 0.3))
        assert tc.lr == 10.0 and tc.coarse_samples == 640 and tc.seed == 4
        assert tc.rgb_mean == (0.1, 0.2, 0.3)
        assert not tc.augment.rotate and tc.augment.scale == (1.0, 1.2)

    def test_augment_disabled(self):
        assert parse_config("[augment]\nenabled = false\n").train_config().augment is None

    def test_overrides_win(self):
        cfg = parse_config(SAMPLE)
        cfg.override("train", "lr", 0.5)
        cfg.override("train", "seed", None)
        tc = cfg.train_config()
        assert tc.lr == 0.5 and tc.seed == 4

    @pytest.mark.parametrize("text", ["[model]\nx = 1\n", "[spec]\nwidth = 3\n", "[train]\nepochs = 3\n",
                                      "[augment]\nblur = 1\n", "[spec]\ninput_width = wide\n",
                                      "[augment]\nenabled = maybe\n", "[spec\n"])
    def test_rejected(self, text):
        with pytest.raises(ConfigError):
            parse_config(text).train_config()

    def test_bad_values_are_config_errors(self):
        with pytest.raises(ConfigError):
            parse_config("[train]\nbatch_size = 0\n").train_config()
        with pytest.raises(ConfigError):
            parse_config("[train]\nlr = fast\n").train_config()
        with pytest.raises(ConfigError, match="unknown layers"):
            parse_config("[spec]\nlr_mult.coarse9 = 1\n").spec()
        with pytest.raises(ConfigError):
            parse_config("[augment]\nscale_min = 2\nscale_max = 1\n").augment_params()

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="nope.cfg"):
            load_config(tmp_path / "nope.cfg")
        assert load_config(None) == RunConfig()


class TestResolved:
    def test_digest_tracks_effective_values(self):
        a, b = parse_config(SAMPLE), parse_config(SAMPLE)
        assert a.digest() == b.digest()
        b.override("train", "lr", 9)
        assert a.digest() != b.digest()

    def test_equivalent_spellings_share_a_digest(self):
        a = parse_config("[train]\nlr = 1\n")
        b = parse_config("[train]\nlr = 1.0\n\n[augment]\nenabled = yes\n")
        assert a.digest() == b.digest()

    def test_resolved_text_reparses(self):
        cfg = parse_config(SAMPLE)
        again = parse_config(cfg.resolved_text())
        assert again.resolved_text() == cfg.resolved_text()
        assert again.spec() == cfg.spec()
