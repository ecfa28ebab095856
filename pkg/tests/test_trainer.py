from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from fusion_stereo.checkpoint import load_checkpoint
from fusion_stereo.config import NetworkConfig, RunConfig, TrainConfig
from fusion_stereo.errors import ConfigError, DataError, DivergenceError
from fusion_stereo.network import StereoNet, StereoSample
from fusion_stereo.trainer import random_crop, rmsprop_step, supervision_mask, train, train_step


def _run_cfg(net_cfg: NetworkConfig, variant: str = "input_fusion_only", **train_kw) -> RunConfig:
    return RunConfig(network=replace(net_cfg, variant=variant), train=TrainConfig(**train_kw))


def test_rmsprop_two_steps() -> None:
    p = {"w": np.array([1.0])}
    state: dict[str, np.ndarray] = {}
    rmsprop_step(p, {"w": np.array([2.0])}, state, lr=0.1)
    # s = 0.01·4 = 0.04, шаг = 0.1·2 / 0.2
    assert state["w"][0] == pytest.approx(0.04)
    assert p["w"][0] == pytest.approx(0.0, abs=1e-6)
    rmsprop_step(p, {"w": np.array([2.0])}, state, lr=0.1)
    assert state["w"][0] == pytest.approx(0.0796)
    assert p["w"][0] == pytest.approx(-0.2 / np.sqrt(0.0796), rel=1e-6)


def test_rmsprop_zero_gradient_keeps_params() -> None:
    p = {"w": np.array([3.0, -1.0])}
    rmsprop_step(p, {"w": np.zeros(2)}, {}, lr=1.0)
    np.testing.assert_array_equal(p["w"], [3.0, -1.0])


def test_rmsprop_rejects_non_positive_lr() -> None:
    with pytest.raises(ValueError):
        rmsprop_step({}, {}, {}, lr=0.0)


def test_supervision_mask_drops_out_of_range(tiny_sample: StereoSample) -> None:
    s = replace(tiny_sample, gt_disparity=np.full((8, 16), 9.0))
    assert not supervision_mask(s, 8).any()


def test_random_crop(tiny_sample: StereoSample, tiny_net_cfg: NetworkConfig) -> None:
    rng = np.random.default_rng(0)
    crop = random_crop(tiny_sample, 4, 8, rng, tiny_net_cfg)
    assert (crop.height, crop.width) == (4, 8)
    assert random_crop(tiny_sample, 0, 0, rng, tiny_net_cfg) is tiny_sample
    with pytest.raises(ConfigError, match="exceeds"):
        random_crop(tiny_sample, 10, 8, rng, tiny_net_cfg)
    with pytest.raises(ConfigError, match="multiple"):
        random_crop(tiny_sample, 3, 8, rng, tiny_net_cfg)
    unlabeled = replace(tiny_sample, gt_valid=np.zeros((8, 16), dtype=bool))
    with pytest.raises(DataError, match="no supervised pixels"):
        random_crop(unlabeled, 4, 8, rng, tiny_net_cfg)


def test_zero_iterations_saves_initial_weights(tmp_path: Path, tiny_net_cfg: NetworkConfig,
                                               tiny_sample: StereoSample) -> None:
    cfg = _run_cfg(tiny_net_cfg, "if+hier_ccvnorm")
    result = train(cfg, [tiny_sample], tmp_path, n_iters=0, seed=4)
    ckpt = load_checkpoint(result.checkpoint)
    init = StereoNet(cfg.network).init_params(4).state()
    assert set(ckpt.tensors) == set(init)
    for name, arr in init.items():
        np.testing.assert_array_equal(ckpt.tensors[name], arr)
    assert result.loss_log.read_text(encoding="utf-8") == ""


def test_training_is_deterministic(tmp_path: Path, tiny_net_cfg: NetworkConfig,
                                   tiny_sample: StereoSample) -> None:
    cfg = _run_cfg(tiny_net_cfg, crop_h=4, crop_w=8)
    a = train(cfg, [tiny_sample], tmp_path / "a", n_iters=3, seed=1)
    b = train(cfg, [tiny_sample], tmp_path / "b", n_iters=3, seed=1)
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
    assert a.losses == b.losses


def test_loss_log_and_periodic_checkpoints(tmp_path: Path, tiny_net_cfg: NetworkConfig,
                                           tiny_sample: StereoSample) -> None:
    cfg = _run_cfg(tiny_net_cfg, checkpoint_every=2)
    result = train(cfg, [tiny_sample], tmp_path, n_iters=4, seed=0)
    lines = result.loss_log.read_text(encoding="utf-8").splitlines()
    assert [ln.split(",")[0] for ln in lines] == ["1", "2", "3", "4"]
    assert [float(ln.split(",")[1]) for ln in lines] == result.losses
    assert (tmp_path / "ckpt_000002.ckpt").is_file()
    assert (tmp_path / "ckpt_000004.ckpt").is_file()
    assert not (tmp_path / "ckpt_000003.ckpt").exists()


def test_train_updates_weights(tiny_net_cfg: NetworkConfig, tiny_sample: StereoSample) -> None:
    cfg = _run_cfg(tiny_net_cfg, "ccvnorm_cat")
    result = train(cfg, [tiny_sample], None, n_iters=2, seed=0)
    init = StereoNet(cfg.network).init_params(0)
    assert result.checkpoint is None
    assert not np.array_equal(result.net.params["feat.block1.conv.weight"], init.params["feat.block1.conv.weight"])


def test_empty_dataset(tiny_net_cfg: NetworkConfig) -> None:
    with pytest.raises(DataError, match="empty"):
        train(_run_cfg(tiny_net_cfg), [], None, n_iters=1)


def test_nan_input_is_divergence(tiny_net_cfg: NetworkConfig, tiny_sample: StereoSample) -> None:
    net = StereoNet(replace(tiny_net_cfg, variant="none")).init_params(0)
    left = tiny_sample.left_rgb.copy()
    left[0, 0, 0] = np.nan
    with pytest.raises(DivergenceError, match="iter 5"):
        train_step(net, replace(tiny_sample, left_rgb=left), {}, TrainConfig(), it=5)
