"""
Обучающие эксперименты настольного масштаба. Долгие: запускаются через
`pytest -m slow`. Каждый прогоняется на трёх сидах; направленные
утверждения проверяются по среднему или по большинству сидов.
"""
from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from fusion_stereo.config import NetworkConfig, RunConfig, SceneConfig, TrainConfig
from fusion_stereo.data import gen_scene, synthetic_samples
from fusion_stereo.evaluation import density_sweep, evaluate, sensitivity_probe
from fusion_stereo.report import TableBuilder
from fusion_stereo.trainer import train

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
NET = NetworkConfig(d_max=16, downsample=2, feature_channels=8, feature_blocks=2,
                    reg_channels=(8, 8, 8, 1), conditioned_layer_ids=(1, 3))
SCENE = SceneConfig(width=32, height=16, n_planes=3, disparity_range=(1.0, 12.0), lidar_coverage=0.3)
OVERFIT_SCENE = replace(SCENE, width=64, height=32)
OVERFIT_ITERS = 2000
OVERFIT_MAE_PX = 0.5
# относительный запас, с которым слияние обязано обгонять чистое стерео
FUSION_MARGIN = 1.1


def _cfg(variant: str, iters: int = 200, **train_kw) -> RunConfig:
    return RunConfig(network=replace(NET, variant=variant), scene=SCENE,
                     train=TrainConfig(iters=iters, lr=1e-3, **train_kw))


@pytest.mark.parametrize(
    "variant",
    ["none", "input_fusion_only", "feature_concat", "naive_cbn", "ccvnorm_cat", "ccvnorm_cont",
     "hier_ccvnorm", "if+hier_ccvnorm"],
)
def test_every_variant_overfits_one_scene(variant: str) -> None:
    sample = gen_scene(OVERFIT_SCENE, NET.d_max)
    maes = []
    for seed in SEEDS:
        result = train(_cfg(variant, iters=OVERFIT_ITERS), [sample], seed=seed)
        assert result.losses[-1] < result.losses[0]
        maes.append(evaluate(result.net, [sample]).mae_px)
    assert sum(m < OVERFIT_MAE_PX for m in maes) >= 2, maes


def test_fusion_beats_plain_stereo_on_held_out_scenes() -> None:
    train_set = synthetic_samples(SCENE, 4, d_max=NET.d_max)
    eval_set = synthetic_samples(SCENE, 3, seed_offset=1000, d_max=NET.d_max)
    mae = {}
    for variant in ("none", "input_fusion_only", "hier_ccvnorm"):
        mae[variant] = np.mean([
            evaluate(train(_cfg(variant, iters=600), train_set, seed=seed).net, eval_set).mae_px
            for seed in SEEDS
        ])
    assert mae["none"] > FUSION_MARGIN * mae["input_fusion_only"], mae
    assert mae["none"] > FUSION_MARGIN * mae["hier_ccvnorm"], mae


def test_hier_model_reacts_locally_to_lidar_edit() -> None:
    train_set = synthetic_samples(replace(SCENE, lidar_coverage=0.5), 2, d_max=NET.d_max)
    probe_sample = gen_scene(replace(SCENE, seed=1000, lidar_coverage=0.5), NET.d_max)
    wins = 0
    for seed in SEEDS:
        net = train(_cfg("hier_ccvnorm"), train_set, seed=seed).net
        res = sensitivity_probe(net, probe_sample, (4, 8, 12, 24), 14.0)
        wins += res.mean_abs_change_inside > res.mean_abs_change_outside
    assert wins >= 2


def test_conditioned_model_degrades_less_when_lidar_thins(tmp_path: Path) -> None:
    train_set = synthetic_samples(SCENE, 4, d_max=NET.d_max)
    eval_set = synthetic_samples(SCENE, 2, seed_offset=1000, d_max=NET.d_max)
    densities = (0.1, 0.5, 1.0)
    table = TableBuilder(["label", "seed", "density", "mae_mean", "mae_std"])
    trend: dict[str, list[float]] = {}
    for variant in ("input_fusion_only", "if+hier_ccvnorm"):
        for seed in SEEDS:
            net = train(_cfg(variant, iters=600), train_set, seed=seed).net
            sweep = density_sweep(net, eval_set, densities, SEEDS)
            for d in densities:
                table.add_row([variant, seed, d, *sweep.summary[d]["mae_px"]])
            trend.setdefault(variant, []).append(sweep.relative_degradation)
    p = table.write(tmp_path / "density.csv")
    assert len(p.read_text(encoding="utf-8").splitlines()) == 1 + 2 * len(SEEDS) * len(densities)
    assert all(np.isfinite(v) for vs in trend.values() for v in vs)
    assert np.mean(trend["if+hier_ccvnorm"]) < np.mean(trend["input_fusion_only"]), trend
