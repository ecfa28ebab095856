from __future__ import annotations

import numpy as np
import pytest

from fusion_stereo.config import PRECISION_ENV, NetworkConfig, SceneConfig
from fusion_stereo.data import gen_scene
from fusion_stereo.geometry import CameraCalibration, SparseDisparityMap
from fusion_stereo.network import StereoSample
from fusion_stereo.numerics import set_precision


@pytest.fixture(autouse=True)
def _isolated_env(tmp_path_factory: pytest.TempPathFactory, monkeypatch: pytest.MonkeyPatch):
    """
    Каждый тест — в float64, без пользовательского rc-файла и без
    переменной окружения точности.
    """
    rc = tmp_path_factory.mktemp("home") / ".fusion_stereo.json"
    monkeypatch.setattr("fusion_stereo.config.RC_PATH", rc, raising=True)
    monkeypatch.delenv(PRECISION_ENV, raising=False)
    set_precision("f64")
    yield
    set_precision("f64")


@pytest.fixture
def tiny_net_cfg() -> NetworkConfig:
    """
    Сеть на минимуме: D = 8 / 2 = 4 уровня, два блока признаков,
    три слоя регуляризатора, обусловлены слои 1 и 2.
    """
    return NetworkConfig(
        d_max=8,
        downsample=2,
        feature_channels=4,
        feature_blocks=2,
        reg_channels=(4, 4, 1),
        conditioned_layer_ids=(1, 2),
        encoder_channels=3,
        concat_channels=3,
        mlp_hidden=4,
    )


@pytest.fixture
def tiny_scene_cfg() -> SceneConfig:
    return SceneConfig(width=16, height=8, n_planes=2, disparity_range=(1.0, 6.0),
                       lidar_coverage=0.3, seed=3)


@pytest.fixture
def tiny_sample(tiny_scene_cfg: SceneConfig) -> StereoSample:
    return gen_scene(tiny_scene_cfg, d_max=8)


@pytest.fixture
def calib() -> CameraCalibration:
    # f·B = 50, центр кадра 16×8
    return CameraCalibration(focal_px=100.0, baseline_m=0.5, cx=7.5, cy=3.5, image_w=16, image_h=8)


def random_sparse(rng: np.random.Generator, h: int, w: int, d_max: float, coverage: float = 0.5) -> SparseDisparityMap:
    valid = rng.random((h, w)) < coverage
    return SparseDisparityMap(rng.uniform(0.0, d_max, size=(h, w)) * valid, valid)

