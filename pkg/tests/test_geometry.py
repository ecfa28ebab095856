from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fusion_stereo.config import INVALID_FILL
from fusion_stereo.errors import DataError
from fusion_stereo.geometry import (
    CameraCalibration,
    LidarPointCloud,
    SparseDisparityMap,
    backproject,
    depth_to_disparity,
    discretize_bins,
    discretize_disparity,
    disparity_to_depth,
    downsample_sparse,
    dump_calibration,
    load_calibration,
    project_lidar,
    reproject_left_to_right,
    round_px,
    subsample_sparse,
)


def test_depth_to_disparity_example(calib: CameraCalibration) -> None:
    assert depth_to_disparity(25.0, calib) == 2.0
    assert disparity_to_depth(2.0, calib) == 25.0


def test_kitti_like_round_trip() -> None:
    c = CameraCalibration(721.0, 0.54, 600.0, 170.0, 1216, 352)
    z = 389.34 / 2
    assert disparity_to_depth(depth_to_disparity(z, c), c) == pytest.approx(z, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(
    f=st.floats(10, 2000),
    b=st.floats(0.05, 2.0),
    z=st.floats(1.0, 500.0),
)
def test_depth_disparity_identity(f: float, b: float, z: float) -> None:
    c = CameraCalibration(f, b, 0.0, 0.0, 10, 10)
    d = depth_to_disparity(z, c)
    assert d * z == pytest.approx(f * b, rel=1e-12)
    assert disparity_to_depth(d, c) == pytest.approx(z, rel=1e-12)


def test_non_positive_depth_or_disparity(calib: CameraCalibration) -> None:
    with pytest.raises(ValueError):
        depth_to_disparity(0.0, calib)
    with pytest.raises(ValueError):
        disparity_to_depth(-1.0, calib)


def test_calibration_invariants() -> None:
    with pytest.raises(ValueError):
        CameraCalibration(0.0, 0.5, 0, 0, 4, 4)
    with pytest.raises(ValueError):
        CameraCalibration(100.0, 0.0, 0, 0, 4, 4)
    with pytest.raises(ValueError):
        CameraCalibration(100.0, 0.5, 0, 0, 0, 4)


def test_cropped_calibration_shifts_principal_point(calib: CameraCalibration) -> None:
    c = calib.cropped(2, 3, 4, 8)
    assert (c.cx, c.cy, c.image_w, c.image_h) == (calib.cx - 3, calib.cy - 2, 8, 4)
    assert c.fb == calib.fb


def test_sparse_map_fills_invalid_pixels() -> None:
    m = SparseDisparityMap(np.full((2, 2), 5.0), np.array([[True, False], [False, True]]))
    assert m.values[0, 1] == INVALID_FILL
    assert m.values[0, 0] == 5.0
    assert m.n_valid == 2
    with pytest.raises(ValueError):
        SparseDisparityMap(np.array([[-1.0]]), np.array([[True]]))


def test_lidar_cloud_requires_positive_z() -> None:
    with pytest.raises(ValueError):
        LidarPointCloud(np.array([[0.0, 0.0, 0.0]]))


def test_project_on_axis_point() -> None:
    c = CameraCalibration(100.0, 0.5, 8.0, 4.0, 17, 9)
    left = project_lidar(LidarPointCloud(np.array([[0.0, 0.0, 25.0]])), c, "left")
    right = project_lidar(LidarPointCloud(np.array([[0.0, 0.0, 25.0]])), c, "right")
    assert left.valid[4, 8] and left.n_valid == 1
    assert left.values[4, 8] == 2.0
    # правый вид смещён ровно на round(d) столбцов
    assert right.valid[4, 6] and right.values[4, 6] == 2.0


def test_project_nearest_point_wins(calib: CameraCalibration) -> None:
    # обе точки на оси камеры, попадают в один пиксель
    cloud = LidarPointCloud(np.array([[0.0, 0.0, 10.0], [0.0, 0.0, 5.0]]))
    m = project_lidar(cloud, calib, "left")
    assert m.n_valid == 1
    assert m.values[m.valid][0] == pytest.approx(depth_to_disparity(5.0, calib))


def test_project_drops_out_of_frame(calib: CameraCalibration) -> None:
    cloud = LidarPointCloud(np.array([[100.0, 0.0, 1.0]]))
    assert project_lidar(cloud, calib).n_valid == 0
    with pytest.raises(ValueError):
        project_lidar(LidarPointCloud(np.zeros((0, 3))), calib)


def test_project_plane_matches_loop_oracle() -> None:
    c = CameraCalibration(50.0, 0.4, 15.5, 7.5, 32, 16)
    rng = np.random.default_rng(0)
    pts = np.stack([rng.uniform(-8, 8, 300), rng.uniform(-3, 3, 300), rng.uniform(4, 12, 300)], axis=1)
    m = project_lidar(LidarPointCloud(pts), c, "left")
    best: dict[tuple[int, int], float] = {}
    for x, y, z in pts:
        u = int(np.floor(c.focal_px * x / z + c.cx + 0.5))
        v = int(np.floor(c.focal_px * y / z + c.cy + 0.5))
        if 0 <= u < c.image_w and 0 <= v < c.image_h:
            best[(v, u)] = min(best.get((v, u), np.inf), z)
    assert m.n_valid == len(best)
    for (v, u), z in best.items():
        assert m.values[v, u] == pytest.approx(c.fb / z)


def test_left_right_columns_differ_by_rounded_disparity() -> None:
    c = CameraCalibration(80.0, 0.5, 20.0, 5.0, 40, 10)
    rng = np.random.default_rng(1)
    for _ in range(20):
        p = np.array([[rng.uniform(-2, 2), rng.uniform(-0.5, 0.5), rng.uniform(3, 20)]])
        left = project_lidar(LidarPointCloud(p), c, "left")
        right = project_lidar(LidarPointCloud(p), c, "right")
        if left.n_valid and right.n_valid:
            (vl, ul), (vr, ur) = np.argwhere(left.valid)[0], np.argwhere(right.valid)[0]
            assert vl == vr
            assert ul - ur == round_px(c.fb / p[0, 2])


def test_right_column_rounds_left_column_and_disparity_separately(calib: CameraCalibration) -> None:
    # u_L = 5.6, d = 2.4: round(u_L) - round(d) = 4, а round(u_L - d) = 3
    z = calib.fb / 2.4
    x = (5.6 - calib.cx) * z / calib.focal_px
    cloud = LidarPointCloud(np.array([[x, 0.0, z]]))
    left = project_lidar(cloud, calib, "left")
    right = project_lidar(cloud, calib, "right")
    assert left.valid[4, 6] and left.n_valid == 1
    assert right.valid[4, 4] and right.n_valid == 1
    assert right.values[4, 4] == pytest.approx(2.4)


def test_backproject_then_project_is_identity(calib: CameraCalibration) -> None:
    rng = np.random.default_rng(2)
    valid = rng.random((8, 16)) < 0.3
    values = np.where(valid, np.floor(rng.uniform(1, 6, (8, 16))), 0.0)
    m = SparseDisparityMap(values, valid)
    back = project_lidar(backproject(m, calib), calib, "left")
    np.testing.assert_array_equal(back.valid, m.valid)
    np.testing.assert_allclose(back.values, m.values, rtol=1e-12)


def test_reproject_empty_map(calib: CameraCalibration) -> None:
    right = reproject_left_to_right(SparseDisparityMap.empty(8, 16), calib)
    assert right.n_valid == 0


def _full_map(n_valid: int, shape: tuple[int, int] = (10, 20)) -> SparseDisparityMap:
    valid = np.zeros(shape[0] * shape[1], dtype=bool)
    valid[:n_valid] = True
    valid = valid.reshape(shape)
    return SparseDisparityMap(np.where(valid, 3.0, 0.0), valid)


def test_subsample_examples() -> None:
    m = _full_map(100)
    full = subsample_sparse(m, 1.0, seed=0)
    np.testing.assert_array_equal(full.valid, m.valid)
    np.testing.assert_array_equal(full.values, m.values)
    half = subsample_sparse(m, 0.5, seed=0)
    assert half.n_valid == 50
    # подмножество исходных валидных пикселей с теми же значениями
    assert not np.any(half.valid & ~m.valid)
    assert np.all(half.values[half.valid] == 3.0)
    assert np.all(half.values[~half.valid] == INVALID_FILL)


def test_subsample_is_deterministic_per_seed() -> None:
    m = _full_map(150)
    a = subsample_sparse(m, 0.3, seed=7)
    b = subsample_sparse(m, 0.3, seed=7)
    c = subsample_sparse(m, 0.3, seed=8)
    np.testing.assert_array_equal(a.valid, b.valid)
    assert not np.array_equal(a.valid, c.valid)


def test_subsample_composition_count() -> None:
    m = _full_map(180)
    twice = subsample_sparse(subsample_sparse(m, 0.5, 1), 0.6, 2)
    direct = subsample_sparse(m, 0.3, 3)
    assert abs(twice.n_valid - direct.n_valid) <= 1


def test_subsample_rejects_bad_density() -> None:
    with pytest.raises(ValueError):
        subsample_sparse(_full_map(10), 0.0, 0)
    with pytest.raises(ValueError):
        subsample_sparse(_full_map(10), 1.5, 0)


def test_discretize_examples() -> None:
    assert discretize_disparity(0.0, 16, 16.0) == 0
    assert discretize_disparity(16.0, 16, 16.0) == 15
    assert discretize_disparity(95.5, 192, 192.0) == 95
    with pytest.raises(ValueError):
        discretize_disparity(-0.5, 16, 16.0)
    with pytest.raises(ValueError):
        discretize_disparity(1.0, 1, 16.0)


@settings(max_examples=100, deadline=None)
@given(a=st.floats(0, 300), b=st.floats(0, 300), d_hat=st.integers(2, 200))
def test_discretize_is_monotone(a: float, b: float, d_hat: int) -> None:
    lo, hi = min(a, b), max(a, b)
    assert discretize_disparity(lo, d_hat, 192.0) <= discretize_disparity(hi, d_hat, 192.0)


def test_discretize_bins_matches_scalar() -> None:
    values = np.array([[0.0, 3.2], [7.99, 100.0]])
    bins = discretize_bins(values, 8, 8.0)
    expected = [[discretize_disparity(v, 8, 8.0) for v in row] for row in values]
    np.testing.assert_array_equal(bins, expected)


def test_downsample_sparse_or_pools_validity() -> None:
    values = np.array([[4.0, 0.0, 0.0, 0.0], [8.0, 0.0, 0.0, 0.0]])
    valid = np.array([[True, False, False, False], [True, False, False, False]])
    small = downsample_sparse(SparseDisparityMap(values, valid), 2)
    assert small.valid.tolist() == [[True, False]]
    # среднее валидных (6) делится на шаг
    assert small.values[0, 0] == 3.0


def test_calibration_file_round_trip(tmp_path: Path, calib: CameraCalibration) -> None:
    p = tmp_path / "calib.txt"
    p.write_text("# stereo rig\n" + dump_calibration(calib), encoding="utf-8")
    assert load_calibration(p) == calib


def test_calibration_file_errors(tmp_path: Path) -> None:
    p = tmp_path / "calib.txt"
    p.write_text("focal_px 100\nbaseline_m 0.5\n", encoding="utf-8")
    with pytest.raises(DataError, match="missing"):
        load_calibration(p)
    p.write_text("focal_px abc\n", encoding="utf-8")
    with pytest.raises(DataError, match="calib.txt:1"):
        load_calibration(p)
    p.write_text("fx 100\n", encoding="utf-8")
    with pytest.raises(DataError, match="unknown calibration key"):
        load_calibration(p)
