"""
Камера, триангуляция глубина↔диспаратность, проекция LiDAR и прореживание.

Модель: только ректифицированный pinhole: без дисторсии и без поворота
между камерами, правая камера сдвинута на baseline_m вдоль оси x.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Literal
import math

import numpy as np

from .config import INVALID_FILL
from .errors import DataError
from .reader import iter_records


@dataclass(slots=True, frozen=True)
class CameraCalibration:
    focal_px: float
    baseline_m: float
    cx: float
    cy: float
    image_w: int
    image_h: int

    def __post_init__(self) -> None:
        if not self.focal_px > 0:
            raise ValueError(f"focal_px must be > 0, got {self.focal_px}")
        if not self.baseline_m > 0:
            raise ValueError(f"baseline_m must be > 0, got {self.baseline_m}")
        if self.image_w <= 0 or self.image_h <= 0:
            raise ValueError(f"image extents must be positive, got {self.image_w}x{self.image_h}")

    @property
    def fb(self) -> float:
        return self.focal_px * self.baseline_m

    def cropped(self, top: int, left: int, height: int, width: int) -> CameraCalibration:
        """Калибровка для окна кропа: главная точка сдвигается, f и B не меняются."""
        return replace(self, cx=self.cx - left, cy=self.cy - top, image_w=width, image_h=height)


@dataclass(slots=True)
class SparseDisparityMap:
    """L^s: диспаратности в пикселях + маска валидности; невалидные = INVALID_FILL."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self) -> None:
        self.valid = np.asarray(self.valid, dtype=bool)
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape != self.valid.shape:
            raise ValueError(
                f"values {values.shape} and valid {self.valid.shape} must be equal 2-D shapes"
            )
        if np.any(values[self.valid] < 0) or not np.all(np.isfinite(values[self.valid])):
            raise ValueError("valid disparities must be finite and >= 0")
        values[~self.valid] = INVALID_FILL
        self.values = values

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    @classmethod
    def empty(cls, height: int, width: int) -> SparseDisparityMap:
        return cls(np.zeros((height, width)), np.zeros((height, width), dtype=bool))

    def crop(self, top: int, left: int, height: int, width: int) -> SparseDisparityMap:
        sl = (slice(top, top + height), slice(left, left + width))
        return SparseDisparityMap(self.values[sl], self.valid[sl])

    def copy(self) -> SparseDisparityMap:
        return SparseDisparityMap(self.values.copy(), self.valid.copy())


@dataclass(slots=True)
class LidarPointCloud:
    """Точки (x, y, z) в метрах в системе левой камеры, z вперёд."""

    points: np.ndarray

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if np.any(pts[:, 2] <= 0):
            raise ValueError("every LiDAR point must have z > 0")
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)


def depth_to_disparity(z_m, calib: CameraCalibration):
    z = np.asarray(z_m, dtype=np.float64)
    if np.any(z <= 0):
        raise ValueError("depth must be > 0")
    d = calib.fb / z
    return float(d) if d.ndim == 0 else d


def disparity_to_depth(d_px, calib: CameraCalibration):
    d = np.asarray(d_px, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("disparity must be > 0")
    z = calib.fb / d
    return float(z) if z.ndim == 0 else z


def round_px(x):
    """Округление к ближайшему пикселю, половины вверх."""
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


def project_lidar(
    cloud: LidarPointCloud,
    calib: CameraCalibration,
    target: Literal["left", "right"] = "left",
) -> SparseDisparityMap:
    """
    Спроецировать облако в левое или правое изображение.

    Столбец в правом виде — round(u_L) − round(d), а не round(u_L − d): пара
    точек всегда разнесена ровно на round(f·B/z), ценой сдвига правого
    столбца на 1 px, когда дробные части u_L и d переходят через 0.5. При коллизии
    остаётся ближайшая точка (минимальный z), точки вне кадра отбрасываются.
    """
    if target not in ("left", "right"):
        raise ValueError(f"target must be 'left' or 'right', got {target!r}")
    if len(cloud) == 0:
        raise ValueError("project_lidar: empty point cloud")
    x, y, z = cloud.points.T
    f = calib.focal_px
    d = calib.fb / z
    u = round_px(f * x / z + calib.cx)
    if target == "right":
        u = u - round_px(d)
    v = round_px(f * y / z + calib.cy)
    inside = (u >= 0) & (u < calib.image_w) & (v >= 0) & (v < calib.image_h)
    out = SparseDisparityMap.empty(calib.image_h, calib.image_w)
    if not inside.any():
        return out
    u, v, z, d = u[inside], v[inside], z[inside], d[inside]
    order = np.argsort(z, kind="stable")
    flat = (v * calib.image_w + u)[order]
    # np.unique отдаёт первое вхождение; после сортировки это ближайшая точка
    keys, first = np.unique(flat, return_index=True)
    values = out.values.reshape(-1)
    valid = out.valid.reshape(-1)
    values[keys] = d[order][first]
    valid[keys] = True
    return SparseDisparityMap(values.reshape(out.values.shape), valid.reshape(out.valid.shape))


def backproject(sparse: SparseDisparityMap, calib: CameraCalibration) -> LidarPointCloud:
    """Обратная проекция валидных пикселей с d > 0 в облако левой камеры."""
    vs, us = np.nonzero(sparse.valid & (sparse.values > 0))
    z = calib.fb / sparse.values[vs, us]
    x = (us - calib.cx) * z / calib.focal_px
    y = (vs - calib.cy) * z / calib.focal_px
    return LidarPointCloud(np.stack([x, y, z], axis=1))


def reproject_left_to_right(sparse: SparseDisparityMap, calib: CameraCalibration) -> SparseDisparityMap:
    cloud = backproject(sparse, calib)
    if len(cloud) == 0:
        return SparseDisparityMap.empty(calib.image_h, calib.image_w)
    return project_lidar(cloud, calib, "right")


def subsample_sparse(sparse: SparseDisparityMap, density: float, seed: int) -> SparseDisparityMap:
    """Оставить round(density·n_valid) валидных пикселей, равномерно без возвращения."""
    if not 0.0 < density <= 1.0:
        raise ValueError(f"density must be in (0, 1], got {density}")
    if density == 1.0:
        return sparse.copy()
    idx = np.flatnonzero(sparse.valid)
    keep = int(math.floor(density * len(idx) + 0.5))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(idx, size=keep, replace=False) if keep else idx[:0]
    valid = np.zeros(sparse.valid.size, dtype=bool)
    valid[chosen] = True
    valid = valid.reshape(sparse.valid.shape)
    return SparseDisparityMap(np.where(valid, sparse.values, INVALID_FILL), valid)


def discretize_disparity(d_px: float, d_hat: int, d_max: float) -> int:
    if d_px < 0:
        raise ValueError(f"disparity must be >= 0, got {d_px}")
    if d_hat < 2:
        raise ValueError(f"d_hat must be >= 2, got {d_hat}")
    return min(max(int(math.floor(d_px / d_max * d_hat)), 0), d_hat - 1)


def discretize_bins(values: np.ndarray, d_hat: int, d_max: float) -> np.ndarray:
    """Векторный discretize_disparity; отрицательные значения недопустимы."""
    values = np.asarray(values, dtype=np.float64)
    if np.any(values < 0):
        raise ValueError("disparity must be >= 0")
    if d_hat < 2:
        raise ValueError(f"d_hat must be >= 2, got {d_hat}")
    return np.clip(np.floor(values / d_max * d_hat), 0, d_hat - 1).astype(np.int64)


def downsample_sparse(sparse: SparseDisparityMap, factor: int) -> SparseDisparityMap:
    """
    Перевести карту в разрешение признаков: ячейка factor×factor валидна, если
    валиден хоть один её пиксель (OR), значение — среднее валидных / factor.
    """
    if factor == 1:
        return sparse.copy()
    h, w = sparse.height // factor, sparse.width // factor
    vals = sparse.values[: h * factor, : w * factor].reshape(h, factor, w, factor)
    ok = sparse.valid[: h * factor, : w * factor].reshape(h, factor, w, factor)
    count = ok.sum(axis=(1, 3))
    total = (vals * ok).sum(axis=(1, 3))
    valid = count > 0
    mean = np.divide(total, count, out=np.zeros_like(total), where=valid)
    return SparseDisparityMap(mean / factor, valid)


# --- файл калибровки: строки "key value" ---

_CALIB_KEYS = ("focal_px", "baseline_m", "cx", "cy", "width", "height")


def load_calibration(path: Path | str) -> CameraCalibration:
    found: dict[str, float] = {}
    for lineno, parts in iter_records(path):
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected 'key value', got {' '.join(parts)!r}")
        key, raw = parts
        if key not in _CALIB_KEYS:
            raise DataError(f"{path}:{lineno}: unknown calibration key {key!r}")
        try:
            found[key] = float(raw)
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: bad number {raw!r} for {key}") from e
    missing = [k for k in _CALIB_KEYS if k not in found]
    if missing:
        raise DataError(f"{path}: missing calibration keys {missing}")
    try:
        return CameraCalibration(
            focal_px=found["focal_px"],
            baseline_m=found["baseline_m"],
            cx=found["cx"],
            cy=found["cy"],
            image_w=int(found["width"]),
            image_h=int(found["height"]),
        )
    except ValueError as e:
        raise DataError(f"{path}: {e}") from e


def dump_calibration(calib: CameraCalibration) -> str:
    return (
        f"focal_px {calib.focal_px!r}\n"
        f"baseline_m {calib.baseline_m!r}\n"
        f"cx {calib.cx!r}\n"
        f"cy {calib.cy!r}\n"
        f"width {calib.image_w}\n"
        f"height {calib.image_h}\n"
    )
