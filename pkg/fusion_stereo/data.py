"""
Данные: синтетические сцены с точной разметкой и файловый ввод-вывод в
соглашениях KITTI (16-битные PNG глубины, value / 256 м, 0 = нет данных).
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence
import logging
import math

import numpy as np
import png

from .config import INVALID_FILL, SceneConfig
from .errors import DataError
from .geometry import (
    CameraCalibration,
    SparseDisparityMap,
    depth_to_disparity,
    disparity_to_depth,
    dump_calibration,
    load_calibration,
    reproject_left_to_right,
    round_px,
)
from .network import StereoSample
from .reader import iter_records

logger = logging.getLogger(__name__)

DEPTH_SCALE = 256.0
MAX_PIXEL = 65535
DISPARITY_SUFFIX = "_disp"
VIZ_SUFFIX = "_vis"


# --- синтетические сцены ---

@dataclass(slots=True)
class _Plane:
    # d(x, y) = a + b·x + c·y в координатах левого изображения
    a: float
    b: float
    c: float
    # прямоугольник покрытия [x0, x1) × [y0, y1) в координатах левого изображения
    x0: float
    x1: float
    y0: int
    y1: int
    texture: np.ndarray  # (3, H, Wp)

    def disparity(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.a + self.b * x + self.c * y

    def left_x(self, xr: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Столбец левого изображения, который плоскость отображает в столбец xr правого."""
        return (xr + self.a + self.c * y) / (1.0 - self.b)

    def covers(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return (x >= self.x0) & (x < self.x1) & (y >= self.y0) & (y < self.y1)

    def sample(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Текстура в (x, y) с линейной интерполяцией по x; результат (3, *x.shape)."""
        wp = self.texture.shape[2]
        x = np.clip(x, 0.0, wp - 1)
        i0 = np.floor(x).astype(np.int64)
        i1 = np.minimum(i0 + 1, wp - 1)
        t = x - i0
        yy = y.astype(np.int64)
        return self.texture[:, yy, i0] * (1.0 - t) + self.texture[:, yy, i1] * t


def _texture(kind: str, rng: np.random.Generator, h: int, wp: int) -> np.ndarray:
    if kind == "noise":
        return rng.random((3, h, wp))
    yy, xx = np.mgrid[0:h, 0:wp]
    if kind == "checker":
        cell = int(rng.integers(2, 5))
        lo, hi = np.sort(rng.random(2))
        board = np.where((xx // cell + yy // cell) % 2 == 0, lo, hi)
        tint = 0.5 + 0.5 * rng.random((3, 1, 1))
        return board[None] * tint
    # gradient: наклонная рампа плюс синус по x, чтобы строки не были постоянными
    phase = rng.random() * 2 * math.pi
    ramp = (xx / max(wp - 1, 1) + yy / max(h - 1, 1)) / 2
    wave = 0.25 * np.sin(xx * 0.7 + phase)
    base = np.clip(0.5 * ramp + 0.25 + wave, 0.0, 1.0)
    return np.stack([base, base[:, ::-1], 1.0 - base])


def _planes(cfg: SceneConfig, rng: np.random.Generator, wp: int) -> list[_Plane]:
    d_lo, d_hi = cfg.disparity_range
    w, h = cfg.width, cfg.height
    depths = np.sort(rng.uniform(d_lo, d_hi, size=cfg.n_planes))
    if cfg.integer_disparity and not cfg.slanted:
        depths = np.clip(np.floor(depths + 0.5), math.ceil(d_lo), math.floor(d_hi))
    planes = []
    margin = (d_hi - d_lo) / 4
    cx, cy = (wp - 1) / 2, (h - 1) / 2
    for k, d0 in enumerate(depths):
        if cfg.slanted and margin > 0:
            d0 = float(np.clip(d0, d_lo + margin, d_hi - margin))
            b = rng.uniform(-1, 1) * margin / (2 * wp)
            c = rng.uniform(-1, 1) * margin / (2 * h)
        else:
            b = c = 0.0
        a = float(d0) - b * cx - c * cy
        if k == 0:
            # фон заходит за кадр, чтобы правый вид всегда что-то видел
            x0, x1, y0, y1 = -math.inf, math.inf, 0, h
        else:
            rw = int(rng.integers(max(w // 4, 1), max(w // 2, 2) + 1))
            rh = int(rng.integers(max(h // 4, 1), max(h // 2, 2) + 1))
            x0 = int(rng.integers(0, max(w - rw, 0) + 1))
            y0 = int(rng.integers(0, max(h - rh, 0) + 1))
            x1, y1 = x0 + rw, y0 + rh
        planes.append(_Plane(a, b, c, x0, x1, y0, y1, _texture(cfg.texture, rng, h, wp)))
    return planes


def _visible(planes: Sequence[_Plane], xs: Sequence[np.ndarray], y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Индекс видимой плоскости (наибольшая диспаратность) и её диспаратность."""
    best = np.full(y.shape, -1, dtype=np.int64)
    best_d = np.full(y.shape, -np.inf)
    for k, (p, x) in enumerate(zip(planes, xs)):
        d = p.disparity(x, y)
        take = p.covers(x, y) & (d > best_d)
        best[take] = k
        best_d[take] = d[take]
    return best, best_d


def scene_calibration(cfg: SceneConfig) -> CameraCalibration:
    return CameraCalibration(
        focal_px=cfg.focal_px,
        baseline_m=cfg.baseline_m,
        cx=(cfg.width - 1) / 2,
        cy=(cfg.height - 1) / 2,
        image_w=cfg.width,
        image_h=cfg.height,
    )


def gen_scene(cfg: SceneConfig, d_max: int | None = None) -> StereoSample:
    """
    Слоистая сцена из текстурированных плоскостей.

    Левый вид рендерится напрямую, правый — обратным отображением каждой
    плоскости (x = xr + d для фронтальной) с линейной интерполяцией по x.
    GT невалидна там, где точка уходит за кадр правого вида или закрыта.
    """
    cfg.validate(d_max)
    rng = np.random.default_rng(cfg.seed)
    w, h = cfg.width, cfg.height
    wp = w + math.ceil(cfg.disparity_range[1]) + 2
    planes = _planes(cfg, rng, wp)

    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    owner, gt = _visible(planes, [x] * len(planes), y)
    left = np.zeros((3, h, w))
    for k, p in enumerate(planes):
        m = owner == k
        left[:, m] = p.sample(x[m], y[m])

    xr = x
    right_xs = [p.left_x(xr, y) for p in planes]
    owner_r, _ = _visible(planes, right_xs, y)
    right = np.zeros((3, h, w))
    for k, p in enumerate(planes):
        m = owner_r == k
        right[:, m] = p.sample(right_xs[k][m], y[m])

    # валидность GT: точка попадает в кадр правого вида и не закрыта
    x_right = x - gt
    valid = (x_right >= 0) & (x_right <= w - 1)
    for k, p in enumerate(planes):
        xk = p.left_x(x_right, y)
        dk = p.disparity(xk, y)
        valid &= ~(p.covers(xk, y) & (dk > gt + 1e-9))

    calib = scene_calibration(cfg)
    lidar_left = _sample_lidar(gt, cfg, rng)
    lidar_right = reproject_left_to_right(lidar_left, calib)
    logger.debug("scene generated seed=%d planes=%d gt_valid=%.3f lidar=%d",
                  cfg.seed, cfg.n_planes, valid.mean(), lidar_left.n_valid)
    return StereoSample(
        left_rgb=left,
        right_rgb=right,
        lidar_left=lidar_left,
        lidar_right=lidar_right,
        gt_disparity=gt,
        gt_valid=valid,
        calib=calib,
        name=f"scene_{cfg.seed:06d}",
    )


def _sample_lidar(gt: np.ndarray, cfg: SceneConfig, rng: np.random.Generator) -> SparseDisparityMap:
    n = int(math.floor(cfg.lidar_coverage * gt.size + 0.5))
    idx = rng.choice(gt.size, size=n, replace=False)
    valid = np.zeros(gt.size, dtype=bool)
    valid[idx] = True
    values = gt.reshape(-1).copy()
    if cfg.noise_sigma_px > 0:
        values = np.maximum(values + rng.normal(0.0, cfg.noise_sigma_px, size=values.shape), 0.0)
    valid = valid.reshape(gt.shape)
    return SparseDisparityMap(np.where(valid, values.reshape(gt.shape), INVALID_FILL), valid)


def synthetic_samples(cfg: SceneConfig, n: int, seed_offset: int = 0, d_max: int | None = None) -> list[StereoSample]:
    return [gen_scene(replace(cfg, seed=cfg.seed + seed_offset + i), d_max) for i in range(n)]


# --- PNG ---

def _read_png(path: Path | str) -> tuple[np.ndarray, dict]:
    try:
        width, height, rows, info = png.Reader(filename=str(path)).read()
        arr = np.vstack([np.asarray(r, dtype=np.uint16) for r in rows])
    except FileNotFoundError as e:
        raise DataError(f"{path}: file not found") from e
    except (png.Error, OSError, ValueError) as e:
        raise DataError(f"{path}: corrupt PNG ({e})") from e
    return arr.reshape(height, width, info["planes"]), info


def read_depth_png(path: Path | str) -> tuple[np.ndarray, np.ndarray]:
    """16-битный одноканальный PNG -> (глубина в метрах, маска валидности)."""
    arr, info = _read_png(path)
    if info["bitdepth"] != 16:
        raise DataError(f"{path}: expected 16-bit depth PNG, got {info['bitdepth']}-bit")
    if info["planes"] != 1:
        raise DataError(f"{path}: expected a single-channel depth PNG, got {info['planes']} channels")
    px = arr[..., 0]
    valid = px != 0
    return px.astype(np.float64) / DEPTH_SCALE, valid


def write_depth_png(path: Path | str, depth_m: np.ndarray, valid: np.ndarray | None = None) -> Path:
    """Обратная к read_depth_png: pixel = round(depth·256), невалидные -> 0."""
    depth = np.asarray(depth_m, dtype=np.float64)
    valid = np.isfinite(depth) & (depth > 0) if valid is None else np.asarray(valid, dtype=bool)
    px = np.zeros(depth.shape, dtype=np.int64)
    px[valid] = round_px(depth[valid] * DEPTH_SCALE)
    if np.any(px[valid] < 1) or np.any(px[valid] > MAX_PIXEL):
        raise ValueError(f"{path}: depth outside the representable range "
                         f"[{1 / DEPTH_SCALE}, {MAX_PIXEL / DEPTH_SCALE}] m")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fd:
        png.Writer(width=depth.shape[1], height=depth.shape[0], greyscale=True, bitdepth=16).write(
            fd, px.astype(np.uint16)
        )
    return path


def disparity_png_path(directory: Path | str, stem: str) -> Path:
    return Path(directory) / f"{stem}{DISPARITY_SUFFIX}.png"


def write_disparity_png(path: Path | str, disparity: np.ndarray, valid: np.ndarray | None = None) -> Path:
    """Диспаратность в том же кодеке (value / 256); имя файла обязано оканчиваться на _disp."""
    if not Path(path).stem.endswith(DISPARITY_SUFFIX):
        raise ValueError(f"{path}: disparity PNG names end with '{DISPARITY_SUFFIX}.png'")
    return write_depth_png(path, disparity, valid)


def read_disparity_png(path: Path | str) -> tuple[np.ndarray, np.ndarray]:
    return read_depth_png(path)


def write_viz_png(path: Path | str, values: np.ndarray, vmax: float | None = None) -> Path:
    """8-битная нормированная картинка для просмотра (не для чтения обратно)."""
    v = np.nan_to_num(np.asarray(values, dtype=np.float64))
    top = vmax if vmax is not None else float(v.max())
    img = np.zeros(v.shape, dtype=np.uint8) if top <= 0 else round_px(np.clip(v / top, 0, 1) * 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fd:
        png.Writer(width=v.shape[1], height=v.shape[0], greyscale=True, bitdepth=8).write(fd, img)
    return path


def read_rgb_png(path: Path | str) -> np.ndarray:
    """8-битный PNG (любой цветовой тип) -> (3, H, W) в [0, 1]."""
    try:
        width, height, rows, info = png.Reader(filename=str(path)).asRGB8()
        arr = np.vstack([np.asarray(r, dtype=np.uint8) for r in rows])
    except FileNotFoundError as e:
        raise DataError(f"{path}: file not found") from e
    except (png.Error, OSError, ValueError) as e:
        raise DataError(f"{path}: corrupt PNG ({e})") from e
    return arr.reshape(height, width, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def write_rgb_png(path: Path | str, rgb: np.ndarray) -> Path:
    img = round_px(np.clip(rgb, 0.0, 1.0) * 255).astype(np.uint8)
    _, h, w = img.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fd:
        png.Writer(width=w, height=h, greyscale=False, bitdepth=8).write(fd, img.transpose(1, 2, 0).reshape(h, w * 3))
    return path


# --- KITTI ---

def _depth_map_to_disparity(depth: np.ndarray, valid: np.ndarray, calib: CameraCalibration) -> SparseDisparityMap:
    values = np.zeros(depth.shape)
    values[valid] = depth_to_disparity(depth[valid], calib) if valid.any() else 0.0
    return SparseDisparityMap(values, valid)


def load_kitti_sample(
    left_png: Path | str,
    right_png: Path | str,
    lidar_png: Path | str,
    gt_png: Path | str,
    calib_file: Path | str,
    crop_h: int = 0,
) -> StereoSample:
    """
    Кадр в раскладке KITTI. crop_h > 0 оставляет нижние crop_h строк
    (сверху у KITTI нет разметки). Глубины LiDAR и GT переводятся в
    диспаратность по калибровке, правая карта LiDAR — перепроекцией.
    """
    calib = load_calibration(calib_file)
    left = read_rgb_png(left_png)
    right = read_rgb_png(right_png)
    lidar_depth, lidar_valid = read_depth_png(lidar_png)
    gt_depth, gt_valid = read_depth_png(gt_png)

    h, w = left.shape[1:]
    for what, shape in (("right", right.shape[1:]), ("lidar", lidar_depth.shape), ("gt", gt_depth.shape)):
        if tuple(shape) != (h, w):
            raise DataError(f"{left_png}: {what} extent {tuple(shape)} does not match left {(h, w)}")
    if (calib.image_h, calib.image_w) != (h, w):
        raise DataError(f"{calib_file}: calibration is for {calib.image_w}x{calib.image_h}, images are {w}x{h}")

    if crop_h:
        if crop_h > h:
            raise DataError(f"{left_png}: crop height {crop_h} exceeds image height {h}")
        top = h - crop_h
        calib = calib.cropped(top, 0, crop_h, w)
        sl = slice(top, h)
        left, right = left[:, sl], right[:, sl]
        lidar_depth, lidar_valid = lidar_depth[sl], lidar_valid[sl]
        gt_depth, gt_valid = gt_depth[sl], gt_valid[sl]

    lidar_left = _depth_map_to_disparity(lidar_depth, lidar_valid, calib)
    gt = _depth_map_to_disparity(gt_depth, gt_valid, calib)
    return StereoSample(
        left_rgb=left,
        right_rgb=right,
        lidar_left=lidar_left,
        lidar_right=reproject_left_to_right(lidar_left, calib),
        gt_disparity=gt.values,
        gt_valid=gt.valid,
        calib=calib,
        name=Path(left_png).stem,
    )


# --- манифест: "left right lidar gt calib" на строку ---

@dataclass(slots=True, frozen=True)
class ManifestRecord:
    left: Path
    right: Path
    lidar: Path
    gt: Path
    calib: Path

    def as_line(self, base: Path) -> str:
        def rel(p: Path) -> str:
            try:
                return p.relative_to(base).as_posix()
            except ValueError:
                return p.as_posix()
        return " ".join(rel(p) for p in (self.left, self.right, self.lidar, self.gt, self.calib))


def read_manifest(path: Path | str) -> list[ManifestRecord]:
    path = Path(path)
    base = path.parent
    out = []
    for lineno, parts in iter_records(path):
        if len(parts) != 5:
            raise DataError(f"{path}:{lineno}: expected 5 fields 'left right lidar gt calib', got {len(parts)}")
        out.append(ManifestRecord(*(base / p for p in parts)))
    if not out:
        raise DataError(f"{path}: manifest has no records")
    return out


def write_manifest(path: Path | str, records: Iterable[ManifestRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [r.as_line(path.parent) for r in records]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_record(rec: ManifestRecord, crop_h: int = 0) -> StereoSample:
    return load_kitti_sample(rec.left, rec.right, rec.lidar, rec.gt, rec.calib, crop_h)


def export_scenes(out_dir: Path | str, cfgs: Sequence[SceneConfig], d_max: int | None = None) -> Path:
    """Записать синтетические сцены в раскладке left/ right/ lidar/ gt/ calib/ и манифест."""
    out = Path(out_dir)
    records = []
    for cfg in cfgs:
        s = gen_scene(cfg, d_max)
        calib = s.calib
        names = {k: out / k / f"{s.name}.png" for k in ("left", "right", "lidar", "gt")}
        write_rgb_png(names["left"], s.left_rgb)
        write_rgb_png(names["right"], s.right_rgb)
        for key, values, valid in (
            ("lidar", s.lidar_left.values, s.lidar_left.valid & (s.lidar_left.values > 0)),
            ("gt", s.gt_disparity, s.gt_valid & (s.gt_disparity > 0)),
        ):
            depth = np.zeros(values.shape)
            depth[valid] = disparity_to_depth(values[valid], calib) if valid.any() else 0.0
            write_depth_png(names[key], depth, valid)
        write_viz_png(out / "gt" / f"{s.name}{VIZ_SUFFIX}.png", s.gt_disparity, d_max)
        calib_path = out / "calib" / f"{s.name}.txt"
        calib_path.parent.mkdir(parents=True, exist_ok=True)
        calib_path.write_text(dump_calibration(calib), encoding="utf-8")
        records.append(ManifestRecord(names["left"], names["right"], names["lidar"], names["gt"], calib_path))
        logger.info("exported scene=%s", s.name)
    return write_manifest(out / "manifest.txt", records)


