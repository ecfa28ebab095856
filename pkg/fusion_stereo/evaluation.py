"""
Метрики и экспериментальные обвязки: evaluate, прореживание LiDAR,
зонд чувствительности, отчёт о времени/параметрах и сетка абляций.

Метрики пулятся по пикселям всего набора (а не усредняются по кадрам).
">N px": строгое неравенство |e| > N; глубины в метрах, обратные — в 1/км.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence
import logging
import time

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint
from .config import NetworkConfig, RunConfig
from .errors import ConfigError, DataError
from .geometry import reproject_left_to_right, subsample_sparse
from .network import StereoNet, StereoSample
from .trainer import train

logger = logging.getLogger(__name__)

# минимальная диспаратность предсказания при переводе в глубину
MIN_PRED_DISPARITY = 1e-3
SUMMARY_METRIC = "mae_px"

ModelLike = StereoNet | Checkpoint | Path | str


@dataclass(slots=True)
class MetricsReport:
    err_gt_1px: float
    err_gt_2px: float
    err_gt_3px: float
    rmse_px: float
    mae_px: float
    rmse_m: float
    mae_m: float
    irmse_km: float
    imae_km: float
    n_pixels: int

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


METRIC_NAMES = tuple(f.name for f in fields(MetricsReport) if f.name != "n_pixels")


def load_model(model: ModelLike) -> StereoNet:
    if isinstance(model, StereoNet):
        return model
    if isinstance(model, (str, Path)):
        model = load_checkpoint(model)
    return StereoNet.from_checkpoint(model)


def compute_metrics(
    preds: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    fbs: Sequence[float],
) -> MetricsReport:
    """
    Метрики по всем валидным пикселям всех кадров; fb = f·B кадра для перевода в глубину.

    Валидный пиксель с GT = 0 (бесконечная глубина) входит в пиксельные метрики,
    а в метрические и обратные — нет; если таких пикселей не осталось, там NaN.
    """
    err, depth_err, inv_err = [], [], []
    for pred, gt, mask, fb in zip(preds, gts, masks, fbs, strict=True):
        m = np.asarray(mask, dtype=bool)
        p, g = np.asarray(pred, dtype=np.float64)[m], np.asarray(gt, dtype=np.float64)[m]
        err.append(p - g)
        finite = g > 0
        pz = fb / np.maximum(p[finite], MIN_PRED_DISPARITY)
        gz = fb / g[finite]
        depth_err.append(pz - gz)
        # 1/z в 1/м -> 1/км
        inv_err.append(1000.0 / pz - 1000.0 / gz)
    e = np.concatenate(err) if err else np.zeros(0)
    n = e.size
    if n == 0:
        raise DataError("no valid ground-truth pixels to evaluate")
    a = np.abs(e)
    dz = np.concatenate(depth_err)
    di = np.concatenate(inv_err)
    if dz.size == 0:
        logger.warning("every valid ground-truth disparity is 0; depth metrics are NaN")
        dz = di = np.array([np.nan])
    return MetricsReport(
        err_gt_1px=100.0 * np.count_nonzero(a > 1) / n,
        err_gt_2px=100.0 * np.count_nonzero(a > 2) / n,
        err_gt_3px=100.0 * np.count_nonzero(a > 3) / n,
        rmse_px=float(np.sqrt(np.mean(e * e))),
        mae_px=float(np.mean(a)),
        rmse_m=float(np.sqrt(np.mean(dz * dz))),
        mae_m=float(np.mean(np.abs(dz))),
        irmse_km=float(np.sqrt(np.mean(di * di))),
        imae_km=float(np.mean(np.abs(di))),
        n_pixels=int(n),
    )


def evaluate(model: ModelLike, dataset: Sequence[StereoSample]) -> MetricsReport:
    if not dataset:
        raise DataError("evaluation dataset is empty")
    net = load_model(model)
    preds, gts, masks, fbs = [], [], [], []
    for s in dataset:
        if s.calib is None:
            raise DataError(f"sample {s.name or '<unnamed>'} has no calibration for depth metrics")
        preds.append(net.predict(s))
        gts.append(s.gt_disparity)
        masks.append(s.gt_valid)
        fbs.append(s.calib.fb)
    report = compute_metrics(preds, gts, masks, fbs)
    logger.info("evaluated variant=%s samples=%d mae_px=%.4f err_gt_3px=%.2f",
                net.cfg.variant, len(dataset), report.mae_px, report.err_gt_3px)
    return report


# --- прореживание LiDAR ---

def subsample_sample(sample: StereoSample, density: float, seed: int) -> StereoSample:
    """Проредить левую карту; правая строится заново перепроекцией. При density 1.0 выборка не меняется."""
    if density == 1.0:
        return sample
    if sample.calib is None:
        raise DataError(f"sample {sample.name or '<unnamed>'}: density sweep needs calibration")
    left = subsample_sparse(sample.lidar_left, density, seed)
    return sample.with_lidar(left, reproject_left_to_right(left, sample.calib))


@dataclass(slots=True)
class DensitySweep:
    label: str
    # (density, seed, metric, value)
    long_rows: list[tuple[float, int, str, float]]
    # density -> metric -> (mean, std)
    summary: dict[float, dict[str, tuple[float, float]]]

    def mae_curve(self) -> list[tuple[float, float]]:
        return [(d, m[SUMMARY_METRIC][0]) for d, m in sorted(self.summary.items())]

    @property
    def monotone(self) -> bool:
        """MAE не растёт с ростом плотности."""
        maes = [v for _, v in self.mae_curve()]
        return all(b <= a for a, b in zip(maes, maes[1:]))

    @property
    def relative_degradation(self) -> float:
        """(MAE при минимальной плотности − MAE при максимальной) / MAE при максимальной."""
        curve = self.mae_curve()
        lo, hi = curve[0][1], curve[-1][1]
        return (lo - hi) / hi if hi > 0 else float("inf")


def density_sweep(
    model: ModelLike,
    dataset: Sequence[StereoSample],
    densities: Sequence[float],
    seeds: Sequence[int],
    label: str = "",
) -> DensitySweep:
    if not densities or not seeds:
        raise ConfigError("density sweep needs at least one density and one seed")
    for d in densities:
        if not 0.0 < d <= 1.0:
            raise ConfigError(f"densities must lie in (0, 1], got {d}")
    net = load_model(model)
    long_rows: list[tuple[float, int, str, float]] = []
    summary: dict[float, dict[str, tuple[float, float]]] = {}
    for d in densities:
        per_seed = []
        for seed in seeds:
            sub = [subsample_sample(s, d, seed + 7919 * i) for i, s in enumerate(dataset)]
            rep = evaluate(net, sub)
            per_seed.append(rep)
            long_rows.extend((float(d), int(seed), k, float(getattr(rep, k))) for k in METRIC_NAMES)
        summary[float(d)] = {
            k: (float(np.mean([getattr(r, k) for r in per_seed])), float(np.std([getattr(r, k) for r in per_seed])))
            for k in METRIC_NAMES
        }
        logger.info("density=%.3f mae_px=%.4f", d, summary[float(d)][SUMMARY_METRIC][0])
    return DensitySweep(label or net.cfg.variant, long_rows, summary)


# --- зонд чувствительности ---

@dataclass(slots=True)
class SensitivityResult:
    delta_map: np.ndarray
    mean_abs_change_inside: float
    mean_abs_change_outside: float
    n_modified: int


def sensitivity_probe(
    model: ModelLike,
    sample: StereoSample,
    region: Sequence[int],
    new_disparity: float,
) -> SensitivityResult:
    """
    Задать всем валидным пикселям левой карты LiDAR внутри region = (y0, x0, y1, x1)
    диспаратность new_disparity и сравнить предсказания до и после. Правая
    карта строится заново перепроекцией изменённой левой.
    """
    net = load_model(model)
    if len(region) != 4:
        raise ConfigError(f"region must be (y0, x0, y1, x1), got {tuple(region)}")
    y0, x0, y1, x1 = (int(v) for v in region)
    if not (0 <= y0 < y1 <= sample.height and 0 <= x0 < x1 <= sample.width):
        raise ConfigError(f"region {tuple(region)} is outside the {sample.width}x{sample.height} image")
    if not 0 <= new_disparity < net.cfg.d_max:
        raise ConfigError(f"new_disparity must be in [0, d_max={net.cfg.d_max}), got {new_disparity}")
    inside = np.zeros((sample.height, sample.width), dtype=bool)
    inside[y0:y1, x0:x1] = True
    target = inside & sample.lidar_left.valid
    if not target.any():
        raise DataError("no conditioning signal in region")

    if sample.calib is None:
        raise DataError(f"sample {sample.name or '<unnamed>'}: sensitivity probe needs calibration")

    modified = sample.lidar_left.copy()
    modified.values[target] = new_disparity
    before = net.predict(sample)
    after = net.predict(sample.with_lidar(modified, reproject_left_to_right(modified, sample.calib)))
    delta = np.abs(after - before)
    outside = delta[~inside]
    return SensitivityResult(
        delta_map=delta,
        mean_abs_change_inside=float(delta[inside].mean()),
        mean_abs_change_outside=float(outside.mean()) if outside.size else 0.0,
        n_modified=int(target.sum()),
    )


# --- время и параметры ---

@dataclass(slots=True)
class RuntimeRow:
    variant: str
    forward_seconds: float
    n_params: int
    conditioning_params: int
    formula_params: int


def runtime_report(
    configs: Sequence[NetworkConfig],
    sample: StereoSample,
    repeats: int = 10,
    warmup: int = 1,
    seed: int = 0,
) -> list[RuntimeRow]:
    """Медиана repeats прогонов вперёд (без warmup) и учёт параметров на вариант."""
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    rows = []
    for cfg in configs:
        net = StereoNet(cfg).init_params(seed)
        for _ in range(warmup):
            net.predict(sample)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            net.predict(sample)
            times.append(time.perf_counter() - t0)
        enumerated = sum(net.params[n].size for n in net.conditioning_param_names())
        formula = net.expected_conditioning_params()
        if enumerated != formula:
            raise ConfigError(
                f"variant {cfg.variant}: enumerated {enumerated} conditioning parameters, formula gives {formula}"
            )
        rows.append(RuntimeRow(cfg.variant, float(np.median(times)), net.n_params(), enumerated, formula))
        logger.info("runtime variant=%s seconds=%.4f params=%d", cfg.variant, rows[-1].forward_seconds, rows[-1].n_params)
    return rows


# --- сетка абляций ---

@dataclass(slots=True)
class AblationRow:
    variant: str
    seed: int
    metrics: MetricsReport


def ablation_grid(
    variants: Sequence[str],
    train_set: Sequence[StereoSample],
    eval_set: Sequence[StereoSample],
    seeds: Sequence[int],
    base: RunConfig,
    out_dir: Path | str | None = None,
) -> tuple[list[AblationRow], dict[str, dict[str, float]]]:
    """Обучить и оценить каждый (вариант, сид); вернуть строки и средние по варианту."""
    rows: list[AblationRow] = []
    for variant in variants:
        for seed in seeds:
            cfg = replace(base, seed=seed, network=replace(base.network, variant=variant))
            cfg.network.validate()
            sub = Path(out_dir) / f"{variant}_seed{seed}" if out_dir is not None else None
            result = train(cfg, train_set, sub)
            rows.append(AblationRow(variant, seed, evaluate(result.net, eval_set)))
    means: dict[str, dict[str, float]] = {}
    for variant in variants:
        reps = [r.metrics for r in rows if r.variant == variant]
        means[variant] = {k: float(np.mean([getattr(r, k) for r in reps])) for k in METRIC_NAMES}
    return rows, means
