"""Цикл обучения: случайный кроп, маскированный L1, RMSProp, чекпойнты."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence
import logging

import numpy as np

from .checkpoint import save_checkpoint
from .config import NetworkConfig, RunConfig, TrainConfig
from .errors import ConfigError, DataError, DivergenceError
from .network import StereoNet, StereoSample
from .numerics import L1Loss

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.ckpt"
LOSS_LOG_NAME = "loss.log"
MAX_CROP_TRIES = 10


def rmsprop_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: dict[str, np.ndarray],
    lr: float,
    alpha: float = 0.99,
    eps: float = 1e-8,
) -> None:
    """s ← α·s + (1−α)·g²;  p ← p − lr·g / (sqrt(s) + eps). Всё на месте."""
    if not lr > 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    for name in sorted(grads):
        g = grads[name]
        p = params[name]
        s = state.get(name)
        if s is None:
            s = state[name] = np.zeros_like(p)
        s *= alpha
        s += (1.0 - alpha) * g * g
        p -= lr * g / (np.sqrt(s) + eps)


def supervision_mask(sample: StereoSample, d_max: int) -> np.ndarray:
    return sample.gt_valid & (sample.gt_disparity < d_max)


def random_crop(
    sample: StereoSample, crop_h: int, crop_w: int, rng: np.random.Generator, cfg: NetworkConfig
) -> StereoSample:
    """Кроп с сидом; 0 по оси означает без кропа. Повторяет попытку, пока в окне нет разметки."""
    h = crop_h or sample.height
    w = crop_w or sample.width
    if h > sample.height or w > sample.width:
        raise ConfigError(f"crop {w}x{h} exceeds sample {sample.width}x{sample.height}")
    if h % cfg.downsample or w % cfg.downsample:
        raise ConfigError(f"crop {w}x{h} must be a multiple of downsample={cfg.downsample}")
    for _ in range(MAX_CROP_TRIES):
        top = int(rng.integers(0, sample.height - h + 1))
        left = int(rng.integers(0, sample.width - w + 1))
        crop = sample if (h, w) == (sample.height, sample.width) else sample.crop(top, left, h, w)
        if supervision_mask(crop, cfg.d_max).any():
            return crop
    raise DataError(f"sample {sample.name or '<unnamed>'}: no supervised pixels in {MAX_CROP_TRIES} crops")


@dataclass(slots=True)
class TrainResult:
    net: StereoNet
    losses: list[float] = field(default_factory=list)
    checkpoint: Path | None = None
    loss_log: Path | None = None


def train_step(
    net: StereoNet, sample: StereoSample, state: dict[str, np.ndarray], tc: TrainConfig, it: int
) -> float:
    pred, cache = net.forward(sample, training=True)
    loss_op = L1Loss()
    loss = float(loss_op.forward(pred, sample.gt_disparity, supervision_mask(sample, net.cfg.d_max)))
    if not np.isfinite(loss):
        raise DivergenceError(f"loss is {loss} at iter {it} (sample {sample.name or '<unnamed>'})")
    dpred, _, _ = loss_op.backward(np.ones((), dtype=pred.dtype))
    grads = net.backward(dpred, cache)
    bad = sorted(n for n, g in grads.items() if not np.all(np.isfinite(g)))
    if bad:
        raise DivergenceError(f"non-finite gradients at iter {it}: {', '.join(bad[:5])}")
    rmsprop_step(net.params, grads, state, tc.lr, tc.alpha, tc.eps)
    return loss


def train(
    cfg: RunConfig,
    dataset: Sequence[StereoSample],
    out_dir: Path | str | None = None,
    n_iters: int | None = None,
    seed: int | None = None,
) -> TrainResult:
    """
    Обучение с batch size 1. Выборка кадра и кроп — из генератора с сидом,
    так что одинаковые (cfg, seed) дают побитово одинаковые чекпойнты.
    """
    if not dataset:
        raise DataError("training dataset is empty")
    tc = cfg.train
    iters = tc.iters if n_iters is None else n_iters
    seed = cfg.seed if seed is None else seed
    net = StereoNet(cfg.network).init_params(seed)
    rng = np.random.default_rng(seed)
    state: dict[str, np.ndarray] = {}
    result = TrainResult(net)
    out = Path(out_dir) if out_dir is not None else None

    logger.info("training variant=%s iters=%d seed=%d samples=%d",
                cfg.network.variant, iters, seed, len(dataset))
    for it in range(1, iters + 1):
        sample = dataset[int(rng.integers(len(dataset)))]
        crop = random_crop(sample, tc.crop_h, tc.crop_w, rng, cfg.network)
        loss = train_step(net, crop, state, tc, it)
        result.losses.append(loss)
        if it == 1 or it % 50 == 0 or it == iters:
            logger.info("iter=%d loss=%.4f", it, loss)
        if out is not None and tc.checkpoint_every and it % tc.checkpoint_every == 0:
            save_checkpoint(out / f"ckpt_{it:06d}.ckpt", net.state(), net.meta())

    if out is not None:
        result.checkpoint = save_checkpoint(out / CHECKPOINT_NAME, net.state(), net.meta())
        result.loss_log = out / LOSS_LOG_NAME
        result.loss_log.write_text("".join(f"{i},{v!r}\n" for i, v in enumerate(result.losses, 1)),
                                   encoding="utf-8")
    return result
