"""Объём стоимости конкатенацией признаков и регрессия диспаратности soft-argmin."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .numerics import Op, Tensor, softmax_neg


@dataclass(slots=True)
class CostVolume:
    # (2C, H, W, D): блок левых признаков, затем блок сдвинутых правых
    data: Tensor

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def levels(self) -> int:
        return self.data.shape[3]


class BuildCostVolume(Op):
    """Срез d: left[:, h, w] ‖ right[:, h, w − d]; при w − d < 0 правая половина нулевая."""

    def __init__(self, levels: int) -> None:
        if levels < 2:
            raise ShapeError("cost_volume", "D", levels, ">= 2")
        self.levels = levels

    def forward(self, left: Tensor, right: Tensor) -> Tensor:
        if left.ndim != 3:
            raise ShapeError("cost_volume", "feature rank", left.ndim, 3)
        for name, a, b in zip(("C", "H", "W"), right.shape, left.shape):
            if a != b:
                raise ShapeError("cost_volume", name, a, b)
        c, h, w = left.shape
        if self.levels > w:
            raise ShapeError("cost_volume", "D", self.levels, f"<= W={w}")
        vol = np.zeros((2 * c, h, w, self.levels), dtype=np.result_type(left, right))
        vol[:c] = left[..., None]
        for d in range(self.levels):
            vol[c:, :, d:, d] = right[:, :, : w - d]
        self.c, self.w = c, w
        return vol

    def backward(self, grad_out: Tensor) -> tuple[Tensor, Tensor]:
        c, w = self.c, self.w
        dleft = grad_out[:c].sum(axis=-1)
        dright = np.zeros_like(dleft)
        for d in range(self.levels):
            dright[:, :, : w - d] += grad_out[c:, :, d:, d]
        return dleft, dright


def build_cost_volume(left_feat: Tensor, right_feat: Tensor, levels: int) -> CostVolume:
    return CostVolume(BuildCostVolume(levels).forward(left_feat, right_feat))


class SoftArgmin(Op):
    """d*(h, w) = d_scale · Σ_d d · softmax(−cost)_d."""

    def __init__(self, d_scale: float = 1.0) -> None:
        self.d_scale = d_scale

    def forward(self, volume: Tensor) -> Tensor:
        if volume.ndim != 4 or volume.shape[0] != 1:
            raise ShapeError("soft_argmin", "channels", volume.shape[0] if volume.ndim else 0, 1)
        cost = volume[0]
        self.p = softmax_neg(cost, axis=-1)
        self.idx = np.arange(cost.shape[-1], dtype=self.p.dtype)
        self.expect = (self.p * self.idx).sum(axis=-1)
        return self.d_scale * self.expect

    def backward(self, grad_out: Tensor) -> tuple[Tensor]:
        g = grad_out[..., None]
        dcost = -self.d_scale * g * self.p * (self.idx - self.expect[..., None])
        return (dcost[None],)


def soft_argmin(reg_volume: Tensor, d_scale: float = 1.0) -> Tensor:
    return SoftArgmin(d_scale).forward(reg_volume)


def linear_interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Матрица (n_out, n_in) линейной интерполяции с выравниванием по центрам пикселей."""
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - t)
    np.add.at(m, (rows, i1), t)
    return m


def _apply_along(m: np.ndarray, x: Tensor, axis: int) -> Tensor:
    return np.moveaxis(np.tensordot(m, x, axes=([1], [axis])), 0, axis)


class TrilinearUpsample(Op):
    """(C, h, w, d) -> (C, H, W, D): сепарабельная линейная интерполяция по трём осям."""

    def __init__(self, out_shape: tuple[int, int, int]) -> None:
        self.out_shape = out_shape

    def forward(self, x: Tensor) -> Tensor:
        self.mats = [
            linear_interp_matrix(n_in, n_out).astype(x.dtype)
            for n_in, n_out in zip(x.shape[1:], self.out_shape)
        ]
        y = x
        for axis, m in enumerate(self.mats, 1):
            y = _apply_along(m, y, axis)
        return np.ascontiguousarray(y)

    def backward(self, grad_out: Tensor) -> tuple[Tensor]:
        g = grad_out
        for axis, m in enumerate(self.mats, 1):
            g = _apply_along(m.T, g, axis)
        return (np.ascontiguousarray(g),)
