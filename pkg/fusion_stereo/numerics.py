"""
Дифференцируемая числовая основа: плотные массивы numpy и примитивы сети.

Каждый примитив — объект Op: forward(*inputs) кэширует нужное, backward(grad_out)
возвращает градиенты по всем входам (None для недифференцируемых: маски, карты).
Общего графа нет: сеть сцепляет backward вручную в обратном порядке.

Свёртки считаются как кросс-корреляция (ядро не переворачивается), раскладка channel-major:
(C, *spatial) или (N, C, *spatial) с ведущей осью батча.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from typing import Any, Sequence, TypeAlias
import logging

import numpy as np

from .errors import DataError, ShapeError

logger = logging.getLogger(__name__)

Tensor: TypeAlias = np.ndarray

_DTYPES = {"f64": np.float64, "f32": np.float32}
_dtype: type[np.floating] = np.float64


def set_precision(precision: str) -> None:
    global _dtype
    if precision not in _DTYPES:
        raise ValueError(f"unknown precision {precision!r}")
    _dtype = _DTYPES[precision]


def default_dtype() -> type[np.floating]:
    return _dtype


def as_tensor(x: Any) -> Tensor:
    return np.ascontiguousarray(x, dtype=_dtype)


def unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Свернуть градиент суммированием обратно к форме, из которой был broadcast."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Op:
    """Базовый дифференцируемый оператор."""

    def forward(self, *inputs: Any) -> Any:
        raise NotImplementedError

    def backward(self, grad_out: Any) -> tuple[Tensor | None, ...]:
        raise NotImplementedError


# --- свёртки ---

_SPATIAL_NAMES = {2: ("H", "W"), 3: ("H", "W", "D")}

class ConvNd(Op):
    """2-D/3-D свёртка; размерность берётся из ядра (C_out, C_in, *k). Смещение необязательно."""

    def __init__(self, stride: int = 1, pad: int = 0) -> None:
        if stride < 1:
            raise ValueError(f"stride must be >= 1, got {stride}")
        if pad < 0:
            raise ValueError(f"pad must be >= 0, got {pad}")
        self.stride = stride
        self.pad = pad

    @property
    def name(self) -> str:
        return f"conv{self._nd}d"

    def _check(self, x: Tensor, w: Tensor, b: Tensor | None) -> None:
        nd = w.ndim - 2
        if nd not in _SPATIAL_NAMES:
            raise ShapeError("conv", "kernel rank", w.ndim, "4 or 5")
        self._nd = nd
        if x.ndim not in (nd + 1, nd + 2):
            raise ShapeError(self.name, "input rank", x.ndim, f"{nd + 1} or {nd + 2}")
        c_in = x.shape[-nd - 1]
        if c_in != w.shape[1]:
            raise ShapeError(self.name, "C_in", c_in, w.shape[1])
        if b is not None and b.shape != (w.shape[0],):
            raise ShapeError(self.name, "C_out (bias)", b.shape, (w.shape[0],))
        for name, n, k in zip(_SPATIAL_NAMES[nd], x.shape[-nd:], w.shape[2:]):
            if n + 2 * self.pad < k:
                raise ShapeError(self.name, name, n + 2 * self.pad, f">= kernel {k}")

    def forward(self, x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
        self._check(x, w, b)
        nd = self._nd
        self.batched = x.ndim == nd + 2
        xb = x if self.batched else x[None]
        p, s = self.pad, self.stride
        xp = np.pad(xb, [(0, 0), (0, 0)] + [(p, p)] * nd) if p else xb
        out_sp = tuple((n - k) // s + 1 for n, k in zip(xp.shape[2:], w.shape[2:]))
        out = np.zeros((xb.shape[0], w.shape[0]) + out_sp, dtype=np.result_type(x, w))
        for offs in product(*(range(k) for k in w.shape[2:])):
            patch = xp[self._window(offs, out_sp)]
            wk = w[(slice(None), slice(None)) + offs]
            out += np.moveaxis(np.tensordot(patch, wk, axes=([1], [1])), -1, 1)
        if b is not None:
            out += b.reshape((1, -1) + (1,) * nd)
        self.xp, self.w, self.in_shape, self.out_sp = xp, w, xb.shape, out_sp
        self.has_bias = b is not None
        return out if self.batched else out[0]

    def _window(self, offs: tuple[int, ...], out_sp: tuple[int, ...]) -> tuple[slice, ...]:
        s = self.stride
        return (slice(None), slice(None)) + tuple(
            slice(o, o + s * (n - 1) + 1, s) for o, n in zip(offs, out_sp)
        )

    def backward(self, grad_out: Tensor) -> tuple[Tensor, Tensor, Tensor | None]:
        g = grad_out if self.batched else grad_out[None]
        nd = self._nd
        red = (0,) + tuple(range(2, 2 + nd))
        dxp = np.zeros_like(self.xp)
        dw = np.zeros_like(self.w)
        for offs in product(*(range(k) for k in self.w.shape[2:])):
            win = self._window(offs, self.out_sp)
            patch = self.xp[win]
            dw[(slice(None), slice(None)) + offs] = np.tensordot(g, patch, axes=(red, red))
            wk = self.w[(slice(None), slice(None)) + offs]
            dxp[win] += np.moveaxis(np.tensordot(g, wk, axes=([1], [0])), -1, 1)
        db = g.sum(axis=red) if self.has_bias else None
        p = self.pad
        dx = dxp[(slice(None), slice(None)) + (slice(p, -p),) * nd] if p else dxp
        dx = np.ascontiguousarray(dx)
        return (dx if self.batched else dx[0]), dw, db


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    if w.ndim != 4:
        raise ShapeError("conv2d", "kernel rank", w.ndim, 4)
    return ConvNd(stride, pad).forward(x, w, b)


def conv3d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    if w.ndim != 5:
        raise ShapeError("conv3d", "kernel rank", w.ndim, 5)
    return ConvNd(stride, pad).forward(x, w, b)


# --- редукции и поэлементные операции ---

def batch_stats(x: Tensor, reduce_axes: Sequence[int]) -> tuple[Tensor, Tensor]:
    """Среднее и популяционная (1/N) дисперсия по reduce_axes; свёрнутые оси сохраняются как 1."""
    axes = tuple(sorted({a % x.ndim for a in reduce_axes}))
    if not axes:
        raise ValueError("batch_stats: reduce_axes must be non-empty")
    mean = x.mean(axis=axes, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=axes, keepdims=True)
    return mean, var


def softmax_neg(cost: Tensor, axis: int = -1) -> Tensor:
    """Веса soft-argmin: softmax(-cost) со сдвигом на максимум для устойчивости."""
    z = -np.asarray(cost)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


class SoftmaxNeg(Op):
    def __init__(self, axis: int = -1) -> None:
        self.axis = axis

    def forward(self, cost: Tensor) -> Tensor:
        self.w = softmax_neg(cost, self.axis)
        return self.w

    def backward(self, grad_out: Tensor) -> tuple[Tensor]:
        w = self.w
        return (-(w * (grad_out - (grad_out * w).sum(axis=self.axis, keepdims=True))),)


class Relu(Op):
    def forward(self, x: Tensor) -> Tensor:
        self.mask = x > 0
        return x * self.mask

    def backward(self, grad_out: Tensor) -> tuple[Tensor]:
        return (grad_out * self.mask,)


class L1Loss(Op):
    """Σ mask·|pred − target| / Σ mask."""

    def forward(self, pred: Tensor, target: Tensor, mask: Tensor) -> Tensor:
        if pred.shape != target.shape:
            raise ShapeError("l1_loss", "target", target.shape, pred.shape)
        if mask.shape != pred.shape:
            raise ShapeError("l1_loss", "mask", mask.shape, pred.shape)
        m = np.asarray(mask, dtype=pred.dtype)
        n = m.sum()
        if n == 0:
            raise DataError("no supervised pixels")
        diff = pred - target
        self.sign, self.m, self.n = np.sign(diff) * m, m, n
        return np.asarray((np.abs(diff) * m).sum() / n)

    def backward(self, grad_out: Tensor) -> tuple[Tensor, Tensor, None]:
        g = np.asarray(grad_out) * self.sign / self.n
        return g, -g, None


def l1_loss(pred: Tensor, target: Tensor, mask: Tensor) -> float:
    return float(L1Loss().forward(pred, target, mask))


# --- проверка градиентов ---

@dataclass(slots=True)
class GradCheckReport:
    max_relative_error: float
    n_checked: int
    # (номер входа, индекс элемента) точек, где обнаружен излом
    flagged: list[tuple[int, tuple[int, ...]]] = field(default_factory=list)


def _as_tuple(x: Any) -> tuple[Any, ...]:
    return x if isinstance(x, tuple) else (x,)


def gradient_check_report(
    op: Op,
    inputs: Sequence[Any],
    epsilon: float = 1e-5,
    tolerance: float = 1e-5,
    seed: int = 0,
) -> GradCheckReport:
    """
    Сравнить backward с центральной конечной разностью по каждому элементу
    каждого вещественного входа.

    Выход проецируется на фиксированный случайный котангенс R, так что
    проверяется скаляр Σ out·R. Разность выходов берётся до проекции:
    незатронутые элементы дают ровно ноль и не добавляют шума округления.
    Точки с асимметрией односторонних разностей > 10·tolerance помечаются
    как недифференцируемые и в максимум не входят.
    """
    args = [x.copy() if isinstance(x, np.ndarray) else x for x in inputs]
    targets = [i for i, x in enumerate(args) if isinstance(x, np.ndarray) and x.dtype.kind == "f"]
    for i in targets:
        if args[i].dtype != np.float64:
            raise ValueError("gradient_check requires float64 inputs")

    out = op.forward(*args)
    base = [np.array(o, copy=True) for o in _as_tuple(out)]
    rng = np.random.default_rng(seed)
    cot = [rng.standard_normal(o.shape) for o in base]
    grads = _as_tuple(op.backward(tuple(cot) if isinstance(out, tuple) else cot[0]))

    def probe(i: int, idx: tuple[int, ...], delta: float) -> float:
        x = args[i]
        old = x[idx]
        x[idx] = old + delta
        try:
            o = _as_tuple(op.forward(*args))
        finally:
            x[idx] = old
        return sum(float(np.sum((oo - bb) * c)) for oo, bb, c in zip(o, base, cot))

    report = GradCheckReport(0.0, 0)
    for i in targets:
        if i >= len(grads) or grads[i] is None:
            continue
        analytic = np.asarray(grads[i])
        for idx in np.ndindex(args[i].shape):
            up, down = probe(i, idx, epsilon), probe(i, idx, -epsilon)
            fwd, bwd = up / epsilon, -down / epsilon
            if abs(fwd - bwd) / max(abs(fwd), abs(bwd), 1.0) > 10 * tolerance:
                report.flagged.append((i, idx))
                continue
            numeric = (up - down) / (2 * epsilon)
            a = float(analytic[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            report.max_relative_error = max(report.max_relative_error, rel)
            report.n_checked += 1
    if report.flagged:
        logger.warning(
            "gradient_check flagged=%d non-differentiable points (op=%s)",
            len(report.flagged), type(op).__name__,
        )
    return report


def gradient_check(
    op: Op,
    inputs: Sequence[Any],
    epsilon: float = 1e-5,
    tolerance: float = 1e-5,
    seed: int = 0,
) -> float:
    return gradient_check_report(op, inputs, epsilon, tolerance, seed).max_relative_error
