"""
Нормализации регуляризатора объёма стоимости.

Все варианты сводятся к одному ядру ConditionedNorm: статистики батча всегда
безусловные, обусловлены только γ и β. Варианты отличаются тем, откуда
берутся поля γ, β:

  - bn3d           : γ_c, β_c на канал;
  - naive_cbn      : попиксельный MLP от валидной диспаратности;
  - ccvnorm_cat    : таблица на D̂ корзин, блок D×C на корзину;
  - ccvnorm_cont   : общий CNN-ствол по карте + 1×1 голова на слой;
  - hier_ccvnorm   : γ = φ(d)·g(L) + ψ(d), O(DC) параметров на слой.

Невалидные пиксели в табличных вариантах получают отдельные параметры
(gamma_invalid, beta_invalid), а в непрерывном маска идёт входом в ствол.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Any

import numpy as np

from .config import NetworkConfig, split_variant, CONDITIONINGS
from .errors import ConfigError, DataError, ShapeError
from .geometry import SparseDisparityMap, discretize_bins, downsample_sparse
from .numerics import ConvNd, Op, Relu, Tensor, batch_stats, default_dtype, unbroadcast

Params = dict[str, np.ndarray]

INIT_STD = 0.02


@dataclass(slots=True)
class NormStats:
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.1
    # статистики последнего батча (E_B[F], Var_B[F])
    mean: np.ndarray | None = None
    var: np.ndarray | None = None

    @classmethod
    def fresh(cls, channels: int, epsilon: float = 1e-5, momentum: float = 0.1) -> NormStats:
        dt = default_dtype()
        return cls(np.zeros(channels, dtype=dt), np.ones(channels, dtype=dt), epsilon, momentum)


class ConditionedNorm(Op):
    """
    F' = γ · (F − mean_c) / sqrt(var_c + ε) + β.

    γ, β — любые массивы, транслируемые к F в раскладке (C, *spatial)
    или (N, C, *spatial). В режиме обучения среднее/дисперсия — по всем осям,
    кроме канальной, и бегущие статистики обновляются на месте.
    """

    def __init__(self, stats: NormStats, training: bool = True, spatial_dims: int = 3) -> None:
        self.stats = stats
        self.training = training
        self.spatial_dims = spatial_dims

    def forward(self, x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
        c_axis = 1 if x.ndim == self.spatial_dims + 2 else 0
        axes = tuple(a for a in range(x.ndim) if a != c_axis)
        shape = [1] * x.ndim
        shape[c_axis] = -1
        st = self.stats
        if self.training:
            mean, var = batch_stats(x, axes)
            st.mean, st.var = mean.reshape(-1), var.reshape(-1)
            m = st.momentum
            st.running_mean[...] = (1 - m) * st.running_mean + m * st.mean
            st.running_var[...] = (1 - m) * st.running_var + m * st.var
        else:
            mean = st.running_mean.reshape(shape)
            var = st.running_var.reshape(shape)
        inv = 1.0 / np.sqrt(var + st.epsilon)
        xhat = (x - mean) * inv
        self.axes, self.inv, self.xhat = axes, inv, xhat
        self.gamma, self.beta_shape = gamma, np.shape(beta)
        self.n = x.size // x.shape[c_axis]
        return gamma * xhat + beta

    def backward(self, grad_out: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        g, xhat = grad_out, self.xhat
        dgamma = unbroadcast(g * xhat, np.shape(self.gamma))
        dbeta = unbroadcast(g, self.beta_shape)
        dxhat = g * self.gamma
        if self.training:
            s1 = dxhat.sum(axis=self.axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=self.axes, keepdims=True)
            dx = self.inv / self.n * (self.n * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * self.inv
        return dx, dgamma, dbeta


def bn3d(F: Tensor, stats: NormStats, gamma: Tensor, beta: Tensor, training: bool = True) -> Tensor:
    c = gamma.shape[0]
    return ConditionedNorm(stats, training, 3).forward(
        F, gamma.reshape(c, 1, 1, 1), beta.reshape(c, 1, 1, 1)
    )


class ApplyConditionedNorm(Op):
    """Обёртка ConditionedNorm для полей γ, β в раскладке [H, W, D, C]."""

    def __init__(self, stats: NormStats, training: bool = True) -> None:
        self.norm = ConditionedNorm(stats, training, 3)

    def forward(self, F: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
        if F.ndim != 4:
            raise ShapeError("apply_conditioned_norm", "rank", F.ndim, 4)
        c, h, w, d = F.shape
        for name, arr in (("gamma", gamma), ("beta", beta)):
            for dim, got, want in zip(("H", "W", "D", "C"), arr.shape, (h, w, d, c)):
                if got != want:
                    raise ShapeError("apply_conditioned_norm", f"{name}.{dim}", got, want)
            if arr.ndim != 4:
                raise ShapeError("apply_conditioned_norm", f"{name} rank", arr.ndim, 4)
        return self.norm.forward(F, np.moveaxis(gamma, -1, 0), np.moveaxis(beta, -1, 0))

    def backward(self, grad_out: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        dx, dg, db = self.norm.backward(grad_out)
        return dx, np.moveaxis(dg, 0, -1), np.moveaxis(db, 0, -1)


def apply_conditioned_norm(
    F: Tensor, stats: NormStats, gamma: Tensor, beta: Tensor, training: bool = True
) -> Tensor:
    return ApplyConditionedNorm(stats, training).forward(F, gamma, beta)


# --- таблицы параметров ---

def _normal(rng: np.random.Generator, shape: tuple[int, ...], mean: float = 0.0) -> np.ndarray:
    return (mean + INIT_STD * rng.standard_normal(shape)).astype(default_dtype())


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise DataError(f"conditioning table {name} contains NaN/Inf")


@dataclass(slots=True)
class ConditioningTable:
    """Категориальный CCVNorm: g_{c,d}, h_{c,d} по корзинам и ḡ, h̄ для невалидных."""

    gamma_table: np.ndarray  # [D̂, D, C]
    beta_table: np.ndarray   # [D̂, D, C]
    gamma_invalid: np.ndarray  # [D, C]
    beta_invalid: np.ndarray   # [D, C]

    @classmethod
    def init(cls, d_hat: int, levels: int, channels: int, rng: np.random.Generator) -> ConditioningTable:
        dt = default_dtype()
        return cls(
            gamma_table=_normal(rng, (d_hat, levels, channels), 1.0),
            beta_table=_normal(rng, (d_hat, levels, channels)),
            gamma_invalid=np.ones((levels, channels), dtype=dt),
            beta_invalid=np.zeros((levels, channels), dtype=dt),
        )

    def validate(self) -> None:
        if self.gamma_table.shape[0] < 2:
            raise ShapeError("ccvnorm_cat", "D̂", self.gamma_table.shape[0], ">= 2")
        for f in fields(self):
            _check_finite(f.name, getattr(self, f.name))
        if np.shares_memory(self.gamma_table, self.gamma_invalid):
            raise ConfigError("invalid-branch parameters must not alias the lookup table")

    def arrays(self) -> tuple[np.ndarray, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))

    def as_params(self, prefix: str) -> Params:
        return {f"{prefix}.{f.name}": getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_params(cls, params: Params, prefix: str) -> ConditioningTable:
        return cls(**{f.name: params[f"{prefix}.{f.name}"] for f in fields(cls)})


@dataclass(slots=True)
class HierTable:
    """HierCCVNorm: g_c, h_c по корзинам и пары φ, ψ по уровням диспаратности."""

    g_table: np.ndarray  # [D̂, C]
    h_table: np.ndarray  # [D̂, C]
    phi_g: np.ndarray    # [D, C]
    psi_g: np.ndarray
    phi_h: np.ndarray
    psi_h: np.ndarray
    gamma_invalid: np.ndarray  # [D, C]
    beta_invalid: np.ndarray

    @classmethod
    def init(cls, d_hat: int, levels: int, channels: int, rng: np.random.Generator) -> HierTable:
        dt = default_dtype()
        return cls(
            g_table=_normal(rng, (d_hat, channels), 1.0),
            h_table=_normal(rng, (d_hat, channels)),
            phi_g=_normal(rng, (levels, channels), 1.0),
            psi_g=_normal(rng, (levels, channels)),
            phi_h=_normal(rng, (levels, channels), 1.0),
            psi_h=_normal(rng, (levels, channels)),
            gamma_invalid=np.ones((levels, channels), dtype=dt),
            beta_invalid=np.zeros((levels, channels), dtype=dt),
        )

    def validate(self) -> None:
        if self.g_table.shape[0] < 2:
            raise ShapeError("hier_ccvnorm", "D̂", self.g_table.shape[0], ">= 2")
        for f in fields(self):
            _check_finite(f.name, getattr(self, f.name))

    def valid_branch_count(self) -> int:
        return sum(getattr(self, n).size for n in ("g_table", "h_table", "phi_g", "psi_g", "phi_h", "psi_h"))

    def arrays(self) -> tuple[np.ndarray, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))

    def as_params(self, prefix: str) -> Params:
        return {f"{prefix}.{f.name}": getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_params(cls, params: Params, prefix: str) -> HierTable:
        return cls(**{f.name: params[f"{prefix}.{f.name}"] for f in fields(cls)})


# --- производители полей γ, β ---

class CategoricalParams(Op):
    """Валидный пиксель -> строка таблицы своей корзины (блок D×C), иначе невалидная ветка."""

    def __init__(self, d_hat: int, d_max: float) -> None:
        self.d_hat, self.d_max = d_hat, d_max

    def forward(self, L: SparseDisparityMap, gamma_table, beta_table, gamma_invalid, beta_invalid):
        if gamma_table.shape[0] != self.d_hat:
            raise ShapeError("ccvnorm_cat", "D̂", gamma_table.shape[0], self.d_hat)
        if gamma_table.shape[1:] != gamma_invalid.shape:
            raise ShapeError("ccvnorm_cat", "D×C", gamma_invalid.shape, gamma_table.shape[1:])
        self.bins = discretize_bins(L.values, self.d_hat, self.d_max)
        self.valid = L.valid
        self.shapes = (gamma_table.shape, gamma_invalid.shape)
        v = L.valid[..., None, None]
        gamma = np.where(v, gamma_table[self.bins], gamma_invalid)
        beta = np.where(v, beta_table[self.bins], beta_invalid)
        return gamma, beta

    def backward(self, grad_out):
        dg, db = grad_out
        v, bins = self.valid, self.bins
        table_shape, inv_shape = self.shapes
        out = [None]
        for g in (dg, db):
            dt = np.zeros(table_shape, dtype=g.dtype)
            np.add.at(dt, bins[v], g[v])
            out.append(dt)
        out += [dg[~v].sum(axis=0).reshape(inv_shape), db[~v].sum(axis=0).reshape(inv_shape)]
        # порядок входов: L, gamma_table, beta_table, gamma_invalid, beta_invalid
        return out[0], out[1], out[2], out[3], out[4]


def ccvnorm_categorical_params(
    L: SparseDisparityMap, table: ConditioningTable, d_hat: int, d_max: float
) -> tuple[np.ndarray, np.ndarray]:
    return CategoricalParams(d_hat, d_max).forward(L, *table.arrays())


class HierParams(Op):
    """γ[h,w,d,c] = φ^g[d,c]·g[k,c] + ψ^g[d,c] для валидного пикселя с корзиной k."""

    def __init__(self, d_hat: int, d_max: float) -> None:
        self.d_hat, self.d_max = d_hat, d_max

    def forward(self, L: SparseDisparityMap, g_table, h_table, phi_g, psi_g, phi_h, psi_h,
                gamma_invalid, beta_invalid):
        if g_table.shape[0] != self.d_hat:
            raise ShapeError("hier_ccvnorm", "D̂", g_table.shape[0], self.d_hat)
        if phi_g.shape[1] != g_table.shape[1]:
            raise ShapeError("hier_ccvnorm", "C", phi_g.shape[1], g_table.shape[1])
        self.bins = discretize_bins(L.values, self.d_hat, self.d_max)
        self.valid = L.valid
        gk = g_table[self.bins][:, :, None, :]
        hk = h_table[self.bins][:, :, None, :]
        v = L.valid[..., None, None]
        gamma = np.where(v, phi_g * gk + psi_g, gamma_invalid)
        beta = np.where(v, phi_h * hk + psi_h, beta_invalid)
        self.cache = (g_table, h_table, phi_g, phi_h, gk, hk)
        return gamma, beta

    def backward(self, grad_out):
        dg, db = grad_out
        g_table, h_table, phi_g, phi_h, gk, hk = self.cache
        v, bins = self.valid, self.bins
        vm = v[..., None, None]
        res = []
        for grad, k, phi, table in ((dg, gk, phi_g, g_table), (db, hk, phi_h, h_table)):
            gv = grad * vm
            dphi = (gv * k).sum(axis=(0, 1))
            dpsi = gv.sum(axis=(0, 1))
            dk = (gv * phi).sum(axis=2)
            dtable = np.zeros_like(table)
            np.add.at(dtable, bins[v], dk[v])
            res.append((dtable, dphi, dpsi))
        (dgt, dphig, dpsig), (dht, dphih, dpsih) = res
        return (None, dgt, dht, dphig, dpsig, dphih, dpsih,
                dg[~v].sum(axis=0), db[~v].sum(axis=0))


def hierccvnorm_params(
    L: SparseDisparityMap, hier: HierTable, d_hat: int, d_max: float
) -> tuple[np.ndarray, np.ndarray]:
    return HierParams(d_hat, d_max).forward(L, *hier.arrays())


class NaiveCBNParams(Op):
    """
    Naive CBN: MLP (affine -> ReLU -> affine) от валидной диспаратности,
    приведённой к [0, 1] делением на d_max, в 2C значений. Поля постоянны по D.
    Невалидные пиксели получают безусловные γ, β слоя.
    """

    def __init__(self, d_max: float) -> None:
        self.d_max = d_max

    def forward(self, L: SparseDisparityMap, w1, b1, w2, b2, gamma, beta):
        c = gamma.shape[0]
        if w2.shape[0] != 2 * c:
            raise ShapeError("naive_cbn", "2C", w2.shape[0], 2 * c)
        s = (L.values / self.d_max)[..., None].astype(w1.dtype)
        pre = s @ w1.T + b1
        self.relu = Relu()
        hid = self.relu.forward(pre)
        out = hid @ w2.T + b2
        v = L.valid[..., None]
        self.cache = (s, hid, w2, L.valid, c)
        return np.where(v, out[..., :c], gamma), np.where(v, out[..., c:], beta)

    def backward(self, grad_out):
        dg, db = grad_out
        s, hid, w2, valid, c = self.cache
        v = valid[..., None]
        dout = np.concatenate([dg * v, db * v], axis=-1)
        dw2 = np.tensordot(dout, hid, axes=([0, 1], [0, 1]))
        db2 = dout.sum(axis=(0, 1))
        (dpre,) = self.relu.backward(dout @ w2)
        dw1 = np.tensordot(dpre, s, axes=([0, 1], [0, 1]))
        db1 = dpre.sum(axis=(0, 1))
        return None, dw1, db1, dw2, db2, dg[~valid].sum(axis=0), db[~valid].sum(axis=0)


def naive_cbn_params(
    L: SparseDisparityMap, mlp_weights: dict[str, np.ndarray], d_max: float
) -> tuple[np.ndarray, np.ndarray]:
    """mlp_weights: w1 [Hd,1], b1 [Hd], w2 [2C,Hd], b2 [2C], gamma [C], beta [C]."""
    w = mlp_weights
    return NaiveCBNParams(d_max).forward(L, w["w1"], w["b1"], w["w2"], w["b2"], w["gamma"], w["beta"])


def init_naive_cbn(channels: int, hidden: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    dt = default_dtype()
    b2 = np.concatenate([np.ones(channels), np.zeros(channels)]).astype(dt)
    return {
        "w1": he_normal(rng, (hidden, 1), 1),
        "b1": _normal(rng, (hidden,)),
        "w2": _normal(rng, (2 * channels, hidden)),
        "b2": b2,
        "gamma": np.ones(channels, dtype=dt),
        "beta": np.zeros(channels, dtype=dt),
    }


# --- энкодеры разреженной карты ---

def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(default_dtype())


def encoder_input(L: SparseDisparityMap, d_max: float) -> np.ndarray:
    """Вход энкодера: (2, H, W): диспаратность / d_max и маска валидности."""
    dt = default_dtype()
    return np.stack([L.values / d_max, L.valid]).astype(dt)


class ResidualEncoder:
    """
    Ствол: 3×3 conv (2 -> E) + ReLU, затем residual-блок из двух 3×3 conv
    с тождественным пропуском и ReLU на выходе.
    """

    def __init__(self, prefix: str, channels: int, d_max: float, params: Params) -> None:
        self.prefix = prefix
        self.channels = channels
        self.d_max = d_max
        self.params = params
        self.names = [f"{prefix}.{p}.{k}" for p in ("stem", "res1", "res2") for k in ("weight", "bias")]

    @staticmethod
    def count(channels: int, in_channels: int = 2) -> int:
        e = channels
        return (e * in_channels * 9 + e) + 2 * (e * e * 9 + e)

    def init_params(self, rng: np.random.Generator) -> None:
        e, dt = self.channels, default_dtype()
        for name, c_in in (("stem", 2), ("res1", e), ("res2", e)):
            self.params[f"{self.prefix}.{name}.weight"] = he_normal(rng, (e, c_in, 3, 3), c_in * 9)
            self.params[f"{self.prefix}.{name}.bias"] = np.zeros(e, dtype=dt)

    def _w(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        p = self.params
        return p[f"{self.prefix}.{name}.weight"], p[f"{self.prefix}.{name}.bias"]

    def forward(self, L: SparseDisparityMap) -> tuple[np.ndarray, list[Op]]:
        x = encoder_input(L, self.d_max)
        ops: list[Op] = [ConvNd(1, 1), Relu(), ConvNd(1, 1), Relu(), ConvNd(1, 1), Relu()]
        h0 = ops[1].forward(ops[0].forward(x, *self._w("stem")))
        h1 = ops[3].forward(ops[2].forward(h0, *self._w("res1")))
        out = ops[5].forward(h0 + ops[4].forward(h1, *self._w("res2")))
        return out, ops

    def backward(self, grad: np.ndarray, ops: list[Op], grads: Params) -> None:
        def acc(name: str, dw: np.ndarray, db: np.ndarray) -> None:
            for key, g in ((f"{self.prefix}.{name}.weight", dw), (f"{self.prefix}.{name}.bias", db)):
                grads[key] = grads[key] + g if key in grads else g

        (g,) = ops[5].backward(grad)
        dh1, dw, db = ops[4].backward(g)
        acc("res2", dw, db)
        (dh1,) = ops[3].backward(dh1)
        dh0, dw, db = ops[2].backward(dh1)
        acc("res1", dw, db)
        (dh0,) = ops[1].backward(dh0 + g)
        _, dw, db = ops[0].backward(dh0)
        acc("stem", dw, db)


class ContinuousEncoder:
    """Непрерывный CCVNorm: общий ствол на все слои и своя 1×1 голова (E -> 2·D·C) на слой."""

    def __init__(self, channels: int, d_max: float, params: Params, prefix: str = "ccvnorm") -> None:
        self.prefix = prefix
        self.params = params
        self.trunk = ResidualEncoder(f"{prefix}.encoder", channels, d_max, params)
        self.heads: dict[int, tuple[int, int]] = {}

    def head_names(self, layer_id: int) -> tuple[str, str]:
        return f"{self.prefix}.layer{layer_id}.head.weight", f"{self.prefix}.layer{layer_id}.head.bias"

    def register_head(self, layer_id: int, levels: int, channels: int, rng: np.random.Generator | None = None) -> None:
        self.heads[layer_id] = (levels, channels)
        if rng is None:
            return
        wn, bn = self.head_names(layer_id)
        n = levels * channels
        e = self.trunk.channels
        self.params[wn] = _normal(rng, (2 * n, e, 1, 1))
        self.params[bn] = np.concatenate([np.ones(n), np.zeros(n)]).astype(default_dtype())

    def encode(self, L: SparseDisparityMap) -> tuple[np.ndarray, list[Op]]:
        return self.trunk.forward(L)

    def head_forward(self, layer_id: int, feat: np.ndarray) -> tuple[np.ndarray, np.ndarray, ConvNd]:
        if layer_id not in self.heads:
            raise ConfigError(f"no conditioning head registered for layer {layer_id}")
        levels, channels = self.heads[layer_id]
        wn, bn = self.head_names(layer_id)
        op = ConvNd(1, 0)
        out = op.forward(feat, self.params[wn], self.params[bn])
        h, w = feat.shape[1:]
        out = out.reshape(2, levels, channels, h, w).transpose(0, 3, 4, 1, 2)
        return np.ascontiguousarray(out[0]), np.ascontiguousarray(out[1]), op

    def head_backward(self, layer_id: int, dgamma: np.ndarray, dbeta: np.ndarray, op: ConvNd,
                      grads: Params) -> np.ndarray:
        h, w = dgamma.shape[:2]
        g = np.stack([dgamma, dbeta]).transpose(0, 3, 4, 1, 2).reshape(-1, h, w)
        dfeat, dw, db = op.backward(g)
        for key, arr in zip(self.head_names(layer_id), (dw, db)):
            grads[key] = grads[key] + arr if key in grads else arr
        return dfeat


def ccvnorm_continuous_params(
    L: SparseDisparityMap,
    encoder: ContinuousEncoder,
    layer_id: int,
    size: tuple[int, int] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    if layer_id not in encoder.heads:
        raise ConfigError(f"no conditioning head registered for layer {layer_id}")
    if size is not None and (L.height, L.width) != tuple(size):
        L = downsample_sparse(L, L.height // size[0])
    feat, _ = encoder.encode(L)
    gamma, beta, _ = encoder.head_forward(layer_id, feat)
    return gamma, beta


def feature_concat_encode(L: SparseDisparityMap, encoder: ResidualEncoder, levels: int) -> np.ndarray:
    """Карта признаков LiDAR (C_l, H, W), размноженная вдоль D: (C_l, H, W, levels)."""
    feat, _ = encoder.forward(L)
    return np.repeat(feat[..., None], levels, axis=-1)


# --- учёт параметров ---

def param_count(
    variant: str,
    C: int,
    D: int,
    d_hat: int,
    n_layers: int,
    encoder_channels: int = 8,
    mlp_hidden: int = 16,
    concat_channels: int = 8,
) -> int:
    """Число параметров механизма обусловливания (без базовой сети)."""
    if variant in CONDITIONINGS:
        kind = variant
    else:
        try:
            kind = split_variant(variant)[1]
        except ConfigError:
            raise ConfigError(f"unknown variant {variant!r}") from None
    if min(C, D, d_hat, n_layers) <= 0:
        raise ValueError("param_count arguments must be positive")
    if kind == "none":
        return 0
    if kind == "ccvnorm_cat":
        return n_layers * (2 * d_hat * D * C + 2 * D * C)
    if kind == "hier_ccvnorm":
        return n_layers * (2 * d_hat * C + 4 * D * C + 2 * D * C)
    if kind == "ccvnorm_cont":
        return n_layers * 2 * D * C * (encoder_channels + 1) + ResidualEncoder.count(encoder_channels)
    if kind == "naive_cbn":
        return n_layers * (2 * mlp_hidden + 2 * C * mlp_hidden + 2 * C + 2 * C)
    if kind == "feature_concat":
        return ResidualEncoder.count(concat_channels)
    raise ConfigError(f"unknown variant {variant!r}")


# --- слой нормализации внутри сети ---

@dataclass(slots=True)
class ConditioningInput:
    """Что нужно нормализациям регуляризатора на один проход вперёд."""

    training: bool
    # карта L^s в разрешении объёма (диспаратности уже поделены на шаг)
    sparse: SparseDisparityMap | None = None
    # признаки общего ствола непрерывного варианта и накопитель их градиента
    enc_feat: np.ndarray | None = None
    enc_grad: np.ndarray | None = None


class BatchNormLayer:
    """Обычная BN: γ_c, β_c и бегущие статистики в общих словарях params/buffers."""

    def __init__(self, prefix: str, channels: int, spatial_dims: int, params: Params, buffers: Params,
                 eps: float = 1e-5, momentum: float = 0.1, shift: bool = True) -> None:
        self.prefix, self.channels, self.spatial_dims = prefix, channels, spatial_dims
        self.shift = shift
        self.params, self.buffers = params, buffers
        self.eps, self.momentum = eps, momentum

    def init_params(self, rng: np.random.Generator) -> None:
        dt, c = default_dtype(), self.channels
        self.params[f"{self.prefix}.gamma"] = np.ones(c, dtype=dt)
        if self.shift:
            self.params[f"{self.prefix}.beta"] = np.zeros(c, dtype=dt)
        self.init_buffers()

    def init_buffers(self) -> None:
        dt, c = default_dtype(), self.channels
        self.buffers[f"{self.prefix}.running_mean"] = np.zeros(c, dtype=dt)
        self.buffers[f"{self.prefix}.running_var"] = np.ones(c, dtype=dt)

    def stats(self) -> NormStats:
        b = self.buffers
        return NormStats(b[f"{self.prefix}.running_mean"], b[f"{self.prefix}.running_var"],
                         self.eps, self.momentum)

    def forward(self, x: np.ndarray, ctx: ConditioningInput) -> tuple[np.ndarray, ConditionedNorm]:
        shape = (self.channels,) + (1,) * self.spatial_dims
        op = ConditionedNorm(self.stats(), ctx.training, self.spatial_dims)
        gamma = self.params[f"{self.prefix}.gamma"].reshape(shape)
        beta = self.params[f"{self.prefix}.beta"].reshape(shape) if self.shift else np.zeros_like(gamma)
        out = op.forward(x, gamma, beta)
        return out, op

    def backward(self, grad: np.ndarray, op: ConditionedNorm, grads: Params,
                 ctx: ConditioningInput) -> np.ndarray:
        dx, dg, db = op.backward(grad)
        pairs = [(f"{self.prefix}.gamma", dg)] + ([(f"{self.prefix}.beta", db)] if self.shift else [])
        for key, g in pairs:
            g = g.reshape(-1)
            grads[key] = grads[key] + g if key in grads else g
        return dx


class ConditionedNormLayer(BatchNormLayer):
    """Нормализация слоя регуляризатора с γ, β от LiDAR (naive_cbn / ccvnorm_* / hier)."""

    def __init__(self, kind: str, layer_id: int, channels: int, cfg: NetworkConfig, params: Params,
                 buffers: Params, encoder: ContinuousEncoder | None = None) -> None:
        super().__init__(f"reg.layer{layer_id}.norm", channels, 3, params, buffers,
                         cfg.norm_eps, cfg.momentum)
        if kind not in ("naive_cbn", "ccvnorm_cat", "ccvnorm_cont", "hier_ccvnorm"):
            raise ConfigError(f"layer {layer_id}: {kind!r} is not a conditioned normalization")
        if kind == "ccvnorm_cont" and encoder is None:
            raise ConfigError(f"layer {layer_id}: continuous CCVNorm needs a registered encoder")
        self.kind = kind
        self.layer_id = layer_id
        self.table_prefix = f"ccvnorm.layer{layer_id}"
        self.levels = cfg.levels
        self.d_hat = cfg.bins
        # диспаратности карты в разрешении объёма лежат в [0, levels)
        self.scale = float(cfg.levels)
        self.mlp_hidden = cfg.mlp_hidden
        self.encoder = encoder

    def init_params(self, rng: np.random.Generator) -> None:
        self.init_buffers()
        c, d = self.channels, self.levels
        if self.kind == "ccvnorm_cat":
            self.params.update(ConditioningTable.init(self.d_hat, d, c, rng).as_params(self.table_prefix))
        elif self.kind == "hier_ccvnorm":
            self.params.update(HierTable.init(self.d_hat, d, c, rng).as_params(self.table_prefix))
        elif self.kind == "naive_cbn":
            for k, v in init_naive_cbn(c, self.mlp_hidden, rng).items():
                self.params[f"{self.table_prefix}.{k}"] = v
        else:
            self.encoder.register_head(self.layer_id, d, c, rng)

    def register(self) -> None:
        """Зарегистрировать голову без инициализации (перед загрузкой чекпойнта)."""
        if self.kind == "ccvnorm_cont":
            self.encoder.register_head(self.layer_id, self.levels, self.channels)

    def param_names(self) -> list[str]:
        p = self.table_prefix
        if self.kind == "ccvnorm_cat":
            return [f"{p}.{f.name}" for f in fields(ConditioningTable)]
        if self.kind == "hier_ccvnorm":
            return [f"{p}.{f.name}" for f in fields(HierTable)]
        if self.kind == "naive_cbn":
            return [f"{p}.{k}" for k in ("w1", "b1", "w2", "b2", "gamma", "beta")]
        return list(self.encoder.head_names(self.layer_id))

    def _producer(self) -> Op:
        if self.kind == "ccvnorm_cat":
            return CategoricalParams(self.d_hat, self.scale)
        if self.kind == "hier_ccvnorm":
            return HierParams(self.d_hat, self.scale)
        return NaiveCBNParams(self.scale)

    def forward(self, x: np.ndarray, ctx: ConditioningInput) -> tuple[np.ndarray, Any]:
        if ctx.sparse is None:
            raise ConfigError(f"layer {self.layer_id}: conditioned normalization needs a LiDAR map")
        _, h, w, d = x.shape
        if (ctx.sparse.height, ctx.sparse.width) != (h, w):
            raise ShapeError(f"reg.layer{self.layer_id}", "H×W of LiDAR map",
                             (ctx.sparse.height, ctx.sparse.width), (h, w))
        if self.kind == "ccvnorm_cont":
            gamma, beta, producer = self.encoder.head_forward(self.layer_id, ctx.enc_feat)
        else:
            producer = self._producer()
            gamma, beta = producer.forward(ctx.sparse, *[self.params[n] for n in self.param_names()])
            if self.kind == "naive_cbn":
                gamma = np.broadcast_to(gamma[:, :, None, :], (h, w, d, self.channels))
                beta = np.broadcast_to(beta[:, :, None, :], (h, w, d, self.channels))
        apply = ApplyConditionedNorm(self.stats(), ctx.training)
        return apply.forward(x, gamma, beta), (producer, apply)

    def backward(self, grad: np.ndarray, cache: Any, grads: Params, ctx: ConditioningInput) -> np.ndarray:
        producer, apply = cache
        dx, dgamma, dbeta = apply.backward(grad)
        if self.kind == "ccvnorm_cont":
            dfeat = self.encoder.head_backward(self.layer_id, dgamma, dbeta, producer, grads)
            ctx.enc_grad = dfeat if ctx.enc_grad is None else ctx.enc_grad + dfeat
            return dx
        if self.kind == "naive_cbn":
            dgamma, dbeta = dgamma.sum(axis=2), dbeta.sum(axis=2)
        pgrads = producer.backward((dgamma, dbeta))[1:]
        for name, g in zip(self.param_names(), pgrads):
            grads[name] = grads[name] + g if name in grads else g
        return dx
