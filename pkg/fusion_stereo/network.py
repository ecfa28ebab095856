"""
GC-Net-lite: Input Fusion, сиамский 2-D экстрактор признаков, объём стоимости,
3-D регуляризатор с подключаемым обусловливанием и soft-argmin.

Параметры и буферы сети живут в двух плоских словарях имя -> массив
(params, buffers); слои держат ссылки на них. Проход вперёд возвращает
(выход, кэш), обратный — накапливает градиенты в словарь grads.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any, Sequence
import logging

import numpy as np

from .checkpoint import Checkpoint, is_buffer
from .conditioning import (
    BatchNormLayer,
    ConditionedNormLayer,
    ConditioningInput,
    ContinuousEncoder,
    ResidualEncoder,
    he_normal,
    param_count,
)
from .config import INVALID_FILL, NetworkConfig, config_to_dict
from .cost_volume import BuildCostVolume, SoftArgmin, TrilinearUpsample
from .errors import ConfigError, DataError, ShapeError
from .geometry import CameraCalibration, SparseDisparityMap, downsample_sparse
from .numerics import ConvNd, Op, Relu, Tensor, default_dtype

logger = logging.getLogger(__name__)

CONDITIONED_KINDS = ("naive_cbn", "ccvnorm_cat", "ccvnorm_cont", "hier_ccvnorm")


@dataclass(slots=True)
class StereoSample:
    left_rgb: np.ndarray   # (3, H, W) в [0, 1]
    right_rgb: np.ndarray
    lidar_left: SparseDisparityMap
    lidar_right: SparseDisparityMap
    gt_disparity: np.ndarray  # (H, W)
    gt_valid: np.ndarray      # (H, W) bool
    calib: CameraCalibration | None = None
    name: str = ""

    def __post_init__(self) -> None:
        self.gt_valid = np.asarray(self.gt_valid, dtype=bool)
        h, w = self.gt_disparity.shape
        for what, shape in (
            ("left_rgb", self.left_rgb.shape[1:]),
            ("right_rgb", self.right_rgb.shape[1:]),
            ("lidar_left", (self.lidar_left.height, self.lidar_left.width)),
            ("lidar_right", (self.lidar_right.height, self.lidar_right.width)),
            ("gt_valid", self.gt_valid.shape),
        ):
            if tuple(shape) != (h, w):
                raise DataError(f"sample {self.name or '<unnamed>'}: {what} extent {tuple(shape)} != {(h, w)}")
        if self.left_rgb.shape[0] != 3 or self.right_rgb.shape[0] != 3:
            raise DataError(f"sample {self.name or '<unnamed>'}: images must have 3 channels")

    @property
    def height(self) -> int:
        return self.gt_disparity.shape[0]

    @property
    def width(self) -> int:
        return self.gt_disparity.shape[1]

    def crop(self, top: int, left: int, height: int, width: int) -> StereoSample:
        sl = (slice(top, top + height), slice(left, left + width))
        return StereoSample(
            left_rgb=self.left_rgb[(slice(None),) + sl],
            right_rgb=self.right_rgb[(slice(None),) + sl],
            lidar_left=self.lidar_left.crop(top, left, height, width),
            lidar_right=self.lidar_right.crop(top, left, height, width),
            gt_disparity=self.gt_disparity[sl],
            gt_valid=self.gt_valid[sl],
            calib=self.calib.cropped(top, left, height, width) if self.calib else None,
            name=self.name,
        )

    def with_lidar(self, left: SparseDisparityMap, right: SparseDisparityMap) -> StereoSample:
        return replace(self, lidar_left=left, lidar_right=right)


def input_fusion(rgb: np.ndarray, sparse: SparseDisparityMap, d_max: float) -> np.ndarray:
    """(3, H, W) + L^s -> (4, H, W); четвёртый канал — диспаратность / d_max."""
    if rgb.shape[1:] != (sparse.height, sparse.width):
        raise ShapeError("input_fusion", "H×W", (sparse.height, sparse.width), rgb.shape[1:])
    extra = np.where(sparse.valid, sparse.values, INVALID_FILL) / d_max
    return np.concatenate([rgb, extra[None].astype(rgb.dtype)], axis=0)


class StereoNet:
    def __init__(self, cfg: NetworkConfig) -> None:
        cfg.validate()
        self.cfg = cfg
        self.kind = cfg.conditioning
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

        c = cfg.feature_channels
        in_ch = 4 if cfg.input_fusion else 3
        self.feature_blocks: list[tuple[str, int, int, int, int, BatchNormLayer]] = []
        for i in range(1, cfg.feature_blocks + 1):
            # первый блок единственный со страйдом
            k, stride, pad = (5, cfg.downsample, 2) if i == 1 else (3, 1, 1)
            c_in = in_ch if i == 1 else c
            norm = BatchNormLayer(f"feat.block{i}.norm", c, 2, self.params, self.buffers,
                                  cfg.norm_eps, cfg.momentum)
            self.feature_blocks.append((f"feat.block{i}.conv", c_in, k, stride, pad, norm))

        self.encoder: ContinuousEncoder | None = None
        self.concat_encoder: ResidualEncoder | None = None
        if self.kind == "ccvnorm_cont":
            self.encoder = ContinuousEncoder(cfg.encoder_channels, cfg.levels, self.params)
        elif self.kind == "feature_concat":
            self.concat_encoder = ResidualEncoder("fconcat.encoder", cfg.concat_channels, cfg.levels,
                                                  self.params)

        c_in = 2 * c + (cfg.concat_channels if self.concat_encoder else 0)
        self.reg_layers: list[tuple[str, int, int, BatchNormLayer]] = []
        for i, c_out in enumerate(cfg.reg_channels, 1):
            if self.kind in CONDITIONED_KINDS and i in cfg.conditioned_layer_ids:
                norm: BatchNormLayer = ConditionedNormLayer(
                    self.kind, i, c_out, cfg, self.params, self.buffers, self.encoder
                )
            else:
                # soft-argmin не видит общего сдвига стоимостей: у последнего слоя нет β
                norm = BatchNormLayer(f"reg.layer{i}.norm", c_out, 3, self.params, self.buffers,
                                      cfg.norm_eps, cfg.momentum, shift=i < len(cfg.reg_channels))
            self.reg_layers.append((f"reg.layer{i}.conv", c_in, c_out, norm))
            c_in = c_out

    # --- параметры ---

    def init_params(self, seed: int = 0) -> StereoNet:
        rng = np.random.default_rng(seed)
        c = self.cfg.feature_channels
        for prefix, c_in, k, _, _, norm in self.feature_blocks:
            self.params[f"{prefix}.weight"] = he_normal(rng, (c, c_in, k, k), c_in * k * k)
            norm.init_params(rng)
        if self.encoder is not None:
            self.encoder.trunk.init_params(rng)
        if self.concat_encoder is not None:
            self.concat_encoder.init_params(rng)
        for prefix, c_in, c_out, norm in self.reg_layers:
            self.params[f"{prefix}.weight"] = he_normal(rng, (c_out, c_in, 3, 3, 3), c_in * 27)
            norm.init_params(rng)
        return self

    def state(self) -> dict[str, np.ndarray]:
        return {**self.params, **self.buffers}

    def meta(self) -> dict[str, Any]:
        return {"network": config_to_dict(self.cfg), "variant": self.cfg.variant}

    def load_state(self, tensors: dict[str, np.ndarray]) -> StereoNet:
        """Заполнить сеть из словаря тензоров; набор имён и формы должны совпасть точно."""
        expected = StereoNet(self.cfg).init_params(0).state()
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        if missing or extra:
            raise DataError(f"checkpoint does not match variant {self.cfg.variant!r}: "
                            f"missing={missing[:5]} unexpected={extra[:5]}")
        dt = default_dtype()
        for name, ref in expected.items():
            arr = np.asarray(tensors[name], dtype=dt)
            if arr.shape != ref.shape:
                raise DataError(f"checkpoint entry {name!r} has shape {arr.shape}, expected {ref.shape}")
            target = self.buffers if is_buffer(name) else self.params
            target[name] = arr.copy()
        for *_, norm in self.reg_layers:
            if isinstance(norm, ConditionedNormLayer):
                norm.register()
        return self

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> StereoNet:
        try:
            cfg = NetworkConfig()
            for k, v in ckpt.meta["network"].items():
                setattr(cfg, k, tuple(v) if isinstance(v, list) else v)
        except (KeyError, AttributeError, TypeError) as e:
            raise DataError("checkpoint metadata has no network config") from e
        return cls(cfg).load_state(ckpt.tensors)

    def conditioning_param_names(self) -> list[str]:
        return sorted(n for n in self.params if n.startswith(("ccvnorm.", "fconcat.")))

    def expected_conditioning_params(self) -> int:
        """Сумма формул param_count по слоям (у слоёв разное число каналов C)."""
        cfg, kind = self.cfg, self.kind
        kw = dict(encoder_channels=cfg.encoder_channels, mlp_hidden=cfg.mlp_hidden,
                  concat_channels=cfg.concat_channels)
        if kind == "none":
            return 0
        if kind == "feature_concat":
            return param_count(kind, 1, cfg.levels, cfg.bins, 1, **kw)
        shared = ResidualEncoder.count(cfg.encoder_channels) if kind == "ccvnorm_cont" else 0
        total = shared
        for *_, c_out, norm in self.reg_layers:
            if isinstance(norm, ConditionedNormLayer):
                total += param_count(kind, c_out, cfg.levels, cfg.bins, 1, **kw) - shared
        return total

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    # --- стадии ---

    def extract_features(self, x: Tensor, training: bool = True) -> tuple[Tensor, list[Any]]:
        """(C_in, H, W) или (N, C_in, H, W) -> признаки с шагом downsample."""
        cache = []
        ctx = ConditioningInput(training)
        for prefix, _, _, stride, pad, norm in self.feature_blocks:
            conv, relu = ConvNd(stride, pad), Relu()
            x = conv.forward(x, self.params[f"{prefix}.weight"])
            x, norm_op = norm.forward(x, ctx)
            x = relu.forward(x)
            cache.append((prefix, conv, norm, norm_op, relu))
        return x, cache

    def extract_features_backward(self, grad: Tensor, cache: list[Any], grads: dict[str, np.ndarray]) -> Tensor:
        ctx = ConditioningInput(True)
        for prefix, conv, norm, norm_op, relu in reversed(cache):
            (grad,) = relu.backward(grad)
            grad = norm.backward(grad, norm_op, grads, ctx)
            grad, dw, _ = conv.backward(grad)
            _accumulate(grads, f"{prefix}.weight", dw)
        return grad

    def regularize(
        self, volume: Tensor, lidar: SparseDisparityMap | None, training: bool = True
    ) -> tuple[Tensor, dict[str, Any]]:
        """(2C, h, w, D) -> (1, h, w, D). Карта L^s приводится к разрешению объёма."""
        _, h, w, d = volume.shape
        if lidar is not None and (lidar.height, lidar.width) != (h, w):
            factor = lidar.height // h
            if factor < 1 or lidar.height // factor != h:
                raise ShapeError("regularize", "LiDAR H", lidar.height, f"multiple of {h}")
            lidar = downsample_sparse(lidar, factor)
        ctx = ConditioningInput(training, lidar)
        cache: dict[str, Any] = {"ctx": ctx, "layers": []}
        needs_lidar = self.encoder is not None or self.concat_encoder is not None or any(
            isinstance(n, ConditionedNormLayer) for *_, n in self.reg_layers
        )
        if needs_lidar and lidar is None:
            raise ConfigError(f"variant {self.cfg.variant!r} needs a LiDAR map in the regularizer")
        if self.encoder is not None:
            ctx.enc_feat, cache["enc_ops"] = self.encoder.encode(lidar)
        if self.concat_encoder is not None:
            feat, cache["concat_ops"] = self.concat_encoder.forward(lidar)
            volume = np.concatenate([volume, np.repeat(feat[..., None], d, axis=-1)], axis=0)
            cache["volume_channels"] = volume.shape[0] - feat.shape[0]

        x = volume
        last = len(self.reg_layers)
        for i, (prefix, _, _, norm) in enumerate(self.reg_layers, 1):
            conv = ConvNd(1, 1)
            x = conv.forward(x, self.params[f"{prefix}.weight"])
            x, norm_cache = norm.forward(x, ctx)
            relu = None
            if i < last:
                relu = Relu()
                x = relu.forward(x)
            cache["layers"].append((prefix, conv, norm, norm_cache, relu))
        return x, cache

    def regularize_backward(self, grad: Tensor, cache: dict[str, Any], grads: dict[str, np.ndarray]) -> Tensor:
        ctx: ConditioningInput = cache["ctx"]
        ctx.enc_grad = None
        for prefix, conv, norm, norm_cache, relu in reversed(cache["layers"]):
            if relu is not None:
                (grad,) = relu.backward(grad)
            grad = norm.backward(grad, norm_cache, grads, ctx)
            grad, dw, _ = conv.backward(grad)
            _accumulate(grads, f"{prefix}.weight", dw)
        if self.encoder is not None and ctx.enc_grad is not None:
            self.encoder.trunk.backward(ctx.enc_grad, cache["enc_ops"], grads)
        if self.concat_encoder is not None:
            c = cache["volume_channels"]
            self.concat_encoder.backward(grad[c:].sum(axis=-1), cache["concat_ops"], grads)
            grad = grad[:c]
        return grad

    def forward(self, sample: StereoSample, training: bool = True) -> tuple[Tensor, dict[str, Any]]:
        cfg = self.cfg
        h, w = sample.height, sample.width
        if h % cfg.downsample or w % cfg.downsample:
            raise ShapeError("forward", "H×W", (h, w), f"multiples of downsample={cfg.downsample}")
        dt = default_dtype()
        left = np.asarray(sample.left_rgb, dtype=dt)
        right = np.asarray(sample.right_rgb, dtype=dt)
        if cfg.input_fusion:
            left = input_fusion(left, sample.lidar_left, cfg.d_max)
            right = input_fusion(right, sample.lidar_right, cfg.d_max)

        feats, feat_cache = self.extract_features(np.stack([left, right]), training)
        build = BuildCostVolume(cfg.levels)
        volume = build.forward(feats[0], feats[1])
        lidar = sample.lidar_left if self.kind != "none" else None
        reg, reg_cache = self.regularize(volume, lidar, training)
        up = TrilinearUpsample((h, w, cfg.d_max))
        head = SoftArgmin(1.0)
        disparity = head.forward(up.forward(reg))
        cache = {"feat": feat_cache, "build": build, "reg": reg_cache, "up": up, "head": head}
        return disparity, cache

    def backward(self, grad: Tensor, cache: dict[str, Any]) -> dict[str, np.ndarray]:
        grads: dict[str, np.ndarray] = {}
        (g,) = cache["head"].backward(grad)
        (g,) = cache["up"].backward(g)
        g = self.regularize_backward(g, cache["reg"], grads)
        dleft, dright = cache["build"].backward(g)
        self.extract_features_backward(np.stack([dleft, dright]), cache["feat"], grads)
        return grads

    def predict(self, sample: StereoSample) -> Tensor:
        return self.forward(sample, training=False)[0]


def _accumulate(grads: dict[str, np.ndarray], name: str, g: np.ndarray) -> None:
    grads[name] = grads[name] + g if name in grads else g


class StageOp(Op):
    """
    Стадия сети (extract_features / regularize) как Op над (x, *params[names]).
    Нужна для проверки градиентов по весам.
    """

    def __init__(self, net: StereoNet, stage: str, names: Sequence[str], **kwargs: Any) -> None:
        self.net, self.stage, self.names, self.kwargs = net, stage, list(names), kwargs

    def forward(self, x: Tensor, *arrays: np.ndarray) -> Tensor:
        self.net.params.update(zip(self.names, arrays))
        out, self.cache = getattr(self.net, self.stage)(x, **self.kwargs)
        return out

    def backward(self, grad_out: Tensor) -> tuple[Tensor | None, ...]:
        grads: dict[str, np.ndarray] = {}
        dx = getattr(self.net, f"{self.stage}_backward")(grad_out, self.cache, grads)
        return (dx, *[grads.get(n, np.zeros_like(self.net.params[n])) for n in self.names])
