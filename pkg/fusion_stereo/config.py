from __future__ import annotations
from dataclasses import dataclass, asdict, field, fields, is_dataclass
from typing import Any, Literal
from pathlib import Path
import configparser
import json
import os

from .errors import ConfigError
from .reader import read_text

RC_PATH = Path.home() / ".fusion_stereo.json"
PRECISION_ENV = "FUSION_STEREO_PRECISION"
PRECISIONS = ("f32", "f64")

# Значение, которым заполняются невалидные пиксели разреженных карт
INVALID_FILL: float = 0.0

CONDITIONINGS = (
    "none",
    "feature_concat",
    "naive_cbn",
    "ccvnorm_cat",
    "ccvnorm_cont",
    "hier_ccvnorm",
)
VARIANTS = (
    ("none", "input_fusion_only")
    + CONDITIONINGS[1:]
    + tuple(f"if+{c}" for c in CONDITIONINGS[1:])
)


def split_variant(variant: str) -> tuple[bool, str]:
    """'if+hier_ccvnorm' -> (True, 'hier_ccvnorm'); 'input_fusion_only' -> (True, 'none')."""
    if variant not in VARIANTS:
        raise ConfigError(
            f"unknown variant {variant!r}; valid variants: {', '.join(VARIANTS)}"
        )
    if variant == "input_fusion_only":
        return True, "none"
    if variant.startswith("if+"):
        return True, variant[3:]
    return False, variant


@dataclass(slots=True)
class NetworkConfig:
    # Полное разрешение; на полном масштабе 192, на настольном 16
    d_max: int = 16
    downsample: int = 2
    feature_channels: int = 16
    feature_blocks: int = 4
    # Последний слой регуляризатора всегда сводит объём к одному каналу
    reg_channels: tuple[int, ...] = (16, 16, 16, 16, 16, 1)
    # Нумерация слоёв регуляризатора с 1
    conditioned_layer_ids: tuple[int, ...] = (2, 4, 6)
    variant: str = "none"
    # 0 -> d_max
    d_hat: int = 0
    encoder_channels: int = 8
    concat_channels: int = 8
    mlp_hidden: int = 16
    norm_eps: float = 1e-5
    momentum: float = 0.1

    @property
    def levels(self) -> int:
        """Число уровней диспаратности в объёме стоимости (D)."""
        return self.d_max // self.downsample

    @property
    def bins(self) -> int:
        """D̂, число корзин дискретизации."""
        return self.d_hat or self.d_max

    @property
    def input_fusion(self) -> bool:
        return split_variant(self.variant)[0]

    @property
    def conditioning(self) -> str:
        return split_variant(self.variant)[1]

    def validate(self) -> None:
        split_variant(self.variant)
        if self.downsample < 1:
            raise ConfigError(f"downsample must be >= 1, got {self.downsample}")
        if self.d_max % self.downsample:
            raise ConfigError(
                f"d_max={self.d_max} is not divisible by downsample={self.downsample}"
            )
        if self.levels < 2:
            raise ConfigError(f"cost volume needs >= 2 disparity levels, got {self.levels}")
        if self.feature_blocks < 1 or self.feature_channels < 1:
            raise ConfigError("feature extractor needs at least one block and channel")
        if not self.reg_channels or self.reg_channels[-1] != 1:
            raise ConfigError("last regularizer layer must output exactly 1 channel")
        n = len(self.reg_channels)
        bad = [i for i in self.conditioned_layer_ids if not 1 <= i <= n]
        if bad:
            raise ConfigError(
                f"conditioned_layer_ids {bad} do not exist; regularizer has layers 1..{n}"
            )
        if self.bins < 2:
            raise ConfigError(f"d_hat must be >= 2, got {self.bins}")
        if self.norm_eps <= 0:
            raise ConfigError("norm_eps must be positive")


@dataclass(slots=True)
class SceneConfig:
    width: int = 64
    height: int = 32
    n_planes: int = 3
    disparity_range: tuple[float, float] = (2.0, 12.0)
    texture: Literal["noise", "checker", "gradient"] = "noise"
    lidar_coverage: float = 0.3
    noise_sigma_px: float = 0.0
    seed: int = 0
    slanted: bool = False
    integer_disparity: bool = True
    # Синтетическая калибровка: глубина = focal_px * baseline_m / d
    focal_px: float = 100.0
    baseline_m: float = 0.5

    def validate(self, d_max: int | None = None) -> None:
        d_lo, d_hi = self.disparity_range
        if d_lo < 0 or d_hi < d_lo:
            raise ConfigError(f"bad disparity_range {self.disparity_range}")
        if d_max is not None and d_hi >= d_max:
            raise ConfigError(f"disparity_range upper bound {d_hi} must be < d_max={d_max}")
        if self.texture not in ("noise", "checker", "gradient"):
            raise ConfigError(f"unknown texture {self.texture!r}")
        if not 0.0 < self.lidar_coverage <= 1.0:
            raise ConfigError(f"lidar_coverage must be in (0, 1], got {self.lidar_coverage}")
        if self.width < 2 or self.height < 2 or self.n_planes < 1:
            raise ConfigError("scene must be at least 2x2 with one plane")


@dataclass(slots=True)
class TrainConfig:
    iters: int = 200
    lr: float = 1e-3
    alpha: float = 0.99
    eps: float = 1e-8
    # 0 -> без кропа по этой оси
    crop_w: int = 0
    crop_h: int = 0
    checkpoint_every: int = 0
    n_scenes: int = 1


@dataclass(slots=True)
class RunConfig:
    command: str = "train"
    seed: int = 0
    output_dir: str = "runs"
    precision: str = "f64"
    # synthetic | manifest:PATH
    data: str = "synthetic"
    checkpoint: str = ""
    eval_seed_offset: int = 1000
    n_eval_scenes: int = 2
    densities: tuple[float, ...] = (0.1, 0.3, 0.5, 0.7, 1.0)
    density_seeds: tuple[int, ...] = (0, 1, 2)
    # (y0, x0, y1, x1), полуоткрытый прямоугольник
    region: tuple[int, ...] = ()
    new_disparity: float = 0.0
    variants: tuple[str, ...] = ()
    ablation_seeds: tuple[int, ...] = (0, 1, 2)
    # (C, D, D̂) для таблицы формул param_count
    formula_dims: tuple[int, ...] = (32, 48, 192)
    timing_repeats: int = 10
    dataset_root: str = ""
    # 0 -> без кропа снизу при загрузке кадров KITTI
    kitti_crop_h: int = 0
    network: NetworkConfig = field(default_factory=NetworkConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def _apply(obj: Any, data: dict[str, Any], strict: bool, where: str = "") -> None:
    names = {f.name for f in fields(obj)}
    for k, v in data.items():
        if k not in names:
            if strict:
                raise ConfigError(f"unknown config key {where}{k!r}")
            continue
        cur = getattr(obj, k)
        if is_dataclass(cur):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where}{k!r} must be a mapping")
            _apply(cur, v, strict, f"{where}{k}.")
        elif isinstance(cur, tuple):
            setattr(obj, k, tuple(v))
        else:
            setattr(obj, k, v)


def config_to_dict(cfg: Any) -> dict[str, Any]:
    return asdict(cfg)


def run_config_from_dict(data: dict[str, Any], strict: bool = True) -> RunConfig:
    cfg = RunConfig()
    _apply(cfg, data, strict)
    return cfg


def load_defaults() -> RunConfig:
    """Пользовательские значения по умолчанию из RC_PATH; битый файл молча игнорируется."""
    if RC_PATH.exists():
        try:
            data: dict[str, object] = json.loads(RC_PATH.read_text(encoding="utf-8"))
            cfg = RunConfig()
            _apply(cfg, data, strict=False)
            return cfg
        except Exception:
            pass
    return RunConfig()


def save_defaults(cfg: RunConfig) -> None:
    RC_PATH.write_text(json.dumps(asdict(cfg), ensure_ascii=False, indent=2), encoding="utf-8")


def load_run_config(path: Path | str, base: RunConfig | None = None) -> RunConfig:
    """Явный --config: в отличие от rc-файла, любые ошибки — ConfigError."""
    cfg = base if base is not None else RunConfig()
    try:
        data = json.loads(read_text(path))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed JSON ({e.msg} at line {e.lineno})") from e
    except Exception as e:
        raise ConfigError(f"{path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    _apply(cfg, data, strict=True)
    return cfg


def write_resolved(cfg: RunConfig, out_dir: Path | str) -> Path:
    out = Path(out_dir) / "config.resolved"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(asdict(cfg), ensure_ascii=False, indent=2, sort_keys=True), encoding="utf-8")
    return out


def resolve_precision(value: str) -> str:
    """Переменная окружения FUSION_STEREO_PRECISION сильнее флагов и конфига."""
    env = os.environ.get(PRECISION_ENV)
    value = env.strip() if env else value
    if value not in PRECISIONS:
        raise ConfigError(f"precision must be one of {PRECISIONS}, got {value!r}")
    return value


# --- конфиг сети: key = value с секциями по стадиям ---

_NETWORK_SECTIONS: dict[str, tuple[str, ...]] = {
    "network": ("d_max", "downsample", "variant"),
    "features": ("feature_channels", "feature_blocks"),
    "regularizer": ("reg_channels",),
    "conditioning": (
        "conditioned_layer_ids", "d_hat", "encoder_channels", "concat_channels",
        "mlp_hidden", "norm_eps", "momentum",
    ),
}


def _parse_value(raw: str, template: Any, key: str) -> Any:
    try:
        if isinstance(template, tuple):
            return tuple(int(x) for x in raw.replace(",", " ").split())
        if isinstance(template, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
    except ValueError as e:
        raise ConfigError(f"network config: bad value for {key!r}: {raw!r}") from e
    return raw.strip()


def load_network_config(path: Path | str) -> NetworkConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(read_text(path), source=str(path))
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e
    cfg = NetworkConfig()
    for section in parser.sections():
        allowed = _NETWORK_SECTIONS.get(section)
        if allowed is None:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in allowed:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            setattr(cfg, key, _parse_value(raw, getattr(cfg, key), key))
    cfg.validate()
    return cfg


def dump_network_config(cfg: NetworkConfig) -> str:
    lines: list[str] = []
    for section, keys in _NETWORK_SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            v = getattr(cfg, key)
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{key} = {v}")
        lines.append("")
    return "\n".join(lines)
