"""
Командная строка: train, eval, density, sensitivity, params, ablation, synth, manifest.

Порядок приоритета настроек: значения по умолчанию < rc-файл < --config <
флаги < FUSION_STEREO_PRECISION (только точность). Каждая команда пишет
в --out файл config.resolved со всеми действующими значениями.
"""
from __future__ import annotations

from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence
import argparse
import logging
import sys

import numpy as np

from .conditioning import param_count
from .config import (
    VARIANTS,
    RunConfig,
    load_defaults,
    load_network_config,
    load_run_config,
    resolve_precision,
    write_resolved,
)
from .data import export_scenes, gen_scene, write_disparity_png, write_viz_png
from .dataset import DatasetWalker, load_source
from .errors import ConfigError, FusionStereoError
from .evaluation import (
    METRIC_NAMES,
    ablation_grid,
    density_sweep,
    evaluate,
    load_model,
    runtime_report,
    sensitivity_probe,
)
from .numerics import set_precision
from .report import TableBuilder
from .trainer import train

logger = logging.getLogger(__name__)

COMMANDS = ("train", "eval", "density", "sensitivity", "params", "ablation", "synth", "manifest")
# минимальное значение, которое кодек PNG (value / 256) хранит как валидное
_PNG_MIN = 0.5 / 256


def setup_logging(verbosity: int = 0) -> None:
    level = logging.DEBUG if verbosity > 0 else logging.WARNING if verbosity < 0 else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.replace(",", " ").split())


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.replace(",", " ").split())


def _strs(s: str) -> tuple[str, ...]:
    return tuple(x for x in s.replace(",", " ").split())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fusion_stereo", description="Stereo + LiDAR fusion experiments")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON run config (same shape as config.resolved)")
    p.add_argument("--network-config", help="INI network config")
    p.add_argument("--out", dest="output_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", choices=("f32", "f64"))
    p.add_argument("--data", help="synthetic | manifest:PATH")
    p.add_argument("--checkpoint", help="checkpoint path; density accepts a comma-separated list")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("-q", "--quiet", action="count", default=0)

    net = p.add_argument_group("network")
    net.add_argument("--variant")
    net.add_argument("--d-max", dest="d_max", type=int)
    net.add_argument("--downsample", type=int)
    net.add_argument("--d-hat", dest="d_hat", type=int)

    tr = p.add_argument_group("training")
    tr.add_argument("--iters", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--crop", help="WxH random crop")
    tr.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    tr.add_argument("--n-scenes", dest="n_scenes", type=int)

    sc = p.add_argument_group("synthetic scenes")
    sc.add_argument("--width", type=int)
    sc.add_argument("--height", type=int)
    sc.add_argument("--coverage", dest="lidar_coverage", type=float)
    sc.add_argument("--noise", dest="noise_sigma_px", type=float)
    sc.add_argument("--texture", choices=("noise", "checker", "gradient"))

    ex = p.add_argument_group("experiments")
    ex.add_argument("--eval-seed-offset", dest="eval_seed_offset", type=int)
    ex.add_argument("--n-eval", dest="n_eval_scenes", type=int)
    ex.add_argument("--densities", type=_floats)
    ex.add_argument("--density-seeds", dest="density_seeds", type=_ints)
    ex.add_argument("--region", type=_ints, help="y0,x0,y1,x1")
    ex.add_argument("--new-disparity", dest="new_disparity", type=float)
    ex.add_argument("--variants", type=_strs)
    ex.add_argument("--ablation-seeds", dest="ablation_seeds", type=_ints)
    ex.add_argument("--formula-dims", dest="formula_dims", type=_ints, help="C,D,D_hat")
    ex.add_argument("--repeats", dest="timing_repeats", type=int)
    ex.add_argument("--root", dest="dataset_root")
    ex.add_argument("--kitti-crop-h", dest="kitti_crop_h", type=int)
    return p


_RUN_FLAGS = ("output_dir", "seed", "precision", "data", "checkpoint", "eval_seed_offset", "n_eval_scenes",
              "densities", "density_seeds", "region", "new_disparity", "variants", "ablation_seeds",
              "formula_dims", "timing_repeats", "dataset_root", "kitti_crop_h")
_NETWORK_FLAGS = ("variant", "d_max", "downsample", "d_hat")
_TRAIN_FLAGS = ("iters", "lr", "checkpoint_every", "n_scenes")
_SCENE_FLAGS = ("width", "height", "lidar_coverage", "noise_sigma_px", "texture")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_defaults()
    if args.config:
        cfg = load_run_config(args.config, cfg)
    if args.network_config:
        cfg.network = load_network_config(args.network_config)
    cfg.command = args.command
    for target, names in ((cfg, _RUN_FLAGS), (cfg.network, _NETWORK_FLAGS),
                          (cfg.train, _TRAIN_FLAGS), (cfg.scene, _SCENE_FLAGS)):
        for name in names:
            v = getattr(args, name)
            if v is not None:
                setattr(target, name, v)
    if args.crop:
        try:
            w, h = (int(x) for x in args.crop.lower().split("x"))
        except ValueError as e:
            raise ConfigError(f"--crop must look like WxH, got {args.crop!r}") from e
        cfg.train.crop_w, cfg.train.crop_h = w, h
    cfg.precision = resolve_precision(cfg.precision)
    cfg.network.validate()
    return cfg


def _out(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir)


def _data(cfg: RunConfig, n: int, seed_offset: int, d_max: int) -> list:
    if cfg.data == "synthetic":
        cfg.scene.validate(d_max)
    return load_source(cfg.data, cfg.scene, n, seed_offset, d_max, cfg.kitti_crop_h)


def _require_checkpoint(cfg: RunConfig) -> str:
    if not cfg.checkpoint:
        raise ConfigError(f"{cfg.command} needs --checkpoint")
    return cfg.checkpoint


def _write_disparity(out: Path, stem: str, disparity: np.ndarray, vmax: float) -> None:
    write_disparity_png(out / f"{stem}_disp.png", disparity, disparity >= _PNG_MIN)
    write_viz_png(out / f"{stem}_vis.png", disparity, vmax)


def cmd_train(cfg: RunConfig) -> int:
    dataset = _data(cfg, cfg.train.n_scenes, 0, cfg.network.d_max)
    result = train(cfg, dataset, _out(cfg))
    last = result.losses[-1] if result.losses else float("nan")
    print(f"checkpoint: {result.checkpoint}")
    print(f"iters: {len(result.losses)}  final loss: {last:.4f}")
    return 0


def _metrics_table(rows: Sequence[tuple[str, float]], mode: str = "csv") -> TableBuilder:
    t = TableBuilder(["metric", "value"], mode, "Metrics")
    t.extend([list(r) for r in rows])
    return t


def cmd_eval(cfg: RunConfig) -> int:
    net = load_model(_require_checkpoint(cfg))
    dataset = _data(cfg, cfg.n_eval_scenes, cfg.eval_seed_offset, net.cfg.d_max)
    report = evaluate(net, dataset)
    out = _out(cfg)
    rows = [(k, float(v)) for k, v in report.as_dict().items()]
    _metrics_table(rows).write(out / "metrics.csv")
    for s in dataset:
        _write_disparity(out / "pred", s.name, net.predict(s), net.cfg.d_max)
    print(_metrics_table(rows, "md").build(), end="")
    return 0


def cmd_density(cfg: RunConfig) -> int:
    paths = [p for p in _require_checkpoint(cfg).split(",") if p]
    out = _out(cfg)
    summary = TableBuilder(["label", "density", "metric", "mean", "std"])
    trend = TableBuilder(["label", "relative_degradation", "monotone"], "md", "Density robustness")
    trend_csv = TableBuilder(["label", "relative_degradation", "monotone"])
    sweeps = []
    for path in paths:
        net = load_model(path)
        dataset = _data(cfg, cfg.n_eval_scenes, cfg.eval_seed_offset, net.cfg.d_max)
        label = net.cfg.variant if len(paths) == 1 else f"{net.cfg.variant}@{Path(path).parent.name}"
        sweep = density_sweep(net, dataset, cfg.densities, cfg.density_seeds, label)
        sweeps.append(sweep)
        long = TableBuilder(["density", "seed", "metric", "value"])
        long.extend([list(r) for r in sweep.long_rows])
        long.write(out / (f"density_{len(sweeps) - 1}.csv" if len(paths) > 1 else "density.csv"))
        for d, metrics in sorted(sweep.summary.items()):
            for k in METRIC_NAMES:
                summary.add_row([label, d, k, *metrics[k]])
        row = [label, sweep.relative_degradation, sweep.monotone]
        trend.add_row(row)
        trend_csv.add_row(row)
        if not sweep.monotone:
            logger.warning("density trend is not monotone label=%s", label)
    summary.write(out / "density_summary.csv")
    trend_csv.write(out / "density_trend.csv")
    print(trend.build(), end="")
    return 0


def cmd_sensitivity(cfg: RunConfig) -> int:
    net = load_model(_require_checkpoint(cfg))
    sample = _data(cfg, 1, cfg.eval_seed_offset, net.cfg.d_max)[0]
    region = cfg.region or (sample.height // 4, sample.width // 4, 3 * sample.height // 4, 3 * sample.width // 4)
    res = sensitivity_probe(net, sample, region, cfg.new_disparity)
    out = _out(cfg)
    _write_disparity(out, "sensitivity_delta", res.delta_map, None)
    rows = [("mean_abs_change_inside", res.mean_abs_change_inside),
            ("mean_abs_change_outside", res.mean_abs_change_outside),
            ("n_modified", res.n_modified)]
    _metrics_table(rows).write(out / "sensitivity.csv")
    print(_metrics_table(rows, "md").build(), end="")
    return 0


def cmd_params(cfg: RunConfig) -> int:
    variants = cfg.variants or VARIANTS
    configs = [replace(cfg.network, variant=v) for v in variants]
    scene = replace(cfg.scene, seed=cfg.seed)
    scene.validate(cfg.network.d_max)
    rows = runtime_report(configs, gen_scene(scene), repeats=cfg.timing_repeats, seed=cfg.seed)
    cols = ["variant", "forward_seconds", "n_params", "conditioning_params"]
    md = TableBuilder(cols, "md", "Runtime and parameters")
    csv = TableBuilder(cols)
    for r in rows:
        row = [r.variant, r.forward_seconds, r.n_params, r.conditioning_params]
        md.add_row(row)
        csv.add_row(row)
    out = _out(cfg)
    csv.write(out / "params.csv")

    if len(cfg.formula_dims) != 3:
        raise ConfigError(f"formula_dims must be (C, D, D_hat), got {cfg.formula_dims}")
    c, d, d_hat = cfg.formula_dims
    formula = TableBuilder(["variant", "C", "D", "d_hat", "per_layer_params"], "md", "Conditioning parameters per layer")
    formula_csv = TableBuilder(["variant", "C", "D", "d_hat", "per_layer_params"])
    for kind in ("naive_cbn", "ccvnorm_cat", "hier_ccvnorm"):
        row = [kind, c, d, d_hat, param_count(kind, c, d, d_hat, 1)]
        formula.add_row(row)
        formula_csv.add_row(row)
    formula_csv.write(out / "param_formula.csv")
    ratio = param_count("ccvnorm_cat", c, d, d_hat, 1) / param_count("hier_ccvnorm", c, d, d_hat, 1)
    print(md.build())
    print(formula.build())
    print(f"categorical / hierarchical = {ratio:.2f}")
    return 0


def cmd_ablation(cfg: RunConfig) -> int:
    variants = cfg.variants or ("none", "input_fusion_only", "feature_concat", "naive_cbn",
                                "ccvnorm_cat", "ccvnorm_cont", "hier_ccvnorm", "if+hier_ccvnorm")
    d_max = cfg.network.d_max
    train_set = _data(cfg, cfg.train.n_scenes, 0, d_max)
    eval_set = _data(cfg, cfg.n_eval_scenes, cfg.eval_seed_offset, d_max)
    out = _out(cfg)
    rows, means = ablation_grid(variants, train_set, eval_set, cfg.ablation_seeds, cfg, out / "runs")
    cols = ["variant", "seed", *METRIC_NAMES]
    grid = TableBuilder(cols)
    for r in rows:
        grid.add_row({"variant": r.variant, "seed": r.seed, **r.metrics.as_dict()})
    grid.write(out / "ablation.csv")
    md = TableBuilder(["variant", *METRIC_NAMES], "md", "Ablation (mean over seeds)")
    for v, m in means.items():
        md.add_row({"variant": v, **m})
    md.write(out / "ablation.md")
    print(md.build(), end="")
    return 0


def cmd_synth(cfg: RunConfig) -> int:
    cfg.scene.validate(cfg.network.d_max)
    scenes = [replace(cfg.scene, seed=cfg.scene.seed + i) for i in range(cfg.train.n_scenes)]
    manifest = export_scenes(_out(cfg) / "dataset", scenes, cfg.network.d_max)
    print(f"manifest: {manifest}")
    return 0


def cmd_manifest(cfg: RunConfig) -> int:
    if not cfg.dataset_root:
        raise ConfigError("manifest needs --root DIR")
    path = DatasetWalker().build_manifest(Path(cfg.dataset_root), _out(cfg) / "manifest.txt")
    print(f"manifest: {path}")
    return 0


HANDLERS: dict[str, Callable[[RunConfig], int]] = {
    "train": cmd_train,
    "eval": cmd_eval,
    "density": cmd_density,
    "sensitivity": cmd_sensitivity,
    "params": cmd_params,
    "ablation": cmd_ablation,
    "synth": cmd_synth,
    "manifest": cmd_manifest,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose - args.quiet)
    try:
        cfg = resolve_config(args)
        set_precision(cfg.precision)
        write_resolved(cfg, _out(cfg))
        return HANDLERS[cfg.command](cfg)
    except FusionStereoError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
