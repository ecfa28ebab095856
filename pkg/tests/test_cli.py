from __future__ import annotations

import json
from pathlib import Path

import pytest

from fusion_stereo.cli import main
from fusion_stereo.config import PRECISION_ENV
from fusion_stereo.data import read_disparity_png
from fusion_stereo.evaluation import METRIC_NAMES


@pytest.fixture
def run_config(tmp_path: Path) -> Path:
    """Маленькая сеть и сцена 16×8, чтобы команды укладывались в секунды."""
    p = tmp_path / "run.json"
    p.write_text(json.dumps({
        "network": {
            "d_max": 8, "downsample": 2, "feature_channels": 4, "feature_blocks": 1,
            "reg_channels": [4, 4, 1], "conditioned_layer_ids": [1, 2],
            "encoder_channels": 3, "concat_channels": 3, "mlp_hidden": 4,
        },
        "scene": {"width": 16, "height": 8, "n_planes": 2, "disparity_range": [1.0, 6.0], "seed": 3},
        "n_eval_scenes": 1,
    }), encoding="utf-8")
    return p


def _train(run_config: Path, out: Path, variant: str = "if+hier_ccvnorm", iters: int = 0) -> Path:
    code = main(["train", "--config", str(run_config), "--out", str(out),
                 "--variant", variant, "--iters", str(iters)])
    assert code == 0
    return out / "model.ckpt"


def test_train_writes_checkpoint_and_resolved_config(tmp_path: Path, run_config: Path,
                                                      capsys: pytest.CaptureFixture[str]) -> None:
    ckpt = _train(run_config, tmp_path / "run", iters=2)
    assert ckpt.is_file()
    assert (tmp_path / "run" / "loss.log").read_text(encoding="utf-8").count("\n") == 2
    resolved = json.loads((tmp_path / "run" / "config.resolved").read_text(encoding="utf-8"))
    assert resolved["network"]["variant"] == "if+hier_ccvnorm"
    assert resolved["train"]["iters"] == 2
    assert resolved["command"] == "train"
    assert "checkpoint:" in capsys.readouterr().out


def test_unknown_variant_exits_with_config_error(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    code = main(["train", "--variant", "batch_renorm", "--out", str(tmp_path)])
    assert code == 2
    err = capsys.readouterr().err
    assert "error: unknown variant 'batch_renorm'" in err
    assert "if+hier_ccvnorm" in err


def test_bad_crop_flag(tmp_path: Path, run_config: Path) -> None:
    assert main(["train", "--config", str(run_config), "--crop", "8by4", "--out", str(tmp_path)]) == 2


def test_eval_writes_metrics_and_predictions(tmp_path: Path, run_config: Path,
                                             capsys: pytest.CaptureFixture[str]) -> None:
    ckpt = _train(run_config, tmp_path / "run")
    capsys.readouterr()
    out = tmp_path / "eval"
    assert main(["eval", "--config", str(run_config), "--checkpoint", str(ckpt), "--out", str(out)]) == 0
    lines = (out / "metrics.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "metric,value"
    assert [ln.split(",")[0] for ln in lines[1:]] == [*METRIC_NAMES, "n_pixels"]
    preds = sorted((out / "pred").glob("*_disp.png"))
    assert [p.name for p in preds] == ["scene_001003_disp.png"]
    values, _ = read_disparity_png(preds[0])
    assert values.shape == (8, 16)
    assert "| mae_px |" in capsys.readouterr().out


def test_eval_needs_checkpoint(tmp_path: Path, run_config: Path, capsys: pytest.CaptureFixture[str]) -> None:
    assert main(["eval", "--config", str(run_config), "--out", str(tmp_path)]) == 2
    assert "needs --checkpoint" in capsys.readouterr().err


def test_missing_checkpoint_is_data_error(tmp_path: Path, run_config: Path) -> None:
    code = main(["eval", "--config", str(run_config), "--checkpoint", str(tmp_path / "nope.ckpt"),
                 "--out", str(tmp_path)])
    assert code == 3


def test_density_tables(tmp_path: Path, run_config: Path) -> None:
    ckpt = _train(run_config, tmp_path / "run", variant="input_fusion_only")
    out = tmp_path / "density"
    code = main(["density", "--config", str(run_config), "--checkpoint", str(ckpt), "--out", str(out),
                 "--densities", "0.5,1.0", "--density-seeds", "0,1"])
    assert code == 0
    long = (out / "density.csv").read_text(encoding="utf-8").splitlines()
    assert long[0] == "density,seed,metric,value"
    assert len(long) == 1 + 2 * 2 * len(METRIC_NAMES)
    summary = (out / "density_summary.csv").read_text(encoding="utf-8").splitlines()
    assert len(summary) == 1 + 2 * len(METRIC_NAMES)
    trend = (out / "density_trend.csv").read_text(encoding="utf-8").splitlines()
    assert trend[1].startswith("input_fusion_only,")


def test_sensitivity_command(tmp_path: Path, run_config: Path, capsys: pytest.CaptureFixture[str]) -> None:
    ckpt = _train(run_config, tmp_path / "run", variant="ccvnorm_cat")
    out = tmp_path / "sens"
    code = main(["sensitivity", "--config", str(run_config), "--checkpoint", str(ckpt), "--out", str(out),
                 "--region", "0,0,8,8", "--new-disparity", "7", "--coverage", "0.6"])
    assert code == 0
    assert (out / "sensitivity.csv").is_file()
    assert (out / "sensitivity_delta_vis.png").is_file()
    assert "mean_abs_change_inside" in capsys.readouterr().out


def test_params_table_and_formula(tmp_path: Path, run_config: Path, capsys: pytest.CaptureFixture[str]) -> None:
    code = main(["params", "--config", str(run_config), "--out", str(tmp_path),
                 "--variants", "none,ccvnorm_cat,hier_ccvnorm", "--repeats", "1"])
    assert code == 0
    rows = (tmp_path / "params.csv").read_text(encoding="utf-8").splitlines()
    assert rows[0] == "variant,forward_seconds,n_params,conditioning_params"
    assert [r.split(",")[0] for r in rows[1:]] == ["none", "ccvnorm_cat", "hier_ccvnorm"]
    formula = (tmp_path / "param_formula.csv").read_text(encoding="utf-8")
    assert "ccvnorm_cat,32,48,192,592896" in formula
    assert "hier_ccvnorm,32,48,192,21504" in formula
    assert "categorical / hierarchical = 27.57" in capsys.readouterr().out


def test_synth_then_manifest(tmp_path: Path, run_config: Path) -> None:
    assert main(["synth", "--config", str(run_config), "--n-scenes", "2", "--out", str(tmp_path / "s")]) == 0
    root = tmp_path / "s" / "dataset"
    assert (root / "manifest.txt").is_file()
    assert main(["manifest", "--root", str(root), "--out", str(tmp_path / "m")]) == 0
    lines = (tmp_path / "m" / "manifest.txt").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 2
    # обучение на записанном наборе через manifest:PATH
    code = main(["train", "--config", str(run_config), "--data", f"manifest:{root / 'manifest.txt'}",
                 "--iters", "1", "--out", str(tmp_path / "t")])
    assert code == 0


def test_precision_env_overrides_flag(tmp_path: Path, run_config: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv(PRECISION_ENV, "f32")
    _train(run_config, tmp_path / "run")
    resolved = json.loads((tmp_path / "run" / "config.resolved").read_text(encoding="utf-8"))
    assert resolved["precision"] == "f32"
