from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import pytest

from fusion_stereo.config import SceneConfig
from fusion_stereo.data import ManifestRecord, export_scenes, read_manifest
from fusion_stereo.dataset import DatasetWalker, load_records_prefetched, load_source
from fusion_stereo.errors import ConfigError, DataError


@pytest.fixture
def dataset_root(tmp_path: Path, tiny_scene_cfg: SceneConfig) -> Path:
    root = tmp_path / "ds"
    export_scenes(root, [replace(tiny_scene_cfg, seed=s) for s in (1, 2, 3)], d_max=8)
    return root


def test_scan_pairs_frames_by_stem(dataset_root: Path) -> None:
    records = DatasetWalker().scan(dataset_root)
    assert [r.left.stem for r in records] == ["scene_000001", "scene_000002", "scene_000003"]
    for r in records:
        assert r.gt.parent.name == "gt" and r.calib.suffix == ".txt"


def test_visualizations_are_ignored(dataset_root: Path) -> None:
    w = DatasetWalker()
    w.build(dataset_root)
    assert w.ignored(dataset_root / "gt" / "scene_000001_vis.png")
    assert not w.ignored(dataset_root / "gt" / "scene_000001.png")
    assert "scene_000001_vis" not in w.frames(dataset_root, "gt", ".png")


def test_datasetignore_file(dataset_root: Path) -> None:
    (dataset_root / ".datasetignore").write_text("# skip one frame\nleft/scene_000002.png\n", encoding="utf-8")
    records = DatasetWalker().scan(dataset_root)
    assert [r.left.stem for r in records] == ["scene_000001", "scene_000003"]


def test_incomplete_frames_are_skipped(dataset_root: Path) -> None:
    (dataset_root / "lidar" / "scene_000001.png").unlink()
    records = DatasetWalker().scan(dataset_root)
    assert [r.left.stem for r in records] == ["scene_000002", "scene_000003"]


def test_missing_layout_directory(tmp_path: Path) -> None:
    (tmp_path / "left").mkdir()
    with pytest.raises(DataError, match="right/"):
        DatasetWalker().scan(tmp_path)


def test_no_complete_frames(tmp_path: Path) -> None:
    for sub in ("left", "right", "lidar", "gt", "calib"):
        (tmp_path / sub).mkdir()
    with pytest.raises(DataError, match="no complete frames"):
        DatasetWalker().scan(tmp_path)


def test_build_manifest(dataset_root: Path) -> None:
    (dataset_root / "manifest.txt").unlink()
    path = DatasetWalker().build_manifest(dataset_root)
    assert path == dataset_root / "manifest.txt"
    assert read_manifest(path) == DatasetWalker().scan(dataset_root)


def test_prefetch_keeps_manifest_order(dataset_root: Path) -> None:
    records = read_manifest(dataset_root / "manifest.txt")
    samples = load_records_prefetched(records, crop_h=4)
    assert [s.name for s in samples] == [r.left.stem for r in records]
    assert all(s.height == 4 for s in samples)


def test_prefetch_reports_broken_frame(dataset_root: Path) -> None:
    records = read_manifest(dataset_root / "manifest.txt")
    broken = ManifestRecord(records[0].left, records[0].right, dataset_root / "nope.png",
                            records[0].gt, records[0].calib)
    with pytest.raises(DataError, match="nope.png"):
        load_records_prefetched([records[1], broken])


def test_load_source(dataset_root: Path, tiny_scene_cfg: SceneConfig) -> None:
    synth = load_source("synthetic", tiny_scene_cfg, 2, seed_offset=5, d_max=8)
    assert [s.name for s in synth] == ["scene_000008", "scene_000009"]
    from_disk = load_source(f"manifest:{dataset_root / 'manifest.txt'}", tiny_scene_cfg, 0)
    assert len(from_disk) == 3
    assert from_disk[0].name == "scene_000001"
    with pytest.raises(ConfigError, match="unknown data source"):
        load_source("kitti", tiny_scene_cfg, 1)
