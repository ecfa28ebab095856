from __future__ import annotations
from pathlib import Path
from typing import Iterable, Optional
import logging
import queue
import threading

try:
    from pathspec import PathSpec
except Exception:
    PathSpec = None

from .config import SceneConfig
from .data import ManifestRecord, load_record, read_manifest, synthetic_samples, write_manifest
from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

LAYOUT = ("left", "right", "lidar", "gt", "calib")
IMAGE_DIRS = LAYOUT[:4]
DEFAULT_IGNORE = ("*_vis.png", "*_disp.png", ".*")


class DatasetWalker:
    """
    Сканер датасета в раскладке left/ right/ lidar/ gt/ calib/.

    Кадры сопоставляются по имени файла без расширения; пути, совпавшие с
    gitwildmatch-шаблонами (ignore_patterns + файл .datasetignore в корне),
    пропускаются.
    """

    IGNORE_FILE = ".datasetignore"

    def __init__(self, ignore_patterns: Iterable[str] = DEFAULT_IGNORE) -> None:
        self.patterns = list(ignore_patterns)
        self.root: Optional[Path] = None
        self.spec: Optional[PathSpec] = None

    def build(self, root: Path) -> None:
        lines = list(self.patterns)
        extra = root / self.IGNORE_FILE
        if extra.is_file():
            for raw in extra.read_text(encoding="utf-8", errors="ignore").splitlines():
                s = raw.strip()
                if s and not s.startswith("#"):
                    lines.append(s)
        self.root = root
        self.spec = PathSpec.from_lines("gitwildmatch", lines) if (PathSpec and lines) else None

    def ignored(self, path: Path) -> bool:
        if not self.root or not self.spec:
            return False
        rel = path.resolve().relative_to(self.root.resolve()).as_posix()
        return bool(self.spec.match_file(rel))

    def frames(self, root: Path, sub: str, suffix: str) -> dict[str, Path]:
        d = root / sub
        if not d.is_dir():
            raise DataError(f"{root}: missing '{sub}/' directory")
        out = {}
        for p in sorted(d.iterdir(), key=lambda p: p.name.lower()):
            if p.is_file() and p.suffix.lower() == suffix and not self.ignored(p):
                out[p.stem] = p
        return out

    def scan(self, root: Path) -> list[ManifestRecord]:
        root = Path(root)
        self.build(root)
        found = {sub: self.frames(root, sub, ".png") for sub in IMAGE_DIRS}
        found["calib"] = self.frames(root, "calib", ".txt")
        stems = set(found["left"])
        for sub in LAYOUT[1:]:
            missing = sorted(stems - set(found[sub]))
            if missing:
                logger.warning("dataset frames without %s: %s", sub, ", ".join(missing[:5]))
            stems &= set(found[sub])
        if not stems:
            raise DataError(f"{root}: no complete frames (need matching files in {', '.join(LAYOUT)})")
        return [ManifestRecord(*(found[sub][s] for sub in LAYOUT)) for s in sorted(stems)]

    def build_manifest(self, root: Path, out: Path | None = None) -> Path:
        records = self.scan(root)
        path = write_manifest(out or Path(root) / "manifest.txt", records)
        logger.info("manifest written path=%s frames=%d", path, len(records))
        return path


# Фоновая подгрузка кадров по манифесту
class PrefetchThread(threading.Thread):
    """
    Читает записи манифеста по порядку и кладёт в очередь
    ("total", n), ("sample", (i, sample)), ..., ("done", None) или ("error", msg).
    """

    def __init__(self, records: list[ManifestRecord], queue_out: "queue.Queue[tuple[str, object]]", crop_h: int = 0):
        super().__init__(daemon=True)
        self.records = records
        self.q = queue_out
        self.crop_h = crop_h
        self._stop_event = threading.Event()

    def stop(self) -> None:
        self._stop_event.set()

    def run(self) -> None:
        try:
            self.q.put(("total", len(self.records)))
            for i, rec in enumerate(self.records):
                if self._stop_event.is_set():
                    break
                self.q.put(("sample", (i, load_record(rec, self.crop_h))))
            self.q.put(("done", None))
        except Exception as e:
            self.q.put(("error", str(e)))


def load_records_prefetched(records: list[ManifestRecord], crop_h: int = 0) -> list:
    """Загрузить все кадры через PrefetchThread в порядке манифеста."""
    q: "queue.Queue[tuple[str, object]]" = queue.Queue(maxsize=4)
    worker = PrefetchThread(records, q, crop_h)
    worker.start()
    out: list = [None] * len(records)
    while True:
        kind, payload = q.get()
        if kind == "sample":
            i, sample = payload
            out[i] = sample
            logger.debug("loaded frame %d/%d", i + 1, len(records))
        elif kind == "error":
            worker.join()
            raise DataError(str(payload))
        elif kind == "done":
            break
    worker.join()
    return out


def load_source(
    source: str,
    scene: SceneConfig,
    n: int,
    seed_offset: int = 0,
    d_max: int | None = None,
    crop_h: int = 0,
) -> list:
    """'synthetic' -> n сцен с сидами scene.seed + seed_offset + i; 'manifest:PATH' -> все записи."""
    if source == "synthetic":
        return synthetic_samples(scene, n, seed_offset, d_max)
    if source.startswith("manifest:"):
        return load_records_prefetched(read_manifest(source.split(":", 1)[1]), crop_h)
    raise ConfigError(f"unknown data source {source!r}; use 'synthetic' or 'manifest:PATH'")
