"""
Контейнер чекпойнта.

Формат: строка-тег версии, строка JSON-заголовка
{"meta": {...}, "entries": [{"name", "shape", "offset"}]} и далее
конкатенированные little-endian float64 данные в порядке записей.
Записи отсортированы по имени, поэтому одинаковое содержимое даёт
одинаковые байты.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any
import json
import logging

import numpy as np

from .errors import DataError

logger = logging.getLogger(__name__)

VERSION_TAG = "fusion-stereo-ckpt-v1"
BUFFER_SUFFIXES = (".running_mean", ".running_var")
_DTYPE = np.dtype("<f8")


def is_buffer(name: str) -> bool:
    return name.endswith(BUFFER_SUFFIXES)


@dataclass(slots=True)
class Checkpoint:
    meta: dict[str, Any] = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not is_buffer(k)}

    @property
    def buffers(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if is_buffer(k)}


def checkpoint_bytes(tensors: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=_DTYPE)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"meta": meta or {}, "entries": entries}, sort_keys=True, separators=(",", ":"))
    return f"{VERSION_TAG}\n{header}\n".encode("utf-8") + b"".join(chunks)


def save_checkpoint(path: Path | str, tensors: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(tensors, meta))
    logger.debug("checkpoint saved path=%s entries=%d", path, len(tensors))
    return path


def load_checkpoint(path: Path | str) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"{path}: cannot read checkpoint ({e.strerror or e})") from e

    tag, _, rest = raw.partition(b"\n")
    if tag.decode("utf-8", "replace") != VERSION_TAG:
        raise DataError(f"{path}: not a {VERSION_TAG} checkpoint")
    header_raw, sep, payload = rest.partition(b"\n")
    if not sep:
        raise DataError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(header_raw)
        entries = header["entries"]
        meta = header.get("meta", {})
    except (ValueError, KeyError, TypeError) as e:
        raise DataError(f"{path}: malformed checkpoint header") from e

    tensors: dict[str, np.ndarray] = {}
    expected = 0
    for e in entries:
        name, shape, offset = e["name"], tuple(e["shape"]), e["offset"]
        n = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        if offset != expected or offset + n > len(payload):
            raise DataError(f"{path}: entry {name!r} does not match payload layout")
        arr = np.frombuffer(payload, dtype=_DTYPE, count=n // _DTYPE.itemsize, offset=offset)
        tensors[name] = arr.reshape(shape).astype(np.float64)
        expected = offset + n
    if expected != len(payload):
        raise DataError(f"{path}: {len(payload) - expected} trailing bytes after last entry")

    bad = [k for k, v in tensors.items() if k.startswith("ccvnorm.") and np.isnan(v).any()]
    if bad:
        raise DataError(f"{path}: NaN in conditioning tables {bad}")
    return Checkpoint(meta, tensors)
