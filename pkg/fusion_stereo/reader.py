from __future__ import annotations
from pathlib import Path
from typing import Iterator

from .errors import DataError

try:
    from charset_normalizer import from_bytes
except Exception:
    from_bytes = None

_TEXT_CHARS = bytearray({7, 8, 9, 10, 12, 13, 27} | set(range(0x20, 0x100)))

# калибровки, манифесты и конфиги маленькие, всё крупнее почти наверняка не тот файл
MAX_TEXT_SIZE = 4 * 1024 * 1024


def is_binary_sample(b: bytes, threshold: float = 0.30) -> bool:
    if b"\x00" in b:
        return True
    if not b:
        return False
    nontext = sum(ch not in _TEXT_CHARS for ch in b)
    return (nontext / len(b)) > threshold


def read_text(
    p: Path | str,
    encoding: str = "utf-8",
    max_size: int = MAX_TEXT_SIZE,
    detect_encoding: bool = True,
) -> str:
    """
    Прочитать текстовый файл (калибровка, манифест, конфиг сети).

    Сначала пробуем заданную кодировку, при неудаче — автоопределение
    через charset-normalizer. Бинарный или слишком большой файл — DataError
    с именем файла.
    """
    p = Path(p)
    try:
        data = p.read_bytes()
    except OSError as e:
        raise DataError(f"{p}: cannot read file ({e.strerror or e})") from e
    if max_size and len(data) > max_size:
        raise DataError(f"{p}: size {len(data)} bytes > limit {max_size}")
    if is_binary_sample(data[:2048]):
        raise DataError(f"{p}: binary content detected")
    try:
        return data.decode(encoding)
    except UnicodeDecodeError:
        if detect_encoding and from_bytes is not None:
            best = from_bytes(data).best()
            if best is not None:
                return str(best)
        return data.decode(encoding, errors="replace")


def iter_records(p: Path | str) -> Iterator[tuple[int, list[str]]]:
    """Непустые строки без комментариев '#', разбитые по пробелам; с номером строки (с 1)."""
    for lineno, raw in enumerate(read_text(p).splitlines(), 1):
        s = raw.split("#", 1)[0].strip()
        if not s:
            continue
        yield lineno, s.split()
