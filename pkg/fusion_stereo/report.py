from __future__ import annotations
import io, json
from pathlib import Path
from typing import Any, Sequence


def _cell(v: Any, exact: bool) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        # csv хранит repr, чтобы значения читались обратно без потерь
        return repr(v) if exact else f"{v:.4f}"
    return str(v)


class TableBuilder:
    """Таблица результатов в csv, md или json; колонки фиксируются при создании."""

    def __init__(self, columns: Sequence[str], mode: str = "csv", title: str = ""):
        if mode not in ("csv", "md", "json"):
            raise ValueError(f"unknown table mode {mode!r}")
        self.mode = mode
        self.columns = list(columns)
        self.title = title
        self.rows: list[list[Any]] = []

    def add_row(self, row: dict[str, Any] | Sequence[Any]) -> None:
        if isinstance(row, dict):
            missing = [c for c in self.columns if c not in row]
            if missing:
                raise KeyError(f"row misses columns {missing}")
            values = [row[c] for c in self.columns]
        else:
            values = list(row)
            if len(values) != len(self.columns):
                raise ValueError(f"row has {len(values)} cells, table has {len(self.columns)} columns")
        self.rows.append(values)

    def extend(self, rows: Sequence[dict[str, Any] | Sequence[Any]]) -> None:
        for r in rows:
            self.add_row(r)

    def build(self) -> str:
        if self.mode == "json":
            return json.dumps([dict(zip(self.columns, r)) for r in self.rows], ensure_ascii=False, indent=2)
        buf = io.StringIO()
        if self.mode == "md":
            if self.title:
                buf.write(f"## {self.title}\n\n")
            buf.write("| " + " | ".join(self.columns) + " |\n")
            buf.write("|" + "---|" * len(self.columns) + "\n")
            for r in self.rows:
                buf.write("| " + " | ".join(_cell(v, False) for v in r) + " |\n")
        else:
            buf.write(",".join(self.columns) + "\n")
            for r in self.rows:
                buf.write(",".join(_cell(v, True) for v in r) + "\n")
        return buf.getvalue()

    def write(self, path: Path | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.build(), encoding="utf-8")
        return path
