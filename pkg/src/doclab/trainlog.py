"""Per-step training records with a stable CSV rendering."""

from __future__ import annotations

import csv
import io
from pathlib import Path


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


class TrainingLog:
    def __init__(self, columns: list[str]):
        self.columns = list(columns)
        self.rows: list[dict] = []

    def append(self, **row) -> None:
        missing = set(self.columns) - set(row)
        if missing:
            raise ValueError(f"log row lacks columns {sorted(missing)}")
        self.rows.append({c: row[c] for c in self.columns})

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in self.columns])
        return buf.getvalue()

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    def __eq__(self, other) -> bool:
        return isinstance(other, TrainingLog) and self.to_csv() == other.to_csv()
