"""Append-only CSV logs shared by every phase of a run."""

from __future__ import annotations

import csv
import os
from pathlib import Path
from typing import Iterable, Sequence

METRICS_FIELDS = ("phase", "step", "metric", "value")


class CsvLog:
    """Appends rows to a CSV file, writing the header on first use.

    ``path=None`` keeps rows in memory only, which is what the library
    functions do when called outside a run directory.
    """

    def __init__(self, path: str | os.PathLike | None, fields: Sequence[str]):
        self.path = Path(path) if path is not None else None
        self.fields = tuple(fields)
        self.rows: list[dict] = []

    def append(self, **row) -> None:
        unknown = set(row) - set(self.fields)
        if unknown:
            raise KeyError(f"unknown columns {sorted(unknown)}")
        self.rows.append(row)
        if self.path is None:
            return
        new = not self.path.exists()
        with open(self.path, "a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.fields)
            if new:
                w.writeheader()
            w.writerow({k: _fmt(row.get(k, "")) for k in self.fields})

    def touch(self) -> None:
        """Create the file with just a header if nothing was logged yet."""
        if self.path is not None and not self.path.exists():
            with open(self.path, "w", newline="") as fh:
                csv.DictWriter(fh, fieldnames=self.fields).writeheader()

    def extend(self, rows: Iterable[dict]) -> None:
        for r in rows:
            self.append(**r)


def metrics_log(run_dir: str | os.PathLike | None) -> CsvLog:
    return CsvLog(Path(run_dir) / "metrics.csv" if run_dir is not None else None, METRICS_FIELDS)


def read_csv(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v
