"""metrics.csv rows: one per global round, cumulative wire byte counters."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .protocol import MetricsSeries

FORMAT_VERSION = 1


def metrics_header(M: int) -> list[str]:
    errs = [f"err_party_{m}" for m in range(M + 1)]
    return ["round", "loss", "grad_sq_norm", *errs, "up_bytes", "down_bytes", "step_size", "ms"]


@dataclass(frozen=True)
class MetricsRow:
    round: int
    loss: float
    grad_sq_norm: float
    errors: tuple[float, ...]  # err_party_0 is the server model
    up_bytes: int
    down_bytes: int
    step_size: float
    ms: float

    def cells(self) -> list[str]:
        vals = [self.loss, self.grad_sq_norm, *self.errors]
        return [str(self.round), *map(repr, vals), str(self.up_bytes), str(self.down_bytes),
                repr(self.step_size), repr(self.ms)]

    @classmethod
    def parse(cls, cells: list[str]) -> "MetricsRow":
        return cls(
            round=int(cells[0]),
            loss=float(cells[1]),
            grad_sq_norm=float(cells[2]),
            errors=tuple(float(c) for c in cells[3:-4]),
            up_bytes=int(cells[-4]),
            down_bytes=int(cells[-3]),
            step_size=float(cells[-2]),
            ms=float(cells[-1]),
        )


def rows_from_series(series: MetricsSeries) -> list[MetricsRow]:
    return [
        MetricsRow(r.round, float(r.loss), float(r.grad_sq_norm), tuple(float(e) for e in r.errors),
                   r.up_bytes, r.down_bytes, float(r.step_size), float(r.ms))
        for r in series.rounds
    ]


def write_metrics(path: str | Path, rows: Iterable[MetricsRow], M: int) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(metrics_header(M))
        for row in rows:
            w.writerow(row.cells())


def read_metrics(path: str | Path) -> list[MetricsRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        M = len(header) - 8
        if header != metrics_header(M):
            raise ValueError(f"{path}: unexpected metrics header {header}")
        return [MetricsRow.parse(row) for row in reader]
