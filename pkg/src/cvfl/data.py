"""Vertically partitioned datasets: partitioning, mini-batch sampling, CSV ingestion."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .nn import init_model


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class VerticalDataset:
    """Party feature blocks over the same N samples; every party sees all labels.

    ``columns[m]`` lists the original column indices held by party m, so
    :meth:`reassemble` inverts the partition exactly.
    """

    blocks: tuple[np.ndarray, ...]
    labels: np.ndarray
    columns: tuple[np.ndarray, ...]

    def __post_init__(self):
        n = len(self.labels)
        for m, (blk, cols) in enumerate(zip(self.blocks, self.columns)):
            if blk.shape != (n, len(cols)):
                raise DataError(f"party {m} block has shape {blk.shape}, expected ({n}, {len(cols)})")

    @property
    def N(self) -> int:
        return len(self.labels)

    @property
    def M(self) -> int:
        return len(self.blocks)

    @property
    def D(self) -> int:
        return sum(b.shape[1] for b in self.blocks)

    @property
    def widths(self) -> list[int]:
        return [b.shape[1] for b in self.blocks]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1

    def reassemble(self) -> np.ndarray:
        X = np.empty((self.N, self.D))
        for blk, cols in zip(self.blocks, self.columns):
            X[:, cols] = blk
        return X

    def batch(self, indices: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        return [b[indices] for b in self.blocks], self.labels[indices]


@dataclass(frozen=True)
class MiniBatchIndex:
    round: int
    indices: np.ndarray


def partition_features(
    X: np.ndarray, y: np.ndarray, M: int, scheme: str = "contiguous", seed: int = 0
) -> VerticalDataset:
    """Split the columns of ``X`` into M disjoint blocks.

    ``contiguous`` gives the first D mod M parties one extra column;
    ``round_robin`` deals a seeded column permutation out to parties in turn.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    N, D = X.shape
    if M < 1 or M > D:
        raise DataError(f"cannot split {D} features across {M} parties")
    if len(y) != N:
        raise DataError(f"{len(y)} labels for {N} samples")
    if scheme == "contiguous":
        base, extra = divmod(D, M)
        bounds = np.cumsum([0] + [base + (1 if m < extra else 0) for m in range(M)])
        cols = [np.arange(bounds[m], bounds[m + 1]) for m in range(M)]
    elif scheme == "round_robin":
        perm = np.random.default_rng(seed).permutation(D)
        cols = [np.sort(perm[m::M]) for m in range(M)]
    else:
        raise DataError(f"unknown partition scheme {scheme!r}")
    return VerticalDataset(
        blocks=tuple(X[:, c].copy() for c in cols),
        labels=y.copy(),
        columns=tuple(cols),
    )


def sample_minibatch(dataset: VerticalDataset, B: int, t0: int, seed: int) -> MiniBatchIndex:
    """Draw B distinct samples; depends only on (seed, t0)."""
    if not 1 <= B <= dataset.N:
        raise DataError(f"batch size {B} outside [1, {dataset.N}]")
    rng = np.random.default_rng([seed, t0, 0xBA7C])
    return MiniBatchIndex(t0, rng.choice(dataset.N, size=B, replace=False))


def synthetic_teacher_dataset(
    N: int, D: int, classes: int, M: int, seed: int, hidden: int = 8, scheme: str = "contiguous"
) -> VerticalDataset:
    """Gaussian features labelled by the argmax of a random teacher MLP.

    For N >= 1000 the teacher is redrawn until every class holds at least 1%
    of the samples.
    """
    if classes < 2:
        raise DataError("need at least two classes")
    rng = np.random.default_rng([seed, 0x7EAC])
    X = rng.normal(size=(N, D))
    for attempt in range(100):
        teacher = init_model([D, hidden, classes], ["tanh", "identity"], int(rng.integers(2**31)))
        # sharper teacher than Glorot so the boundary is not nearly linear
        teacher = teacher.with_flat(3.0 * teacher.flat())
        logits, _ = teacher.forward(X.T)
        y = np.argmax(logits, axis=0)
        counts = np.bincount(y, minlength=classes)
        if N < 1000 or counts.min() >= 0.01 * N:
            break
    else:
        raise DataError("could not draw a teacher with non-degenerate labels")
    return partition_features(X, y, M, scheme, seed)


def load_csv(path: str | Path, label_column: str) -> tuple[np.ndarray, np.ndarray]:
    """Read a headed numeric CSV; returns (features, integer labels)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise DataError(f"{path}: label column {label_column!r} not in header {header}")
        li = header.index(label_column)
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                vals = [float(v) for v in row]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
            lab = vals.pop(li)
            if lab != int(lab):
                raise DataError(f"{path}:{lineno}: label {lab!r} is not an integer")
            rows.append(vals)
            labels.append(int(lab))
    if not rows:
        raise DataError(f"{path}: no data rows")
    return np.array(rows, dtype=np.float64), np.array(labels, dtype=np.int64)


def write_csv(path: str | Path, X: np.ndarray, y: np.ndarray, label_column: str = "label",
              feature_names: Sequence[str] | None = None) -> None:
    names = list(feature_names) if feature_names else [f"x{i}" for i in range(X.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(names + [label_column])
        for row, lab in zip(X, y):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])
