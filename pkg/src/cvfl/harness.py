"""Experiment runner: datasets from config, seeded runs, metrics and cost reports."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .analysis import BoundReport
from .compressors import codec_error_bound
from .config import ConfigError, ExperimentConfig
from .data import VerticalDataset, load_csv, partition_features, synthetic_teacher_dataset
from .metrics import FORMAT_VERSION, rows_from_series, write_metrics
from .protocol import DivergenceError, MetricsSeries, run_training, run_training_q1

EXIT_OK = 0
EXIT_DIVERGED = 3
NOT_REACHED = "--"


def load_dataset(cfg: ExperimentConfig) -> tuple[VerticalDataset, Optional[VerticalDataset]]:
    """Training split and optional held-out split (samples shuffled by seed before splitting)."""
    if cfg.dataset == "synthetic":
        full = synthetic_teacher_dataset(cfg.n_samples, cfg.n_features, cfg.n_classes, cfg.M, cfg.seed,
                                         hidden=cfg.teacher_hidden, scheme=cfg.partition)
        X, y = full.reassemble(), full.labels
    else:
        X, y = load_csv(cfg.csv_path, cfg.label_column)
    if cfg.holdout == 0:
        return partition_features(X, y, cfg.M, cfg.partition, cfg.seed), None
    perm = np.random.default_rng([cfg.seed, 0x401D]).permutation(len(y))
    n_test = max(1, int(round(cfg.holdout * len(y))))
    test, train = perm[:n_test], perm[n_test:]
    return (partition_features(X[train], y[train], cfg.M, cfg.partition, cfg.seed),
            partition_features(X[test], y[test], cfg.M, cfg.partition, cfg.seed))


def accuracy(series: MetricsSeries, data: VerticalDataset) -> float:
    model = series.final_model
    logits, _ = model.server.forward(model.embed(data.blocks))
    if logits.shape[0] == 1:
        pred = (logits[0] > 0).astype(int)
    else:
        pred = logits.argmax(axis=0)
    return float(np.mean(pred == data.labels))


def codec_bound_reports(series: MetricsSeries, cfg: ExperimentConfig) -> list[BoundReport]:
    """Per round and party: measured squared error against the codec's worst-case bound."""
    tc = cfg.train_config()
    out = []
    for r in series.rounds:
        for m, err in enumerate(r.errors[1:], start=1):
            bound = codec_error_bound(tc.spec_for(m, r.round), tc.B, tc.embedding_dim)
            out.append(BoundReport(f"codec round={r.round} party={m}", err, bound))
    return out


def write_bound_reports(path: Path, reports: Sequence[BoundReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "lhs", "rhs", "margin", "passed"])
        for r in reports:
            w.writerow([r.name, repr(r.lhs), repr(r.rhs), repr(r.margin), int(r.passed)])


@dataclass
class ExperimentResult:
    status: int
    out: Path
    series: Optional[MetricsSeries]
    message: str = ""


def _prepare_out(out: Path) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from None


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    out = Path(cfg.out)
    _prepare_out(out)
    train, test = load_dataset(cfg)
    tc = cfg.train_config()
    runner = run_training_q1 if cfg.algorithm == "q1" else run_training
    status, message = EXIT_OK, "completed"
    try:
        series = runner(tc, train)
    except DivergenceError as exc:
        series, status, message = exc.series, EXIT_DIVERGED, str(exc)

    write_metrics(out / "metrics.csv", rows_from_series(series), cfg.M)
    lines = [f"format_version = {FORMAT_VERSION}", f"package_version = {__version__}", f"seed = {cfg.seed}", "",
             "[config]", *cfg.echo(), "", "[result]", f"status = {message}", f"rounds_completed = {len(series.rounds)}"]
    if status == EXIT_OK:
        lines.append(f"final_loss = {series.final_loss!r}")
        if test is not None:
            lines.append(f"holdout_accuracy = {accuracy(series, test)!r}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if cfg.bound_reports:
        write_bound_reports(out / "bound_reports.csv", codec_bound_reports(series, cfg))
    return ExperimentResult(status, out, series if status == EXIT_OK else None, message)


@dataclass(frozen=True)
class CostRow:
    name: str
    round: Optional[int]  # rounds of communication needed; None when never reached
    wire_bytes: Optional[int]
    paper_bytes: Optional[float]
    final_loss: float


def _bytes_before(series: MetricsSeries, t: int) -> tuple[int, float]:
    if t == 0:
        return 0, 0.0
    r = series.rounds[t - 1]
    return r.up_bytes + r.down_bytes, (r.up_paper_bits + r.down_paper_bits) / 8.0


def comm_cost_report(named: Sequence[tuple[str, MetricsSeries]], target: float) -> list[CostRow]:
    """Bytes spent before the loss first drops to ``target``.

    The loss in row t is measured at the model entering round t, so the
    cost counts rounds 0..t-1; the model after the last round is checked too.
    Both the wire convention and the 32-bits-per-float convention are given.
    """
    rows = []
    for name, s in named:
        hit = next((r.round for r in s.rounds if r.loss <= target), None)
        if hit is None and s.rounds and s.final_loss <= target:
            hit = len(s.rounds)
        if hit is None:
            rows.append(CostRow(name, None, None, None, s.final_loss))
        else:
            wire, paper = _bytes_before(s, hit)
            rows.append(CostRow(name, hit, wire, paper, s.final_loss))
    return rows


def format_cost_table(rows: Sequence[CostRow], target: float) -> str:
    head = f"{'run':<24} {'rounds':>8} {'wire MB':>12} {'32-bit MB':>12} {'final loss':>11}"
    lines = [f"target loss {target}", head]
    for r in rows:
        if r.round is None:
            cells = [NOT_REACHED] * 3
        else:
            cells = [str(r.round), f"{r.wire_bytes / 1e6:.6f}", f"{r.paper_bytes / 1e6:.6f}"]
        lines.append(f"{r.name:<24} {cells[0]:>8} {cells[1]:>12} {cells[2]:>12} {r.final_loss:>11.5f}")
    return "\n".join(lines)


def write_cost_table(path: Path, rows: Sequence[CostRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "rounds", "wire_bytes", "paper_bytes", "final_loss"])
        for r in rows:
            cells = [NOT_REACHED] * 3 if r.round is None else [r.round, r.wire_bytes, repr(r.paper_bytes)]
            w.writerow([r.name, *cells, repr(r.final_loss)])

