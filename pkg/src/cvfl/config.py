"""Experiment configuration: ``key = value`` text with ``#`` comments and optional sections.

Sections only group keys, except ``[party.N]`` whose ``compressor``, ``bits``,
``selection`` and ``topk_k`` keys override the codec of party N (1-based).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

from .compressors import CompressorSpec
from .protocol import StepSchedule, TrainConfig

COMPRESSORS = {"none": "none", "scalar": "scalar", "vector": "lattice2d", "topk": "topk"}
SECTIONS = ("train", "data", "codec", "analysis", "output")
REQUIRED = ("dataset", "M", "Q", "rounds", "compressor", "bits")
PARTY_KEYS = ("compressor", "bits", "selection", "topk_k")


class ConfigError(ValueError):
    def __init__(self, msg: str, line: Optional[int] = None):
        super().__init__(f"line {line}: {msg}" if line else msg)
        self.line = line


@dataclass(frozen=True)
class PartyCodec:
    compressor: Optional[str] = None
    bits: Optional[int] = None
    selection: Optional[str] = None
    topk_k: Optional[int] = None


@dataclass(frozen=True)
class ExperimentConfig:
    # required
    dataset: str
    M: int
    Q: int
    rounds: int
    compressor: str
    bits: int
    # training
    batch: int = 16
    eta: float = 0.1
    schedule: str = "fixed"
    seed: int = 0
    algorithm: str = "general"  # general | q1
    parallel: bool = False
    embedding_dim: int = 4
    party_hidden: int = 8
    server_hidden: int = 16
    # codecs
    value_min: float = -1.0
    value_max: float = 1.0
    selection: str = "magnitude"
    dither: bool = True
    topk_k: Optional[int] = None
    bits_schedule: str = "fixed"
    compress_server_model: bool = False
    server_bits: int = 8
    server_range: float = 4.0
    # data
    n_samples: int = 1000
    n_features: int = 16
    n_classes: int = 3
    teacher_hidden: int = 8
    partition: str = "contiguous"
    csv_path: Optional[str] = None
    label_column: str = "label"
    holdout: float = 0.0
    # output and analysis
    out: str = "out"
    bound_reports: bool = False
    record_timing: bool = False
    parties: tuple = field(default=(), compare=True)

    def __post_init__(self):
        checks = [
            (self.dataset in ("synthetic", "csv"), "dataset must be 'synthetic' or 'csv'"),
            (self.M >= 1, "M must be at least 1"),
            (self.Q >= 1, "Q must be at least 1"),
            (self.rounds >= 0, "rounds must be nonnegative"),
            (self.compressor in COMPRESSORS, f"compressor must be one of {sorted(COMPRESSORS)}"),
            (1 <= self.bits <= 32, "bits must be in [1, 32]"),
            (self.batch >= 1, "batch must be at least 1"),
            (self.eta > 0, "eta must be positive"),
            (self.schedule in ("fixed", "diminishing"), "schedule must be 'fixed' or 'diminishing'"),
            (self.algorithm in ("general", "q1"), "algorithm must be 'general' or 'q1'"),
            (self.algorithm != "q1" or self.Q == 1, "algorithm=q1 requires Q=1"),
            (self.embedding_dim >= 1, "embedding_dim must be at least 1"),
            (self.party_hidden >= 0 and self.server_hidden >= 0, "hidden widths must be nonnegative"),
            (self.value_min < self.value_max, "value_min must be below value_max"),
            (self.selection in ("magnitude", "stale_gradient"), "selection must be 'magnitude' or 'stale_gradient'"),
            (self.bits_schedule in ("fixed", "required_q"), "bits_schedule must be 'fixed' or 'required_q'"),
            (1 <= self.server_bits <= 32, "server_bits must be in [1, 32]"),
            (self.server_range > 0, "server_range must be positive"),
            (self.n_samples >= 1 and self.n_features >= self.M, "need n_samples >= 1 and n_features >= M"),
            (self.n_classes >= 2, "n_classes must be at least 2"),
            (self.partition in ("contiguous", "round_robin"), "partition must be 'contiguous' or 'round_robin'"),
            (self.dataset != "csv" or self.csv_path, "dataset=csv needs csv_path"),
            (0.0 <= self.holdout < 1.0, "holdout must be in [0, 1)"),
            (self.topk_k is None or self.topk_k >= 1, "topk_k must be at least 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        for m, _ in self.parties:
            if not 1 <= m <= self.M:
                raise ConfigError(f"party section {m} outside 1..{self.M}")

    def codec(self, m: Optional[int] = None) -> CompressorSpec:
        over = dict(self.parties).get(m, PartyCodec()) if m else PartyCodec()
        kind = over.compressor or self.compressor
        if kind not in COMPRESSORS:
            raise ConfigError(f"party {m}: unknown compressor {kind!r}")
        return CompressorSpec(
            kind=COMPRESSORS[kind],
            bits=over.bits if over.bits is not None else self.bits,
            value_min=self.value_min,
            value_max=self.value_max,
            selection=over.selection or self.selection,
            dither=self.dither,
            k=over.topk_k if over.topk_k is not None else self.topk_k,
        )

    def train_config(self) -> TrainConfig:
        specs = tuple(self.codec(m) for m in range(1, self.M + 1)) if self.parties else None
        return TrainConfig(
            M=self.M,
            Q=self.Q,
            R=self.rounds,
            B=self.batch,
            schedule=StepSchedule(self.schedule, self.eta),
            party_spec=self.codec(),
            server_spec=CompressorSpec("scalar", self.server_bits, -self.server_range, self.server_range),
            compress_server_model=self.compress_server_model,
            seed=self.seed,
            embedding_dim=self.embedding_dim,
            party_hidden=self.party_hidden,
            server_hidden=self.server_hidden,
            bits_schedule=self.bits_schedule,
            parallel=self.parallel,
            record_timing=self.record_timing,
            party_specs=specs,
        )

    def echo(self) -> list[str]:
        """Canonical ``key = value`` lines; parses back to an equal config."""
        lines = []
        for f in dataclasses.fields(self):
            if f.name == "parties":
                continue
            v = getattr(self, f.name)
            if v is not None:
                lines.append(f"{f.name} = {_fmt(v)}")
        for m, pc in self.parties:
            lines.append(f"[party.{m}]")
            for k in PARTY_KEYS:
                v = getattr(pc, k)
                if v is not None:
                    lines.append(f"{k} = {_fmt(v)}")
        return lines

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig) if f.name != "parties"}
_PARTY_TYPES = {"compressor": str, "bits": int, "selection": str, "topk_k": int}
_TYPES = {
    name: {"int": int, "float": float, "bool": bool, "str": str, "Optional[int]": int, "Optional[str]": str}[str(f.type)]
    for name, f in _FIELDS.items()
}


def _convert(key: str, raw: str, typ, line: int):
    if typ is bool:
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ConfigError(f"{key} expects a boolean, got {raw!r}", line)
    if typ is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key} expects an integer, got {raw!r}", line) from None
    if typ is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key} expects a number, got {raw!r}", line) from None
    return raw


def parse_config(text: str) -> ExperimentConfig:
    values: dict = {}
    lines_of: dict = {}
    parties: dict[int, dict] = {}
    section: Optional[str] = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section.startswith("party."):
                try:
                    m = int(section[6:])
                except ValueError:
                    raise ConfigError(f"bad party section [{section}]", lineno) from None
                parties.setdefault(m, {})
            elif section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]", lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value, got {line!r}", lineno)
        key, val = (s.strip() for s in line.split("=", 1))
        if section and section.startswith("party."):
            if key not in _PARTY_TYPES:
                raise ConfigError(f"unknown key {key!r} in [{section}]", lineno)
            parties[int(section[6:])][key] = _convert(key, val, _PARTY_TYPES[key], lineno)
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        values[key] = _convert(key, val, _TYPES[key], lineno)
        lines_of[key] = lineno
    missing = [k for k in REQUIRED if k not in values]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")
    values["parties"] = tuple(sorted((m, PartyCodec(**kw)) for m, kw in parties.items()))
    try:
        return ExperimentConfig(**values)
    except ConfigError as exc:
        # attribute the violation to the first key it names, when possible
        for k, ln in lines_of.items():
            if str(exc).startswith(k + " ") or f"={k}" in str(exc):
                raise ConfigError(str(exc), ln) from None
        raise
