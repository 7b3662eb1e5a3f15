"""Compressed VFL training loops.

``run_training`` follows the general protocol: every Q local iterations the
parties upload compressed embeddings of a fresh mini-batch, the server relays
the full compressed snapshot (plus its own parameters) to every party, and
then each participant takes Q gradient steps on its own block against that
frozen snapshot. ``run_training_q1`` is the Q=1 variant in which the server
returns per-party embedding gradients instead of broadcasting the snapshot.

All messages go through :mod:`cvfl.wire`; byte counters are the lengths of
the encoded buffers.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .compressors import CompressedEmbedding, CompressorSpec, DitherKey, compress, required_q
from .data import VerticalDataset, sample_minibatch
from .nn import (
    MlpModel,
    NonFiniteError,
    backward_all,
    backward_embedding,
    forward_embedding,
    init_model,
    server_loss,
)
from .wire import decode_wire, encode_wire

SERVER = 0


class DivergenceError(RuntimeError):
    def __init__(self, round: int, cause: Exception):
        super().__init__(f"training diverged in round {round}: {cause}")
        self.round = round
        self.series: Optional["MetricsSeries"] = None  # rounds completed before the failure


@dataclass(frozen=True)
class StepSchedule:
    kind: str = "fixed"  # fixed | diminishing
    eta: float = 0.1

    def __post_init__(self):
        if self.kind not in ("fixed", "diminishing"):
            raise ValueError(f"unknown step schedule {self.kind!r}")
        if not self.eta > 0:
            raise ValueError("step size must be positive")


def step_size(schedule: StepSchedule, t0: int) -> float:
    if t0 < 0:
        raise ValueError("round index must be nonnegative")
    if schedule.kind == "fixed":
        return schedule.eta
    return schedule.eta / np.sqrt(t0 + 1.0)


@dataclass(frozen=True)
class TrainConfig:
    M: int
    Q: int = 1
    R: int = 10
    B: int = 16
    schedule: StepSchedule = StepSchedule()
    party_spec: CompressorSpec = CompressorSpec()
    server_spec: CompressorSpec = CompressorSpec("scalar", 8, -4.0, 4.0)
    compress_server_model: bool = False
    seed: int = 0
    embedding_dim: int = 4
    party_hidden: int = 8
    server_hidden: int = 16
    bits_schedule: str = "fixed"  # fixed | required_q
    parallel: bool = False
    record_timing: bool = False
    party_specs: Optional[tuple[CompressorSpec, ...]] = None

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("need at least one party")
        if self.Q < 1:
            raise ValueError("Q must be at least 1")
        if self.R < 0:
            raise ValueError("R must be nonnegative")
        if self.B < 1:
            raise ValueError("batch size must be positive")
        if self.bits_schedule not in ("fixed", "required_q"):
            raise ValueError(f"unknown bits schedule {self.bits_schedule!r}")
        if self.party_specs is not None and len(self.party_specs) != self.M:
            raise ValueError("party_specs needs one entry per party")

    @property
    def T(self) -> int:
        return self.R * self.Q

    def spec_for(self, m: int, t0: int = 0) -> CompressorSpec:
        """Codec for party m (1-based) in round t0."""
        spec = self.party_specs[m - 1] if self.party_specs else self.party_spec
        if self.bits_schedule == "required_q" and spec.kind == "scalar":
            q = required_q(t0 + 1, self.B, self.embedding_dim, spec.value_min, spec.value_max)
            spec = replace(spec, bits=min(q, 31))
        return spec


@dataclass(frozen=True)
class GlobalModel:
    server: MlpModel
    parties: tuple[MlpModel, ...]

    @property
    def block_sizes(self) -> list[int]:
        return [p.output_width for p in self.parties]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.server.flat()] + [p.flat() for p in self.parties])

    def with_flat(self, vec: np.ndarray) -> "GlobalModel":
        pos = self.server.n_params
        server = self.server.with_flat(vec[:pos])
        parties = []
        for p in self.parties:
            parties.append(p.with_flat(vec[pos : pos + p.n_params]))
            pos += p.n_params
        return GlobalModel(server, tuple(parties))

    def embed(self, blocks: Sequence[np.ndarray]) -> np.ndarray:
        return np.vstack([forward_embedding(p, x) for p, x in zip(self.parties, blocks)])


def _model_seed(seed: int, m: int) -> int:
    return int(np.random.SeedSequence([seed, 0x1A17, m]).generate_state(1)[0])


def init_global_model(config: TrainConfig, dataset: VerticalDataset) -> GlobalModel:
    P = config.embedding_dim
    parties = []
    for m, D_m in enumerate(dataset.widths, start=1):
        if config.party_hidden:
            widths, acts = [D_m, config.party_hidden, P], ["tanh", "tanh"]
        else:
            widths, acts = [D_m, P], ["tanh"]
        parties.append(init_model(widths, acts, _model_seed(config.seed, m)))
    C = dataset.n_classes
    if config.server_hidden:
        widths, acts = [P * dataset.M, config.server_hidden, C], ["tanh", "identity"]
    else:
        widths, acts = [P * dataset.M, C], ["identity"]
    return GlobalModel(init_model(widths, acts, _model_seed(config.seed, SERVER)), tuple(parties))


def full_objective(model: GlobalModel, dataset: VerticalDataset) -> tuple[float, np.ndarray]:
    """Full-dataset loss and gradient (server block first), uncompressed."""
    emb = model.embed(dataset.blocks)
    loss = server_loss(model.server, emb, dataset.labels)
    g0, ups = backward_all(model.server, emb, dataset.labels, model.block_sizes)
    parts = [g0.flat()]
    for p, x, up in zip(model.parties, dataset.blocks, ups):
        parts.append(backward_embedding(p, x, up).flat())
    return loss, np.concatenate(parts)


@dataclass
class PartyState:
    party: int
    model: MlpModel
    stale_grad: Optional[np.ndarray] = None


@dataclass
class ServerState:
    model: MlpModel


@dataclass(frozen=True)
class EmbeddingCache:
    """Round-start snapshot every participant trains against."""

    round: int
    server_view: MlpModel
    blocks: tuple[np.ndarray, ...]


@dataclass
class RoundMetrics:
    round: int
    loss: float
    grad_sq_norm: float
    errors: tuple[float, ...]  # server first, then parties 1..M
    up_bytes: int  # cumulative
    down_bytes: int
    up_paper_bits: int
    down_paper_bits: int
    step_size: float
    ms: float = 0.0
    round_up_bytes: int = 0
    round_down_bytes: int = 0


@dataclass
class MetricsSeries:
    rounds: list[RoundMetrics] = field(default_factory=list)
    initial_model: Optional[GlobalModel] = None
    final_model: Optional[GlobalModel] = None
    final_loss: float = float("nan")
    trajectory: list[np.ndarray] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rounds])


def _pool_map(fn, items, parallel: bool):
    if parallel and len(items) > 1:
        with ThreadPoolExecutor(max_workers=len(items)) as ex:
            return list(ex.map(fn, items))
    return [fn(it) for it in items]


def _upload(parties: list[PartyState], dataset, config: TrainConfig, t0: int, xb: list[np.ndarray]):
    """Each party compresses and encodes its embedding batch; the server decodes."""
    msgs: list[CompressedEmbedding] = []
    bufs: list[bytes] = []
    blocks: list[np.ndarray] = []
    for st, x in zip(parties, xb):
        spec = config.spec_for(st.party, t0)
        h = forward_embedding(st.model, x)
        msg = compress(h, spec, DitherKey(config.seed, t0, st.party), st.stale_grad, round=t0, party=st.party)
        buf = encode_wire(msg)
        msgs.append(msg)
        bufs.append(buf)
        blocks.append(decode_wire(buf, spec).reconstructed)
    return msgs, bufs, blocks


def _server_message(server: MlpModel, config: TrainConfig, t0: int) -> tuple[CompressedEmbedding, bytes, MlpModel]:
    theta = server.flat()[:, None]
    if config.compress_server_model:
        spec = config.server_spec
        theta = np.clip(theta, spec.value_min, spec.value_max)
    else:
        spec = CompressorSpec("none")
    msg = compress(theta, spec, DitherKey(config.seed, t0, SERVER), round=t0, party=SERVER)
    buf = encode_wire(msg)
    view = server.with_flat(decode_wire(buf, spec).reconstructed[:, 0])
    err = float(np.sum((view.flat() - server.flat()) ** 2))
    msg.error_sq_fro = err
    return msg, buf, view


def _metrics_start(model: GlobalModel, dataset, config, t0, t_start) -> tuple[float, float]:
    loss, g = full_objective(model, dataset)
    return loss, float(g @ g)


def run_global_round(
    parties: list[PartyState],
    server: ServerState,
    dataset: VerticalDataset,
    config: TrainConfig,
    t0: int,
    totals: tuple[int, int, int, int] = (0, 0, 0, 0),
) -> tuple[list[PartyState], ServerState, RoundMetrics]:
    """One communication round followed by Q local steps at every participant."""
    start = time.perf_counter()
    model = GlobalModel(server.model, tuple(p.model for p in parties))
    try:
        loss, gsq = _metrics_start(model, dataset, config, t0, start)
        batch = sample_minibatch(dataset, config.B, t0, config.seed).indices
        xb, yb = dataset.batch(batch)
        msgs, bufs, blocks = _upload(parties, dataset, config, t0, xb)
        smsg, sbuf, server_view = _server_message(server.model, config, t0)
        cache = EmbeddingCache(t0, server_view, tuple(blocks))
        eta = step_size(config.schedule, t0)
        sizes = model.block_sizes

        def party_job(i: int) -> PartyState:
            st = parties[i]
            theta = st.model
            others = list(cache.blocks)
            up = None
            for _ in range(config.Q):
                others[i] = forward_embedding(theta, xb[i])
                _, ups = backward_all(cache.server_view, np.vstack(others), yb, sizes)
                up = ups[i]
                theta = theta.step(backward_embedding(theta, xb[i], up), eta)
            return PartyState(st.party, theta, up)

        def server_job() -> ServerState:
            theta = server.model
            emb = np.vstack(cache.blocks)
            for _ in range(config.Q):
                g0, _ = backward_all(theta, emb, yb)
                theta = theta.step(g0, eta)
            return ServerState(theta)

        jobs = [lambda: server_job()] + [lambda i=i: party_job(i) for i in range(len(parties))]
        results = _pool_map(lambda f: f(), jobs, config.parallel)
    except NonFiniteError as exc:
        raise DivergenceError(t0, exc) from exc

    new_server, new_parties = results[0], results[1:]
    M = len(parties)
    up = sum(len(b) for b in bufs)
    down = M * (up + len(sbuf))
    up_paper = sum(m.paper_bits for m in msgs)
    down_paper = M * (up_paper + smsg.paper_bits)
    metrics = RoundMetrics(
        round=t0,
        loss=loss,
        grad_sq_norm=gsq,
        errors=(smsg.error_sq_fro,) + tuple(m.error_sq_fro for m in msgs),
        up_bytes=totals[0] + up,
        down_bytes=totals[1] + down,
        up_paper_bits=totals[2] + up_paper,
        down_paper_bits=totals[3] + down_paper,
        step_size=eta,
        ms=(time.perf_counter() - start) * 1e3 if config.record_timing else 0.0,
        round_up_bytes=up,
        round_down_bytes=down,
    )
    return new_parties, new_server, metrics


def run_global_round_q1(
    parties: list[PartyState],
    server: ServerState,
    dataset: VerticalDataset,
    config: TrainConfig,
    t0: int,
    totals: tuple[int, int, int, int] = (0, 0, 0, 0),
) -> tuple[list[PartyState], ServerState, RoundMetrics]:
    """Q=1 round: the server steps and returns d F / d h_m to each party."""
    start = time.perf_counter()
    model = GlobalModel(server.model, tuple(p.model for p in parties))
    try:
        loss, gsq = _metrics_start(model, dataset, config, t0, start)
        batch = sample_minibatch(dataset, config.B, t0, config.seed).indices
        xb, yb = dataset.batch(batch)
        msgs, bufs, blocks = _upload(parties, dataset, config, t0, xb)
        eta = step_size(config.schedule, t0)
        g0, ups = backward_all(server.model, np.vstack(blocks), yb, model.block_sizes)
        new_server = ServerState(server.model.step(g0, eta))
        grad_spec = CompressorSpec("none")
        gbufs = [
            encode_wire(compress(up, grad_spec, DitherKey(config.seed, t0, st.party), round=t0, party=st.party))
            for st, up in zip(parties, ups)
        ]

        def party_job(i: int) -> PartyState:
            st = parties[i]
            up = decode_wire(gbufs[i], grad_spec).reconstructed
            theta = st.model.step(backward_embedding(st.model, xb[i], up), eta)
            return PartyState(st.party, theta, up)

        new_parties = _pool_map(party_job, list(range(len(parties))), config.parallel)
    except NonFiniteError as exc:
        raise DivergenceError(t0, exc) from exc

    up = sum(len(b) for b in bufs)
    down = sum(len(b) for b in gbufs)
    up_paper = sum(m.paper_bits for m in msgs)
    down_paper = sum(32 * u.size for u in ups)
    metrics = RoundMetrics(
        round=t0,
        loss=loss,
        grad_sq_norm=gsq,
        errors=(0.0,) + tuple(m.error_sq_fro for m in msgs),
        up_bytes=totals[0] + up,
        down_bytes=totals[1] + down,
        up_paper_bits=totals[2] + up_paper,
        down_paper_bits=totals[3] + down_paper,
        step_size=eta,
        ms=(time.perf_counter() - start) * 1e3 if config.record_timing else 0.0,
        round_up_bytes=up,
        round_down_bytes=down,
    )
    return new_parties, new_server, metrics


def _run(round_fn, config: TrainConfig, dataset: VerticalDataset, model: Optional[GlobalModel], keep_trajectory: bool):
    if dataset.M != config.M:
        raise ValueError(f"config has M={config.M} but dataset has {dataset.M} parties")
    model = model or init_global_model(config, dataset)
    series = MetricsSeries(initial_model=model)
    parties = [PartyState(m, p) for m, p in enumerate(model.parties, start=1)]
    server = ServerState(model.server)
    totals = (0, 0, 0, 0)
    if keep_trajectory:
        series.trajectory.append(model.flat())
    for t0 in range(config.R):
        try:
            parties, server, rm = round_fn(parties, server, dataset, config, t0, totals)
        except DivergenceError as exc:
            exc.series = series
            raise
        totals = (rm.up_bytes, rm.down_bytes, rm.up_paper_bits, rm.down_paper_bits)
        series.rounds.append(rm)
        if keep_trajectory:
            series.trajectory.append(GlobalModel(server.model, tuple(p.model for p in parties)).flat())
    final = GlobalModel(server.model, tuple(p.model for p in parties)) if series.rounds else model
    series.final_model = final
    series.final_loss = full_objective(final, dataset)[0]
    return series


def run_training(
    config: TrainConfig,
    dataset: VerticalDataset,
    model: Optional[GlobalModel] = None,
    keep_trajectory: bool = False,
) -> MetricsSeries:
    """R rounds of the general protocol; deterministic given ``config.seed``."""
    return _run(run_global_round, config, dataset, model, keep_trajectory)


def run_training_q1(
    config: TrainConfig,
    dataset: VerticalDataset,
    model: Optional[GlobalModel] = None,
    keep_trajectory: bool = False,
) -> MetricsSeries:
    """R rounds of the server-gradient variant; requires Q = 1."""
    if config.Q != 1:
        raise ValueError(f"the server-gradient variant needs Q=1, got Q={config.Q}")
    return _run(run_global_round_q1, config, dataset, model, keep_trajectory)
