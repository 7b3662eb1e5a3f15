"""Numerical checks of the compression-error, perturbation and convergence bounds.

Smoothness, variance, Hessian and Jacobian constants are estimated as
empirical suprema over an explicit, recorded set of probe points. Bound
checks refuse to run on probes outside that domain.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .compressors import CompressorSpec, DitherKey, codec_error_bound, compress, required_V, required_q
from .data import VerticalDataset, synthetic_teacher_dataset
from .nn import NonFiniteError, backward_all, backward_embedding, forward_embedding
from .protocol import GlobalModel, MetricsSeries, StepSchedule, TrainConfig, full_objective, init_global_model, run_training

MAX_PARAMS = 500
FD_STEP = 1e-4
SEGMENT = (0.0, 0.25, 0.5, 0.75, 1.0)


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class AnalysisInstance:
    model: GlobalModel
    dataset: VerticalDataset
    B: int

    def __post_init__(self):
        n = self.model.flat().size
        if n > MAX_PARAMS:
            raise ValueError(f"analysis instances are limited to {MAX_PARAMS} parameters, got {n}")
        if not 1 <= self.B <= self.dataset.N:
            raise ValueError("batch size outside [1, N]")

    @property
    def M(self) -> int:
        return self.dataset.M


def tiny_instance(seed: int, M: int = 2, N: int = 60, D: int = 4, classes: int = 3, P: int = 2, B: int = 4,
                  party_hidden: int = 0, server_hidden: int = 0) -> AnalysisInstance:
    ds = synthetic_teacher_dataset(N, D, classes, M, seed)
    cfg = TrainConfig(M=M, B=B, seed=seed, embedding_dim=P, party_hidden=party_hidden, server_hidden=server_hidden)
    return AnalysisInstance(init_global_model(cfg, ds), ds, B)


@dataclass(frozen=True)
class Probe:
    key: tuple
    model: GlobalModel
    batch: np.ndarray


def _codec_tag(codec: CompressorSpec) -> tuple:
    return (codec.kind, codec.bits, codec.value_min, codec.value_max, codec.selection, codec.dither, codec.k)


def probe_points(instance: AnalysisInstance, codec: CompressorSpec, n: int, seed: int, scale: float = 0.1) -> list[Probe]:
    """Perturbed models and sorted batches; identical across codecs for a given seed."""
    base = instance.model.flat()
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i, 0xA11])
        model = instance.model.with_flat(base + scale * rng.standard_normal(base.size))
        batch = np.sort(rng.choice(instance.dataset.N, instance.B, replace=False))
        out.append(Probe((_codec_tag(codec), seed, i), model, batch))
    return out


# -- F_B as a function of z = (theta_0, h_1, ..., h_M) -----------------------


def _z_grad(model: GlobalModel, z: np.ndarray, labels: np.ndarray, B: int) -> np.ndarray:
    n0 = model.server.n_params
    server = model.server.with_flat(z[:n0])
    emb = z[n0:].reshape(-1, B)
    g0, ups = backward_all(server, emb, labels, model.block_sizes)
    return np.concatenate([g0.flat()] + [u.ravel() for u in ups])


def _z_of(model: GlobalModel, blocks: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([model.server.flat()] + [b.ravel() for b in blocks])


def _block_slices(model: GlobalModel, B: int) -> list[slice]:
    sl, pos = [], 0
    for w in [model.server.n_params] + [P * B for P in model.block_sizes]:
        sl.append(slice(pos, pos + w))
        pos += w
    return sl


def z_hessian(model: GlobalModel, z: np.ndarray, labels: np.ndarray, B: int, step: float = FD_STEP) -> np.ndarray:
    """Central finite differences of the analytic z-gradient, symmetrised."""
    H = np.empty((z.size, z.size))
    for k in range(z.size):
        e = np.zeros_like(z)
        e[k] = step
        H[:, k] = (_z_grad(model, z + e, labels, B) - _z_grad(model, z - e, labels, B)) / (2 * step)
    return 0.5 * (H + H.T)


def embedding_jacobian_norm(party, x: np.ndarray) -> float:
    """Frobenius norm of d vec(h_m) / d theta_m via one backward pass per output entry."""
    P, B = party.output_width, x.shape[0]
    total = 0.0
    for p in range(P):
        for b in range(B):
            up = np.zeros((P, B))
            up[p, b] = 1.0
            total += backward_embedding(party, x, up).sq_norm()
    return float(np.sqrt(total))


def partial_gradients(model: GlobalModel, blocks: Sequence[np.ndarray], labels: np.ndarray,
                      views: Optional[Sequence[np.ndarray]] = None) -> list[np.ndarray]:
    """[grad_0, grad_1, ..., grad_M] of the batch loss; ``views`` overrides embeddings fed to the server."""
    emb = views if views is not None else [forward_embedding(p, x) for p, x in zip(model.parties, blocks)]
    g0, ups = backward_all(model.server, np.vstack(emb), labels, model.block_sizes)
    out = [g0.flat()]
    for p, x, up in zip(model.parties, blocks, ups):
        out.append(backward_embedding(p, x, up).flat())
    return out


def compressed_views(probe: Probe, instance: AnalysisInstance, codec: CompressorSpec, seed: int):
    """Fresh embeddings, compressed embeddings and per-party squared errors at a probe."""
    xb, _ = instance.dataset.batch(probe.batch)
    fresh = [forward_embedding(p, x) for p, x in zip(probe.model.parties, xb)]
    comp, errs = [], []
    for m, h in enumerate(fresh, start=1):
        i = probe.key[2]
        msg = compress(h, codec, DitherKey(seed, i, m), round=i, party=m)
        comp.append(msg.reconstructed)
        errs.append(float(np.sum((msg.reconstructed - h) ** 2)))
    return fresh, comp, errs


def mixed_view(fresh, comp, m: int) -> list[np.ndarray]:
    """Party m's view: own block fresh, every other block compressed (m = 0 means all compressed)."""
    return [f if j == m else c for j, (f, c) in enumerate(zip(fresh, comp), start=1)]


# -- constants ----------------------------------------------------------------


@dataclass(frozen=True)
class AnalysisConstants:
    L: float
    L_m: tuple[float, ...]
    sigma: tuple[float, ...]
    H: tuple[float, ...]
    G: tuple[float, ...]
    B: int
    domain: frozenset = field(default_factory=frozenset, repr=False)
    skipped: int = 0

    def __post_init__(self):
        vals = [self.L, *self.L_m, *self.sigma, *self.H, *self.G]
        if any(v < 0 for v in vals):
            raise ValueError("constants must be nonnegative")


def _safe(fn, *args):
    try:
        with np.errstate(all="raise"):
            return fn(*args)
    except (NonFiniteError, FloatingPointError):
        return None


def estimate_constants(
    instance: AnalysisInstance,
    codecs: Sequence[CompressorSpec] = (),
    probes: int = 6,
    seed: int = 0,
    batches: int = 24,
    extra_models: Sequence[GlobalModel] = (),
    pair_scales: Sequence[float] = (1e-2, 1e-1),
) -> AnalysisConstants:
    """Empirical suprema over probe models, their batches and codec segments.

    H_m is the Frobenius norm of block-row m of the Hessian of F_B in
    z = (theta_0, h_1..h_M), cross-block terms included, maximised over
    points along every segment between fresh and compressed views of each
    codec. ``extra_models`` (e.g. a training trajectory) join the domain of
    every constant.
    """
    ds, B, M = instance.dataset, instance.B, instance.M
    specs = list(codecs) or [CompressorSpec("none")]
    L, Lm = 0.0, np.zeros(M + 1)
    sig2, H, G = np.zeros(M + 1), np.zeros(M + 1), np.zeros(M + 1)
    skipped = 0
    domain = set()
    base_probes = probe_points(instance, specs[0], probes, seed)
    models = [p.model for p in base_probes] + list(extra_models)
    rng = np.random.default_rng([seed, 0x5C])

    for mi, model in enumerate(models):
        for m, (party, x) in enumerate(zip(model.parties, ds.blocks), start=1):
            idx = base_probes[mi % len(base_probes)].batch
            G[m] = max(G[m], embedding_jacobian_norm(party, x[idx]))
        G[0] = np.sqrt(model.server.n_params)

        full = _safe(partial_gradients, model, ds.blocks, ds.labels)
        if full is None:
            skipped += 1
            continue
        acc = np.zeros(M + 1)
        for _ in range(batches):
            idx = np.sort(rng.choice(ds.N, B, replace=False))
            xb, yb = ds.batch(idx)
            part = partial_gradients(model, xb, yb)
            acc += [np.sum((a - b) ** 2) for a, b in zip(full, part)]
        sig2 = np.maximum(sig2, B * acc / batches)

        theta = model.flat()
        _, g_full = full_objective(model, ds)
        idx = base_probes[mi % len(base_probes)].batch
        xb, yb = ds.batch(idx)
        gb = partial_gradients(model, xb, yb)
        for s in pair_scales:
            d = s * rng.standard_normal(theta.size)
            other = model.with_flat(theta + d)
            res = _safe(full_objective, other, ds)
            if res is None:
                skipped += 1
                continue
            dn = np.linalg.norm(d)
            L = max(L, np.linalg.norm(res[1] - g_full) / dn)
            gb2 = partial_gradients(other, xb, yb)
            Lm = np.maximum(Lm, [np.linalg.norm(a - b) / dn for a, b in zip(gb, gb2)])

    for codec in specs:
        extra = [
            Probe((_codec_tag(codec), "extra", i), mdl, np.sort(rng.choice(ds.N, B, replace=False)))
            for i, mdl in enumerate(extra_models)
        ]
        for probe in probe_points(instance, codec, probes, seed) + extra:
            fresh, comp, _ = compressed_views(probe, instance, codec, seed)
            _, yb = ds.batch(probe.batch)
            sl = _block_slices(probe.model, B)
            z = _z_of(probe.model, fresh)
            ends = [_z_of(probe.model, mixed_view(fresh, comp, m)) for m in range(M + 1)]
            points = {z.tobytes(): z}
            for zh in ends:
                for s in SEGMENT:
                    p = z + s * (zh - z)
                    points[p.tobytes()] = p
            for p in points.values():
                Hz = _safe(z_hessian, probe.model, p, yb, B)
                if Hz is None:
                    skipped += 1
                    continue
                H = np.maximum(H, [np.linalg.norm(Hz[s_, :]) for s_ in sl])
            domain.add(probe.key)

    return AnalysisConstants(
        L=float(L),
        L_m=tuple(map(float, Lm)),
        sigma=tuple(map(float, np.sqrt(sig2))),
        H=tuple(map(float, H)),
        G=tuple(map(float, G)),
        B=B,
        domain=frozenset(domain),
        skipped=skipped,
    )


# -- bound reports -----------------------------------------------------------


@dataclass(frozen=True)
class BoundReport:
    name: str
    lhs: float
    rhs: float
    tolerance: float = 0.0
    worst_ratio: float = 0.0

    @property
    def margin(self) -> float:
        """rhs / lhs; inf when lhs is zero."""
        if self.lhs == 0:
            return float("inf")
        return self.rhs / self.lhs

    @property
    def passed(self) -> bool:
        return self.lhs <= self.rhs * (1.0 + self.tolerance)


def lemma1_check(
    instance: AnalysisInstance,
    codec: CompressorSpec,
    constants: AnalysisConstants,
    probes: int = 6,
    seed: int = 0,
    tolerance: float = 0.05,
) -> list[BoundReport]:
    """One report per participant m = 0..M; lhs and rhs are means over probes."""
    pts = probe_points(instance, codec, probes, seed)
    missing = [p.key for p in pts if p.key not in constants.domain]
    if missing:
        raise DomainError(f"{len(missing)} probe(s) lie outside the domain the constants were estimated on")
    M = instance.M
    lhs, rhs = np.zeros(M + 1), np.zeros(M + 1)
    worst = np.zeros(M + 1)
    for probe in pts:
        fresh, comp, errs = compressed_views(probe, instance, codec, seed)
        xb, yb = instance.dataset.batch(probe.batch)
        exact = partial_gradients(probe.model, xb, yb, fresh)
        errs = [0.0] + errs  # the server model is not compressed here
        for m in range(M + 1):
            pert = partial_gradients(probe.model, xb, yb, mixed_view(fresh, comp, m))
            a = float(np.sum((pert[m] - exact[m]) ** 2))
            b = constants.H[m] ** 2 * constants.G[m] ** 2 * (sum(errs) - errs[m])
            lhs[m] += a / len(pts)
            rhs[m] += b / len(pts)
            if a > 0:
                worst[m] = max(worst[m], a / b if b > 0 else np.inf)
    tag = f"lemma1[{codec.kind}{codec.bits}]"
    return [BoundReport(f"{tag} m={m}", lhs[m], rhs[m], tolerance, worst[m]) for m in range(M + 1)]


@dataclass(frozen=True)
class Theorem1Terms:
    initial_gap: float
    variance: float
    compression: float
    precondition_ok: bool

    @property
    def total(self) -> float:
        return self.initial_gap + self.variance + self.compression


def max_step(config: TrainConfig, constants: AnalysisConstants) -> float:
    return 1.0 / (16 * config.Q * max(constants.L, *constants.L_m))


def theorem1_rhs(
    config: TrainConfig,
    constants: AnalysisConstants,
    F0: float,
    errors: np.ndarray,
    FT: float = 0.0,
) -> Theorem1Terms:
    """Three-term fixed-step bound. ``errors`` is (R, M+1), server column first.

    ``FT`` defaults to 0, a valid lower bound for cross-entropy, which only
    loosens the first term.
    """
    if config.schedule.kind != "fixed":
        raise ValueError("the fixed-step bound needs a fixed schedule")
    eta, Q, R, T, B = config.schedule.eta, config.Q, config.R, config.T, config.B
    ok = eta <= max_step(config, constants)
    if not ok:
        warnings.warn(f"step size {eta} exceeds the precondition bound {max_step(config, constants):.3g}")
    E = np.asarray(errors, dtype=np.float64).reshape(R, -1)
    per_round_total = E.sum(axis=1)
    third = 0.0
    for m in range(E.shape[1]):
        others = float(np.sum(per_round_total - E[:, m]))
        third += constants.H[m] ** 2 * constants.G[m] ** 2 * others
    return Theorem1Terms(
        initial_gap=4.0 * (F0 - FT) / (eta * T),
        variance=6.0 * eta * Q * constants.L * sum(s**2 for s in constants.sigma) / B,
        compression=92.0 * Q**2 / R * third,
        precondition_ok=ok,
    )


def series_errors(series: MetricsSeries) -> np.ndarray:
    return np.array([r.errors for r in series.rounds], dtype=np.float64)


@dataclass(frozen=True)
class RateRow:
    T: int
    mean_grad_sq: float
    per_seed: tuple[float, ...]
    diverged: int


def rate_probe(template: TrainConfig, dataset: VerticalDataset, T_values: Sequence[int],
               seeds: Sequence[int], c: Optional[float] = None) -> list[RateRow]:
    """Seed-averaged mean ||grad F||^2 over rounds at each T, with eta = c / sqrt(T)."""
    if len(T_values) < 2 or len(seeds) < 3:
        raise ValueError("need at least two horizons and three seeds")
    c = template.schedule.eta if c is None else c
    rows = []
    for T in T_values:
        if T % template.Q:
            raise ValueError(f"T={T} is not a multiple of Q={template.Q}")
        vals, diverged = [], 0
        for s in seeds:
            cfg = TrainConfig(**{**template.__dict__, "R": T // template.Q, "seed": s,
                                 "schedule": StepSchedule("fixed", c / np.sqrt(T))})
            try:
                series = run_training(cfg, dataset)
            except RuntimeError:
                diverged += 1
                continue
            vals.append(float(series.column("grad_sq_norm").mean()))
        rows.append(RateRow(T, float(np.mean(vals)) if vals else float("nan"), tuple(vals), diverged))
    return rows


# -- packaged checks ---------------------------------------------------------


def codec_bound_check(spec: CompressorSpec, trials: int = 1000, B: int = 16, P: int = 8, seed: int = 0,
                      tolerance: float = 0.05) -> BoundReport:
    """Empirical squared error on uniform embeddings against the worst-case codec bound.

    Quantizers are compared in mean; top-k is deterministic, so its worst
    trial is compared with no tolerance.
    """
    bound = codec_error_bound(spec, B, P)
    errs = np.empty(trials)
    for i in range(trials):
        h = np.random.default_rng([seed, i, 0xC0DE]).uniform(spec.value_min, spec.value_max, size=(P, B))
        errs[i] = compress(h, spec, DitherKey(seed, i, 1)).error_sq_fro
    name = f"codec[{spec.kind}{spec.bits}{'' if spec.dither else ' nodither'}]"
    if spec.kind == "topk":
        return BoundReport(name, float(errs.max()), bound, 0.0)
    return BoundReport(name, float(errs.mean()), bound, tolerance)


def calculator_checks(Ts: Sequence[float] = (1e2, 1e3, 1e4, 1e5), B: int = 16, P: int = 8) -> list[BoundReport]:
    """Parameter-choice scaling: q grows by at most one bit and V halves when T quadruples."""
    out = []
    for T in Ts:
        q1, q4 = required_q(T, B, P, -1.0, 1.0), required_q(4 * T, B, P, -1.0, 1.0)
        out.append(BoundReport(f"required_q T={T:g}", q4, q1 + 1))
        v1, v4 = required_V(T, B, P), required_V(4 * T, B, P)
        out.append(BoundReport(f"required_V T={T:g}", abs(v4 - v1 / 2), 0.0))
    return out


def theorem1_end_to_end(seed: int = 7, Q: int = 2, R: int = 40, codec: CompressorSpec = CompressorSpec("scalar", 4),
                        safety: float = 0.5) -> tuple[BoundReport, Theorem1Terms]:
    """Train a tiny instance at ``safety`` times the step-size limit and compare against the bound.

    Constants are re-estimated over the resulting trajectory; the report
    fails if the step size no longer meets the precondition there.
    """
    inst = tiny_instance(seed)
    cfg = TrainConfig(M=inst.M, Q=Q, R=R, B=inst.B, seed=seed, embedding_dim=2, party_hidden=0,
                      server_hidden=0, party_spec=codec)
    pre = estimate_constants(inst, [codec], probes=4, seed=seed)
    cfg = TrainConfig(**{**cfg.__dict__, "schedule": StepSchedule("fixed", safety * max_step(cfg, pre))})
    series = run_training(cfg, inst.dataset, inst.model, keep_trajectory=True)
    traj = [inst.model.with_flat(v) for v in series.trajectory]
    const = estimate_constants(inst, [codec], probes=4, seed=seed, extra_models=traj)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        terms = theorem1_rhs(cfg, const, series.rounds[0].loss, series_errors(series), FT=series.final_loss)
    measured = float(series.column("grad_sq_norm").mean())
    rhs = terms.total if terms.precondition_ok else 0.0
    return BoundReport("theorem1 fixed step", measured, rhs), terms


LEMMA_CODECS = (CompressorSpec("scalar", 2), CompressorSpec("lattice2d", 2), CompressorSpec("topk", 8))


def verify_suite(trials: int = 1000, seeds: Sequence[int] = (0, 1, 2)) -> list[BoundReport]:
    reports = [codec_bound_check(CompressorSpec(kind, b), trials) for kind in ("scalar", "lattice2d", "topk")
               for b in (2, 3, 4)]
    for s in seeds:
        inst = tiny_instance(s)
        const = estimate_constants(inst, LEMMA_CODECS, probes=6, seed=s)
        for codec in LEMMA_CODECS:
            reports.extend(lemma1_check(inst, codec, const, probes=6, seed=s))
    reports.append(theorem1_end_to_end()[0])
    reports.extend(calculator_checks())
    return reports
