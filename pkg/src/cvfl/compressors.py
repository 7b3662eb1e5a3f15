"""Embedding codecs: dithered uniform scalar, dithered 2-D hexagonal lattice, top-k.

Every codec maps a (P_m, B) embedding matrix to a :class:`CompressedEmbedding`
carrying the receiver-side reconstruction, the transmitted codes, and exact bit
counts. Reconstruction helpers are shared with :mod:`cvfl.wire` so that a
decoded message is bit-identical to what the sender computed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

KINDS = ("none", "scalar", "lattice2d", "topk")
SELECTIONS = ("magnitude", "stale_gradient")
FULL_PRECISION_BITS = 32


class RangeError(ValueError):
    pass


@dataclass(frozen=True)
class CompressorSpec:
    kind: str = "none"
    bits: int = 32
    value_min: float = -1.0
    value_max: float = 1.0
    selection: str = "magnitude"
    dither: bool = True
    k: Optional[int] = None  # top-k override; derived from ``bits`` when None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown codec kind {self.kind!r}")
        if not 1 <= self.bits <= 32:
            raise ValueError(f"bits per component must be in [1, 32], got {self.bits}")
        if not self.value_min < self.value_max:
            raise ValueError("value_min must be below value_max")
        if self.selection not in SELECTIONS:
            raise ValueError(f"unknown top-k selection {self.selection!r}")

    @property
    def is_identity(self) -> bool:
        return self.kind == "none" or self.bits >= FULL_PRECISION_BITS

    @property
    def codec_id(self) -> int:
        return 0 if self.is_identity else KINDS.index(self.kind)


@dataclass(frozen=True)
class DitherKey:
    seed: int
    round: int
    party: int

    @property
    def value(self) -> int:
        """64-bit key shared by sender and receiver."""
        ss = np.random.SeedSequence([self.seed, self.round, self.party])
        return int(ss.generate_state(1, np.uint64)[0])


@dataclass
class CompressedEmbedding:
    reconstructed: np.ndarray
    payload_bits: int  # body bits on the wire (header excluded)
    paper_bits: int  # values-only count: 32 per float, b per quantized component
    error_sq_fro: Optional[float]  # None when decoded without the original
    spec: CompressorSpec
    key: int
    codes: tuple = field(default=(), repr=False)
    round: int = 0
    party: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.reconstructed.shape


def _dither_rng(key: int) -> np.random.Generator:
    return np.random.default_rng(key)


def _key_of(key) -> int:
    return key.value if isinstance(key, DitherKey) else int(key)


def _check_range(h: np.ndarray, spec: CompressorSpec) -> None:
    lo, hi = spec.value_min, spec.value_max
    if np.any(h < lo - 1e-12) or np.any(h > hi + 1e-12):
        bad = np.argwhere((h < lo - 1e-12) | (h > hi + 1e-12))[0]
        raise RangeError(
            f"entry {tuple(int(i) for i in bad)} = {h[tuple(bad)]!r} outside codec range [{lo}, {hi}]"
        )


# -- identity -----------------------------------------------------------------


def compress_none(h: np.ndarray, spec: CompressorSpec, key, round: int = 0, party: int = 0) -> CompressedEmbedding:
    h = np.asarray(h, dtype=np.float64)
    P, B = h.shape
    return CompressedEmbedding(
        reconstructed=h.copy(),
        payload_bits=64 * P * B,
        paper_bits=32 * P * B,
        error_sq_fro=0.0,
        spec=spec,
        key=_key_of(key),
        codes=(h.copy(),),
        round=round,
        party=party,
    )


# -- scalar -------------------------------------------------------------------


def scalar_step(spec: CompressorSpec) -> float:
    return (spec.value_max - spec.value_min) / 2.0**spec.bits


def scalar_dither(key: int, shape: tuple[int, int], spec: CompressorSpec) -> np.ndarray:
    if not spec.dither:
        return np.zeros(shape)
    delta = scalar_step(spec)
    return _dither_rng(key).uniform(-delta / 2, delta / 2, size=shape)


def scalar_reconstruct(idx: np.ndarray, dither: np.ndarray, spec: CompressorSpec) -> np.ndarray:
    delta = scalar_step(spec)
    return spec.value_min + (idx + 0.5) * delta - dither


def compress_scalar(h: np.ndarray, spec: CompressorSpec, key, round: int = 0, party: int = 0) -> CompressedEmbedding:
    """Uniform 2^q-level quantizer with bin-midpoint levels and subtractive dither."""
    if spec.kind != "scalar":
        raise ValueError(f"compress_scalar called with kind={spec.kind!r}")
    h = np.asarray(h, dtype=np.float64)
    _check_range(h, spec)
    q = spec.bits
    P, B = h.shape
    kv = _key_of(key)
    x = np.clip(h, spec.value_min, spec.value_max)
    u = scalar_dither(kv, h.shape, spec)
    delta = scalar_step(spec)
    idx = np.clip(np.floor((x + u - spec.value_min) / delta), 0, 2**q - 1).astype(np.uint64)
    rec = scalar_reconstruct(idx, u, spec)
    return CompressedEmbedding(
        reconstructed=rec,
        payload_bits=P * B * q,
        paper_bits=P * B * q,
        error_sq_fro=float(np.sum((rec - h) ** 2)),
        spec=spec,
        key=kv,
        codes=(idx,),
        round=round,
        party=party,
    )


# -- 2-D hexagonal lattice ----------------------------------------------------


def lattice_side(bits: int) -> int:
    return 2**bits


def lattice_cell_volume(bits: int) -> float:
    """Cell area in unit-square coordinates: 2^{2b} cells tile the square."""
    return 1.0 / 4.0**bits


def lattice_codebook(bits: int) -> np.ndarray:
    """All 2^{2b} codewords, row-major, as an (n*n, 2) array of (x, y).

    Rows sit at heights (r + 1/2)/n; odd rows are shifted by half a spacing,
    which is a hexagonal lattice stretched to tile the unit square.
    """
    n = lattice_side(bits)
    r, c = np.divmod(np.arange(n * n), n)
    x = (c + 0.25 + 0.5 * (r % 2)) / n
    y = (r + 0.5) / n
    return np.stack([x, y], axis=1)


def _nearest_codeword(pts: np.ndarray, bits: int) -> np.ndarray:
    """Index of the nearest codeword for each (x, y) row of ``pts``."""
    n = lattice_side(bits)
    base = np.clip(np.floor(pts[:, 1] * n - 0.5), 0, n - 1).astype(np.int64)
    best = np.full(len(pts), -1, dtype=np.int64)
    best_d = np.full(len(pts), np.inf)
    for dr in (-1, 0, 1, 2):
        r = np.clip(base + dr, 0, n - 1)
        c = np.clip(np.rint(pts[:, 0] * n - 0.25 - 0.5 * (r % 2)), 0, n - 1).astype(np.int64)
        dx = pts[:, 0] - (c + 0.25 + 0.5 * (r % 2)) / n
        dy = pts[:, 1] - (r + 0.5) / n
        d = dx * dx + dy * dy
        idx = r * n + c
        better = (d < best_d) | ((d == best_d) & (idx < best))
        best = np.where(better, idx, best)
        best_d = np.where(better, d, best_d)
    return best


def _reduce_to_cell(p: np.ndarray, n: int) -> np.ndarray:
    """Subtract the nearest point of the infinite lattice, leaving the Voronoi offset."""
    base = np.floor(p[:, 1] * n)
    best = np.full(p.shape, np.inf)
    best_d = np.full(len(p), np.inf)
    for dr in (-1, 0, 1, 2):
        r = base + dr
        c = np.rint(p[:, 0] * n - 0.5 * r)
        off = np.stack([p[:, 0] - (c + 0.5 * r) / n, p[:, 1] - r / n], axis=1)
        d = np.sum(off * off, axis=1)
        better = d < best_d
        best[better] = off[better]
        best_d = np.where(better, d, best_d)
    return best


def lattice_dither(key: int, npairs: int, spec: CompressorSpec) -> np.ndarray:
    """Dither uniform over the lattice's Voronoi cell, shape (npairs, 2)."""
    if not spec.dither:
        return np.zeros((npairs, 2))
    n = lattice_side(spec.bits)
    ab = _dither_rng(key).uniform(0.0, 1.0, size=(npairs, 2))
    p = np.stack([(ab[:, 0] + 0.5 * ab[:, 1]) / n, ab[:, 1] / n], axis=1)
    return _reduce_to_cell(p, n)


def _pairs_layout(P: int) -> int:
    return (P + 1) // 2


def lattice_reconstruct(codes: np.ndarray, dither: np.ndarray, spec: CompressorSpec, P: int) -> np.ndarray:
    """Inverse map; ``codes`` has shape (npairs_rows, B), row-major pair order."""
    npr, B = codes.shape
    book = lattice_codebook(spec.bits)
    unit = book[codes.reshape(-1).astype(np.int64)] - dither
    width = spec.value_max - spec.value_min
    vals = spec.value_min + unit * width  # (npr*B, 2)
    vals = vals.reshape(npr, B, 2)
    out = np.empty((2 * npr, B))
    out[0::2] = vals[:, :, 0]
    out[1::2] = vals[:, :, 1]
    return out[:P]


def compress_lattice2d(h: np.ndarray, spec: CompressorSpec, key, round: int = 0, party: int = 0) -> CompressedEmbedding:
    """Pairwise hexagonal lattice quantizer with subtractive dither.

    Rows (2p, 2p+1) of each column form one pair; an odd trailing row is
    padded with the in-range value closest to zero and dropped on output.
    """
    if spec.kind != "lattice2d":
        raise ValueError(f"compress_lattice2d called with kind={spec.kind!r}")
    h = np.asarray(h, dtype=np.float64)
    _check_range(h, spec)
    P, B = h.shape
    npr = _pairs_layout(P)
    padded = np.empty((2 * npr, B))
    padded[:P] = np.clip(h, spec.value_min, spec.value_max)
    if 2 * npr > P:
        padded[P:] = min(max(0.0, spec.value_min), spec.value_max)
    width = spec.value_max - spec.value_min
    unit = (padded - spec.value_min) / width
    pts = np.stack([unit[0::2].reshape(-1), unit[1::2].reshape(-1)], axis=1)
    kv = _key_of(key)
    d = lattice_dither(kv, npr * B, spec)
    codes = _nearest_codeword(pts + d, spec.bits).reshape(npr, B).astype(np.uint64)
    rec = lattice_reconstruct(codes, d, spec, P)
    bits = npr * B * 2 * spec.bits
    return CompressedEmbedding(
        reconstructed=rec,
        payload_bits=bits,
        paper_bits=bits,
        error_sq_fro=float(np.sum((rec - h) ** 2)),
        spec=spec,
        key=kv,
        codes=(codes,),
        round=round,
        party=party,
    )


# -- top-k --------------------------------------------------------------------


def topk_count(P: int, spec: CompressorSpec) -> int:
    """k = round(P * b / 32), at least one component."""
    if spec.k is not None:
        k = spec.k
        if not 1 <= k <= P:
            raise ValueError(f"k={k} outside [1, {P}]")
        return k
    return max(1, min(P, math.floor(P * spec.bits / 32 + 0.5)))


def index_bits(P: int) -> int:
    return max(0, math.ceil(math.log2(P))) if P > 1 else 0


def topk_reconstruct(rows: np.ndarray, values: np.ndarray, P: int) -> np.ndarray:
    k, B = rows.shape
    out = np.zeros((P, B))
    out[rows.astype(np.int64), np.broadcast_to(np.arange(B), (k, B))] = values.astype(np.float64)
    return out


def compress_topk(
    h: np.ndarray,
    spec: CompressorSpec,
    key,
    stale_grad: Optional[np.ndarray] = None,
    round: int = 0,
    party: int = 0,
) -> CompressedEmbedding:
    """Keep the k highest-scoring entries of each column; values travel as float32.

    Scores are |h| in magnitude mode, or |stale_grad| in stale-gradient mode
    (falling back to |h| when no previous gradient exists). Ties go to the
    lowest row index.
    """
    if spec.kind != "topk":
        raise ValueError(f"compress_topk called with kind={spec.kind!r}")
    h = np.asarray(h, dtype=np.float64)
    P, B = h.shape
    k = topk_count(P, spec)
    if spec.selection == "stale_gradient" and stale_grad is not None:
        if stale_grad.shape != h.shape:
            raise ValueError(f"stale gradient shape {stale_grad.shape} != embedding shape {h.shape}")
        score = np.abs(stale_grad)
    else:
        score = np.abs(h)
    order = np.argsort(-score, axis=0, kind="stable")
    rows = np.sort(order[:k], axis=0).astype(np.uint64)
    values = np.take_along_axis(h, rows.astype(np.int64), axis=0).astype(np.float32)
    rec = topk_reconstruct(rows, values, P)
    return CompressedEmbedding(
        reconstructed=rec,
        payload_bits=B * k * (32 + index_bits(P)),
        paper_bits=B * k * 32,
        error_sq_fro=float(np.sum((rec - h) ** 2)),
        spec=spec,
        key=_key_of(key),
        codes=(rows, values),
        round=round,
        party=party,
    )


def compress(
    h: np.ndarray,
    spec: CompressorSpec,
    key,
    stale_grad: Optional[np.ndarray] = None,
    round: int = 0,
    party: int = 0,
) -> CompressedEmbedding:
    if spec.is_identity:
        return compress_none(h, spec, key, round, party)
    if spec.kind == "scalar":
        return compress_scalar(h, spec, key, round, party)
    if spec.kind == "lattice2d":
        return compress_lattice2d(h, spec, key, round, party)
    return compress_topk(h, spec, key, stale_grad, round, party)


# -- error bounds and parameter choice ----------------------------------------


def scalar_error_bound(B: int, P: int, value_min: float, value_max: float, q: int) -> float:
    return B * P * (value_max - value_min) ** 2 / 12.0 * 2.0 ** (-2 * q)


def lattice_error_bound(V: float, B: int, P: int) -> float:
    return V * B * P / 24.0


def topk_error_bound(B: int, P: int, k: int, h_sq_max: float) -> float:
    return B * (1.0 - k / P) * h_sq_max


def codec_error_bound(spec: CompressorSpec, B: int, P: int) -> float:
    """The tabulated error bound for ``spec`` in embedding units."""
    if spec.is_identity:
        return 0.0
    width = spec.value_max - spec.value_min
    if spec.kind == "scalar":
        return scalar_error_bound(B, P, spec.value_min, spec.value_max, spec.bits)
    if spec.kind == "lattice2d":
        return lattice_error_bound(lattice_cell_volume(spec.bits), B, P) * width**2
    h_sq_max = P * max(spec.value_min**2, spec.value_max**2)
    return topk_error_bound(B, P, topk_count(P, spec), h_sq_max)


def required_q(T: float, B: int, P: int, value_min: float, value_max: float) -> int:
    """Smallest q >= 1 whose scalar error bound is at most 1/sqrt(T)."""
    target = 1.0 / math.sqrt(T)
    q = 1
    while scalar_error_bound(B, P, value_min, value_max, q) > target and q < 64:
        q += 1
    return q


def required_V(T: float, B: int, P: int) -> float:
    """Largest cell volume whose lattice error bound is at most 1/sqrt(T)."""
    return 24.0 / (B * P * math.sqrt(T))


def required_k(T: float, B: int, P: int, h_sq_max: float) -> int:
    """Smallest k in [1, P] whose top-k error bound is at most 1/sqrt(T)."""
    target = 1.0 / math.sqrt(T)
    for k in range(1, P + 1):
        if topk_error_bound(B, P, k, h_sq_max) <= target:
            return k
    return P
