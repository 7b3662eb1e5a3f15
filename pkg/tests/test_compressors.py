import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvfl.compressors import (
    CompressorSpec,
    DitherKey,
    RangeError,
    _nearest_codeword,
    _reduce_to_cell,
    codec_error_bound,
    compress,
    compress_lattice2d,
    compress_scalar,
    compress_topk,
    lattice_cell_volume,
    lattice_codebook,
    required_k,
    required_q,
    required_V,
    scalar_error_bound,
    topk_count,
    topk_error_bound,
)

KEY = DitherKey(seed=3, round=0, party=1)

# Frozen oracle values.
# Grid quadrature (1500 x 1500 midpoints over input and dither) of the
# dithered scalar error with a brute-force nearest shifted level: the ratio
# to the undithered Delta^2/12 is 1 + 2^-q because of overload at the edges.
DITHERED_SCALAR_RATIO = {2: 1.2499977777777784, 3: 1.1249959928888893, 4: 1.0624924266666664}
# Brute-force nearest-codeword second moment per pair, in units of the cell
# area, over the interior of the unit square (31/192 exactly).
LATTICE_SECOND_MOMENT = 31.0 / 192.0


def uniform_batch(rng, P, B):
    return rng.uniform(-1.0, 1.0, size=(P, B))


class TestSpec:
    def test_bad_bits(self):
        with pytest.raises(ValueError):
            CompressorSpec("scalar", 0)

    def test_bad_range(self):
        with pytest.raises(ValueError):
            CompressorSpec("scalar", 2, 1.0, 1.0)

    def test_b32_is_identity(self):
        assert CompressorSpec("lattice2d", 32).is_identity
        assert CompressorSpec("scalar", 32).codec_id == 0

    def test_dither_key_deterministic(self):
        assert DitherKey(1, 2, 3).value == DitherKey(1, 2, 3).value
        assert DitherKey(1, 2, 3).value != DitherKey(1, 2, 4).value


class TestIdentity:
    @pytest.mark.parametrize("kind", ["none", "scalar", "lattice2d", "topk"])
    def test_zero_error_bit_identical(self, kind):
        h = uniform_batch(np.random.default_rng(0), 6, 5)
        c = compress(h, CompressorSpec(kind, 32), KEY)
        assert c.error_sq_fro == 0.0
        assert c.reconstructed.tobytes() == h.tobytes()
        assert c.paper_bits == 32 * 30


class TestScalar:
    def test_midpoint_level(self):
        spec = CompressorSpec("scalar", 2, dither=False)
        c = compress_scalar(np.array([[0.3]]), spec, KEY)
        assert c.reconstructed[0, 0] == 0.25

    def test_exact_level(self):
        spec = CompressorSpec("scalar", 2, dither=False)
        h = np.array([[-0.75, -0.25, 0.25, 0.75]])
        c = compress_scalar(h, spec, KEY)
        assert c.error_sq_fro == 0.0

    def test_out_of_range(self):
        with pytest.raises(RangeError):
            compress_scalar(np.array([[1.5]]), CompressorSpec("scalar", 2), KEY)

    def test_payload_bits(self):
        c = compress_scalar(np.zeros((3, 4)), CompressorSpec("scalar", 3), KEY)
        assert c.payload_bits == c.paper_bits == 3 * 4 * 3

    def test_undithered_table_bound(self):
        # B=4, P_m=3, q=3: bound is 4*3*4/12*2^-6 = 0.0625
        spec = CompressorSpec("scalar", 3, dither=False)
        assert scalar_error_bound(4, 3, -1.0, 1.0, 3) == 0.0625
        rng = np.random.default_rng(2024)
        errs = [compress_scalar(uniform_batch(rng, 3, 4), spec, KEY).error_sq_fro for _ in range(1000)]
        assert np.mean(errs) <= 0.0625 * 1.05

    @pytest.mark.parametrize("q", [2, 3, 4])
    def test_dithered_mse_matches_quadrature(self, q):
        spec = CompressorSpec("scalar", q)
        rng = np.random.default_rng(q)
        errs = [
            compress_scalar(uniform_batch(rng, 8, 16), spec, DitherKey(1, t, 0)).error_sq_fro for t in range(1000)
        ]
        expected = DITHERED_SCALAR_RATIO[q] * scalar_error_bound(16, 8, -1.0, 1.0, q)
        assert np.mean(errs) == pytest.approx(expected, rel=0.02)

    def test_dithered_worst_case(self):
        spec = CompressorSpec("scalar", 2)
        rng = np.random.default_rng(5)
        h = uniform_batch(rng, 50, 200)
        c = compress_scalar(h, spec, KEY)
        assert np.max(np.abs(c.reconstructed - h)) <= 0.5

    def test_dither_unbiased(self):
        spec = CompressorSpec("scalar", 2)
        h = np.random.default_rng(9).uniform(-1, 1, size=(1000, 1000))
        c = compress_scalar(h, spec, KEY)
        err = c.reconstructed - h
        se = err.std() / math.sqrt(err.size)
        assert abs(err.mean()) <= 5 * se

    def test_dither_unbiased_at_fixed_input(self):
        # with subtractive dither the error is zero-mean for every input value
        spec = CompressorSpec("scalar", 2)
        h = np.full((1000, 1000), 0.1)
        err = compress_scalar(h, spec, KEY).reconstructed - h
        assert abs(err.mean()) <= 5 * err.std() / 1000


class TestLattice:
    def test_codebook_size_and_volume(self):
        assert len(lattice_codebook(2)) == 16
        assert lattice_cell_volume(2) == 0.0625

    def test_exact_codeword(self):
        spec = CompressorSpec("lattice2d", 2, dither=False)
        book = lattice_codebook(2)
        h = (book.T * 2.0 - 1.0)  # pairs as columns: rows (x, y)
        c = compress_lattice2d(h, spec, KEY)
        assert c.error_sq_fro == 0.0

    @settings(max_examples=50, deadline=None)
    @given(bits=st.integers(1, 5), seed=st.integers(0, 2**32 - 1))
    def test_nearest_matches_brute_force(self, bits, seed):
        pts = np.random.default_rng(seed).uniform(-0.5, 1.5, size=(300, 2))
        book = lattice_codebook(bits)
        brute = np.argmin(((pts[:, None, :] - book[None]) ** 2).sum(-1), axis=1)
        np.testing.assert_array_equal(_nearest_codeword(pts, bits), brute)

    def test_dither_lies_in_voronoi_cell(self):
        from cvfl.compressors import lattice_dither

        d = lattice_dither(KEY.value, 5000, CompressorSpec("lattice2d", 3))
        np.testing.assert_allclose(_reduce_to_cell(d, 8), d, atol=1e-15)

    def test_interior_error_is_cell_second_moment(self):
        # away from the boundary the dithered error is uniform on the cell
        b = 3
        spec = CompressorSpec("lattice2d", b)
        rng = np.random.default_rng(1)
        errs = []
        for t in range(200):
            h = rng.uniform(-0.5, 0.5, size=(8, 16))
            errs.append(compress_lattice2d(h, spec, DitherKey(0, t, 0)).error_sq_fro)
        per_pair_unit = np.mean(errs) / (4 * 16) / 4.0
        assert per_pair_unit / lattice_cell_volume(b) == pytest.approx(LATTICE_SECOND_MOMENT, rel=0.03)

    def test_odd_rows_padded(self):
        h = np.random.default_rng(0).uniform(-1, 1, size=(5, 3))
        c = compress_lattice2d(h, CompressorSpec("lattice2d", 2), KEY)
        assert c.reconstructed.shape == (5, 3)
        assert c.payload_bits == 3 * 3 * 4
        assert c.error_sq_fro == pytest.approx(np.sum((c.reconstructed - h) ** 2), abs=0)


class TestTopK:
    def test_hand_example(self):
        h = np.array([[0.1], [-0.5], [0.3], [-0.2]])
        c = compress_topk(h, CompressorSpec("topk", 2, k=2), KEY)
        np.testing.assert_allclose(c.reconstructed[:, 0], [0, -0.5, 0.3, 0], atol=1e-7)
        assert c.error_sq_fro == pytest.approx(0.05, abs=1e-7)

    def test_k_equals_p(self):
        h = uniform_batch(np.random.default_rng(0), 4, 3)
        c = compress_topk(h, CompressorSpec("topk", 2, k=4), KEY)
        # kept values travel as float32
        np.testing.assert_array_equal(c.reconstructed, h.astype(np.float32).astype(np.float64))
        assert topk_error_bound(3, 4, 4, 4.0) == 0.0

    def test_k_from_bits(self):
        assert topk_count(32, CompressorSpec("topk", 4)) == 4
        assert topk_count(8, CompressorSpec("topk", 2)) == 1
        assert topk_count(16, CompressorSpec("topk", 3)) == 2  # 1.5 rounds up

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            compress_topk(np.zeros((3, 2)), CompressorSpec("topk", 2, k=4), KEY)

    def test_bits_accounting(self):
        c = compress_topk(np.zeros((8, 5)), CompressorSpec("topk", 8), KEY)
        assert c.paper_bits == 5 * 2 * 32
        assert c.payload_bits == 5 * 2 * (32 + 3)

    def test_ties_lowest_row(self):
        h = np.array([[0.5], [-0.5], [0.5]])
        c = compress_topk(h, CompressorSpec("topk", 2, k=1), KEY)
        assert c.reconstructed[:, 0].tolist() == [0.5, 0.0, 0.0]

    def test_stale_gradient_selection(self):
        h = np.array([[0.9], [0.1], [0.2]])
        g = np.array([[0.0], [3.0], [1.0]])
        spec = CompressorSpec("topk", 2, k=1, selection="stale_gradient")
        assert compress_topk(h, spec, KEY, g).reconstructed[:, 0].tolist()[1] == pytest.approx(0.1)
        # no previous gradient: falls back to magnitude
        assert compress_topk(h, spec, KEY, None).reconstructed[0, 0] == pytest.approx(0.9)

    @settings(max_examples=40, deadline=None)
    @given(P=st.integers(2, 6), data=st.data())
    def test_magnitude_is_optimal_sparse_approximation(self, P, data):
        k = data.draw(st.integers(1, P))
        col = np.array(data.draw(st.lists(st.floats(-1, 1), min_size=P, max_size=P)))
        best = min(
            sum(col[i] ** 2 for i in range(P) if i not in support)
            for support in itertools.combinations(range(P), k)
        )
        c = compress_topk(col[:, None], CompressorSpec("topk", 2, k=k), KEY)
        # float32 rounding of kept values is the only slack
        assert c.error_sq_fro <= best + k * 1e-14

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), bits=st.sampled_from([2, 3, 4, 8, 16]))
    def test_deterministic_bound(self, seed, bits):
        h = uniform_batch(np.random.default_rng(seed), 8, 16)
        spec = CompressorSpec("topk", bits)
        c = compress_topk(h, spec, KEY)
        assert c.error_sq_fro <= codec_error_bound(spec, 16, 8)


class TestCommon:
    @pytest.mark.parametrize("kind", ["scalar", "lattice2d", "topk"])
    def test_deterministic(self, kind):
        h = uniform_batch(np.random.default_rng(1), 6, 7)
        spec = CompressorSpec(kind, 3)
        a, b = compress(h, spec, KEY), compress(h, spec, KEY)
        assert a.reconstructed.tobytes() == b.reconstructed.tobytes()

    @pytest.mark.parametrize("kind", ["scalar", "lattice2d", "topk"])
    def test_error_field_is_recomputable(self, kind):
        h = uniform_batch(np.random.default_rng(2), 6, 7)
        c = compress(h, CompressorSpec(kind, 2), KEY)
        assert c.error_sq_fro == float(np.sum((c.reconstructed - h) ** 2))

    @pytest.mark.parametrize("kind", ["scalar", "lattice2d", "topk"])
    def test_error_monotone_in_bits(self, kind):
        means = []
        for b in (2, 3, 4):
            spec = CompressorSpec(kind, b)
            errs = []
            for s in range(100):
                h = uniform_batch(np.random.default_rng(s), 16, 8)
                errs.append(compress(h, spec, DitherKey(s, 0, 0)).error_sq_fro)
            means.append(np.mean(errs))
        assert means[0] >= means[1] >= means[2]


class TestParameterChoice:
    @pytest.mark.parametrize("T", [1e2, 1e3, 1e4, 1e5])
    def test_q_gains_at_most_one_bit(self, T):
        assert required_q(4 * T, 16, 8, -1, 1) <= required_q(T, 16, 8, -1, 1) + 1

    @pytest.mark.parametrize("T", [1e2, 1e3, 1e4, 1e5])
    def test_V_halves(self, T):
        assert required_V(4 * T, 16, 8) == required_V(T, 16, 8) / 2

    def test_q_meets_target_minimally(self):
        T = 1e4
        q = required_q(T, 16, 8, -1, 1)
        assert scalar_error_bound(16, 8, -1, 1, q) <= 1 / math.sqrt(T)
        assert scalar_error_bound(16, 8, -1, 1, q - 1) > 1 / math.sqrt(T)

    def test_k_saturates(self):
        # smallest nonzero error B * h_sq_max / P = 16 > 1/sqrt(T)
        assert required_k(100, 16, 8, 8.0) == 8

    def test_k_small_when_error_tolerated(self):
        assert required_k(1e-6, 1, 8, 1.0) == 1

    def test_monotone_in_T(self):
        Ts = [10.0**e for e in range(1, 9)]
        qs = [required_q(T, 4, 4, -1, 1) for T in Ts]
        ks = [required_k(T, 1, 64, 0.01) for T in Ts]
        Vs = [required_V(T, 4, 4) for T in Ts]
        assert qs == sorted(qs) and ks == sorted(ks) and Vs == sorted(Vs, reverse=True)
