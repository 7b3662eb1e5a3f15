import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvfl.nn import (
    MlpModel,
    NonFiniteError,
    ShapeError,
    backward_all,
    backward_embedding,
    finite_diff_gradient,
    forward_embedding,
    init_model,
    server_loss,
)


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / scale


def linear(w, b=None, act="identity"):
    w = np.asarray(w, dtype=float)
    b = np.zeros(w.shape[0]) if b is None else np.asarray(b, dtype=float)
    return MlpModel((w,), (b,), (act,))


class TestForwardEmbedding:
    def test_zero_model_gives_zero_embedding(self):
        m = MlpModel((np.zeros((3, 4)),), (np.zeros(3),), ("tanh",))
        x = np.random.default_rng(0).normal(size=(5, 4))
        np.testing.assert_array_equal(forward_embedding(m, x), np.zeros((3, 5)))

    def test_identity_model_transposes(self):
        m = linear(np.eye(3))
        x = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(forward_embedding(m, x), x.T)

    def test_seeded_golden(self):
        # straight-line scalar evaluation of init_model([2, 3, 2], tanh, seed=42)
        m = init_model([2, 3, 2], ["tanh", "tanh"], 42)
        x = np.array([[0.5, -1.0], [2.0, 0.25]])
        expected = np.array(
            [
                [0.7372814785623265, 0.9463570897875716],
                [-0.7050331363805032, -0.8345025191190831],
            ]
        )
        np.testing.assert_allclose(forward_embedding(m, x), expected, rtol=0, atol=1e-15)

    def test_shape_mismatch_names_both_shapes(self):
        m = init_model([4, 2], ["tanh"], 0)
        with pytest.raises(ShapeError, match=r"\(3, 5\).*4"):
            forward_embedding(m, np.zeros((3, 5)))

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.1, 100.0))
    def test_tanh_output_bounded(self, seed, scale):
        m = init_model([3, 5, 4], ["tanh", "tanh"], seed)
        x = np.random.default_rng(seed).normal(scale=scale, size=(7, 3))
        h = forward_embedding(m, x)
        assert np.all(np.abs(h) <= 1.0)


class TestServerLoss:
    def test_uniform_logits(self):
        server = linear(np.zeros((5, 3)))
        emb = np.random.default_rng(1).normal(size=(3, 8))
        labels = np.arange(8) % 5
        assert server_loss(server, emb, labels) == pytest.approx(math.log(5), abs=1e-15)

    def test_logistic_at_zero(self):
        server = linear(np.zeros((1, 2)))
        assert server_loss(server, np.ones((2, 3)), np.array([0, 1, 1])) == pytest.approx(0.6931471805599453)

    def test_matches_per_sample_loop(self):
        rng = np.random.default_rng(7)
        server = init_model([6, 4, 3], ["tanh", "identity"], 3)
        emb = rng.uniform(-1, 1, size=(6, 10))
        labels = rng.integers(0, 3, size=10)
        total = 0.0
        for i in range(10):
            hidden = [math.tanh(sum(server.weights[0][r, c] * emb[c, i] for c in range(6))) for r in range(4)]
            z = [sum(server.weights[1][k, r] * hidden[r] for r in range(4)) for k in range(3)]
            total += math.log(sum(math.exp(v) for v in z)) - z[labels[i]]
        assert server_loss(server, emb, labels) == pytest.approx(total / 10, rel=1e-13)

    def test_nonnegative_and_decreasing_in_correct_logit(self):
        losses = []
        for c in (1.0, 5.0, 25.0):
            server = linear(np.array([[c], [0.0], [0.0]]))
            losses.append(server_loss(server, np.ones((1, 1)), np.array([0])))
        assert all(v >= 0 for v in losses)
        assert losses[0] > losses[1] > losses[2]
        assert losses[2] < 1e-10

    def test_nonfinite_names_sample(self):
        server = linear(np.ones((2, 2)))
        emb = np.zeros((2, 4))
        emb[1, 2] = np.inf
        with pytest.raises(NonFiniteError, match="sample index 2"):
            server_loss(server, emb, np.zeros(4, dtype=int))


def _fd_server_instance(seed):
    rng = np.random.default_rng(seed)
    server = init_model([5, 4, 3], ["tanh", "identity"], seed)
    emb = rng.uniform(-1, 1, size=(5, 6))
    labels = rng.integers(0, 3, size=6)
    return server, emb, labels


class TestBackwardAll:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_finite_differences(self, seed):
        server, emb, labels = _fd_server_instance(seed)
        grads, (demb,) = backward_all(server, emb, labels)
        num_theta = finite_diff_gradient(lambda v: server_loss(server.with_flat(v), emb, labels), server.flat())
        num_emb = finite_diff_gradient(lambda e: server_loss(server, e, labels), emb)
        assert rel_err(grads.flat(), num_theta) <= 1e-5
        assert rel_err(demb, num_emb) <= 1e-5

    def test_blocks_split(self):
        server, emb, labels = _fd_server_instance(0)
        _, (full,) = backward_all(server, emb, labels)
        _, blocks = backward_all(server, emb, labels, block_sizes=[2, 3])
        np.testing.assert_array_equal(np.vstack(blocks), full)

    def test_saturated_fixed_point(self):
        server = linear(np.array([[1e3, 0.0], [0.0, 1e3]]))
        emb = np.array([[1.0, 0.0], [0.0, 1.0]])
        _, (demb,) = backward_all(server, emb, np.array([0, 1]))
        assert np.max(np.abs(demb)) < 1e-300

    def test_single_sample_logistic_closed_form(self):
        w = np.array([[0.3, -0.7, 1.1]])
        server = linear(w)
        emb = np.array([[0.2], [0.5], [-0.4]])
        z = float(w[0] @ emb[:, 0])
        sig = 1.0 / (1.0 + math.exp(-z))
        _, (demb,) = backward_all(server, emb, np.array([1]))
        np.testing.assert_allclose(demb[:, 0], (sig - 1.0) * w[0], rtol=1e-14)


class TestBackwardEmbedding:
    def setup_method(self):
        rng = np.random.default_rng(11)
        self.party = init_model([4, 5, 3], ["tanh", "tanh"], 11)
        self.x = rng.normal(size=(6, 4))
        self.up = rng.normal(size=(3, 6))

    def test_zero_upstream(self):
        g = backward_embedding(self.party, self.x, np.zeros((3, 6)))
        assert g.sq_norm() == 0.0

    def test_linear_in_upstream(self):
        g1 = backward_embedding(self.party, self.x, self.up)
        g2 = backward_embedding(self.party, self.x, 2 * self.up)
        np.testing.assert_array_equal(g2.flat(), 2 * g1.flat())

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            backward_embedding(self.party, self.x, np.zeros((3, 5)))

    def test_end_to_end_against_finite_differences(self):
        rng = np.random.default_rng(5)
        other = rng.uniform(-1, 1, size=(2, 6))
        server = init_model([5, 3], ["identity"], 2)
        labels = rng.integers(0, 3, size=6)

        def loss(v):
            h = forward_embedding(self.party.with_flat(v), self.x)
            return server_loss(server, np.vstack([h, other]), labels)

        h = forward_embedding(self.party, self.x)
        _, blocks = backward_all(server, np.vstack([h, other]), labels, [3, 2])
        g = backward_embedding(self.party, self.x, blocks[0])
        assert rel_err(g.flat(), finite_diff_gradient(loss, self.party.flat())) <= 1e-5


class TestFiniteDiff:
    def test_square(self):
        g = finite_diff_gradient(lambda x: float(x[0] ** 2), np.array([1.0]), 1e-5)
        assert abs(g[0] - 2.0) <= 1e-9

    def test_constant(self):
        np.testing.assert_array_equal(finite_diff_gradient(lambda x: 3.0, np.ones(4)), np.zeros(4))

    def test_bad_step(self):
        with pytest.raises(ValueError):
            finite_diff_gradient(lambda x: 0.0, np.ones(1), 0.0)

    def test_nonfinite(self):
        with pytest.raises(NonFiniteError):
            finite_diff_gradient(lambda x: float("nan"), np.ones(2))


class TestInitModel:
    def test_deterministic(self):
        a = init_model([3, 4, 2], ["tanh", "tanh"], 9)
        b = init_model([3, 4, 2], ["tanh", "tanh"], 9)
        assert a.flat().tobytes() == b.flat().tobytes()

    def test_seeds_differ(self):
        a = init_model([3, 4, 2], ["tanh", "tanh"], 9)
        b = init_model([3, 4, 2], ["tanh", "tanh"], 10)
        assert not np.array_equal(a.flat(), b.flat())

    def test_glorot_range(self):
        m = init_model([30, 20, 10], ["tanh", "tanh"], 0)
        for w in m.weights:
            a = math.sqrt(6.0 / (w.shape[0] + w.shape[1]))
            assert np.all(np.abs(w) < a)

    def test_zero_width(self):
        with pytest.raises(ShapeError):
            init_model([3, 0, 2], ["tanh", "tanh"], 0)

    def test_flat_roundtrip(self):
        m = init_model([3, 4, 2], ["tanh", "identity"], 1)
        assert np.array_equal(m.with_flat(m.flat()).flat(), m.flat())
