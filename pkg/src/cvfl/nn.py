"""Small dense MLPs with hand-written backprop, plus a finite-difference oracle.

Matrices are float64 numpy arrays. Activations flow column-wise: a batch of
B inputs of width D is a (D, B) array, so a party's embedding batch comes out
as a (P_m, B) matrix with one column per sample.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("tanh", "identity")


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


def _act(tag: str, z: np.ndarray) -> np.ndarray:
    return np.tanh(z) if tag == "tanh" else z


def _act_grad(tag: str, a: np.ndarray) -> np.ndarray:
    # derivative expressed through the activation output
    return 1.0 - a * a if tag == "tanh" else np.ones_like(a)


@dataclass(frozen=True)
class GradientSet:
    """Per-layer gradients, shape-congruent with an :class:`MlpModel`."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def scaled(self, c: float) -> "GradientSet":
        return GradientSet(tuple(c * w for w in self.weights), tuple(c * b for b in self.biases))

    def sq_norm(self) -> float:
        return float(sum(np.sum(w * w) + np.sum(b * b) for w, b in zip(self.weights, self.biases)))


@dataclass(frozen=True)
class MlpModel:
    """Feed-forward stack of (weight, bias, activation) layers.

    ``weights[i]`` has shape (out, in); ``biases[i]`` has shape (out,).
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        if not self.weights:
            raise ShapeError("model needs at least one layer")
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ShapeError("layer lists have different lengths")
        for i, (w, b, tag) in enumerate(zip(self.weights, self.biases, self.activations)):
            if tag not in ACTIVATIONS:
                raise ValueError(f"unknown activation {tag!r}")
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} incompatible with bias {b.shape}")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(
                    f"layer {i} expects width {w.shape[1]}, previous layer gives {self.weights[i - 1].shape[0]}"
                )

    @property
    def input_width(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_width(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Run the stack on column inputs ``x`` of shape (input_width, B).

        Returns the output and the list of layer activations needed by
        :meth:`backward` (the input first).
        """
        if x.ndim != 2 or x.shape[0] != self.input_width:
            raise ShapeError(f"input of shape {x.shape} does not fit model input width {self.input_width}")
        acts = [x]
        a = x
        for w, b, tag in zip(self.weights, self.biases, self.activations):
            a = _act(tag, w @ a + b[:, None])
            acts.append(a)
        return a, acts

    def backward(self, acts: list[np.ndarray], upstream: np.ndarray) -> tuple[GradientSet, np.ndarray]:
        """Backpropagate ``upstream`` (d loss / d output) through the cached pass.

        Returns the parameter gradients and d loss / d input.
        """
        if upstream.shape != acts[-1].shape:
            raise ShapeError(f"upstream shape {upstream.shape} != output shape {acts[-1].shape}")
        n = len(self.weights)
        gw: list[np.ndarray] = [None] * n  # type: ignore[list-item]
        gb: list[np.ndarray] = [None] * n  # type: ignore[list-item]
        delta = upstream
        for i in range(n - 1, -1, -1):
            dz = delta * _act_grad(self.activations[i], acts[i + 1])
            gw[i] = dz @ acts[i].T
            gb[i] = dz.sum(axis=1)
            delta = self.weights[i].T @ dz
        return GradientSet(tuple(gw), tuple(gb)), delta

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def with_flat(self, vec: np.ndarray) -> "MlpModel":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ShapeError(f"parameter vector of length {vec.size}, model has {self.n_params}")
        ws, bs = [], []
        pos = 0
        for w, b in zip(self.weights, self.biases):
            ws.append(vec[pos : pos + w.size].reshape(w.shape).copy())
            pos += w.size
            bs.append(vec[pos : pos + b.size].copy())
            pos += b.size
        return MlpModel(tuple(ws), tuple(bs), self.activations)

    def step(self, grads: GradientSet, lr: float) -> "MlpModel":
        ws = tuple(w - lr * g for w, g in zip(self.weights, grads.weights))
        bs = tuple(b - lr * g for b, g in zip(self.biases, grads.biases))
        for a in ws + bs:
            if not np.all(np.isfinite(a)):
                raise NonFiniteError("parameter update produced non-finite values")
        return MlpModel(ws, bs, self.activations)


def init_model(widths: Sequence[int], activations: Sequence[str], seed: int) -> MlpModel:
    """Glorot-uniform weights, zero biases. ``widths`` lists input width first."""
    if len(widths) < 2:
        raise ShapeError("need an input width and at least one layer width")
    if any(int(w) < 1 for w in widths):
        raise ShapeError(f"zero width in {list(widths)}")
    if len(activations) != len(widths) - 1:
        raise ShapeError("one activation tag per layer")
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-a, a, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return MlpModel(tuple(ws), tuple(bs), tuple(activations))


def forward_embedding(model: MlpModel, features: np.ndarray) -> np.ndarray:
    """Embed a (B, D_m) feature batch; returns the (P_m, B) embedding matrix."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != model.input_width:
        raise ShapeError(
            f"features of shape {features.shape} do not match model input width {model.input_width}"
        )
    out, _ = model.forward(features.T)
    return out


def _loss_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample losses and d(sum of losses)/d logits."""
    B = logits.shape[1]
    if logits.shape[0] == 1:
        z = logits[0]
        y = labels.astype(np.float64)
        losses = np.logaddexp(0.0, z) - y * z
        grad = (0.5 * (1.0 + np.tanh(0.5 * z)) - y)[None, :]
    else:
        shifted = logits - logits.max(axis=0, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=0))
        idx = labels.astype(np.intp)
        losses = lse - shifted[idx, np.arange(B)]
        grad = np.exp(shifted - lse)
        grad[idx, np.arange(B)] -= 1.0
    bad = np.flatnonzero(~np.isfinite(losses))
    if bad.size:
        raise NonFiniteError(f"non-finite loss at sample index {int(bad[0])}")
    return losses, grad


def _check_labels(server: MlpModel, embeddings: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if embeddings.ndim != 2 or embeddings.shape[0] != server.input_width:
        raise ShapeError(
            f"embedding matrix {embeddings.shape} does not fit server input width {server.input_width}"
        )
    if labels.shape != (embeddings.shape[1],):
        raise ShapeError(f"labels of shape {labels.shape} for batch of {embeddings.shape[1]}")
    bad = np.flatnonzero(~np.all(np.isfinite(embeddings), axis=0))
    if bad.size:
        raise NonFiniteError(f"non-finite embedding at sample index {int(bad[0])}")
    return labels


def server_loss(server: MlpModel, embeddings: np.ndarray, labels: np.ndarray) -> float:
    """Mean loss of the server head on a (P, B) embedding matrix.

    A single-output server uses logistic loss with 0/1 labels; wider servers
    use softmax cross-entropy over integer class ids.
    """
    labels = _check_labels(server, embeddings, labels)
    logits, _ = server.forward(embeddings)
    losses, _ = _loss_grad(logits, labels)
    return float(losses.mean())


def backward_all(
    server: MlpModel,
    embeddings: np.ndarray,
    labels: np.ndarray,
    block_sizes: Sequence[int] | None = None,
) -> tuple[GradientSet, list[np.ndarray]]:
    """Gradients of the mini-batch loss w.r.t. server parameters and embeddings.

    The embedding gradient is split into row blocks of ``block_sizes``
    (one per party); without block sizes a single block is returned.
    """
    labels = _check_labels(server, embeddings, labels)
    B = embeddings.shape[1]
    logits, acts = server.forward(embeddings)
    _, dlogits = _loss_grad(logits, labels)
    grads, demb = server.backward(acts, dlogits / B)
    if block_sizes is None:
        return grads, [demb]
    if sum(block_sizes) != embeddings.shape[0]:
        raise ShapeError(f"block sizes {list(block_sizes)} do not sum to {embeddings.shape[0]}")
    cuts = np.cumsum(block_sizes)[:-1]
    return grads, np.split(demb, cuts, axis=0)


def backward_embedding(model: MlpModel, features: np.ndarray, upstream: np.ndarray) -> GradientSet:
    """Chain an upstream d F / d h_m matrix through the party's embedding net."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != model.input_width:
        raise ShapeError(
            f"features of shape {features.shape} do not match model input width {model.input_width}"
        )
    expected = (model.output_width, features.shape[0])
    if upstream.shape != expected:
        raise ShapeError(f"upstream shape {upstream.shape} != embedding shape {expected}")
    _, acts = model.forward(features.T)
    grads, _ = model.backward(acts, upstream)
    return grads


def finite_diff_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * step)
    return g
