"""Dense feed-forward pieces: layers, softmax, cross entropy, SGD.

Everything is float64 and batch-first. Layers store W as (fan_out,
fan_in) so a batch forward is one X @ W.T per layer.
"""

from typing import List, Optional, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, DimensionError, ForwardStateError, TrainingDivergedError

CLIP_EPS = 1e-12


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-stable softmax; works on (C,) or (B, C)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(pred: np.ndarray, target: np.ndarray) -> float:
    """-sum_i target[i] * log(pred[i] + eps) between two distributions.

    Accepts single vectors or (B, C) batches (batches are averaged).
    The additive eps keeps a zero predicted probability finite.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(
            f"pred shape {pred.shape} vs target shape {target.shape}"
        )
    ce = -(target * np.log(pred + CLIP_EPS)).sum(axis=-1)
    return float(ce.mean())


def cross_entropy_labels(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-probability of the true class for a batch."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    picked = probs[np.arange(probs.shape[0]), labels]
    return float(-np.log(picked + CLIP_EPS).mean())


class DenseLayer:
    """Affine map y = W x + b with W of shape (fan_out, fan_in)."""

    __slots__ = ("W", "b")

    def __init__(self, W: np.ndarray, b: np.ndarray):
        W = np.ascontiguousarray(W, dtype=np.float64)
        b = np.ascontiguousarray(b, dtype=np.float64)
        if W.ndim != 2 or b.ndim != 1 or W.shape[0] != b.shape[0]:
            raise DimensionError(
                f"bad layer shapes: W {W.shape}, b {b.shape}"
            )
        self.W = W
        self.b = b

    @property
    def fan_in(self) -> int:
        return self.W.shape[1]

    @property
    def fan_out(self) -> int:
        return self.W.shape[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Single-vector affine through the scalar kernel (test oracle path)."""
        return kernels.affine(self.W, self.b, np.asarray(x, dtype=np.float64))


def glorot_layer(fan_out: int, fan_in: int, rng: np.random.Generator) -> DenseLayer:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    W = rng.uniform(-limit, limit, size=(fan_out, fan_in))
    return DenseLayer(W, np.zeros(fan_out))


class Mlp:
    """ReLU MLP with a linear last layer; forward caches for backward."""

    def __init__(self, layers: List[DenseLayer]):
        if not layers:
            raise ConfigError("an MLP needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.fan_out != nxt.fan_in:
                raise DimensionError(
                    f"layer fan mismatch: {prev.fan_out} feeds {nxt.fan_in}"
                )
        self.layers = layers
        self._acts: Optional[List[np.ndarray]] = None

    @classmethod
    def init(cls, sizes: Sequence[int], seed) -> "Mlp":
        """Fresh network for sizes [in, hidden..., out], biases at zero.

        seed is anything np.random.default_rng accepts (int, SeedSequence,
        an existing Generator).
        """
        if len(sizes) < 2:
            raise ConfigError(f"need input and output sizes, got {list(sizes)}")
        rng = np.random.default_rng(seed)
        return cls([
            glorot_layer(out, inp, rng)
            for inp, out in zip(sizes[:-1], sizes[1:])
        ])

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def output_dim(self) -> int:
        return self.layers[-1].fan_out

    def num_params(self, include_biases: bool = True) -> int:
        total = 0
        for layer in self.layers:
            total += layer.W.size
            if include_biases:
                total += layer.b.size
        return total

    def forward(self, X: np.ndarray) -> np.ndarray:
        """Logits for a (B, input_dim) batch; caches activations."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise DimensionError(
                f"expected (B, {self.input_dim}) inputs, got {X.shape}"
            )
        acts = [X]
        a = X
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            z = a @ layer.W.T + layer.b
            a = z if i == last else relu(z)
            acts.append(a)
        self._acts = acts
        return a

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return softmax(self.forward(X))

    @property
    def activations(self):
        """Per-layer activations cached by the latest forward."""
        if self._acts is None:
            raise ForwardStateError("no forward pass recorded")
        return self._acts

    def backward(self, dLogits: np.ndarray):
        """Gradients [(dW, db), ...] given d(loss)/d(logits).

        Uses the activations cached by the latest forward. The caller
        owns the loss, so any reduction (mean, sum, weighting) must
        already be folded into dLogits.
        """
        if self._acts is None:
            raise ForwardStateError("backward called before any forward")
        acts = self._acts
        if dLogits.shape != acts[-1].shape:
            raise DimensionError(
                f"dLogits shape {dLogits.shape} does not match logits "
                f"{acts[-1].shape}"
            )
        grads = [None] * len(self.layers)
        delta = np.asarray(dLogits, dtype=np.float64)
        for i in range(len(self.layers) - 1, -1, -1):
            a_in = acts[i]
            grads[i] = (delta.T @ a_in, delta.sum(axis=0))
            if i > 0:
                delta = (delta @ self.layers[i].W) * (acts[i] > 0.0)
        return grads

    def clone(self) -> "Mlp":
        return Mlp([DenseLayer(l.W.copy(), l.b.copy()) for l in self.layers])


def sgd_step(mlp: Mlp, grads, lr: float, where: str = "network"):
    """In-place p -= lr * g; rejects non-finite parameters loudly."""
    for i, (layer, (dW, db)) in enumerate(zip(mlp.layers, grads)):
        layer.W -= lr * dW
        layer.b -= lr * db
        if not (np.all(np.isfinite(layer.W)) and np.all(np.isfinite(layer.b))):
            raise TrainingDivergedError(
                f"non-finite parameters in {where} layer {i}; "
                "lower the learning rate"
            )
