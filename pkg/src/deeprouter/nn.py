"""Dense feed-forward network with a softmax head and exact backprop gradients.

Everything runs in float64. Gradients are available with respect to the
parameters and with respect to the inputs (the latter drives the adversarial
perturbation search). The only supported training losses are scalar functions
of the output probability matrix that expose their own dL/dP; see
``deeprouter.losses``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .errors import ShapeError

__all__ = [
    "MlpParams",
    "GradientSet",
    "OptimizerState",
    "BatchLoss",
    "init_params",
    "forward",
    "param_gradients",
    "input_gradient",
    "input_gradient_batch",
    "init_optimizer",
    "optimizer_step",
    "save_checkpoint",
    "load_checkpoint",
    "params_fingerprint",
]


class BatchLoss(Protocol):
    """Scalar loss over an N x K probability matrix, with its dL/dP."""

    def value(self, probs: np.ndarray) -> float: ...

    def grad(self, probs: np.ndarray) -> np.ndarray: ...


@dataclass
class MlpParams:
    """Layered affine weights with ReLU hidden activations and a softmax head.

    weights[i] has shape (d_in, d_out); biases[i] has shape (d_out,).
    Consecutive layer dimensions must chain, and the last d_out is the number
    of clusters/routes K.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "relu"

    def __post_init__(self) -> None:
        if not self.weights or len(self.weights) != len(self.biases):
            raise ShapeError("need one bias vector per weight matrix")
        if self.hidden_activation != "relu":
            raise ValueError(f"unsupported activation {self.hidden_activation!r}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape} incompatible")
            if i > 0 and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(
                    f"layer {i}: input dim {w.shape[0]} does not chain from "
                    f"previous output dim {self.weights[i - 1].shape[1]}"
                )

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_outputs(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def layer_sizes(self) -> list[int]:
        return [self.n_inputs] + [w.shape[1] for w in self.weights]

    def check_finite(self) -> None:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise FloatingPointError(f"non-finite parameter in layer {i}")

    def copy(self) -> "MlpParams":
        return MlpParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.hidden_activation,
        )


@dataclass
class GradientSet:
    """Per-layer gradients, shape-congruent with the MlpParams they came from."""

    d_weights: list[np.ndarray]
    d_biases: list[np.ndarray]

    def __add__(self, other: "GradientSet") -> "GradientSet":
        return GradientSet(
            [a + b for a, b in zip(self.d_weights, other.d_weights)],
            [a + b for a, b in zip(self.d_biases, other.d_biases)],
        )

    def scaled(self, factor: float) -> "GradientSet":
        return GradientSet(
            [factor * g for g in self.d_weights],
            [factor * g for g in self.d_biases],
        )

    def check_finite(self) -> None:
        for i, (gw, gb) in enumerate(zip(self.d_weights, self.d_biases)):
            if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
                raise FloatingPointError(f"non-finite gradient in layer {i}")


@dataclass
class OptimizerState:
    """First-order optimizer state; moments are only used by adam."""

    algorithm: str
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m_weights: list[np.ndarray] = field(default_factory=list)
    m_biases: list[np.ndarray] = field(default_factory=list)
    v_weights: list[np.ndarray] = field(default_factory=list)
    v_biases: list[np.ndarray] = field(default_factory=list)


def init_params(layer_sizes: Sequence[int], seed) -> MlpParams:
    """Seeded uniform init in +-sqrt(6/(d_in+d_out)); biases start at zero.

    Keeps initial logits small so the starting cluster posteriors are close
    to uniform.
    """
    if len(layer_sizes) < 2:
        raise ShapeError("need at least an input and an output dimension")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for d_in, d_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = np.sqrt(6.0 / (d_in + d_out))
        weights.append(rng.uniform(-limit, limit, size=(d_in, d_out)))
        biases.append(np.zeros(d_out))
    return MlpParams(weights, biases)


def _as_batch(X: np.ndarray, n_inputs: int) -> tuple[np.ndarray, bool]:
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != n_inputs:
        raise ShapeError(f"input has shape {X.shape}, expected (*, {n_inputs})")
    return X, single


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _forward_cached(params: MlpParams, X: np.ndarray):
    """Forward pass keeping the post-activation of every layer for backprop."""
    activations = [X]
    a = X
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w + b
        if not np.isfinite(z).all():
            raise FloatingPointError(f"non-finite pre-activation in layer {i}")
        a = _softmax(z) if i == n_layers - 1 else np.maximum(z, 0.0)
        activations.append(a)
    return activations


def forward(params: MlpParams, X: np.ndarray) -> np.ndarray:
    """Cluster posteriors for a batch; accepts a single vector or an N x D matrix.

    Each output row is a probability distribution over the K outputs.
    """
    Xb, single = _as_batch(X, params.n_inputs)
    if not np.isfinite(Xb).all():
        raise ValueError("input contains non-finite values")
    probs = _forward_cached(params, Xb)[-1]
    return probs[0] if single else probs


def _backward(params: MlpParams, activations: list[np.ndarray], d_probs: np.ndarray):
    """Backprop dL/dP through softmax and the hidden stack.

    Returns (GradientSet, dL/dX).
    """
    probs = activations[-1]
    # softmax Jacobian applied to dL/dP
    inner = (d_probs * probs).sum(axis=1, keepdims=True)
    d_z = probs * (d_probs - inner)
    d_weights: list[np.ndarray] = [None] * len(params.weights)  # type: ignore[list-item]
    d_biases: list[np.ndarray] = [None] * len(params.biases)  # type: ignore[list-item]
    for i in range(len(params.weights) - 1, -1, -1):
        a_prev = activations[i]
        d_weights[i] = a_prev.T @ d_z
        d_biases[i] = d_z.sum(axis=0)
        d_a_prev = d_z @ params.weights[i].T
        if i > 0:
            d_z = d_a_prev * (activations[i] > 0.0)
    return GradientSet(d_weights, d_biases), d_a_prev


def param_gradients(params: MlpParams, X: np.ndarray, loss: BatchLoss):
    """Loss value and exact parameter gradients for one batch.

    The loss sees the softmax output and supplies dL/dP; this routine chains
    it through the network analytically.
    """
    Xb, _ = _as_batch(X, params.n_inputs)
    activations = _forward_cached(params, Xb)
    probs = activations[-1]
    grads, _ = _backward(params, activations, loss.grad(probs))
    grads.check_finite()
    return loss.value(probs), grads


def input_gradient_batch(params: MlpParams, X: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """d/dX of the summed cross-entropy between fixed reference rows and forward(X)."""
    Xb, _ = _as_batch(X, params.n_inputs)
    ref = np.asarray(reference, dtype=np.float64)
    if ref.shape != (Xb.shape[0], params.n_outputs):
        raise ShapeError(f"reference has shape {ref.shape}, expected {(Xb.shape[0], params.n_outputs)}")
    activations = _forward_cached(params, Xb)
    probs = activations[-1]
    from .losses import LOG_FLOOR  # local import avoids a cycle

    d_probs = np.where(probs > LOG_FLOOR, -ref / np.maximum(probs, LOG_FLOOR), 0.0)
    _, d_x = _backward(params, activations, d_probs)
    if not np.isfinite(d_x).all():
        raise FloatingPointError("non-finite input gradient")
    return d_x


def input_gradient(params: MlpParams, x: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. a single input vector of CE(reference held fixed, forward(x))."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("input_gradient expects a single sample vector")
    ref = np.asarray(reference, dtype=np.float64)
    if ref.ndim != 1:
        raise ShapeError("reference must be a single probability vector")
    if not np.isfinite(ref).all() or abs(ref.sum() - 1.0) > 1e-6 or (ref < -1e-9).any():
        raise ValueError("reference is not a valid probability distribution")
    return input_gradient_batch(params, x[None, :], ref[None, :])[0]


def init_optimizer(params: MlpParams, algorithm: str = "adam", learning_rate: float = 1e-3) -> OptimizerState:
    if algorithm not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {algorithm!r}")
    if learning_rate <= 0:
        raise ValueError("learning_rate must be positive")
    state = OptimizerState(algorithm=algorithm, learning_rate=learning_rate)
    if algorithm == "adam":
        state.m_weights = [np.zeros_like(w) for w in params.weights]
        state.m_biases = [np.zeros_like(b) for b in params.biases]
        state.v_weights = [np.zeros_like(w) for w in params.weights]
        state.v_biases = [np.zeros_like(b) for b in params.biases]
    return state


def optimizer_step(params: MlpParams, grads: GradientSet, state: OptimizerState):
    """One update step. sgd is the literal p - lr*g rule; adam is bias-corrected.

    Returns fresh (MlpParams, OptimizerState); inputs are not mutated.
    """
    if len(grads.d_weights) != len(params.weights):
        raise ShapeError("gradient set does not match parameter layout")
    for i, (w, gw) in enumerate(zip(params.weights, grads.d_weights)):
        if w.shape != gw.shape or params.biases[i].shape != grads.d_biases[i].shape:
            raise ShapeError(f"layer {i}: gradient shape mismatch")

    lr = state.learning_rate
    t = state.step + 1
    if state.algorithm == "sgd":
        new_w = [w - lr * g for w, g in zip(params.weights, grads.d_weights)]
        new_b = [b - lr * g for b, g in zip(params.biases, grads.d_biases)]
        new_state = OptimizerState(algorithm="sgd", learning_rate=lr, step=t)
    else:
        b1, b2, eps = state.beta1, state.beta2, state.eps
        mw = [b1 * m + (1 - b1) * g for m, g in zip(state.m_weights, grads.d_weights)]
        mb = [b1 * m + (1 - b1) * g for m, g in zip(state.m_biases, grads.d_biases)]
        vw = [b2 * v + (1 - b2) * g * g for v, g in zip(state.v_weights, grads.d_weights)]
        vb = [b2 * v + (1 - b2) * g * g for v, g in zip(state.v_biases, grads.d_biases)]
        c1 = 1 - b1**t
        c2 = 1 - b2**t
        new_w = [
            w - lr * (m / c1) / (np.sqrt(v / c2) + eps)
            for w, m, v in zip(params.weights, mw, vw)
        ]
        new_b = [
            b - lr * (m / c1) / (np.sqrt(v / c2) + eps)
            for b, m, v in zip(params.biases, mb, vb)
        ]
        new_state = OptimizerState(
            algorithm="adam", learning_rate=lr, beta1=b1, beta2=b2, eps=eps, step=t,
            m_weights=mw, m_biases=mb, v_weights=vw, v_biases=vb,
        )
    new_params = MlpParams(new_w, new_b, params.hidden_activation)
    new_params.check_finite()
    return new_params, new_state


def _params_doc(params: MlpParams, config_hash: str) -> dict:
    return {
        "layer_sizes": params.layer_sizes,
        "hidden_activation": params.hidden_activation,
        "weights": [w.ravel(order="C").tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
        "config_hash": config_hash,
    }


def _params_from_doc(doc: dict) -> MlpParams:
    sizes = doc["layer_sizes"]
    weights, biases = [], []
    for d_in, d_out, flat, b in zip(sizes[:-1], sizes[1:], doc["weights"], doc["biases"]):
        weights.append(np.array(flat, dtype=np.float64).reshape(d_in, d_out))
        biases.append(np.array(b, dtype=np.float64))
    return MlpParams(weights, biases, doc["hidden_activation"])


def save_checkpoint(params: MlpParams, path, config_hash: str = "") -> None:
    """Write the model as a single JSON document (row-major weight arrays)."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_params_doc(params, config_hash), fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple[MlpParams, str]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return _params_from_doc(doc), doc.get("config_hash", "")


def params_fingerprint(params: MlpParams) -> str:
    """Stable content hash of the parameters (used in report provenance)."""
    h = hashlib.sha256()
    for w, b in zip(params.weights, params.biases):
        h.update(w.tobytes())
        h.update(b.tobytes())
    return h.hexdigest()
