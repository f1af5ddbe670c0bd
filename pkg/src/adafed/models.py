"""Small models with analytic gradients.

Parameters are flat float64 vectors, layer-major and row-major within a
layer: ``W`` (out x in) then ``b`` (out) for each layer in turn.

Kinds:

* ``Linear``    -- least squares regression, loss = mean squared error.
* ``Logistic``  -- multinomial logistic regression, mean cross-entropy.
* ``MLP2``      -- one tanh hidden layer followed by a softmax output.
* ``Quadratic`` -- mean of 1/2 |theta - x_i|^2 over the samples; its
  gradient is theta - mean(x), so it is 1-smooth (plus ``l2_reg``).

Every loss adds ``l2_reg / 2 * |theta|^2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MODEL_KINDS = ("Linear", "Logistic", "MLP2", "Quadratic")
CLASSIFIERS = ("Logistic", "MLP2")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "Logistic"
    input_dim: int = 5
    output_dim: int = 4
    hidden_dim: int = 8
    l2_reg: float = 0.0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ModelError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        if self.input_dim < 1 or self.output_dim < 1 or self.hidden_dim < 1:
            raise ModelError("model dimensions must be positive")
        if self.kind in CLASSIFIERS and self.output_dim < 2:
            raise ModelError(f"{self.kind} needs output_dim >= 2")
        if not self.l2_reg >= 0:
            raise ModelError("l2_reg must be non-negative")

    @property
    def is_classifier(self) -> bool:
        return self.kind in CLASSIFIERS

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        """(out, in) of each affine layer; Quadratic has none."""
        if self.kind == "Quadratic":
            return []
        if self.kind == "MLP2":
            return [(self.hidden_dim, self.input_dim), (self.output_dim, self.hidden_dim)]
        return [(self.output_dim, self.input_dim)]

    @property
    def num_params(self) -> int:
        if self.kind == "Quadratic":
            return self.input_dim
        return sum(o * i + o for o, i in self.layer_shapes)


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ModelError("features must be a 2-d array")
        self.labels = np.asarray(self.labels)
        if self.labels.shape[0] != self.features.shape[0]:
            raise ModelError("features and labels disagree on the sample count")
        if len(self) < 1:
            raise ModelError("dataset must contain at least one sample")

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx])


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Uniform(-s, s) entries with s = 1/sqrt(fan_in) of each layer."""
    rng = np.random.default_rng(seed)
    if spec.kind == "Quadratic":
        s = 1.0 / math.sqrt(spec.input_dim)
        return rng.uniform(-s, s, size=spec.input_dim)
    chunks = []
    for out, fan_in in spec.layer_shapes:
        s = 1.0 / math.sqrt(fan_in)
        chunks.append(rng.uniform(-s, s, size=out * fan_in + out))
    return np.concatenate(chunks)


def unflatten(spec: ModelSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.num_params,):
        raise ModelError(f"expected {spec.num_params} parameters, got shape {params.shape}")
    layers = []
    pos = 0
    for out, fan_in in spec.layer_shapes:
        W = params[pos:pos + out * fan_in].reshape(out, fan_in)
        pos += out * fan_in
        b = params[pos:pos + out]
        pos += out
        layers.append((W, b))
    return layers


def _check(spec: ModelSpec, params: np.ndarray, data: Dataset) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.num_params,):
        raise ModelError(f"expected {spec.num_params} parameters, got shape {params.shape}")
    if data.features.shape[1] != spec.input_dim:
        raise ModelError(f"expected {spec.input_dim} features, got {data.features.shape[1]}")
    if spec.is_classifier:
        y = data.labels
        if y.ndim != 1 or np.any(y < 0) or np.any(y >= spec.output_dim):
            raise ModelError("class labels must be integers in [0, output_dim)")
    return params


def _regression_targets(spec: ModelSpec, data: Dataset) -> np.ndarray:
    y = np.asarray(data.labels, dtype=np.float64)
    return y.reshape(len(data), spec.output_dim)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _forward(spec: ModelSpec, params: np.ndarray, X: np.ndarray):
    """Output scores plus the hidden activations (MLP2 only)."""
    layers = unflatten(spec, params)
    if spec.kind == "MLP2":
        (W1, b1), (W2, b2) = layers
        H = np.tanh(X @ W1.T + b1)
        return H @ W2.T + b2, H
    W, b = layers[0]
    return X @ W.T + b, None


def loss(spec: ModelSpec, params: np.ndarray, data: Dataset) -> float:
    params = _check(spec, params, data)
    reg = 0.5 * spec.l2_reg * float(params @ params)
    X = data.features
    if spec.kind == "Quadratic":
        diff = X - params
        return 0.5 * float(np.mean(np.sum(diff * diff, axis=1))) + reg
    scores, _ = _forward(spec, params, X)
    if spec.kind == "Linear":
        r = scores - _regression_targets(spec, data)
        return float(np.mean(np.sum(r * r, axis=1))) + reg
    logp = _log_softmax(scores)
    y = data.labels.astype(np.intp)
    return -float(np.mean(logp[np.arange(len(data)), y])) + reg


def gradient(spec: ModelSpec, params: np.ndarray, data: Dataset) -> np.ndarray:
    params = _check(spec, params, data)
    n = len(data)
    X = data.features
    if spec.kind == "Quadratic":
        return params - X.mean(axis=0) + spec.l2_reg * params

    scores, H = _forward(spec, params, X)
    if spec.kind == "Linear":
        dscores = 2.0 * (scores - _regression_targets(spec, data)) / n
    else:
        probs = np.exp(_log_softmax(scores))
        probs[np.arange(n), data.labels.astype(np.intp)] -= 1.0
        dscores = probs / n

    if spec.kind == "MLP2":
        (W1, _), (W2, _) = unflatten(spec, params)
        dW2 = dscores.T @ H
        db2 = dscores.sum(axis=0)
        dpre = (dscores @ W2) * (1.0 - H * H)
        dW1 = dpre.T @ X
        db1 = dpre.sum(axis=0)
        g = np.concatenate([dW1.ravel(), db1, dW2.ravel(), db2])
    else:
        g = np.concatenate([(dscores.T @ X).ravel(), dscores.sum(axis=0)])
    return g + spec.l2_reg * params


def predict(spec: ModelSpec, params: np.ndarray, data: Dataset) -> np.ndarray:
    """Argmax class per sample; ties go to the lowest class index."""
    if not spec.is_classifier:
        raise ModelError(f"{spec.kind} is not a classifier")
    params = _check(spec, params, data)
    scores, _ = _forward(spec, params, data.features)
    return np.argmax(scores, axis=1)


def accuracy(spec: ModelSpec, params: np.ndarray, data: Dataset) -> float:
    pred = predict(spec, params, data)
    return float(np.mean(pred == data.labels))


def smoothness_bound(spec: ModelSpec, data: Dataset) -> float:
    """An upper bound on the Lipschitz constant of ``gradient`` over all params.

    Linear: 2 * lmax(mean x x^T) (bias folded into x).  Logistic: half of
    that matrix's top eigenvalue, since the softmax Hessian never exceeds
    1/2.  Quadratic: exactly 1.  Each adds ``l2_reg``.  MLP2 has no global
    bound and raises.
    """
    if spec.kind == "Quadratic":
        return 1.0 + spec.l2_reg
    if spec.kind == "MLP2":
        raise ModelError("MLP2 gradients are not globally Lipschitz")
    Xb = np.hstack([data.features, np.ones((len(data), 1))])
    top = float(np.linalg.eigvalsh(Xb.T @ Xb / len(data))[-1])
    return (2.0 if spec.kind == "Linear" else 0.5) * top + spec.l2_reg


def finite_difference_gradient(f, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (f(x + e) - f(x - e)) / (2 * step)
    return g


def gradient_check(spec: ModelSpec, params: np.ndarray, data: Dataset, step: float = 1e-6) -> float:
    """Worst ``|g_i - fd_i| / (1 + |g_i|)`` over all coordinates."""
    g = gradient(spec, params, data)
    fd = finite_difference_gradient(lambda p: loss(spec, p, data), params, step)
    return float(np.max(np.abs(g - fd) / (1.0 + np.abs(g))))
