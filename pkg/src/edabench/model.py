"""Softmax classifiers (linear or MLP) with hand-written backprop and AdamW training.

Parameters live in one flat vector, layer by layer, each layer stored as its
weight matrix (row-major, shape ``(fan_in, fan_out)``) followed by its bias.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .core import derive_rng
from .exceptions import DegenerateTrainSetWarning
from .metrics import macro_f1

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ArchSpec:
    input_dim: int
    num_classes: int
    kind: str = "mlp"
    hidden_dims: tuple = (16,)
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.kind not in ("linear", "mlp"):
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if self.kind == "mlp" and not self.hidden_dims:
            raise ValueError("an MLP needs at least one hidden layer")
        if self.kind == "linear":
            object.__setattr__(self, "hidden_dims", ())
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden dims must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.input_dim < 1 or self.num_classes < 2:
            raise ValueError("need input_dim >= 1 and num_classes >= 2")

    @property
    def layer_sizes(self) -> list:
        return [self.input_dim, *self.hidden_dims, self.num_classes]

    @property
    def feature_dim(self) -> int:
        return self.hidden_dims[-1] if self.hidden_dims else self.input_dim

    @property
    def param_count(self) -> int:
        s = self.layer_sizes
        return sum(a * b + b for a, b in zip(s[:-1], s[1:]))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(**d)


@dataclass(frozen=True)
class TrainHyper:
    # 2e-5 suits large pretrained encoders; small models trained from scratch need a larger step
    learning_rate: float = 2e-3
    weight_decay: float = 0.01
    batch_size: int = 32
    max_epochs: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")


@dataclass
class ClassifierModel:
    spec: ArchSpec
    params: np.ndarray
    rng_state: Optional[dict] = field(default=None, repr=False)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.spec.param_count,):
            raise ValueError(f"expected {self.spec.param_count} parameters, got {self.params.shape}")

    def copy(self) -> "ClassifierModel":
        return ClassifierModel(self.spec, self.params.copy(), self.rng_state)

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "params": self.params.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierModel":
        return cls(ArchSpec.from_dict(d["spec"]), np.asarray(d["params"], dtype=np.float64))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "ClassifierModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def unpack_layers(sizes, params: np.ndarray) -> list:
    """Views ``[(W, b), ...]`` into a flat parameter vector for layer ``sizes``."""
    layers = []
    pos = 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        W = params[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = params[pos:pos + fan_out]
        pos += fan_out
        layers.append((W, b))
    return layers


def unpack(spec: ArchSpec, params: np.ndarray) -> list:
    return unpack_layers(spec.layer_sizes, params)


def glorot_init(sizes, rng: np.random.Generator) -> np.ndarray:
    chunks = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks)


def init(spec: ArchSpec, seed: int) -> ClassifierModel:
    rng = derive_rng(seed, "model-init")
    return ClassifierModel(spec, glorot_init(spec.layer_sizes, rng))


def _act(name, z):
    return np.maximum(z, 0.0) if name == "relu" else np.tanh(z)


def _act_grad(name, z, a):
    return (z > 0).astype(np.float64) if name == "relu" else 1.0 - a * a


def mlp_forward(sizes, activation: str, params: np.ndarray, X):
    """Affine layers with ``activation`` between them; the last layer stays linear.

    Returns ``(output, cache)`` where ``cache = (inputs, pre_activations)`` per layer.
    """
    layers = unpack_layers(sizes, params)
    h = np.atleast_2d(np.asarray(X, dtype=np.float64))
    inputs, pre = [], []
    for i, (W, b) in enumerate(layers):
        inputs.append(h)
        z = h @ W + b
        pre.append(z)
        h = z if i == len(layers) - 1 else _act(activation, z)
    return h, (inputs, pre)


def mlp_backward(sizes, activation: str, params: np.ndarray, cache, dout: np.ndarray, dembed=None):
    """Backprop ``dout`` through an ``mlp_forward`` network.

    ``dembed`` is an extra gradient on the input of the last layer (the
    embedding), added where the two paths meet. Returns ``(flat_grad, dX)``.
    """
    inputs, pre = cache
    layers = unpack_layers(sizes, params)
    grads = [None] * len(layers)
    delta = dout
    dX = None
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        grads[i] = (inputs[i].T @ delta, delta.sum(axis=0))
        dh = delta @ W.T
        if i == len(layers) - 1 and dembed is not None:
            dh = dh + dembed
        if i > 0:
            delta = dh * _act_grad(activation, pre[i - 1], inputs[i])
        else:
            dX = dh
    flat = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])
    return flat, dX


def forward_pass(spec: ArchSpec, params: np.ndarray, X):
    return mlp_forward(spec.layer_sizes, spec.activation, params, X)


def forward(model: ClassifierModel, features) -> np.ndarray:
    logits, _ = forward_pass(model.spec, model.params, features)
    return logits[0] if np.ndim(features) == 1 else logits


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def embed(model: ClassifierModel, features) -> np.ndarray:
    """Output of the feature extractor g: the last hidden activation (identity for linear)."""
    _, (inputs, _) = forward_pass(model.spec, model.params, features)
    out = inputs[-1]
    return out[0] if np.ndim(features) == 1 else out


def cross_entropy(logits: np.ndarray, y: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    logp = log_softmax(logits)
    n = len(y)
    loss = -logp[np.arange(n), y].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    return float(loss), dlogits / n


def backward(spec: ArchSpec, params: np.ndarray, cache, dlogits: np.ndarray, dembed=None):
    return mlp_backward(spec.layer_sizes, spec.activation, params, cache, dlogits, dembed)


def grad(model: ClassifierModel, X, y):
    """Mean cross-entropy over the batch and its exact gradient w.r.t. ``model.params``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    logits, cache = forward_pass(model.spec, model.params, X)
    loss, dlogits = cross_entropy(logits, y)
    g, _ = backward(model.spec, model.params, cache, dlogits)
    return loss, g


def predict(model: ClassifierModel, X) -> np.ndarray:
    logits, _ = forward_pass(model.spec, model.params, X)
    return np.argmax(logits, axis=1)  # argmax picks the lowest index on ties


class AdamW:
    """Adam with decoupled weight decay over a flat parameter vector."""

    def __init__(self, size, lr, weight_decay=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, g: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        params = params * (1 - self.lr * self.weight_decay)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def select_best_epoch(scores) -> int:
    """Index of the best validation score; ties go to the earlier epoch."""
    return int(np.argmax(np.asarray(scores, dtype=np.float64)))


@dataclass
class FitResult:
    model: ClassifierModel
    val_scores: list
    best_epoch: int  # 1-based
    snapshots: list = field(default_factory=list, repr=False)


def fit(model: ClassifierModel, X, y, X_val, y_val, hyper: TrainHyper, seed: int,
        keep_snapshots: bool = False) -> FitResult:
    """Mini-batch AdamW training with per-epoch validation and best-epoch selection."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    X_val = np.asarray(X_val, dtype=np.float64)
    y_val = np.asarray(y_val, dtype=np.int64)
    if len(y) == 0 or len(y_val) == 0:
        raise ValueError("fit needs non-empty train and validation sets")
    M = model.spec.num_classes
    if len(np.unique(y)) < 2:
        warnings.warn("training set holds a single class", DegenerateTrainSetWarning, stacklevel=2)

    rng = derive_rng(seed, "fit-shuffle")
    opt = AdamW(model.spec.param_count, hyper.learning_rate, hyper.weight_decay,
                hyper.beta1, hyper.beta2, hyper.eps)
    params = model.params.copy()
    scores, snapshots = [], []
    n = len(y)
    for _ in range(hyper.max_epochs):
        perm = rng.permutation(n)
        for start in range(0, n, hyper.batch_size):
            idx = perm[start:start + hyper.batch_size]
            logits, cache = forward_pass(model.spec, params, X[idx])
            _, dlogits = cross_entropy(logits, y[idx])
            g, _ = backward(model.spec, params, cache, dlogits)
            params = opt.step(params, g)
        snap = ClassifierModel(model.spec, params.copy())
        scores.append(macro_f1(predict(snap, X_val), y_val, M))
        snapshots.append(snap)
    best = select_best_epoch(scores)
    return FitResult(snapshots[best], scores, best + 1, snapshots if keep_snapshots else [])


# ---------------------------------------------------------------- estimator


class SoftmaxClassifier(BaseEstimator, ClassifierMixin, TransformerMixin):
    """sklearn-compatible wrapper around the softmax classifier.

    ``transform`` returns the feature-extractor output (last hidden layer).
    An empty ``hidden_layer_sizes`` gives a linear-softmax model.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int
    activation : {"relu", "tanh"}
    n_classes : int or None
        Size of the label space; inferred as ``max(y) + 1`` when None.
    learning_rate, weight_decay, batch_size, max_epochs :
        AdamW training settings.
    random_state : int
    warm_start : bool
        Continue from the previous solution on repeated ``fit`` calls.
    """

    def __init__(self, hidden_layer_sizes=(16,), activation="relu", n_classes=None,
                 learning_rate=2e-3, weight_decay=0.01, batch_size=32, max_epochs=3,
                 random_state=0, warm_start=False):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.n_classes = n_classes
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.random_state = random_state
        self.warm_start = warm_start

    def _spec(self, n_features, n_classes):
        hidden = tuple(self.hidden_layer_sizes or ())
        return ArchSpec(n_features, n_classes, "mlp" if hidden else "linear", hidden, self.activation)

    def _hyper(self):
        return TrainHyper(self.learning_rate, self.weight_decay, self.batch_size, self.max_epochs)

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.int64)
        if X_val is None:
            X_val, y_val = X, y
        else:
            X_val, y_val = check_X_y(X_val, y_val, dtype=np.float64)
        M = self.n_classes or int(max(y.max(), np.max(y_val))) + 1
        spec = self._spec(X.shape[1], M)
        seed = int(self.random_state or 0)
        if self.warm_start and getattr(self, "model_", None) is not None and self.model_.spec == spec:
            start = self.model_
        else:
            start = init(spec, seed)
        res = fit(start, X, y, X_val, y_val, self._hyper(), seed)
        self.model_ = res.model
        self.val_scores_ = res.val_scores
        self.best_epoch_ = res.best_epoch
        self.classes_ = np.arange(M)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return forward(self.model_, check_array(X, dtype=np.float64))

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)

    def transform(self, X):
        check_is_fitted(self, "model_")
        return embed(self.model_, check_array(X, dtype=np.float64))
