"""Domain-adversarial training (DANN) on top of the shared MLP classifier."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .core import DomainStream, RunConfig, derive_rng, sub_seed
from .exceptions import NoTargets
from .model import (
    ArchSpec,
    ClassifierModel,
    TrainHyper,
    backward,
    cross_entropy,
    embed,
    fit,
    forward,
    forward_pass,
    glorot_init,
    init,
    mlp_backward,
    mlp_forward,
    predict,
    softmax,
)
from .selftrain import MethodTrace, _maybe_upsample, _pool_target, _record, _setup, train_source_model

log = logging.getLogger(__name__)


def grl_forward(x):
    """Gradient reversal is the identity on the forward pass."""
    return x


def grl_backward(grad, lam: float):
    """Multiply the incoming gradient by ``-lam``."""
    return -lam * np.asarray(grad, dtype=np.float64)


@dataclass
class DannSpec:
    discriminator_dims: tuple = (32,)
    w_adv: float = 1.0
    lr_label: float = 1e-3
    lr_domain: float = 1e-3
    lr_extractor: float = 1e-4
    gamma: float = 0.001
    tau: float = 0.75
    epochs: int = 20
    batch_size: int = 32
    momentum: float = 0.9
    upsample: bool = True

    def __post_init__(self):
        self.discriminator_dims = tuple(int(h) for h in self.discriminator_dims)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if min(self.lr_label, self.lr_domain, self.lr_extractor) < 0 or self.w_adv < 0:
            raise ValueError("learning rates and w_adv must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    def lr_scale(self, i: int) -> float:
        return (1.0 + self.gamma * i) ** (-self.tau)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["discriminator_dims"] = list(self.discriminator_dims)
        return d

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "DannSpec":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown DANN fields: {sorted(unknown)}")
        return cls(**d)


def disc_sizes(spec: ArchSpec, dspec: DannSpec) -> list:
    return [spec.feature_dim, *dspec.discriminator_dims, 1]


@dataclass
class DannState:
    model: ClassifierModel
    disc: np.ndarray
    dspec: DannSpec
    vel_model: np.ndarray = None
    vel_disc: np.ndarray = None
    iteration: int = 0

    def __post_init__(self):
        if self.vel_model is None:
            self.vel_model = np.zeros_like(self.model.params)
        if self.vel_disc is None:
            self.vel_disc = np.zeros_like(self.disc)

    @classmethod
    def start(cls, model: ClassifierModel, dspec: DannSpec, seed: int) -> "DannState":
        rng = derive_rng(seed, "disc-init")
        disc = glorot_init(disc_sizes(model.spec, dspec), rng)
        return cls(model.copy(), disc, dspec)

    @property
    def sizes(self) -> list:
        return disc_sizes(self.model.spec, self.dspec)


def _head_mask(spec: ArchSpec) -> np.ndarray:
    """True for parameters of the final (label) layer, False for the extractor."""
    sizes = spec.layer_sizes
    n_head = sizes[-2] * sizes[-1] + sizes[-1]
    mask = np.zeros(spec.param_count, dtype=bool)
    mask[-n_head:] = True
    return mask


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return np.exp(-_softplus(-z))


def dann_gradients(spec: ArchSpec, params, disc, sizes, Xs, ys, Xt, lam: float):
    """Losses and gradients of one DANN step.

    ``g_model`` is the gradient of ``L_cls - lam * L_adv`` with respect to the
    classifier parameters, which is what the reversal layer delivers to the
    extractor (the label head never sees ``L_adv``). ``g_disc`` is the gradient
    of ``L_adv`` with respect to the discriminator. Source rows get domain 0,
    target rows domain 1.
    """
    Xs = np.asarray(Xs, dtype=np.float64)
    Xt = np.asarray(Xt, dtype=np.float64)
    ns, nt = len(Xs), len(Xt)
    X = np.vstack([Xs, Xt])
    logits, cache = forward_pass(spec, params, X)
    emb = cache[0][-1]
    l_cls, dlog_s = cross_entropy(logits[:ns], ys)
    dlogits = np.zeros_like(logits)
    dlogits[:ns] = dlog_s

    z, dcache = mlp_forward(sizes, "relu", disc, grl_forward(emb))
    z = z[:, 0]
    d = np.concatenate([np.zeros(ns), np.ones(nt)])
    l_adv = float(np.mean(_softplus(z) - d * z))
    dz = ((_sigmoid(z) - d) / len(d))[:, None]
    g_disc, demb = mlp_backward(sizes, "relu", disc, dcache, dz)
    g_model, _ = backward(spec, params, cache, dlogits, dembed=grl_backward(demb, lam))
    acc = float(np.mean((z > 0) == (d > 0)))
    return {"l_cls": float(l_cls), "l_adv": l_adv, "g_model": g_model, "g_disc": g_disc, "disc_acc": acc}


def dann_objective(spec: ArchSpec, params, disc, sizes, Xs, ys, Xt, lam: float):
    """``(L_cls - lam * L_adv, L_adv)``: the pair whose gradients ``dann_gradients`` returns."""
    r = dann_gradients(spec, params, disc, sizes, Xs, ys, Xt, lam)
    return r["l_cls"] - lam * r["l_adv"], r["l_adv"]


def dann_step(state: DannState, Xs, ys, Xt) -> tuple:
    """One SGD-with-momentum update with annealed learning rates; returns ``(state, info)``."""
    ds = state.dspec
    spec = state.model.spec
    r = dann_gradients(spec, state.model.params, state.disc, state.sizes, Xs, ys, Xt, ds.w_adv)
    scale = ds.lr_scale(state.iteration)
    lr_model = np.where(_head_mask(spec), ds.lr_label, ds.lr_extractor) * scale
    vm = ds.momentum * state.vel_model + r["g_model"]
    vd = ds.momentum * state.vel_disc + r["g_disc"]
    model = ClassifierModel(spec, state.model.params - lr_model * vm)
    disc = state.disc - ds.lr_domain * scale * vd
    new = DannState(model, disc, ds, vm, vd, state.iteration + 1)
    return new, {k: r[k] for k in ("l_cls", "l_adv", "disc_acc")}


def discriminator_accuracy(state: DannState, Xs, Xt) -> float:
    """Fraction of source (0) and target (1) rows the discriminator gets right."""
    emb = embed(state.model, np.vstack([Xs, Xt]))
    z = mlp_forward(state.sizes, "relu", state.disc, emb)[0][:, 0]
    d = np.concatenate([np.zeros(len(Xs)), np.ones(len(Xt))])
    return float(np.mean((z > 0) == (d > 0)))


def _cycle(perm: np.ndarray, k: int, bs: int) -> np.ndarray:
    return perm[(k * bs + np.arange(bs)) % len(perm)]


def train_dann(model: ClassifierModel, Xs, ys, Xt, dspec: DannSpec, seed: int):
    """Adapt ``model`` to ``Xt`` for ``dspec.epochs`` epochs.

    An epoch covers the larger of the two sides once; the smaller one is cycled.
    Returns the final state and one log row per epoch.
    """
    state = DannState.start(model, dspec, seed)
    rng = derive_rng(seed, "dann-batches")
    ns, nt = len(Xs), len(Xt)
    bs = dspec.batch_size
    steps = int(np.ceil(max(ns, nt) / bs))
    rows = []
    for epoch in range(1, dspec.epochs + 1):
        ps, pt = rng.permutation(ns), rng.permutation(nt)
        infos = []
        for k in range(steps):
            si, ti = _cycle(ps, k, min(bs, ns)), _cycle(pt, k, min(bs, nt))
            state, info = dann_step(state, Xs[si], ys[si], Xt[ti])
            infos.append(info)
        rows.append({
            "epoch": epoch,
            "l_cls": float(np.mean([i["l_cls"] for i in infos])),
            "l_adv": float(np.mean([i["l_adv"] for i in infos])),
            "discriminator_acc": float(np.mean([i["disc_acc"] for i in infos])),
        })
    return state, rows


def resolve_dann(cfg: RunConfig) -> DannSpec:
    d = cfg.dann
    if isinstance(d, DannSpec):
        return d
    return DannSpec.from_dict(d)


def run_dann(stream: DomainStream, cfg: RunConfig) -> MethodTrace:
    """Per target domain, adapt a copy of f_0 against that domain's unlabeled pool."""
    if stream.T < 1:
        raise NoTargets("DANN needs at least one target domain")
    view, evaluator, spec, hyper = _setup(stream, cfg)
    dspec = resolve_dann(cfg)
    f0 = train_source_model(view, cfg, spec, hyper)
    tr = view.source("train")
    trace = MethodTrace(cfg.method, cfg.label)
    _record(trace, evaluator, view, 0, f0, len(tr))
    Xs, ys = _maybe_upsample(tr.X, tr.y, spec.num_classes, dspec.upsample and cfg.upsample,
                             sub_seed(cfg.seed, "upsample", 0))
    for t in range(1, view.T + 1):
        Xt, _, _ = _pool_target(view.target(t, "train"), view.target(t, "val"))
        state, rows = train_dann(f0, Xs, ys, Xt, dspec, sub_seed(cfg.seed, "dann", t))
        _record(trace, evaluator, view, t, state.model, len(Xt))
        trace.steps[-1].extras = {k: rows[-1][k] for k in ("discriminator_acc", "l_adv", "l_cls")}
        trace.epoch_log.extend({"t": t, **r} for r in rows)
        log.debug("DANN t=%d disc_acc=%.3f", t, rows[-1]["discriminator_acc"])
    return trace


class DANNClassifier(BaseEstimator, ClassifierMixin):
    """Source classifier adapted to an unlabeled target sample by gradient reversal.

    ``fit(X, y, X_target)`` first trains the MLP on the labeled source with
    AdamW, then runs ``epochs`` of adversarial updates against ``X_target``.
    """

    def __init__(self, hidden_layer_sizes=(16,), activation="relu", discriminator_dims=(32,),
                 w_adv=1.0, lr_label=1e-3, lr_domain=1e-3, lr_extractor=1e-4, gamma=0.001,
                 tau=0.75, epochs=20, batch_size=32, momentum=0.9, pretrain_learning_rate=2e-3,
                 pretrain_epochs=3, random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.discriminator_dims = discriminator_dims
        self.w_adv = w_adv
        self.lr_label = lr_label
        self.lr_domain = lr_domain
        self.lr_extractor = lr_extractor
        self.gamma = gamma
        self.tau = tau
        self.epochs = epochs
        self.batch_size = batch_size
        self.momentum = momentum
        self.pretrain_learning_rate = pretrain_learning_rate
        self.pretrain_epochs = pretrain_epochs
        self.random_state = random_state

    def _dspec(self) -> DannSpec:
        return DannSpec(self.discriminator_dims, self.w_adv, self.lr_label, self.lr_domain,
                        self.lr_extractor, self.gamma, self.tau, self.epochs, self.batch_size,
                        self.momentum, upsample=False)

    def fit(self, X, y, X_target, n_classes=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.int64)
        Xt = check_array(X_target, dtype=np.float64)
        M = n_classes or int(y.max()) + 1
        hidden = tuple(self.hidden_layer_sizes or ())
        spec = ArchSpec(X.shape[1], M, "mlp" if hidden else "linear", hidden, self.activation)
        seed = int(self.random_state or 0)
        hyper = TrainHyper(self.pretrain_learning_rate, batch_size=self.batch_size,
                           max_epochs=self.pretrain_epochs)
        f0 = fit(init(spec, seed), X, y, X, y, hyper, sub_seed(seed, "fit", 0)).model
        self.state_, self.history_ = train_dann(f0, X, y, Xt, self._dspec(), sub_seed(seed, "dann", 1))
        self.model_ = self.state_.model
        self.classes_ = np.arange(M)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return predict(self.model_, check_array(X, dtype=np.float64))

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return softmax(forward(self.model_, check_array(X, dtype=np.float64)))

    def discriminator_score(self, X_source, X_target) -> float:
        check_is_fitted(self, "state_")
        return discriminator_accuracy(self.state_, check_array(X_source), check_array(X_target))
