"""Self-training family (OBS, OCS, OS) and the Src-Only / Supervised baselines."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .core import (
    Buffer,
    DomainStream,
    MaskedStream,
    RunConfig,
    TestEvaluator,
    UnlabeledSplit,
    checksum,
    concat_splits,
    derive_rng,
    mask_target_labels,
    sub_seed,
)
from .exceptions import EmptyInput, NoTargets
from .model import ArchSpec, ClassifierModel, TrainHyper, fit, forward, init, predict, softmax

log = logging.getLogger(__name__)

TRACE_COLUMNS = ["t", "buffer_size", "pseudo_acc", "f_macro"]


@dataclass
class StepRecord:
    t: int
    buffer_size: int
    f_macro: float
    checksum: str
    pseudo_acc: Optional[float] = None
    extras: dict = field(default_factory=dict)


@dataclass
class MethodTrace:
    method: str
    name: str
    steps: list = field(default_factory=list)
    test_predictions: dict = field(default_factory=dict)
    pseudo_labels: dict = field(default_factory=dict)
    epoch_log: list = field(default_factory=list)

    @property
    def per_domain_f(self) -> list:
        return [s.f_macro for s in self.steps if s.t >= 1]

    def predictions(self, ts) -> list:
        return [self.test_predictions[t] for t in ts]

    def trajectory(self) -> dict:
        """Everything the method computed, without identity fields; used for equality checks."""
        d = self.to_dict()
        d.pop("method")
        d.pop("name")
        return d

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "name": self.name,
            "steps": [asdict(s) for s in self.steps],
            "test_predictions": {str(t): p.tolist() for t, p in sorted(self.test_predictions.items())},
            "pseudo_labels": {str(t): p.tolist() for t, p in sorted(self.pseudo_labels.items())},
            "epoch_log": self.epoch_log,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MethodTrace":
        return cls(
            d["method"],
            d["name"],
            [StepRecord(**s) for s in d["steps"]],
            {int(t): np.asarray(p, dtype=np.int64) for t, p in d["test_predictions"].items()},
            {int(t): np.asarray(p, dtype=np.int64) for t, p in d["pseudo_labels"].items()},
            d.get("epoch_log", []),
        )

    def to_csv(self) -> str:
        extra_cols = sorted({k for s in self.steps for k in s.extras})
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS + ["checksum"] + extra_cols)
        for s in self.steps:
            acc = "" if s.pseudo_acc is None else repr(float(s.pseudo_acc))
            w.writerow([s.t, s.buffer_size, acc, repr(float(s.f_macro)), s.checksum]
                       + [repr(float(s.extras[k])) if k in s.extras else "" for k in extra_cols])
        return buf.getvalue()


def read_trace_csv(text: str) -> list:
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for r in rows:
        rec = {"t": int(r["t"]), "buffer_size": int(r["buffer_size"]),
               "pseudo_acc": float(r["pseudo_acc"]) if r["pseudo_acc"] else None,
               "f_macro": float(r["f_macro"])}
        for k, v in r.items():
            if k not in rec and k != "checksum" and v:
                rec[k] = float(v)
        out.append(rec)
    return out


def annotate_pseudo_accuracy(trace: MethodTrace, stream: DomainStream) -> MethodTrace:
    """Fill ``pseudo_acc`` from hidden gold labels (privileged, diagnostics only)."""
    for step in trace.steps:
        pl = trace.pseudo_labels.get(step.t)
        if pl is None or step.t == 0:
            continue
        dom = stream[step.t]
        pool = concat_splits([dom.train, dom.val])
        gold = pool.y[np.argsort(pool.order, kind="stable")]
        if len(pl) == len(gold) and np.all(gold >= 0):
            step.pseudo_acc = float(np.mean(pl == gold))
    return trace


# ---------------------------------------------------------------- building blocks


def resolve_model(cfg: RunConfig, dim: int, num_classes: int):
    m = cfg.model
    if m is None:
        spec = ArchSpec(dim, num_classes)
    elif isinstance(m, ArchSpec):
        spec = m
    else:
        m = dict(m)
        m.setdefault("input_dim", dim)
        m.setdefault("num_classes", num_classes)
        spec = ArchSpec(**m)
    if spec.input_dim != dim or spec.num_classes != num_classes:
        raise ValueError("model spec does not match the stream's dimension or class count")
    h = cfg.train
    if h is None:
        hyper = TrainHyper()
    elif isinstance(h, TrainHyper):
        hyper = h
    else:
        hyper = TrainHyper(**h)
    return spec, hyper


def pseudo_label(model: ClassifierModel, X, threshold: Optional[float] = None):
    """Argmax pseudo-labels, input order preserved; ties resolve to the lower class index.

    With ``threshold`` set, also returns a mask of predictions whose softmax
    confidence reaches it.
    """
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        labels = np.empty(0, dtype=np.int64)
        return labels if threshold is None else (labels, np.empty(0, dtype=bool))
    logits = forward(model, X.reshape(len(X), -1))
    labels = np.argmax(logits, axis=1)
    if threshold is None:
        return labels
    return labels, softmax(logits).max(axis=1) >= threshold


def upsample(X, y, num_classes: int, seed: int):
    """Resample every present class with replacement up to the largest class count.

    Originals come first in input order; the drawn duplicates follow, class by class.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise EmptyInput("cannot upsample an empty set")
    counts = np.bincount(y, minlength=num_classes)
    target = counts.max()
    rng = derive_rng(seed, "upsample")
    extra = []
    for c in range(num_classes):
        if 0 < counts[c] < target:
            members = np.flatnonzero(y == c)
            extra.append(rng.choice(members, size=target - counts[c], replace=True))
    if not extra:
        return X, y
    idx = np.concatenate([np.arange(len(y))] + extra)
    return X[idx], y[idx]


def _maybe_upsample(X, y, num_classes, enabled, seed):
    return upsample(X, y, num_classes, seed) if enabled else (X, y)


def _pool_target(train, val):
    X = np.vstack([train.X, val.X])
    order = np.concatenate([train.order, val.order])
    perm = np.argsort(order, kind="stable")
    return X[perm], order[perm], len(train)


@dataclass
class StepOutput:
    t: int
    model: ClassifierModel
    buffer_size: int
    pseudo_labels: Optional[np.ndarray] = None


def incremental_self_training(
    source_train, source_val, targets, spec: ArchSpec, hyper: TrainHyper, seed: int,
    capacity: Optional[int], upsample_enabled: bool = True, warm_start: bool = True,
    val_source: str = "latest", threshold: Optional[float] = None, final_fit: bool = False,
    on_step: Optional[Callable[[StepOutput], None]] = None,
) -> list:
    """Shared OBS/OCS loop over arrays.

    ``source_train`` is ``(X, y, order)``, ``source_val`` is ``(X, y)`` and
    ``targets`` is a list of ``(train, val)`` pairs of unlabeled splits with
    ``X`` and ``order``. ``capacity=None`` keeps every pseudo-labeled instance.

    Step 0 fits the source model on B_0; that model is also f_1. For t >= 2,
    f_t is fine-tuned on the upsampled buffer B_{t-1}. After evaluation hooks
    run, f_t pseudo-labels the pooled train+val of domain t, which enters the
    buffer in arrival order.
    """
    M = spec.num_classes
    Xs, ys, os_ = source_train
    buf = Buffer.empty(spec.input_dim, capacity).insert(Xs, ys, os_)
    val_X, val_y = source_val

    def train(start, t):
        Xb, yb = _maybe_upsample(buf.X, buf.y, M, upsample_enabled, sub_seed(seed, "upsample", t))
        vX, vy = val_X, val_y
        if val_source == "buffer_sample" and t > 0:
            rng = derive_rng(seed, "val-sample", t)
            pick = rng.choice(len(buf), size=max(1, len(buf) // 10), replace=False)
            vX, vy = buf.X[np.sort(pick)], buf.y[np.sort(pick)]
        return fit(start, Xb, yb, vX, vy, hyper, sub_seed(seed, "fit", t)).model

    model = train(init(spec, seed), 0)
    outputs = [StepOutput(0, model, len(buf))]
    if on_step:
        on_step(outputs[-1])
    for t, (tr, va) in enumerate(targets, start=1):
        if t >= 2:
            model = train(model if warm_start else init(spec, seed), t - 1)
        out = StepOutput(t, model, len(buf))
        Xp, order, n_train = _pool_target(tr, va)
        if threshold is None:
            yp = pseudo_label(model, Xp)
            keep = np.ones(len(yp), dtype=bool)
        else:
            yp, keep = pseudo_label(model, Xp, threshold)
        out.pseudo_labels = yp
        if on_step:
            on_step(out)
        outputs.append(out)
        buf = buf.insert(Xp[keep], yp[keep], order[keep])
        va_mask = np.isin(order, va.order)
        if va_mask.any():
            val_X, val_y = Xp[va_mask], yp[va_mask]
    if final_fit:
        model = train(model if warm_start else init(spec, seed), len(targets))
        outputs.append(StepOutput(len(targets) + 1, model, len(buf)))
    return outputs


# ---------------------------------------------------------------- method runners


def _setup(stream: DomainStream, cfg: RunConfig, allow_privileged: bool = False):
    if stream.T < 1:
        raise NoTargets("the stream has no target domains")
    view = mask_target_labels(stream, allow_privileged=allow_privileged)
    spec, hyper = resolve_model(cfg, view.dim, view.num_classes)
    return view, TestEvaluator(stream), spec, hyper


def _record(trace, evaluator, view, t, model, buffer_size):
    preds = predict(model, view.test_features(t))
    trace.test_predictions[t] = preds
    trace.steps.append(StepRecord(t, int(buffer_size), evaluator.score(t, preds), checksum(model.params)))


def train_source_model(view: MaskedStream, cfg: RunConfig, spec, hyper) -> ClassifierModel:
    """f_0: fit on the (upsampled) labeled source train split, select on source val."""
    tr, va = view.source("train"), view.source("val")
    Xb, yb = _maybe_upsample(tr.X, tr.y, spec.num_classes, cfg.upsample, sub_seed(cfg.seed, "upsample", 0))
    return fit(init(spec, cfg.seed), Xb, yb, va.X, va.y, hyper, sub_seed(cfg.seed, "fit", 0)).model


def run_src_only(stream: DomainStream, cfg: RunConfig) -> MethodTrace:
    view, evaluator, spec, hyper = _setup(stream, cfg)
    trace = MethodTrace(cfg.method, cfg.label)
    model = train_source_model(view, cfg, spec, hyper)
    n = len(view.source("train"))
    for t in range(view.T + 1):
        _record(trace, evaluator, view, t, model, n)
    return trace


def run_supervised(stream: DomainStream, cfg: RunConfig) -> MethodTrace:
    """Upper bound: one fit on the gold-labeled train splits of every domain."""
    view, evaluator, spec, hyper = _setup(stream, cfg, allow_privileged=True)
    full = view.privileged()
    tr = concat_splits([d.train for d in full.domains])
    va = concat_splits([d.val for d in full.domains])
    Xb, yb = _maybe_upsample(tr.X, tr.y, spec.num_classes, cfg.upsample, sub_seed(cfg.seed, "upsample", 0))
    model = fit(init(spec, cfg.seed), Xb, yb, va.X, va.y, hyper, sub_seed(cfg.seed, "fit", 0)).model
    trace = MethodTrace(cfg.method, cfg.label)
    for t in range(view.T + 1):
        _record(trace, evaluator, view, t, model, len(tr))
    return trace


def _run_incremental(stream: DomainStream, cfg: RunConfig, capacity) -> MethodTrace:
    view, evaluator, spec, hyper = _setup(stream, cfg)
    tr, va = view.source("train"), view.source("val")
    targets = [(view.target(t, "train"), view.target(t, "val")) for t in range(1, view.T + 1)]
    trace = MethodTrace(cfg.method, cfg.label)

    def on_step(out: StepOutput):
        _record(trace, evaluator, view, out.t, out.model, out.buffer_size)
        if out.pseudo_labels is not None:
            trace.pseudo_labels[out.t] = out.pseudo_labels

    incremental_self_training(
        (tr.X, tr.y, tr.order), (va.X, va.y), targets, spec, hyper, cfg.seed, capacity,
        cfg.upsample, cfg.warm_start, cfg.val_source, cfg.pseudo_threshold, on_step=on_step,
    )
    return trace


def run_obs(stream: DomainStream, cfg: RunConfig) -> MethodTrace:
    """Buffered self-training: FIFO buffer of size b (default: |D_0 train|)."""
    b = cfg.buffer_size or len(stream[0].train)
    return _run_incremental(stream, cfg, b)


def run_ocs(stream: DomainStream, cfg: RunConfig) -> MethodTrace:
    """Cumulative self-training: every pseudo-labeled instance stays in the buffer."""
    return _run_incremental(stream, cfg, None)


def run_os(stream: DomainStream, cfg: RunConfig) -> MethodTrace:
    """One pass: f_0 pseudo-labels all targets, then a single retrain on everything."""
    view, evaluator, spec, hyper = _setup(stream, cfg)
    trace = MethodTrace(cfg.method, cfg.label)
    f0 = train_source_model(view, cfg, spec, hyper)
    tr, va = view.source("train"), view.source("val")
    _record(trace, evaluator, view, 0, f0, len(tr))

    Xs, ys = [tr.X], [tr.y]
    vXs, vys = [va.X], [va.y]
    for t in range(1, view.T + 1):
        ttr, tva = view.target(t, "train"), view.target(t, "val")
        Xp, order, _ = _pool_target(ttr, tva)
        yp = pseudo_label(f0, Xp)
        trace.pseudo_labels[t] = yp
        Xs.append(Xp)
        ys.append(yp)
        va_mask = np.isin(order, tva.order)
        vXs.append(Xp[va_mask])
        vys.append(yp[va_mask])
    X_all, y_all = np.vstack(Xs), np.concatenate(ys)
    Xb, yb = _maybe_upsample(X_all, y_all, spec.num_classes, cfg.upsample, sub_seed(cfg.seed, "upsample", "all"))
    start = f0 if cfg.warm_start else init(spec, cfg.seed)
    fT = fit(start, Xb, yb, np.vstack(vXs), np.concatenate(vys), hyper, sub_seed(cfg.seed, "fit", "all")).model
    for t in range(1, view.T + 1):
        _record(trace, evaluator, view, t, fT, len(y_all))
    return trace


RUNNERS = {
    "SrcOnly": run_src_only,
    "Supervised": run_supervised,
    "OBS": run_obs,
    "OCS": run_ocs,
    "OS": run_os,
}


def run_method(stream: DomainStream, cfg: RunConfig) -> MethodTrace:
    if cfg.method == "DANN":
        from .dann import run_dann

        return run_dann(stream, cfg)
    return RUNNERS[cfg.method](stream, cfg)


# ---------------------------------------------------------------- estimator


class EvolvingSelfTraining(BaseEstimator, ClassifierMixin):
    """Self-training across a sequence of unlabeled target domains.

    ``fit(X, y, targets)`` takes labeled source data and a list of unlabeled
    target feature arrays in chronological order. ``strategy`` selects the
    buffer policy: ``"buffered"`` (FIFO of size ``buffer_size``, default the
    source size), ``"cumulative"`` or ``"one_pass"``. After fitting,
    ``models_[t]`` is the model that was applied to target ``t`` and
    ``predict`` uses a final model trained on the last buffer.
    """

    def __init__(self, strategy="cumulative", buffer_size=None, upsample=True, warm_start=True,
                 hidden_layer_sizes=(16,), activation="relu", learning_rate=2e-3, weight_decay=0.01,
                 batch_size=32, max_epochs=3, random_state=0):
        self.strategy = strategy
        self.buffer_size = buffer_size
        self.upsample = upsample
        self.warm_start = warm_start
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.random_state = random_state

    def fit(self, X, y, targets, X_val=None, y_val=None, n_classes=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.int64)
        if X_val is None:
            X_val, y_val = X, y
        M = n_classes or int(y.max()) + 1
        hidden = tuple(self.hidden_layer_sizes or ())
        spec = ArchSpec(X.shape[1], M, "mlp" if hidden else "linear", hidden, self.activation)
        hyper = TrainHyper(self.learning_rate, self.weight_decay, self.batch_size, self.max_epochs)
        seed = int(self.random_state or 0)
        counter = len(y)
        split_targets = []
        for Xt in targets:
            Xt = check_array(Xt, dtype=np.float64)
            order = np.arange(counter, counter + len(Xt))
            counter += len(Xt)
            # the whole target pool is pseudo-labeled; it doubles as the next validation set
            split_targets.append((UnlabeledSplit(Xt[:0], order[:0]), UnlabeledSplit(Xt, order)))
        if self.strategy == "one_pass":
            outs = self._fit_one_pass(X, y, X_val, y_val, split_targets, spec, hyper, seed)
        elif self.strategy in ("buffered", "cumulative"):
            cap = (self.buffer_size or len(y)) if self.strategy == "buffered" else None
            outs = incremental_self_training(
                (X, y, np.arange(len(y))), (np.asarray(X_val), np.asarray(y_val)), split_targets,
                spec, hyper, seed, cap, self.upsample, self.warm_start, final_fit=True,
            )
        else:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        self.models_ = [o.model for o in outs[:-1]]
        self.buffer_sizes_ = [o.buffer_size for o in outs]
        self.pseudo_labels_ = [o.pseudo_labels for o in outs[1:-1]]
        self.model_ = outs[-1].model
        self.classes_ = np.arange(M)
        self.n_features_in_ = X.shape[1]
        return self

    def _fit_one_pass(self, X, y, X_val, y_val, targets, spec, hyper, seed):
        Xb, yb = _maybe_upsample(X, y, spec.num_classes, self.upsample, sub_seed(seed, "upsample", 0))
        f0 = fit(init(spec, seed), Xb, yb, X_val, y_val, hyper, sub_seed(seed, "fit", 0)).model
        Xs, ys = [X], [y]
        outs = [StepOutput(0, f0, len(y))]
        for t, (_, va) in enumerate(targets, start=1):
            yp = pseudo_label(f0, va.X)
            Xs.append(va.X)
            ys.append(yp)
            outs.append(StepOutput(t, f0, len(y), yp))
        X_all, y_all = np.vstack(Xs), np.concatenate(ys)
        Xb, yb = _maybe_upsample(X_all, y_all, spec.num_classes, self.upsample, sub_seed(seed, "upsample", "all"))
        start = f0 if self.warm_start else init(spec, seed)
        fT = fit(start, Xb, yb, X_all, y_all, hyper, sub_seed(seed, "fit", "all")).model
        outs.append(StepOutput(len(targets) + 1, fT, len(y_all)))
        return outs

    def predict(self, X, t: Optional[int] = None):
        check_is_fitted(self, "model_")
        model = self.model_ if t is None else self.models_[t]
        return predict(model, check_array(X, dtype=np.float64))

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return softmax(forward(self.model_, check_array(X, dtype=np.float64)))
