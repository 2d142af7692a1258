"""Evaluation metrics: macro-F1, F_avg, relative gain, paired bootstrap and Pearson r."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .exceptions import ConstantInput, DegenerateDenominator, EmptyInput, LengthMismatch


def _per_class_f1(preds: np.ndarray, golds: np.ndarray, num_classes: int):
    tp = np.bincount(golds[preds == golds], minlength=num_classes).astype(np.float64)
    n_pred = np.bincount(preds, minlength=num_classes).astype(np.float64)
    n_gold = np.bincount(golds, minlength=num_classes).astype(np.float64)
    denom = n_pred + n_gold
    f1 = np.divide(2.0 * tp, denom, out=np.zeros(num_classes), where=denom > 0)
    return f1, denom > 0


def macro_f1(preds, golds, num_classes: Optional[int] = None) -> float:
    """Unweighted mean of per-class F1.

    Classes absent from both ``preds`` and ``golds`` are left out of the mean;
    a class that appears on either side with no true positive contributes 0.
    """
    preds = np.asarray(preds, dtype=np.int64)
    golds = np.asarray(golds, dtype=np.int64)
    if preds.shape != golds.shape:
        raise LengthMismatch(f"{len(preds)} predictions for {len(golds)} gold labels")
    if preds.size == 0:
        raise EmptyInput("macro_f1 needs at least one example")
    if num_classes is None:
        num_classes = int(max(preds.max(), golds.max())) + 1
    if preds.min() < 0 or golds.min() < 0 or preds.max() >= num_classes or golds.max() >= num_classes:
        raise ValueError("labels must lie in [0, num_classes)")
    f1, present = _per_class_f1(preds, golds, num_classes)
    return float(f1[present].mean())


def f_avg(per_domain_f) -> float:
    v = np.asarray(per_domain_f, dtype=np.float64)
    if v.size == 0:
        raise EmptyInput("f_avg of an empty trajectory")
    return float(v.mean())


def relative_gain(f_method: float, f_srconly: float, f_supervised: float) -> float:
    denom = f_supervised - f_srconly
    if denom == 0:
        raise DegenerateDenominator("Supervised and Src-Only scores coincide")
    return (f_method - f_srconly) / denom


def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise LengthMismatch("pearson_r inputs differ in length")
    if x.size < 2:
        raise EmptyInput("pearson_r needs at least two points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ConstantInput("pearson_r is undefined for a constant input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


# ---------------------------------------------------------------- bootstrap


@dataclass
class BootstrapResult:
    diff_mean: float
    ci_low: float
    ci_high: float
    n_resamples: int
    level: float = 0.95

    @property
    def excludes_zero(self) -> bool:
        return self.ci_low > 0 or self.ci_high < 0


def _as_domains(arrs):
    if isinstance(arrs, np.ndarray) or (len(arrs) and np.isscalar(arrs[0])):
        return [np.asarray(arrs, dtype=np.int64)]
    return [np.asarray(a, dtype=np.int64) for a in arrs]


def _percentile_ci(samples: np.ndarray, level: float):
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(samples, [100 * alpha, 100 * (1 - alpha)])
    return float(lo), float(hi)


def resample_indices(sizes: Sequence[int], n: int, seed: int, pooled: bool = False):
    """Yield, per resample, one index array per domain (drawn with replacement).

    Resample ``i`` uses its own generator derived from ``(seed, i)`` so results do
    not depend on evaluation order.
    """
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, i]))
        if pooled:
            idx = rng.integers(0, total, size=total)
            yield [idx[(idx >= offsets[k]) & (idx < offsets[k + 1])] - offsets[k] for k in range(len(sizes))]
        else:
            yield [rng.integers(0, s, size=s) for s in sizes]


def _resampled_f(preds, golds, idx, num_classes):
    out = np.empty(len(idx))
    for k, ix in enumerate(idx):
        out[k] = macro_f1(preds[k][ix], golds[k][ix], num_classes) if len(ix) else np.nan
    return out


def paired_bootstrap(
    preds_a,
    preds_b,
    golds,
    num_classes: Optional[int] = None,
    n: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    pooled: bool = False,
) -> BootstrapResult:
    """Percentile CI for F_avg(A) - F_avg(B) under test-set resampling.

    ``preds_a``, ``preds_b`` and ``golds`` are either single arrays or one
    array per target domain. Each resample draws every domain's test set with
    replacement, recomputes macro-F1 per domain and averages over domains.
    ``pooled=True`` resamples the concatenated test sets instead.
    """
    pa, pb, g = _as_domains(preds_a), _as_domains(preds_b), _as_domains(golds)
    if not (len(pa) == len(pb) == len(g)):
        raise LengthMismatch("prediction and gold lists cover different numbers of domains")
    for a, b, y in zip(pa, pb, g):
        if not (a.shape == b.shape == y.shape):
            raise LengthMismatch("predictions are not aligned with gold labels")
    if num_classes is None:
        num_classes = int(max(max(a.max(), b.max(), y.max()) for a, b, y in zip(pa, pb, g))) + 1
    diffs = np.empty(n)
    for i, idx in enumerate(resample_indices([len(y) for y in g], n, seed, pooled)):
        fa = _resampled_f(pa, g, idx, num_classes)
        fb = _resampled_f(pb, g, idx, num_classes)
        diffs[i] = np.nanmean(fa) - np.nanmean(fb)
    lo, hi = _percentile_ci(diffs, level)
    return BootstrapResult(float(diffs.mean()), lo, hi, n, level)


# ---------------------------------------------------------------- gain vs shift


@dataclass
class GainShift:
    points: list  # (t, mmd, delta_f)
    pearson_r: Optional[float]
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None
    n_resamples: int = 0


def relative_improvement(f_method, f_srconly) -> np.ndarray:
    """``(F_method - F_src) / F_src`` per domain; NaN where ``F_src`` is zero."""
    f_method = np.asarray(f_method, dtype=np.float64)
    f_srconly = np.asarray(f_srconly, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (f_method - f_srconly) / f_srconly
    out[f_srconly == 0] = np.nan
    return out


def gain_vs_shift(f_method, f_srconly, mmd_to_source) -> GainShift:
    """Pair per-domain relative improvement over Src-Only with MMD to the source.

    All three vectors are indexed by target domain ``t = 1..T``. ``pearson_r``
    is None when the gains are constant or undefined somewhere.
    """
    delta = relative_improvement(f_method, f_srconly)
    mmd = np.asarray(mmd_to_source, dtype=np.float64)
    if delta.shape != mmd.shape:
        raise LengthMismatch("per-domain scores and MMD vector differ in length")
    points = [(t + 1, float(m), float(d)) for t, (m, d) in enumerate(zip(mmd, delta))]
    r = None
    if np.all(np.isfinite(delta)):
        try:
            r = pearson_r(mmd, delta)
        except ConstantInput:
            pass
    return GainShift(points, r)


def gain_shift_bootstrap(
    preds_method, preds_srconly, golds, mmd_to_source, num_classes=None, n=1000, level=0.95, seed=0
) -> GainShift:
    """``gain_vs_shift`` plus a percentile CI on r from per-domain test resampling.

    Resamples where Src-Only scores zero on some domain have no defined gain
    and are dropped; ``n_resamples`` counts the ones kept.
    """
    pm, ps, g = _as_domains(preds_method), _as_domains(preds_srconly), _as_domains(golds)
    if num_classes is None:
        num_classes = int(max(max(a.max(), b.max(), y.max()) for a, b, y in zip(pm, ps, g))) + 1
    fm = [macro_f1(a, y, num_classes) for a, y in zip(pm, g)]
    fs = [macro_f1(b, y, num_classes) for b, y in zip(ps, g)]
    result = gain_vs_shift(fm, fs, mmd_to_source)
    mmd = np.asarray(mmd_to_source, dtype=np.float64)
    rs = []
    for idx in resample_indices([len(y) for y in g], n, seed):
        fa = _resampled_f(pm, g, idx, num_classes)
        fb = _resampled_f(ps, g, idx, num_classes)
        delta = relative_improvement(fa, fb)
        if not np.all(np.isfinite(delta)):
            continue
        try:
            rs.append(pearson_r(mmd, delta))
        except ConstantInput:
            rs.append(0.0)
    if rs:
        result.ci_low, result.ci_high = _percentile_ci(np.asarray(rs), level)
        result.n_resamples = len(rs)
    return result


# ---------------------------------------------------------------- report


@dataclass
class EvalReport:
    per_domain_f: list
    f_avg: float
    delta_avg_norm: Optional[float] = None
    bootstrap: Optional[dict] = None
    correlation: Optional[dict] = None
    extras: dict = field(default_factory=dict)

    @classmethod
    def from_scores(cls, per_domain_f) -> "EvalReport":
        per_domain_f = [float(v) for v in per_domain_f]
        return cls(per_domain_f, f_avg(per_domain_f))

    def to_dict(self) -> dict:
        d = asdict(self)
        if not d["extras"]:
            d.pop("extras")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)
