"""RBF-kernel Maximum Mean Discrepancy between domains of a stream."""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .core import DomainStream, derive_rng
from .exceptions import DegenerateBandwidth, MissingLabels, TooFewSamples

ESTIMATORS = ("biased", "unbiased")
MAX_BANDWIDTH_POINTS = 2000
DEFAULT_CAP = 2000
DISPLAY_SCALE = 100.0


def _subsample(X: np.ndarray, cap: Optional[int], rng: np.random.Generator) -> np.ndarray:
    if cap is None or len(X) <= cap:
        return X
    return X[np.sort(rng.choice(len(X), size=cap, replace=False))]


def median_heuristic_bandwidth(X, Y=None, max_points: int = MAX_BANDWIDTH_POINTS, seed: int = 0) -> float:
    """Median pairwise Euclidean distance over the pooled sample.

    Pools larger than ``max_points`` are subsampled with a generator derived
    from ``seed``, so the result is deterministic.
    """
    Z = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if Y is not None:
        Z = np.vstack([Z, np.atleast_2d(np.asarray(Y, dtype=np.float64))])
    if len(Z) < 2:
        raise TooFewSamples("the bandwidth needs at least two points")
    Z = _subsample(Z, max_points, derive_rng(seed, "bandwidth"))
    sigma = float(np.median(pdist(Z)))
    if not sigma > 0:
        raise DegenerateBandwidth("median pairwise distance is zero")
    return sigma


def rbf_kernel(A, B, bandwidth: float) -> np.ndarray:
    return np.exp(-cdist(A, B, "sqeuclidean") / (2.0 * bandwidth * bandwidth))


def mmd2(X, Y, bandwidth: Optional[float] = None, estimator: str = "biased") -> float:
    """Squared MMD between samples ``X`` and ``Y`` under an RBF kernel.

    ``estimator="biased"`` is the V-statistic (diagonal terms included, never
    negative); ``"unbiased"`` drops the ``i == j`` terms of the within-sample
    means and can dip below zero. ``bandwidth=None`` uses the median heuristic
    on the pooled pair.
    """
    if estimator not in ESTIMATORS:
        raise ValueError(f"estimator must be one of {ESTIMATORS}")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    m, n = len(X), len(Y)
    if m < 2 or n < 2:
        raise TooFewSamples(f"mmd2 needs at least two points per side, got {m} and {n}")
    if bandwidth is None:
        bandwidth = median_heuristic_bandwidth(X, Y)
    Kxx = rbf_kernel(X, X, bandwidth)
    Kyy = rbf_kernel(Y, Y, bandwidth)
    Kxy = rbf_kernel(X, Y, bandwidth)
    if estimator == "biased":
        return float(Kxx.mean() + Kyy.mean() - 2.0 * Kxy.mean())
    xx = (Kxx.sum() - np.trace(Kxx)) / (m * (m - 1))
    yy = (Kyy.sum() - np.trace(Kyy)) / (n * (n - 1))
    return float(xx + yy - 2.0 * Kxy.mean())


def permutation_test(X, Y, bandwidth: Optional[float] = None, n_permutations: int = 200,
                     estimator: str = "biased", seed: int = 0):
    """Observed mmd2 plus its null distribution under random re-splits of X ∪ Y.

    Returns ``(statistic, null, p_value)``.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if bandwidth is None:
        bandwidth = median_heuristic_bandwidth(X, Y, seed=seed)
    stat = mmd2(X, Y, bandwidth, estimator)
    Z = np.vstack([X, Y])
    rng = derive_rng(seed, "permutation")
    null = np.empty(n_permutations)
    for i in range(n_permutations):
        p = rng.permutation(len(Z))
        null[i] = mmd2(Z[p[:len(X)]], Z[p[len(X):]], bandwidth, estimator)
    p_value = (1 + np.sum(null >= stat)) / (1 + n_permutations)
    return stat, null, float(p_value)


# ---------------------------------------------------------------- matrices


def parse_conditioning(cond: Union[str, int, None]):
    """``"marginal"``/``None`` -> ``None``; ``c`` or ``"class:c"`` -> class index ``c``."""
    if cond is None or cond == "marginal":
        return None
    if isinstance(cond, (int, np.integer)) and not isinstance(cond, bool):
        return int(cond)
    if isinstance(cond, str) and cond.startswith("class:"):
        return int(cond.split(":", 1)[1])
    raise ValueError(f"unknown conditioning {cond!r}")


def conditioning_name(cls_index: Optional[int]) -> str:
    return "marginal" if cls_index is None else f"class{cls_index}"


@dataclass
class MmdMatrix:
    values: np.ndarray
    bandwidth: float
    estimator: str
    conditioning: Optional[int]
    names: tuple = ()

    @property
    def conditioning_label(self) -> str:
        return conditioning_name(self.conditioning)

    def sidecar(self) -> dict:
        return {
            "bandwidth": self.bandwidth,
            "estimator": self.estimator,
            "conditioning": "marginal" if self.conditioning is None else f"class:{self.conditioning}",
            "scale": "1e-2",
        }

    def to_csv(self) -> str:
        """Header row and column of domain names; cells in units of 1e-2."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["domain", *self.names])
        for name, row in zip(self.names, self.values):
            w.writerow([name, *(repr(float(v * DISPLAY_SCALE)) for v in row)])
        return buf.getvalue()

    def write(self, csv_path, json_path) -> None:
        with open(csv_path, "w", newline="") as fh:
            fh.write(self.to_csv())
        with open(json_path, "w") as fh:
            fh.write(json.dumps(self.sidecar(), indent=2, sort_keys=True) + "\n")


def read_mmd_csv(text: str):
    """Inverse of ``MmdMatrix.to_csv``: ``(names, values)`` with display scaling undone."""
    rows = list(csv.reader(io.StringIO(text)))
    names = tuple(rows[0][1:])
    values = np.array([[float(v) / DISPLAY_SCALE for v in r[1:]] for r in rows[1:]], dtype=np.float64)
    return names, values


def read_mmd(csv_path, json_path) -> MmdMatrix:
    with open(csv_path) as fh:
        names, values = read_mmd_csv(fh.read())
    with open(json_path) as fh:
        meta = json.load(fh)
    return MmdMatrix(values, meta["bandwidth"], meta["estimator"], parse_conditioning(meta["conditioning"]), names)


def domain_samples(stream: DomainStream, cls_index: Optional[int] = None,
                   max_samples: Optional[int] = DEFAULT_CAP, seed: int = 0) -> list:
    """Pooled train+val+test features per domain, optionally restricted to one class.

    Reads gold labels directly, so it belongs to offline analysis only.
    """
    out = []
    for dom in stream.domains:
        pool = dom.pooled()
        X = pool.X
        if cls_index is not None:
            if np.any(pool.y < 0):
                raise MissingLabels(f"domain {dom.name!r} has unlabeled instances; "
                                    "class-conditional MMD needs gold labels everywhere")
            X = X[pool.y == cls_index]
        rng = derive_rng(seed, "mmd-subsample", dom.index, conditioning_name(cls_index))
        out.append(_subsample(X, max_samples, rng))
    return out


def mmd_matrix(stream: DomainStream, conditioning=None, estimator: str = "biased", seed: int = 0,
               max_samples: Optional[int] = DEFAULT_CAP, bandwidth: Optional[float] = None,
               n_jobs: int = 1) -> MmdMatrix:
    """(T+1)x(T+1) squared-MMD matrix with one bandwidth shared by every cell.

    Cells whose class-conditional sample has fewer than two points are NaN.
    """
    c = parse_conditioning(conditioning)
    samples = domain_samples(stream, c, max_samples, seed)
    if bandwidth is None:
        usable = [s for s in samples if len(s)]
        if not usable:
            raise TooFewSamples(f"no instances for conditioning {conditioning_name(c)!r}")
        bandwidth = median_heuristic_bandwidth(np.vstack(usable), seed=seed)
    n = len(samples)
    values = np.zeros((n, n))
    pairs = [(i, j) for i in range(n) for j in range(i, n)]

    def cell(ij):
        i, j = ij
        if len(samples[i]) < 2 or len(samples[j]) < 2:
            return np.nan
        if i == j and estimator == "biased":
            return 0.0
        return mmd2(samples[i], samples[j], bandwidth, estimator)

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            results = list(pool.map(cell, pairs))
    else:
        results = [cell(p) for p in pairs]
    for (i, j), v in zip(pairs, results):
        values[i, j] = values[j, i] = v
    names = tuple(d.name for d in stream.domains)
    return MmdMatrix(values, float(bandwidth), estimator, c, names)


def mmd_to_source(matrix: MmdMatrix) -> np.ndarray:
    """Row 0 without its diagonal entry: MMD(D_0, D_t) for t = 1..T."""
    return matrix.values[0, 1:].copy()
