"""Stream construction: synthetic shift generators, record ingestion, chronological
partitioning and 5:1:4 splitting."""
from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import NO_LABEL, Domain, DomainStream, Split, derive_rng
from .exceptions import (
    DimensionMismatch,
    EmptySource,
    InvalidProfile,
    NoTargets,
    ParseError,
    TooSmall,
    UnknownLabel,
)

log = logging.getLogger(__name__)

SHIFT_KINDS = ("GradualRotation", "AbruptSwitch", "LabelDrift")
BASE_MONTH = (2000, 1)


# ---------------------------------------------------------------- profiles


def linear_priors(start, end, T: int) -> np.ndarray:
    """Class priors moving linearly from ``start`` (domain 0) to ``end`` (domain T)."""
    start = np.asarray(start, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)
    w = np.linspace(0.0, 1.0, T + 1)[:, None]
    return (1 - w) * start + w * end


@dataclass
class ShiftProfile:
    kind: str
    T: int
    num_classes: int = 2
    dim: int = 2
    n_per_domain: object = 400
    noise_sigma: float = 0.35
    rotation_step: float = 0.0
    switch_point: Optional[int] = None
    displacement: float = 0.0
    priors: Optional[np.ndarray] = None
    radius: float = 1.0

    def __post_init__(self):
        if self.priors is None:
            self.priors = np.full((self.T + 1, self.num_classes), 1.0 / self.num_classes)
        self.priors = np.asarray(self.priors, dtype=np.float64)
        self.validate()

    @property
    def domain_sizes(self) -> list:
        n = self.n_per_domain
        if isinstance(n, (list, tuple, np.ndarray)):
            return [int(v) for v in n]
        return [int(n)] * (self.T + 1)

    def validate(self) -> None:
        if self.kind not in SHIFT_KINDS:
            raise InvalidProfile(f"unknown shift kind {self.kind!r}")
        if self.T < 1:
            raise InvalidProfile("T must be at least 1")
        if self.num_classes < 2:
            raise InvalidProfile("need at least two classes")
        if self.dim < 2:
            raise InvalidProfile("synthetic streams need dim >= 2")
        if self.noise_sigma <= 0:
            raise InvalidProfile("noise_sigma must be positive")
        sizes = self.domain_sizes
        if len(sizes) != self.T + 1:
            raise InvalidProfile("n_per_domain must give one count per domain")
        if min(sizes) < 10:
            raise InvalidProfile("every domain needs at least 10 instances")
        if self.priors.shape != (self.T + 1, self.num_classes):
            raise InvalidProfile(f"priors must have shape {(self.T + 1, self.num_classes)}")
        if np.any(self.priors < 0) or np.any(np.abs(self.priors.sum(axis=1) - 1.0) > 1e-9):
            raise InvalidProfile("each prior vector must lie on the simplex")
        if self.kind == "GradualRotation" and abs(self.rotation_step) * self.T >= math.pi / 2:
            raise InvalidProfile("total rotation must stay below pi/2")
        if self.kind == "AbruptSwitch":
            if self.switch_point is None or not 1 <= self.switch_point <= self.T + 1:
                raise InvalidProfile("switch_point must lie in [1, T+1]")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "T": self.T,
            "num_classes": self.num_classes,
            "dim": self.dim,
            "n_per_domain": self.n_per_domain if isinstance(self.n_per_domain, int) else list(self.n_per_domain),
            "noise_sigma": self.noise_sigma,
            "rotation_step": self.rotation_step,
            "switch_point": self.switch_point,
            "displacement": self.displacement,
            "priors": self.priors.tolist(),
            "radius": self.radius,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShiftProfile":
        d = dict(d)
        known = {"kind", "T", "num_classes", "dim", "n_per_domain", "noise_sigma", "rotation_step",
                 "switch_point", "displacement", "priors", "radius", "seed"}
        unknown = set(d) - known
        if unknown:
            raise InvalidProfile(f"unknown profile fields: {', '.join(sorted(unknown))}")
        d.pop("seed", None)
        if "kind" not in d or "T" not in d:
            raise InvalidProfile("profile needs 'kind' and 'T'")
        priors = d.get("priors")
        if isinstance(priors, dict):
            try:
                d["priors"] = linear_priors(priors["start"], priors["end"], int(d["T"]))
            except KeyError as e:
                raise InvalidProfile(f"linear prior drift needs {e}") from None
        try:
            return cls(**d)
        except (TypeError, ValueError) as e:
            if isinstance(e, InvalidProfile):
                raise
            raise InvalidProfile(str(e)) from None


# ---------------------------------------------------------------- generators


def _class_means(profile: ShiftProfile) -> np.ndarray:
    """Class means evenly spaced on a circle in the first coordinate plane."""
    angles = 2 * math.pi * np.arange(profile.num_classes) / profile.num_classes
    mu = np.zeros((profile.num_classes, profile.dim))
    mu[:, 0] = profile.radius * np.cos(angles)
    mu[:, 1] = profile.radius * np.sin(angles)
    return mu


def _rotate(mu: np.ndarray, theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    out = mu.copy()
    out[:, 0] = c * mu[:, 0] - s * mu[:, 1]
    out[:, 1] = s * mu[:, 0] + c * mu[:, 1]
    return out


def month_label(offset: int, base=BASE_MONTH) -> str:
    y, m = base
    k = y * 12 + (m - 1) + offset
    return f"{k // 12:04d}-{k % 12 + 1:02d}"


def _sample_stream(profile: ShiftProfile, means_per_domain, seed: int, stratify: bool = True) -> DomainStream:
    rng = derive_rng(seed, "gaussian-stream")
    domains = []
    counter = 0
    M = profile.num_classes
    for t, n in enumerate(profile.domain_sizes):
        y = rng.choice(M, size=n, p=profile.priors[t])
        X = means_per_domain[t][y] + profile.noise_sigma * rng.standard_normal((n, profile.dim))
        order = np.arange(counter, counter + n)
        counter += n
        ids = tuple(f"g{o:07d}" for o in order)
        name = month_label(t)
        pooled = Split(ids, X, y, order)
        domains.append(split_5_1_4(pooled, seed=seed, index=t, name=name, stratify=stratify))
    class_names = tuple(f"c{c:02d}" for c in range(M))
    return DomainStream(domains, M, profile.dim, class_names)


def gen_rotating_gaussians(profile: ShiftProfile, seed: int, stratify: bool = True) -> DomainStream:
    """Gaussian classes whose means rotate by ``rotation_step`` radians per domain."""
    if profile.kind not in ("GradualRotation", "LabelDrift"):
        raise InvalidProfile(f"gen_rotating_gaussians cannot generate {profile.kind}")
    mu = _class_means(profile)
    step = profile.rotation_step if profile.kind == "GradualRotation" else 0.0
    means = [_rotate(mu, t * step) for t in range(profile.T + 1)]
    return _sample_stream(profile, means, seed, stratify)


def gen_abrupt_switch(profile: ShiftProfile, seed: int, stratify: bool = True) -> DomainStream:
    """Configuration A before ``switch_point``, A displaced by ``displacement`` afterwards.

    The displacement is applied along the second in-plane axis, orthogonal to
    the first class mean.
    """
    if profile.kind != "AbruptSwitch":
        raise InvalidProfile(f"gen_abrupt_switch cannot generate {profile.kind}")
    mu = _class_means(profile)
    shifted = mu.copy()
    shifted[:, 1] += profile.displacement
    means = [mu if t < profile.switch_point else shifted for t in range(profile.T + 1)]
    return _sample_stream(profile, means, seed, stratify)


def generate(profile: ShiftProfile, seed: int, stratify: bool = True) -> DomainStream:
    if profile.kind == "AbruptSwitch":
        return gen_abrupt_switch(profile, seed, stratify)
    return gen_rotating_gaussians(profile, seed, stratify)


# ---------------------------------------------------------------- splitting


def split_sizes(n: int) -> tuple:
    """(train, val, test) sizes in the 5:1:4 ratio: floor for val, train >= test."""
    if n < 10:
        raise TooSmall(f"a domain needs at least 10 instances to split, got {n}")
    n_val = n // 10
    rest = n - n_val
    n_train = math.ceil(rest * 5 / 9)
    return n_train, n_val, rest - n_train


def _apportion(weights, total: int, lo, hi) -> np.ndarray:
    """Integer allocation of ``total`` proportional to ``weights`` within [lo, hi]."""
    weights = np.asarray(weights, dtype=np.float64)
    lo = np.asarray(lo, dtype=np.int64)
    hi = np.asarray(hi, dtype=np.int64)
    if lo.sum() > total or hi.sum() < total:
        raise TooSmall("cannot honour the per-class split constraints")
    quota = weights / weights.sum() * total if weights.sum() > 0 else np.zeros_like(weights)
    alloc = np.clip(np.floor(quota).astype(np.int64), lo, hi)
    while alloc.sum() < total:
        k = int(np.argmax(np.where(alloc < hi, quota - alloc, -np.inf)))
        alloc[k] += 1
    while alloc.sum() > total:
        k = int(np.argmax(np.where(alloc > lo, alloc - quota, -np.inf)))
        alloc[k] -= 1
    return alloc


def split_5_1_4(domain, seed: int, index: int = 0, name: str = "", stratify: bool = True) -> Domain:
    """Random 5:1:4 train/val/test partition of a domain.

    ``domain`` is either a ``Domain`` (its splits are pooled first) or a single
    ``Split``. When every instance has a gold label and ``stratify`` is set,
    classes are allocated proportionally and any class with two or more
    instances lands in both train and test.
    """
    if isinstance(domain, Domain):
        index, name = domain.index, domain.name
        pooled = domain.pooled()
    else:
        pooled = domain
    n = len(pooled)
    n_train, n_val, n_test = split_sizes(n)
    rng = derive_rng(seed, "split", index)
    # canonical order first so the result does not depend on how the pool was assembled
    pooled = pooled.take(np.argsort(pooled.order, kind="stable"))
    if stratify and pooled.labeled:
        classes, inverse = np.unique(pooled.y, return_inverse=True)
        members = [rng.permutation(np.flatnonzero(inverse == k)) for k in range(len(classes))]
        sizes = np.array([len(m) for m in members])
        two_plus = (sizes >= 2).astype(np.int64)
        tr = _apportion(sizes, n_train, two_plus, sizes - two_plus)
        rest = sizes - tr
        te = _apportion(rest, n_test, np.minimum(two_plus, rest), rest)
        idx_train, idx_val, idx_test = [], [], []
        for m, a, b in zip(members, tr, te):
            idx_train.extend(m[:a])
            idx_test.extend(m[a:a + b])
            idx_val.extend(m[a + b:])
    else:
        perm = rng.permutation(n)
        idx_train, idx_val, idx_test = perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]
    parts = [pooled.take(np.sort(np.asarray(ix, dtype=np.int64))) for ix in (idx_train, idx_val, idx_test)]
    return Domain(index, name, *parts)


def label_distribution(domain, num_classes: int):
    """Per-class counts and proportions of the gold labels in a domain (or split)."""
    y = domain.pooled().y if isinstance(domain, Domain) else np.asarray(domain.y if hasattr(domain, "y") else domain)
    if np.any(y == NO_LABEL):
        raise ValueError("label_distribution needs gold labels")
    counts = np.bincount(y, minlength=num_classes)
    total = counts.sum()
    props = counts / total if total else np.zeros(num_classes)
    return counts, props


# ---------------------------------------------------------------- records


@dataclass
class RawRecord:
    id: str
    timestamp: str
    features: list
    label: Optional[str] = None
    split: Optional[str] = None


def _parse_date(s: str, line: int = 0) -> dt.date:
    try:
        return dt.date.fromisoformat(s[:10])
    except (TypeError, ValueError):
        raise ParseError(line, f"bad timestamp {s!r}") from None


def _check_dim(dim, features, line):
    if dim is not None and len(features) != dim:
        raise DimensionMismatch(line, f"expected {dim} features, got {len(features)}")
    return len(features)


def _load_ndjson(path: Path) -> list:
    records, dim = [], None
    with path.open() as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(line_no, f"invalid JSON ({e.msg})") from None
            if not isinstance(obj, dict):
                raise ParseError(line_no, "expected a JSON object")
            for key in ("id", "timestamp", "features"):
                if key not in obj:
                    raise ParseError(line_no, f"missing field {key!r}")
            feats = obj["features"]
            if not isinstance(feats, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in feats):
                raise ParseError(line_no, "features must be a list of numbers")
            dim = _check_dim(dim, feats, line_no)
            _parse_date(obj["timestamp"], line_no)
            split = obj.get("split")
            if split not in (None, "train", "val", "test"):
                raise ParseError(line_no, f"unknown split {split!r}")
            label = obj.get("label")
            records.append(RawRecord(str(obj["id"]), obj["timestamp"], [float(v) for v in feats],
                                     None if label is None else str(label), split))
    return records


def _load_csv(path: Path) -> list:
    records, dim = [], None
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        fixed = ["id", "timestamp", "label", "split"]
        if header[:4] != fixed:
            raise ParseError(1, f"header must start with {','.join(fixed)}")
        feat_cols = header[4:]
        for j, col in enumerate(feat_cols):
            if col != f"f{j}":
                raise ParseError(1, f"unexpected column {col!r}")
        dim = len(feat_cols)
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 4:
                raise ParseError(line_no, "row is missing fields")
            _check_dim(dim, row[4:], line_no)
            try:
                feats = [float(v) for v in row[4:]]
            except ValueError:
                raise ParseError(line_no, "non-numeric feature") from None
            _parse_date(row[1], line_no)
            split = row[3] or None
            if split not in (None, "train", "val", "test"):
                raise ParseError(line_no, f"unknown split {split!r}")
            records.append(RawRecord(row[0], row[1], feats, row[2] or None, split))
    return records


def load_records(path) -> list:
    """Read NDJSON (``.ndjson``/``.jsonl``) or CSV records in file order."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return _load_csv(path)
    return _load_ndjson(path)


def write_records(records: Sequence[RawRecord], path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for r in records:
            obj = {"id": r.id, "timestamp": r.timestamp, "features": list(r.features), "label": r.label}
            if r.split is not None:
                obj["split"] = r.split
            fh.write(json.dumps(obj) + "\n")


def stream_to_records(stream: DomainStream) -> list:
    """Flatten a stream into records; domain t is stamped with month ``2000-01 + t``."""
    out = []
    for dom in stream.domains:
        ts = month_label(dom.index) + "-01"
        rows = []
        for split_name in ("train", "val", "test"):
            for inst in dom.split(split_name).instances():
                label = None if inst.gold_label is None else stream.class_names[inst.gold_label]
                rows.append((inst.arrival_order, RawRecord(inst.id, ts, inst.features.tolist(), label, split_name)))
        out.extend(r for _, r in sorted(rows, key=lambda p: p[0]))
    return out


# ---------------------------------------------------------------- partitioning


def _month_index(d: dt.date) -> int:
    return d.year * 12 + d.month - 1


def _parse_month(s) -> int:
    if isinstance(s, dt.date):
        return _month_index(s)
    s = str(s)
    try:
        y, m = int(s[:4]), int(s[5:7])
    except ValueError:
        raise ValueError(f"bad month {s!r}; expected YYYY-MM") from None
    return y * 12 + m - 1


def _month_name(k: int) -> str:
    return f"{k // 12:04d}-{k % 12 + 1:02d}"


def _window_name(first: int, last: int) -> str:
    return _month_name(first) if first == last else f"{_month_name(first)} to {_month_name(last)}"


@dataclass
class Bucket:
    name: str
    first_month: int
    last_month: int
    records: list = field(default_factory=list)


def partition_chronological(records, source_window, target_window_len: int = 1,
                            min_domain_size: int = 30) -> list:
    """Group records into a source bucket and consecutive monthly target windows.

    ``source_window`` is an inclusive ``(first_month, last_month)`` pair of
    ``YYYY-MM`` strings. Records before the source window are dropped. Target
    windows smaller than ``min_domain_size`` are merged into the next window;
    an undersized final window is merged into the one before it.
    """
    if target_window_len < 1:
        raise ValueError("target_window_len must be >= 1")
    src_lo, src_hi = (_parse_month(m) for m in source_window)
    dated = []
    for r in records:
        k = _month_index(_parse_date(r.timestamp))
        if k >= src_lo:
            dated.append((k, r))
    dropped = len(records) - len(dated)
    if dropped:
        log.info("dropped %d records before the source window", dropped)
    source = Bucket(_window_name(src_lo, src_hi), src_lo, src_hi, [r for k, r in dated if k <= src_hi])
    if not source.records:
        raise EmptySource("no records fall inside the source window")
    later = [(k, r) for k, r in dated if k > src_hi]
    if not later:
        raise NoTargets("no records after the source window")
    last_month = max(k for k, _ in later)
    windows = []
    start = src_hi + 1
    while start <= last_month:
        end = start + target_window_len - 1
        windows.append(Bucket("", start, end, [r for k, r in later if start <= k <= end]))
        start = end + 1
    while windows and not windows[-1].records:
        windows.pop()

    merged, pending = [], None
    for w in windows:
        if pending is not None:
            w = Bucket("", pending.first_month, w.last_month, pending.records + w.records)
            pending = None
        if len(w.records) < min_domain_size:
            pending = w
        else:
            merged.append(w)
    if pending is not None:
        if merged:
            prev = merged.pop()
            merged.append(Bucket("", prev.first_month, pending.last_month, prev.records + pending.records))
        else:
            merged.append(pending)
    if not merged:
        raise NoTargets("no target windows")
    for w in merged:
        last_seen = max(_month_index(_parse_date(r.timestamp)) for r in w.records)
        w.last_month = min(w.last_month, max(last_seen, w.first_month))
        w.name = _window_name(w.first_month, w.last_month)
    return [source] + merged


def stream_from_records(records, source_window, target_window_len: int = 1, min_domain_size: int = 30,
                        class_names=None, seed: int = 0, stratify: bool = True) -> DomainStream:
    """Partition records chronologically and build a stream.

    Records carrying a ``split`` field keep it; otherwise each domain is split
    5:1:4 with ``seed``. Within a domain, arrival order follows
    ``(timestamp, id)`` so the result does not depend on file order.
    """
    if not records:
        raise EmptySource("no records")
    dims = {len(r.features) for r in records}
    if len(dims) != 1:
        raise DimensionMismatch(0, "records disagree on feature dimension")
    dim = dims.pop()
    buckets = partition_chronological(records, source_window, target_window_len, min_domain_size)
    labels = sorted({r.label for b in buckets for r in b.records if r.label is not None})
    if class_names is None:
        class_names = labels
    class_names = tuple(class_names)
    lookup = {c: i for i, c in enumerate(class_names)}
    for lab in labels:
        if lab not in lookup:
            raise UnknownLabel(f"label {lab!r} is not among the class names")

    domains, counter = [], 0
    for t, b in enumerate(buckets):
        recs = sorted(b.records, key=lambda r: (_parse_date(r.timestamp), r.timestamp, r.id))
        n = len(recs)
        order = np.arange(counter, counter + n)
        counter += n
        y = np.array([NO_LABEL if r.label is None else lookup[r.label] for r in recs], dtype=np.int64)
        X = np.array([r.features for r in recs], dtype=np.float64).reshape(n, dim)
        ids = tuple(r.id for r in recs)
        given = [r.split for r in recs]
        if all(s is not None for s in given):
            parts = []
            for s in ("train", "val", "test"):
                idx = [i for i, g in enumerate(given) if g == s]
                parts.append(Split(tuple(ids[i] for i in idx), X[idx], y[idx], order[idx]))
            domains.append(Domain(t, b.name, *parts))
        else:
            domains.append(split_5_1_4(Split(ids, X, y, order), seed=seed, index=t, name=b.name, stratify=stratify))
    return DomainStream(domains, len(class_names), dim, class_names)


def load_profile(path) -> ShiftProfile:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise InvalidProfile(f"profile is not valid JSON: {e.msg}") from None
    if not isinstance(d, dict):
        raise InvalidProfile("profile must be a JSON object")
    return ShiftProfile.from_dict(d)
