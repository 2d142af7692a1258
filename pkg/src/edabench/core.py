"""Shared data model: instances, domains, streams, buffers and run configuration."""
from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional

import numpy as np

from .exceptions import MaskingViolation, NonMonotoneArrival, StreamError
from .metrics import macro_f1

METHODS = ("SrcOnly", "Supervised", "OBS", "OCS", "OS", "DANN")
SPLITS = ("train", "val", "test")
NO_LABEL = -1


def derive_rng(seed: int, *tags) -> np.random.Generator:
    """Generator seeded from ``seed`` plus a tuple of call-site tags.

    String tags go through crc32 so derivation is stable across interpreter runs.
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for tag in tags:
        if isinstance(tag, str):
            words.append(zlib.crc32(tag.encode("utf-8")))
        else:
            words.append(int(tag) & 0xFFFFFFFFFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(words))


def sub_seed(seed: int, *tags) -> int:
    """Integer seed for a nested stochastic step, derived like ``derive_rng``."""
    return int(derive_rng(seed, *tags).integers(0, 2**63 - 1))


def checksum(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype=np.float64).tobytes()).hexdigest()[:16]


@dataclass(frozen=True)
class Instance:
    id: str
    features: np.ndarray
    gold_label: Optional[int] = None
    pseudo_label: Optional[int] = None
    arrival_order: int = 0


@dataclass(frozen=True, eq=False)
class Split:
    """Column-oriented store for one split of a domain.

    Missing gold labels are encoded as ``NO_LABEL``.
    """

    ids: tuple
    X: np.ndarray
    y: np.ndarray
    order: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(len(self.ids), -1)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.int64))
        object.__setattr__(self, "order", np.asarray(self.order, dtype=np.int64))
        object.__setattr__(self, "ids", tuple(self.ids))
        n = len(self.ids)
        if not (X.shape[0] == len(self.y) == len(self.order) == n):
            raise StreamError("split columns have inconsistent lengths")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def labeled(self) -> bool:
        return len(self) > 0 and bool(np.all(self.y >= 0))

    def instances(self) -> Iterator[Instance]:
        for i in range(len(self)):
            y = int(self.y[i])
            yield Instance(self.ids[i], self.X[i], None if y < 0 else y, None, int(self.order[i]))

    @classmethod
    def from_instances(cls, instances, dim: int) -> "Split":
        instances = list(instances)
        X = np.array([inst.features for inst in instances], dtype=np.float64).reshape(len(instances), dim)
        y = [NO_LABEL if inst.gold_label is None else inst.gold_label for inst in instances]
        return cls(tuple(inst.id for inst in instances), X, y, [inst.arrival_order for inst in instances])

    def take(self, idx) -> "Split":
        idx = np.asarray(idx, dtype=np.int64)
        return Split(tuple(self.ids[i] for i in idx), self.X[idx], self.y[idx], self.order[idx])

    def with_labels(self, y) -> "Split":
        return Split(self.ids, self.X, y, self.order)

    def equals(self, other: "Split") -> bool:
        return (
            self.ids == other.ids
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.order, other.order)
        )


def concat_splits(splits) -> Split:
    splits = [s for s in splits if len(s)]
    if not splits:
        raise StreamError("nothing to concatenate")
    return Split(
        sum((s.ids for s in splits), ()),
        np.vstack([s.X for s in splits]),
        np.concatenate([s.y for s in splits]),
        np.concatenate([s.order for s in splits]),
    )


@dataclass(frozen=True, eq=False)
class Domain:
    index: int
    name: str
    train: Split
    val: Split
    test: Split

    def split(self, which: str) -> Split:
        if which not in SPLITS:
            raise KeyError(which)
        return getattr(self, which)

    def pooled(self) -> Split:
        return concat_splits([self.train, self.val, self.test])

    def __len__(self) -> int:
        return len(self.train) + len(self.val) + len(self.test)

    def equals(self, other: "Domain") -> bool:
        return (
            self.index == other.index
            and self.name == other.name
            and all(self.split(s).equals(other.split(s)) for s in SPLITS)
        )


@dataclass(frozen=True, eq=False)
class DomainStream:
    domains: tuple
    num_classes: int
    dim: int
    class_names: tuple

    def __post_init__(self):
        object.__setattr__(self, "domains", tuple(self.domains))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        self.validate()

    @property
    def T(self) -> int:
        return len(self.domains) - 1

    def __getitem__(self, t: int) -> Domain:
        return self.domains[t]

    def validate(self) -> None:
        if len(self.class_names) != self.num_classes:
            raise StreamError("class_names must have num_classes entries")
        if len(self.domains) < 2:
            raise StreamError("a stream needs a source and at least one target domain")
        prev_max = None
        seen = set()
        for t, dom in enumerate(self.domains):
            if dom.index != t:
                raise StreamError(f"domain at position {t} has index {dom.index}")
            orders = []
            for s in SPLITS:
                sp = dom.split(s)
                if len(sp) == 0:
                    raise StreamError(f"domain {t} has an empty {s} split")
                if sp.X.shape[1] != self.dim:
                    raise StreamError(f"domain {t} {s} has dimension {sp.X.shape[1]}, expected {self.dim}")
                if np.any(sp.y >= self.num_classes):
                    raise StreamError(f"domain {t} {s} has a label >= num_classes")
                orders.append(sp.order)
            orders = np.concatenate(orders)
            if prev_max is not None and orders.min() <= prev_max:
                raise StreamError(f"domain {t} is not chronologically after domain {t - 1}")
            prev_max = orders.max()
            seen.update(orders.tolist())
            if t == 0 and not all(dom.split(s).labeled for s in SPLITS):
                raise StreamError("every source instance needs a gold label")
        if len(seen) != sum(len(d) for d in self.domains):
            raise StreamError("arrival_order is not unique within the stream")

    def equals(self, other: "DomainStream") -> bool:
        return (
            self.num_classes == other.num_classes
            and self.dim == other.dim
            and self.class_names == other.class_names
            and len(self.domains) == len(other.domains)
            and all(a.equals(b) for a, b in zip(self.domains, other.domains))
        )


@dataclass(frozen=True, eq=False)
class UnlabeledSplit:
    """Features and arrival orders of a split whose gold labels are hidden."""

    X: np.ndarray
    order: np.ndarray

    def __len__(self) -> int:
        return len(self.order)


class MaskedStream:
    """Method-facing view of a stream.

    Source splits are fully labeled. Target train/val splits and every test split
    expose features only; test labels are reachable through ``TestEvaluator``.
    ``privileged()`` returns the raw stream and is reserved for the Supervised
    baseline and offline analysis; it raises unless the view was built with
    ``allow_privileged=True``.
    """

    def __init__(self, stream: DomainStream, allow_privileged: bool = False):
        self._stream = stream
        self._allow_privileged = allow_privileged

    @property
    def T(self) -> int:
        return self._stream.T

    @property
    def num_classes(self) -> int:
        return self._stream.num_classes

    @property
    def dim(self) -> int:
        return self._stream.dim

    @property
    def class_names(self) -> tuple:
        return self._stream.class_names

    def domain_name(self, t: int) -> str:
        return self._stream[t].name

    def source(self, which: str) -> Split:
        if which == "test":
            raise MaskingViolation("test labels are only reachable through the evaluator")
        return self._stream[0].split(which)

    def target(self, t: int, which: str) -> UnlabeledSplit:
        if not 1 <= t <= self.T:
            raise IndexError(t)
        sp = self._stream[t].split(which)
        return UnlabeledSplit(sp.X, sp.order)

    def test_features(self, t: int) -> np.ndarray:
        return self._stream[t].test.X

    def privileged(self) -> DomainStream:
        if not self._allow_privileged:
            raise MaskingViolation("this view does not grant access to target gold labels")
        return self._stream


def mask_target_labels(stream: DomainStream, allow_privileged: bool = False) -> MaskedStream:
    return MaskedStream(stream, allow_privileged=allow_privileged)


class TestEvaluator:
    """Scores test-set predictions without handing out the labels."""

    __test__ = False

    def __init__(self, stream: DomainStream):
        self._stream = stream

    def score(self, t: int, preds) -> float:
        return macro_f1(preds, self._stream[t].test.y, self._stream.num_classes)


def replace_target_labels(stream: DomainStream, labels_for) -> DomainStream:
    """Copy of ``stream`` with target train/val gold labels replaced.

    ``labels_for(t, split_name, split)`` returns the new label vector. Used to
    poison labels in masking audits.
    """
    domains = [stream[0]]
    for dom in stream.domains[1:]:
        domains.append(
            replace(
                dom,
                train=dom.train.with_labels(labels_for(dom.index, "train", dom.train)),
                val=dom.val.with_labels(labels_for(dom.index, "val", dom.val)),
            )
        )
    return DomainStream(domains, stream.num_classes, stream.dim, stream.class_names)


# ---------------------------------------------------------------- buffer


@dataclass(frozen=True, eq=False)
class Buffer:
    """Ordered training store. ``capacity=None`` means unbounded (cumulative)."""

    X: np.ndarray
    y: np.ndarray
    order: np.ndarray
    capacity: Optional[int] = None

    def __post_init__(self):
        if self.capacity is not None and self.capacity < 1:
            raise ValueError("buffer capacity must be positive")

    @classmethod
    def empty(cls, dim: int, capacity: Optional[int] = None) -> "Buffer":
        return cls(np.empty((0, dim)), np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64), capacity)

    def __len__(self) -> int:
        return len(self.order)

    def insert(self, X, y, order) -> "Buffer":
        order = np.asarray(order, dtype=np.int64)
        if len(order) == 0:
            return self
        X = np.asarray(X, dtype=np.float64).reshape(len(order), -1)
        y = np.asarray(y, dtype=np.int64)
        perm = np.argsort(order, kind="stable")
        X, y, order = X[perm], y[perm], order[perm]
        if np.any(np.diff(order) <= 0):
            raise NonMonotoneArrival("inserted items repeat an arrival_order")
        if len(self) and order[0] <= self.order[-1]:
            raise NonMonotoneArrival(
                f"arrival_order {order[0]} is not after the newest buffered entry {self.order[-1]}"
            )
        X = np.vstack([self.X, X]) if len(self) else X
        y = np.concatenate([self.y, y])
        order = np.concatenate([self.order, order])
        if self.capacity is not None and len(order) > self.capacity:
            # FIFO: keep the most recent `capacity` entries
            X, y, order = X[-self.capacity:], y[-self.capacity:], order[-self.capacity:]
        return Buffer(X, y, order, self.capacity)


def buffer_insert(buf: Buffer, X, y, order) -> Buffer:
    return buf.insert(X, y, order)


# ---------------------------------------------------------------- run config


@dataclass
class RunConfig:
    """Everything a single method run depends on.

    ``model``, ``train`` and ``dann`` hold an ``ArchSpec``-like dict, a
    ``TrainHyper`` and a ``DannSpec``; they are typed loosely here so the core
    module does not import the learners.
    """

    method: str
    seed: int = 0
    model: Optional[object] = None
    train: Optional[object] = None
    upsample: bool = True
    dann: Optional[object] = None
    name: Optional[str] = None
    buffer_size: Optional[int] = None
    warm_start: bool = True
    val_source: str = "latest"
    pseudo_threshold: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}")
        if self.val_source not in ("latest", "buffer_sample"):
            raise ValueError(f"unknown val_source {self.val_source!r}")
        if self.seed < 0 or self.seed >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def label(self) -> str:
        return self.name or self.method
