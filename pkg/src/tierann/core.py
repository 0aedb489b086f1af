"""Shared types, distance metrics and accuracy metrics.

Squared L2 is used everywhere the L2 metric is active: it preserves order and
avoids square roots, so every reported "distance" is the squared value.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels

# ids carry their level in the top byte: level-0 ids are plain 0..n-1,
# a level-i centroid id is (i << 56) | j
LEVEL_SHIFT = 56
ID_MASK = (1 << LEVEL_SHIFT) - 1

CANDIDATE_BYTES = 12


class UsageError(ValueError):
    """Raised when an operation is called outside its preconditions."""


class FormatError(ValueError):
    """Malformed on-disk or on-wire data."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IndexCorruptionError(RuntimeError):
    def __init__(self, pid: int, level: int | None = None):
        where = f" at level {level}" if level is not None else ""
        super().__init__(f"partition {pid} referenced but missing{where}")
        self.pid = pid
        self.level = level


class Metric(enum.IntEnum):
    SQUARED_L2 = 0
    COSINE = 1
    NEG_INNER_PRODUCT = 2

    @classmethod
    def parse(cls, name: "str | Metric") -> "Metric":
        if isinstance(name, Metric):
            return name
        key = str(name).strip().lower().replace("-", "_")
        aliases = {
            "l2": cls.SQUARED_L2,
            "squared_l2": cls.SQUARED_L2,
            "sql2": cls.SQUARED_L2,
            "cosine": cls.COSINE,
            "cos": cls.COSINE,
            "ip": cls.NEG_INNER_PRODUCT,
            "neg_inner_product": cls.NEG_INNER_PRODUCT,
            "inner_product": cls.NEG_INNER_PRODUCT,
        }
        if key not in aliases:
            raise UsageError(f"unknown metric {name!r}")
        return aliases[key]

    @property
    def label(self) -> str:
        return {0: "l2", 1: "cosine", 2: "ip"}[int(self)]


def level_of(vid: int) -> int:
    return int(vid) >> LEVEL_SHIFT


def make_id(level: int, index: int) -> int:
    return (level << LEVEL_SHIFT) | index


@dataclass(frozen=True)
class SearchParams:
    """Per-level fetch count ``m``, result count ``k`` and root beam width.

    The same ``m`` is applied at every non-root level. ``root_beam``
    defaults to ``max(m, 64)``.
    """

    m: int = 256
    k: int = 10
    root_beam: int | None = None

    def __post_init__(self):
        if self.m < 1 or self.k < 1:
            raise UsageError("m and k must be positive")
        if self.k > self.m:
            raise UsageError(f"k={self.k} must not exceed m={self.m}")
        if self.root_beam is None:
            object.__setattr__(self, "root_beam", max(self.m, 64))
        elif self.root_beam < self.m:
            raise UsageError(f"root_beam={self.root_beam} must be >= m={self.m}")


@dataclass(frozen=True, order=True)
class Candidate:
    distance: float
    id: int

    def __iter__(self):
        yield self.id
        yield self.distance


THREADS_ENV = "TIERANN_THREADS"


def default_threads() -> int:
    """Worker threads for batch queries: ``$TIERANN_THREADS`` or 1."""
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def as_matrix(x) -> np.ndarray:
    a = np.ascontiguousarray(x, dtype=np.float32)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise UsageError(f"expected a 2-d array of vectors, got shape {a.shape}")
    return a


def distance(a, b, metric: Metric | str = Metric.SQUARED_L2) -> float:
    """Distance between two vectors; smaller is closer under every metric.

    Cosine on a zero-norm input is defined as 1 (orthogonal).
    """
    a = np.ascontiguousarray(a, dtype=np.float32).ravel()
    b = np.ascontiguousarray(b, dtype=np.float32).ravel()
    if a.shape != b.shape:
        raise UsageError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    out = _kernels.row_distances(b.reshape(1, -1), a, int(Metric.parse(metric)))
    return float(out[0])


def distances_to(rows: np.ndarray, q: np.ndarray, metric: Metric | str = Metric.SQUARED_L2) -> np.ndarray:
    """float32 distances from ``q`` to each row, computed row by row.

    The loop order is fixed, so the same (row, q) pair yields the same bits no
    matter which batch it is scanned in. Search paths that must agree exactly
    (local search, store nodes, the oracle's re-rank) all go through here.
    """
    rows = as_matrix(rows)
    q = np.ascontiguousarray(q, dtype=np.float32).ravel()
    if rows.shape[1] != q.shape[0]:
        raise UsageError(f"dimension mismatch: {rows.shape[1]} vs {q.shape[0]}")
    return _kernels.row_distances(rows, q, int(Metric.parse(metric)))


def top_candidates(ids: np.ndarray, dists: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    """De-duplicate by id keeping the minimum distance, then keep the best ``m``.

    Ties in distance break by ascending id.
    """
    ids = np.asarray(ids, dtype=np.uint64)
    dists = np.asarray(dists, dtype=np.float32)
    if ids.size == 0:
        return ids, dists
    order = np.lexsort((dists, ids))
    ids_s, d_s = ids[order], dists[order]
    first = np.ones(ids_s.size, dtype=bool)
    first[1:] = ids_s[1:] != ids_s[:-1]
    ids_u, d_u = ids_s[first], d_s[first]
    if ids_u.size > m:
        # cheap pre-cut before the full sort
        cut = np.partition(d_u, m - 1)[m - 1]
        keep = d_u <= cut
        ids_u, d_u = ids_u[keep], d_u[keep]
    order = np.lexsort((ids_u, d_u))[:m]
    return ids_u[order], d_u[order]


def recall_at_k(result: Sequence[int], truth: Sequence[int], k: int,
                truth_distances: Sequence[float] | None = None,
                result_distances: Sequence[float] | None = None) -> float:
    """Fraction of the true top-k found in the first k results.

    When distances are supplied, a result id whose true distance equals the
    k-th ground-truth distance also counts (benchmark tie convention).
    """
    if k <= 0:
        raise UsageError("k must be positive")
    if len(truth) < k:
        raise UsageError(f"ground truth has {len(truth)} entries, need {k}")
    got = [int(x) for x in list(result)[:k]]
    want = {int(x) for x in list(truth)[:k]}
    hits = sum(1 for x in set(got) if x in want)
    if truth_distances is not None and result_distances is not None:
        kth = float(truth_distances[k - 1])
        for x, d in zip(got, list(result_distances)[:k]):
            if x not in want and float(d) == kth:
                hits += 1
        hits = min(hits, k)
    return hits / k


def mean_recall(results: np.ndarray, truth: np.ndarray, k: int) -> float:
    """Vectorized mean recall@k over a batch (no tie handling)."""
    results = np.asarray(results)[:, :k]
    truth = np.asarray(truth)[:, :k]
    if len(results) != len(truth):
        raise UsageError(f"{len(results)} result rows but {len(truth)} ground-truth rows")
    hits = 0
    for r, t in zip(results, truth):
        hits += np.intersect1d(r, t).size
    return hits / (k * len(truth))
