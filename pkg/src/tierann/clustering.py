"""Density-controlled k-means partitioning, boundary replication and
partition shuffling.

A level of the index is a :class:`PartitionTable`: partitions keyed by pid,
stored column-wise (sorted pids, offsets, member ids, member vectors) so a
search can gather a few hundred partitions with one vectorized lookup.

Large inputs are clustered in two steps: a coarse k-means splits the data
into shards of at most ``shard_size`` vectors, then each shard is clustered
locally with its share of the partition budget. Shards never talk to each
other, which keeps the cost near ``n * shard_size * density`` instead of
``n * n * density``.
"""

from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping

import numpy as np

from .core import FormatError, IndexCorruptionError, UsageError, make_id
from .dataset import rng_for

DEFAULT_MAX_ITERS = 20
DEFAULT_EPSILON = 0.1
DEFAULT_MAX_COPIES = 8
DEFAULT_SHARD_SIZE = 4096


@dataclass
class Partition:
    pid: int
    ids: np.ndarray
    vectors: np.ndarray

    def __len__(self) -> int:
        return self.ids.shape[0]


class PartitionTable(Mapping):
    """Immutable map pid -> Partition backed by flat arrays."""

    def __init__(self, pids, offsets, member_ids, member_vectors):
        self.pids = np.ascontiguousarray(pids, dtype=np.uint64)
        self.offsets = np.ascontiguousarray(offsets, dtype=np.int64)
        self.member_ids = np.ascontiguousarray(member_ids, dtype=np.uint64)
        self.member_vectors = np.ascontiguousarray(member_vectors, dtype=np.float32)
        if self.offsets.shape[0] != self.pids.shape[0] + 1:
            raise UsageError("offsets must have len(pids) + 1 entries")
        if self.pids.size > 1 and not np.all(self.pids[1:] > self.pids[:-1]):
            raise UsageError("pids must be strictly ascending")

    @classmethod
    def from_partitions(cls, parts: Iterable[Partition], dim: int) -> "PartitionTable":
        parts = sorted(parts, key=lambda p: int(p.pid))
        sizes = np.array([len(p) for p in parts], dtype=np.int64)
        offsets = np.zeros(len(parts) + 1, dtype=np.int64)
        np.cumsum(sizes, out=offsets[1:])
        if parts:
            ids = np.concatenate([p.ids for p in parts]).astype(np.uint64)
            vecs = np.concatenate([np.asarray(p.vectors, dtype=np.float32).reshape(-1, dim)
                                   for p in parts])
        else:
            ids = np.zeros(0, dtype=np.uint64)
            vecs = np.zeros((0, dim), dtype=np.float32)
        return cls([p.pid for p in parts], offsets, ids, vecs)

    @property
    def dim(self) -> int:
        return self.member_vectors.shape[1]

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    def __len__(self) -> int:
        return self.pids.shape[0]

    def __iter__(self) -> Iterator[int]:
        return (int(p) for p in self.pids)

    def __contains__(self, pid) -> bool:
        i = np.searchsorted(self.pids, np.uint64(pid))
        return bool(i < len(self.pids) and self.pids[i] == np.uint64(pid))

    def __getitem__(self, pid) -> Partition:
        rows = self.rows_for([pid])
        a, b = self.offsets[rows[0]], self.offsets[rows[0] + 1]
        return Partition(int(pid), self.member_ids[a:b], self.member_vectors[a:b])

    def rows_for(self, pids, level: int | None = None) -> np.ndarray:
        pids = np.asarray(pids, dtype=np.uint64)
        rows = np.searchsorted(self.pids, pids)
        ok = rows < len(self.pids)
        ok[ok] = self.pids[rows[ok]] == pids[ok]
        if not ok.all():
            raise IndexCorruptionError(int(pids[~ok][0]), level)
        return rows

    def member_index(self, pids, level: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Row indices into the member arrays for the given pids, plus sizes."""
        rows = self.rows_for(pids, level)
        starts = self.offsets[rows]
        sizes = self.offsets[rows + 1] - starts
        total = int(sizes.sum())
        if total == 0:
            return np.zeros(0, dtype=np.int64), sizes
        shift = np.repeat(starts - np.concatenate(([0], np.cumsum(sizes)[:-1])), sizes)
        return np.arange(total, dtype=np.int64) + shift, sizes

    def subset(self, pids) -> "PartitionTable":
        pids = np.unique(np.asarray(pids, dtype=np.uint64))
        idx, sizes = self.member_index(pids)
        offsets = np.zeros(len(pids) + 1, dtype=np.int64)
        np.cumsum(sizes, out=offsets[1:])
        return PartitionTable(pids, offsets, self.member_ids[idx], self.member_vectors[idx])

    def nbytes_on_disk(self) -> int:
        return 12 * len(self) + self.member_ids.shape[0] * (8 + 4 * self.dim)

    def equals(self, other: "PartitionTable") -> bool:
        return (np.array_equal(self.pids, other.pids)
                and np.array_equal(self.offsets, other.offsets)
                and np.array_equal(self.member_ids, other.member_ids)
                and np.array_equal(self.member_vectors, other.member_vectors))


# -- partition file format ------------------------------------------------
# per partition: u64 pid, u32 member count, then count x (u64 id, dim x f32)

def _member_dtype(dim: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("v", "<f4", (dim,))])


def dump_partitions(table: PartitionTable) -> bytes:
    out = io.BytesIO()
    rec = _member_dtype(table.dim)
    for i, pid in enumerate(table.pids):
        a, b = table.offsets[i], table.offsets[i + 1]
        out.write(int(pid).to_bytes(8, "little"))
        out.write(int(b - a).to_bytes(4, "little"))
        members = np.empty(b - a, dtype=rec)
        members["id"] = table.member_ids[a:b]
        members["v"] = table.member_vectors[a:b]
        out.write(members.tobytes())
    return out.getvalue()


def parse_partitions(raw: bytes, dim: int) -> PartitionTable:
    rec = _member_dtype(dim)
    pos = 0
    pids, sizes, chunks = [], [], []
    while pos < len(raw):
        if pos + 12 > len(raw):
            raise FormatError("truncated partition header", pos)
        pid = int.from_bytes(raw[pos:pos + 8], "little")
        count = int.from_bytes(raw[pos + 8:pos + 12], "little")
        pos += 12
        need = count * rec.itemsize
        if pos + need > len(raw):
            raise FormatError(f"truncated members of partition {pid}", pos)
        chunks.append(np.frombuffer(raw, dtype=rec, count=count, offset=pos))
        pids.append(pid)
        sizes.append(count)
        pos += need
    members = np.concatenate(chunks) if chunks else np.zeros(0, dtype=rec)
    offsets = np.zeros(len(pids) + 1, dtype=np.int64)
    np.cumsum(np.asarray(sizes, dtype=np.int64), out=offsets[1:])
    pid_arr = np.asarray(pids, dtype=np.uint64)
    if pid_arr.size < 2 or np.all(pid_arr[1:] > pid_arr[:-1]):
        return PartitionTable(pid_arr, offsets, members["id"], members["v"].reshape(-1, dim))
    parts = [Partition(pids[i], members["id"][offsets[i]:offsets[i + 1]],
                       members["v"][offsets[i]:offsets[i + 1]]) for i in range(len(pids))]
    return PartitionTable.from_partitions(merge_partitions(parts).values(), dim)


def write_partitions(path: str | os.PathLike, table: PartitionTable) -> None:
    Path(path).write_bytes(dump_partitions(table))


def read_partitions(path: str | os.PathLike, dim: int) -> PartitionTable:
    return parse_partitions(Path(path).read_bytes(), dim)


# -- k-means -----------------------------------------------------------------

def _sq_norms(x: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", x, x)


def _assign(x: np.ndarray, c: np.ndarray, x_sq: np.ndarray, block: int = 8192):
    """Nearest centroid (squared L2) per row, ties to the lowest index."""
    c_sq = _sq_norms(c)
    labels = np.empty(x.shape[0], dtype=np.int64)
    dist = np.empty(x.shape[0], dtype=np.float32)
    for s in range(0, x.shape[0], block):
        d = x[s:s + block] @ c.T
        d *= -2.0
        d += c_sq[None, :]
        lab = np.argmin(d, axis=1)
        labels[s:s + block] = lab
        dist[s:s + block] = np.maximum(d[np.arange(lab.size), lab] + x_sq[s:s + block], 0.0)
    return labels, dist


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    x_sq = _sq_norms(x)
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(n)
    closest = np.maximum(x_sq - 2.0 * (x @ x[chosen[0]]) + x_sq[chosen[0]], 0.0).astype(np.float64)
    taken = np.zeros(n, dtype=bool)
    taken[chosen[0]] = True
    for j in range(1, k):
        total = closest.sum()
        if total > 0:
            r = rng.random() * total
            pick = int(np.searchsorted(np.cumsum(closest), r, side="right"))
            pick = min(pick, n - 1)
            if taken[pick]:
                pick = int(np.argmax(closest))
        else:
            # every point coincides with a chosen center; fall back to unused points
            free = np.flatnonzero(~taken)
            pick = int(free[rng.integers(free.size)])
        chosen[j] = pick
        taken[pick] = True
        d = np.maximum(x_sq - 2.0 * (x @ x[pick]) + x_sq[pick], 0.0)
        np.minimum(closest, d, out=closest)
        closest[pick] = 0.0
    return chosen


def kmeans(vectors, k: int, seed: int = 0, max_iters: int = DEFAULT_MAX_ITERS):
    """Lloyd's k-means from k-means++ seeding.

    Stops after ``max_iters`` rounds or once no assignment changes. An empty
    cluster is re-seeded with the point farthest from its current centroid,
    so exactly ``k`` clusters always come back. Returns ``(centroids,
    assignment)``.
    """
    x = np.ascontiguousarray(vectors, dtype=np.float32)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise UsageError(f"k={k} must lie in [1, {n}]")
    rng = rng_for(seed)
    if k == n:
        return x.copy(), np.arange(n, dtype=np.int64)
    centroids = x[kmeans_plusplus(x, k, rng)].copy()
    x_sq = _sq_norms(x)
    labels = None
    for _ in range(max(1, max_iters)):
        new_labels, dist = _assign(x, centroids, x_sq)
        new_labels = _reseed_empty(new_labels, dist, k)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        centroids = _means(x, labels, k)
    return centroids, labels


def _reseed_empty(labels: np.ndarray, dist: np.ndarray, k: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=k)
    empty = np.flatnonzero(counts == 0)
    if empty.size == 0:
        return labels
    labels = labels.copy()
    dist = dist.copy()
    # farthest points first; never strip a cluster down to zero
    for c in empty:
        order = np.argsort(-dist, kind="stable")
        for p in order:
            if counts[labels[p]] > 1:
                counts[labels[p]] -= 1
                labels[p] = c
                counts[c] = 1
                dist[p] = -1.0
                break
    return labels


def _means(x: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    sums = np.zeros((k, x.shape[1]), dtype=np.float64)
    np.add.at(sums, labels, x)
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    return (sums / np.maximum(counts, 1.0)[:, None]).astype(np.float32)


# -- density partitioning ---------------------------------------------------

def partition_count(density: float, n: int) -> int:
    if not 0.0 < density <= 1.0:
        raise UsageError(f"density {density} outside (0, 1]")
    return max(1, int(math.floor(density * n + 0.5)))


@dataclass
class ClusteringResult:
    centroid_ids: np.ndarray      # (k,) uint64, parent-level ids == pids
    centroids: np.ndarray         # (k, dim) float32
    partitions: PartitionTable
    assignment: np.ndarray        # primary partition row per input vector
    input_ids: np.ndarray
    input_vectors: np.ndarray
    shard_of: np.ndarray | None = None        # leaf shard per input vector
    shard_centers: np.ndarray | None = None   # (shards, dim)
    centroid_shard: np.ndarray | None = None  # leaf shard per centroid
    replication_factor: float = 1.0

    def __len__(self) -> int:
        return self.centroid_ids.shape[0]


def _split_shards(x: np.ndarray, idx: np.ndarray, shard_size: int, seed: int,
                  out: list[np.ndarray]) -> None:
    if idx.size <= shard_size:
        out.append(idx)
        return
    groups = math.ceil(idx.size / shard_size)
    sub = x[idx]
    # coarse split from a sample keeps the cost linear in idx.size
    fit = sub if sub.shape[0] <= 64 * groups else sub[rng_for(seed).choice(sub.shape[0], 64 * groups, replace=False)]
    centers, _ = kmeans(fit, groups, seed=seed, max_iters=10)
    labels, _ = _assign(sub, centers, _sq_norms(sub))
    if np.bincount(labels, minlength=groups).max() == idx.size:
        out.append(idx)  # cannot split (duplicates); accept an oversized shard
        return
    for g in range(groups):
        part = idx[labels == g]
        if part.size:
            _split_shards(x, part, shard_size, seed * 31 + g + 1, out)


def _allocate(sizes: np.ndarray, k: int) -> np.ndarray:
    """Largest-remainder split of k clusters over shards, each in [1, size]."""
    quota = sizes * (k / sizes.sum())
    alloc = np.clip(np.floor(quota).astype(np.int64), 1, sizes)
    while alloc.sum() != k:
        if alloc.sum() < k:
            room = np.flatnonzero(alloc < sizes)
            gap = (quota - alloc)[room]
            alloc[room[np.lexsort((room, -gap))[0]]] += 1
        else:
            room = np.flatnonzero(alloc > 1)
            gap = (alloc - quota)[room]
            alloc[room[np.lexsort((room, -gap))[0]]] -= 1
    return alloc


def partition_at_density(ids, vectors, density: float, seed: int = 0, level: int = 0,
                         max_iters: int = DEFAULT_MAX_ITERS,
                         shard_size: int = DEFAULT_SHARD_SIZE) -> ClusteringResult:
    """Cluster one level into ``max(1, round(density * n))`` partitions.

    Each centroid is the mean of its members and gets a fresh id at
    ``level + 1``; that id is the partition's pid. Density 1.0 yields
    singleton partitions whose centroids are the vectors themselves.
    """
    ids = np.ascontiguousarray(ids, dtype=np.uint64)
    x = np.ascontiguousarray(vectors, dtype=np.float32)
    n = x.shape[0]
    if n == 0:
        raise UsageError("cannot partition an empty level")
    k = partition_count(density, n)
    dim = x.shape[1]
    if k == n:
        shards = [np.arange(n)]
        assignment = np.arange(n, dtype=np.int64)
        centroids = x.copy()
        shard_of = np.zeros(n, dtype=np.int64)
        centroid_shard = np.zeros(n, dtype=np.int64)
    else:
        shards = []
        _split_shards(x, np.arange(n), shard_size, seed, shards)
        alloc = _allocate(np.array([s.size for s in shards], dtype=np.int64), k)
        assignment = np.empty(n, dtype=np.int64)
        shard_of = np.empty(n, dtype=np.int64)
        centroid_shard = np.repeat(np.arange(len(shards)), alloc)
        centroids = np.empty((k, dim), dtype=np.float32)
        base = 0
        for s, (rows, ks) in enumerate(zip(shards, alloc)):
            c, lab = kmeans(x[rows], int(ks), seed=seed * 1_000_003 + s, max_iters=max_iters)
            centroids[base:base + ks] = c
            assignment[rows] = lab + base
            shard_of[rows] = s
            base += ks
    centroid_ids = np.array([make_id(level + 1, j) for j in range(k)], dtype=np.uint64)
    shard_centers = np.stack([x[s].mean(axis=0) for s in shards]).astype(np.float32)
    table = _table_from_assignment(centroid_ids, ids, x, [assignment])
    return ClusteringResult(centroid_ids, centroids, table, assignment, ids, x,
                            shard_of, shard_centers, centroid_shard, 1.0)


def _table_from_assignment(centroid_ids, ids, x, copies: list[np.ndarray]) -> PartitionTable:
    """Members of partition j: every input row i with copies[c][i] == j for some c
    (entries < 0 mean no copy). Members are ordered by id inside a partition."""
    rows = np.concatenate([np.flatnonzero(a >= 0) for a in copies])
    parts = np.concatenate([a[a >= 0] for a in copies])
    order = np.lexsort((ids[rows], parts))
    rows, parts = rows[order], parts[order]
    sizes = np.bincount(parts, minlength=len(centroid_ids))
    offsets = np.zeros(len(centroid_ids) + 1, dtype=np.int64)
    np.cumsum(sizes, out=offsets[1:])
    # centroid ids are generated ascending, so row order == pid order
    return PartitionTable(centroid_ids, offsets, ids[rows], x[rows])


def replicate_boundary(result: ClusteringResult, epsilon: float = DEFAULT_EPSILON,
                       max_copies: int = DEFAULT_MAX_COPIES,
                       neighbor_shards: int = 4) -> ClusteringResult:
    """Copy each vector into every partition whose centroid lies within
    ``(1 + epsilon)`` of its nearest centroid distance (squared L2), keeping
    at most ``max_copies`` copies, nearest first.

    Centroids are looked up in the vector's own shard and the
    ``neighbor_shards - 1`` shards whose centers lie nearest to its own shard center.
    """
    if epsilon < 0 or max_copies < 1:
        raise UsageError("epsilon must be >= 0 and max_copies >= 1")
    x, n = result.input_vectors, result.input_ids.shape[0]
    k = len(result)
    copies = np.full((n, max_copies), -1, dtype=np.int64)
    copies[:, 0] = result.assignment
    if max_copies == 1 or k == 1:
        return _with_copies(result, copies)
    c = result.centroids
    shards = int(result.shard_centers.shape[0]) if result.shard_centers is not None else 1
    if shards == 1:
        groups = [(np.arange(n), np.arange(k))]
    else:
        sc = result.shard_centers
        sd = _sq_norms(sc)[None, :] - 2.0 * sc @ sc.T + _sq_norms(sc)[:, None]
        near = np.argsort(sd, axis=1, kind="stable")[:, :neighbor_shards]
        by_shard = [np.flatnonzero(result.centroid_shard == s) for s in range(shards)]
        groups = []
        for s in range(shards):
            rows = np.flatnonzero(result.shard_of == s)
            if rows.size:
                cand = np.concatenate([by_shard[t] for t in near[s]])
                groups.append((rows, np.sort(cand)))
    top = max_copies + 4
    for rows, cand in groups:
        for b in range(0, rows.size, 4096):
            r = rows[b:b + 4096]
            _replicate_block(x[r], r, c, cand, result.assignment, epsilon, max_copies,
                             top, copies)
    return _with_copies(result, copies)


def _replicate_block(xb, rows, c, cand, primary, epsilon, max_copies, top, copies):
    cc = c[cand]
    d = _sq_norms(cc)[None, :] - 2.0 * (xb @ cc.T)
    t = min(top, cand.size)
    near = np.argpartition(d, t - 1, axis=1)[:, :t] if t < cand.size else np.broadcast_to(
        np.arange(cand.size), (xb.shape[0], cand.size))
    for j in range(xb.shape[0]):
        cj = cand[near[j]]
        diff = cc[near[j]] - xb[j]
        dj = np.einsum("ij,ij->i", diff.astype(np.float64), diff.astype(np.float64))
        order = np.lexsort((cj, dj))
        cj, dj = cj[order], dj[order]
        limit = (1.0 + epsilon) * dj[0]
        pick = cj[dj <= limit]
        own = primary[rows[j]]
        extra = pick[pick != own][: max_copies - 1]
        copies[rows[j], 1:1 + extra.size] = extra


def _with_copies(result: ClusteringResult, copies: np.ndarray) -> ClusteringResult:
    table = _table_from_assignment(result.centroid_ids, result.input_ids,
                                   result.input_vectors, list(copies.T))
    factor = float((copies >= 0).sum()) / max(1, copies.shape[0])
    return ClusteringResult(result.centroid_ids, result.centroids, table, result.assignment,
                            result.input_ids, result.input_vectors, result.shard_of,
                            result.shard_centers, result.centroid_shard, factor)


# -- shuffling ----------------------------------------------------------------

def merge_partitions(parts: Iterable[Partition]) -> dict[int, Partition]:
    """Merge partitions sharing a pid; duplicate member ids keep the first copy."""
    grouped: dict[int, list[Partition]] = {}
    for p in parts:
        grouped.setdefault(int(p.pid), []).append(p)
    merged = {}
    for pid, group in grouped.items():
        ids = np.concatenate([g.ids for g in group]).astype(np.uint64)
        vecs = np.concatenate([np.asarray(g.vectors, dtype=np.float32) for g in group])
        _, first = np.unique(ids, return_index=True)
        merged[pid] = Partition(pid, ids[first], vecs[first])
    return merged


def shuffle_partitions(partitions, node_count: int,
                       hash_fn: Callable[[int], int] | None = None) -> dict[int, list[Partition]]:
    """Merge same-pid partitions and route each to ``hash(pid) mod node_count``.

    ``partitions`` may be a mapping pid -> Partition, a PartitionTable, or an
    iterable of such mappings (one per build shard).
    """
    if node_count < 1:
        raise UsageError("node_count must be >= 1")
    from .cluster import fnv1a64

    hash_fn = hash_fn or fnv1a64
    if isinstance(partitions, Mapping):
        sources = [partitions]
    else:
        sources = list(partitions)
    merged = merge_partitions(p for src in sources for p in src.values())
    out: dict[int, list[Partition]] = {i: [] for i in range(node_count)}
    for pid in sorted(merged):
        out[hash_fn(pid) % node_count].append(merged[pid])
    return out
