"""Single-layer proximity graph used as the in-memory root index, and the
sharded-traversal probe that counts cross-node steps.

Graph file layout (all little-endian)::

    header     u32 dim | u64 n | u32 R | u64 entry | u32 metric
    nodes      n x (u64 id, dim x f32)
    adjacency  n x R x i64 neighbour slots (-1 = empty)

Neighbour slots hold node positions, not ids; nodes are stored in ascending
id order so positions and ids sort the same way.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order

from . import _kernels
from .core import FormatError, Metric, UsageError, as_matrix, mean_recall
from .dataset import rng_for

DEFAULT_R = 32
DEFAULT_BUILD_BEAM = 128

_HEADER = np.dtype([("dim", "<u4"), ("n", "<u8"), ("R", "<u4"), ("entry", "<u8"), ("metric", "<u4")])


@dataclass
class TraversalStats:
    distance_computations: int = 0
    expansions: int = 0
    cross_node_steps: int = 0


class ProximityGraph:
    def __init__(self, ids, vectors, adjacency, degrees, entry: int, metric=Metric.SQUARED_L2):
        self.ids = np.ascontiguousarray(ids, dtype=np.uint64)
        self.vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        self.adjacency = np.ascontiguousarray(adjacency, dtype=np.int64)
        self.degrees = np.ascontiguousarray(degrees, dtype=np.int64)
        self.entry = int(entry)
        self.metric = Metric.parse(metric)
        self._local = threading.local()

    @property
    def R(self) -> int:
        return self.adjacency.shape[1]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.ids.shape[0]

    def neighbors(self, pos: int) -> np.ndarray:
        return self.adjacency[pos, : self.degrees[pos]]

    def _visited(self):
        st = self._local
        if getattr(st, "visited", None) is None or st.visited.shape[0] != len(self):
            st.visited = np.zeros(len(self), dtype=np.int64)
            st.stamp = 0
        st.stamp += 1
        return st.visited, st.stamp

    def reachable(self) -> np.ndarray:
        n = len(self)
        rows = np.repeat(np.arange(n), self.degrees)
        cols = self.adjacency[self.adjacency >= 0]
        m = csr_matrix((np.ones(rows.size, dtype=np.int8), (rows, cols)), shape=(n, n))
        seen = np.zeros(n, dtype=bool)
        seen[breadth_first_order(m, self.entry, directed=True, return_predecessors=False)] = True
        return seen

    def search_positions(self, q, beam: int, trace: np.ndarray | None = None):
        visited, stamp = self._visited()
        if trace is None:
            trace = np.empty(0, dtype=np.int64)
        q = np.ascontiguousarray(q, dtype=np.float32).ravel()
        return _kernels.beam_search(self.vectors, self.adjacency, self.degrees, self.entry, q,
                                    beam, int(self.metric), visited, stamp, trace)

    def equals(self, other: "ProximityGraph") -> bool:
        return (self.entry == other.entry and self.metric == other.metric
                and np.array_equal(self.ids, other.ids)
                and np.array_equal(self.vectors, other.vectors)
                and np.array_equal(self.adjacency, other.adjacency)
                and np.array_equal(self.degrees, other.degrees))


def build_graph(ids, vectors, R: int = DEFAULT_R, build_beam: int = DEFAULT_BUILD_BEAM,
                seed: int = 0, metric: Metric | str = Metric.SQUARED_L2) -> ProximityGraph:
    """Incremental insertion with diversity pruning, then a reachability repair.

    Each new vertex searches the current graph with width ``build_beam`` and
    keeps up to ``R`` neighbours, skipping candidate c when an already kept
    neighbour b has dist(b, c) < dist(new, c). Reverse edges are added under
    the degree cap, re-pruning a full neighbour list. With ``n <= R + 1``
    the graph is simply complete.
    """
    ids = np.asarray(ids, dtype=np.uint64)
    x = as_matrix(vectors)
    n = x.shape[0]
    if n == 0:
        raise UsageError("cannot build a graph over zero vectors")
    if R < 2:
        raise UsageError("R must be >= 2")
    metric = Metric.parse(metric)
    order = np.argsort(ids, kind="stable")
    ids, x = ids[order], x[order]
    mean = x.astype(np.float64).mean(axis=0).astype(np.float32)
    d_mean = _kernels.row_distances(x, mean, int(metric))
    entry = int(np.lexsort((np.arange(n), d_mean))[0])
    rest = rng_for(seed).permutation(n)
    insert = np.concatenate(([entry], rest[rest != entry])).astype(np.int64)
    if n <= R + 1:
        # small enough to be complete; pruning would only remove edges here
        adj = np.full((n, R), -1, dtype=np.int64)
        for v in range(n):
            adj[v, : n - 1] = np.delete(np.arange(n), v)
        deg = np.full(n, n - 1, dtype=np.int64)
    else:
        adj, deg = _kernels.build_graph(x, insert, R, max(build_beam, 1), int(metric))
    g = ProximityGraph(ids, x, adj, deg, entry, metric)
    _repair(g, build_beam)
    return g


def _repair(g: ProximityGraph, beam: int) -> None:
    """Link every vertex unreachable from the entry to a reachable one."""
    for _ in range(len(g)):
        seen = g.reachable()
        missing = np.flatnonzero(~seen)
        if missing.size == 0:
            return
        for u in missing:
            if seen[u]:
                continue
            res, _, _, _ = g.search_positions(g.vectors[u], max(beam, 8))
            host = next((int(v) for v in res if seen[v] and v != u and g.degrees[v] < g.R), None)
            if host is None:
                host = next(int(v) for v in res if seen[v] and v != u)
                g.adjacency[host, g.R - 1] = u  # replace the farthest slot
            else:
                g.adjacency[host, g.degrees[host]] = u
                g.degrees[host] += 1
            # everything u reaches is now reachable too
            stack = [int(u)]
            seen[u] = True
            while stack:
                v = stack.pop()
                for w in g.neighbors(v):
                    if not seen[w]:
                        seen[w] = True
                        stack.append(int(w))
    raise RuntimeError("graph repair did not converge")


def graph_search(g: ProximityGraph, q, k: int, beam: int):
    """Best-first search; returns ``(ids, distances, stats)`` for the top ``k``.

    Terminates once the best unexpanded vertex is farther than the worst of
    the ``beam`` pooled results. Ties break by ascending id.
    """
    if not beam >= k >= 1:
        raise UsageError(f"need beam >= k >= 1, got beam={beam}, k={k}")
    if len(g) == 0:
        return np.zeros(0, np.uint64), np.zeros(0, np.float32), TraversalStats()
    pos, dist, ncomp, nexp = g.search_positions(q, beam)
    return g.ids[pos[:k]], dist[:k], TraversalStats(int(ncomp), int(nexp))


def batch_search(g: ProximityGraph, queries, k: int, beam: int):
    q = as_matrix(queries)
    ids = np.full((q.shape[0], k), np.iinfo(np.uint64).max, dtype=np.uint64)
    dist = np.full((q.shape[0], k), np.inf, dtype=np.float32)
    comps = np.zeros(q.shape[0], dtype=np.int64)
    for i, row in enumerate(q):
        r, d, st = graph_search(g, row, k, beam)
        ids[i, : r.size] = r
        dist[i, : d.size] = d
        comps[i] = st.distance_computations
    return ids, dist, comps


def min_beam_for_recall(g: ProximityGraph, queries, truth_ids, k: int, target: float,
                        max_beam: int | None = None) -> tuple[int, float, float]:
    """Smallest beam >= k whose mean recall@k reaches ``target``.

    Doubling then bisection; returns ``(beam, recall, mean distance
    computations)``. Raises ValueError when even ``max_beam`` falls short.
    """
    max_beam = max_beam or len(g)
    cache: dict[int, tuple[float, float]] = {}

    def evaluate(b):
        if b not in cache:
            ids, _, comps = batch_search(g, queries, k, b)
            cache[b] = (mean_recall(ids, truth_ids, k), float(comps.mean()))
        return cache[b][0]

    lo, hi = k - 1, k
    while evaluate(hi) < target:
        if hi >= max_beam:
            raise ValueError(f"recall target {target} unreachable (best {cache[hi][0]:.4f} at beam {hi})")
        lo, hi = hi, min(2 * hi, max_beam)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if evaluate(mid) >= target:
            hi = mid
        else:
            lo = mid
    return hi, cache[hi][0], cache[hi][1]


# -- sharded traversal probe -------------------------------------------------

@dataclass
class ShardProbeResult:
    per_query: list[TraversalStats]
    shard_of: np.ndarray
    avg_total_steps: float = 0.0
    avg_cross_node_steps: float = 0.0
    p99_cross_node_steps: float = 0.0
    cross_node_fraction: float = 0.0
    recall: float | None = None
    beam: int | None = None


def cross_node_steps(expanded: np.ndarray, shard_of: np.ndarray) -> int:
    """Transitions between consecutive expansions that change shard.

    The entry hop is not counted: step t compares expansion t with t-1.
    """
    if expanded.size < 2:
        return 0
    s = shard_of[expanded]
    return int(np.count_nonzero(s[1:] != s[:-1]))


def shard_and_measure(g: ProximityGraph, shards: int, queries, k: int, beam: int,
                      seed: int = 0, shard_of: np.ndarray | None = None) -> ShardProbeResult:
    """Label vertices with spatial shards (k-means, ``shards`` cells) and count
    cross-node steps of each query's traversal."""
    from .clustering import kmeans

    if shards < 2:
        raise UsageError("shards must be >= 2")
    if shard_of is None:
        _, shard_of = kmeans(g.vectors, min(shards, len(g)), seed=seed)
    q = as_matrix(queries)
    trace = np.empty(len(g), dtype=np.int64)
    stats = []
    for row in q:
        _, _, ncomp, nexp = g.search_positions(row, beam, trace)
        used = trace[: min(nexp, trace.size)]
        stats.append(TraversalStats(int(ncomp), int(nexp), cross_node_steps(used, shard_of)))
    total = np.array([s.expansions for s in stats], dtype=np.float64)
    cross = np.array([s.cross_node_steps for s in stats], dtype=np.float64)
    res = ShardProbeResult(stats, shard_of, beam=beam)
    if stats:
        res.avg_total_steps = float(total.mean())
        res.avg_cross_node_steps = float(cross.mean())
        res.p99_cross_node_steps = float(np.percentile(cross, 99))
        res.cross_node_fraction = float(cross.sum() / max(total.sum(), 1.0))
    return res


# -- file format -----------------------------------------------------------------

def dump_graph(g: ProximityGraph) -> bytes:
    head = np.zeros(1, dtype=_HEADER)
    head[0] = (g.dim, len(g), g.R, g.entry, int(g.metric))
    nodes = np.empty(len(g), dtype=np.dtype([("id", "<u8"), ("v", "<f4", (g.dim,))]))
    nodes["id"] = g.ids
    nodes["v"] = g.vectors
    adj = np.full((len(g), g.R), -1, dtype="<i8")
    for_slots = np.arange(g.R)[None, :] < g.degrees[:, None]
    adj[for_slots] = g.adjacency[for_slots]
    return head.tobytes() + nodes.tobytes() + adj.tobytes()


def parse_graph(raw: bytes) -> ProximityGraph:
    if len(raw) < _HEADER.itemsize:
        raise FormatError("truncated graph header", 0)
    head = np.frombuffer(raw, dtype=_HEADER, count=1)[0]
    dim, n, R = int(head["dim"]), int(head["n"]), int(head["R"])
    node_t = np.dtype([("id", "<u8"), ("v", "<f4", (dim,))])
    need = _HEADER.itemsize + n * node_t.itemsize + n * R * 8
    if len(raw) != need:
        raise FormatError(f"graph file has {len(raw)} bytes, expected {need}", min(len(raw), need))
    nodes = np.frombuffer(raw, dtype=node_t, count=n, offset=_HEADER.itemsize)
    adj = np.frombuffer(raw, dtype="<i8", count=n * R,
                        offset=_HEADER.itemsize + n * node_t.itemsize).reshape(n, R).astype(np.int64)
    if adj.size and (adj.max() >= n or adj.min() < -1):
        raise FormatError("adjacency slot out of range", _HEADER.itemsize + n * node_t.itemsize)
    deg = (adj >= 0).sum(axis=1)
    return ProximityGraph(nodes["id"], nodes["v"].reshape(n, dim), adj, deg,
                          int(head["entry"]), Metric(int(head["metric"])))


def write_graph(path: str | os.PathLike, g: ProximityGraph) -> None:
    Path(path).write_bytes(dump_graph(g))


def read_graph(path: str | os.PathLike) -> ProximityGraph:
    return parse_graph(Path(path).read_bytes())
