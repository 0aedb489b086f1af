"""Multi-level index: recursive bottom-up build and top-down search.

Level ``i`` (0-based) maps a pid to a partition of level-``i`` vectors; the
pid is the id of the partition's centroid, which is itself a vector of level
``i + 1``. The root is an in-memory proximity graph over the top level's
vectors. A query costs exactly one fetch round per clustered level.

Index directory layout::

    manifest.txt     key=value: format, dim, metric, levels, densities,
                     budget, seed, R, build_beam, epsilon, max_copies,
                     replication, root, level_<i>
    root.graph       graph file (see :mod:`tierann.graph`)
    level_<i>.parts  partition file (see :mod:`tierann.clustering`)
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .clustering import (DEFAULT_EPSILON, DEFAULT_MAX_COPIES, DEFAULT_SHARD_SIZE, PartitionTable,
                         partition_at_density, read_partitions,
                         replicate_boundary, write_partitions)
from .core import Metric, SearchParams, UsageError, as_matrix, default_threads, mean_recall, top_candidates
from .dataset import Dataset, GroundTruth, read_manifest, write_manifest
from .graph import DEFAULT_BUILD_BEAM, DEFAULT_R, ProximityGraph, build_graph, read_graph, write_graph

INDEX_FORMAT = "tierann-index/1"


@dataclass
class HierarchicalIndex:
    levels: list[PartitionTable]
    root: ProximityGraph
    densities: list[float]
    dim: int
    metric: Metric
    budget: int
    seed: int
    R: int = DEFAULT_R
    build_beam: int = DEFAULT_BUILD_BEAM
    epsilon: float = DEFAULT_EPSILON
    max_copies: int = DEFAULT_MAX_COPIES
    replication: list[float] = field(default_factory=list)

    @property
    def clustered_levels(self) -> int:
        return len(self.levels)

    @property
    def height(self) -> int:
        return len(self.levels) + 1

    def level_sizes(self) -> list[int]:
        """Distinct vectors per level, bottom up, root last."""
        sizes = [int(np.unique(t.member_ids).size) for t in self.levels]
        return sizes + [len(self.root)]


@dataclass
class LevelTrace:
    level: int
    pids: np.ndarray
    partitions_scanned: int
    vectors_scanned: int
    raw_bytes: int          # member bytes if the partitions were shipped whole
    pid_sizes: np.ndarray
    output_ids: np.ndarray | None = None


@dataclass
class SearchTrace:
    root_distance_computations: int
    root_output: np.ndarray | None
    levels: list[LevelTrace] = field(default_factory=list)

    @property
    def fetch_rounds(self) -> int:
        return len(self.levels)

    @property
    def vectors_scanned(self) -> int:
        return self.root_distance_computations + sum(t.vectors_scanned for t in self.levels)


def _above(planned: float, budget: int) -> bool:
    # relative slack so that e.g. 1e6 * 0.1 * 0.1 counts as exactly 1e4
    return planned > budget * (1 + 1e-9)


def budget_from_bytes(nbytes: int, dim: int, R: int = DEFAULT_R) -> int:
    """Root vector count fitting a byte budget: bytes / (4 dim + 8 R)."""
    return max(1, int(nbytes // (4 * dim + 8 * R)))


def expected_clustered_levels(n: int, densities, budget: int) -> int:
    """Smallest L with n * D_0 * ... * D_{L-1} <= budget.

    ``densities`` is a float (uniform) or a per-level sequence; a short
    sequence repeats its last entry.
    """
    if budget < 1:
        raise UsageError("budget must be >= 1")
    seq = [densities] if np.isscalar(densities) else list(densities)
    size = float(n)
    levels = 0
    while _above(size, budget):
        d = seq[min(levels, len(seq) - 1)]
        if d >= 1.0:
            raise UsageError("density 1.0 cannot shrink a level above the budget")
        size *= d
        levels += 1
    return levels


def build_levels(budget: int, data: Dataset, density: float | str | Sequence[float] = 0.1,
                 seed: int = 0, epsilon: float = DEFAULT_EPSILON,
                 max_copies: int = DEFAULT_MAX_COPIES, R: int = DEFAULT_R,
                 build_beam: int = DEFAULT_BUILD_BEAM, shard_size: int = DEFAULT_SHARD_SIZE,
                 queries=None, profile_sample: int = 100_000, target_recall: float = 0.9,
                 cost_ratio: float = 2.0, log=None) -> HierarchicalIndex:
    """Cluster level after level until the remaining vectors fit ``budget``,
    then build the root graph over them.

    ``density`` is a fixed value, a per-level sequence, or ``"auto"`` to run
    the profiler on a fresh sample of every level. The stopping test uses the
    planned level size ``n * D_0 * ... * D_i``; rounding of partition counts
    can only make the real size smaller, except for densities above 0.5,
    where the last level is clamped to the budget.
    """
    if budget < 1:
        raise UsageError("budget must be >= 1")
    if len(data) == 0:
        raise UsageError("cannot index an empty dataset")
    ids, x = data.ids, data.vectors
    planned = float(len(data))
    levels: list[PartitionTable] = []
    densities: list[float] = []
    replication: list[float] = []
    fixed = None if isinstance(density, str) else (
        [float(density)] if np.isscalar(density) else [float(d) for d in density])
    if isinstance(density, str) and density != "auto":
        raise UsageError(f"density must be a number, a sequence or 'auto', got {density!r}")
    while _above(planned, budget):
        level = len(levels)
        if fixed is None:
            from .profiler import profile_vectors

            prof = profile_vectors(ids, x, data.metric, sample_size=profile_sample,
                                   queries=queries, target_recall=target_recall,
                                   cost_ratio=cost_ratio, seed=seed + level)
            d = prof.chosen
            if d >= 1.0:
                d = 0.1
        else:
            d = fixed[min(level, len(fixed) - 1)]
        if not 0.0 < d < 1.0:
            raise UsageError(f"density {d} cannot shrink level {level}")
        planned *= d
        cr = partition_at_density(ids, x, d, seed=seed + level, level=level,
                                  shard_size=shard_size)
        if not _above(planned, budget) and len(cr) > budget:
            cr = partition_at_density(ids, x, budget / len(ids), seed=seed + level, level=level,
                                      shard_size=shard_size)
        cr = replicate_boundary(cr, epsilon, max_copies)
        levels.append(cr.partitions)
        densities.append(d)
        replication.append(cr.replication_factor)
        if log:
            log(f"level {level}: density {d:g}, {len(ids)} -> {len(cr)} partitions, "
                f"replication {cr.replication_factor:.3f}")
        ids, x = cr.centroid_ids, cr.centroids
    root = build_graph(ids, x, R, build_beam, seed, data.metric)
    return HierarchicalIndex(levels, root, densities, data.vectors.shape[1], data.metric, budget,
                             seed, R, build_beam, epsilon, max_copies, replication)


def scan_partitions(table: PartitionTable, pids, q: np.ndarray, keep: int, metric: Metric,
                    level: int | None = None):
    """Scan the members of ``pids``; return the de-duplicated top ``keep``."""
    idx, sizes = table.member_index(pids, level)
    d = _kernels.gather_distances(table.member_vectors, idx, q, int(metric))
    ids, dist = top_candidates(table.member_ids[idx], d, keep)
    return ids, dist, sizes


def search(index: HierarchicalIndex, q, params: SearchParams, keep_lists: bool = False):
    """Top-k search; returns ``(ids, distances, trace)``.

    The root graph yields the top-m pids of the highest clustered level; every
    clustered level then fetches those partitions in one round, scans all
    members, de-duplicates by id (minimum distance) and forwards the top m.
    The last level returns the top k.
    """
    q = np.ascontiguousarray(q, dtype=np.float32).ravel()
    if q.shape[0] != index.dim:
        raise UsageError(f"query has dimension {q.shape[0]}, index {index.dim}")
    if len(index.root) == 0:
        raise UsageError("index is empty")
    depth = len(index.levels)
    keep = params.m if depth else params.k
    pos, dist, ncomp, _ = index.root.search_positions(q, params.root_beam)
    ids = index.root.ids[pos[:keep]]
    dist = dist[:keep]
    trace = SearchTrace(int(ncomp), ids.copy() if keep_lists else None)
    for level in range(depth - 1, -1, -1):
        table = index.levels[level]
        keep = params.m if level else params.k
        pids = ids
        ids, dist, sizes = scan_partitions(table, pids, q, keep, index.metric, level)
        trace.levels.append(LevelTrace(level, pids, len(pids), int(sizes.sum()),
                                       int(sizes.sum()) * (8 + 4 * index.dim),
                                       sizes, ids.copy() if keep_lists else None))
    return ids, dist, trace


def search_batch(index: HierarchicalIndex, queries, params: SearchParams, keep_lists: bool = False,
                 threads: int | None = None):
    """Search every row; results are in query order whatever ``threads`` is."""
    q = as_matrix(queries)
    threads = threads or default_threads()
    out = np.full((q.shape[0], params.k), np.iinfo(np.uint64).max, dtype=np.uint64)
    dist = np.full((q.shape[0], params.k), np.inf, dtype=np.float32)
    run = lambda row: search(index, row, params, keep_lists)
    if threads > 1 and q.shape[0] > 1:
        with ThreadPoolExecutor(threads) as pool:
            found = list(pool.map(run, q))
    else:
        found = [run(row) for row in q]
    for i, (r, d, _) in enumerate(found):
        out[i, : r.size] = r
        dist[i, : d.size] = d
    return out, dist, [t for _, _, t in found]


# -- evaluation --------------------------------------------------------------------

class _Ancestry:
    """Parent lookup: which pids at level i hold a given level-i id."""

    def __init__(self, table: PartitionTable):
        owners = np.repeat(table.pids, table.sizes)
        order = np.argsort(table.member_ids, kind="stable")
        self.ids = table.member_ids[order]
        self.owners = owners[order]

    def parents(self, ids: np.ndarray) -> np.ndarray:
        ids = np.unique(np.asarray(ids, dtype=np.uint64))
        lo = np.searchsorted(self.ids, ids, "left")
        hi = np.searchsorted(self.ids, ids, "right")
        if not len(ids):
            return ids
        return np.unique(np.concatenate([self.owners[a:b] for a, b in zip(lo, hi)]))


def ancestry(index: HierarchicalIndex) -> list[_Ancestry]:
    return [_Ancestry(t) for t in index.levels]


def per_level_recall(index: HierarchicalIndex, traces: Sequence[SearchTrace], truth_ids: np.ndarray,
                     k: int, anc: list[_Ancestry] | None = None) -> list[float]:
    """Recall of each level's forwarded list, root first, level 0 last.

    For level j, a true top-k vector counts as found when at least one of
    its level-j ancestors (itself at level 0) is in the list that level
    forwarded. Level-0 recall is ordinary recall@k.
    """
    anc = anc or ancestry(index)
    depth = len(index.levels)
    found = np.zeros(depth + 1, dtype=np.float64)
    for t, truth in zip(traces, truth_ids):
        lists = {depth: t.root_output}
        for lt in t.levels:
            lists[lt.level] = lt.output_ids
        for target in truth[:k]:
            chain = np.array([target], dtype=np.uint64)
            for j in range(depth + 1):
                if j:
                    chain = anc[j - 1].parents(chain)
                if np.isin(chain, lists[j]).any():
                    found[j] += 1
    total = k * max(1, len(traces))
    return [float(found[j] / total) for j in range(depth, -1, -1)]


@dataclass
class EvalRow:
    m: int
    recall: float
    vectors_scanned: float
    fetch_rounds: int
    per_level_recall: list[float]
    partitions_fetched: float = 0.0


def evaluate(index: HierarchicalIndex, queries, truth: GroundTruth, ms: Sequence[int], k: int = 10,
             root_beam: int | None = None) -> list[EvalRow]:
    """Sweep ``m``; report recall@k, mean vectors scanned, fetch rounds and
    per-level recall."""
    if truth.k < k:
        raise UsageError(f"ground truth covers k={truth.k}, need {k}")
    if len(truth.ids) != as_matrix(queries).shape[0]:
        raise UsageError(f"{len(truth.ids)} ground-truth rows for {as_matrix(queries).shape[0]} queries")
    anc = ancestry(index)
    rows = []
    for m in ms:
        params = SearchParams(m=m, k=k, root_beam=max(root_beam or 0, m) if root_beam else None)
        ids, _, traces = search_batch(index, queries, params, keep_lists=True)
        rounds = {t.fetch_rounds for t in traces}
        if len(rounds) != 1:
            raise RuntimeError(f"fetch rounds vary across queries: {sorted(rounds)}")
        rows.append(EvalRow(
            m=m,
            recall=mean_recall(ids, truth.ids, k),
            vectors_scanned=float(np.mean([t.vectors_scanned for t in traces])),
            fetch_rounds=rounds.pop(),
            per_level_recall=per_level_recall(index, traces, truth.ids, k, anc),
            partitions_fetched=float(np.mean([sum(lt.partitions_scanned for lt in t.levels)
                                              for t in traces])),
        ))
    return rows


@dataclass
class LevelStats:
    level: int
    vectors: int
    partitions: int
    stored_vectors: int
    disk_bytes: int
    memory_bytes: int


def level_stats(index: HierarchicalIndex) -> list[LevelStats]:
    """Storage per clustered level and memory of the root, bottom up."""
    out = []
    for i, t in enumerate(index.levels):
        out.append(LevelStats(i, int(np.unique(t.member_ids).size), len(t),
                              int(t.member_ids.size), t.nbytes_on_disk(), 0))
    g = index.root
    out.append(LevelStats(len(index.levels), len(g), 0, len(g), 0,
                          len(g) * (4 * g.dim + 8 * g.R + 8)))
    return out


# -- persistence -----------------------------------------------------------------------

def save_index(index: HierarchicalIndex, directory: str | os.PathLike) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_graph(directory / "root.graph", index.root)
    entries: dict[str, object] = {
        "format": INDEX_FORMAT,
        "dim": index.dim,
        "metric": index.metric.label,
        "levels": len(index.levels),
        "densities": ",".join(repr(float(d)) for d in index.densities),
        "budget": index.budget,
        "seed": index.seed,
        "R": index.R,
        "build_beam": index.build_beam,
        "epsilon": repr(float(index.epsilon)),
        "max_copies": index.max_copies,
        "replication": ",".join(f"{r:.6f}" for r in index.replication),
        "root": "root.graph",
    }
    for i, table in enumerate(index.levels):
        name = f"level_{i}.parts"
        write_partitions(directory / name, table)
        entries[f"level_{i}"] = name
    write_manifest(directory / "manifest.txt", entries)
    return directory


def load_manifest(directory: str | os.PathLike) -> dict[str, str]:
    meta = read_manifest(Path(directory) / "manifest.txt")
    if meta.get("format") != INDEX_FORMAT:
        raise UsageError(f"{directory}: unsupported index format {meta.get('format')!r}")
    return meta


def load_index(directory: str | os.PathLike, levels: bool = True) -> HierarchicalIndex:
    """Load an index directory. With ``levels=False`` only the root and the
    metadata are read (what a stateless query engine needs)."""
    directory = Path(directory)
    meta = load_manifest(directory)
    dim = int(meta["dim"])
    depth = int(meta["levels"])
    root = read_graph(directory / meta["root"])
    tables = [read_partitions(directory / meta[f"level_{i}"], dim) for i in range(depth)] if levels else []
    split = lambda s: [float(v) for v in s.split(",")] if s else []
    return HierarchicalIndex(tables, root, split(meta["densities"]), dim, Metric.parse(meta["metric"]),
                             int(meta["budget"]), int(meta["seed"]), int(meta["R"]),
                             int(meta["build_beam"]), float(meta["epsilon"]), int(meta["max_copies"]),
                             split(meta.get("replication", "")))
