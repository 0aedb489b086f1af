"""Balanced-granularity selection.

For a candidate partition density the sample is clustered, a proximity
graph is built over the centroids, and we find the fewest partitions ``p``
each query must scan to reach the target recall. The cost of a density is
the mean number of distance computations per query at that ``p``
(centroid graph + scanned members). At density 1.0 every partition is a
single vector, so the cost is plain graph-search cost.

The selected density is the coarsest probed one whose cost stays within
``cost_ratio`` times the density-1.0 baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .clustering import partition_at_density, partition_count
from .core import UsageError, as_matrix, mean_recall, top_candidates
from .dataset import Dataset, GroundTruth, brute_force_topk, rng_for
from .graph import DEFAULT_BUILD_BEAM, DEFAULT_R, batch_search, build_graph, min_beam_for_recall

DENSITY_FLOOR = 0.001
FALLBACK_DENSITY = 0.1
MIN_CENTROID_BEAM = 32


class UnreachableTarget(RuntimeError):
    def __init__(self, density: float, best_recall: float, target: float):
        super().__init__(f"recall target {target} unreachable at density {density:g} "
                         f"(best recall {best_recall:.4f})")
        self.density = density
        self.best_recall = best_recall
        self.target = target


@dataclass
class DensityProbe:
    density: float
    accessed_vectors: float
    probe_count: int
    recall: float
    partitions: int = 0


@dataclass
class DensityProfile:
    probes: list[DensityProbe]
    baseline_cost: float
    chosen: float
    fallback: bool = False

    def probe_at(self, density: float) -> DensityProbe | None:
        return next((p for p in self.probes if p.density == density), None)


def _scan_topk(table, pid_lists, queries, k, metric):
    """Scan the listed partitions per query and return top-k ids plus scan sizes."""
    out = np.full((queries.shape[0], k), np.iinfo(np.uint64).max, dtype=np.uint64)
    scanned = np.zeros(queries.shape[0], dtype=np.int64)
    for i, pids in enumerate(pid_lists):
        idx, sizes = table.member_index(pids)
        d = _kernels.gather_distances(table.member_vectors, idx, queries[i], metric)
        ids, _ = top_candidates(table.member_ids[idx], d, k)
        out[i, : ids.size] = ids
        scanned[i] = int(sizes.sum())
    return out, scanned


def measure_cost_at_density(sample: Dataset, density: float, queries, truth: GroundTruth,
                            target_recall: float = 0.9, seed: int = 0, k: int = 5,
                            R: int = DEFAULT_R, build_beam: int = DEFAULT_BUILD_BEAM) -> DensityProbe:
    """Minimal partitions-per-query and its accessed-vector cost at one density.

    Raises :class:`UnreachableTarget` when even scanning every partition
    falls short of ``target_recall``.
    """
    if not 0 < target_recall <= 1:
        raise UsageError("target recall must lie in (0, 1]")
    if truth.k < k:
        raise UsageError(f"ground truth covers k={truth.k}, need {k}")
    q = as_matrix(queries)
    want = truth.ids[:, :k]
    n = len(sample)
    parts = partition_count(density, n)
    if parts == n:
        g = build_graph(sample.ids, sample.vectors, R, build_beam, seed, sample.metric)
        try:
            beam, rec, cost = min_beam_for_recall(g, q, want, k, target_recall)
        except ValueError:
            ids, _, _ = batch_search(g, q, k, len(g))
            raise UnreachableTarget(density, mean_recall(ids, want, k), target_recall) from None
        return DensityProbe(density, cost, beam, rec, parts)

    cr = partition_at_density(sample.ids, sample.vectors, density, seed=seed)
    g = build_graph(cr.centroid_ids, cr.centroids, R, build_beam, seed, sample.metric)
    metric = int(sample.metric)
    searched: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    results: dict[int, tuple[float, float]] = {}

    def evaluate(p: int) -> float:
        if p in results:
            return results[p][0]
        beam = max(p, MIN_CENTROID_BEAM)
        if beam not in searched:
            searched[beam] = _centroid_search(g, q, beam)
        lists, comps = searched[beam]
        top = [row[:p] for row in lists]
        ids, scanned = _scan_topk(cr.partitions, top, q, k, metric)
        rec = mean_recall(ids, want, k)
        results[p] = (rec, float((comps + scanned).mean()))
        return rec

    lo, hi = 0, 1
    while evaluate(hi) < target_recall:
        if hi >= parts:
            raise UnreachableTarget(density, results[hi][0], target_recall)
        lo, hi = hi, min(2 * hi, parts)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if evaluate(mid) >= target_recall:
            hi = mid
        else:
            lo = mid
    rec, cost = results[hi]
    return DensityProbe(density, cost, hi, rec, parts)


def _centroid_search(g, q, beam):
    lists = []
    comps = np.zeros(q.shape[0], dtype=np.int64)
    for i, row in enumerate(q):
        pos, _, ncomp, _ = g.search_positions(row, beam)
        lists.append(g.ids[pos])
        comps[i] = ncomp
    return lists, comps


def select_balanced_density(sample: Dataset, queries, truth: GroundTruth,
                            target_recall: float = 0.9, cost_ratio: float = 2.0, seed: int = 0,
                            k: int = 5, floor: float = DENSITY_FLOOR, resolution: float = 1.25,
                            R: int = DEFAULT_R, build_beam: int = DEFAULT_BUILD_BEAM) -> DensityProfile:
    """Binary search over log-density in ``[floor, 1]`` for the coarsest density
    whose cost is at most ``cost_ratio`` times the density-1.0 cost.

    The interval shrinks until its end-point ratio is at most ``resolution``;
    the floor itself is probed only when everything above it passed. Falls
    back to density 0.1 when fewer than three probes reach the target.
    """
    if cost_ratio <= 1:
        raise UsageError("cost_ratio must exceed 1")
    n = len(sample)
    by_count: dict[int, DensityProbe | None] = {}
    probes: list[DensityProbe] = []

    def probe(d: float) -> DensityProbe | None:
        c = partition_count(d, n)
        if c not in by_count:
            try:
                by_count[c] = measure_cost_at_density(sample, d, queries, truth, target_recall,
                                                      seed, k, R, build_beam)
            except UnreachableTarget:
                if c == n:
                    raise
                by_count[c] = None
            if by_count[c] is not None:
                probes.append(by_count[c])
        return by_count[c]

    base = probe(1.0)
    limit = cost_ratio * base.accessed_vectors

    def ok(p: DensityProbe | None) -> bool:
        return p is not None and p.accessed_vectors <= limit

    lo, hi = math.log(floor), 0.0
    floor_failed = False
    while hi - lo > math.log(resolution):
        mid = 0.5 * (lo + hi)
        if ok(probe(math.exp(mid))):
            hi = mid
        else:
            lo = mid
            floor_failed = True
    if not floor_failed:
        probe(floor)
    probes.sort(key=lambda p: -p.density)
    fallback = len(probes) < 3
    if fallback:
        chosen_probe = probe(FALLBACK_DENSITY)
        probes.sort(key=lambda p: -p.density)
        chosen = FALLBACK_DENSITY if chosen_probe is not None else 1.0
    else:
        chosen = min(p.density for p in probes if ok(p))
    return DensityProfile(probes, base.accessed_vectors, chosen, fallback)


def profile_vectors(ids, vectors, metric, sample_size: int = 100_000, queries=None,
                    n_queries: int = 200, target_recall: float = 0.9, cost_ratio: float = 2.0,
                    seed: int = 0, k: int = 5) -> DensityProfile:
    """Profile one level: sample it, pick or hold out queries, build the oracle
    and run :func:`select_balanced_density`."""
    ids = np.asarray(ids, dtype=np.uint64)
    x = as_matrix(vectors)
    rng = rng_for(seed)
    pick = rng.permutation(x.shape[0])
    if queries is None:
        hold = min(n_queries, max(1, x.shape[0] // 10))
        q = x[pick[:hold]]
        pick = pick[hold:]
    else:
        q = as_matrix(queries)[:n_queries]
    pick = np.sort(pick[:sample_size])
    sample = Dataset(x[pick], ids[pick], metric)
    kk = min(k, len(sample))
    truth = brute_force_topk(sample, q, kk)
    return select_balanced_density(sample, q, truth, target_recall, cost_ratio, seed, kk)
