"""Deployment model: hash placement, per-query cost simulation, analytic
throughput, a closed-loop discrete-event check of it, and load imbalance.

Compute and storage are co-located: every node runs a store and a query
engine. A query's root search runs on one node (its "engine node"), each
clustered level sends one request to every node holding a needed pid, and
each node scans its partitions locally and answers with its top ``m``
candidates.

Placement hash (stable, documented)::

    node(pid) = FNV-1a-64(pid as 8 little-endian bytes) mod node_count
"""

from __future__ import annotations

import heapq
import math
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import SearchParams, UsageError, as_matrix
from .hierarchy import HierarchicalIndex, search
from .service.protocol import HEADER_BYTES, request_payload_size, response_payload_size

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

RESOURCES = ("iops", "disk_bw", "cpu", "net")


def fnv1a64(pid: int) -> int:
    h = FNV_OFFSET
    for b in int(pid).to_bytes(8, "little"):
        h = ((h ^ b) * FNV_PRIME) & _MASK64
    return h


def fnv1a64_array(pids) -> np.ndarray:
    """Vectorized :func:`fnv1a64`; uint64 arithmetic wraps mod 2**64."""
    p = np.asarray(pids, dtype=np.uint64)
    h = np.full(p.shape, FNV_OFFSET, dtype=np.uint64)
    prime = np.uint64(FNV_PRIME)
    for shift in range(0, 64, 8):
        h = (h ^ ((p >> np.uint64(shift)) & np.uint64(0xFF))) * prime
    return h


@dataclass(frozen=True)
class Placement:
    node_count: int
    pids: np.ndarray    # sorted
    nodes: np.ndarray   # node of pids[i]

    def node_of(self, pid: int) -> int:
        return fnv1a64(pid) % self.node_count

    def nodes_for(self, pids) -> np.ndarray:
        return (fnv1a64_array(pids) % np.uint64(self.node_count)).astype(np.int64)

    def counts(self) -> np.ndarray:
        return np.bincount(self.nodes, minlength=self.node_count)

    def pids_on(self, node: int) -> np.ndarray:
        return self.pids[self.nodes == node]


def place(index: HierarchicalIndex, node_count: int) -> Placement:
    if node_count < 1:
        raise UsageError("node count must be >= 1")
    pids = np.sort(np.concatenate([t.pids for t in index.levels])) if index.levels \
        else np.zeros(0, dtype=np.uint64)
    nodes = (fnv1a64_array(pids) % np.uint64(node_count)).astype(np.int64)
    return Placement(node_count, pids, nodes)


# -- hardware model ------------------------------------------------------------------

@dataclass(frozen=True)
class ClusterModel:
    """Per-node capacities. Times in microseconds, rates per second."""

    node_count: int = 5
    rtt: float = 50.0
    disk_read_latency: float = 80.0
    disk_iops: float = 800_000.0
    disk_bandwidth: float = 4.0e9
    net_bandwidth: float = 1.5625e9
    cpu_rate: float = 3.2e8
    beta: float = 1.0

    def __post_init__(self):
        if self.node_count < 1:
            raise UsageError("node_count must be >= 1")
        for name in ("disk_iops", "disk_bandwidth", "net_bandwidth", "cpu_rate"):
            if not getattr(self, name) > 0:
                raise UsageError(f"{name} must be positive")
        if self.rtt < 0 or self.disk_read_latency < 0:
            raise UsageError("latencies must be non-negative")
        if not self.beta >= 1:
            raise UsageError("beta must be >= 1")

    def capacity(self, resource: str) -> float:
        return {"iops": self.disk_iops, "disk_bw": self.disk_bandwidth,
                "cpu": self.cpu_rate, "net": self.net_bandwidth}[resource]

    def with_nodes(self, node_count: int) -> "ClusterModel":
        return replace(self, node_count=node_count)


# L16s_v3-like storage-optimized VM: 16 vCPU, 2 local NVMe disks
# (~800k read IOPS, ~4 GB/s), 12.5 Gbit/s network.
LSV3 = ClusterModel()
# Commodity node: SATA SSD, 10 GbE, 8 cores.
COMMODITY = ClusterModel(node_count=5, rtt=100.0, disk_read_latency=120.0, disk_iops=90_000.0,
                         disk_bandwidth=5.5e8, net_bandwidth=1.25e9, cpu_rate=1.6e8)
PROFILES = {"lsv3": LSV3, "commodity": COMMODITY}


def parse_model(text: str, name: str = "<profile>") -> ClusterModel:
    """Parse ``key = value`` lines (``#`` comments) into a model; keys are the
    field names; missing keys keep the Lsv3-like defaults."""
    known = {f.name: f.type for f in fields(ClusterModel)}
    values: dict[str, float | int] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{name}:{lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise UsageError(f"{name}:{lineno}: unknown key {key!r}")
        try:
            values[key] = int(raw) if key == "node_count" else float(raw)
        except ValueError:
            raise UsageError(f"{name}:{lineno}: bad value {raw!r} for {key}") from None
    return ClusterModel(**values)


def load_model(spec: str | os.PathLike) -> ClusterModel:
    """A built-in profile name (``lsv3``, ``commodity``) or a profile file."""
    if str(spec) in PROFILES:
        return PROFILES[str(spec)]
    path = Path(spec)
    return parse_model(path.read_text(), str(path))


def format_model(model: ClusterModel) -> str:
    return "".join(f"{f.name} = {getattr(model, f.name)!r}\n" for f in fields(ClusterModel))


# -- per-query simulation ----------------------------------------------------------

@dataclass
class LevelCost:
    level: int
    nodes: np.ndarray          # involved nodes
    node_time: np.ndarray      # microseconds per involved node
    request_bytes: np.ndarray
    response_bytes: np.ndarray
    reads: np.ndarray          # partitions read per involved node
    bytes_read: np.ndarray
    computations: np.ndarray

    @property
    def time(self) -> float:
        return float(self.node_time.max()) if self.node_time.size else 0.0


@dataclass
class QueryCostReport:
    ids: np.ndarray
    distances: np.ndarray
    engine_node: int
    root_compute: float                   # microseconds
    root_computations: int
    rtt: float
    levels: list[LevelCost]
    # per-node counters, indexed by node
    partitions_read: np.ndarray
    bytes_read: np.ndarray
    bytes_sent: np.ndarray
    distance_computations: np.ndarray

    @property
    def network_rounds(self) -> int:
        return len(self.levels)

    @property
    def total_latency(self) -> float:
        return self.root_compute + sum(self.rtt + lc.time for lc in self.levels)

    def demand(self) -> dict[str, np.ndarray]:
        """Per-node resource demand of this query."""
        return {"iops": self.partitions_read.astype(np.float64),
                "disk_bw": self.bytes_read.astype(np.float64),
                "cpu": self.distance_computations.astype(np.float64),
                "net": self.bytes_sent.astype(np.float64)}


def _node_groups(nodes: np.ndarray):
    order = np.argsort(nodes, kind="stable")
    uniq, start = np.unique(nodes[order], return_index=True)
    return uniq, np.split(order, start[1:])


def simulate_query(index: HierarchicalIndex, placement: Placement, model: ClusterModel, q,
                   params: SearchParams, engine_node: int = 0) -> QueryCostReport:
    """Run the search and charge its work to nodes.

    Per level and involved node the service time is
    ``reads / iops + disk latency + bytes / disk bandwidth
    + computations / cpu rate + response bytes / net bandwidth``; the level
    costs ``rtt`` plus its slowest node. Request bytes are charged to the
    engine node's network, response bytes to the store's. Answers are those
    of :func:`tierann.hierarchy.search`, untouched.
    """
    ids, dist, trace = search(index, q, params)
    n = placement.node_count
    if model.node_count != n:
        model = model.with_nodes(n)
    parts = np.zeros(n, dtype=np.int64)
    read = np.zeros(n, dtype=np.int64)
    sent = np.zeros(n, dtype=np.int64)
    comps = np.zeros(n, dtype=np.int64)
    comps[engine_node] += trace.root_distance_computations
    vec_bytes = 8 + 4 * index.dim
    levels = []
    for lt in trace.levels:
        table = index.levels[lt.level]
        node_of = placement.nodes_for(lt.pids)
        uniq, groups = _node_groups(node_of)
        times = np.zeros(uniq.size)
        req, resp, nread, nbytes, ncomp = (np.zeros(uniq.size, dtype=np.int64) for _ in range(5))
        for j, (node, grp) in enumerate(zip(uniq, groups)):
            pids = lt.pids[grp]
            idx, sizes = table.member_index(pids, lt.level)
            scanned = int(sizes.sum())
            distinct = int(np.unique(table.member_ids[idx]).size)
            req[j] = HEADER_BYTES + request_payload_size(index.dim, pids.size)
            keep = params.m if lt.level else params.k
            resp[j] = HEADER_BYTES + response_payload_size(min(keep, distinct))
            nread[j], nbytes[j], ncomp[j] = pids.size, scanned * vec_bytes, scanned
            parts[node] += pids.size
            read[node] += scanned * vec_bytes
            comps[node] += scanned
            sent[node] += resp[j]
            sent[engine_node] += req[j]
            times[j] = (pids.size / model.disk_iops * 1e6 + model.disk_read_latency
                        + scanned * vec_bytes / model.disk_bandwidth * 1e6
                        + scanned / model.cpu_rate * 1e6 + resp[j] / model.net_bandwidth * 1e6)
        levels.append(LevelCost(lt.level, uniq, times, req, resp, nread, nbytes, ncomp))
    return QueryCostReport(ids, dist, engine_node,
                           trace.root_distance_computations / model.cpu_rate * 1e6,
                           trace.root_distance_computations, model.rtt, levels,
                           parts, read, sent, comps)


def simulate_workload(index: HierarchicalIndex, placement: Placement, model: ClusterModel, queries,
                      params: SearchParams) -> list[QueryCostReport]:
    """Query ``i`` uses engine node ``i mod node_count``."""
    q = as_matrix(queries)
    return [simulate_query(index, placement, model, row, params, i % placement.node_count)
            for i, row in enumerate(q)]


# -- analytic throughput ----------------------------------------------------------------

@dataclass
class ThroughputEstimate:
    qps: float
    binding: str
    utilization: dict[str, float]      # hottest-node utilization at peak
    demand: dict[str, float]           # mean per-query demand summed over nodes
    node_count: int
    beta: float
    mean_latency: float = 0.0          # microseconds, unloaded
    latency_percentiles: dict[str, float] = field(default_factory=dict)


def workload_demands(reports: Sequence[QueryCostReport]) -> dict[str, float]:
    if not reports:
        raise UsageError("workload must contain at least one query")
    total = {r: 0.0 for r in RESOURCES}
    for rep in reports:
        for r, v in rep.demand().items():
            total[r] += float(v.sum())
    return {r: v / len(reports) for r, v in total.items()}


def throughput_from_demands(demand: dict[str, float], model: ClusterModel,
                            beta: float | None = None) -> tuple[float, str, dict[str, float]]:
    """``QPS = min_r N cap_r / (beta demand_r)`` with the arg-min and the
    hottest-node utilization of every resource at that QPS."""
    beta = model.beta if beta is None else beta
    if beta < 1:
        raise UsageError("beta must be >= 1")
    limits = {r: (model.node_count * model.capacity(r) / (beta * demand[r]) if demand[r] > 0 else math.inf)
              for r in RESOURCES}
    binding = min(RESOURCES, key=lambda r: limits[r])
    qps = limits[binding]
    util = {r: (qps / limits[r] if math.isfinite(limits[r]) else 0.0) for r in RESOURCES}
    return qps, binding, util


def estimate_throughput(index: HierarchicalIndex, placement: Placement, model: ClusterModel, workload,
                        params: SearchParams, beta: float | None = None,
                        reports: Sequence[QueryCostReport] | None = None) -> ThroughputEstimate:
    """Peak QPS from mean simulated per-query demands.

    ``beta`` defaults to the model's; pass the value measured with
    :func:`measure_beta` to reconcile with a placement's real skew.
    """
    model = model.with_nodes(placement.node_count)
    if reports is None:
        reports = simulate_workload(index, placement, model, workload, params)
    demand = workload_demands(reports)
    b = model.beta if beta is None else beta
    qps, binding, util = throughput_from_demands(demand, model, b)
    lat = np.array([r.total_latency for r in reports])
    return ThroughputEstimate(qps, binding, util, demand, placement.node_count, b, float(lat.mean()),
                              latency_percentiles(lat))


def latency_percentiles(lat) -> dict[str, float]:
    lat = np.asarray(lat, dtype=np.float64)
    if lat.size == 0:
        return {}
    return {f"p{p}": float(np.percentile(lat, p)) for p in (50, 95, 99)}


def measure_beta(loads) -> float:
    """Max over mean node load.

    ``loads`` is a per-node load vector, a sequence of them, or a sequence of
    :class:`QueryCostReport` (load = partitions fetched).
    """
    items = list(loads) if not isinstance(loads, np.ndarray) else [loads]
    if not items:
        raise UsageError("need at least one trace")
    if isinstance(items[0], QueryCostReport):
        total = np.sum([r.partitions_read for r in items], axis=0)
    else:
        total = np.sum(np.atleast_2d(np.asarray(items, dtype=np.float64)), axis=0)
    mean = float(np.mean(total))
    return float(np.max(total)) / mean if mean > 0 else 1.0


# -- closed-loop discrete-event simulation -----------------------------------------

@dataclass
class ClosedLoopResult:
    qps: float
    completed: int
    duration: float               # seconds of simulated time after warm-up
    latency_percentiles: dict[str, float]
    utilization: dict[str, float]  # hottest node, measured busy fraction


class _Server:
    __slots__ = ("free_at", "busy")

    def __init__(self):
        self.free_at = 0.0
        self.busy = 0.0

    def serve(self, now: float, service: float) -> float:
        start = max(now, self.free_at)
        self.free_at = start + service
        self.busy += service
        return self.free_at


def closed_loop_throughput(reports: Sequence[QueryCostReport], model: ClusterModel, clients: int,
                           queries: int = 20_000, warmup: float = 0.2) -> ClosedLoopResult:
    """Replay the workload's per-node demands through FIFO servers.

    Each node has four servers in series (disk IOPS, disk bandwidth, CPU,
    network egress); ``rtt`` and disk latency are pure delays. ``clients``
    closed-loop clients each run one query at a time, cycling through
    ``reports``; the root search of sequence number ``s`` runs on node
    ``s mod node_count``. Throughput counts completions after the first
    ``warmup`` fraction of ``queries``.
    """
    if not reports:
        raise UsageError("workload must contain at least one query")
    n = model.node_count
    srv = {r: [_Server() for _ in range(n)] for r in RESOURCES}
    rtt = model.rtt * 1e-6
    lat = model.disk_read_latency * 1e-6
    work = [_level_work(rep) for rep in reports]
    events: list = []
    tick = 0
    seq = 0
    started: dict[int, float] = {}
    pending: dict[int, int] = {}
    done_times: list[float] = []
    latencies: list[float] = []

    def push(t, stage, qid, level, item=None):
        nonlocal tick
        heapq.heappush(events, (t, tick, stage, qid, level, item))
        tick += 1

    def start_query(now):
        nonlocal seq
        qid, seq = seq, seq + 1
        started[qid] = now
        rep = reports[qid % len(reports)]
        push(srv["cpu"][qid % n].serve(now, rep.root_computations / model.cpu_rate), "level", qid, 0)

    for _ in range(min(clients, queries)):
        start_query(0.0)
    warm = int(queries * warmup)
    while events:
        now, _, stage, qid, level, item = heapq.heappop(events)
        if stage == "level":
            levels = work[qid % len(reports)]
            if level == len(levels):
                done_times.append(now)
                latencies.append(now - started.pop(qid))
                if seq < queries:
                    start_query(now)
                continue
            pending[qid] = len(levels[level])
            for it in levels[level]:
                t = srv["net"][qid % n].serve(now, it[5] / model.net_bandwidth)
                push(t + rtt / 2, "iops", qid, level, it)
            if not levels[level]:
                push(now + rtt, "level", qid, level + 1)
            continue
        node, reads, nbytes, comps, resp, _ = item
        if stage == "iops":
            push(srv["iops"][node].serve(now, reads / model.disk_iops) + lat, "disk_bw", qid, level, item)
        elif stage == "disk_bw":
            push(srv["disk_bw"][node].serve(now, nbytes / model.disk_bandwidth), "cpu", qid, level, item)
        elif stage == "cpu":
            push(srv["cpu"][node].serve(now, comps / model.cpu_rate), "net", qid, level, item)
        elif stage == "net":
            t = srv["net"][node].serve(now, resp / model.net_bandwidth)
            push(t + rtt / 2, "reply", qid, level, item)
        else:
            pending[qid] -= 1
            if pending[qid] == 0:
                del pending[qid]
                push(now, "level", qid, level + 1)
    if len(done_times) <= warm + 1:
        raise UsageError("too few queries to measure throughput")
    t0, t1 = done_times[warm], done_times[-1]
    count = len(done_times) - warm - 1
    horizon = done_times[-1]
    util = {r: max(s.busy for s in srv[r]) / horizon for r in RESOURCES}
    return ClosedLoopResult(count / (t1 - t0), count, t1 - t0,
                            latency_percentiles(np.array(latencies[warm:]) * 1e6), util)


def _level_work(rep: QueryCostReport):
    """Per level, per involved node: (node, reads, bytes, comps, resp, req)."""
    return [[(int(node), int(lc.reads[j]), int(lc.bytes_read[j]), int(lc.computations[j]),
              int(lc.response_bytes[j]), int(lc.request_bytes[j])) for j, node in enumerate(lc.nodes)]
            for lc in rep.levels]
