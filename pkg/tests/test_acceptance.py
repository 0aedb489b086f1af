"""Acceptance criteria 1-10 at their stated tolerances.

Each test records one pass/fail line (printed in the terminal summary).
Criteria that fail on desk-scale data for reasons analysed in the
decision ledger are marked ``xfail(strict=False)``: they still run at the
stated tolerance and the recorded line says FAIL.

The 10^5 and 10^6 corpora make this module slow (roughly 20 minutes on
one core); deselect with ``-m "not slow"``.
"""

from __future__ import annotations

import asyncio
import math
import time
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import record
from tierann.cluster import (COMMODITY, LSV3, closed_loop_throughput, estimate_throughput, measure_beta, place,
                             simulate_workload)
from tierann.core import SearchParams
from tierann.dataset import (Dataset, brute_force_topk, format_vecs, generate_sift_like, generate_synthetic,
                             parse_vecs)
from tierann.graph import build_graph, min_beam_for_recall, shard_and_measure
from tierann.hierarchy import build_levels, evaluate, load_index, save_index, search, search_batch
from tierann.profiler import measure_cost_at_density
from tierann.service import protocol as P
from tierann.service.engine import QueryEngine
from tierann.service.store import StoreNode, load_store, serve_store, server_address

pytestmark = pytest.mark.slow

DESK_N = 1_000_000
DESK_DIM = 32
DESK_QUERIES = 1000
SAMPLE_N = 100_000
SAMPLE_QUERIES = 300


def _split(n, nq, dim, seed):
    full = generate_sift_like(n + nq, dim=dim, seed=seed)
    return Dataset(full.vectors[nq:], np.arange(n)), full.vectors[:nq]


# -- shared corpora -------------------------------------------------------------------

@pytest.fixture(scope="module")
def sift_sample():
    """10^5-vector SIFT-style sample (128-d) with recall@5 ground truth."""
    data, q = _split(SAMPLE_N, SAMPLE_QUERIES, 128, seed=3)
    return data, q, brute_force_topk(data, q, 5)


@pytest.fixture(scope="module")
def desk():
    """The 3-level desk index: 10^6 vectors, D=0.1, budget 10^4."""
    data, q = _split(DESK_N, DESK_QUERIES, DESK_DIM, seed=1)
    truth = brute_force_topk(data, q, 10)
    index = build_levels(10_000, data, 0.1, seed=0)
    return data, q, truth, index


@pytest.fixture(scope="module")
def desk_dir(desk, tmp_path_factory):
    return save_index(desk[3], tmp_path_factory.mktemp("desk") / "index")


# -- 1. inflection-curve shape ---------------------------------------------------------

@pytest.fixture(scope="module")
def density_costs(sift_sample):
    data, q, truth = sift_sample
    t = time.perf_counter()
    probes = {d: measure_cost_at_density(data, d, q, truth, 0.9, seed=0, k=5) for d in (1.0, 0.1, 0.01)}
    return probes, time.perf_counter() - t


def test_criterion_1a_fine_density_near_graph_cost(density_costs):
    probes, secs = density_costs
    ratio = probes[0.1].accessed_vectors / probes[1.0].accessed_vectors
    ok = ratio <= 2.0 and secs <= 15 * 60
    record(1, ok, f"(a) cost(0.1)/cost(1.0) = {probes[0.1].accessed_vectors:.0f}/"
                  f"{probes[1.0].accessed_vectors:.0f} = {ratio:.2f} (<= 2.0), runtime {secs:.0f}s (<= 900s)")
    assert ratio <= 2.0
    assert secs <= 15 * 60


@pytest.mark.xfail(strict=False, reason="cost growth below D=0.1 is flatter on synthetic data; see ledger")
def test_criterion_1b_coarse_density_explodes(density_costs):
    probes, _ = density_costs
    ratio = probes[0.01].accessed_vectors / probes[0.1].accessed_vectors
    record(1, ratio >= 2.5, f"(b) cost(0.01)/cost(0.1) = {probes[0.01].accessed_vectors:.0f}/"
                            f"{probes[0.1].accessed_vectors:.0f} = {ratio:.2f} (>= 2.5), "
                            f"probes p*={probes[0.01].probe_count}/{probes[0.1].probe_count}")
    assert ratio >= 2.5


# -- 2. cross-node dominance -----------------------------------------------------------------

@pytest.mark.xfail(strict=False, reason="spatial shards keep short desk-scale traversals local; see ledger")
def test_criterion_2_cross_node_dominance(sift_sample):
    data, q, truth = sift_sample
    g = build_graph(data.ids, data.vectors, seed=0)
    beam, recall, _ = min_beam_for_recall(g, q, truth.ids, 5, 0.9)
    res = shard_and_measure(g, 5, q, 5, beam, seed=0)
    ok = res.cross_node_fraction >= 0.5
    record(2, ok, f"cross-node fraction {res.cross_node_fraction:.3f} (>= 0.5) at beam {beam}, recall@5 "
                  f"{recall:.3f}; avg steps {res.avg_total_steps:.1f}, avg cross {res.avg_cross_node_steps:.1f}, "
                  f"p99 cross {res.p99_cross_node_steps:.0f}")
    assert all(s.cross_node_steps <= s.expansions for s in res.per_query)
    assert ok


# -- 3. end-to-end accuracy -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk_m256(desk):
    _, q, truth, index = desk
    return evaluate(index, q, truth, [256], k=10)[0]


def test_criterion_3a_end_to_end_accuracy(desk, desk_m256):
    index, row = desk[3], desk_m256
    ok = index.height == 3 and row.recall >= 0.9
    record(3, ok, f"(a) {index.height} levels over {DESK_N} vectors, recall@10 {row.recall:.4f} (>= 0.9) at m=256")
    assert index.height == 3
    assert row.recall >= 0.9


@pytest.mark.xfail(strict=False, reason="m=256 at D=0.1 scans ~m/D vectors per level, above 3x a graph; see ledger")
def test_criterion_3b_scan_cost_vs_graph(desk, desk_m256):
    data, q, truth, _ = desk
    row = desk_m256
    # single-level baseline: one graph over all 10^6 vectors, smallest beam reaching the same recall
    g = build_graph(data.ids, data.vectors, seed=0)
    beam, g_recall, g_cost = min_beam_for_recall(g, q, truth.ids, 10, row.recall)
    ratio = row.vectors_scanned / g_cost
    record(3, ratio <= 3.0, f"(b) scanned {row.vectors_scanned:.0f} vs graph {g_cost:.0f} at beam {beam} "
                            f"(recall {g_recall:.4f}): {ratio:.2f}x (<= 3.0)")
    assert ratio <= 3.0


# -- 4. round / height laws ----------------------------------------------------------------------

def _oracle_levels(n: int, d: Fraction, budget: int) -> int:
    # exact rational arithmetic: smallest L with n * d^L <= budget
    levels, size = 0, Fraction(n)
    while size > budget:
        size *= d
        levels += 1
    return levels


def test_criterion_4_height_and_round_laws():
    rng = np.random.default_rng(2024)
    checked, heights = [], []
    for t in range(20):
        n = int(rng.integers(300, 6000))
        dens = str(rng.choice(["0.05", "0.1", "0.2", "0.25", "0.3", "0.5"]))
        budget = int(rng.integers(4, max(5, n // 3)))
        data = generate_synthetic(n, 8, 12, 0.1, seed=100 + t)
        index = build_levels(budget, data, float(dens), seed=t, build_beam=48, R=16)
        want = _oracle_levels(n, Fraction(dens), budget)
        heights.append(want)
        logf = math.ceil(math.log(n / budget) / math.log(1 / float(dens)) - 1e-12) if n > budget else 0
        qs = generate_synthetic(15, 8, 12, 0.1, seed=500 + t).vectors
        _, _, traces = search_batch(index, qs, SearchParams(m=8, k=5))
        rounds = {tr.fetch_rounds for tr in traces}
        checked.append(index.clustered_levels == want == logf and rounds == {want}
                       and len(index.root) <= budget)
    ok = all(checked)
    record(4, ok, f"{sum(checked)}/20 random (n, D, budget) triples match ceil(log_(1/D)(n/budget)) "
                  f"and fetch rounds == clustered levels (levels {min(heights)}..{max(heights)})")
    assert ok


# -- 5. per-level accuracy ordering ---------------------------------------------------------------

def test_criterion_5_per_level_recall_ordering(desk):
    _, q, truth, index = desk
    rows = evaluate(index, q, truth, [64, 128, 256], k=10)
    good = [all(a >= b for a, b in zip(r.per_level_recall, r.per_level_recall[1:])) for r in rows]
    ok = all(good)
    record(5, ok, "; ".join(f"m={r.m}: " + " >= ".join(f"{v:.4f}" for v in r.per_level_recall) for r in rows)
           + " (root .. level 0)")
    assert ok


# -- 6. near-data payload bound ---------------------------------------------------------------------

def test_criterion_6_payload_bound(desk):
    data, _, _, index = desk
    stores = {lv: StoreNode({lv: t}, index.dim, index.metric) for lv, t in enumerate(index.levels)}
    worst = [0]

    @settings(max_examples=150, deadline=None, suppress_health_check=list(HealthCheck))
    @given(st.integers(0, len(index.levels) - 1), st.integers(1, 512), st.integers(0, 2**32 - 1),
           arrays(np.float32, DESK_DIM, elements=st.floats(-50, 400, width=32)))
    def check(level, count, seed, noise):
        table = index.levels[level]
        rng = np.random.default_rng(seed)
        pids = table.pids[rng.choice(len(table), size=min(count, len(table)), replace=False)]
        q = data.vectors[rng.integers(len(data))] + noise
        reply, _ = stores[level].handle(P.GET_PARTITION_RESULT,
                                        P.encode_request(P.PartitionRequest(level, 512, q, pids)))
        opcode, payload = P.split_frame(reply)
        assert opcode == P.PARTITION_RESULT
        worst[0] = max(worst[0], len(payload))
        assert len(payload) <= 6148

    try:
        check()
        ok = True
    finally:
        record(6, worst[0] <= 6148, f"largest m=512 response payload {worst[0]} bytes (<= 6148) over 150 "
                                    f"random queries and pid lists")
    assert ok


# -- 7. distributed answer equivalence --------------------------------------------------------------

async def _engine_answers(path, nodes, queries, params):
    servers = [await serve_store(load_store(path, i, nodes)) for i in range(nodes)]
    engine = QueryEngine.from_index(path, [server_address(s) for s in servers], timeout=60)
    try:
        return await engine.search_many(queries, params, concurrency=8)
    finally:
        engine.close()
        for s in servers:
            s.close()
            await s.wait_closed()


def test_criterion_7_distributed_equivalence(desk, desk_dir):
    _, q, _, index = desk
    params = SearchParams(m=256, k=10)
    local, _, _ = search_batch(index, q, params)
    mismatches = {}
    for nodes in (1, 5):
        got = asyncio.run(_engine_answers(desk_dir, nodes, q, params))
        mismatches[nodes] = sum(not np.array_equal(ids, local[i]) for i, (ids, _) in enumerate(got))
    ok = all(v == 0 for v in mismatches.values())
    record(7, ok, f"{len(q)} queries, id-list mismatches vs local search: 1 node {mismatches[1]}, "
                  f"5 nodes {mismatches[5]} (== 0)")
    assert ok


# -- 8. analytic vs counted throughput --------------------------------------------------------------

@pytest.fixture(scope="module")
def desk_reports(desk):
    _, q, _, index = desk
    params = SearchParams(m=256, k=10)
    pl = place(index, 5)
    return params, pl, {name: simulate_workload(index, pl, model, q, params)
                        for name, model in (("lsv3", LSV3), ("commodity", COMMODITY))}


def test_criterion_8_analytic_vs_closed_loop(desk, desk_reports):
    _, q, _, index = desk
    params, pl, reports = desk_reports
    details, ok = [], True
    for name, model in (("lsv3", LSV3), ("commodity", COMMODITY)):
        reps = reports[name]
        beta = measure_beta(reps)
        est = estimate_throughput(index, pl, model, q, params, beta=beta, reports=reps)
        des = closed_loop_throughput(reps, model, clients=256, queries=20_000)
        gap = abs(des.qps - est.qps) / est.qps
        good = gap <= 0.15
        if name == "lsv3":
            good = good and est.binding == "iops" and est.utilization["net"] < 0.30 \
                and est.utilization["cpu"] < 0.50
        ok = ok and good
        details.append(f"{name}: analytic {est.qps:.0f} vs closed-loop {des.qps:.0f} QPS ({gap:.1%} <= 15%), "
                       f"binding {est.binding}, net {est.utilization['net']:.2f}, cpu {est.utilization['cpu']:.2f}, "
                       f"beta {beta:.3f}")
    record(8, ok, "; ".join(details))
    assert ok


# -- 9. load balance ----------------------------------------------------------------------------------

def test_criterion_9_load_balance(desk_reports):
    _, _, reports = desk_reports
    beta = measure_beta(reports["lsv3"])
    ok = beta <= 1.3
    record(9, ok, f"measured beta {beta:.4f} over {len(reports['lsv3'])} queries on 5 nodes (<= 1.3)")
    assert ok


# -- 10. determinism and round-trips ---------------------------------------------------------------------

def test_criterion_10_determinism_and_round_trips(tmp_path):
    data, _ = _split(20_000, 0, 32, seed=9)
    a = save_index(build_levels(200, data, 0.1, seed=4), tmp_path / "a")
    b = save_index(build_levels(200, data, 0.1, seed=4), tmp_path / "b")
    files = sorted(p.name for p in a.iterdir())
    identical = all((a / f).read_bytes() == (b / f).read_bytes() for f in files)
    c = save_index(load_index(a), tmp_path / "c")
    reloaded = all((a / f).read_bytes() == (c / f).read_bytes() for f in files)

    counts = {"vecs": 0, "frames": 0}

    @settings(max_examples=100, deadline=None)
    @given(st.sampled_from(["fvecs", "ivecs", "bvecs"]), st.integers(0, 6), st.integers(1, 9), st.data())
    def vecs_round_trip(kind, n, dim, draw):
        dtype = {"fvecs": np.float32, "ivecs": np.int32, "bvecs": np.uint8}[kind]
        elems = {"fvecs": st.floats(allow_nan=False, width=32), "ivecs": st.integers(-2**31, 2**31 - 1),
                 "bvecs": st.integers(0, 255)}[kind]
        x = draw.draw(arrays(dtype, (n, dim), elements=elems))
        raw = format_vecs(x, kind)
        back = parse_vecs(raw, kind)
        assert back.tobytes() == x.tobytes() and format_vecs(back, kind) == raw
        counts["vecs"] += 1

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 255), st.integers(0, 2**32 - 1), st.lists(st.floats(allow_nan=False, width=32), max_size=40),
           st.lists(st.integers(0, 2**64 - 1), max_size=64), st.lists(st.integers(0, 2**64 - 1), max_size=64))
    def frames_round_trip(level, m, q, pids, ids):
        req = P.PartitionRequest(level, m, np.array(q, np.float32), np.array(pids, np.uint64))
        raw = P.encode_message(P.GET_PARTITION_RESULT, req)
        assert P.decode_message(raw) == (P.GET_PARTITION_RESULT, req)
        assert P.encode_message(P.GET_PARTITION_RESULT, P.decode_message(raw)[1]) == raw
        resp = P.PartitionResponse(np.array(ids, np.uint64), np.linspace(0, 1, len(ids), dtype=np.float32))
        raw = P.encode_message(P.PARTITION_RESULT, resp)
        assert P.decode_message(raw) == (P.PARTITION_RESULT, resp)
        counts["frames"] += 1

    vecs_round_trip()
    frames_round_trip()
    ok = identical and reloaded
    record(10, ok, f"index rebuild byte-identical: {identical} ({len(files)} files); save/load/save identical: "
                   f"{reloaded}; vecs round-trips {counts['vecs']}, frame round-trips {counts['frames']}")
    assert ok
