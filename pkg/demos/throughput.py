"""Analytic throughput of a desk index under two hardware profiles,
checked against the closed-loop discrete-event simulation.

    python3 demos/throughput.py
"""
from __future__ import annotations

from tierann import SearchParams, build_levels, generate_sift_like
from tierann.cluster import (COMMODITY, LSV3, closed_loop_throughput, estimate_throughput, measure_beta, place,
                             simulate_workload)

data = generate_sift_like(50_000, dim=32, seed=4)
queries = generate_sift_like(300, dim=32, seed=5).vectors
index = build_levels(500, data, 0.1, seed=0)
params = SearchParams(m=64, k=10)

for name, model in (("lsv3", LSV3), ("commodity", COMMODITY)):
    for n in (5, 10):
        m = model.with_nodes(n)
        pl = place(index, n)
        reports = simulate_workload(index, pl, m, queries, params)
        beta = measure_beta(reports)
        est = estimate_throughput(index, pl, m, queries, params, beta=beta, reports=reports)
        des = closed_loop_throughput(reports, m, clients=64 * n, queries=20 * len(reports))
        util = " ".join(f"{r}={u:.2f}" for r, u in est.utilization.items())
        print(f"{name:9s} nodes={n:<2d} beta={beta:.3f} qps={est.qps:9.0f} des={des.qps:9.0f} "
              f"binding={est.binding:7s} {util} p50={est.latency_percentiles['p50']:.0f}us")
