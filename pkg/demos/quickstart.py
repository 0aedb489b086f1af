"""Build a small hierarchical index, search it and sweep m.

    python3 demos/quickstart.py [n]
"""
from __future__ import annotations

import sys
import time

import numpy as np

from tierann import SearchParams, brute_force_topk, build_levels, evaluate, generate_sift_like, search
from tierann.dataset import Dataset

n = int(sys.argv[1]) if len(sys.argv) > 1 else 50_000
full = generate_sift_like(n + 200, dim=32, seed=1)
data = Dataset(full.vectors[200:], np.arange(n))
queries = full.vectors[:200]
truth = brute_force_topk(data, queries, 10)

t = time.perf_counter()
index = build_levels(budget=n // 100, data=data, density=0.1, seed=0, log=print)
print(f"built {index.clustered_levels} clustered levels + root of {len(index.root)} in "
      f"{time.perf_counter() - t:.1f}s")

ids, dist, trace = search(index, queries[0], SearchParams(m=64, k=5))
print("first query:", ids.tolist(), np.round(dist, 1).tolist())
print(f"  {trace.fetch_rounds} fetch rounds, {trace.vectors_scanned} distance computations")

print("m  recall@10  scanned  per-level recall (root .. level 0)")
for row in evaluate(index, queries, truth, [16, 32, 64, 128], k=10):
    print(f"{row.m:<3} {row.recall:9.3f} {row.vectors_scanned:8.0f}  "
          + " ".join(f"{r:.3f}" for r in row.per_level_recall))
