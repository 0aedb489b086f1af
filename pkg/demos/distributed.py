"""Serve an index from several store nodes on localhost and query it
through the stateless engine; checks answers against local search.

    python3 demos/distributed.py [nodes]
"""
from __future__ import annotations

import asyncio
import sys
import tempfile

import numpy as np

from tierann import SearchParams, build_levels, generate_sift_like, save_index, search
from tierann.service.engine import QueryEngine
from tierann.service.store import load_store, serve_store, server_address

nodes = int(sys.argv[1]) if len(sys.argv) > 1 else 3
data = generate_sift_like(20_000, dim=32, seed=2)
queries = generate_sift_like(50, dim=32, seed=3).vectors
index = build_levels(200, data, 0.1, seed=0)
params = SearchParams(m=32, k=10)


async def main(path):
    servers = [await serve_store(load_store(path, i, nodes)) for i in range(nodes)]
    addrs = [server_address(s) for s in servers]
    print("stores:", ", ".join(addrs))
    engine = QueryEngine.from_index(path, addrs)
    try:
        found = await engine.search_many(queries, params, concurrency=8)
        for i in range(nodes):
            st = await engine.stats(i)
            print(f"  node {i}: {st.requests} requests, {st.partitions_read} partitions, {st.bytes_out} bytes out")
    finally:
        engine.close()
        for s in servers:
            s.close()
            await s.wait_closed()
    same = all(np.array_equal(ids, search(index, q, params)[0]) for (ids, _), q in zip(found, queries))
    waves = {w.level for w in engine.waves}
    print(f"{len(found)} queries, {len(engine.waves) // len(found)} waves each (levels {sorted(waves)}), "
          f"identical to local search: {same}")


with tempfile.TemporaryDirectory() as tmp:
    asyncio.run(main(save_index(index, tmp)))
