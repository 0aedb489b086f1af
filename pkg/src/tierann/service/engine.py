"""Stateless query engine: searches the root graph locally, then runs one
concurrent request wave per clustered level against the store nodes."""

from __future__ import annotations

import asyncio
import os
from dataclasses import dataclass

import numpy as np

from ..cluster import fnv1a64_array
from ..core import SearchParams, UsageError, top_candidates
from ..graph import ProximityGraph
from ..hierarchy import HierarchicalIndex, load_index
from . import protocol as P


class StoreUnavailable(RuntimeError):
    def __init__(self, node: str, reason: str):
        super().__init__(f"store {node}: {reason}")
        self.node = node


def parse_address(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise UsageError(f"bad store address {addr!r}, expected host:port")
    return host or "127.0.0.1", int(port)


@dataclass
class WaveStats:
    level: int
    nodes: int
    pids: int
    candidates: int


class _Connection:
    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        self.reader = reader
        self.writer = writer

    def close(self):
        self.writer.close()


class QueryEngine:
    """Holds only the root graph and the level metadata.

    ``stores[i]`` is the ``host:port`` of node ``i``; pids are routed with the
    same FNV-1a placement the stores were loaded with.
    """

    def __init__(self, root: ProximityGraph, clustered_levels: int, stores: list[str],
                 timeout: float = 10.0):
        if not stores:
            raise UsageError("need at least one store address")
        self.root = root
        self.clustered_levels = clustered_levels
        self.stores = list(stores)
        self.timeout = timeout
        self._idle: list[list[_Connection]] = [[] for _ in stores]
        self.waves: list[WaveStats] = []

    @classmethod
    def from_index(cls, index: HierarchicalIndex | str | os.PathLike, stores: list[str],
                   timeout: float = 10.0) -> "QueryEngine":
        if not isinstance(index, HierarchicalIndex):
            from ..hierarchy import load_manifest

            meta = load_manifest(index)
            index = load_index(index, levels=False)
            return cls(index.root, int(meta["levels"]), stores, timeout)
        return cls(index.root, len(index.levels), stores, timeout)

    @property
    def node_count(self) -> int:
        return len(self.stores)

    async def _connect(self, node: int) -> _Connection:
        if self._idle[node]:
            return self._idle[node].pop()
        host, port = parse_address(self.stores[node])
        reader, writer = await asyncio.open_connection(host, port)
        return _Connection(reader, writer)

    async def _roundtrip(self, node: int, request: bytes) -> tuple[int, bytes]:
        conn = await self._connect(node)
        try:
            conn.writer.write(request)
            await conn.writer.drain()
            got = await P.read_frame(conn.reader)
        except BaseException:
            conn.close()
            raise
        if got is None:
            conn.close()
            raise P.ProtocolError("store closed the connection")
        self._idle[node].append(conn)
        return got

    async def _call(self, node: int, request: bytes) -> tuple[int, bytes]:
        name = self.stores[node]
        try:
            return await asyncio.wait_for(self._roundtrip(node, request), self.timeout)
        except asyncio.TimeoutError:
            raise StoreUnavailable(name, f"no reply within {self.timeout}s") from None
        except (OSError, P.ProtocolError) as exc:
            raise StoreUnavailable(name, str(exc)) from None

    async def partition_result(self, node: int, req: P.PartitionRequest) -> P.PartitionResponse:
        opcode, payload = await self._call(node, P.encode_message(P.GET_PARTITION_RESULT, req))
        if opcode == P.ERROR:
            err = P.decode_error(payload)
            raise P.RemoteError(err.code, err.pid, err.message, self.stores[node])
        if opcode != P.PARTITION_RESULT:
            raise P.ProtocolError(f"{self.stores[node]}: unexpected opcode 0x{opcode:02x}")
        resp = P.decode_response(payload)
        if len(resp) > req.m:
            raise P.ProtocolError(f"{self.stores[node]}: {len(resp)} candidates for m={req.m}")
        return resp

    async def ping(self, node: int, payload: bytes = b"") -> bytes:
        opcode, got = await self._call(node, P.encode_message(P.PING, payload))
        if opcode != P.PONG:
            raise P.ProtocolError(f"{self.stores[node]}: unexpected opcode 0x{opcode:02x}")
        return got

    async def stats(self, node: int) -> P.StoreStats:
        opcode, got = await self._call(node, P.encode_message(P.STATS))
        if opcode != P.STATS_RESULT:
            raise P.ProtocolError(f"{self.stores[node]}: unexpected opcode 0x{opcode:02x}")
        return P.decode_stats(got)

    async def search(self, q, params: SearchParams) -> tuple[np.ndarray, np.ndarray]:
        """Same answers as :func:`tierann.hierarchy.search` on the full index."""
        q = np.ascontiguousarray(q, dtype=np.float32).ravel()
        if q.size != self.root.dim:
            raise UsageError(f"query has dimension {q.size}, index {self.root.dim}")
        keep = params.m if self.clustered_levels else params.k
        pos, dist, _, _ = self.root.search_positions(q, params.root_beam)
        ids, dist = self.root.ids[pos[:keep]], dist[:keep]
        for level in range(self.clustered_levels - 1, -1, -1):
            keep = params.m if level else params.k
            nodes = (fnv1a64_array(ids) % np.uint64(self.node_count)).astype(np.int64)
            involved = np.unique(nodes)
            waves = [self.partition_result(int(n), P.PartitionRequest(level, keep, q, ids[nodes == n]))
                     for n in involved]
            results = await asyncio.gather(*waves)
            self.waves.append(WaveStats(level, involved.size, ids.size, sum(len(r) for r in results)))
            if results:
                ids, dist = top_candidates(np.concatenate([r.ids for r in results]),
                                           np.concatenate([r.distances for r in results]), keep)
            else:
                ids, dist = np.zeros(0, np.uint64), np.zeros(0, np.float32)
        return ids, dist

    async def search_many(self, queries, params: SearchParams, concurrency: int = 8):
        """Run queries with up to ``concurrency`` in flight; results in order."""
        sem = asyncio.Semaphore(concurrency)

        async def one(row):
            async with sem:
                return await self.search(row, params)

        return await asyncio.gather(*(one(row) for row in np.atleast_2d(queries)))

    def close(self):
        for pool in self._idle:
            for conn in pool:
                conn.close()
            pool.clear()


async def engine_search(engine: QueryEngine, q, params: SearchParams):
    return await engine.search(q, params)
