"""Index-store node: owns the partitions placed on it and answers
GET_PARTITION_RESULT by scanning them next to the data."""

from __future__ import annotations

import asyncio
import logging
import os
import threading
from pathlib import Path

import numpy as np

from .. import _kernels
from ..clustering import PartitionTable, read_partitions
from ..core import FormatError, IndexCorruptionError, Metric, top_candidates
from . import protocol as P

log = logging.getLogger(__name__)


class StoreNode:
    """Protocol logic without I/O: :meth:`handle` maps one request frame to
    one reply frame."""

    def __init__(self, tables: dict[int, PartitionTable], dim: int, metric: Metric | str,
                 name: str = "store"):
        self.tables = tables
        self.dim = dim
        self.metric = Metric.parse(metric)
        self.name = name
        self._lock = threading.Lock()
        self._requests = 0
        self._partitions = 0
        self._bytes_out = 0

    @property
    def stats(self) -> P.StoreStats:
        with self._lock:
            return P.StoreStats(self._requests, self._partitions, self._bytes_out)

    def _count(self, partitions: int, reply: bytes) -> bytes:
        with self._lock:
            self._requests += 1
            self._partitions += partitions
            self._bytes_out += len(reply)
        return reply

    def partition_result(self, req: P.PartitionRequest) -> P.PartitionResponse:
        """Scan the listed partitions, de-duplicate by id (minimum distance)
        and keep the ``m`` best. Unknown pids raise IndexCorruptionError."""
        if req.pids.size == 0 or req.m == 0:
            return P.PartitionResponse(np.zeros(0, np.uint64), np.zeros(0, np.float32))
        table = self.tables.get(req.level)
        if table is None:
            raise IndexCorruptionError(int(req.pids[0]), req.level)
        idx, _ = table.member_index(req.pids, req.level)
        d = _kernels.gather_distances(table.member_vectors, idx, req.query, int(self.metric))
        ids, dist = top_candidates(table.member_ids[idx], d, req.m)
        return P.PartitionResponse(ids, dist)

    def handle(self, opcode: int, payload: bytes) -> tuple[bytes, bool]:
        """Reply frame and whether the connection must close afterwards."""
        try:
            if opcode == P.GET_PARTITION_RESULT:
                req = P.decode_request(payload)
                if req.query.size != self.dim:
                    err = P.ErrorReply(P.ERR_BAD_REQUEST, 0,
                                       f"{self.name}: query dim {req.query.size}, store dim {self.dim}")
                    return self._count(0, P.encode_message(P.ERROR, err)), False
                try:
                    resp = self.partition_result(req)
                except IndexCorruptionError as exc:
                    pid = exc.pid
                    err = P.ErrorReply(P.ERR_UNKNOWN_PID, pid,
                                       f"{self.name}: unknown pid {pid} at level {req.level}")
                    return self._count(0, P.encode_message(P.ERROR, err)), False
                return self._count(int(req.pids.size), P.encode_message(P.PARTITION_RESULT, resp)), False
            if opcode == P.PING:
                return self._count(0, P.encode_message(P.PONG, payload)), False
            if opcode == P.STATS:
                if payload:
                    raise FormatError("STATS carries no payload", 0)
                return P.encode_message(P.STATS_RESULT, self.stats), False
            err = P.ErrorReply(P.ERR_MALFORMED, 0, f"unknown opcode 0x{opcode:02x}")
            return P.encode_message(P.ERROR, err), True
        except (FormatError, P.ProtocolError) as exc:
            return P.encode_message(P.ERROR, P.ErrorReply(P.ERR_MALFORMED, 0, str(exc))), True

    def dump_stats(self) -> str:
        return f"# {self.name}\n" + self.stats.dump()


def load_store(index_dir: str | os.PathLike, node: int, node_count: int,
               name: str | None = None) -> StoreNode:
    """The slice of an index directory that placement assigns to ``node``."""
    from ..cluster import fnv1a64_array
    from ..hierarchy import load_manifest

    index_dir = Path(index_dir)
    meta = load_manifest(index_dir)
    dim = int(meta["dim"])
    tables = {}
    for level in range(int(meta["levels"])):
        table = read_partitions(index_dir / meta[f"level_{level}"], dim)
        mine = (fnv1a64_array(table.pids) % np.uint64(node_count)) == np.uint64(node)
        tables[level] = table.subset(table.pids[mine])
    return StoreNode(tables, dim, meta["metric"], name or f"store{node}")


async def _serve_connection(node: StoreNode, reader: asyncio.StreamReader,
                            writer: asyncio.StreamWriter) -> None:
    try:
        while True:
            try:
                got = await P.read_frame(reader)
            except P.ProtocolError as exc:
                err = P.ErrorReply(P.ERR_MALFORMED, 0, str(exc))
                writer.write(P.encode_message(P.ERROR, err))
                break
            if got is None:
                break
            reply, close = node.handle(*got)
            writer.write(reply)
            await writer.drain()
            if close:
                break
    except (ConnectionError, asyncio.IncompleteReadError):
        pass
    finally:
        try:
            await writer.drain()
            writer.close()
            await writer.wait_closed()
        except ConnectionError:
            pass


async def serve_store(node: StoreNode, host: str = "127.0.0.1", port: int = 0) -> asyncio.Server:
    """Start serving; the caller owns the returned server (``close()`` it)."""
    server = await asyncio.start_server(lambda r, w: _serve_connection(node, r, w), host, port)
    addr = server.sockets[0].getsockname()
    log.info("%s listening on %s:%s", node.name, addr[0], addr[1])
    return server


def server_address(server: asyncio.Server) -> str:
    host, port = server.sockets[0].getsockname()[:2]
    return f"{host}:{port}"
