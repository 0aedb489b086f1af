"""Length-prefixed binary frames shared by store nodes and the query engine.

Frame::

    u32 LE length   bytes that follow (opcode + payload)
    u8  opcode
    payload

GET_PARTITION_RESULT (0x01) request payload::

    u8 level | u32 m | u32 dim | f32[dim] query | u32 pid_count | u64[pid_count] pids

its response (0x81)::

    u32 count | count x (u64 id, f32 distance), ascending by (distance, id)

PING (0x02) carries an opaque payload echoed by 0x82. STATS (0x03) has an
empty payload; 0x83 answers with three u64 counters (requests, partitions
read, bytes out). ERROR (0xFF) carries ``u16 code | u64 pid | utf-8 message``.
All integers and floats are little-endian.
"""

from __future__ import annotations

import asyncio
import struct
from dataclasses import dataclass, field

import numpy as np

from ..core import FormatError

GET_PARTITION_RESULT = 0x01
PING = 0x02
STATS = 0x03
PARTITION_RESULT = 0x81
PONG = 0x82
STATS_RESULT = 0x83
ERROR = 0xFF

MAX_FRAME = 16 * 1024 * 1024
HEADER_BYTES = 5

ERR_UNKNOWN_PID = 1
ERR_MALFORMED = 2
ERR_BAD_REQUEST = 3
ERR_INTERNAL = 4

_HEAD = struct.Struct("<IB")
_REQ_HEAD = struct.Struct("<BII")
_U32 = struct.Struct("<I")
_ERR = struct.Struct("<HQ")
_STATS = struct.Struct("<QQQ")
_CAND = np.dtype([("id", "<u8"), ("distance", "<f4")])


class ProtocolError(RuntimeError):
    """A peer sent bytes that do not form a valid frame or message."""


class RemoteError(RuntimeError):
    def __init__(self, code: int, pid: int, message: str, node: str | None = None):
        where = f" from {node}" if node else ""
        super().__init__(f"store error {code}{where} (pid {pid}): {message}")
        self.code = code
        self.pid = pid
        self.node = node


@dataclass
class PartitionRequest:
    level: int
    m: int
    query: np.ndarray
    pids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint64))

    def __post_init__(self):
        self.query = np.ascontiguousarray(self.query, dtype="<f4").ravel()
        self.pids = np.ascontiguousarray(self.pids, dtype="<u8").ravel()

    def __eq__(self, other):
        return (isinstance(other, PartitionRequest) and self.level == other.level
                and self.m == other.m and self.query.tobytes() == other.query.tobytes()
                and np.array_equal(self.pids, other.pids))


@dataclass
class PartitionResponse:
    ids: np.ndarray
    distances: np.ndarray

    def __post_init__(self):
        self.ids = np.ascontiguousarray(self.ids, dtype=np.uint64).ravel()
        self.distances = np.ascontiguousarray(self.distances, dtype=np.float32).ravel()

    def __len__(self) -> int:
        return self.ids.size

    def __eq__(self, other):
        return (isinstance(other, PartitionResponse) and np.array_equal(self.ids, other.ids)
                and self.distances.tobytes() == other.distances.tobytes())


@dataclass(frozen=True)
class StoreStats:
    requests: int = 0
    partitions_read: int = 0
    bytes_out: int = 0

    def dump(self) -> str:
        return (f"requests {self.requests}\npartitions_read {self.partitions_read}\n"
                f"bytes_out {self.bytes_out}\n")


@dataclass(frozen=True)
class ErrorReply:
    code: int
    pid: int
    message: str


def request_payload_size(dim: int, pid_count: int) -> int:
    return _REQ_HEAD.size + 4 * dim + 4 + 8 * pid_count


def response_payload_size(count: int) -> int:
    return 4 + _CAND.itemsize * count


def frame(opcode: int, payload: bytes = b"") -> bytes:
    if len(payload) + 1 > MAX_FRAME:
        raise ProtocolError(f"frame of {len(payload) + 1} bytes exceeds {MAX_FRAME}")
    return _HEAD.pack(len(payload) + 1, opcode) + payload


def split_frame(raw: bytes) -> tuple[int, bytes]:
    """Inverse of :func:`frame` for exactly one complete frame."""
    if len(raw) < HEADER_BYTES:
        raise ProtocolError("truncated frame header")
    length, opcode = _HEAD.unpack_from(raw)
    if length < 1 or length > MAX_FRAME:
        raise ProtocolError(f"bad frame length {length}")
    if len(raw) != 4 + length:
        raise ProtocolError(f"frame length {length} but {len(raw) - 4} bytes present")
    return opcode, bytes(raw[HEADER_BYTES:])


def encode_request(req: PartitionRequest) -> bytes:
    if not 0 <= req.level <= 255:
        raise ValueError("level must fit one byte")
    return b"".join([
        _REQ_HEAD.pack(req.level, req.m, req.query.size),
        req.query.tobytes(),
        _U32.pack(req.pids.size),
        req.pids.tobytes(),
    ])


def decode_request(payload: bytes) -> PartitionRequest:
    if len(payload) < _REQ_HEAD.size:
        raise FormatError("request header truncated", len(payload))
    level, m, dim = _REQ_HEAD.unpack_from(payload)
    off = _REQ_HEAD.size
    end = off + 4 * dim
    if len(payload) < end + 4:
        raise FormatError(f"request declares dim {dim} but is truncated", len(payload))
    query = np.frombuffer(payload, "<f4", dim, off)
    (count,) = _U32.unpack_from(payload, end)
    off = end + 4
    if len(payload) != off + 8 * count:
        raise FormatError(f"request declares {count} pids but carries {len(payload) - off} bytes", off)
    pids = np.frombuffer(payload, "<u8", count, off)
    return PartitionRequest(level, m, query.copy(), pids.copy())


def encode_response(resp: PartitionResponse) -> bytes:
    rec = np.empty(len(resp), dtype=_CAND)
    rec["id"] = resp.ids
    rec["distance"] = resp.distances
    return _U32.pack(len(resp)) + rec.tobytes()


def decode_response(payload: bytes) -> PartitionResponse:
    if len(payload) < 4:
        raise FormatError("response header truncated", len(payload))
    (count,) = _U32.unpack_from(payload)
    if len(payload) != response_payload_size(count):
        raise FormatError(f"response declares {count} candidates but carries {len(payload) - 4} bytes", 4)
    rec = np.frombuffer(payload, _CAND, count, 4)
    return PartitionResponse(rec["id"].copy(), rec["distance"].copy())


def encode_error(err: ErrorReply) -> bytes:
    return _ERR.pack(err.code, err.pid) + err.message.encode("utf-8")


def decode_error(payload: bytes) -> ErrorReply:
    if len(payload) < _ERR.size:
        raise FormatError("error payload truncated", len(payload))
    code, pid = _ERR.unpack_from(payload)
    return ErrorReply(code, pid, payload[_ERR.size:].decode("utf-8", "replace"))


def encode_stats(stats: StoreStats) -> bytes:
    return _STATS.pack(stats.requests, stats.partitions_read, stats.bytes_out)


def decode_stats(payload: bytes) -> StoreStats:
    if len(payload) != _STATS.size:
        raise FormatError(f"stats payload must be {_STATS.size} bytes", len(payload))
    return StoreStats(*_STATS.unpack(payload))


_ENCODERS = {
    GET_PARTITION_RESULT: encode_request,
    PARTITION_RESULT: encode_response,
    STATS_RESULT: encode_stats,
    ERROR: encode_error,
}
_DECODERS = {
    GET_PARTITION_RESULT: decode_request,
    PARTITION_RESULT: decode_response,
    STATS_RESULT: decode_stats,
    ERROR: decode_error,
}


def encode_message(opcode: int, message=None) -> bytes:
    """Full frame for ``message``; PING/PONG take raw bytes, STATS nothing."""
    if opcode in _ENCODERS:
        return frame(opcode, _ENCODERS[opcode](message))
    if opcode in (PING, PONG):
        return frame(opcode, bytes(message or b""))
    if opcode == STATS:
        return frame(opcode)
    raise ProtocolError(f"unknown opcode 0x{opcode:02x}")


def decode_message(raw: bytes):
    """Decode one complete frame into ``(opcode, message)``."""
    opcode, payload = split_frame(raw)
    return opcode, decode_payload(opcode, payload)


def decode_payload(opcode: int, payload: bytes):
    if opcode in _DECODERS:
        return _DECODERS[opcode](payload)
    if opcode in (PING, PONG):
        return payload
    if opcode == STATS:
        if payload:
            raise FormatError("STATS carries no payload", 0)
        return None
    raise ProtocolError(f"unknown opcode 0x{opcode:02x}")


async def read_frame(reader: asyncio.StreamReader) -> tuple[int, bytes] | None:
    """Next ``(opcode, payload)`` from the stream, or None on clean EOF."""
    try:
        head = await reader.readexactly(HEADER_BYTES)
    except asyncio.IncompleteReadError as exc:
        if not exc.partial:
            return None
        raise ProtocolError("connection closed inside a frame header") from None
    length, opcode = _HEAD.unpack(head)
    if length < 1 or length > MAX_FRAME:
        raise ProtocolError(f"bad frame length {length}")
    try:
        payload = await reader.readexactly(length - 1)
    except asyncio.IncompleteReadError:
        raise ProtocolError("connection closed inside a frame") from None
    return opcode, payload
