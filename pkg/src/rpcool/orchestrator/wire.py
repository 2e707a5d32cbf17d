"""Binary wire protocol between node runtimes and the orchestrator.

Framing: u32 little-endian payload length, u16 message type, then the
payload as fixed-order fields.  Integers are little-endian; strings are a
u16 byte length followed by UTF-8 bytes.  Every request begins with a u64
correlation id that the reply echoes.  NOTIFY frames are pushed
server-to-client with correlation id 0.

Field order per message type is documented in docs/wire-orchestrator.md
and is the interoperability contract.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass

from ..errors import WireError

MSG_REGISTER_CHANNEL = 1
MSG_LOOKUP_CHANNEL = 2
MSG_ALLOC_HEAP = 3
MSG_RELEASE_HEAP = 4
MSG_RENEW_LEASE = 5
MSG_NOTIFY = 6
MSG_QUOTA_QUERY = 7
MSG_CLOSE_CHANNEL = 8

NOTIFY_HOLDER_FAILED = 1
NOTIFY_HEAP_RECLAIMED = 2
NOTIFY_CHANNEL_CLOSED = 3

_LEN = struct.Struct("<I")
_TYPE = struct.Struct("<H")

MAX_FRAME = 1 << 20


@dataclass(frozen=True)
class HolderId:
    """Process identity: a restarted process is a distinct holder."""

    node: int
    pid: int
    incarnation: int

    def key(self) -> tuple[int, int, int]:
        return (self.node, self.pid, self.incarnation)

    def __str__(self) -> str:
        return f"{self.node:x}.{self.pid}.{self.incarnation:x}"


class Writer:
    __slots__ = ("_parts",)

    def __init__(self):
        self._parts: list[bytes] = []

    def u8(self, v: int) -> "Writer":
        self._parts.append(struct.pack("<B", v))
        return self

    def u16(self, v: int) -> "Writer":
        self._parts.append(struct.pack("<H", v))
        return self

    def u32(self, v: int) -> "Writer":
        self._parts.append(struct.pack("<I", v))
        return self

    def u64(self, v: int) -> "Writer":
        self._parts.append(struct.pack("<Q", v))
        return self

    def string(self, s: str) -> "Writer":
        b = s.encode("utf-8")
        if len(b) > 0xFFFF:
            raise WireError("string field too long")
        self._parts.append(struct.pack("<H", len(b)) + b)
        return self

    def holder(self, h: HolderId) -> "Writer":
        return self.u64(h.node).u64(h.pid).u64(h.incarnation)

    def raw(self, b: bytes) -> "Writer":
        self._parts.append(b)
        return self

    def payload(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    __slots__ = ("_buf", "_off")

    def __init__(self, buf: bytes):
        self._buf = buf
        self._off = 0

    def _take(self, n: int) -> bytes:
        if self._off + n > len(self._buf):
            raise WireError("truncated frame")
        b = self._buf[self._off : self._off + n]
        self._off += n
        return b

    def u8(self) -> int:
        return self._take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def string(self) -> str:
        n = self.u16()
        return self._take(n).decode("utf-8")

    def holder(self) -> HolderId:
        return HolderId(self.u64(), self.u64(), self.u64())

    def remaining(self) -> int:
        return len(self._buf) - self._off


def send_frame(sock: socket.socket, msg_type: int, payload: bytes) -> None:
    frame = _LEN.pack(len(payload) + 2) + _TYPE.pack(msg_type) + payload
    sock.sendall(frame)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        b = sock.recv(n)
        if not b:
            raise ConnectionError("peer closed")
        chunks.append(b)
        n -= len(b)
    return b"".join(chunks)


def recv_frame(sock: socket.socket) -> tuple[int, bytes]:
    header = _recv_exact(sock, 4)
    (length,) = _LEN.unpack(header)
    if length < 2 or length > MAX_FRAME:
        raise WireError(f"bad frame length {length}")
    body = _recv_exact(sock, length)
    (msg_type,) = _TYPE.unpack(body[:2])
    return msg_type, body[2:]


# -- shared sub-structures ---------------------------------------------------


@dataclass(frozen=True)
class HeapInfo:
    heap_id: int
    base: int
    size: int
    backing: str


@dataclass(frozen=True)
class LeaseInfo:
    lease_id: int
    expiry_ns: int
    renew_period_ns: int


def put_heap(w: Writer, h: HeapInfo) -> None:
    w.u64(h.heap_id).u64(h.base).u64(h.size).string(h.backing)


def get_heap(r: Reader) -> HeapInfo:
    return HeapInfo(r.u64(), r.u64(), r.u64(), r.string())


def put_lease(w: Writer, l: LeaseInfo) -> None:
    w.u64(l.lease_id).u64(l.expiry_ns).u64(l.renew_period_ns)


def get_lease(r: Reader) -> LeaseInfo:
    return LeaseInfo(r.u64(), r.u64(), r.u64())
