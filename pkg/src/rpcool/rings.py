"""Multi-producer/multi-consumer RPC message ring in shared memory.

Claim and dispatch are serialized by a process-shared mutex embedded in
the ring header; response publication is a plain in-place store of the
status word, which producers poll.  Store ordering relies on the
x86-64 total-store-order this package targets (the mutex provides full
barriers around claim/dispatch either way).

Ring layout (documented in docs/ring-layout.md):

  0    40  process-shared mutex
  40   4   capacity (slots)
  44   4   slot size (64)
  48   8   tail: next sequence number to claim
  56   8   head: next sequence number to dispatch
  64   ..  capacity x 64-byte slots; slot index = seq % capacity

Slot: seq u64 | function u32 | flags u32 | arg u64 | scope start u64 |
scope len u64 | seal index u32 | status u32 | seal epoch u64 | ret u64.

A slot cycles EMPTY -> READY -> IN_PROGRESS -> COMPLETE/ERROR -> EMPTY;
the producer that claimed it is the one that returns it to EMPTY, which
gives back-pressure when the ring is full.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .errors import TransportError
from .heap import SharedHeap
from .lowlevel import SharedMutex

SLOT_SIZE = 64
HEADER_SIZE = 64

FLAG_SEALED = 1
FLAG_SANDBOX = 2

ST_EMPTY = 0
ST_READY = 2
ST_IN_PROGRESS = 3
ST_COMPLETE = 4
ST_ERROR_BASE = 0x100  # ST_ERROR_BASE | code

_RING_HDR = struct.Struct("<II QQ")  # capacity, slot size, tail, head (at offset 40)
_SLOT = struct.Struct("<QIIQQQIIQQ")
assert _SLOT.size == 64
_STATUS = struct.Struct("<I")
_STATUS_OFF = 44
_RET_OFF = 48


def error_status(code: int) -> int:
    return ST_ERROR_BASE | code


def is_error(status: int) -> bool:
    return status >= ST_ERROR_BASE


def error_code(status: int) -> int:
    return status & ~ST_ERROR_BASE


@dataclass
class RpcMessage:
    function_id: int
    flags: int = 0
    arg_addr: int = 0
    scope_start: int = 0
    scope_len: int = 0
    seal_index: int = 0
    seal_epoch: int = 0

    @property
    def sealed(self) -> bool:
        return bool(self.flags & FLAG_SEALED)

    @property
    def sandbox_required(self) -> bool:
        return bool(self.flags & FLAG_SANDBOX)


@dataclass
class ReceivedMessage:
    seq: int
    function_id: int
    flags: int
    arg_addr: int
    scope_start: int
    scope_len: int
    seal_index: int
    seal_epoch: int

    @property
    def sealed(self) -> bool:
        return bool(self.flags & FLAG_SEALED)

    @property
    def sandbox_required(self) -> bool:
        return bool(self.flags & FLAG_SANDBOX)


class MessageRing:
    def __init__(self, mv: memoryview, base_addr: int, offset: int):
        self.mv = mv
        self.addr = base_addr + offset
        self.off = offset
        capacity, slot_size, _, _ = _RING_HDR.unpack_from(mv, offset + 40)
        if slot_size != SLOT_SIZE or capacity == 0:
            raise TransportError("bad ring header")
        self.capacity = capacity
        self.mutex = SharedMutex(self.addr)

    # -- construction ----------------------------------------------------------

    @classmethod
    def create(cls, heap: SharedHeap, capacity: int) -> "MessageRing":
        size = HEADER_SIZE + capacity * SLOT_SIZE
        addr = heap.allocate(size, align=4096)
        off = addr - heap.base
        mv = heap.mv
        mv[off : off + size] = b"\0" * size
        _RING_HDR.pack_into(mv, off + 40, capacity, SLOT_SIZE, 0, 0)
        SharedMutex(addr).init()
        return cls(mv, heap.base, off)

    @classmethod
    def attach(cls, heap: SharedHeap, addr: int) -> "MessageRing":
        return cls(heap.mv, heap.base, addr - heap.base)

    # -- low-level header/slot access -------------------------------------------

    def _tail(self) -> int:
        return struct.unpack_from("<Q", self.mv, self.off + 48)[0]

    def _set_tail(self, v: int) -> None:
        struct.pack_into("<Q", self.mv, self.off + 48, v)

    def _head(self) -> int:
        return struct.unpack_from("<Q", self.mv, self.off + 56)[0]

    def _set_head(self, v: int) -> None:
        struct.pack_into("<Q", self.mv, self.off + 56, v)

    def _slot_off(self, seq: int) -> int:
        return self.off + HEADER_SIZE + (seq % self.capacity) * SLOT_SIZE

    def _slot_status(self, seq: int) -> int:
        return _STATUS.unpack_from(self.mv, self._slot_off(seq) + _STATUS_OFF)[0]

    def _set_slot_status(self, seq: int, status: int) -> None:
        _STATUS.pack_into(self.mv, self._slot_off(seq) + _STATUS_OFF, status)

    # -- producer side --------------------------------------------------------------

    def try_submit(self, msg: RpcMessage) -> int | None:
        """Claim the next slot and publish the message; None when the ring is full."""
        with self.mutex:
            seq = self._tail()
            slot = self._slot_off(seq)
            if _STATUS.unpack_from(self.mv, slot + _STATUS_OFF)[0] != ST_EMPTY:
                return None
            _SLOT.pack_into(
                self.mv,
                slot,
                seq,
                msg.function_id,
                msg.flags,
                msg.arg_addr,
                msg.scope_start,
                msg.scope_len,
                msg.seal_index,
                ST_READY,
                msg.seal_epoch,
                0,
            )
            self._set_tail(seq + 1)
            return seq

    def response_status(self, seq: int) -> tuple[int, int] | None:
        """(status, ret_addr) once terminal, else None. Wait-free poll."""
        slot = self._slot_off(seq)
        status = _STATUS.unpack_from(self.mv, slot + _STATUS_OFF)[0]
        if status == ST_COMPLETE or is_error(status):
            ret = struct.unpack_from("<Q", self.mv, slot + _RET_OFF)[0]
            return status, ret
        return None

    def release_slot(self, seq: int) -> None:
        """Producer hands the slot back after consuming the response."""
        self._set_slot_status(seq, ST_EMPTY)

    # -- consumer side ------------------------------------------------------------------

    def try_consume(self) -> ReceivedMessage | None:
        """Dispatch the oldest READY message, in sequence order."""
        with self.mutex:
            head = self._head()
            slot = self._slot_off(head)
            fields = _SLOT.unpack_from(self.mv, slot)
            if fields[7] != ST_READY:
                return None
            _STATUS.pack_into(self.mv, slot + _STATUS_OFF, ST_IN_PROGRESS)
            self._set_head(head + 1)
        seq, func, flags, arg, s_start, s_len, s_idx, _, epoch, _ = fields
        return ReceivedMessage(seq, func, flags, arg, s_start, s_len, s_idx, epoch)

    def respond(self, seq: int, status: int, ret_addr: int = 0) -> None:
        """Publish the terminal status; ret address is stored first."""
        if status != ST_COMPLETE and not is_error(status):
            raise TransportError(f"not a terminal status: {status}")
        slot = self._slot_off(seq)
        current = _STATUS.unpack_from(self.mv, slot + _STATUS_OFF)[0]
        if current != ST_IN_PROGRESS:
            raise TransportError(f"slot {seq} is not in progress (status {current})")
        struct.pack_into("<Q", self.mv, slot + _RET_OFF, ret_addr)
        _STATUS.pack_into(self.mv, slot + _STATUS_OFF, status)

    def pending(self) -> bool:
        return self._slot_status(self._head()) == ST_READY
