"""Anti-concurrent-modification seals.

A sender seals the page range holding an RPC's arguments: the privileged
runtime writes a descriptor into a sender-read-only ring and drops the
sender's write permission on those pages.  The receiver verifies the
descriptor before trusting the arguments and marks it complete when done;
only then will the runtime release the seal and restore write access.
Epoch counters disambiguate descriptor-slot reuse.

Descriptor ring layout (documented in docs/ring-layout.md):

  0   8   magic "RPCOOLSR"
  8   4   capacity u32
  12  4   reserved
  16  ..  capacity x 32-byte slots:
          start u64 | len u64 | state u8 | pad[7] | epoch u64

The ring pages are mapped read-only in the sender's process; descriptor
writes there go through the privileged runtime, standing in for the
kernel of a real deployment.  The receiver's process maps them
read-write.  When both roles live in one test process, the receiver-side
writes use the privileged path too, since the restriction is per-process.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass

from .errors import (
    MemoryFault,
    SealError,
    SealNotComplete,
    SealRingFull,
    SealRoleError,
    SealStateError,
)
from .heap import SCOPE_ACTIVE, SCOPE_SEALED, Scope, SharedHeap
from .lowlevel import PAGE_SIZE, PROT_READ, PROT_RW, page_align_up

RING_MAGIC = b"RPCOOLSR"
RING_HEADER = 16
SLOT_SIZE = 32

SEAL_EMPTY = 0
SEAL_SEALED = 1
SEAL_COMPLETED = 2
SEAL_RELEASED = 3

_RING_HDR = struct.Struct("<8sI4x")
_SLOT = struct.Struct("<QQB7xQ")
assert _SLOT.size == SLOT_SIZE

ROLE_SENDER = "sender"
ROLE_RECEIVER = "receiver"


@dataclass(frozen=True)
class SealTicket:
    index: int
    epoch: int
    start: int
    length: int


class SealManager:
    """One side's view of a connection's descriptor ring."""

    def __init__(self, heap: SharedHeap, ring_addr: int, role: str):
        self.heap = heap
        self.runtime = heap.runtime
        self.role = role
        self.ring_addr = ring_addr
        off = ring_addr - heap.base
        magic, capacity = _RING_HDR.unpack_from(heap.mv, off)
        if magic != RING_MAGIC or capacity == 0:
            raise SealError("bad descriptor ring header")
        self.capacity = capacity
        self.ring_bytes = page_align_up(RING_HEADER + capacity * SLOT_SIZE)
        self._off = off
        self._lock = threading.Lock()
        self._hint = 0
        # sender-side bookkeeping of live seals, for overlap checks and unmap guard
        self._active: dict[int, SealTicket] = {}
        self._scopes: dict[int, Scope] = {}
        self.on_descriptor = None  # fallback hook: ships descriptor images to the peer
        if role == ROLE_SENDER:
            self.runtime.add_seal_guard(self._guards_heap)

    # -- construction ------------------------------------------------------------

    @classmethod
    def create(cls, heap: SharedHeap, capacity: int, role: str) -> "SealManager":
        """Allocate and initialize the ring; the sender side then loses write
        access to it for the life of the connection."""
        size = page_align_up(RING_HEADER + capacity * SLOT_SIZE)
        addr = heap.allocate(size, align=PAGE_SIZE)
        off = addr - heap.base
        heap.mv[off : off + size] = b"\0" * size
        _RING_HDR.pack_into(heap.mv, off, RING_MAGIC, capacity)
        mgr = cls(heap, addr, role)
        if role == ROLE_SENDER:
            mgr._restrict_ring()
        return mgr

    @classmethod
    def attach(cls, heap: SharedHeap, ring_addr: int, role: str) -> "SealManager":
        mgr = cls(heap, ring_addr, role)
        if role == ROLE_SENDER and not mgr._ring_restricted():
            mgr._restrict_ring()
        return mgr

    def _restrict_ring(self) -> None:
        self.runtime.set_range_permission(
            self.heap.mapped.heap_id, self.ring_addr, self.ring_bytes, PROT_READ
        )

    def _ring_restricted(self) -> bool:
        return self.runtime.space.protection_of(self.ring_addr) != PROT_RW

    def _guards_heap(self, heap_id: int) -> bool:
        return heap_id == self.heap.mapped.heap_id and bool(self._active)

    # -- slot access ------------------------------------------------------------------

    def _slot(self, index: int) -> tuple[int, int, int, int]:
        if not 0 <= index < self.capacity:
            raise SealError(f"descriptor index {index} out of range")
        start, length, state, epoch = _SLOT.unpack_from(
            self.heap.mv, self._off + RING_HEADER + index * SLOT_SIZE
        )
        return start, length, state, epoch

    def _write_slot(self, index: int, start: int, length: int, state: int, epoch: int) -> None:
        """Privileged descriptor write (the 'kernel' side of the emulation)."""
        data = _SLOT.pack(start, length, state, epoch)
        addr = self.ring_addr + RING_HEADER + index * SLOT_SIZE
        try:
            self.runtime.space.write(addr, data)
        except MemoryFault:
            self.runtime.privileged_write(addr, data)

    def _write_slot_state(self, index: int, state: int) -> None:
        addr = self.ring_addr + RING_HEADER + index * SLOT_SIZE + 16
        data = bytes([state])
        try:
            self.runtime.space.write(addr, data)
        except MemoryFault:
            self.runtime.privileged_write(addr, data)

    # -- sender operations ----------------------------------------------------------------

    def seal(self, start: int, length: int, scope: Scope | None = None) -> SealTicket:
        """Seal whole pages of the connection heap; returns the descriptor ticket."""
        if self.role != ROLE_SENDER:
            raise SealRoleError("only the sender side seals")
        if length <= 0:
            raise SealError("cannot seal an empty range")
        if start % PAGE_SIZE or length % PAGE_SIZE:
            raise SealError("sealed range must be whole pages")
        if not self.heap.mapped.contains(start, length):
            raise SealError("range is outside the connection heap")
        with self._lock:
            for t in self._active.values():
                if start < t.start + t.length and t.start < start + length:
                    raise SealError(
                        f"range overlaps active seal [{t.start:#x},+{t.length:#x})"
                    )
            index = -1
            for step in range(self.capacity):
                i = (self._hint + step) % self.capacity
                _, _, state, _ = self._slot(i)
                if state in (SEAL_EMPTY, SEAL_RELEASED):
                    index = i
                    break
            if index < 0:
                raise SealRingFull(f"all {self.capacity} descriptors in use")
            self._hint = (index + 1) % self.capacity
            _, _, _, prev_epoch = self._slot(index)
            epoch = prev_epoch + 1
            # descriptor first, then the permission drop (verification must
            # never observe sealed pages without a descriptor)
            self._write_slot(index, start, length, SEAL_SEALED, epoch)
            self.runtime.set_range_permission(
                self.heap.mapped.heap_id, start, length, PROT_READ
            )
            ticket = SealTicket(index, epoch, start, length)
            self._active[index] = ticket
            if scope is not None:
                self.heap._scope_set_state(scope, SCOPE_SEALED, ticket.epoch)
                self._scopes[index] = scope
            if self.on_descriptor is not None:
                self.on_descriptor(index, start, length, SEAL_SEALED, epoch)
            return ticket

    def seal_scope(self, scope: Scope) -> SealTicket:
        return self.seal(scope.start, scope.length, scope=scope)

    def release(self, ticket: SealTicket) -> None:
        """Restore write access; refused until the receiver marked completion."""
        if self.role != ROLE_SENDER:
            raise SealRoleError("only the sender side releases")
        with self._lock:
            self._release_locked(ticket)

    def _release_locked(self, ticket: SealTicket) -> None:
        start, length, state, epoch = self._slot(ticket.index)
        if epoch != ticket.epoch or (start, length) != (ticket.start, ticket.length):
            raise SealStateError("descriptor no longer matches this ticket")
        if state == SEAL_SEALED:
            raise SealNotComplete(
                "receiver has not marked the RPC complete; pages stay read-only"
            )
        if state != SEAL_COMPLETED:
            raise SealStateError(f"descriptor in state {state}, not releasable")
        self.runtime.set_range_permission(
            self.heap.mapped.heap_id, start, length, PROT_RW
        )
        self._write_slot_state(ticket.index, SEAL_RELEASED)
        self._active.pop(ticket.index, None)
        scope = self._scopes.pop(ticket.index, None)
        if scope is not None:
            self.heap._scope_set_state(scope, SCOPE_ACTIVE)
        if self.on_descriptor is not None:
            self.on_descriptor(ticket.index, start, length, SEAL_RELEASED, epoch)

    def active_count(self) -> int:
        return len(self._active)

    # -- receiver operations -----------------------------------------------------------------

    def is_sealed(self, index: int, epoch: int, expected_start: int, expected_len: int) -> bool:
        """Pure read: descriptor is sealed, matches the epoch, and covers the range."""
        try:
            start, length, state, slot_epoch = self._slot(index)
        except SealError:
            return False
        return (
            state == SEAL_SEALED
            and slot_epoch == epoch
            and start <= expected_start
            and expected_start + expected_len <= start + length
        )

    def mark_complete(self, index: int, epoch: int | None = None) -> None:
        if self.role != ROLE_RECEIVER:
            raise SealRoleError("only the receiver marks completion")
        with self._lock:
            start, length, state, slot_epoch = self._slot(index)
            if epoch is not None and slot_epoch != epoch:
                raise SealStateError("descriptor epoch changed; stale index")
            if state != SEAL_SEALED:
                raise SealStateError(f"descriptor in state {state}, cannot complete")
            self._write_slot_state(index, SEAL_COMPLETED)
            if self.on_descriptor is not None:
                self.on_descriptor(index, start, length, SEAL_COMPLETED, slot_epoch)

    # -- batched release ------------------------------------------------------------------------

    def release_batch(self, tickets: list[SealTicket]) -> tuple[list[SealTicket], list[SealTicket]]:
        """Release every completed ticket in one privileged pass.

        Returns (released, skipped); skipped tickets were not yet completed.
        Contiguous sealed ranges are merged so the permission sweep touches
        each run of pages once.
        """
        if self.role != ROLE_SENDER:
            raise SealRoleError("only the sender side releases")
        with self._lock:
            ready: list[SealTicket] = []
            skipped: list[SealTicket] = []
            for t in tickets:
                start, length, state, epoch = self._slot(t.index)
                if epoch == t.epoch and state == SEAL_COMPLETED:
                    ready.append(t)
                else:
                    skipped.append(t)
            if not ready:
                return [], skipped
            # one sweep over the union of pages
            runs: list[tuple[int, int]] = []
            for t in sorted(ready, key=lambda t: t.start):
                if runs and runs[-1][0] + runs[-1][1] == t.start:
                    runs[-1] = (runs[-1][0], runs[-1][1] + t.length)
                else:
                    runs.append((t.start, t.length))
            for start, length in runs:
                self.runtime.set_range_permission(
                    self.heap.mapped.heap_id, start, length, PROT_RW
                )
            for t in ready:
                self._write_slot_state(t.index, SEAL_RELEASED)
                self._active.pop(t.index, None)
                scope = self._scopes.pop(t.index, None)
                if scope is not None:
                    self.heap._scope_set_state(scope, SCOPE_ACTIVE)
                if self.on_descriptor is not None:
                    self.on_descriptor(t.index, t.start, t.length, SEAL_RELEASED, t.epoch)
            return ready, skipped


class ScopePool:
    """Pre-created same-size scopes whose seal releases are batched.

    pop a scope, build the RPC arguments inside it, seal and send; once the
    RPC returns, hand the scope back with its ticket.  When the pending
    count reaches the threshold the whole batch is released in one
    privileged pass and the scopes are reset for reuse.
    """

    def __init__(
        self,
        heap: SharedHeap,
        manager: SealManager,
        scope_size: int,
        count: int = 0,
        threshold: int = 1024,
    ):
        if threshold <= 0:
            raise ValueError("threshold must be positive")
        self.heap = heap
        self.manager = manager
        self.scope_size = scope_size
        self.threshold = threshold
        self._free: list[Scope] = [heap.create_scope(scope_size) for _ in range(count)]
        self._pending: list[tuple[Scope, SealTicket]] = []
        self._lock = threading.Lock()

    def acquire(self) -> Scope:
        with self._lock:
            if self._free:
                return self._free.pop()
        return self.heap.create_scope(self.scope_size)

    def give_back(self, scope: Scope) -> None:
        scope.reset()
        with self._lock:
            self._free.append(scope)

    def release_later(self, scope: Scope, ticket: SealTicket) -> int | None:
        """Queue a completed seal for batched release; flushes at the threshold."""
        with self._lock:
            self._pending.append((scope, ticket))
            if len(self._pending) >= self.threshold:
                return self._flush_locked()
        return None

    def flush(self) -> int:
        with self._lock:
            return self._flush_locked()

    def _flush_locked(self) -> int:
        if not self._pending:
            return 0
        tickets = [t for _, t in self._pending]
        by_ticket = {t: s for s, t in self._pending}
        released, skipped = self.manager.release_batch(tickets)
        for t in released:
            scope = by_ticket[t]
            scope.reset()
            self._free.append(scope)
        self._pending = [(by_ticket[t], t) for t in skipped]
        return len(released)

    @property
    def pending_count(self) -> int:
        return len(self._pending)
