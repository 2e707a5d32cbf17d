"""Global orchestrator: channel registry, heap address pool, leases, quotas.

The core keeps all state in memory behind one lock (mutations are
serialized per resource trivially) with an optional append-only journal.
A thin TCP layer in `server.py` exposes it over the wire protocol and
pushes failure notifications to connected runtimes.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field

from ..config import OrchestratorConfig
from ..errors import (
    AccessDenied,
    DuplicateName,
    LeaseExpired,
    MalformedName,
    OrchestratorError,
    PoolExhausted,
    QuotaExceeded,
    RpcoolError,
    Status,
    UnknownChannel,
    UnknownLease,
)
from ..lowlevel import PAGE_SIZE, page_align_up
from .wire import (
    NOTIFY_CHANNEL_CLOSED,
    NOTIFY_HEAP_RECLAIMED,
    NOTIFY_HOLDER_FAILED,
    HeapInfo,
    HolderId,
    LeaseInfo,
)

HEAP_MODE_PRIVATE = 0
HEAP_MODE_SHARED = 1


class UnknownHeap(OrchestratorError):
    def __init__(self, heap_id: int):
        super().__init__(Status.UNKNOWN_HEAP, f"unknown heap {heap_id}")


@dataclass
class Lease:
    """Right to keep a heap mapped.

    `renew_period` is the amount a renewal extends the expiry by; runtimes
    renew at a faster cadence (a third of it by default), so expiry means
    several renewals in a row were missed.
    """

    lease_id: int
    heap_id: int
    holder: HolderId
    expiry: float
    renew_period: float


@dataclass
class HeapState:
    info: HeapInfo
    channel_id: int
    leases: dict[tuple, Lease] = field(default_factory=dict)  # holder key -> lease


@dataclass
class ChannelRecord:
    name: str
    channel_id: int
    heap_mode: int
    server_holder: HolderId
    heap_ids: list[int]
    fallback_endpoint: str = ""
    acl: frozenset[int] = frozenset()  # allowed node ids; empty = open
    closed: bool = False


@dataclass
class QuotaEntry:
    quota_bytes: int
    mapped_bytes: int = 0


@dataclass(frozen=True)
class FailureNotification:
    kind: int
    heap_id: int
    channel_id: int
    failed_holder: HolderId
    recipient: HolderId


class _AddressPool:
    """First-fit allocator over the configured pool address range."""

    def __init__(self, base: int, span: int):
        self._free: list[tuple[int, int]] = [(base, span)]  # sorted (start, size)

    def allocate(self, size: int) -> int:
        for i, (start, avail) in enumerate(self._free):
            if avail >= size:
                if avail == size:
                    del self._free[i]
                else:
                    self._free[i] = (start + size, avail - size)
                return start
        raise PoolExhausted(size)

    def free(self, start: int, size: int) -> None:
        entry = (start, size)
        lo, hi = 0, len(self._free)
        while lo < hi:
            mid = (lo + hi) // 2
            if self._free[mid][0] < start:
                lo = mid + 1
            else:
                hi = mid
        self._free.insert(lo, entry)
        # coalesce neighbours
        i = max(lo - 1, 0)
        while i < len(self._free) - 1:
            s0, z0 = self._free[i]
            s1, z1 = self._free[i + 1]
            if s0 + z0 == s1:
                self._free[i : i + 2] = [(s0, z0 + z1)]
            elif i >= lo:
                break
            else:
                i += 1


def validate_channel_name(name: str) -> None:
    if not name.startswith("/") or name != name.rstrip():
        raise MalformedName(name)
    segments = name.split("/")[1:]
    if not segments or any(not s or "/" in s for s in segments):
        raise MalformedName(name)


class OrchestratorCore:
    """All registry state and the lease/quota rules, independent of sockets."""

    def __init__(self, config: OrchestratorConfig | None = None, clock=time.time):
        self.config = config or OrchestratorConfig()
        self.clock = clock
        self._lock = threading.RLock()
        self._pool = _AddressPool(self.config.pool_base, self.config.pool_span)
        self._channels: dict[str, ChannelRecord] = {}
        self._channels_by_id: dict[int, ChannelRecord] = {}
        self._heaps: dict[int, HeapState] = {}
        self._leases: dict[int, Lease] = {}
        self._quota: dict[tuple, QuotaEntry] = {}
        self._next_channel_id = 1
        self._next_heap_id = 1
        self._next_lease_id = 1
        self._journal = open(self.config.journal_path, "a") if self.config.journal_path else None

    # -- journal ------------------------------------------------------------

    def _log(self, event: str, **kv) -> None:
        if self._journal is not None:
            kv["event"] = event
            kv["t"] = self.clock()
            self._journal.write(json.dumps(kv, default=str) + "\n")
            self._journal.flush()

    # -- quota ledger ---------------------------------------------------------

    def _ledger(self, holder: HolderId) -> QuotaEntry:
        key = holder.key()
        entry = self._quota.get(key)
        if entry is None:
            quota = self.config.holder_quotas.get(str(holder), self.config.default_quota)
            entry = self._quota[key] = QuotaEntry(quota_bytes=quota)
        return entry

    def check_quota(self, holder: HolderId, additional: int) -> tuple[bool, int, int]:
        """allow iff mapped + additional stays within the holder's quota."""
        with self._lock:
            entry = self._ledger(holder)
            ok = entry.mapped_bytes + additional <= entry.quota_bytes
            return ok, entry.mapped_bytes, entry.quota_bytes

    def _charge(self, holder: HolderId, size: int) -> None:
        entry = self._ledger(holder)
        if entry.mapped_bytes + size > entry.quota_bytes:
            raise QuotaExceeded(entry.mapped_bytes, entry.quota_bytes)
        entry.mapped_bytes += size

    def _refund(self, holder: HolderId, size: int) -> None:
        entry = self._ledger(holder)
        entry.mapped_bytes = max(0, entry.mapped_bytes - size)

    # -- heaps and leases -----------------------------------------------------

    def _new_lease(self, heap: HeapState, holder: HolderId) -> Lease:
        existing = heap.leases.get(holder.key())
        if existing is not None:
            existing.expiry = self.clock() + existing.renew_period
            return existing
        ttl = self.config.lease_ttl
        lease = Lease(self._next_lease_id, heap.info.heap_id, holder, self.clock() + ttl, ttl)
        self._next_lease_id += 1
        heap.leases[holder.key()] = lease
        self._leases[lease.lease_id] = lease
        return lease

    def _alloc_heap(self, channel_id: int, size: int, holder: HolderId) -> tuple[HeapInfo, Lease]:
        if size <= 0:
            raise OrchestratorError(Status.BAD_REQUEST, "heap size must be positive")
        size = page_align_up(size)
        self._charge(holder, size)
        try:
            base = self._pool.allocate(size)
        except PoolExhausted:
            self._refund(holder, size)
            raise
        heap_id = self._next_heap_id
        self._next_heap_id += 1
        info = HeapInfo(heap_id, base, size, f"heap-{heap_id}")
        state = HeapState(info, channel_id)
        self._heaps[heap_id] = state
        lease = self._new_lease(state, holder)
        self._log("alloc_heap", heap=heap_id, base=hex(base), size=size, holder=str(holder))
        return info, lease

    def allocate_heap(
        self, holder: HolderId, channel_id: int, size: int, attach_heap_id: int = 0
    ) -> tuple[HeapInfo, Lease]:
        """Allocate a new heap, or attach to an existing one when attach_heap_id != 0."""
        with self._lock:
            if attach_heap_id:
                heap = self._heaps.get(attach_heap_id)
                if heap is None:
                    raise UnknownHeap(attach_heap_id)
                if holder.key() not in heap.leases:
                    self._charge(holder, heap.info.size)
                lease = self._new_lease(heap, holder)
                return heap.info, lease
            rec = self._channels_by_id.get(channel_id)
            if channel_id and rec is None:
                raise OrchestratorError(Status.UNKNOWN_CHANNEL, f"unknown channel id {channel_id}")
            info, lease = self._alloc_heap(channel_id, size, holder)
            if rec is not None:
                rec.heap_ids.append(info.heap_id)
            return info, lease

    def register_channel(
        self,
        holder: HolderId,
        name: str,
        heap_mode: int,
        initial_heap_size: int,
        fallback_endpoint: str = "",
        acl: frozenset[int] = frozenset(),
    ) -> tuple[ChannelRecord, HeapInfo, Lease]:
        validate_channel_name(name)
        with self._lock:
            if name in self._channels and not self._channels[name].closed:
                raise DuplicateName(name)
            channel_id = self._next_channel_id
            self._next_channel_id += 1
            info, lease = self._alloc_heap(channel_id, initial_heap_size, holder)
            rec = ChannelRecord(
                name=name,
                channel_id=channel_id,
                heap_mode=heap_mode,
                server_holder=holder,
                heap_ids=[info.heap_id],
                fallback_endpoint=fallback_endpoint,
                acl=acl,
            )
            self._channels[name] = rec
            self._channels_by_id[channel_id] = rec
            self._log("register_channel", name=name, channel=channel_id, holder=str(holder))
            return rec, info, lease

    def lookup_channel(
        self, holder: HolderId, name: str, attach: bool
    ) -> tuple[ChannelRecord, list[tuple[HeapInfo, Lease | None]]]:
        with self._lock:
            rec = self._channels.get(name)
            if rec is None or rec.closed:
                raise UnknownChannel(name)
            if rec.acl and holder.node not in rec.acl:
                raise AccessDenied(f"holder {holder} not admitted to {name}")
            out: list[tuple[HeapInfo, Lease | None]] = []
            for heap_id in rec.heap_ids:
                heap = self._heaps.get(heap_id)
                if heap is None:
                    continue
                lease = None
                if attach:
                    if holder.key() not in heap.leases:
                        self._charge(holder, heap.info.size)
                    lease = self._new_lease(heap, holder)
                out.append((heap.info, lease))
            if not out:
                raise UnknownChannel(name)
            return rec, out

    def renew_lease(self, holder: HolderId, lease_id: int) -> float:
        with self._lock:
            lease = self._leases.get(lease_id)
            if lease is None:
                raise UnknownLease(lease_id)
            if lease.expiry < self.clock():
                raise LeaseExpired(lease_id)
            lease.expiry = self.clock() + lease.renew_period
            return lease.expiry

    def release_heap(self, holder: HolderId, heap_id: int) -> list[FailureNotification]:
        """Voluntary release: drop the holder's lease, refund quota, maybe reclaim."""
        with self._lock:
            heap = self._heaps.get(heap_id)
            if heap is None:
                raise UnknownHeap(heap_id)
            lease = heap.leases.pop(holder.key(), None)
            if lease is None:
                raise UnknownLease(0)
            self._leases.pop(lease.lease_id, None)
            self._refund(holder, heap.info.size)
            self._log("release_heap", heap=heap_id, holder=str(holder))
            if not heap.leases:
                return self._reclaim(heap)
            return []

    def _reclaim(self, heap: HeapState) -> list[FailureNotification]:
        self._heaps.pop(heap.info.heap_id, None)
        self._pool.free(heap.info.base, heap.info.size)
        rec = self._channels_by_id.get(heap.channel_id)
        if rec is not None and heap.info.heap_id in rec.heap_ids:
            rec.heap_ids.remove(heap.info.heap_id)
            if not rec.heap_ids:
                rec.closed = True
                self._channels.pop(rec.name, None)
        self._log("reclaim_heap", heap=heap.info.heap_id)
        return []

    def close_channel(self, holder: HolderId, channel_id: int) -> list[FailureNotification]:
        with self._lock:
            rec = self._channels_by_id.get(channel_id)
            if rec is None:
                raise OrchestratorError(Status.UNKNOWN_CHANNEL, f"unknown channel id {channel_id}")
            notes: list[FailureNotification] = []
            if rec.server_holder.key() == holder.key():
                rec.closed = True
                self._channels.pop(rec.name, None)
                for heap_id in list(rec.heap_ids):
                    heap = self._heaps.get(heap_id)
                    if heap is None:
                        continue
                    for other in heap.leases.values():
                        if other.holder.key() != holder.key():
                            notes.append(
                                FailureNotification(
                                    NOTIFY_CHANNEL_CLOSED,
                                    heap_id,
                                    channel_id,
                                    holder,
                                    other.holder,
                                )
                            )
            for heap_id in list(rec.heap_ids):
                heap = self._heaps.get(heap_id)
                if heap is not None and holder.key() in heap.leases:
                    try:
                        self.release_heap(holder, heap_id)
                    except RpcoolError:
                        pass
            self._log("close_channel", channel=channel_id, holder=str(holder))
            return notes

    def expire_sweep(self, now: float | None = None) -> list[FailureNotification]:
        """Expire overdue leases, notify surviving co-holders, reclaim orphans."""
        if now is None:
            now = self.clock()
        with self._lock:
            notes: list[FailureNotification] = []
            expired = [l for l in self._leases.values() if l.expiry < now]
            # drop every overdue lease first so holders that died in the same
            # sweep are not treated as notification recipients
            for lease in expired:
                self._leases.pop(lease.lease_id, None)
                heap = self._heaps.get(lease.heap_id)
                if heap is None:
                    continue
                heap.leases.pop(lease.holder.key(), None)
                self._refund(lease.holder, heap.info.size)
                self._log("lease_expired", lease=lease.lease_id, holder=str(lease.holder))
            for lease in expired:
                heap = self._heaps.get(lease.heap_id)
                if heap is None:
                    continue
                for other in heap.leases.values():
                    notes.append(
                        FailureNotification(
                            NOTIFY_HOLDER_FAILED,
                            heap.info.heap_id,
                            heap.channel_id,
                            lease.holder,
                            other.holder,
                        )
                    )
                if not heap.leases:
                    self._reclaim(heap)
                    notes.append(
                        FailureNotification(
                            NOTIFY_HEAP_RECLAIMED,
                            heap.info.heap_id,
                            heap.channel_id,
                            lease.holder,
                            lease.holder,  # no recipient; kept for audit trails
                        )
                    )
        return notes

    # -- introspection helpers (tests, admin) ---------------------------------

    def live_heap_ranges(self) -> list[tuple[int, int]]:
        with self._lock:
            return [(h.info.base, h.info.size) for h in self._heaps.values()]

    def holder_mapped_bytes(self, holder: HolderId) -> int:
        with self._lock:
            return self._ledger(holder).mapped_bytes

    def lease_of(self, holder: HolderId, heap_id: int) -> Lease | None:
        with self._lock:
            heap = self._heaps.get(heap_id)
            return heap.leases.get(holder.key()) if heap else None

    def lease_info(self, lease: Lease) -> LeaseInfo:
        return LeaseInfo(
            lease.lease_id, int(lease.expiry * 1e9), int(lease.renew_period * 1e9)
        )
