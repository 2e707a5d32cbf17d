"""Trusted per-process runtime.

Emulates the privileged role a kernel would play: it is the only
component that maps or unmaps heaps (always at their orchestrator-assigned
fixed base), flips page permissions for seals and sandboxes, and mediates
every application access to shared memory through checked accessors.

Checked access beats raw pointers here for one reason: a store that the
kernel would kill the process for (SIGSEGV on a sealed page) becomes a
MemoryFault exception that the RPC layer can turn into an error response.
The underlying mprotect state is still real, and tests verify it with
kernel-mediated probes (see lowlevel.kernel_can_write).
"""

from __future__ import annotations

import bisect
import os
import random
import socket as _socket
import struct
import threading
import time
import zlib

from . import lowlevel
from .config import RuntimeConfig
from .errors import MemoryFault, RpcoolError, SandboxViolation, Status
from .lowlevel import PAGE_SIZE, PROT_NONE, PROT_READ, PROT_RW
from .orchestrator.client import Notification, OrchestratorClient
from .orchestrator.wire import HeapInfo, HolderId, LeaseInfo


def make_holder_id(node: int | None = None) -> HolderId:
    if node is None:
        node = zlib.crc32(_socket.gethostname().encode()) & 0xFFFFFFFF
    return HolderId(node, os.getpid(), random.getrandbits(48))


class Region:
    """One mapped range in this process."""

    __slots__ = (
        "base",
        "size",
        "mv",
        "kind",
        "heap_id",
        "restrictions",
        "refcount",
        "fd",
        "fault_resolver",
    )

    def __init__(self, base: int, size: int, mv: memoryview, kind: str, heap_id: int = 0, fd: int = -1):
        self.base = base
        self.size = size
        self.mv = mv
        self.kind = kind  # 'heap' | 'private' | 'arena'
        self.heap_id = heap_id
        # sorted, non-overlapping [(start, end, prot)] for pages not read-write
        self.restrictions: list[tuple[int, int, int]] = []
        self.refcount = 1
        self.fd = fd
        # fallback transport hook: called on a protection fault to migrate
        # the page in; returns True when the access should be retried
        self.fault_resolver = None

    @property
    def end(self) -> int:
        return self.base + self.size

    def intersecting(self, start: int, end: int):
        starts = [r[0] for r in self.restrictions]
        i = bisect.bisect_right(starts, start) - 1
        if i >= 0 and self.restrictions[i][1] > start:
            yield self.restrictions[i]
            i += 1
        else:
            i += 1
        while i < len(self.restrictions) and self.restrictions[i][0] < end:
            yield self.restrictions[i]
            i += 1


class _Tls(threading.local):
    sandbox = None  # set by rpcool.sandbox while a handler is confined
    privileged = 0


class AddressSpace:
    """Process-wide registry of mapped regions and their page permissions.

    Shared by every runtime object in the process (mappings are a process
    resource); all permission flips happen under one lock.
    """

    def __init__(self):
        self._lock = threading.RLock()
        self._regions: list[Region] = []  # sorted by base
        self._bases: list[int] = []
        self.tls = _Tls()
        self._last: Region | None = None

    # -- registration ---------------------------------------------------------

    def add_region(self, region: Region) -> None:
        with self._lock:
            i = bisect.bisect_left(self._bases, region.base)
            self._bases.insert(i, region.base)
            self._regions.insert(i, region)
            self._last = None

    def remove_region(self, region: Region) -> None:
        with self._lock:
            i = bisect.bisect_left(self._bases, region.base)
            if i < len(self._regions) and self._regions[i] is region:
                del self._bases[i]
                del self._regions[i]
            self._last = None

    def find(self, addr: int) -> Region | None:
        last = self._last
        if last is not None and last.base <= addr < last.end:
            return last
        with self._lock:
            i = bisect.bisect_right(self._bases, addr) - 1
            if i >= 0:
                region = self._regions[i]
                if region.base <= addr < region.end:
                    self._last = region
                    return region
        return None

    def region_for_heap(self, heap_id: int) -> Region | None:
        with self._lock:
            for region in self._regions:
                if region.kind == "heap" and region.heap_id == heap_id:
                    return region
        return None

    def regions(self) -> list[Region]:
        with self._lock:
            return list(self._regions)

    # -- checked access ---------------------------------------------------------

    def _check(self, addr: int, n: int, write: bool) -> tuple[Region, int]:
        if n < 0:
            raise ValueError("negative length")
        sandbox = self.tls.sandbox
        if sandbox is not None and not self.tls.privileged:
            if not sandbox.admits(addr, n, write):
                raise SandboxViolation(addr, n)
        region = self.find(addr)
        if region is None or addr + n > region.end:
            raise MemoryFault(addr, n, "unmapped")
        while region.restrictions:
            blocked = False
            for start, end, prot in region.intersecting(addr, addr + n):
                if write or prot == PROT_NONE:
                    if not self.tls.privileged:
                        blocked = True
                        break
            if not blocked:
                break
            # a page-migration transport may be able to make this access
            # legal; block until it does, then re-check
            resolver = region.fault_resolver
            if resolver is None or not resolver(addr, n, write):
                raise MemoryFault(addr, n, "protection")
        return region, addr - region.base

    def read(self, addr: int, n: int) -> bytes:
        region, off = self._check(addr, n, write=False)
        return bytes(region.mv[off : off + n])

    def write(self, addr: int, data: bytes) -> None:
        region, off = self._check(addr, len(data), write=True)
        region.mv[off : off + len(data)] = data

    def read_u64(self, addr: int) -> int:
        region, off = self._check(addr, 8, write=False)
        return lowlevel.U64.unpack_from(region.mv, off)[0]

    def write_u64(self, addr: int, value: int) -> None:
        region, off = self._check(addr, 8, write=True)
        lowlevel.U64.pack_into(region.mv, off, value)

    def unpack(self, fmt: struct.Struct, addr: int):
        region, off = self._check(addr, fmt.size, write=False)
        return fmt.unpack_from(region.mv, off)

    def pack(self, fmt: struct.Struct, addr: int, *values) -> None:
        region, off = self._check(addr, fmt.size, write=True)
        fmt.pack_into(region.mv, off, *values)

    # -- permissions ------------------------------------------------------------

    def set_protection(self, addr: int, size: int, prot: int) -> None:
        """Real mprotect plus restriction bookkeeping. Privileged callers only."""
        if size <= 0 or addr % PAGE_SIZE or size % PAGE_SIZE:
            raise ValueError("range must be non-empty and page aligned")
        with self._lock:
            region = self.find(addr)
            if region is None or addr + size > region.end:
                raise MemoryFault(addr, size, "unmapped")
            lowlevel.set_protection(addr, size, prot)
            self._update_restrictions(region, addr, addr + size, prot)

    def _update_restrictions(self, region: Region, start: int, end: int, prot: int) -> None:
        out: list[tuple[int, int, int]] = []
        for r0, r1, rp in region.restrictions:
            if r1 <= start or r0 >= end:
                out.append((r0, r1, rp))
                continue
            if r0 < start:
                out.append((r0, start, rp))
            if r1 > end:
                out.append((end, r1, rp))
        if prot != PROT_RW:
            out.append((start, end, prot))
        out.sort()
        merged: list[tuple[int, int, int]] = []
        for r in out:
            if merged and merged[-1][1] == r[0] and merged[-1][2] == r[2]:
                merged[-1] = (merged[-1][0], r[1], r[2])
            else:
                merged.append(r)
        region.restrictions = merged

    def protection_of(self, addr: int) -> int:
        region = self.find(addr)
        if region is None:
            raise MemoryFault(addr, 1, "unmapped")
        for start, end, prot in region.intersecting(addr, addr + 1):
            return prot
        return PROT_RW

    def privileged(self):
        return _Privileged(self)


class _Privileged:
    """Marks the current thread as the trusted runtime for the duration."""

    def __init__(self, space: AddressSpace):
        self._space = space

    def __enter__(self):
        self._space.tls.privileged += 1
        return self

    def __exit__(self, *exc):
        self._space.tls.privileged -= 1
        return False


_process_space: AddressSpace | None = None
_process_space_lock = threading.Lock()


def process_address_space() -> AddressSpace:
    global _process_space
    if _process_space is None:
        with _process_space_lock:
            if _process_space is None:
                _process_space = AddressSpace()
    return _process_space


class MappedHeap:
    """A heap mapped at its fixed base address in this process."""

    def __init__(self, runtime: "NodeRuntime", info: HeapInfo, lease: LeaseInfo | None, region: Region):
        self.runtime = runtime
        self.info = info
        self.lease = lease
        self.region = region

    @property
    def heap_id(self) -> int:
        return self.info.heap_id

    @property
    def base(self) -> int:
        return self.info.base

    @property
    def size(self) -> int:
        return self.info.size

    @property
    def end(self) -> int:
        return self.info.base + self.info.size

    def contains(self, addr: int, n: int = 1) -> bool:
        return self.base <= addr and addr + n <= self.end

    def permission_map(self) -> list[int]:
        """Current mode of each page: PROT_RW, PROT_READ or PROT_NONE."""
        pages = self.size // PAGE_SIZE
        out = [PROT_RW] * pages
        for start, end, prot in self.region.restrictions:
            first = (start - self.base) // PAGE_SIZE
            last = (end - self.base + PAGE_SIZE - 1) // PAGE_SIZE
            for i in range(first, min(last, pages)):
                out[i] = prot
        return out

    # convenience accessors; all go through the checked path
    def read(self, addr: int, n: int) -> bytes:
        return self.runtime.space.read(addr, n)

    def write(self, addr: int, data: bytes) -> None:
        self.runtime.space.write(addr, data)


class LeaseLost(RpcoolError):
    pass


class NodeRuntime:
    """Per-process trusted agent; one per participant.

    Several runtimes may coexist in one process for testing; they share
    the process address space but hold independent orchestrator sessions,
    holder identities, and leases.
    """

    def __init__(self, config: RuntimeConfig | None = None, holder: HolderId | None = None):
        self.config = config or RuntimeConfig.from_env()
        self.holder = holder or make_holder_id()
        self.space = process_address_space()
        self.orch = OrchestratorClient(
            self.config.orch_endpoint, self.holder, notify_cb=self._on_notify
        )
        self._heaps: dict[int, MappedHeap] = {}
        self._lock = threading.RLock()
        self._stop = threading.Event()
        self._renewer: threading.Thread | None = None
        self._notify_handlers: list = []
        self.notifications: list[Notification] = []
        self._seal_guards: list = []  # callables heap_id -> bool, set by the seal layer
        if self.config.has_pool_access:
            os.makedirs(self.config.pool_dir, exist_ok=True)

    # -- notifications ------------------------------------------------------------

    def _on_notify(self, note: Notification) -> None:
        self.notifications.append(note)
        for cb in list(self._notify_handlers):
            try:
                cb(note)
            except Exception:
                pass

    def on_notification(self, cb) -> None:
        self._notify_handlers.append(cb)

    # -- mapping ------------------------------------------------------------------

    def _backing_path(self, info: HeapInfo) -> str:
        return os.path.join(self.config.pool_dir, info.backing)

    def map_heap(self, info: HeapInfo, lease: LeaseInfo | None = None, local_only: bool = False) -> MappedHeap:
        """Map a heap at its fixed base; starts auto-renewal for its lease.

        local_only backs the mapping with process-private pages instead of
        the shared pool (used by the fallback transport, where the peers
        cannot share memory).
        """
        with self._lock:
            existing = self._heaps.get(info.heap_id)
            if existing is not None:
                existing.region.refcount += 1
                return existing
            region = self.space.region_for_heap(info.heap_id)
            if region is not None:
                region.refcount += 1
            elif local_only:
                mv = lowlevel.map_anonymous_fixed(info.base, info.size)
                region = Region(info.base, info.size, mv, "heap", info.heap_id)
                self.space.add_region(region)
            else:
                fd = os.open(self._backing_path(info), os.O_CREAT | os.O_RDWR, 0o600)
                try:
                    os.ftruncate(fd, info.size)
                    mv = lowlevel.map_file_fixed(fd, info.base, info.size)
                finally:
                    os.close(fd)
                region = Region(info.base, info.size, mv, "heap", info.heap_id)
                self.space.add_region(region)
            heap = MappedHeap(self, info, lease, region)
            self._heaps[info.heap_id] = heap
            self._ensure_renewer()
            return heap

    def add_seal_guard(self, guard) -> None:
        self._seal_guards.append(guard)

    def unmap_heap(self, heap_id: int, release: bool = True) -> None:
        with self._lock:
            heap = self._heaps.pop(heap_id, None)
            if heap is None:
                raise RpcoolError(f"heap {heap_id} not mapped by this runtime")
            if any(guard(heap_id) for guard in self._seal_guards):
                self._heaps[heap_id] = heap
                raise RpcoolError(f"heap {heap_id} has active seals outstanding")
            region = heap.region
            region.refcount -= 1
            if region.refcount == 0:
                self.space.remove_region(region)
                lowlevel.unmap(region.base, region.size)
        if release:
            try:
                self.orch.release_heap(heap_id)
            except RpcoolError:
                pass

    def mapped_heap(self, heap_id: int) -> MappedHeap | None:
        return self._heaps.get(heap_id)

    # -- privileged permission control ---------------------------------------------

    def set_range_permission(self, heap_id: int, start: int, size: int, prot: int) -> None:
        """Privileged page-permission flip inside a mapped heap."""
        heap = self._heaps.get(heap_id)
        if heap is None:
            raise RpcoolError(f"heap {heap_id} not mapped")
        if size <= 0:
            raise ValueError("empty range")
        if not heap.contains(start, size):
            raise MemoryFault(start, size, "unmapped")
        self.space.set_protection(start, size, prot)

    def privileged_write(self, addr: int, data: bytes) -> None:
        """Write through current restrictions (trusted runtime only)."""
        space = self.space
        with space._lock:
            region = space.find(addr)
            if region is None or addr + len(data) > region.end:
                raise MemoryFault(addr, len(data), "unmapped")
            first = lowlevel.page_align_down(addr)
            last = lowlevel.page_align_up(addr + len(data))
            saved = [
                r for r in region.intersecting(first, last)
            ]
            if saved:
                lowlevel.set_protection(first, last - first, PROT_RW)
            region.mv[addr - region.base : addr - region.base + len(data)] = data
            for start, end, prot in saved:
                s = max(start, first)
                e = min(end, last)
                if s < e:
                    lowlevel.set_protection(s, e - s, prot)

    def register_private_region(self, size: int) -> Region:
        """Anonymous private pages that sandboxes must wall off (test surface)."""
        addr, mv = lowlevel.map_anonymous(size)
        region = Region(addr, lowlevel.page_align_up(size), mv, "private")
        self.space.add_region(region)
        return region

    def drop_private_region(self, region: Region) -> None:
        self.space.remove_region(region)
        lowlevel.unmap(region.base, region.size)

    # -- leases ---------------------------------------------------------------------

    def _ensure_renewer(self) -> None:
        if self._renewer is None or not self._renewer.is_alive():
            if self._stop.is_set():
                return
            self._renewer = threading.Thread(
                target=self._renew_loop, name="lease-renewer", daemon=True
            )
            self._renewer.start()

    def _renew_loop(self) -> None:
        while not self._stop.is_set():
            period = self.config.lease_renew_period
            with self._lock:
                heaps = list(self._heaps.values())
            for heap in heaps:
                if heap.lease is None:
                    continue
                ttl = heap.lease.renew_period_ns / 1e9
                period = min(period, max(ttl / 3.0, 0.005))
                try:
                    self.orch.renew_lease(heap.lease.lease_id)
                except RpcoolError:
                    pass  # expired or orchestrator gone; sweep will notify peers
            if self._stop.wait(period):
                return

    def suspend_renewals(self) -> None:
        """Stop renewing leases; emulates this holder crashing."""
        self._stop.set()

    # -- teardown ----------------------------------------------------------------------

    def close(self, release: bool = True) -> None:
        self._stop.set()
        for heap_id in list(self._heaps):
            try:
                self.unmap_heap(heap_id, release=release)
            except RpcoolError:
                heap = self._heaps.pop(heap_id, None)
                if heap is not None:
                    heap.region.refcount -= 1
                    if heap.region.refcount == 0:
                        self.space.remove_region(heap.region)
                        lowlevel.unmap(heap.region.base, heap.region.size)
        self.orch.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False

    def info(self) -> dict:
        return {
            "holder": str(self.holder),
            "sandbox_mode": "portable",
            "hardware_keys": lowlevel.hardware_keys_available(),
            "page_size": PAGE_SIZE,
            "pool_dir": self.config.pool_dir,
        }
