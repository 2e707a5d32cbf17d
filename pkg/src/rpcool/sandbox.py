"""Per-thread sandboxes confining a handler to an RPC's argument range.

While a sandbox is active on a thread, every checked memory access outside
{sandbox range, temporary arena, copied variables} raises a
SandboxViolation that the dispatch layer converts into an RPC error.
Dynamic allocation is redirected to a discardable arena whose contents
are zeroed on exit.

Protection keys on this host: none (pre-pkey kernel), so the manager runs
in portable mode.  Key slots are logical: a slot binds a heap range to a
pre-created arena; entering a range that already holds a slot is pure
bookkeeping (the cached fast path), while an unbound range must wait for
or steal a slot, set up a fresh arena, and pay a real page-table pass
(the portable stand-in for key reassignment).  The budget mirrors the
16-key hardware reality: 2 keys reserved for private memory and
unsandboxed shared regions, 14 usable for sandboxes.

Registered private regions are blacked out with real PROT_NONE flips for
the duration of any sandbox (refcounted); full private-address-space
blackout would need per-thread hardware keys and is documented as the
portable-mode limitation.
"""

from __future__ import annotations

import struct
import threading
import time
from dataclasses import dataclass

from . import lowlevel
from .errors import (
    NestedSandbox,
    OutOfSpace,
    SandboxError,
    SandboxViolation,
)
from .lowlevel import PAGE_SIZE, PROT_NONE, PROT_RW
from .runtime import NodeRuntime, Region


@dataclass(frozen=True)
class KeyBudget:
    total: int = 16
    reserved: int = 2

    @property
    def cached(self) -> int:
        return self.total - self.reserved


class _ArenaChunk:
    __slots__ = ("base", "size", "mv")

    def __init__(self, size: int):
        self.base, self.mv = lowlevel.map_anonymous(size)
        self.size = lowlevel.page_align_up(size)

    def destroy(self) -> None:
        lowlevel.unmap(self.base, self.size)


class SandboxRegion:
    """A heap range bound to a key slot, with its pre-created arena."""

    __slots__ = ("start", "length", "slot", "arena_chunks", "arena_size", "active", "last_used")

    def __init__(self, start: int, length: int, slot: int, arena_size: int):
        self.start = start
        self.length = length
        self.slot = slot
        self.arena_size = arena_size
        self.arena_chunks: list[_ArenaChunk] = [_ArenaChunk(arena_size)]
        self.active = 0
        self.last_used = 0.0

    @property
    def end(self) -> int:
        return self.start + self.length

    def covers(self, start: int, length: int) -> bool:
        return self.start <= start and start + length <= self.end

    def destroy(self) -> None:
        for chunk in self.arena_chunks:
            chunk.destroy()
        self.arena_chunks = []


class SandboxContext:
    """Thread-local confinement state; installed as space.tls.sandbox."""

    redirects_allocation = True

    def __init__(self, manager: "SandboxManager", region: SandboxRegion, thread_id: int):
        self.manager = manager
        self.region = region
        self.thread_id = thread_id
        self.allowed: list[tuple[int, int]] = [(region.start, region.end)]
        for chunk in region.arena_chunks:
            self.allowed.append((chunk.base, chunk.base + chunk.size))
        self.arena_cursor = 0
        self.arena_high = 0
        self.vars: dict[str, tuple[int, int, str]] = {}  # name -> (addr, size, kind)
        self.ended = False

    # -- confinement ------------------------------------------------------------

    def admits(self, addr: int, n: int, write: bool) -> bool:
        for start, end in self.allowed:
            if start <= addr and addr + n <= end:
                return True
        return False

    # -- temporary arena -----------------------------------------------------------

    def arena_allocate(self, size: int, align: int = 16) -> int:
        if size <= 0:
            raise OutOfSpace("arena allocation size must be positive")
        chunk = self.region.arena_chunks[-1]
        cursor = (self.arena_cursor + align - 1) & ~(align - 1)
        if cursor + size > chunk.size:
            new = _ArenaChunk(max(self.region.arena_size, lowlevel.page_align_up(size)))
            self.region.arena_chunks.append(new)
            self.allowed.append((new.base, new.base + new.size))
            self.manager._note_arena_growth(new)
            chunk = new
            cursor = 0
            self.arena_cursor = 0
        addr = chunk.base + cursor
        self.arena_cursor = cursor + size
        self.arena_high = max(self.arena_high, self.arena_cursor)
        return addr

    def owns_arena_address(self, addr: int) -> bool:
        for chunk in self.region.arena_chunks:
            if chunk.base <= addr < chunk.base + chunk.size:
                return True
        return False

    # -- copied variables --------------------------------------------------------------

    def copy_in(self, name: str, value) -> None:
        if isinstance(value, bool):
            data, kind = struct.pack("<q", int(value)), "bool"
        elif isinstance(value, int):
            data, kind = struct.pack("<q", value), "int"
        elif isinstance(value, float):
            data, kind = struct.pack("<d", value), "float"
        elif isinstance(value, (bytes, bytearray, memoryview)):
            data, kind = bytes(value), "bytes"
        elif isinstance(value, str):
            data, kind = value.encode("utf-8"), "str"
        else:
            raise SandboxError(f"cannot copy variable of type {type(value).__name__}")
        addr = self.arena_allocate(max(len(data), 1), align=8)
        # store via the raw chunk view: the context is being built and the
        # accessor path is already confined to these ranges anyway
        chunk = next(c for c in self.region.arena_chunks if c.base <= addr < c.base + c.size)
        chunk.mv[addr - chunk.base : addr - chunk.base + len(data)] = data
        self.vars[name] = (addr, len(data), kind)

    def var_addr(self, name: str) -> tuple[int, int]:
        addr, size, _ = self.vars[name]
        return addr, size

    def var(self, name: str):
        if self.ended:
            raise SandboxError("sandbox already ended; its variables are gone")
        addr, size, kind = self.vars[name]
        raw = self.manager.runtime.space.read(addr, size)
        if kind == "int":
            return struct.unpack("<q", raw)[0]
        if kind == "bool":
            return bool(struct.unpack("<q", raw)[0])
        if kind == "float":
            return struct.unpack("<d", raw)[0]
        if kind == "str":
            return raw.decode("utf-8")
        return raw


class SandboxManager:
    """Process-wide key budget, cached regions, and begin/end protocol."""

    def __init__(self, runtime: NodeRuntime, budget: KeyBudget | None = None):
        self.runtime = runtime
        self.budget = budget or KeyBudget(runtime.config.keys_total, runtime.config.keys_reserved)
        self.arena_size = runtime.config.sandbox_arena_size
        self.mode = "portable"
        self._lock = threading.Condition()
        self._regions: list[SandboxRegion] = []  # at most budget.cached entries
        self._blackout_count = 0
        self._private: list[Region] = []
        # scratch pages: the slow path pays a real protection pass here, the
        # portable analogue of assigning a protection key to the range
        self._scratch_base, _ = lowlevel.map_anonymous(16 * PAGE_SIZE)
        self._scratch_size = 16 * PAGE_SIZE
        self.stats = {"fast": 0, "slow": 0}

    # -- private-memory registration ---------------------------------------------

    def register_private_region(self, size: int) -> Region:
        region = self.runtime.register_private_region(size)
        with self._lock:
            self._private.append(region)
            if self._blackout_count:
                self.runtime.space.set_protection(region.base, region.size, PROT_NONE)
        return region

    def _blackout(self) -> None:
        self._blackout_count += 1
        if self._blackout_count == 1:
            for region in self._private:
                self.runtime.space.set_protection(region.base, region.size, PROT_NONE)

    def _restore(self) -> None:
        self._blackout_count -= 1
        if self._blackout_count == 0:
            for region in self._private:
                self.runtime.space.set_protection(region.base, region.size, PROT_RW)

    # -- region cache ------------------------------------------------------------------

    def _cached_covering(self, start: int, length: int) -> SandboxRegion | None:
        for region in self._regions:
            if region.covers(start, length):
                return region
        return None

    def _rekey_cost(self) -> None:
        lowlevel.set_protection(self._scratch_base, self._scratch_size, PROT_NONE)
        lowlevel.set_protection(self._scratch_base, self._scratch_size, PROT_RW)

    def _destroy_region(self, region: SandboxRegion) -> None:
        for chunk in region.arena_chunks:
            space_region = chunk_region_map.pop(chunk, None)
            if space_region is not None:
                self.runtime.space.remove_region(space_region)
        region.destroy()

    def _bind_region(self, start: int, length: int) -> SandboxRegion:
        """Slow path: wait for a key slot if none is free, then re-key."""
        while True:
            if len(self._regions) < self.budget.cached:
                slot = len(self._regions)
                region = SandboxRegion(start, length, slot, self.arena_size)
                self._regions.append(region)
                break
            idle = [r for r in self._regions if r.active == 0]
            if idle:
                victim = min(idle, key=lambda r: r.last_used)
                self._regions.remove(victim)
                self._destroy_region(victim)
                region = SandboxRegion(start, length, victim.slot, self.arena_size)
                self._regions.append(region)
                break
            self._lock.wait()  # all slots busy: block until some sandbox ends
        self._rekey_cost()
        return region

    def ensure_region(self, start: int, length: int) -> SandboxRegion:
        """Pre-create (or find) a cached sandbox covering the range."""
        with self._lock:
            region = self._cached_covering(start, length)
            if region is None:
                region = self._bind_region(start, length)
            return region

    def acquire_cached_sandbox(self, heap, size: int) -> tuple[SandboxRegion, int]:
        """A cached region of at least `size`, allocating heap space when new.

        Returns (region, arg_addr) where arg_addr is the start of usable
        space; senders place RPC arguments there so the receiver's sandbox
        hits the fast path.
        """
        size = lowlevel.page_align_up(size)
        with self._lock:
            for region in self._regions:
                if region.active == 0 and region.length >= size:
                    region.active += 1
                    self.stats["fast"] += 1
                    return region, region.start
            addr = heap.allocate(size, align=PAGE_SIZE)
            region = self._bind_region(addr, size)
            region.active += 1
            self.stats["slow"] += 1
            return region, region.start

    def release_region(self, region: SandboxRegion) -> None:
        with self._lock:
            region.active = max(0, region.active - 1)
            region.last_used = time.monotonic()
            self._lock.notify_all()

    def _note_arena_growth(self, chunk: _ArenaChunk) -> None:
        space_region = Region(chunk.base, chunk.size, chunk.mv, "arena")
        self.runtime.space.add_region(space_region)
        chunk_region_map[chunk] = space_region

    # -- begin / end -------------------------------------------------------------------------

    def begin(self, start: int, length: int, variables: dict | None = None) -> SandboxContext:
        """Confine this thread to [start, start+length) plus the temp arena."""
        space = self.runtime.space
        if space.tls.sandbox is not None:
            raise NestedSandbox("this thread is already sandboxed")
        if length <= 0 or start % PAGE_SIZE or length % PAGE_SIZE:
            raise SandboxError("sandbox range must be whole pages")
        host = space.find(start)
        if host is None or host.kind != "heap" or start + length > host.end:
            raise SandboxError("sandbox range must lie inside a mapped heap")
        with self._lock:
            region = self._cached_covering(start, length)
            if region is not None:
                self.stats["fast"] += 1
            else:
                region = self._bind_region(start, length)
                self.stats["slow"] += 1
            region.active += 1
            self._register_arena_regions(region)
            self._blackout()
        ctx = SandboxContext(self, region, threading.get_ident())
        if variables:
            for name, value in variables.items():
                ctx.copy_in(name, value)
        space.tls.sandbox = ctx
        return ctx

    def begin_region(self, region: SandboxRegion, variables: dict | None = None) -> SandboxContext:
        """Enter an already-acquired cached region (fast path, no lookup)."""
        space = self.runtime.space
        if space.tls.sandbox is not None:
            raise NestedSandbox("this thread is already sandboxed")
        with self._lock:
            region.active += 1
            self._register_arena_regions(region)
            self._blackout()
        ctx = SandboxContext(self, region, threading.get_ident())
        if variables:
            for name, value in variables.items():
                ctx.copy_in(name, value)
        space.tls.sandbox = ctx
        return ctx

    def _register_arena_regions(self, region: SandboxRegion) -> None:
        for chunk in region.arena_chunks:
            if chunk not in chunk_region_map:
                space_region = Region(chunk.base, chunk.size, chunk.mv, "arena")
                self.runtime.space.add_region(space_region)
                chunk_region_map[chunk] = space_region

    def _unregister_arena_regions(self, region: SandboxRegion) -> None:
        for chunk in region.arena_chunks:
            space_region = chunk_region_map.pop(chunk, None)
            if space_region is not None:
                self.runtime.space.remove_region(space_region)

    def end(self, ctx: SandboxContext) -> None:
        space = self.runtime.space
        if ctx.thread_id != threading.get_ident():
            raise SandboxError("a sandbox can only be ended by the thread that began it")
        if ctx.ended:
            raise SandboxError("sandbox already ended")
        if space.tls.sandbox is not ctx:
            raise SandboxError("this sandbox is not active on this thread")
        space.tls.sandbox = None
        ctx.ended = True
        # discard the temporary heap: zero everything the handler touched
        first = ctx.region.arena_chunks[0]
        n = min(ctx.arena_high, first.size)
        if n:
            first.mv[0:n] = b"\0" * n
        for chunk in ctx.region.arena_chunks[1:]:
            chunk.mv[:] = b"\0" * chunk.size
        with self._lock:
            self._restore()
            ctx.region.active = max(0, ctx.region.active - 1)
            ctx.region.last_used = time.monotonic()
            if ctx.region.active == 0:
                # arena addresses become invalid outside the sandbox
                self._unregister_arena_regions(ctx.region)
            self._lock.notify_all()

    # -- fault conversion ----------------------------------------------------------------------

    def run_confined(self, start: int, length: int, variables: dict | None, fn):
        """Run fn inside a sandbox; a violation becomes an error result.

        Returns ("ok", value) or ("violation", fault). The sandbox is always
        torn down, the process always survives.
        """
        ctx = self.begin(start, length, variables)
        try:
            value = fn(ctx)
        except SandboxViolation as fault:
            self.end(ctx)
            return "violation", fault
        except BaseException:
            self.end(ctx)
            raise
        self.end(ctx)
        return "ok", value

    def close(self) -> None:
        with self._lock:
            for region in self._regions:
                self._destroy_region(region)
            self._regions.clear()
        lowlevel.unmap(self._scratch_base, self._scratch_size)


# arena chunks registered in the process address space, keyed by chunk
chunk_region_map: dict = {}
