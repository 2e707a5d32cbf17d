"""Thread-safe allocator living inside a shared heap, plus scopes.

All allocator metadata resides in the heap itself (header pages at the
base), so every process mapping the heap at its fixed address sees one
consistent state.  Internally everything is stored as heap-relative
offsets; the public API speaks absolute addresses, which are valid in
every participant because heaps map at the same base everywhere.

Bit-exact layout (also in docs/heap-layout.md):

  offset  size   field
  0       8      magic "RPCOOLH1"
  8       4      version (1)
  12      4      page size
  16      8      heap size in bytes
  24      8      flags (bit 0: partitioned for the fallback transport)
  32      144    primary allocator state (see _State)
  176     8      partition offset (0 when not partitioned)
  192     256    directory: 16 entries of (tag u64, value u64)
  512     12288  extent table: 512 entries of (start u64, len u64, state u32, pad)
  12800   81920  scope table: 2048 entries of
                 (state u32, pad u32, start u64, len u64, cursor u64, ticket u64)
  98304          arena (24 header pages)

Allocator state (144 bytes):
  +0 bump cursor, +8 arena start, +16 arena end, +24 allocation count,
  +32 eight small-class free-list heads (payloads 16..2048 bytes),
  +96 free-extent list head, +104 process-shared mutex (40 bytes).

Small blocks carry a 16-byte header (payload size u32, class u32,
state u32, pad); large allocations are whole-page extents tracked in the
extent table with no in-band header, so a page-aligned extent can be
sealed without dragging unrelated bytes along.
"""

from __future__ import annotations

import struct
import threading

from .errors import (
    DoubleFree,
    ForeignAddress,
    HeapError,
    OutOfSpace,
    ScopeStateError,
)
from .lowlevel import PAGE_SIZE, SharedMutex, page_align_up
from .runtime import MappedHeap

MAGIC = b"RPCOOLH1"
VERSION = 1

HDR_MAGIC_OFF = 0
HDR_VERSION_OFF = 8
HDR_PAGESIZE_OFF = 12
HDR_HEAPSIZE_OFF = 16
HDR_FLAGS_OFF = 24
STATE_OFF = 32
STATE_SIZE = 144
PARTITION_OFF_FIELD = 176
DIRECTORY_OFF = 192
DIRECTORY_ENTRIES = 16
EXTENT_TABLE_OFF = 512
EXTENT_ENTRIES = 512
EXTENT_ENTRY_SIZE = 24
SCOPE_TABLE_OFF = 12800
SCOPE_ENTRIES = 2048
SCOPE_ENTRY_SIZE = 40
HEADER_SIZE = 98304

FLAG_PARTITIONED = 1

# secondary (fallback client half) allocator: state page at the partition start
SEC_EXTENT_ENTRIES = 120
SEC_EXTENT_TABLE_REL = 192  # relative to partition offset

# partitioned heaps split the scope table with a gap so the two sides never
# write rows on the same page (pages migrate wholesale over the fallback
# transport, and row 1100 ends well before the page holding row 1120)
PRIMARY_SCOPE_ROWS = range(0, 1100)
SECONDARY_SCOPE_ROWS = range(1120, SCOPE_ENTRIES)

CLASS_SIZES = (16, 32, 64, 128, 256, 512, 1024, 2048)
SMALL_HEADER = 16
SMALL_ALIGN = 16

BLOCK_ALLOC = 0xA11C0A11
BLOCK_FREE = 0xF4EE0CA5
RANGE_MAGIC = 0x52504F4F4C465245  # "RPOOLFRE"

EXTENT_EMPTY, EXTENT_LIVE, EXTENT_FREED = 0, 1, 2
SCOPE_FREE, SCOPE_ACTIVE, SCOPE_SEALED, SCOPE_DESTROYED = 0, 1, 2, 3

DIR_CONNECT_RING = 1
DIR_CHANNEL_META = 2

_HDR = struct.Struct("<8sII Q Q")  # magic, version, page, heapsize, flags
_BLOCK = struct.Struct("<IIII")  # payload size, class index, state, pad
_RANGE = struct.Struct("<QQQ")  # magic, next, len
_EXTENT = struct.Struct("<QQI4x")  # start, len, state
_SCOPE = struct.Struct("<II QQQQ")  # state, pad, start, len, cursor, ticket
_U64 = struct.Struct("<Q")
_DIR_ENTRY = struct.Struct("<QQ")


class RawIO:
    """Direct view access for heaps whose pages are always local (shm)."""

    __slots__ = ("mv",)

    def __init__(self, mv: memoryview):
        self.mv = mv

    def unpack(self, fmt: struct.Struct, off: int):
        return fmt.unpack_from(self.mv, off)

    def pack(self, fmt: struct.Struct, off: int, *vals) -> None:
        fmt.pack_into(self.mv, off, *vals)

    def read(self, off: int, n: int) -> bytes:
        return bytes(self.mv[off : off + n])

    def write(self, off: int, data: bytes) -> None:
        self.mv[off : off + len(data)] = data

    def zero(self, off: int, n: int) -> None:
        self.mv[off : off + n] = b"\0" * n


class CheckedIO:
    """Accessor-mediated access for heaps whose pages migrate (fallback).

    Every operation runs under the transport session's lock so a page
    cannot be granted away between the permission check and the store.
    """

    __slots__ = ("space", "base", "lock")

    def __init__(self, space, base: int, lock=None):
        self.space = space
        self.base = base
        self.lock = lock if lock is not None else threading.RLock()

    def unpack(self, fmt: struct.Struct, off: int):
        with self.lock:
            return self.space.unpack(fmt, self.base + off)

    def pack(self, fmt: struct.Struct, off: int, *vals) -> None:
        with self.lock:
            self.space.pack(fmt, self.base + off, *vals)

    def read(self, off: int, n: int) -> bytes:
        with self.lock:
            return self.space.read(self.base + off, n)

    def write(self, off: int, data: bytes) -> None:
        with self.lock:
            self.space.write(self.base + off, data)

    def zero(self, off: int, n: int) -> None:
        self.write(off, b"\0" * n)


class _State:
    """Accessor for one allocator-state block at a fixed heap offset."""

    __slots__ = ("io", "off")

    def __init__(self, io, off: int):
        self.io = io
        self.off = off

    def _get(self, rel: int) -> int:
        return self.io.unpack(_U64, self.off + rel)[0]

    def _put(self, rel: int, v: int) -> None:
        self.io.pack(_U64, self.off + rel, v)

    bump = property(lambda s: s._get(0), lambda s, v: s._put(0, v))
    arena_start = property(lambda s: s._get(8), lambda s, v: s._put(8, v))
    arena_end = property(lambda s: s._get(16), lambda s, v: s._put(16, v))
    alloc_count = property(lambda s: s._get(24), lambda s, v: s._put(24, v))
    range_head = property(lambda s: s._get(96), lambda s, v: s._put(96, v))

    def class_head(self, idx: int) -> int:
        return self._get(32 + idx * 8)

    def set_class_head(self, idx: int, v: int) -> None:
        self._put(32 + idx * 8, v)

    @property
    def mutex_offset(self) -> int:
        return self.off + 104


class Scope:
    """Contiguous whole-page sub-range of a heap with a bump allocator.

    One thread owns a scope at a time; reset rewinds the cursor, destroy
    returns the pages to the heap.  A sealed scope refuses mutation.
    """

    __slots__ = ("heap", "row")

    def __init__(self, heap: "SharedHeap", row: int):
        self.heap = heap
        self.row = row

    def _entry(self):
        return self.heap._scope_entry(self.row)

    @property
    def state(self) -> int:
        return self._entry()[0]

    @property
    def start(self) -> int:
        return self.heap.base + self._entry()[2]

    @property
    def length(self) -> int:
        return self._entry()[3]

    @property
    def end(self) -> int:
        return self.start + self.length

    @property
    def range(self) -> tuple[int, int]:
        return (self.start, self.length)

    def allocate(self, size: int, align: int = 8) -> int:
        return self.heap.scope_allocate(self, size, align)

    def reset(self) -> None:
        self.heap.scope_reset(self)

    def destroy(self) -> None:
        self.heap.scope_destroy(self)

    def used(self) -> int:
        state, _, start, _, cursor, _ = self._entry()
        return cursor - start


class SharedHeap:
    """Allocator facade over one mapped heap (or one partition of it)."""

    def __init__(self, mapped: MappedHeap, secondary: bool = False, io=None):
        self.mapped = mapped
        self.runtime = mapped.runtime
        self.base = mapped.base
        self.mv = mapped.region.mv
        self.io = io if io is not None else RawIO(self.mv)
        magic, version, page, heapsize, flags = self.io.unpack(_HDR, 0)
        if magic != MAGIC:
            raise HeapError(f"heap {mapped.heap_id} has no allocator header")
        if version != VERSION or page != PAGE_SIZE or heapsize != mapped.size:
            raise HeapError("heap header does not match this mapping")
        self.partition_off = self.io.unpack(_U64, PARTITION_OFF_FIELD)[0]
        self.secondary = secondary
        if secondary:
            if not (flags & FLAG_PARTITIONED):
                raise HeapError("heap is not partitioned")
            self.state = _State(self.io, self.partition_off)
            self._extent_off = self.partition_off + SEC_EXTENT_TABLE_REL
            self._extent_entries = SEC_EXTENT_ENTRIES
            self._scope_rows = SECONDARY_SCOPE_ROWS
        else:
            self.state = _State(self.io, STATE_OFF)
            self._extent_off = EXTENT_TABLE_OFF
            self._extent_entries = EXTENT_ENTRIES
            if flags & FLAG_PARTITIONED:
                self._scope_rows = PRIMARY_SCOPE_ROWS
            else:
                self._scope_rows = range(0, SCOPE_ENTRIES)
        # partitioned halves are only ever touched by their own process, so a
        # local lock suffices; a shared heap needs the in-heap mutex
        if flags & FLAG_PARTITIONED:
            self._lock = threading.RLock()
        else:
            self._lock = SharedMutex(self.base + self.state.mutex_offset)
        self._extent_cache: dict[int, int] = {}
        self._extent_hint = 0

    # -- creation -------------------------------------------------------------

    @classmethod
    def initialize(cls, mapped: MappedHeap, partitioned: bool = False, io=None) -> "SharedHeap":
        """Write a fresh header; call exactly once per heap, by its creator."""
        if mapped.size < HEADER_SIZE + PAGE_SIZE:
            raise HeapError(f"heap too small for header: {mapped.size}")
        mv = mapped.region.mv
        flags = FLAG_PARTITIONED if partitioned else 0
        _HDR.pack_into(mv, 0, MAGIC, VERSION, PAGE_SIZE, mapped.size, flags)
        primary = _State(RawIO(mv), STATE_OFF)
        if partitioned:
            part = page_align_up(mapped.size // 2)
            if part <= HEADER_SIZE or part + PAGE_SIZE >= mapped.size:
                raise HeapError("heap too small to partition")
            _U64.pack_into(mv, PARTITION_OFF_FIELD, part)
            primary.arena_start = HEADER_SIZE
            primary.arena_end = part
            secondary = _State(RawIO(mv), part)
            secondary.arena_start = part + PAGE_SIZE
            secondary.arena_end = mapped.size
            secondary.bump = secondary.arena_start
        else:
            _U64.pack_into(mv, PARTITION_OFF_FIELD, 0)
            primary.arena_start = HEADER_SIZE
            primary.arena_end = mapped.size
            SharedMutex(mapped.base + primary.mutex_offset).init()
        primary.bump = primary.arena_start
        return cls(mapped, io=io)

    @classmethod
    def attach(cls, mapped: MappedHeap, secondary: bool = False, io=None) -> "SharedHeap":
        return cls(mapped, secondary=secondary, io=io)

    # -- directory ---------------------------------------------------------------

    def directory_get(self, tag: int) -> int:
        for i in range(DIRECTORY_ENTRIES):
            t, v = self.io.unpack(_DIR_ENTRY, DIRECTORY_OFF + i * 16)
            if t == tag:
                return v
        return 0

    def directory_set(self, tag: int, value: int) -> None:
        with self._lock:
            free_slot = -1
            for i in range(DIRECTORY_ENTRIES):
                t, _ = self.io.unpack(_DIR_ENTRY, DIRECTORY_OFF + i * 16)
                if t == tag:
                    self.io.pack(_DIR_ENTRY, DIRECTORY_OFF + i * 16, tag, value)
                    return
                if t == 0 and free_slot < 0:
                    free_slot = i
            if free_slot < 0:
                raise HeapError("heap directory full")
            self.io.pack(_DIR_ENTRY, DIRECTORY_OFF + free_slot * 16, tag, value)

    # -- small-block internals -----------------------------------------------------

    def _class_for(self, size: int) -> int:
        for i, c in enumerate(CLASS_SIZES):
            if size <= c:
                return i
        raise AssertionError

    def _carve(self, total: int, align: int) -> int:
        """Take `total` bytes from the bump region; returns offset or 0."""
        st = self.state
        bump = (st.bump + align - 1) & ~(align - 1)
        if bump + total > st.arena_end:
            return 0
        st.bump = bump + total
        return bump

    def _alloc_small(self, class_idx: int) -> int:
        st = self.state
        head = st.class_head(class_idx)
        payload = CLASS_SIZES[class_idx]
        if head:
            nxt = self.io.unpack(_U64, head + SMALL_HEADER)[0]
            st.set_class_head(class_idx, nxt)
            self.io.pack(_BLOCK, head, payload, class_idx, BLOCK_ALLOC, 0)
        else:
            head = self._carve(SMALL_HEADER + payload, SMALL_ALIGN)
            if not head:
                raise OutOfSpace(f"heap {self.mapped.heap_id}: no space for {payload} bytes")
            self.io.pack(_BLOCK, head, payload, class_idx, BLOCK_ALLOC, 0)
        st.alloc_count += 1
        return head + SMALL_HEADER

    def _free_small(self, payload_off: int) -> None:
        head = payload_off - SMALL_HEADER
        if head < HEADER_SIZE or head >= self.mapped.size:
            raise ForeignAddress(f"0x{self.base + payload_off:x} is outside the arena")
        size, class_idx, state, _ = self.io.unpack(_BLOCK, head)
        if class_idx >= len(CLASS_SIZES) or CLASS_SIZES[class_idx] != size:
            raise ForeignAddress(f"0x{self.base + payload_off:x} was not allocated here")
        if state == BLOCK_FREE:
            raise DoubleFree(f"0x{self.base + payload_off:x} freed twice")
        if state != BLOCK_ALLOC:
            raise ForeignAddress(f"0x{self.base + payload_off:x} was not allocated here")
        st = self.state
        self.io.pack(_BLOCK, head, size, class_idx, BLOCK_FREE, 0)
        self.io.pack(_U64, head + SMALL_HEADER, st.class_head(class_idx))
        st.set_class_head(class_idx, head)
        st.alloc_count -= 1

    # -- extent (whole-page) internals ------------------------------------------------

    def _extent_entry(self, i: int):
        return self.io.unpack(_EXTENT, self._extent_off + i * EXTENT_ENTRY_SIZE)

    def _set_extent(self, i: int, start: int, length: int, state: int) -> None:
        self.io.pack(_EXTENT, self._extent_off + i * EXTENT_ENTRY_SIZE, start, length, state)

    def _set_range_next(self, node: int, nxt: int) -> None:
        self.io.pack(_U64, node + 8, nxt)

    def _record_extent(self, start: int, length: int) -> None:
        n = self._extent_entries
        for step in range(n):
            i = (self._extent_hint + step) % n
            _, _, state = self._extent_entry(i)
            if state != EXTENT_LIVE:
                self._set_extent(i, start, length, EXTENT_LIVE)
                self._extent_hint = (i + 1) % n
                self._extent_cache[start] = i
                return
        raise OutOfSpace("extent table full")

    def _find_live_extent(self, off: int) -> int:
        """Index of the live extent starting at `off`, or -1.

        A per-process cache makes same-process free O(1); the shared table
        is always re-verified under the lock, so cross-process frees and
        stale cache entries stay correct.
        """
        i = self._extent_cache.get(off, -1)
        if i >= 0:
            start, _, state = self._extent_entry(i)
            if start == off and state == EXTENT_LIVE:
                return i
            del self._extent_cache[off]
        for i in range(self._extent_entries):
            start, _, state = self._extent_entry(i)
            if start == off and state == EXTENT_LIVE:
                self._extent_cache[off] = i
                return i
        return -1

    def _alloc_pages(self, length: int) -> int:
        """First-fit over the free-extent list, else carve from the bump region."""
        st = self.state
        prev = 0
        node = st.range_head
        while node:
            magic, nxt, nlen = self.io.unpack(_RANGE, node)
            if magic != RANGE_MAGIC:
                raise HeapError("corrupt free-extent list")
            if nlen >= length:
                if nlen == length:
                    if prev:
                        self._set_range_next(prev, nxt)
                    else:
                        st.range_head = nxt
                else:
                    rest = node + length
                    self.io.pack(_RANGE, rest, RANGE_MAGIC, nxt, nlen - length)
                    if prev:
                        self._set_range_next(prev, rest)
                    else:
                        st.range_head = rest
                self.io.zero(node, _RANGE.size)
                return node
            prev = node
            node = nxt
        # carve fresh pages
        bump = page_align_up(st.bump)
        if bump + length > st.arena_end:
            raise OutOfSpace(
                f"heap {self.mapped.heap_id}: no {length} contiguous bytes left"
            )
        st.bump = bump + length
        return bump

    def _free_pages(self, start: int, length: int) -> None:
        """Address-ordered insert with coalescing of adjacent free extents."""
        st = self.state
        prev = 0
        node = st.range_head
        while node and node < start:
            prev, node = node, self.io.unpack(_U64, node + 8)[0]
        # merge with successor
        if node == start + length:
            _, nxt, nlen = self.io.unpack(_RANGE, node)
            length += nlen
            node = nxt
        self.io.pack(_RANGE, start, RANGE_MAGIC, node, length)
        if prev:
            _, _, plen = self.io.unpack(_RANGE, prev)
            if prev + plen == start:
                self.io.pack(_RANGE, prev, RANGE_MAGIC, node, plen + length)
                self.io.zero(start, _RANGE.size)
            else:
                self._set_range_next(prev, start)
        else:
            st.range_head = start

    # -- public allocation API ------------------------------------------------------

    def allocate(self, size: int, align: int = SMALL_ALIGN) -> int:
        """Absolute address of a fresh block, usable from any mapper."""
        if size <= 0:
            raise HeapError("allocation size must be positive")
        if align <= 0 or align & (align - 1):
            raise HeapError(f"alignment must be a power of two, got {align}")
        if align > PAGE_SIZE:
            raise HeapError(f"alignment above page size unsupported: {align}")
        sandbox = self.runtime.space.tls.sandbox
        if sandbox is not None and sandbox.redirects_allocation:
            return sandbox.arena_allocate(size, align)
        with self._lock:
            if size <= CLASS_SIZES[-1] and align <= SMALL_ALIGN:
                return self.base + self._alloc_small(self._class_for(size))
            length = page_align_up(size)
            off = self._alloc_pages(length)
            self._record_extent(off, length)
            self.state.alloc_count += 1
            return self.base + off

    def free(self, addr: int) -> None:
        sandbox = self.runtime.space.tls.sandbox
        if sandbox is not None and sandbox.redirects_allocation:
            if sandbox.owns_arena_address(addr):
                return  # arena memory is discarded wholesale at sandbox exit
        if not self.mapped.contains(addr):
            raise ForeignAddress(f"0x{addr:x} is not inside heap {self.mapped.heap_id}")
        off = addr - self.base
        with self._lock:
            i = self._find_live_extent(off)
            if i >= 0:
                start, length, _ = self._extent_entry(i)
                self._set_extent(i, start, length, EXTENT_FREED)
                self._free_pages(start, length)
                self.state.alloc_count -= 1
                return
            # error path: distinguish a stale extent from a bad pointer
            for j in range(self._extent_entries):
                start, _, state = self._extent_entry(j)
                if start == off and state == EXTENT_FREED:
                    raise DoubleFree(f"0x{addr:x} freed twice")
            self._free_small(off)

    @property
    def allocation_count(self) -> int:
        return self.state.alloc_count

    # -- scopes ------------------------------------------------------------------------

    def _scope_entry(self, row: int):
        return self.io.unpack(_SCOPE, SCOPE_TABLE_OFF + row * SCOPE_ENTRY_SIZE)

    def _set_scope(self, row: int, state: int, start: int, length: int, cursor: int, ticket: int) -> None:
        self.io.pack(
            _SCOPE, SCOPE_TABLE_OFF + row * SCOPE_ENTRY_SIZE, state, 0, start, length, cursor, ticket
        )

    def create_scope(self, size: int) -> Scope:
        """Reserve a dedicated, page-aligned range with its own bump allocator."""
        if size <= 0:
            raise HeapError("scope size must be positive")
        length = page_align_up(size)
        with self._lock:
            row = -1
            for i in self._scope_rows:
                if self._scope_entry(i)[0] == SCOPE_FREE:
                    row = i
                    break
            if row < 0:
                raise OutOfSpace("scope table full")
            off = self._alloc_pages(length)
            self._set_scope(row, SCOPE_ACTIVE, off, length, off, 0)
        return Scope(self, row)

    def scope_allocate(self, scope: Scope, size: int, align: int = 8) -> int:
        if size <= 0:
            raise HeapError("allocation size must be positive")
        if align <= 0 or align & (align - 1):
            raise HeapError(f"alignment must be a power of two, got {align}")
        with self._lock:
            state, _, start, length, cursor, ticket = self._scope_entry(scope.row)
            if state == SCOPE_SEALED:
                raise ScopeStateError("scope is sealed; release it before mutating")
            if state != SCOPE_ACTIVE:
                raise ScopeStateError("scope is not active")
            aligned = (cursor + align - 1) & ~(align - 1)
            if aligned + size > start + length:
                raise OutOfSpace(f"scope exhausted ({length} bytes)")
            self._set_scope(scope.row, state, start, length, aligned + size, ticket)
            return self.base + aligned

    def scope_reset(self, scope: Scope) -> None:
        with self._lock:
            state, _, start, length, _, ticket = self._scope_entry(scope.row)
            if state == SCOPE_SEALED:
                raise ScopeStateError("scope is sealed; release it before resetting")
            if state != SCOPE_ACTIVE:
                raise ScopeStateError("scope is not active")
            self._set_scope(scope.row, SCOPE_ACTIVE, start, length, start, ticket)

    def scope_destroy(self, scope: Scope) -> None:
        with self._lock:
            state, _, start, length, _, _ = self._scope_entry(scope.row)
            if state == SCOPE_SEALED:
                raise ScopeStateError("scope is sealed; release it before destroying")
            if state != SCOPE_ACTIVE:
                raise ScopeStateError("scope is not active")
            self._free_pages(start, length)
            self._set_scope(scope.row, SCOPE_FREE, 0, 0, 0, 0)

    def _scope_set_state(self, scope: Scope, state: int, ticket: int = 0) -> None:
        """Seal-manager hook; not part of the application API."""
        with self._lock:
            _, _, start, length, cursor, _ = self._scope_entry(scope.row)
            self._set_scope(scope.row, state, start, length, cursor, ticket)

    def live_scope_ranges(self) -> list[tuple[int, int]]:
        out = []
        for i in range(SCOPE_ENTRIES):
            state, _, start, length, _, _ = self._scope_entry(i)
            if state in (SCOPE_ACTIVE, SCOPE_SEALED):
                out.append((self.base + start, length))
        return out

    # -- data access (checked) -----------------------------------------------------------

    def read(self, addr: int, n: int) -> bytes:
        return self.runtime.space.read(addr, n)

    def write(self, addr: int, data: bytes) -> None:
        self.runtime.space.write(addr, data)

    def read_u64(self, addr: int) -> int:
        return self.runtime.space.read_u64(addr)

    def write_u64(self, addr: int, value: int) -> None:
        self.runtime.space.write_u64(addr, value)





# -- minimal growable containers ----------------------------------------------------------

_STR_CTRL = struct.Struct("<QII")  # data addr, length, capacity


class HeapString:
    """Growable byte string: a fixed control block pointing at a data block."""

    __slots__ = ("heap", "addr")
    CTRL_SIZE = _STR_CTRL.size

    def __init__(self, heap: SharedHeap, addr: int):
        self.heap = heap
        self.addr = addr

    @classmethod
    def create(cls, heap: SharedHeap, data: bytes = b"") -> "HeapString":
        ctrl = heap.allocate(cls.CTRL_SIZE)
        cap = max(16, len(data))
        buf = heap.allocate(cap)
        heap.write(ctrl, _STR_CTRL.pack(buf, len(data), cap))
        if data:
            heap.write(buf, data)
        return cls(heap, ctrl)

    @classmethod
    def at(cls, heap: SharedHeap, addr: int) -> "HeapString":
        return cls(heap, addr)

    def _ctrl(self):
        return _STR_CTRL.unpack(self.heap.read(self.addr, self.CTRL_SIZE))

    def value(self) -> bytes:
        buf, length, _ = self._ctrl()
        return self.heap.read(buf, length) if length else b""

    def __len__(self) -> int:
        return self._ctrl()[1]

    def set(self, data: bytes) -> None:
        buf, _, cap = self._ctrl()
        if len(data) > cap:
            new_cap = max(cap * 2, len(data))
            new_buf = self.heap.allocate(new_cap)
            self.heap.free(buf)
            buf, cap = new_buf, new_cap
        if data:
            self.heap.write(buf, data)
        self.heap.write(self.addr, _STR_CTRL.pack(buf, len(data), cap))

    def append(self, data: bytes) -> None:
        self.set(self.value() + data)

    def destroy(self) -> None:
        buf, _, _ = self._ctrl()
        self.heap.free(buf)
        self.heap.free(self.addr)


_ARR_CTRL = struct.Struct("<QIII4x")  # data addr, elem size, length, capacity


class HeapArray:
    """Growable array of fixed-size elements."""

    __slots__ = ("heap", "addr")
    CTRL_SIZE = _ARR_CTRL.size

    def __init__(self, heap: SharedHeap, addr: int):
        self.heap = heap
        self.addr = addr

    @classmethod
    def create(cls, heap: SharedHeap, elem_size: int, capacity: int = 8) -> "HeapArray":
        if elem_size <= 0:
            raise HeapError("element size must be positive")
        ctrl = heap.allocate(cls.CTRL_SIZE)
        buf = heap.allocate(max(1, capacity) * elem_size)
        heap.write(ctrl, _ARR_CTRL.pack(buf, elem_size, 0, max(1, capacity)))
        return cls(heap, ctrl)

    @classmethod
    def at(cls, heap: SharedHeap, addr: int) -> "HeapArray":
        return cls(heap, addr)

    def _ctrl(self):
        return _ARR_CTRL.unpack(self.heap.read(self.addr, self.CTRL_SIZE))

    def __len__(self) -> int:
        return self._ctrl()[2]

    def push(self, elem: bytes) -> None:
        buf, esize, length, cap = self._ctrl()
        if len(elem) != esize:
            raise HeapError(f"element must be exactly {esize} bytes")
        if length == cap:
            new_cap = cap * 2
            new_buf = self.heap.allocate(new_cap * esize)
            if length:
                self.heap.write(new_buf, self.heap.read(buf, length * esize))
            self.heap.free(buf)
            buf, cap = new_buf, new_cap
        self.heap.write(buf + length * esize, elem)
        self.heap.write(self.addr, _ARR_CTRL.pack(buf, esize, length + 1, cap))

    def get(self, i: int) -> bytes:
        buf, esize, length, _ = self._ctrl()
        if not 0 <= i < length:
            raise IndexError(i)
        return self.heap.read(buf + i * esize, esize)

    def set(self, i: int, elem: bytes) -> None:
        buf, esize, length, _ = self._ctrl()
        if not 0 <= i < length:
            raise IndexError(i)
        if len(elem) != esize:
            raise HeapError(f"element must be exactly {esize} bytes")
        self.heap.write(buf + i * esize, elem)

    def destroy(self) -> None:
        buf, _, _, _ = self._ctrl()
        self.heap.free(buf)
        self.heap.free(self.addr)
