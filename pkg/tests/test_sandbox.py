import threading
import time

import pytest

from rpcool.errors import MemoryFault, NestedSandbox, SandboxError, SandboxViolation
from rpcool.heap import SharedHeap
from rpcool.lowlevel import PAGE_SIZE, kernel_can_read
from rpcool.sandbox import KeyBudget, SandboxManager

MIB = 1 << 20


@pytest.fixture
def heap(runtime):
    info, lease = runtime.orch.allocate_heap(0, 32 * MIB)
    mapped = runtime.map_heap(info, lease)
    return SharedHeap.initialize(mapped)


@pytest.fixture
def manager(runtime):
    m = SandboxManager(runtime)
    yield m
    m.close()


def test_read_inside_sandbox_succeeds(heap, manager):
    scope = heap.create_scope(PAGE_SIZE)
    arg = scope.allocate(64)
    heap.write(arg, b"payload")
    ctx = manager.begin(scope.start, scope.length)
    try:
        assert heap.read(arg, 7) == b"payload"
        heap.write(arg + 8, b"reply")  # writes inside the range are allowed
    finally:
        manager.end(ctx)


def test_access_storm_inside_range_never_faults(heap, manager):
    scope = heap.create_scope(PAGE_SIZE)
    arg = scope.allocate(256)
    heap.write(arg, bytes(range(256)))
    ctx = manager.begin(scope.start, scope.length)
    try:
        for i in range(10_000):
            heap.read(arg + (i % 256), 1)
    finally:
        manager.end(ctx)


def test_private_memory_blocked_while_sandboxed_restored_after(heap, manager):
    secret = manager.register_private_region(PAGE_SIZE)
    manager.runtime.space.write(secret.base, b"SECRET42")
    scope = heap.create_scope(PAGE_SIZE)
    ctx = manager.begin(scope.start, scope.length)
    try:
        with pytest.raises(SandboxViolation):
            manager.runtime.space.read(secret.base, 8)
        # the page is really gone, not just bookkept away
        assert not kernel_can_read(secret.base)
    finally:
        manager.end(ctx)
    assert manager.runtime.space.read(secret.base, 8) == b"SECRET42"
    assert kernel_can_read(secret.base)


def test_unsandboxed_heap_page_blocked(heap, manager):
    scope = heap.create_scope(PAGE_SIZE)
    other = heap.allocate(64)  # lives outside the scope
    heap.write(other, b"other")
    ctx = manager.begin(scope.start, scope.length)
    try:
        with pytest.raises(SandboxViolation):
            heap.read(other, 5)
        with pytest.raises(SandboxViolation):
            heap.write(other, b"x")
    finally:
        manager.end(ctx)
    assert heap.read(other, 5) == b"other"


def test_wild_pointer_to_unmapped_address_is_violation(heap, manager):
    scope = heap.create_scope(PAGE_SIZE)
    ctx = manager.begin(scope.start, scope.length)
    try:
        with pytest.raises(SandboxViolation):
            manager.runtime.space.read(0xDEAD0000, 8)
    finally:
        manager.end(ctx)


def test_copied_variables_visible_and_discarded(heap, manager):
    scope = heap.create_scope(PAGE_SIZE)
    ctx = manager.begin(scope.start, scope.length, variables={"limit": 10, "tag": b"abc"})
    assert ctx.var("limit") == 10
    assert ctx.var("tag") == b"abc"
    addr, size = ctx.var_addr("limit")
    assert manager.runtime.space.read(addr, size)  # readable while active
    manager.end(ctx)
    with pytest.raises(SandboxError):
        ctx.var("limit")


def test_nested_sandbox_rejected(heap, manager):
    scope = heap.create_scope(PAGE_SIZE)
    ctx = manager.begin(scope.start, scope.length)
    try:
        with pytest.raises(NestedSandbox):
            manager.begin(scope.start, scope.length)
    finally:
        manager.end(ctx)


def test_range_outside_heaps_rejected(manager):
    with pytest.raises(SandboxError):
        manager.begin(0x1000_0000, PAGE_SIZE)


def test_unaligned_range_rejected(heap, manager):
    scope = heap.create_scope(PAGE_SIZE)
    with pytest.raises(SandboxError):
        manager.begin(scope.start + 8, PAGE_SIZE)
    with pytest.raises(SandboxError):
        manager.begin(scope.start, 0)


def test_arena_allocation_redirect_and_discard(heap, manager):
    scope = heap.create_scope(PAGE_SIZE)
    ctx = manager.begin(scope.start, scope.length)
    # heap.allocate is redirected to the temporary arena while sandboxed
    addr = heap.allocate(1024)
    assert ctx.owns_arena_address(addr)
    manager.runtime.space.write(addr, b"T" * 1024)
    assert manager.runtime.space.read(addr, 4) == b"TTTT"
    heap.free(addr)  # no-op: arena memory dies with the sandbox
    manager.end(ctx)
    # the pointer is invalid once the sandbox ends
    with pytest.raises(MemoryFault):
        manager.runtime.space.read(addr, 4)


def test_arena_zeroed_before_reuse(heap, manager):
    scope = heap.create_scope(PAGE_SIZE)
    ctx = manager.begin(scope.start, scope.length)
    addr = ctx.arena_allocate(64)
    manager.runtime.space.write(addr, b"leak" * 16)
    manager.end(ctx)
    ctx2 = manager.begin(scope.start, scope.length)
    try:
        addr2 = ctx2.arena_allocate(64)
        assert addr2 == addr  # same arena, reused
        assert manager.runtime.space.read(addr2, 64) == b"\0" * 64
    finally:
        manager.end(ctx2)


def test_end_twice_rejected(heap, manager):
    scope = heap.create_scope(PAGE_SIZE)
    ctx = manager.begin(scope.start, scope.length)
    manager.end(ctx)
    with pytest.raises(SandboxError):
        manager.end(ctx)


def test_end_from_wrong_thread_rejected(heap, manager):
    scope = heap.create_scope(PAGE_SIZE)
    ctx = manager.begin(scope.start, scope.length)
    errors = []

    def other():
        try:
            manager.end(ctx)
        except SandboxError as e:
            errors.append(e)

    t = threading.Thread(target=other)
    t.start()
    t.join()
    assert errors
    manager.end(ctx)


def test_thread_independence_of_active_sandboxes(heap, manager):
    a, b = heap.create_scope(PAGE_SIZE), heap.create_scope(PAGE_SIZE)
    arg_a, arg_b = a.allocate(16), b.allocate(16)
    heap.write(arg_a, b"a" * 16)
    heap.write(arg_b, b"b" * 16)
    barrier = threading.Barrier(2)
    results = {}

    def confined(name, scope, mine, theirs):
        ctx = manager.begin(scope.start, scope.length)
        try:
            barrier.wait(timeout=5)
            ok_mine = heap.read(mine, 16)
            try:
                heap.read(theirs, 16)
                blocked = False
            except SandboxViolation:
                blocked = True
            results[name] = (ok_mine, blocked)
            barrier.wait(timeout=5)
        finally:
            manager.end(ctx)

    t1 = threading.Thread(target=confined, args=("a", a, arg_a, arg_b))
    t2 = threading.Thread(target=confined, args=("b", b, arg_b, arg_a))
    t1.start(), t2.start()
    t1.join(), t2.join()
    assert results["a"] == (b"a" * 16, True)
    assert results["b"] == (b"b" * 16, True)


def test_cached_fast_path_after_first_use(heap, manager):
    scope = heap.create_scope(PAGE_SIZE)
    ctx = manager.begin(scope.start, scope.length)
    manager.end(ctx)
    assert manager.stats["slow"] == 1
    for _ in range(10):
        ctx = manager.begin(scope.start, scope.length)
        manager.end(ctx)
    assert manager.stats["slow"] == 1
    assert manager.stats["fast"] == 10


def test_uncached_rotation_reassigns_every_time(heap, manager):
    # more distinct ranges than key slots: every entry needs a reassignment
    scopes = [heap.create_scope(PAGE_SIZE) for _ in range(manager.budget.cached + 4)]
    for _ in range(2):
        for s in scopes:
            ctx = manager.begin(s.start, s.length)
            manager.end(ctx)
    assert manager.stats["slow"] == 2 * len(scopes)
    assert manager.stats["fast"] == 0


def test_key_budget_defaults():
    b = KeyBudget()
    assert (b.total, b.reserved, b.cached) == (16, 2, 14)


def test_fifteenth_acquisition_waits_for_a_release(heap, manager):
    regions = [manager.acquire_cached_sandbox(heap, PAGE_SIZE)[0] for _ in range(14)]
    assert len({r.slot for r in regions}) == 14
    got = []

    def fifteenth():
        region, _ = manager.acquire_cached_sandbox(heap, PAGE_SIZE)
        got.append(region)

    t = threading.Thread(target=fifteenth)
    t.start()
    time.sleep(0.15)
    assert not got, "15th acquisition should block while all 14 keys are busy"
    manager.release_region(regions[0])
    t.join(timeout=5)
    assert len(got) == 1


def test_fourteen_concurrent_acquisitions_all_fast_when_warm(heap, manager):
    # warm the cache: create and release 14 regions
    warm = [manager.acquire_cached_sandbox(heap, PAGE_SIZE)[0] for _ in range(14)]
    for r in warm:
        manager.release_region(r)
    manager.stats["fast"] = manager.stats["slow"] = 0
    regions = [manager.acquire_cached_sandbox(heap, PAGE_SIZE)[0] for _ in range(14)]
    assert manager.stats == {"fast": 14, "slow": 0}
    for r in regions:
        manager.release_region(r)


def test_run_confined_converts_violation_to_error(heap, manager):
    scope = heap.create_scope(PAGE_SIZE)
    secret = manager.register_private_region(PAGE_SIZE)

    def hostile(ctx):
        return manager.runtime.space.read(secret.base, 8)

    status, fault = manager.run_confined(scope.start, scope.length, None, hostile)
    assert status == "violation"
    assert isinstance(fault, SandboxViolation)
    # thread is usable afterwards: a benign confined call succeeds
    arg = scope.allocate(8)
    heap.write(arg, b"fine!!!!")

    def benign(ctx):
        return heap.read(arg, 8)

    status, value = manager.run_confined(scope.start, scope.length, None, benign)
    assert (status, value) == ("ok", b"fine!!!!")
