import pytest

from rpcool.errors import MemoryFault, RpcoolError
from rpcool.heap import SharedHeap
from rpcool.lowlevel import (
    PAGE_SIZE,
    PROT_NONE,
    PROT_READ,
    PROT_RW,
    kernel_can_read,
    kernel_can_write,
)

import procutil

MIB = 1 << 20


@pytest.fixture
def mapped(runtime):
    info, lease = runtime.orch.allocate_heap(0, MIB)
    return runtime.map_heap(info, lease)


def test_map_heap_lands_at_descriptor_base(runtime, mapped):
    assert mapped.base == mapped.info.base
    runtime.space.write(mapped.base, b"stored")
    assert runtime.space.read(mapped.base, 6) == b"stored"


def test_unmapped_access_faults(runtime, mapped):
    with pytest.raises(MemoryFault) as e:
        runtime.space.read(mapped.end + PAGE_SIZE, 8)
    assert e.value.kind == "unmapped"
    with pytest.raises(MemoryFault):
        runtime.space.read(mapped.end - 4, 8)  # straddles the end


def test_map_quota_denied_leaves_nothing_mapped(make_runtime, orch):
    rt = make_runtime()
    quota = orch.core.config.default_quota
    info, lease = rt.orch.allocate_heap(0, quota)  # uses the whole quota
    rt.map_heap(info, lease)
    from rpcool.errors import OrchestratorError

    with pytest.raises(OrchestratorError):
        rt.orch.allocate_heap(0, MIB)
    assert orch.core.holder_mapped_bytes(rt.holder) == quota


def test_set_range_permission_readonly_store_faults(runtime, mapped):
    runtime.space.write(mapped.base, b"abc")
    runtime.set_range_permission(mapped.heap_id, mapped.base, PAGE_SIZE, PROT_READ)
    # accessor-level fault
    with pytest.raises(MemoryFault) as e:
        runtime.space.write(mapped.base, b"x")
    assert e.value.kind == "protection"
    # the kernel agrees: a real store would fault
    assert not kernel_can_write(mapped.base)
    assert kernel_can_read(mapped.base)
    # reads still succeed
    assert runtime.space.read(mapped.base, 3) == b"abc"
    # neighbouring page unaffected
    runtime.space.write(mapped.base + PAGE_SIZE, b"y")
    runtime.set_range_permission(mapped.heap_id, mapped.base, PAGE_SIZE, PROT_RW)
    runtime.space.write(mapped.base, b"z")


def test_set_range_permission_rejects_bad_ranges(runtime, mapped):
    with pytest.raises(ValueError):
        runtime.set_range_permission(mapped.heap_id, mapped.base, 0, PROT_READ)
    with pytest.raises(MemoryFault):
        runtime.set_range_permission(mapped.heap_id, mapped.end, PAGE_SIZE, PROT_READ)
    with pytest.raises(RpcoolError):
        runtime.set_range_permission(999, mapped.base, PAGE_SIZE, PROT_READ)


def test_permission_map_covers_every_page(runtime, mapped):
    pages = mapped.size // PAGE_SIZE
    pm = mapped.permission_map()
    assert len(pm) == pages
    assert all(p == PROT_RW for p in pm)
    runtime.set_range_permission(mapped.heap_id, mapped.base + PAGE_SIZE, 2 * PAGE_SIZE, PROT_READ)
    runtime.set_range_permission(mapped.heap_id, mapped.base + 5 * PAGE_SIZE, PAGE_SIZE, PROT_NONE)
    pm = mapped.permission_map()
    assert pm[0] == PROT_RW
    assert pm[1] == pm[2] == PROT_READ
    assert pm[5] == PROT_NONE
    with pytest.raises(MemoryFault):
        runtime.space.read(mapped.base + 5 * PAGE_SIZE, 1)
    assert not kernel_can_read(mapped.base + 5 * PAGE_SIZE)
    runtime.set_range_permission(mapped.heap_id, mapped.base, mapped.size, PROT_RW)


def test_unmap_then_access_faults(runtime):
    info, lease = runtime.orch.allocate_heap(0, MIB)
    mapped = runtime.map_heap(info, lease)
    runtime.space.write(mapped.base, b"live")
    runtime.unmap_heap(info.heap_id)
    with pytest.raises(MemoryFault):
        runtime.space.read(mapped.base, 4)
    with pytest.raises(RpcoolError):
        runtime.unmap_heap(info.heap_id)


def test_unmap_with_outstanding_seal_refused(runtime, mapped):
    armed = [True]
    runtime.add_seal_guard(lambda heap_id: armed[0] and heap_id == mapped.heap_id)
    with pytest.raises(RpcoolError):
        runtime.unmap_heap(mapped.heap_id)
    armed[0] = False
    runtime.unmap_heap(mapped.heap_id)


def test_privileged_write_through_restriction(runtime, mapped):
    runtime.set_range_permission(mapped.heap_id, mapped.base, PAGE_SIZE, PROT_READ)
    runtime.privileged_write(mapped.base + 8, b"kernel!")
    assert runtime.space.read(mapped.base + 8, 7) == b"kernel!"
    # restriction still in force afterwards
    with pytest.raises(MemoryFault):
        runtime.space.write(mapped.base + 8, b"x")
    assert not kernel_can_write(mapped.base + 8)
    runtime.set_range_permission(mapped.heap_id, mapped.base, PAGE_SIZE, PROT_RW)


def test_two_runtimes_one_process_share_mapping(runtime, second_runtime):
    info, lease = runtime.orch.allocate_heap(0, MIB)
    m1 = runtime.map_heap(info, lease)
    got, lease2 = second_runtime.orch.allocate_heap(0, 0, attach_heap_id=info.heap_id)
    m2 = second_runtime.map_heap(got, lease2)
    assert m1.base == m2.base
    runtime.space.write(m1.base + 100, b"shared")
    assert second_runtime.space.read(m2.base + 100, 6) == b"shared"
    second_runtime.unmap_heap(info.heap_id)
    # first runtime's mapping survives the second's unmap
    assert runtime.space.read(m1.base + 100, 6) == b"shared"


def test_lease_autorenewal_keeps_heap_alive(runtime, orch):
    info, lease = runtime.orch.allocate_heap(0, MIB)
    runtime.map_heap(info, lease)
    import time

    time.sleep(orch.core.config.lease_ttl * 2.5)
    # renewer kept us alive through multiple ttl windows
    assert orch.core.lease_of(runtime.holder, info.heap_id) is not None
    assert (info.base, info.size) in orch.core.live_heap_ranges()


def test_cross_process_visibility_and_fixed_address(runtime, orch, pool_dir):
    info, lease = runtime.orch.allocate_heap(0, MIB)
    mapped = runtime.map_heap(info, lease)
    shp = SharedHeap.initialize(mapped)

    # build a 1000-node linked structure with absolute next-pointers
    rng_values = [(i * 2654435761) & 0xFFFFFFFFFFFFFFFF for i in range(1000)]
    next_addr = 0
    checksum = 0
    for value in reversed(rng_values):
        node = shp.allocate(16)
        shp.write_u64(node, value)
        shp.write_u64(node + 8, next_addr)
        next_addr = node
    for value in rng_values:
        checksum = (checksum * 1000003 + value) & 0xFFFFFFFFFFFFFFFF

    q = procutil.ctx.Queue()
    p = procutil.ctx.Process(
        target=procutil.fixed_address_reader_worker,
        args=(orch.endpoint, pool_dir, procutil.heap_tuple(info), next_addr, q),
    )
    p.start()
    result = q.get(timeout=60)
    p.join(timeout=30)
    assert result[0] == "ok", result
    _, their_checksum, count, their_base = result
    assert count == 1000
    assert their_checksum == checksum
    assert their_base == mapped.base  # identical base address in both processes


def test_cross_process_write_visible_here(runtime, orch, pool_dir):
    info, lease = runtime.orch.allocate_heap(0, MIB)
    mapped = runtime.map_heap(info, lease)
    q = procutil.ctx.Queue()
    p = procutil.ctx.Process(
        target=procutil.write_bytes_worker,
        args=(orch.endpoint, pool_dir, procutil.heap_tuple(info), mapped.base + 512, b"from-peer", q),
    )
    p.start()
    assert q.get(timeout=60)[0] == "ok"
    p.join(timeout=30)
    assert runtime.space.read(mapped.base + 512, 9) == b"from-peer"
