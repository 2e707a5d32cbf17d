import random
import threading
import time

import pytest

from rpcool.config import OrchestratorConfig
from rpcool.errors import (
    DuplicateName,
    LeaseExpired,
    MalformedName,
    OrchestratorError,
    PoolExhausted,
    QuotaExceeded,
    UnknownChannel,
    UnknownLease,
)
from rpcool.lowlevel import PAGE_SIZE
from rpcool.orchestrator import (
    HEAP_MODE_PRIVATE,
    HEAP_MODE_SHARED,
    HolderId,
    OrchestratorClient,
    OrchestratorCore,
)
from rpcool.orchestrator.wire import NOTIFY_HOLDER_FAILED

MIB = 1 << 20


class FakeClock:
    def __init__(self, t=1000.0):
        self.t = t

    def __call__(self):
        return self.t

    def advance(self, dt):
        self.t += dt


def make_core(**kw):
    cfg = OrchestratorConfig(
        pool_base=0x7000_0000_0000, pool_span=1 << 40, **kw
    )
    clock = FakeClock()
    return OrchestratorCore(cfg, clock=clock), clock


def holder(n):
    return HolderId(node=1, pid=n, incarnation=0)


def assert_pairwise_disjoint(ranges):
    # exhaustive pairwise interval comparison: the oracle for address soundness
    items = sorted(ranges)
    for (s1, z1), (s2, z2) in zip(items, items[1:]):
        assert s1 + z1 <= s2, f"overlap: [{s1:#x},+{z1:#x}) vs [{s2:#x},+{z2:#x})"


# -- channel registry -----------------------------------------------------------


def test_register_channel_minimal():
    core, _ = make_core()
    rec, heap, lease = core.register_channel(holder(1), "/ch/ping", HEAP_MODE_PRIVATE, MIB)
    assert rec.name == "/ch/ping"
    assert heap.size == MIB
    assert heap.base % PAGE_SIZE == 0
    assert rec.heap_ids == [heap.heap_id]
    assert lease.heap_id == heap.heap_id


def test_register_duplicate_name_fails():
    core, _ = make_core()
    core.register_channel(holder(1), "/ch/ping", HEAP_MODE_PRIVATE, MIB)
    with pytest.raises(DuplicateName):
        core.register_channel(holder(2), "/ch/ping", HEAP_MODE_PRIVATE, MIB)


@pytest.mark.parametrize("bad", ["", "noslash", "/", "/a//b", "/a/", "/a/b "])
def test_malformed_names_rejected(bad):
    core, _ = make_core()
    with pytest.raises(MalformedName):
        core.register_channel(holder(1), bad, HEAP_MODE_PRIVATE, MIB)


def test_hundred_concurrent_registrations_disjoint():
    core, _ = make_core()
    results = []
    errors = []

    def register(i):
        try:
            _, heap, _ = core.register_channel(holder(i), f"/ch/n{i}", HEAP_MODE_SHARED, MIB)
            results.append((heap.base, heap.size))
        except Exception as e:  # noqa: BLE001
            errors.append(e)

    threads = [threading.Thread(target=register, args=(i,)) for i in range(100)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert len(results) == 100
    assert_pairwise_disjoint(results)


def test_lookup_missing_channel_fails():
    core, _ = make_core()
    with pytest.raises(UnknownChannel):
        core.lookup_channel(holder(1), "/nope", attach=False)


# -- heap allocation ------------------------------------------------------------


def test_allocate_two_heaps_disjoint():
    core, _ = make_core()
    a, _ = core.allocate_heap(holder(1), 0, MIB)
    b, _ = core.allocate_heap(holder(1), 0, MIB)
    assert_pairwise_disjoint([(a.base, a.size), (b.base, b.size)])


def test_allocate_zero_size_fails():
    core, _ = make_core()
    with pytest.raises(OrchestratorError):
        core.allocate_heap(holder(1), 0, 0)


def test_size_rounded_to_page_multiple():
    core, _ = make_core()
    info, _ = core.allocate_heap(holder(1), 0, 100)
    assert info.size == PAGE_SIZE


def test_address_reuse_only_after_release():
    core, _ = make_core()
    h = holder(1)
    a, _ = core.allocate_heap(h, 0, MIB)
    core.release_heap(h, a.heap_id)
    b, _ = core.allocate_heap(h, 0, MIB)
    # address may be reused once the first heap is dead (first-fit will reuse)
    assert b.base == a.base


def test_allocator_replay_against_interval_oracle():
    core, _ = make_core(default_quota=1 << 40)
    h = holder(1)
    rng = random.Random(42)
    live = {}  # heap_id -> (base, size)
    for _ in range(2000):
        if live and rng.random() < 0.45:
            heap_id = rng.choice(list(live))
            core.release_heap(h, heap_id)
            del live[heap_id]
        else:
            size = rng.choice([PAGE_SIZE, 64 * 1024, MIB, 8 * MIB])
            info, _ = core.allocate_heap(h, 0, size)
            assert info.heap_id not in live
            live[info.heap_id] = (info.base, info.size)
        assert_pairwise_disjoint(live.values())
    assert sorted(live.values()) == sorted(core.live_heap_ranges())


def test_pool_exhaustion():
    core, _ = make_core()
    core.config.pool_span = 4 * MIB
    core._pool._free = [(core.config.pool_base, 4 * MIB)]
    h = holder(1)
    core.allocate_heap(h, 0, 2 * MIB)
    core.allocate_heap(h, 0, 2 * MIB)
    with pytest.raises(PoolExhausted):
        core.allocate_heap(h, 0, MIB)


# -- leases ----------------------------------------------------------------------


def test_renew_extends_by_period_from_now():
    core, clock = make_core()
    h = holder(1)
    _, lease = core.allocate_heap(h, 0, MIB)
    clock.advance(1.0)
    expiry = core.renew_lease(h, lease.lease_id)
    assert expiry == pytest.approx(clock.t + lease.renew_period)


def test_renew_expired_lease_refused():
    core, clock = make_core()
    h = holder(1)
    _, lease = core.allocate_heap(h, 0, MIB)
    clock.advance(lease.renew_period + 1)
    with pytest.raises(LeaseExpired):
        core.renew_lease(h, lease.lease_id)


def test_renew_unknown_lease():
    core, _ = make_core()
    with pytest.raises(UnknownLease):
        core.renew_lease(holder(1), 12345)


def test_ten_thousand_renewals_at_half_period_never_expire():
    core, clock = make_core()
    h = holder(1)
    _, lease = core.allocate_heap(h, 0, MIB)
    period = lease.renew_period
    for _ in range(10_000):
        clock.advance(period / 2)
        assert not core.expire_sweep()  # lease must still be alive
        core.renew_lease(h, lease.lease_id)
    assert core.lease_of(h, lease.heap_id) is not None


# -- sweep / notifications ----------------------------------------------------------


def test_server_expiry_notifies_surviving_client_and_keeps_heap():
    core, clock = make_core()
    server, client = holder(1), holder(2)
    rec, heap, server_lease = core.register_channel(server, "/ch/a", HEAP_MODE_SHARED, MIB)
    core.allocate_heap(client, rec.channel_id, 0, attach_heap_id=heap.heap_id)
    clock.advance(server_lease.renew_period / 2)
    core.renew_lease(client, core.lease_of(client, heap.heap_id).lease_id)
    clock.advance(server_lease.renew_period * 0.75)  # server lease now overdue
    notes = core.expire_sweep()
    assert len(notes) == 1
    assert notes[0].kind == NOTIFY_HOLDER_FAILED
    assert notes[0].recipient == client
    assert notes[0].failed_holder == server
    # client still holds the heap: not reclaimed
    assert core.live_heap_ranges() == [(heap.base, heap.size)]


def test_all_holders_expired_reclaims_heap_and_returns_space():
    core, clock = make_core()
    core.config.pool_span = 2 * MIB
    core._pool._free = [(core.config.pool_base, 2 * MIB)]
    h = holder(1)
    info, lease = core.allocate_heap(h, 0, 2 * MIB)
    clock.advance(lease.renew_period + 1)
    core.expire_sweep()
    assert core.live_heap_ranges() == []
    # orphaned space is reusable again
    info2, _ = core.allocate_heap(holder(2), 0, 2 * MIB)
    assert info2.base == info.base


def test_sweep_with_nothing_expired_is_noop():
    core, clock = make_core()
    h = holder(1)
    core.allocate_heap(h, 0, MIB)
    before = core.live_heap_ranges()
    assert core.expire_sweep() == []
    assert core.live_heap_ranges() == before


def test_notification_completeness_randomized():
    core, clock = make_core(default_quota=1 << 40)
    rng = random.Random(7)
    holders = [holder(i) for i in range(12)]
    rec, heap, _ = core.register_channel(holders[0], "/ch/x", HEAP_MODE_SHARED, MIB)
    for h in holders[1:]:
        core.allocate_heap(h, rec.channel_id, 0, attach_heap_id=heap.heap_id)
    dead = set(rng.sample(range(12), 5))
    ttl = core.config.lease_ttl
    clock.advance(ttl * 0.9)
    for i, h in enumerate(holders):
        if i not in dead:
            core.renew_lease(h, core.lease_of(h, heap.heap_id).lease_id)
    clock.advance(ttl * 0.5)  # dead holders now overdue, survivors not
    notes = core.expire_sweep()
    # every (dead, survivor) pair gets exactly one notification
    got = {}
    for n in notes:
        key = (n.failed_holder.pid, n.recipient.pid)
        got[key] = got.get(key, 0) + 1
    expected = {
        (d, s): 1 for d in dead for s in range(12) if s not in dead
    }
    assert {(k[0], k[1]): v for k, v in got.items()} == expected


# -- quotas ---------------------------------------------------------------------------


def test_quota_deny_and_allow_arithmetic():
    core, _ = make_core(default_quota=64 * MIB)
    h = holder(1)
    for _ in range(6):
        core.allocate_heap(h, 0, 10 * MIB)  # 60 MiB mapped
    ok, current, limit = core.check_quota(h, 8 * MIB)
    assert (ok, current, limit) == (False, 60 * MIB, 64 * MIB)
    ok, current, limit = core.check_quota(h, 4 * MIB)
    assert ok
    with pytest.raises(QuotaExceeded):
        core.allocate_heap(h, 0, 8 * MIB)
    # deny changed no state
    assert core.holder_mapped_bytes(h) == 60 * MIB


def test_shared_heap_counts_against_all_quotas():
    core, _ = make_core()
    a, b = holder(1), holder(2)
    rec, heap, _ = core.register_channel(a, "/ch/s", HEAP_MODE_SHARED, 16 * MIB)
    core.allocate_heap(b, rec.channel_id, 0, attach_heap_id=heap.heap_id)
    assert core.holder_mapped_bytes(a) == 16 * MIB
    assert core.holder_mapped_bytes(b) == 16 * MIB


def test_quota_safety_under_randomized_trace():
    core, clock = make_core(default_quota=32 * MIB)
    rng = random.Random(3)
    holders = [holder(i) for i in range(6)]
    live: dict[int, list] = {i: [] for i in range(6)}
    for _ in range(3000):
        i = rng.randrange(6)
        h = holders[i]
        if live[i] and rng.random() < 0.5:
            heap_id = live[i].pop(rng.randrange(len(live[i])))
            core.release_heap(h, heap_id)
        else:
            size = rng.choice([MIB, 4 * MIB, 16 * MIB])
            try:
                info, _ = core.allocate_heap(h, 0, size)
                live[i].append(info.heap_id)
            except QuotaExceeded:
                pass
        assert core.holder_mapped_bytes(h) <= 32 * MIB
    # ledger agrees with the sizes of the heaps each holder still maps
    for i, h in enumerate(holders):
        expected = sum(core._heaps[hid].info.size for hid in live[i])
        assert core.holder_mapped_bytes(h) == expected


# -- address-space soundness at scale -----------------------------------------------


def test_address_space_soundness_large_trace():
    core, _ = make_core(default_quota=1 << 44)
    h = holder(1)
    rng = random.Random(11)
    live = {}
    shadow = []  # interval oracle
    n_ops = 100_000
    for op in range(n_ops):
        if live and rng.random() < 0.48:
            heap_id = rng.choice(list(live))
            base, size = live.pop(heap_id)
            core.release_heap(h, heap_id)
            shadow.remove((base, size))
        else:
            size = rng.choice([PAGE_SIZE, PAGE_SIZE * 3, 256 * 1024])
            info, _ = core.allocate_heap(h, 0, size)
            live[info.heap_id] = (info.base, info.size)
            shadow.append((info.base, info.size))
        if op % 5000 == 0:
            assert_pairwise_disjoint(shadow)
    assert_pairwise_disjoint(shadow)
    assert sorted(shadow) == sorted(core.live_heap_ranges())


# -- wire server/client round trips ----------------------------------------------------


def test_client_server_full_session(orch):
    a = OrchestratorClient(orch.endpoint, HolderId(1, 100, 1))
    b_notes = []
    b = OrchestratorClient(orch.endpoint, HolderId(1, 200, 1), notify_cb=b_notes.append)
    try:
        channel_id, heap, lease = a.register_channel("/svc/kv", HEAP_MODE_SHARED, MIB)
        assert heap.size == MIB

        with pytest.raises(OrchestratorError):
            a.register_channel("/svc/kv", HEAP_MODE_SHARED, MIB)

        handle = b.lookup_channel("/svc/kv", attach=True)
        assert handle.channel_id == channel_id
        assert handle.heaps[0] == heap
        assert len(handle.leases) == 1

        allowed, current, limit = b.check_quota(1)
        assert allowed and current == MIB

        new_expiry = b.renew_lease(handle.leases[0].lease_id)
        assert new_expiry > 0

        info2, lease2 = a.allocate_heap(channel_id, MIB)
        assert info2.base != heap.base
        a.release_heap(info2.heap_id)

        with pytest.raises(OrchestratorError):
            b.lookup_channel("/not/there", attach=False)
    finally:
        a.close()
        b.close()


def test_lease_expiry_pushes_notify_to_survivor(orch):
    a = OrchestratorClient(orch.endpoint, HolderId(1, 300, 1))
    notes = []
    b = OrchestratorClient(orch.endpoint, HolderId(1, 400, 1), notify_cb=notes.append)
    try:
        channel_id, heap, lease = a.register_channel("/svc/dies", HEAP_MODE_SHARED, MIB)
        b.lookup_channel("/svc/dies", attach=True)
        ttl = orch.config.lease_ttl
        deadline = time.time() + ttl * 4
        # keep b alive, let a's lease run out
        b_lease = None
        handle = b.lookup_channel("/svc/dies", attach=True)
        b_lease = handle.leases[0].lease_id
        while time.time() < deadline and not notes:
            b.renew_lease(b_lease)
            time.sleep(ttl / 6)
        assert notes, "expected a failure notification for the dead server"
        assert notes[0].kind == NOTIFY_HOLDER_FAILED
        assert notes[0].heap_id == heap.heap_id
    finally:
        a.close()
        b.close()
