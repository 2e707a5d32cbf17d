import os

import pytest

from rpcool import lowlevel
from rpcool.lowlevel import (
    PAGE_SIZE,
    PROT_NONE,
    PROT_READ,
    PROT_RW,
    AddressInUse,
    SharedMutex,
    kernel_can_read,
    kernel_can_write,
    map_file_fixed,
    set_protection,
    unmap,
)

BASE = 0x7B00_0000_0000


@pytest.fixture
def shm_file(tmp_path):
    path = "/dev/shm/rpcool-lowlevel-test"
    fd = os.open(path, os.O_CREAT | os.O_RDWR, 0o600)
    os.ftruncate(fd, 1 << 20)
    yield fd
    os.close(fd)
    os.unlink(path)


def test_fixed_mapping_lands_at_requested_base(shm_file):
    mv = map_file_fixed(shm_file, BASE, 1 << 20)
    try:
        mv[0:4] = b"ping"
        assert bytes(mv[0:4]) == b"ping"
    finally:
        unmap(BASE, 1 << 20)


def test_double_fixed_mapping_raises(shm_file):
    map_file_fixed(shm_file, BASE, 1 << 20)
    try:
        with pytest.raises(AddressInUse):
            map_file_fixed(shm_file, BASE, 1 << 20)
    finally:
        unmap(BASE, 1 << 20)


def test_kernel_probes_reflect_page_permissions(shm_file):
    mv = map_file_fixed(shm_file, BASE, 1 << 20)
    mv[0] = 7
    try:
        assert kernel_can_read(BASE)
        assert kernel_can_write(BASE + PAGE_SIZE)

        set_protection(BASE, PAGE_SIZE, PROT_READ)
        assert kernel_can_read(BASE)
        assert not kernel_can_write(BASE)
        assert kernel_can_write(BASE + PAGE_SIZE)  # neighbour unaffected

        set_protection(BASE, PAGE_SIZE, PROT_NONE)
        assert not kernel_can_read(BASE)
        assert not kernel_can_write(BASE)

        set_protection(BASE, PAGE_SIZE, PROT_RW)
        assert kernel_can_write(BASE)
    finally:
        unmap(BASE, 1 << 20)


def test_probe_write_actually_stores(shm_file):
    mv = map_file_fixed(shm_file, BASE, 1 << 20)
    try:
        mv[100] = 0xAB
        assert kernel_can_write(BASE + 100)
        assert mv[100] == 0  # probe stores zeroes
    finally:
        unmap(BASE, 1 << 20)


def test_shared_mutex_mutual_exclusion_threads(shm_file):
    import threading

    mv = map_file_fixed(shm_file, BASE, 1 << 20)
    try:
        mutex = SharedMutex(BASE + 64).init()
        counter = [0]

        def worker():
            for _ in range(5000):
                with mutex:
                    counter[0] += 1

        threads = [threading.Thread(target=worker) for _ in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert counter[0] == 20000
    finally:
        unmap(BASE, 1 << 20)


def test_page_align_helpers():
    assert lowlevel.page_align_up(1) == PAGE_SIZE
    assert lowlevel.page_align_up(PAGE_SIZE) == PAGE_SIZE
    assert lowlevel.page_align_down(PAGE_SIZE + 1) == PAGE_SIZE
