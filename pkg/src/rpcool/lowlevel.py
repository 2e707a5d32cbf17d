"""ctypes bindings for the privileged memory primitives.

Everything here manipulates raw virtual addresses: fixed-address file
mappings, page permission changes, kernel-mediated access probes, and a
process-shared robust mutex that lives inside shared memory.  Only the
node runtime is supposed to call into this module directly.
"""

from __future__ import annotations

import ctypes
import errno
import os
import struct
import threading

from .errors import RpcoolError

_libc = ctypes.CDLL("libc.so.6", use_errno=True)
_libc.mmap.restype = ctypes.c_void_p
_libc.mmap.argtypes = [
    ctypes.c_void_p,
    ctypes.c_size_t,
    ctypes.c_int,
    ctypes.c_int,
    ctypes.c_int,
    ctypes.c_long,
]
_libc.munmap.argtypes = [ctypes.c_void_p, ctypes.c_size_t]
_libc.munmap.restype = ctypes.c_int
_libc.mprotect.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int]
_libc.mprotect.restype = ctypes.c_int

try:
    _libpthread = ctypes.CDLL("libpthread.so.0", use_errno=True)
except OSError:  # merged into libc on newer glibc
    _libpthread = _libc

PAGE_SIZE = os.sysconf("SC_PAGESIZE")

PROT_NONE = 0
PROT_READ = 1
PROT_WRITE = 2
PROT_RW = PROT_READ | PROT_WRITE

_MAP_SHARED = 0x01
_MAP_PRIVATE = 0x02
_MAP_ANONYMOUS = 0x20
# Refuse-if-occupied since Linux 4.17; older kernels ignore the bit and treat
# the address as a hint, so the result is verified against the request below.
_MAP_FIXED_NOREPLACE = 0x100000

_MAP_FAILED = ctypes.c_void_p(-1).value


class AddressInUse(RpcoolError):
    """The requested fixed base address is occupied in this process."""

    def __init__(self, base: int, size: int):
        super().__init__(
            f"cannot map [0x{base:x}, 0x{base + size:x}): address range occupied in this "
            "process; configure a different pool base"
        )
        self.base = base
        self.size = size


def _check(rc: int, what: str) -> None:
    if rc != 0:
        e = ctypes.get_errno()
        raise OSError(e, f"{what}: {os.strerror(e)}")


def page_align_down(addr: int) -> int:
    return addr & ~(PAGE_SIZE - 1)


def page_align_up(n: int) -> int:
    return (n + PAGE_SIZE - 1) & ~(PAGE_SIZE - 1)


def map_file_fixed(fd: int, base: int, size: int, shared: bool = True) -> memoryview:
    """Map `size` bytes of `fd` at exactly `base`; never anywhere else."""
    if base % PAGE_SIZE or size % PAGE_SIZE or size <= 0:
        raise ValueError("base and size must be page aligned, size positive")
    flags = (_MAP_SHARED if shared else _MAP_PRIVATE) | _MAP_FIXED_NOREPLACE
    addr = _libc.mmap(base, size, PROT_RW, flags, fd, 0)
    if addr == _MAP_FAILED:
        e = ctypes.get_errno()
        if e == errno.EEXIST:
            raise AddressInUse(base, size)
        raise OSError(e, f"mmap: {os.strerror(e)}")
    if addr != base:
        # pre-4.17 kernel treated the request as a hint and moved it
        _libc.munmap(addr, size)
        raise AddressInUse(base, size)
    return view_of(base, size)


def map_anonymous_fixed(base: int, size: int) -> memoryview:
    """Process-private zeroed pages at exactly `base`."""
    if base % PAGE_SIZE or size % PAGE_SIZE or size <= 0:
        raise ValueError("base and size must be page aligned, size positive")
    addr = _libc.mmap(
        base, size, PROT_RW, _MAP_PRIVATE | _MAP_ANONYMOUS | _MAP_FIXED_NOREPLACE, -1, 0
    )
    if addr == _MAP_FAILED:
        e = ctypes.get_errno()
        if e == errno.EEXIST:
            raise AddressInUse(base, size)
        raise OSError(e, f"mmap: {os.strerror(e)}")
    if addr != base:
        _libc.munmap(addr, size)
        raise AddressInUse(base, size)
    return view_of(base, size)


def map_anonymous(size: int) -> tuple[int, memoryview]:
    """Process-private zeroed pages wherever the kernel likes."""
    size = page_align_up(size)
    addr = _libc.mmap(0, size, PROT_RW, _MAP_PRIVATE | _MAP_ANONYMOUS, -1, 0)
    if addr == _MAP_FAILED:
        e = ctypes.get_errno()
        raise OSError(e, f"mmap: {os.strerror(e)}")
    return addr, view_of(addr, size)


def unmap(base: int, size: int) -> None:
    _check(_libc.munmap(base, size), "munmap")


def set_protection(base: int, size: int, prot: int) -> None:
    """mprotect a page-aligned range."""
    _check(_libc.mprotect(base, size, prot), "mprotect")


def view_of(addr: int, size: int) -> memoryview:
    """A writable byte view over raw process memory. No checks; trusted callers only."""
    return memoryview((ctypes.c_char * size).from_address(addr)).cast("B")


class _ProbePipe:
    """Kernel-mediated load/store probe.

    Routing the copy through a pipe turns what would be a fatal SIGSEGV
    into EFAULT on the syscall, letting tests verify real page
    permissions without crashing the process.
    """

    def __init__(self):
        self.r, self.w = os.pipe()
        self._lock = threading.Lock()

    def can_read(self, addr: int, size: int = 1) -> bool:
        size = min(size, 4096)
        with self._lock:
            try:
                os.write(self.w, view_of(addr, size))
            except OSError as e:
                if e.errno == errno.EFAULT:
                    return False
                raise
            os.read(self.r, size)
            return True

    def can_write(self, addr: int, size: int = 1) -> bool:
        size = min(size, 4096)
        with self._lock:
            os.write(self.w, b"\0" * size)
            try:
                got = os.readv(self.r, [view_of(addr, size)])
            except OSError as e:
                if e.errno == errno.EFAULT:
                    os.read(self.r, size)  # drain
                    return False
                raise
            assert got == size
            return True


_probe: _ProbePipe | None = None
_probe_lock = threading.Lock()


def _get_probe() -> _ProbePipe:
    global _probe
    if _probe is None:
        with _probe_lock:
            if _probe is None:
                _probe = _ProbePipe()
    return _probe


def kernel_can_read(addr: int, size: int = 1) -> bool:
    """True iff the kernel will service a load from [addr, addr+size)."""
    return _get_probe().can_read(addr, size)


def kernel_can_write(addr: int, size: int = 1) -> bool:
    """True iff the kernel will service a store to [addr, addr+size).

    A successful probe writes zeroes into the target bytes.
    """
    return _get_probe().can_write(addr, size)


# -- process-shared mutex ----------------------------------------------------

_PTHREAD_PROCESS_SHARED = 1
_PTHREAD_MUTEX_ROBUST = 1
_EOWNERDEAD = 130

MUTEX_SIZE = 40  # glibc x86-64 pthread_mutex_t


class SharedMutex:
    """Robust, process-shared pthread mutex embedded in shared memory.

    The creator calls init() exactly once; every process then constructs
    a SharedMutex over the same address.  If a holder dies, the next
    locker recovers the mutex (EOWNERDEAD -> pthread_mutex_consistent).
    """

    __slots__ = ("addr", "_vp")

    def __init__(self, addr: int):
        if addr % 8:
            raise ValueError("mutex address must be 8-byte aligned")
        self.addr = addr
        self._vp = ctypes.c_void_p(addr)

    def init(self) -> "SharedMutex":
        attr = ctypes.create_string_buffer(8)
        _check(_libpthread.pthread_mutexattr_init(attr), "mutexattr_init")
        _check(
            _libpthread.pthread_mutexattr_setpshared(attr, _PTHREAD_PROCESS_SHARED),
            "mutexattr_setpshared",
        )
        _check(
            _libpthread.pthread_mutexattr_setrobust(attr, _PTHREAD_MUTEX_ROBUST),
            "mutexattr_setrobust",
        )
        _check(_libpthread.pthread_mutex_init(self._vp, attr), "mutex_init")
        _libpthread.pthread_mutexattr_destroy(attr)
        return self

    def acquire(self) -> None:
        rc = _libpthread.pthread_mutex_lock(self._vp)
        if rc == _EOWNERDEAD:
            # previous owner died holding the lock; shared state may need
            # repair, which our users handle by construction (all critical
            # sections leave metadata consistent before unlock)
            _check(_libpthread.pthread_mutex_consistent(self._vp), "mutex_consistent")
        elif rc != 0:
            raise OSError(rc, f"pthread_mutex_lock: {os.strerror(rc)}")

    def release(self) -> None:
        rc = _libpthread.pthread_mutex_unlock(self._vp)
        if rc != 0:
            raise OSError(rc, f"pthread_mutex_unlock: {os.strerror(rc)}")

    def __enter__(self):
        self.acquire()
        return self

    def __exit__(self, *exc):
        self.release()
        return False


# -- tiny struct helpers -----------------------------------------------------

U64 = struct.Struct("<Q")
U32 = struct.Struct("<I")


def hardware_keys_available() -> bool:
    """Probe for memory-protection-key syscalls (absent on this kernel class)."""
    SYS_pkey_alloc = 330  # x86-64
    _libc.syscall.restype = ctypes.c_long
    rc = _libc.syscall(SYS_pkey_alloc, 0, 0)
    if rc >= 0:
        SYS_pkey_free = 331
        _libc.syscall(SYS_pkey_free, rc)
        return True
    return False
