"""Exception hierarchy and RPC error codes."""

from __future__ import annotations


class RpcoolError(Exception):
    """Base class for all errors raised by this package."""


class WireError(RpcoolError):
    """Malformed or truncated frame on a control or fallback stream."""


class OrchestratorError(RpcoolError):
    """Request rejected by the orchestrator."""

    def __init__(self, code: int, message: str = ""):
        super().__init__(message or f"orchestrator error {code}")
        self.code = code


class DuplicateName(OrchestratorError):
    def __init__(self, name: str):
        super().__init__(Status.DUPLICATE_NAME, f"channel name already registered: {name}")


class MalformedName(OrchestratorError):
    def __init__(self, name: str):
        super().__init__(Status.MALFORMED_NAME, f"malformed channel name: {name!r}")


class UnknownChannel(OrchestratorError):
    def __init__(self, name: str):
        super().__init__(Status.UNKNOWN_CHANNEL, f"no such channel: {name}")


class QuotaExceeded(OrchestratorError):
    def __init__(self, current: int, limit: int):
        super().__init__(Status.QUOTA_DENIED, f"quota exceeded: mapped {current} of {limit} bytes")
        self.current = current
        self.limit = limit


class PoolExhausted(OrchestratorError):
    def __init__(self, size: int):
        super().__init__(Status.POOL_EXHAUSTED, f"no free address range of {size} bytes in pool")


class UnknownLease(OrchestratorError):
    def __init__(self, lease_id: int):
        super().__init__(Status.UNKNOWN_LEASE, f"unknown lease {lease_id}")


class LeaseExpired(OrchestratorError):
    def __init__(self, lease_id: int):
        super().__init__(Status.LEASE_EXPIRED, f"lease {lease_id} already expired; remap the heap")


class AccessDenied(OrchestratorError):
    def __init__(self, msg: str = "access denied"):
        super().__init__(Status.ACCESS_DENIED, msg)


class MemoryFault(RpcoolError):
    """A checked memory access was refused.

    Raised when an access through the heap accessors hits an unmapped
    address, a page whose permissions forbid the access, or a range
    outside the calling thread's active sandbox.
    """

    def __init__(self, addr: int, size: int, kind: str):
        super().__init__(f"{kind} fault at 0x{addr:x} (+{size})")
        self.addr = addr
        self.size = size
        self.kind = kind  # 'unmapped' | 'protection' | 'sandbox'


class SandboxViolation(MemoryFault):
    def __init__(self, addr: int, size: int):
        super().__init__(addr, size, "sandbox")


class HeapError(RpcoolError):
    """Shared-heap allocator misuse or exhaustion."""


class OutOfSpace(HeapError):
    pass


class DoubleFree(HeapError):
    pass


class ForeignAddress(HeapError):
    pass


class ScopeStateError(HeapError):
    """Operation on a scope that is sealed or destroyed."""


class SealError(RpcoolError):
    pass


class SealNotComplete(SealError):
    """release() refused because the receiver has not marked the RPC complete."""


class SealRingFull(SealError):
    pass


class SealStateError(SealError):
    """Descriptor is not in the state the operation requires."""


class SealRoleError(SealError):
    """Operation attempted by the wrong side of the connection."""


class SandboxError(RpcoolError):
    pass


class NestedSandbox(SandboxError):
    pass


class TransportError(RpcoolError):
    pass


class ChannelClosed(TransportError):
    pass


class CallError(RpcoolError):
    """An RPC completed with an error status."""

    def __init__(self, code: int, message: str = ""):
        super().__init__(message or f"rpc failed with status {code}")
        self.code = code


class Status:
    """Status codes shared by the orchestrator wire protocol and RPC responses."""

    OK = 0
    # orchestrator request statuses
    DUPLICATE_NAME = 1
    MALFORMED_NAME = 2
    UNKNOWN_CHANNEL = 3
    QUOTA_DENIED = 4
    POOL_EXHAUSTED = 5
    UNKNOWN_LEASE = 6
    LEASE_EXPIRED = 7
    UNKNOWN_HEAP = 8
    ACCESS_DENIED = 9
    BAD_REQUEST = 10
    # RPC completion statuses (match RpcMessage status field, offset past in-progress values)
    UNKNOWN_FUNCTION = 32
    HANDLER_ERROR = 33
    SEAL_VERIFICATION_FAILED = 34
    SANDBOX_VIOLATION = 35
    TRANSPORT_DOWN = 36

    _NAMES: dict[int, str] = {}

    @classmethod
    def name(cls, code: int) -> str:
        if not cls._NAMES:
            cls._NAMES = {
                v: k for k, v in vars(cls).items() if isinstance(v, int) and not k.startswith("_")
            }
        return cls._NAMES.get(code, f"status-{code}")


ORCH_ERRORS = {
    Status.DUPLICATE_NAME: DuplicateName,
    Status.MALFORMED_NAME: MalformedName,
    Status.UNKNOWN_CHANNEL: UnknownChannel,
    Status.QUOTA_DENIED: QuotaExceeded,
    Status.POOL_EXHAUSTED: PoolExhausted,
    Status.UNKNOWN_LEASE: UnknownLease,
    Status.LEASE_EXPIRED: LeaseExpired,
    Status.ACCESS_DENIED: AccessDenied,
}
