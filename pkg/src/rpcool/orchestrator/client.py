"""Client side of the orchestrator protocol.

One persistent socket per runtime; a reader thread matches replies to
requests by correlation id and hands NOTIFY pushes to a callback.
"""

from __future__ import annotations

import itertools
import socket
import threading
from dataclasses import dataclass

from ..errors import ORCH_ERRORS, OrchestratorError, Status, TransportError
from .wire import (
    MSG_ALLOC_HEAP,
    MSG_CLOSE_CHANNEL,
    MSG_LOOKUP_CHANNEL,
    MSG_NOTIFY,
    MSG_QUOTA_QUERY,
    MSG_REGISTER_CHANNEL,
    MSG_RELEASE_HEAP,
    MSG_RENEW_LEASE,
    HeapInfo,
    HolderId,
    LeaseInfo,
    Reader,
    Writer,
    get_heap,
    get_lease,
    recv_frame,
    send_frame,
)


@dataclass(frozen=True)
class Notification:
    kind: int
    heap_id: int
    channel_id: int
    failed_holder: HolderId


@dataclass(frozen=True)
class ChannelHandle:
    name: str
    channel_id: int
    heap_mode: int
    server_holder: HolderId | None
    fallback_endpoint: str
    heaps: tuple[HeapInfo, ...]
    leases: tuple[LeaseInfo, ...]


def _raise_for(code: int) -> None:
    exc = ORCH_ERRORS.get(code)
    if exc is None:
        raise OrchestratorError(code)
    # error classes carry context we no longer have; re-raise with the code
    raise OrchestratorError(code, Status.name(code))


class OrchestratorClient:
    def __init__(self, endpoint: tuple[str, int], holder: HolderId, notify_cb=None):
        self.holder = holder
        self.notify_cb = notify_cb
        self._sock = socket.create_connection(endpoint, timeout=10)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock.settimeout(None)
        self._corr = itertools.count(1)
        self._send_lock = threading.Lock()
        self._waiters: dict[int, tuple[threading.Event, list]] = {}
        self._waiters_lock = threading.Lock()
        self._closed = False
        self._reader = threading.Thread(target=self._read_loop, name="orch-client", daemon=True)
        self._reader.start()

    def close(self) -> None:
        self._closed = True
        try:
            self._sock.close()
        except OSError:
            pass

    def _read_loop(self) -> None:
        while not self._closed:
            try:
                msg_type, payload = recv_frame(self._sock)
            except (ConnectionError, OSError):
                self._fail_all_waiters()
                return
            r = Reader(payload)
            corr = r.u64()
            if msg_type == MSG_NOTIFY:
                note = Notification(r.u8(), r.u64(), r.u64(), r.holder())
                if self.notify_cb is not None:
                    try:
                        self.notify_cb(note)
                    except Exception:
                        pass
                continue
            with self._waiters_lock:
                waiter = self._waiters.pop(corr, None)
            if waiter is not None:
                event, slot = waiter
                slot.append(r)
                event.set()

    def _fail_all_waiters(self) -> None:
        with self._waiters_lock:
            for event, slot in self._waiters.values():
                slot.append(None)
                event.set()
            self._waiters.clear()

    def _request(self, msg_type: int, build) -> tuple[int, Reader]:
        corr = next(self._corr)
        w = Writer().u64(corr).holder(self.holder)
        build(w)
        event = threading.Event()
        slot: list = []
        with self._waiters_lock:
            self._waiters[corr] = (event, slot)
        with self._send_lock:
            send_frame(self._sock, msg_type, w.payload())
        if not event.wait(timeout=30):
            with self._waiters_lock:
                self._waiters.pop(corr, None)
            raise TransportError("orchestrator request timed out")
        r = slot[0]
        if r is None:
            raise TransportError("orchestrator connection lost")
        status = r.u16()
        if status != Status.OK and msg_type != MSG_QUOTA_QUERY:
            _raise_for(status)
        return status, r

    # -- operations -------------------------------------------------------------

    def register_channel(
        self,
        name: str,
        heap_mode: int,
        initial_heap_size: int,
        fallback_endpoint: str = "",
        acl: frozenset[int] = frozenset(),
    ) -> tuple[int, HeapInfo, LeaseInfo]:
        acl_str = ",".join(f"{n:x}" for n in sorted(acl))
        _, r = self._request(
            MSG_REGISTER_CHANNEL,
            lambda w: w.string(name).u8(heap_mode).u64(initial_heap_size)
            .string(fallback_endpoint).string(acl_str),
        )
        return r.u64(), get_heap(r), get_lease(r)

    def lookup_channel(self, name: str, attach: bool) -> ChannelHandle:
        _, r = self._request(MSG_LOOKUP_CHANNEL, lambda w: w.string(name).u8(1 if attach else 0))
        channel_id = r.u64()
        heap_mode = r.u8()
        server_holder = r.holder()
        fallback = r.string()
        n = r.u16()
        heaps = []
        leases = []
        for _ in range(n):
            heaps.append(get_heap(r))
            if attach:
                leases.append(get_lease(r))
        return ChannelHandle(
            name, channel_id, heap_mode, server_holder, fallback, tuple(heaps), tuple(leases)
        )

    def allocate_heap(
        self, channel_id: int, size: int, attach_heap_id: int = 0
    ) -> tuple[HeapInfo, LeaseInfo]:
        _, r = self._request(
            MSG_ALLOC_HEAP, lambda w: w.u64(channel_id).u64(size).u64(attach_heap_id)
        )
        return get_heap(r), get_lease(r)

    def release_heap(self, heap_id: int) -> None:
        self._request(MSG_RELEASE_HEAP, lambda w: w.u64(heap_id))

    def renew_lease(self, lease_id: int) -> int:
        _, r = self._request(MSG_RENEW_LEASE, lambda w: w.u64(lease_id))
        return r.u64()

    def check_quota(self, additional: int) -> tuple[bool, int, int]:
        status, r = self._request(MSG_QUOTA_QUERY, lambda w: w.u64(additional))
        return status == Status.OK, r.u64(), r.u64()

    def close_channel(self, channel_id: int) -> None:
        self._request(MSG_CLOSE_CHANNEL, lambda w: w.u64(channel_id))
