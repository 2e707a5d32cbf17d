"""TCP front end for the orchestrator core.

One thread per runtime session; a sweep thread expires leases and pushes
NOTIFY frames to the surviving holders' sessions.  Undeliverable
notifications are retried for one lease period, then dropped.
"""

from __future__ import annotations

import logging
import socket
import threading
import time

from ..config import OrchestratorConfig
from ..errors import OrchestratorError, Status, WireError
from .service import FailureNotification, OrchestratorCore
from .wire import (
    MSG_ALLOC_HEAP,
    MSG_CLOSE_CHANNEL,
    MSG_LOOKUP_CHANNEL,
    MSG_NOTIFY,
    MSG_QUOTA_QUERY,
    MSG_REGISTER_CHANNEL,
    MSG_RELEASE_HEAP,
    MSG_RENEW_LEASE,
    NOTIFY_HEAP_RECLAIMED,
    Reader,
    Writer,
    put_heap,
    put_lease,
    recv_frame,
    send_frame,
)

log = logging.getLogger("rpcool.orchestrator")


class _Session:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.send_lock = threading.Lock()
        self.alive = True

    def send(self, msg_type: int, payload: bytes) -> bool:
        with self.send_lock:
            try:
                send_frame(self.sock, msg_type, payload)
                return True
            except OSError:
                self.alive = False
                return False


class OrchestratorServer:
    """Serves the wire protocol on a configurable endpoint."""

    def __init__(self, config: OrchestratorConfig | None = None, clock=time.time):
        self.config = config or OrchestratorConfig()
        self.core = OrchestratorCore(self.config, clock=clock)
        self._listener: socket.socket | None = None
        self._threads: list[threading.Thread] = []
        self._sessions_by_holder: dict[tuple, _Session] = {}
        self._sessions_lock = threading.Lock()
        self._pending_notes: list[tuple[FailureNotification, float]] = []
        self._stop = threading.Event()
        self.endpoint: tuple[str, int] | None = None

    # -- lifecycle ------------------------------------------------------------

    def start(self) -> "OrchestratorServer":
        host, port = self.config.endpoint
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(64)
        self.endpoint = self._listener.getsockname()[:2]
        t = threading.Thread(target=self._accept_loop, name="orch-accept", daemon=True)
        t.start()
        s = threading.Thread(target=self._sweep_loop, name="orch-sweep", daemon=True)
        s.start()
        self._threads += [t, s]
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        with self._sessions_lock:
            for sess in self._sessions_by_holder.values():
                try:
                    sess.sock.close()
                except OSError:
                    pass
            self._sessions_by_holder.clear()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
        return False

    # -- accept/serve -----------------------------------------------------------

    def _accept_loop(self) -> None:
        assert self._listener is not None
        while not self._stop.is_set():
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            t = threading.Thread(target=self._serve_session, args=(sock,), daemon=True)
            t.start()

    def _serve_session(self, sock: socket.socket) -> None:
        sess = _Session(sock)
        try:
            while not self._stop.is_set():
                try:
                    msg_type, payload = recv_frame(sock)
                except (ConnectionError, OSError):
                    return
                try:
                    reply_type, reply = self._dispatch(sess, msg_type, payload)
                except WireError as e:
                    log.warning("dropping malformed frame: %s", e)
                    return
                if reply is not None:
                    if not sess.send(reply_type, reply):
                        return
        finally:
            sess.alive = False
            try:
                sock.close()
            except OSError:
                pass

    def _bind_session(self, sess: _Session, holder_key: tuple) -> None:
        with self._sessions_lock:
            self._sessions_by_holder[holder_key] = sess

    # -- request dispatch -------------------------------------------------------

    def _dispatch(self, sess: _Session, msg_type: int, payload: bytes):
        r = Reader(payload)
        corr = r.u64()
        holder = r.holder()
        self._bind_session(sess, holder.key())
        w = Writer().u64(corr)
        try:
            if msg_type == MSG_REGISTER_CHANNEL:
                name = r.string()
                heap_mode = r.u8()
                size = r.u64()
                fb = r.string()
                acl_raw = r.string()
                acl = frozenset(int(x, 16) for x in acl_raw.split(",") if x)
                rec, info, lease = self.core.register_channel(
                    holder, name, heap_mode, size, fb, acl
                )
                w.u16(Status.OK).u64(rec.channel_id)
                put_heap(w, info)
                put_lease(w, self.core.lease_info(lease))
            elif msg_type == MSG_LOOKUP_CHANNEL:
                name = r.string()
                attach = r.u8()
                rec, heaps = self.core.lookup_channel(holder, name, bool(attach))
                w.u16(Status.OK).u64(rec.channel_id).u8(rec.heap_mode)
                w.holder(rec.server_holder).string(rec.fallback_endpoint)
                w.u16(len(heaps))
                for info, lease in heaps:
                    put_heap(w, info)
                    if attach:
                        assert lease is not None
                        put_lease(w, self.core.lease_info(lease))
            elif msg_type == MSG_ALLOC_HEAP:
                channel_id = r.u64()
                size = r.u64()
                attach_id = r.u64()
                info, lease = self.core.allocate_heap(holder, channel_id, size, attach_id)
                w.u16(Status.OK)
                put_heap(w, info)
                put_lease(w, self.core.lease_info(lease))
            elif msg_type == MSG_RELEASE_HEAP:
                heap_id = r.u64()
                self.core.release_heap(holder, heap_id)
                w.u16(Status.OK)
            elif msg_type == MSG_RENEW_LEASE:
                lease_id = r.u64()
                expiry = self.core.renew_lease(holder, lease_id)
                w.u16(Status.OK).u64(int(expiry * 1e9))
            elif msg_type == MSG_QUOTA_QUERY:
                additional = r.u64()
                ok, current, limit = self.core.check_quota(holder, additional)
                w.u16(Status.OK if ok else Status.QUOTA_DENIED).u64(current).u64(limit)
            elif msg_type == MSG_CLOSE_CHANNEL:
                channel_id = r.u64()
                notes = self.core.close_channel(holder, channel_id)
                self._queue_notifications(notes)
                w.u16(Status.OK)
            else:
                w.u16(Status.BAD_REQUEST)
        except OrchestratorError as e:
            w = Writer().u64(corr).u16(e.code)
        return msg_type, w.payload()

    # -- notifications ------------------------------------------------------------

    def _queue_notifications(self, notes: list[FailureNotification]) -> None:
        deadline = time.monotonic() + self.config.lease_ttl
        for note in notes:
            if note.kind == NOTIFY_HEAP_RECLAIMED and note.recipient == note.failed_holder:
                continue  # audit-only entry; nobody to deliver to
            if not self._deliver(note):
                self._pending_notes.append((note, deadline))

    def _deliver(self, note: FailureNotification) -> bool:
        with self._sessions_lock:
            sess = self._sessions_by_holder.get(note.recipient.key())
        if sess is None or not sess.alive:
            return False
        w = Writer().u64(0)
        w.u8(note.kind).u64(note.heap_id).u64(note.channel_id).holder(note.failed_holder)
        return sess.send(MSG_NOTIFY, w.payload())

    def _sweep_loop(self) -> None:
        while not self._stop.wait(self.config.sweep_interval):
            try:
                notes = self.core.expire_sweep()
            except Exception:
                log.exception("sweep failed")
                continue
            self._queue_notifications(notes)
            if self._pending_notes:
                now = time.monotonic()
                still = []
                for note, deadline in self._pending_notes:
                    if self._deliver(note):
                        continue
                    if deadline > now:
                        still.append((note, deadline))
                self._pending_notes = still
