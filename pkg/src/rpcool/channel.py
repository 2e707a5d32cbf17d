"""Channels, connections, handler dispatch, and the busy-wait policy.

A server creates a named channel (registered with the orchestrator) and
listens; clients connect and get a Connection bound to a heap according
to the channel's heap mode.  The transport is chosen per connection:
shared-memory rings when both ends can map the pool, or the two-node
fallback stream when they cannot.  The calling API is identical either
way.

Connect handshake over shared memory: the channel's root heap carries a
connect ring (its address sits in the heap directory).  A client
allocates its connection heap, builds the message and descriptor rings
inside it, and publishes their addresses in a connect-ring slot; the
server attaches the heap and acks the slot.
"""

from __future__ import annotations

import os
import queue
import struct
import threading
import time
import zlib
from dataclasses import dataclass

from .config import RuntimeConfig
from .errors import (
    CallError,
    RpcoolError,
    Status,
    TransportError,
)
from .heap import DIR_CONNECT_RING, SharedHeap
from .lowlevel import PAGE_SIZE, SharedMutex
from .orchestrator.service import HEAP_MODE_PRIVATE, HEAP_MODE_SHARED
from .rings import (
    FLAG_SANDBOX,
    FLAG_SEALED,
    MessageRing,
    ReceivedMessage,
    RpcMessage,
    ST_COMPLETE,
    error_code,
    error_status,
    is_error,
)
from .runtime import NodeRuntime
from .sandbox import SandboxManager
from .seal import ROLE_RECEIVER, ROLE_SENDER, SealManager, SealTicket


def function_id(name: str) -> int:
    """Stable id for a handler name; the registry helper at the API edge."""
    return zlib.crc32(name.encode("utf-8")) & 0x7FFFFFFF


# -- adaptive busy-wait --------------------------------------------------------


def next_sleep(
    load: float,
    thresholds: tuple[float, float] = (0.25, 0.50),
    sleeps: tuple[float, float, float] = (0.0, 5e-6, 150e-6),
) -> float:
    """Sleep to insert between poll iterations, as a pure step function of load:
    nothing under the low threshold, a short nap in the middle band, a long
    one when the CPU is busy."""
    if not 0.0 <= load <= 1.0:
        raise ValueError(f"load must be within [0, 1], got {load}")
    low, high = thresholds
    if load < low:
        return sleeps[0]
    if load <= high:
        return sleeps[1]
    return sleeps[2]


class LoadMonitor:
    """Process CPU load as cpu-time over wall-time in a ~100 ms window."""

    def __init__(self, window: float = 0.1):
        self.window = window
        self._wall = time.monotonic()
        self._cpu = time.process_time()
        self._load = 0.0

    def load(self) -> float:
        now = time.monotonic()
        elapsed = now - self._wall
        if elapsed >= self.window:
            cpu = time.process_time()
            self._load = min(1.0, max(0.0, (cpu - self._cpu) / elapsed))
            self._wall = now
            self._cpu = cpu
        return self._load


class WaitPolicy:
    def __init__(self, config: RuntimeConfig):
        self.thresholds = config.busywait_thresholds
        self.sleeps = config.busywait_sleeps
        self.monitor = LoadMonitor()

    def pause(self) -> None:
        delay = next_sleep(self.monitor.load(), self.thresholds, self.sleeps)
        if delay > 0:
            time.sleep(delay)


# -- connect ring -----------------------------------------------------------------

_CONNECT_HDR = struct.Struct("<II")  # capacity, reserved (after 40-byte mutex)
CONNECT_SLOTS = 64
CONNECT_SLOT_SIZE = 128
_CONNECT_SLOT = struct.Struct("<II QQQ QQQ Q")
# state, error, holder(node,pid,inc), conn_heap_id, msg_ring, seal_ring, token

CS_EMPTY, CS_REQUEST, CS_ACK, CS_ERROR = 0, 1, 2, 3


class _ConnectRing:
    def __init__(self, heap: SharedHeap, addr: int):
        self.heap = heap
        self.addr = addr
        self.off = addr - heap.base
        self.mutex = SharedMutex(addr)
        (self.capacity,) = struct.unpack_from("<I", heap.mv, self.off + 40)

    @classmethod
    def create(cls, heap: SharedHeap) -> "_ConnectRing":
        size = 48 + CONNECT_SLOTS * CONNECT_SLOT_SIZE
        addr = heap.allocate(size, align=64)
        off = addr - heap.base
        heap.mv[off : off + size] = b"\0" * size
        struct.pack_into("<II", heap.mv, off + 40, CONNECT_SLOTS, 0)
        SharedMutex(addr).init()
        heap.directory_set(DIR_CONNECT_RING, addr)
        return cls(heap, addr)

    @classmethod
    def attach(cls, heap: SharedHeap) -> "_ConnectRing":
        addr = heap.directory_get(DIR_CONNECT_RING)
        if not addr:
            raise TransportError("channel heap has no connect ring")
        return cls(heap, addr)

    def _slot_off(self, i: int) -> int:
        return self.off + 48 + i * CONNECT_SLOT_SIZE

    def submit(self, holder, conn_heap_id: int, msg_ring: int, seal_ring: int, token: int) -> int:
        with self.mutex:
            for i in range(self.capacity):
                off = self._slot_off(i)
                (state,) = struct.unpack_from("<I", self.heap.mv, off)
                if state == CS_EMPTY:
                    _CONNECT_SLOT.pack_into(
                        self.heap.mv,
                        off,
                        CS_REQUEST,
                        0,
                        holder.node,
                        holder.pid,
                        holder.incarnation,
                        conn_heap_id,
                        msg_ring,
                        seal_ring,
                        token,
                    )
                    return i
        raise TransportError("connect ring full")

    def poll_request(self) -> tuple[int, tuple] | None:
        with self.mutex:
            for i in range(self.capacity):
                off = self._slot_off(i)
                fields = _CONNECT_SLOT.unpack_from(self.heap.mv, off)
                if fields[0] == CS_REQUEST:
                    struct.pack_into("<I", self.heap.mv, off, CS_ACK + 100)  # claim marker
                    return i, fields
        return None

    def finish(self, i: int, ok: bool, error: int = 0) -> None:
        off = self._slot_off(i)
        struct.pack_into("<II", self.heap.mv, off, CS_ACK if ok else CS_ERROR, error)

    def wait_ack(self, i: int, policy: WaitPolicy, timeout: float) -> None:
        off = self._slot_off(i)
        deadline = time.monotonic() + timeout
        while True:
            state, err = struct.unpack_from("<II", self.heap.mv, off)
            if state == CS_ACK:
                struct.pack_into("<II", self.heap.mv, off, CS_EMPTY, 0)
                return
            if state == CS_ERROR:
                struct.pack_into("<II", self.heap.mv, off, CS_EMPTY, 0)
                raise TransportError(f"connect refused: {Status.name(err)}")
            if time.monotonic() > deadline:
                raise TransportError("connect timed out; is the server listening?")
            policy.pause()


# -- call context and responses ------------------------------------------------------


@dataclass
class Response:
    status: int
    ret_addr: int

    @property
    def ok(self) -> bool:
        return self.status == ST_COMPLETE

    @property
    def error_code(self) -> int:
        return error_code(self.status) if is_error(self.status) else 0

    def raise_for_status(self) -> "Response":
        if not self.ok:
            raise CallError(self.error_code, Status.name(self.error_code))
        return self


class CallContext:
    """Handed to handlers; records the response for publication by the
    dispatcher after any sandbox has been torn down."""

    __slots__ = ("connection", "message", "_status", "_ret", "_responded", "sandbox")

    def __init__(self, connection: "ServerConnection", message: ReceivedMessage):
        self.connection = connection
        self.message = message
        self._status = None
        self._ret = 0
        self._responded = False
        self.sandbox = None  # active SandboxContext when confined

    @property
    def heap(self) -> SharedHeap:
        return self.connection.heap

    @property
    def arg_addr(self) -> int:
        return self.message.arg_addr

    @property
    def scope_range(self) -> tuple[int, int]:
        return (self.message.scope_start, self.message.scope_len)

    def respond(self, ret_addr: int = 0, error: int | None = None) -> None:
        if self._responded:
            raise CallError(Status.HANDLER_ERROR, "respond called twice for one RPC")
        self._responded = True
        self._status = ST_COMPLETE if error is None else error_status(error)
        self._ret = ret_addr


# -- server side ------------------------------------------------------------------------


class ServerConnection:
    """Server-side endpoint of one connection (shared-memory transport)."""

    def __init__(self, channel: "Channel", heap: SharedHeap, ring: MessageRing, seal: SealManager, holder_key):
        self.channel = channel
        self.heap = heap
        self.ring = ring
        self.seal = seal
        self.holder_key = holder_key
        self.alive = True

    def poll(self) -> ReceivedMessage | None:
        return self.ring.try_consume()

    def publish(self, seq: int, status: int, ret_addr: int) -> None:
        self.ring.respond(seq, status, ret_addr)


@dataclass
class ChannelOptions:
    heap_mode: str = "private"  # 'private' | 'shared'
    initial_heap_size: int = 4 << 20
    conn_heap_size: int = 16 << 20
    ring_capacity: int = 0  # 0: use runtime config
    seal_ring_capacity: int = 0
    worker_threads: int = 0
    acl: frozenset[int] = frozenset()
    fallback_listen: tuple[str, int] | None = None
    connect_timeout: float = 30.0

    def mode_value(self) -> int:
        if self.heap_mode not in ("private", "shared"):
            raise ValueError(f"unknown heap mode {self.heap_mode!r}")
        return HEAP_MODE_PRIVATE if self.heap_mode == "private" else HEAP_MODE_SHARED


class Channel:
    """Server endpoint: owns the root heap, accepts connections, dispatches."""

    def __init__(self, runtime: NodeRuntime, name: str, opts: ChannelOptions | None = None):
        self.runtime = runtime
        self.name = name
        self.opts = opts or ChannelOptions()
        self.sandboxes = SandboxManager(runtime)
        fallback = self.opts.fallback_listen or runtime.config.fallback_listen
        self._fallback_listener = None
        fallback_endpoint = ""
        if fallback is not None:
            from .fallback import FallbackListener

            self._fallback_listener = FallbackListener(self, fallback)
            fallback_endpoint = "%s:%d" % self._fallback_listener.endpoint
        channel_id, info, lease = runtime.orch.register_channel(
            name,
            self.opts.mode_value(),
            self.opts.initial_heap_size,
            fallback_endpoint=fallback_endpoint,
            acl=self.opts.acl,
        )
        self.channel_id = channel_id
        mapped = runtime.map_heap(info, lease)
        self.root_heap = SharedHeap.initialize(mapped)
        self.connect_ring = _ConnectRing.create(self.root_heap)
        self.handlers: dict[int, object] = {}
        self.connections: list[ServerConnection] = []
        self._conn_lock = threading.Lock()
        self._inbox: queue.Queue = queue.Queue()  # fallback messages: (conn, msg)
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self.policy = WaitPolicy(runtime.config)
        self._workers = self.opts.worker_threads or runtime.config.worker_threads

    # -- handler registry -----------------------------------------------------------

    def register_handler(self, fid, handler) -> int:
        if isinstance(fid, str):
            fid = function_id(fid)
        if fid in self.handlers:
            raise RpcoolError(f"function id {fid} already registered")
        self.handlers[fid] = handler
        return fid

    def handler(self, name):
        """Decorator sugar: @channel.handler("ping")."""

        def wrap(fn):
            self.register_handler(name, fn)
            return fn

        return wrap

    # -- accept/dispatch loops ----------------------------------------------------------

    def listen(self) -> None:
        """Blocking accept+dispatch; use serve_background() in tests."""
        self._start_workers()
        self._accept_loop()

    def serve_background(self) -> "Channel":
        self._start_workers()
        t = threading.Thread(target=self._accept_loop, name=f"chan-{self.name}", daemon=True)
        t.start()
        self._threads.append(t)
        return self

    def _start_workers(self) -> None:
        self._work_q: queue.Queue = queue.Queue()
        for i in range(self._workers):
            t = threading.Thread(target=self._worker_loop, name=f"worker-{i}", daemon=True)
            t.start()
            self._threads.append(t)

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            busy = False
            req = self.connect_ring.poll_request()
            if req is not None:
                busy = True
                self._handle_connect(*req)
            with self._conn_lock:
                conns = list(self.connections)
            for conn in conns:
                msg = conn.poll()
                if msg is not None:
                    busy = True
                    self._work_q.put((conn, msg))
            try:
                while True:
                    item = self._inbox.get_nowait()
                    busy = True
                    self._work_q.put(item)
            except queue.Empty:
                pass
            if not busy:
                self.policy.pause()

    def _handle_connect(self, slot: int, fields) -> None:
        _, _, node, pid, inc, conn_heap_id, msg_ring_addr, seal_ring_addr, token = fields
        try:
            if conn_heap_id == self.root_heap.mapped.heap_id:
                heap = self.root_heap
            else:
                info, lease = self.runtime.orch.allocate_heap(
                    self.channel_id, 0, attach_heap_id=conn_heap_id
                )
                mapped = self.runtime.map_heap(info, lease)
                heap = SharedHeap.attach(mapped)
            ring = MessageRing.attach(heap, msg_ring_addr)
            seal = SealManager.attach(heap, seal_ring_addr, ROLE_RECEIVER)
            conn = ServerConnection(self, heap, ring, seal, (node, pid, inc))
            with self._conn_lock:
                self.connections.append(conn)
            self.connect_ring.finish(slot, ok=True)
        except RpcoolError as e:
            code = getattr(e, "code", Status.BAD_REQUEST)
            self.connect_ring.finish(slot, ok=False, error=code)

    def _worker_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, msg = self._work_q.get(timeout=0.1)
            except queue.Empty:
                continue
            try:
                self.dispatch_message(conn, msg)
            except Exception:
                # a broken handler must never take the server down
                try:
                    conn.publish(msg.seq, error_status(Status.HANDLER_ERROR), 0)
                except Exception:
                    pass

    # -- message dispatch ------------------------------------------------------------------

    def dispatch_message(self, conn, msg: ReceivedMessage) -> None:
        handler = self.handlers.get(msg.function_id)
        if handler is None:
            conn.publish(msg.seq, error_status(Status.UNKNOWN_FUNCTION), 0)
            return
        if msg.sealed:
            if not conn.seal.is_sealed(
                msg.seal_index, msg.seal_epoch, msg.scope_start, msg.scope_len
            ):
                conn.publish(msg.seq, error_status(Status.SEAL_VERIFICATION_FAILED), 0)
                return
        ctx = CallContext(conn, msg)
        if msg.sandbox_required:
            if not msg.scope_len:
                conn.publish(msg.seq, error_status(Status.SANDBOX_VIOLATION), 0)
                return
            outcome, result = self.sandboxes.run_confined(
                msg.scope_start, msg.scope_len, None, lambda sb: self._run_handler(handler, ctx, sb)
            )
            if outcome == "violation":
                ctx._responded = True
                ctx._status = error_status(Status.SANDBOX_VIOLATION)
                ctx._ret = 0
        else:
            self._run_handler(handler, ctx, None)
        if not ctx._responded:
            ctx.respond()  # handler returned without an explicit response: success, no payload
        if msg.sealed:
            try:
                conn.seal.mark_complete(msg.seal_index, msg.seal_epoch)
            except RpcoolError:
                pass  # descriptor vanished (e.g. peer died); status still published
        conn.publish(msg.seq, ctx._status, ctx._ret)

    def _run_handler(self, handler, ctx: CallContext, sandbox) -> None:
        ctx.sandbox = sandbox
        try:
            ret = handler(ctx)
        except CallError as e:
            if not ctx._responded:
                ctx.respond(error=e.code)
            return
        if ret is not None and not ctx._responded:
            ctx.respond(ret_addr=int(ret))

    # -- lifecycle -----------------------------------------------------------------------------

    def close(self) -> None:
        self._stop.set()
        if self._fallback_listener is not None:
            self._fallback_listener.close()
        try:
            self.runtime.orch.close_channel(self.channel_id)
        except RpcoolError:
            pass
        self.sandboxes.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


# -- client side ---------------------------------------------------------------------------


class _ShmTransport:
    def __init__(self, ring: MessageRing, policy: WaitPolicy):
        self.ring = ring
        self.policy = policy

    def submit(self, msg: RpcMessage, timeout: float) -> int:
        deadline = time.monotonic() + timeout
        while True:
            seq = self.ring.try_submit(msg)
            if seq is not None:
                return seq
            if time.monotonic() > deadline:
                raise TransportError("ring full: request timed out")
            self.policy.pause()  # back-pressure

    def wait(self, seq: int, timeout: float) -> Response:
        deadline = time.monotonic() + timeout
        while True:
            result = self.ring.response_status(seq)
            if result is not None:
                status, ret = result
                self.ring.release_slot(seq)
                return Response(status, ret)
            if time.monotonic() > deadline:
                raise TransportError("rpc timed out")
            self.policy.pause()


class Connection:
    """Client endpoint; the calling surface is transport-independent."""

    def __init__(self, runtime: NodeRuntime, name: str, transport, heap: SharedHeap, seal: SealManager, transport_kind: str):
        self.runtime = runtime
        self.name = name
        self.transport = transport
        self.heap = heap
        self.seal = seal
        self.transport_kind = transport_kind  # 'shm' | 'fallback'

    # -- memory helpers ----------------------------------------------------------------

    def allocate(self, size: int, align: int = 16) -> int:
        return self.heap.allocate(size, align)

    def free(self, addr: int) -> None:
        self.heap.free(addr)

    def create_scope(self, size: int):
        return self.heap.create_scope(size)

    def new_string(self, data: bytes):
        from .heap import HeapString

        return HeapString.create(self.heap, data)

    # -- sealing sugar ------------------------------------------------------------------

    def seal_scope(self, scope) -> SealTicket:
        return self.seal.seal_scope(scope)

    def release(self, ticket: SealTicket) -> None:
        self.seal.release(ticket)

    # -- calls -------------------------------------------------------------------------

    def call(
        self,
        fid,
        arg_addr: int = 0,
        scope=None,
        ticket: SealTicket | None = None,
        sandbox: bool = False,
        timeout: float = 30.0,
    ) -> Response:
        if isinstance(fid, str):
            fid = function_id(fid)
        flags = 0
        scope_start = scope_len = 0
        seal_index = seal_epoch = 0
        if scope is not None:
            if isinstance(scope, tuple):
                scope_start, scope_len = scope
            else:
                scope_start, scope_len = scope.start, scope.length
        if ticket is not None:
            flags |= FLAG_SEALED
            seal_index, seal_epoch = ticket.index, ticket.epoch
            if scope is None:
                scope_start, scope_len = ticket.start, ticket.length
        if sandbox:
            flags |= FLAG_SANDBOX
        msg = RpcMessage(
            function_id=fid,
            flags=flags,
            arg_addr=arg_addr,
            scope_start=scope_start,
            scope_len=scope_len,
            seal_index=seal_index,
            seal_epoch=seal_epoch,
        )
        seq = self.transport.submit(msg, timeout)
        return self.transport.wait(seq, timeout)

    def call_sealed(self, fid, scope, arg_addr: int = 0, sandbox: bool = True, timeout: float = 30.0):
        """Seal the scope, call, and hand back (response, ticket). The caller
        releases the ticket (or batches the release) once it is done."""
        ticket = self.seal.seal_scope(scope)
        response = self.call(
            fid, arg_addr=arg_addr, scope=scope, ticket=ticket, sandbox=sandbox, timeout=timeout
        )
        return response, ticket

    def close(self) -> None:
        closer = getattr(self.transport, "close", None)
        if closer is not None:
            closer()


def create_channel(runtime: NodeRuntime, name: str, opts: ChannelOptions | None = None) -> Channel:
    return Channel(runtime, name, opts)


def connect(
    runtime: NodeRuntime,
    name: str,
    timeout: float = 30.0,
    force_transport: str | None = None,
    conn_heap_size: int = 16 << 20,
) -> Connection:
    """Connect to a channel; picks shared memory when this runtime can map
    the pool, the fallback stream otherwise."""
    handle = runtime.orch.lookup_channel(name, attach=False)
    use_fallback = force_transport == "fallback" or (
        force_transport is None and not runtime.config.has_pool_access
    )
    if use_fallback:
        if not handle.fallback_endpoint:
            raise TransportError(f"channel {name} has no fallback endpoint")
        from .fallback import connect_fallback

        return connect_fallback(runtime, name, handle)
    handle = runtime.orch.lookup_channel(name, attach=True)
    policy = WaitPolicy(runtime.config)
    root_info = handle.heaps[0]
    root_mapped = runtime.map_heap(root_info, handle.leases[0])
    root_heap = SharedHeap.attach(root_mapped)
    if handle.heap_mode == HEAP_MODE_PRIVATE:
        info, lease = runtime.orch.allocate_heap(handle.channel_id, conn_heap_size)
        conn_mapped = runtime.map_heap(info, lease)
        conn_heap = SharedHeap.initialize(conn_mapped)
    else:
        conn_heap = root_heap
    ring = MessageRing.create(conn_heap, runtime.config.ring_capacity)
    seal = SealManager.create(conn_heap, runtime.config.seal_ring_capacity, ROLE_SENDER)
    connect_ring = _ConnectRing.attach(root_heap)
    token = int.from_bytes(os.urandom(8), "little")
    slot = connect_ring.submit(
        runtime.holder, conn_heap.mapped.heap_id, ring.addr, seal.ring_addr, token
    )
    connect_ring.wait_ack(slot, policy, timeout)
    transport = _ShmTransport(ring, policy)
    return Connection(runtime, name, transport, conn_heap, seal, "shm")
