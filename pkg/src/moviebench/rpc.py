"""Asyncio RPC runtime: pipelined client connections and a worker-pool server.

Both sides record spans: the server a server-kind span per request with the
receive/send (network) and handler (app) time split out, the client a
client-kind span bracketing each call.
"""
from __future__ import annotations

import asyncio
import logging
import time
from dataclasses import dataclass
from typing import Awaitable, Callable, Iterable, Mapping

from . import wire
from .tracing import Span, SpanBuffer, SpanKind, SpanStatus, encode_batch
from .wire import Kind, RpcMessage, TraceContext

log = logging.getLogger(__name__)

now_ns = time.monotonic_ns

Address = tuple[str, int]
Fields = Mapping[int, bytes] | Iterable[tuple[int, bytes]]

# control methods bypass the admission queue and are never traced
CONTROL_METHODS = frozenset({"Shutdown", "Stats", "SetSlowdown", "SetTracing", "SpanBatch"})


class ServiceError(Exception):
    """Raised by handlers; becomes an error response carrying ``code``."""

    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code
        self.message = message


class RpcError(Exception):
    code = "RpcError"


class RemoteError(RpcError):
    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code
        self.message = message


class CallTimeout(RpcError):
    code = "Timeout"


class ConnectionRefused(RpcError):
    code = "ConnectionRefused"


class ConnectionLost(RpcError):
    code = "ConnectionLost"


class ProtocolFailure(RpcError):
    code = "ProtocolError"


def parse_address(text: str) -> Address:
    host, _, port = text.rpartition(":")
    return (host or "127.0.0.1", int(port))


def format_address(addr: Address) -> str:
    return f"{addr[0]}:{addr[1]}"


def error_fields(code: str, message: str = "") -> tuple[tuple[int, bytes], ...]:
    return ((0, code.encode()), (1, message.encode()))


def raise_for_error(msg: RpcMessage) -> RpcMessage:
    if msg.kind == Kind.ERROR:
        raise RemoteError((msg.get(0) or b"Error").decode(errors="replace"),
                          (msg.get(1) or b"").decode(errors="replace"))
    return msg


async def read_frame(reader: asyncio.StreamReader, max_frame: int) -> tuple[bytes, int]:
    """Read one frame; returns the payload and the arrival time of its header."""
    header = await reader.readexactly(4)
    t0 = now_ns()
    length = wire.frame_length(header, max_frame)
    payload = await reader.readexactly(length)
    return payload, t0


class Tracer:
    """Per-process span recorder with a background shipper to the collector."""

    FLUSH_INTERVAL = 0.1
    BATCH = 1000

    def __init__(self, service: str, capacity: int = 65_536, collector: Address | None = None,
                 enabled: bool = True, max_frame: int = wire.DEFAULT_MAX_FRAME):
        self.service = service
        self.buffer = SpanBuffer(capacity)
        self.collector = collector
        self.enabled = enabled
        self.max_frame = max_frame
        self.ids = wire.IdSource()
        self.batches_sent = 0
        self._wake: asyncio.Event | None = None
        self._task: asyncio.Task | None = None
        self._conn: Connection | None = None
        self._closing = False

    def record(self, span: Span) -> None:
        if not self.enabled:
            return
        self.buffer.record(span)
        if self._wake is not None and self.buffer.pending >= self.BATCH:
            self._wake.set()

    def start(self) -> None:
        if self.collector is None or self._task is not None:
            return
        self._wake = asyncio.Event()
        self._task = asyncio.get_running_loop().create_task(self._run())

    async def _send(self, batch: list[Span], timeout: float) -> None:
        if self._conn is None or self._conn.closed:
            self._conn = await Connection.open(self.collector, self.max_frame)
        ctx = wire.root_context(self.ids)
        msg = RpcMessage(Kind.REQUEST, ctx, "SpanBatch", ((0, encode_batch(batch)),))
        raise_for_error(await self._conn.request(msg, timeout))

    async def flush_once(self, timeout: float = 2.0) -> bool:
        """Ship one batch if anything is pending; False on delivery failure."""
        if not self.buffer.pending:
            return True
        batch = self.buffer.take(self.BATCH)
        try:
            await self._send(batch, timeout)
        except asyncio.CancelledError:
            self.buffer.nack(batch)
            raise
        except (RpcError, OSError, asyncio.TimeoutError) as exc:
            log.debug("%s: span batch failed: %s", self.service, exc)
            self.buffer.nack(batch)
            if self._conn is not None:
                self._conn.close()
                self._conn = None
            return False
        self.buffer.ack(batch)
        self.batches_sent += 1
        return True

    async def _run(self) -> None:
        backoff = self.FLUSH_INTERVAL
        while not self._closing:
            try:
                await asyncio.wait_for(self._wake.wait(), self.FLUSH_INTERVAL)
            except asyncio.TimeoutError:
                pass
            self._wake.clear()
            while self.buffer.pending and not self._closing:
                if await self.flush_once():
                    backoff = self.FLUSH_INTERVAL
                    if self.buffer.pending < self.BATCH:
                        break
                else:
                    await asyncio.sleep(backoff)
                    backoff = min(backoff * 2, 1.0)
                    break

    async def close(self, deadline: float = 5.0) -> dict[str, int]:
        """Stop the shipper, flush what is left within ``deadline`` seconds,
        and count anything undeliverable as dropped."""
        self._closing = True
        if self._task is not None:
            # let an in-flight batch finish so its ack is not lost
            self._wake.set()
            try:
                await asyncio.wait_for(asyncio.shield(self._task), min(deadline, 2.0))
            except (asyncio.TimeoutError, Exception):
                self._task.cancel()
                try:
                    await self._task
                except (asyncio.CancelledError, Exception):
                    pass
            self._task = None
        if self.collector is not None:
            end = time.monotonic() + deadline
            while self.buffer.pending and time.monotonic() < end:
                if not await self.flush_once(timeout=max(0.1, end - time.monotonic())):
                    await asyncio.sleep(0.1)
        self.buffer.abandon()
        if self._conn is not None:
            self._conn.close()
        return self.buffer.counters()


class Connection:
    """One stream to a server; requests are pipelined and matched to
    responses by (trace_id, span_id)."""

    def __init__(self, reader, writer, max_frame: int):
        self._reader = reader
        self._writer = writer
        self.max_frame = max_frame
        self._pending: dict[tuple[int, int], asyncio.Future] = {}
        self._lock = asyncio.Lock()
        self.closed = False
        self._task = asyncio.get_running_loop().create_task(self._read_loop())

    @classmethod
    async def open(cls, addr: Address, max_frame: int = wire.DEFAULT_MAX_FRAME) -> "Connection":
        try:
            reader, writer = await asyncio.open_connection(addr[0], addr[1], limit=1 << 20)
        except (ConnectionRefusedError, OSError) as exc:
            raise ConnectionRefused(f"{format_address(addr)}: {exc}") from None
        return cls(reader, writer, max_frame)

    async def _read_loop(self) -> None:
        err: Exception = ConnectionLost("connection closed")
        try:
            while True:
                payload, _ = await read_frame(self._reader, self.max_frame)
                msg = wire.decode_payload(payload)
                fut = self._pending.pop((msg.context.trace_id, msg.context.span_id), None)
                if fut is not None and not fut.done():
                    fut.set_result(msg)
        except (asyncio.IncompleteReadError, ConnectionError, OSError):
            pass
        except wire.ProtocolError as exc:
            err = ProtocolFailure(str(exc))
        except asyncio.CancelledError:
            pass
        finally:
            self.closed = True
            for fut in self._pending.values():
                if not fut.done():
                    fut.set_exception(err)
            self._pending.clear()
            self._writer.close()

    async def request(self, msg: RpcMessage, timeout: float | None) -> RpcMessage:
        if self.closed:
            raise ConnectionLost("connection closed")
        frame = wire.encode_frame(msg, self.max_frame)
        key = (msg.context.trace_id, msg.context.span_id)
        fut = asyncio.get_running_loop().create_future()
        self._pending[key] = fut
        try:
            async with self._lock:
                self._writer.write(frame)
                await self._writer.drain()
        except (ConnectionError, OSError) as exc:
            self._pending.pop(key, None)
            self.close()
            raise ConnectionLost(str(exc)) from None
        try:
            return await asyncio.wait_for(fut, timeout)
        except asyncio.TimeoutError:
            self._pending.pop(key, None)
            raise CallTimeout(f"{msg.method} timed out after {timeout}s") from None

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self._task.cancel()


class Channel:
    """A small pool of connections to one address, opened lazily."""

    def __init__(self, addr: Address, size: int = 1, max_frame: int = wire.DEFAULT_MAX_FRAME):
        self.addr = addr
        self.size = max(1, size)
        self.max_frame = max_frame
        self._conns: list[Connection | None] = [None] * self.size
        self._next = 0
        self._opening: list[asyncio.Lock] = [asyncio.Lock() for _ in range(self.size)]

    async def _get(self) -> Connection:
        i = self._next
        self._next = (i + 1) % self.size
        conn = self._conns[i]
        if conn is None or conn.closed:
            async with self._opening[i]:
                conn = self._conns[i]
                if conn is None or conn.closed:
                    conn = self._conns[i] = await Connection.open(self.addr, self.max_frame)
        return conn

    async def request(self, msg: RpcMessage, timeout: float | None) -> RpcMessage:
        return await (await self._get()).request(msg, timeout)

    def close(self) -> None:
        for c in self._conns:
            if c is not None:
                c.close()
        self._conns = [None] * self.size


class Client:
    """Issues calls over per-address channels and records one client span per call."""

    def __init__(self, tracer: Tracer | None = None, pool_size: int = 1,
                 max_frame: int = wire.DEFAULT_MAX_FRAME, default_timeout: float = 10.0):
        self.tracer = tracer
        self.pool_size = pool_size
        self.max_frame = max_frame
        self.default_timeout = default_timeout
        self._channels: dict[Address, Channel] = {}

    def channel(self, addr: Address) -> Channel:
        ch = self._channels.get(addr)
        if ch is None:
            ch = self._channels[addr] = Channel(addr, self.pool_size, self.max_frame)
        return ch

    async def call(self, addr: Address, request: RpcMessage, timeout: float | None = None) -> RpcMessage:
        if request.kind != Kind.REQUEST:
            raise ValueError("call() takes a request message")
        timeout = self.default_timeout if timeout is None else timeout
        t_start = now_ns()
        status = SpanStatus.ERROR
        try:
            resp = await self.channel(addr).request(request, timeout)
            if resp.kind == Kind.RESPONSE:
                status = SpanStatus.OK
            return resp
        finally:
            if self.tracer is not None:
                ctx = request.context
                self.tracer.record(Span(ctx.trace_id, ctx.span_id, ctx.parent_span_id, self.tracer.service,
                                        request.method, SpanKind.CLIENT, t_start, now_ns(), 0, 0, status))

    def close(self) -> None:
        for ch in self._channels.values():
            ch.close()
        self._channels.clear()


async def call(endpoint: Address, request: RpcMessage, timeout: float = 10.0,
               client: Client | None = None) -> RpcMessage:
    """One-shot call; pass a long-lived ``client`` to reuse connections and record spans."""
    own = client is None
    client = client or Client()
    try:
        return await client.call(endpoint, request, timeout)
    finally:
        if own:
            client.close()


@dataclass
class Reply:
    fields: Fields = ()
    status: SpanStatus = SpanStatus.OK


Handler = Callable[[RpcMessage], Awaitable["Reply | Fields"]]


class _Link:
    """Server side of one client connection."""

    def __init__(self, writer: asyncio.StreamWriter):
        self.writer = writer
        self.lock = asyncio.Lock()
        self.alive = True

    async def send(self, frame: bytes) -> None:
        if not self.alive:
            return
        async with self.lock:
            try:
                self.writer.write(frame)
                await self.writer.drain()
            except (ConnectionError, OSError):
                self.alive = False


class RpcServer:
    """Worker-pool server with a bounded admission queue.

    A request that finds the queue full is answered at once with a ``Shed``
    error. Control methods are answered inline on the connection task.
    """

    def __init__(self, name: str, handlers: Mapping[str, Handler], workers: int = 1,
                 queue_capacity: int = 64, tracer: Tracer | None = None,
                 control: Mapping[str, Handler] | None = None,
                 max_frame: int = wire.DEFAULT_MAX_FRAME):
        self.name = name
        self.handlers = dict(handlers)
        self.control = dict(control or {})
        self.workers = workers
        self.queue_capacity = queue_capacity
        self.tracer = tracer
        self.max_frame = max_frame
        self.shed = 0
        self.served = 0
        self.errors = 0
        self._queue: asyncio.Queue | None = None
        self._server: asyncio.base_events.Server | None = None
        self._workers: list[asyncio.Task] = []
        self._links: set[_Link] = set()
        self._conn_tasks: set[asyncio.Task] = set()
        self._busy = 0
        self.address: Address | None = None

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> Address:
        self._queue = asyncio.Queue(self.queue_capacity)
        self._server = await asyncio.start_server(self._on_connect, host, port, limit=1 << 20,
                                                  reuse_address=True)
        sock = self._server.sockets[0]
        self.address = sock.getsockname()[:2]
        self._workers = [asyncio.get_running_loop().create_task(self._work()) for _ in range(self.workers)]
        if self.tracer is not None:
            self.tracer.start()
        return self.address

    def stop_accepting(self) -> None:
        if self._server is not None:
            self._server.close()

    async def drain(self, deadline: float = 5.0) -> bool:
        """Wait until the admission queue is empty and no handler is running."""
        end = time.monotonic() + deadline
        while (self._queue.qsize() or self._busy) and time.monotonic() < end:
            await asyncio.sleep(0.01)
        return not (self._queue.qsize() or self._busy)

    async def close(self) -> None:
        self.stop_accepting()
        for t in self._workers:
            t.cancel()
        for t in list(self._conn_tasks):
            t.cancel()
        for link in list(self._links):
            link.writer.close()
        await asyncio.gather(*self._workers, *self._conn_tasks, return_exceptions=True)
        self._workers = []

    def _record(self, msg: RpcMessage, t0: int, t1: int, t2: int, t3: int, t4: int,
                status: SpanStatus) -> None:
        if self.tracer is None or msg.method in CONTROL_METHODS:
            return
        ctx = msg.context
        self.tracer.record(Span(ctx.trace_id, ctx.span_id, ctx.parent_span_id, self.name, msg.method,
                                SpanKind.SERVER, t0, t4, (t1 - t0) + (t4 - t3), t3 - t2, status))

    async def _on_connect(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        link = _Link(writer)
        self._links.add(link)
        task = asyncio.current_task()
        self._conn_tasks.add(task)
        try:
            while True:
                try:
                    payload, t0 = await read_frame(reader, self.max_frame)
                except (asyncio.IncompleteReadError, ConnectionError, OSError):
                    break
                except wire.ProtocolError:
                    break  # unframed garbage: nothing to answer
                try:
                    msg = wire.decode_payload(payload)
                except wire.ProtocolError as exc:
                    log.debug("%s: undecodable request: %s", self.name, exc)
                    continue
                t1 = now_ns()
                if msg.kind != Kind.REQUEST:
                    continue
                if msg.method in self.control:
                    await self._serve_control(link, msg)
                    continue
                try:
                    self._queue.put_nowait((link, msg, t0, t1))
                except asyncio.QueueFull:
                    self.shed += 1
                    t3 = now_ns()
                    resp = RpcMessage(Kind.ERROR, msg.context, "", error_fields("Shed", self.name))
                    await link.send(wire.encode_frame(resp, self.max_frame))
                    self._record(msg, t0, t1, t1, t3, now_ns(), SpanStatus.ERROR)
        except asyncio.CancelledError:
            pass
        finally:
            link.alive = False
            self._links.discard(link)
            self._conn_tasks.discard(task)
            writer.close()

    async def _serve_control(self, link: _Link, msg: RpcMessage) -> None:
        try:
            out = await self.control[msg.method](msg)
            fields = wire.make_fields(out.fields if isinstance(out, Reply) else out)
            resp = RpcMessage(Kind.RESPONSE, msg.context, "", fields)
        except ServiceError as exc:
            resp = RpcMessage(Kind.ERROR, msg.context, "", error_fields(exc.code, exc.message))
        await link.send(wire.encode_frame(resp, self.max_frame))

    async def _work(self) -> None:
        queue = self._queue
        while True:
            link, msg, t0, t1 = await queue.get()
            self._busy += 1
            try:
                await self._serve(link, msg, t0, t1)
            except asyncio.CancelledError:
                raise
            except Exception:
                log.exception("%s: handler crashed on %s", self.name, msg.method)
            finally:
                self._busy -= 1

    async def _serve(self, link: _Link, msg: RpcMessage, t0: int, t1: int) -> None:
        t2 = now_ns()
        status = SpanStatus.OK
        handler = self.handlers.get(msg.method)
        try:
            if handler is None:
                raise ServiceError("UnknownMethod", msg.method)
            out = await handler(msg)
            if isinstance(out, Reply):
                status = out.status
                out = out.fields
            resp = RpcMessage(Kind.RESPONSE, msg.context, "", wire.make_fields(out))
        except ServiceError as exc:
            status = SpanStatus.ERROR
            resp = RpcMessage(Kind.ERROR, msg.context, "", error_fields(exc.code, exc.message))
        except RpcError as exc:
            status = SpanStatus.ERROR
            resp = RpcMessage(Kind.ERROR, msg.context, "", error_fields(exc.code, str(exc)))
        t3 = now_ns()
        try:
            frame = wire.encode_frame(resp, self.max_frame)
        except wire.ProtocolError as exc:
            status = SpanStatus.ERROR
            frame = wire.encode_frame(RpcMessage(Kind.ERROR, msg.context, "", error_fields("OversizeFrame", str(exc))))
        await link.send(frame)
        t4 = now_ns()
        if status is SpanStatus.ERROR:
            self.errors += 1
        else:
            self.served += 1
        self._record(msg, t0, t1, t2, t3, t4, status)


def blocking_call(addr: Address, method: str, fields: Fields = (), timeout: float = 5.0,
                  context: TraceContext | None = None,
                  max_frame: int = wire.DEFAULT_MAX_FRAME) -> RpcMessage:
    """Synchronous one-shot call on a fresh socket; used by the control plane."""
    import socket

    ctx = context or wire.root_context()
    frame = wire.encode_frame(RpcMessage(Kind.REQUEST, ctx, method, wire.make_fields(fields)), max_frame)
    try:
        sock = socket.create_connection(addr, timeout=timeout)
    except ConnectionRefusedError as exc:
        raise ConnectionRefused(f"{format_address(addr)}: {exc}") from None
    except socket.timeout:
        raise CallTimeout(f"connect to {format_address(addr)} timed out") from None
    except OSError as exc:
        raise ConnectionRefused(f"{format_address(addr)}: {exc}") from None
    try:
        sock.sendall(frame)

        def recv_exact(n: int) -> bytes:
            buf = bytearray()
            while len(buf) < n:
                part = sock.recv(n - len(buf))
                if not part:
                    raise ConnectionLost("connection closed before response")
                buf += part
            return bytes(buf)

        length = wire.frame_length(recv_exact(4), max_frame)
        return wire.decode_payload(recv_exact(length))
    except socket.timeout:
        raise CallTimeout(f"{method} timed out after {timeout}s") from None
    except (ConnectionError, OSError) as exc:
        raise ConnectionLost(str(exc)) from None
    finally:
        sock.close()
