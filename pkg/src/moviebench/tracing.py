"""Span model, bounded span buffers, the span-log format and trace assembly."""
from __future__ import annotations

import enum
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

log = logging.getLogger(__name__)

DEFAULT_BUFFER_CAPACITY = 65_536


class SpanKind(str, enum.Enum):
    SERVER = "server"
    CLIENT = "client"


class SpanStatus(str, enum.Enum):
    OK = "ok"
    ERROR = "error"
    DROPPED_CHILD = "dropped_child"


@dataclass(frozen=True, slots=True)
class Span:
    trace_id: int
    span_id: int
    parent_span_id: int
    service: str
    operation: str
    kind: SpanKind
    t_start: int
    t_end: int
    net_ns: int = 0
    app_ns: int = 0
    status: SpanStatus = SpanStatus.OK

    @property
    def duration(self) -> int:
        return self.t_end - self.t_start

    @property
    def wait_ns(self) -> int:
        return self.duration - self.net_ns - self.app_ns

    @property
    def key(self) -> tuple[int, int, str]:
        return (self.trace_id, self.span_id, self.kind.value)

    def check(self) -> None:
        if self.t_end < self.t_start:
            raise ValueError("t_end before t_start")
        if self.net_ns < 0 or self.app_ns < 0:
            raise ValueError("negative net/app time")
        if self.net_ns + self.app_ns > self.duration:
            raise ValueError("net + app exceeds duration")
        if self.kind is SpanKind.CLIENT and self.app_ns:
            raise ValueError("client spans carry no app time")

    def to_line(self) -> str:
        return "\t".join((
            f"{self.trace_id:032x}", f"{self.span_id:016x}", f"{self.parent_span_id:016x}",
            self.service, self.operation, self.kind.value,
            str(self.t_start), str(self.t_end), str(self.net_ns), str(self.app_ns),
            self.status.value,
        ))

    @classmethod
    def from_line(cls, line: str) -> "Span":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 11:
            raise ValueError(f"expected 11 fields, got {len(parts)}")
        tid, sid, pid, service, op, kind, ts, te, net, app, status = parts
        if len(tid) != 32 or len(sid) != 16 or len(pid) != 16:
            raise ValueError("bad id width")
        span = cls(int(tid, 16), int(sid, 16), int(pid, 16), service, op, SpanKind(kind),
                   int(ts), int(te), int(net), int(app), SpanStatus(status))
        span.check()
        return span


class SpanBuffer:
    """Bounded span buffer; a full buffer drops the newest span.

    Spans stay counted in the buffer while a batch is in flight, so a slow
    or absent collector eventually turns into drops rather than growth.
    """

    def __init__(self, capacity: int = DEFAULT_BUFFER_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._pending: list[Span] = []
        self._inflight = 0
        self.recorded = 0
        self.dropped = 0
        self.persisted = 0

    def __len__(self) -> int:
        return len(self._pending) + self._inflight

    @property
    def pending(self) -> int:
        return len(self._pending)

    def record(self, span: Span) -> bool:
        self.recorded += 1
        if len(self._pending) + self._inflight >= self.capacity:
            self.dropped += 1
            return False
        self._pending.append(span)
        return True

    def take(self, max_batch: int) -> list[Span]:
        batch = self._pending[:max_batch]
        del self._pending[:max_batch]
        self._inflight += len(batch)
        return batch

    def ack(self, batch: list[Span]) -> None:
        self._inflight -= len(batch)
        self.persisted += len(batch)

    def nack(self, batch: list[Span]) -> None:
        """Return an unsent batch to the front of the queue."""
        self._inflight -= len(batch)
        self._pending[:0] = batch

    def abandon(self) -> int:
        """Count whatever is still buffered as dropped (final shutdown)."""
        n = len(self._pending) + self._inflight
        self._pending.clear()
        self._inflight = 0
        self.dropped += n
        return n

    def counters(self) -> dict[str, int]:
        return {"recorded": self.recorded, "persisted": self.persisted, "dropped": self.dropped}


def record_span(buffer: SpanBuffer, span: Span) -> bool:
    return buffer.record(span)


def encode_batch(spans: Iterable[Span]) -> bytes:
    return "".join(s.to_line() + "\n" for s in spans).encode("utf-8")


def decode_batch(data: bytes) -> list[Span]:
    return [Span.from_line(line) for line in data.decode("utf-8").splitlines() if line]


def write_span_log(path: str | Path, spans: Iterable[Span]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in spans:
            fh.write(s.to_line() + "\n")


@dataclass
class SpanLog:
    spans: list[Span]
    malformed: list[int] = field(default_factory=list)  # 1-based line numbers

    @property
    def errors(self) -> int:
        return len(self.malformed)


def load_span_log(path: str | Path, start: int = 0, end: int | None = None) -> SpanLog:
    """Parse a span log, optionally only the bytes in [start, end).

    Offsets should fall on line boundaries (e.g. file sizes taken between
    runs); line numbers in the report count from ``start``.
    """
    spans: list[Span] = []
    bad: list[int] = []
    with open(path, "rb") as fh:
        fh.seek(start)
        data = fh.read() if end is None else fh.read(max(0, end - start))
    for lineno, raw in enumerate(data.split(b"\n"), 1):
        line = raw.decode("utf-8", errors="replace")
        if not line.strip():
            continue
        try:
            spans.append(Span.from_line(line))
        except (ValueError, KeyError) as exc:
            log.warning("span log %s line %d malformed: %s", path, lineno, exc)
            bad.append(lineno)
    return SpanLog(spans, bad)


@dataclass
class SpanNode:
    """One RPC in a trace: the caller's client span and the callee's server span
    share a span_id and are kept together here."""

    span_id: int
    server: Span | None = None
    client: Span | None = None
    children: list["SpanNode"] = field(default_factory=list)

    @property
    def parent_span_id(self) -> int:
        s = self.server or self.client
        return s.parent_span_id

    @property
    def start(self) -> int:
        s = self.client or self.server
        return s.t_start

    def walk(self):
        yield self
        for c in self.children:
            yield from c.walk()

    def depth(self) -> int:
        return 1 + max((c.depth() for c in self.children), default=0)


@dataclass
class SpanTree:
    trace_id: int
    root: SpanNode
    complete: bool = True

    def spans(self) -> list[Span]:
        out = []
        for node in self.root.walk():
            if node.server:
                out.append(node.server)
            if node.client:
                out.append(node.client)
        return out

    def nodes(self) -> list[SpanNode]:
        return list(self.root.walk())


@dataclass
class Assembly:
    trees: list[SpanTree]
    orphans: list[Span]

    def __iter__(self):
        return iter((self.trees, self.orphans))


def assemble(spans: Iterable[Span]) -> Assembly:
    """Group spans by trace and link them into trees.

    A span whose parent is missing from its trace becomes an orphan, as does
    everything below it. A trace with more than one root yields one tree per
    root, each marked incomplete. Duplicate (trace, span, kind) records keep
    the first occurrence.
    """
    by_trace: dict[int, dict[int, SpanNode]] = defaultdict(dict)
    for s in spans:
        nodes = by_trace[s.trace_id]
        node = nodes.get(s.span_id)
        if node is None:
            node = nodes[s.span_id] = SpanNode(s.span_id)
        if s.kind is SpanKind.SERVER:
            if node.server is None:
                node.server = s
        elif node.client is None:
            node.client = s

    trees: list[SpanTree] = []
    orphans: list[Span] = []
    for trace_id in sorted(by_trace):
        nodes = by_trace[trace_id]
        roots = []
        for node in nodes.values():
            pid = node.parent_span_id
            if pid == 0:
                roots.append(node)
            elif pid in nodes and pid != node.span_id:
                nodes[pid].children.append(node)
        reachable: set[int] = set()
        for r in roots:
            reachable.update(n.span_id for n in r.walk())
        for node in nodes.values():
            if node.span_id not in reachable:
                for s in (node.server, node.client):
                    if s is not None:
                        orphans.append(s)
                node.children.clear()
        for node in nodes.values():
            node.children.sort(key=lambda c: (c.start, c.span_id))
        has_orphans = len(reachable) != len(nodes)
        for r in sorted(roots, key=lambda n: (n.start, n.span_id)):
            complete = (len(roots) == 1 and not has_orphans and r.server is not None
                        and all(n.server is not None for n in r.walk()))
            trees.append(SpanTree(trace_id, r, complete))
    return Assembly(trees, orphans)
