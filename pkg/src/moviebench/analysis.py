"""Offline trace analysis: critical paths, per-service attribution,
network/compute split, and low-vs-high load comparison."""
from __future__ import annotations

import csv
import io
import os
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .loadgen import SweepCurve
from .tracing import Span, SpanNode, SpanTree

BREAKDOWN_COLUMNS = ("service", "fraction", "traces", "load_label")
SHIFT_COLUMNS = ("service", "low_fraction", "high_fraction", "delta", "low_rank", "high_rank", "rising")
SPLIT_COLUMNS = ("service", "network_fraction", "compute_fraction", "wait_fraction", "spans")
AGGREGATE = "(all)"
STORE_ROLES = ("store",)


class MalformedTree(ValueError):
    pass


class EmptyInput(ValueError):
    pass


class ServiceSetMismatch(ValueError):
    def __init__(self, only_low: Sequence[str], only_high: Sequence[str]):
        super().__init__(f"service sets differ: only in low {sorted(only_low)}, only in high {sorted(only_high)}")
        self.only_low = sorted(only_low)
        self.only_high = sorted(only_high)


class IoError(OSError):
    pass


class Category(str, Enum):
    COMPUTE = "compute"
    NETWORK = "network"
    WAIT = "wait"


@dataclass(frozen=True)
class PathSegment:
    service: str
    category: Category
    duration_ns: int
    span_id: int = 0


# -- critical path ------------------------------------------------------------

def _split_self(server: Span, gap: int) -> list[tuple[Category, int]]:
    """Divide a stretch of the span's own time by its net/app/wait proportions."""
    d = server.duration
    if gap <= 0:
        return []
    if d <= 0:
        return [(Category.COMPUTE, gap)]
    net = gap * server.net_ns // d
    wait = gap * server.wait_ns // d
    return [(Category.NETWORK, net), (Category.WAIT, wait), (Category.COMPUTE, gap - net - wait)]


def _trim(segments: list[PathSegment], excess: int) -> list[PathSegment]:
    """Remove ``excess`` ns from an interior, network first, then wait, then compute."""
    out = list(segments)
    for cat in (Category.NETWORK, Category.WAIT, Category.COMPUTE):
        for i in range(len(out) - 1, -1, -1):
            if excess == 0:
                return out
            s = out[i]
            if s.category is cat and s.duration_ns > 0:
                take = min(excess, s.duration_ns)
                out[i] = PathSegment(s.service, s.category, s.duration_ns - take, s.span_id)
                excess -= take
    if excess:
        raise MalformedTree("interior shorter than trim")
    return out


def select_chain(node: SpanNode) -> list[SpanNode]:
    """Backward sweep over the node's child calls; returns the chosen calls in time order."""
    server = node.server
    cands = []
    for c in node.children:
        if c.client is None:
            continue  # no interval on this clock to place it on
        cl = c.client
        if cl.t_end < cl.t_start:
            raise MalformedTree(f"negative interval on client span {cl.span_id:x}")
        if cl.t_start < server.t_start or cl.t_end > server.t_end:
            raise MalformedTree(f"client span {cl.span_id:x} outside its caller's interval")
        cands.append(c)
    cursor = server.t_end
    chain = []
    while cands:
        best = None
        for c in cands:
            if c.client.t_end <= cursor:
                if best is None or (c.client.t_end, c.client.t_start, -c.span_id) > \
                        (best.client.t_end, best.client.t_start, -best.span_id):
                    best = c
        if best is None:
            break
        chain.append(best)
        cands.remove(best)
        cursor = best.client.t_start
    chain.reverse()
    return chain


def node_path(node: SpanNode, chain_fn=select_chain) -> list[PathSegment]:
    server = node.server
    if server is None:
        raise MalformedTree(f"node {node.span_id:x} has no server span")
    if server.t_end < server.t_start:
        raise MalformedTree(f"negative interval on server span {server.span_id:x}")
    svc = server.service
    out: list[PathSegment] = []

    def self_time(gap):
        out.extend(PathSegment(svc, cat, d, server.span_id) for cat, d in _split_self(server, gap) if d > 0)

    cursor = server.t_start
    for child in chain_fn(node):
        cl = child.client
        self_time(cl.t_start - cursor)
        out.extend(child_contribution(child, svc, chain_fn))
        cursor = cl.t_end
    self_time(server.t_end - cursor)
    return out


def child_contribution(child: SpanNode, caller: str, chain_fn=select_chain) -> list[PathSegment]:
    """A call covers its client interval exactly: the callee's own path plus
    the part of the call its server span did not see, which counts as the
    callee's network time (the caller's, if the callee left no span)."""
    cl = child.client
    c = cl.t_end - cl.t_start
    if child.server is None:
        return [PathSegment(caller, Category.NETWORK, c, cl.span_id)] if c else []
    interior = node_path(child, chain_fn)
    d = child.server.duration
    out = []
    if c >= d:
        if c > d:
            out.append(PathSegment(child.server.service, Category.NETWORK, c - d, cl.span_id))
    else:
        interior = _trim(interior, d - c)
    out.extend(s for s in interior if s.duration_ns > 0)
    return out


def critical_path(t: SpanTree | SpanNode) -> list[PathSegment]:
    """Ordered segments whose durations sum to the root span's duration exactly."""
    root = t.root if isinstance(t, SpanTree) else t
    if root.server is None:
        raise MalformedTree("root has no server span")
    return node_path(root)


def path_totals(segments: Iterable[PathSegment]) -> dict[str, int]:
    out: dict[str, int] = defaultdict(int)
    for s in segments:
        out[s.service] += s.duration_ns
    return dict(out)


# -- breakdown ----------------------------------------------------------------

@dataclass
class Breakdown:
    fractions: dict[str, float]
    total_traces: int
    load_label: str = ""
    excluded: int = 0
    totals_ns: dict[str, int] = field(default_factory=dict)
    mode: str = "critical"

    def share(self, services: Iterable[str]) -> float:
        return sum(self.fractions.get(s, 0.0) for s in services)

    def top(self) -> str:
        return min(self.fractions, key=lambda s: (-self.fractions[s], s))


def per_service_breakdown(trees: Iterable[SpanTree], load_label: str = "", *, mode: str = "critical",
                          skip_errors: bool = False) -> Breakdown:
    """Sum per-service time over complete traces and normalise.

    ``mode="critical"`` attributes each trace's critical path; ``mode="total"``
    sums every server span's duration per service instead. Incomplete trees
    are left out and counted in ``excluded``; so are malformed ones when
    ``skip_errors`` is set.
    """
    if mode not in ("critical", "total"):
        raise ValueError(f"unknown mode {mode!r}")
    trees = list(trees)
    if not trees:
        raise EmptyInput("no traces")
    totals: dict[str, int] = defaultdict(int)
    used = excluded = 0
    for t in trees:
        if not t.complete:
            excluded += 1
            continue
        if mode == "critical":
            try:
                seg_totals = path_totals(critical_path(t))
            except MalformedTree:
                if not skip_errors:
                    raise
                excluded += 1
                continue
        else:
            seg_totals = defaultdict(int)
            for node in t.root.walk():
                if node.server is not None:
                    seg_totals[node.server.service] += node.server.duration
        for svc, ns in seg_totals.items():
            totals[svc] += ns
        used += 1
    grand = sum(totals[s] for s in sorted(totals))
    fractions = {s: (totals[s] / grand if grand else 0.0) for s in sorted(totals)}
    return Breakdown(fractions, used, load_label, excluded, dict(sorted(totals.items())), mode)


# -- network / compute split -----------------------------------------------------

@dataclass
class SplitRow:
    network: float
    compute: float
    wait: float
    spans: int
    net_ns: int = 0
    app_ns: int = 0
    wait_ns: int = 0

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.network, self.compute, self.wait)


def _split_row(net: int, app: int, wait: int, spans: int) -> SplitRow:
    total = net + app + wait
    if total <= 0:
        return SplitRow(0.0, 1.0, 0.0, spans, net, app, wait)
    return SplitRow(net / total, app / total, wait / total, spans, net, app, wait)


def server_spans(trees: Iterable[SpanTree | Span]) -> list[Span]:
    out = []
    for t in trees:
        if isinstance(t, Span):
            if t.kind.value == "server":
                out.append(t)
            continue
        out.extend(n.server for n in t.root.walk() if n.server is not None)
    return out


def comm_compute_split(trees: Iterable[SpanTree | Span]) -> dict[str, SplitRow]:
    """Per service (network, compute, wait) fractions over all its server spans.

    The extra key ``(all)`` aggregates every server span of every service.
    """
    spans = server_spans(trees)
    if not spans:
        raise EmptyInput("no server spans")
    acc: dict[str, list[int]] = defaultdict(lambda: [0, 0, 0, 0])
    for s in spans:
        a = acc[s.service]
        a[0] += s.net_ns
        a[1] += s.app_ns
        a[2] += s.wait_ns
        a[3] += 1
    out = {svc: _split_row(*acc[svc]) for svc in sorted(acc)}
    out[AGGREGATE] = _split_row(*(sum(acc[s][i] for s in acc) for i in range(4)))
    return out


# -- load comparison ------------------------------------------------------------

@dataclass(frozen=True)
class ShiftRow:
    service: str
    low: float
    high: float
    delta: float
    low_rank: int
    high_rank: int
    rising: bool


@dataclass
class ShiftReport:
    rows: list[ShiftRow]
    inversions: list[tuple[str, str]]
    low: Breakdown
    high: Breakdown

    @property
    def rising(self) -> list[str]:
        return [r.service for r in self.rows if r.rising]


def _ranks(fractions: dict[str, float]) -> dict[str, int]:
    order = sorted(fractions, key=lambda s: (-fractions[s], s))
    return {s: i + 1 for i, s in enumerate(order)}


def compare_loads(low: Breakdown, high: Breakdown) -> ShiftReport:
    a, b = set(low.fractions), set(high.fractions)
    if a != b:
        raise ServiceSetMismatch(a - b, b - a)
    lr, hr = _ranks(low.fractions), _ranks(high.fractions)
    rows = [ShiftRow(s, low.fractions[s], high.fractions[s], high.fractions[s] - low.fractions[s],
                     lr[s], hr[s], high.fractions[s] > low.fractions[s]) for s in a]
    rows.sort(key=lambda r: (-r.delta, r.service))
    names = sorted(a)
    inversions = []
    for i, x in enumerate(names):
        for y in names[i + 1:]:
            if (lr[x] - lr[y]) * (hr[x] - hr[y]) < 0:
                first, second = (x, y) if lr[x] < lr[y] else (y, x)
                inversions.append((first, second))
    inversions.sort(key=lambda p: (lr[p[0]], lr[p[1]]))
    return ShiftReport(rows, inversions, low, high)


# -- CSV reports ------------------------------------------------------------------

def _f(x: float) -> str:
    return repr(float(x))


def _csv(header: Sequence[str], rows: Iterable[Sequence[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def report_text(data) -> str:
    if isinstance(data, SweepCurve):
        return data.to_csv()
    if isinstance(data, Breakdown):
        return _csv(BREAKDOWN_COLUMNS, ([s, _f(data.fractions[s]), str(data.total_traces), data.load_label]
                                        for s in sorted(data.fractions)))
    if isinstance(data, ShiftReport):
        return _csv(SHIFT_COLUMNS, ([r.service, _f(r.low), _f(r.high), _f(r.delta), str(r.low_rank),
                                     str(r.high_rank), "1" if r.rising else "0"] for r in data.rows))
    if isinstance(data, dict) and all(isinstance(v, SplitRow) for v in data.values()):
        return _csv(SPLIT_COLUMNS, ([s, _f(r.network), _f(r.compute), _f(r.wait), str(r.spans)]
                                    for s, r in data.items()))
    raise TypeError(f"no report format for {type(data).__name__}")


def emit_report(data, path: str | os.PathLike) -> Path:
    """Write ``data`` as CSV; identical input gives identical bytes."""
    text = report_text(data)
    path = Path(path)
    try:
        path.write_text(text, newline="")
    except OSError as exc:
        raise IoError(exc.errno, f"cannot write {path}: {exc.strerror}") from None
    return path


def read_breakdown_csv(path: str | os.PathLike) -> Breakdown:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(exc.errno, f"cannot read {path}: {exc.strerror}") from None
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and set(rows[0]) != set(BREAKDOWN_COLUMNS):
        raise ValueError(f"{path}: not a breakdown report")
    fractions = {r["service"]: float(r["fraction"]) for r in rows}
    traces = int(rows[0]["traces"]) if rows else 0
    label = rows[0]["load_label"] if rows else ""
    return Breakdown(fractions, traces, label)


def store_services(topology) -> list[str]:
    """Services of the store tier in ``topology``."""
    return [s.name for s in topology.services if s.role.value in STORE_ROLES]
