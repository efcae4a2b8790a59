import itertools
import random
from collections import defaultdict

import pytest
from hypothesis import given, settings, strategies as st

from moviebench.analysis import (
    AGGREGATE, BREAKDOWN_COLUMNS, Breakdown, Category, EmptyInput, MalformedTree, ServiceSetMismatch,
    compare_loads, comm_compute_split, critical_path, emit_report, path_totals, per_service_breakdown,
    read_breakdown_csv, report_text,
)
from moviebench.loadgen import SWEEP_COLUMNS, SweepCurve, SweepPoint
from moviebench.tracing import Span, SpanKind, assemble

MS = 1_000_000


def server(sid, parent, service, t0, t1, net=0, app=None, tid=1):
    app = (t1 - t0 - net) if app is None else app
    return Span(tid, sid, parent, service, "Op", SpanKind.SERVER, t0, t1, net, app)


def client(sid, parent, service, t0, t1, tid=1):
    return Span(tid, sid, parent, service, "Op", SpanKind.CLIENT, t0, t1)


def tree_of(spans):
    trees, orphans = assemble(spans)
    assert len(trees) == 1 and not orphans
    return trees[0]


# -- examples ----------------------------------------------------------------------

def test_leaf_is_one_compute_segment():
    t = tree_of([server(1, 0, "fe", 0, 10 * MS)])
    (seg,) = critical_path(t)
    assert (seg.service, seg.category, seg.duration_ns) == ("fe", Category.COMPUTE, 10 * MS)


def test_serial_child_conserves():
    t = tree_of([server(1, 0, "fe", 0, 10 * MS), client(2, 1, "fe", 2 * MS, 6 * MS),
                 server(2, 1, "be", 2 * MS, 6 * MS)])
    totals = path_totals(critical_path(t))
    assert totals == {"fe": 6 * MS, "be": 4 * MS}


def test_parallel_children_pick_latest_end():
    t = tree_of([server(1, 0, "fe", 0, 10 * MS),
                 client(2, 1, "fe", 0, 5 * MS), server(2, 1, "a", 0, 5 * MS),
                 client(3, 1, "fe", 1 * MS, 8 * MS), server(3, 1, "b", 1 * MS, 8 * MS)])
    path = critical_path(t)
    totals = path_totals(path)
    assert totals == {"fe": 3 * MS, "b": 7 * MS}
    assert "a" not in totals
    assert sum(s.duration_ns for s in path) == 10 * MS


def test_call_overhead_goes_to_callee_network():
    t = tree_of([server(1, 0, "fe", 0, 100), client(2, 1, "fe", 10, 90), server(2, 1, "be", 20, 80)])
    path = critical_path(t)
    net = [s for s in path if s.service == "be" and s.category is Category.NETWORK]
    assert sum(s.duration_ns for s in net) == 20
    assert path_totals(path) == {"fe": 20, "be": 80}


def test_missing_server_span_is_caller_network():
    t = assemble([server(1, 0, "fe", 0, 100), client(2, 1, "fe", 10, 90)]).trees[0]
    path = critical_path(t)
    assert path_totals(path) == {"fe": 100}
    assert sum(s.duration_ns for s in path if s.category is Category.NETWORK) == 80


def test_server_longer_than_client_is_trimmed():
    # the caller saw the reply before the callee's send returned
    t = tree_of([server(1, 0, "fe", 0, 100), client(2, 1, "fe", 10, 50),
                 server(2, 1, "be", 12, 56, net=8, app=30)])
    path = critical_path(t)
    assert sum(s.duration_ns for s in path) == 100
    assert path_totals(path) == {"fe": 60, "be": 40}
    be = defaultdict(int)
    for s in path:
        if s.service == "be":
            be[s.category] += s.duration_ns
    assert be[Category.NETWORK] == 4 and be[Category.COMPUTE] == 30


def test_self_split_is_proportional():
    t = tree_of([server(1, 0, "fe", 0, 100, net=20, app=50)])
    cats = {s.category: s.duration_ns for s in critical_path(t)}
    assert cats == {Category.NETWORK: 20, Category.WAIT: 30, Category.COMPUTE: 50}


def test_malformed_trees():
    with pytest.raises(MalformedTree):
        critical_path(tree_of([server(1, 0, "fe", 0, 100), client(2, 1, "fe", 50, 150),
                               server(2, 1, "be", 60, 140)]))
    with pytest.raises(MalformedTree):
        critical_path(assemble([client(1, 0, "lg", 0, 10)]).trees[0])


def test_breakdown_examples():
    trees = [tree_of([server(1, 0, "frontend", 0, 5, tid=i)]) for i in (1, 2)]
    assert per_service_breakdown(trees).fractions == {"frontend": 1.0}
    a = tree_of([server(1, 0, "A", 0, 6 * MS)])
    b = tree_of([server(1, 0, "B", 0, 4 * MS, tid=2)])
    bd = per_service_breakdown([a, b], "low")
    assert bd.fractions == {"A": 0.6, "B": 0.4} and bd.total_traces == 2 and bd.load_label == "low"
    assert bd.top() == "A" and bd.share(["A", "B"]) == 1.0
    with pytest.raises(EmptyInput):
        per_service_breakdown([])


def test_breakdown_excludes_incomplete_and_total_mode():
    whole = tree_of([server(1, 0, "fe", 0, 100), client(2, 1, "fe", 10, 90), server(2, 1, "be", 20, 80)])
    partial = assemble([server(1, 0, "fe", 0, 100, tid=5), client(2, 1, "fe", 10, 90, tid=5)]).trees[0]
    assert not partial.complete
    bd = per_service_breakdown([whole, partial])
    assert bd.total_traces == 1 and bd.excluded == 1
    total = per_service_breakdown([whole], mode="total")
    assert total.totals_ns == {"fe": 100, "be": 60}


def test_split_examples():
    spans = [server(1, 0, "a", 0, 10 * MS, net=3 * MS, app=6 * MS), server(2, 0, "b", 0, 4, net=0, app=4)]
    split = comm_compute_split(spans)
    assert split["a"].as_tuple() == pytest.approx((0.3, 0.6, 0.1), abs=1e-12)
    assert split["b"].network == 0
    agg = split[AGGREGATE]
    assert agg.spans == 2 and sum(agg.as_tuple()) == pytest.approx(1, abs=1e-9)
    with pytest.raises(EmptyInput):
        comm_compute_split([])


def test_shift_examples():
    low = Breakdown({"A": 0.7, "B": 0.3}, 10, "low")
    high = Breakdown({"A": 0.4, "B": 0.6}, 10, "high")
    rep = compare_loads(low, high)
    assert rep.rising == ["B"] and rep.inversions == [("A", "B")]
    assert [r.service for r in rep.rows] == ["B", "A"]
    same = compare_loads(low, low)
    assert all(r.delta == 0 for r in same.rows) and same.inversions == []
    with pytest.raises(ServiceSetMismatch):
        compare_loads(low, Breakdown({"A": 1.0}, 1))


def test_emit_reports(tmp_path):
    bd = Breakdown({"A": 0.6, "B": 0.4}, 2, "low")
    p1, p2 = emit_report(bd, tmp_path / "a.csv"), emit_report(bd, tmp_path / "b.csv")
    lines = p1.read_text().splitlines()
    assert lines[0] == ",".join(BREAKDOWN_COLUMNS) and len(lines) == 3
    assert p1.read_bytes() == p2.read_bytes()
    back = read_breakdown_csv(p1)
    assert back.fractions == bd.fractions and back.load_label == "low"
    pts = [SweepPoint(r, r, 1, 2, 3, 2, 4, 0, 0, 0) for r in range(10, 70, 10)]
    text = report_text(SweepCurve(pts))
    assert text.splitlines()[0] == ",".join(SWEEP_COLUMNS) and len(text.splitlines()) == 7


# -- brute-force oracle ----------------------------------------------------------------

def oracle_chain(node):
    """Enumerate every sequence of non-overlapping child calls and keep the one whose
    calls, read from the end backwards, finish latest (ties: later start, smaller id)."""
    calls = [c for c in node.children if c.client is not None]

    def key(c):
        return (c.client.t_end, c.client.t_start, -c.span_id)

    best, best_key = [], []
    for r in range(1, len(calls) + 1):
        for subset in itertools.permutations(calls, r):
            ok = all(a.client.t_end <= b.client.t_start for a, b in zip(subset, subset[1:]))
            if ok and subset[-1].client.t_end <= node.server.t_end:
                k = [key(c) for c in reversed(subset)]
                if k > best_key:
                    best, best_key = list(subset), k
    return best


def oracle_totals(node, out=None):
    """Per-service time: each node keeps what its chosen calls do not cover, and each
    chosen call adds (client - server) to the callee plus the callee's own totals."""
    out = defaultdict(int) if out is None else out
    chain = oracle_chain(node)
    out[node.server.service] += node.server.duration - sum(c.client.duration for c in chain)
    for c in chain:
        if c.server is None:
            out[node.server.service] += c.client.duration
        else:
            out[c.server.service] += c.client.duration - c.server.duration
            oracle_totals(c, out)
    return out


def random_tree(rng, tid, max_spans=12):
    t_end = rng.randint(20, 200)
    root = server(rng.getrandbits(63) + 1, 0, "s0", 0, t_end, net=rng.randint(0, 5), app=rng.randint(0, 10), tid=tid)
    spans = [root]
    servers = [root]
    while len(spans) + 2 <= max_spans and rng.random() < 0.85:
        parent = rng.choice(servers)
        if parent.duration < 2:
            continue
        mode = rng.random()
        if mode < 0.4 and parent is not root:
            # serial after an existing sibling
            c0 = rng.randint(parent.t_start + parent.duration // 2, parent.t_end - 1)
        else:
            c0 = rng.randint(parent.t_start, parent.t_end - 1)
        c1 = rng.randint(c0, parent.t_end)
        sid = rng.getrandbits(63) + 1
        spans.append(client(sid, parent.span_id, parent.service, c0, c1, tid=tid))
        if rng.random() < 0.08:
            continue  # callee lost its span
        s0 = rng.randint(c0, c1)
        s1 = rng.randint(s0, c1)
        d = s1 - s0
        net = rng.randint(0, d)
        app = rng.randint(0, d - net)
        srv = server(sid, parent.span_id, f"s{rng.randint(1, 5)}", s0, s1, net=net, app=app, tid=tid)
        spans.append(srv)
        servers.append(srv)
    return spans


def test_oracle_equivalence_1000_trees():
    rng = random.Random(2024)
    matches = fanned = 0
    for i in range(1000):
        spans = random_tree(rng, i + 1)
        assert len(spans) <= 12
        (t,) = assemble(spans).trees
        fanned += any(len(n.children) >= 2 for n in t.nodes())
        path = critical_path(t)
        assert sum(s.duration_ns for s in path) == t.root.server.duration
        assert all(s.duration_ns >= 0 for s in path)
        expected = {k: v for k, v in oracle_totals(t.root).items() if v}
        assert path_totals(path) == expected
        matches += 1
    assert matches == 1000
    assert fanned > 300  # the sample really exercises overlapping siblings


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32), st.integers(2, 50))
def test_breakdown_scale_invariance(seed, k):
    rng = random.Random(seed)
    trees = []
    for i in range(3):
        spans = random_tree(rng, i + 1)
        trees.append(assemble(spans).trees[0])
        scaled = [Span(s.trace_id + 1000, s.span_id, s.parent_span_id, s.service, s.operation, s.kind,
                       s.t_start * k, s.t_end * k, s.net_ns * k, s.app_ns * k) for s in spans]
        trees.append(assemble(scaled).trees[0])
    base = per_service_breakdown(trees[0::2])
    big = per_service_breakdown(trees[1::2])
    assert base.fractions.keys() == big.fractions.keys()
    for svc in base.fractions:
        assert big.fractions[svc] == pytest.approx(base.fractions[svc], abs=1e-12)
    assert base.total_traces == big.total_traces
    if base.total_traces:
        assert sum(base.fractions.values()) == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32))
def test_split_fractions_sum_to_one(seed):
    rng = random.Random(seed)
    spans = [s for i in range(5) for s in random_tree(rng, i + 1)]
    for row in comm_compute_split(spans).values():
        assert sum(row.as_tuple()) == pytest.approx(1.0, abs=1e-9)
        assert min(row.as_tuple()) >= 0
