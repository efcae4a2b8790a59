"""Helpers for running measurement experiments against a live deployment."""
from __future__ import annotations

import contextlib
import logging
import math
import shutil
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

from .deploy import (DeploymentHandle, ShutdownSummary, apply_slowdown, free_port_block, launch, shutdown,
                     start_collector, CollectorHandle, kill_all)
from .loadgen import RequestMix, RunResult, SweepCurve, SweepPoint, Workload, find_knee, run_load_sync
from .topology import ServiceTopology, load_topology
from .tracing import SpanStatus, SpanTree, assemble, load_span_log

log = logging.getLogger(__name__)


@dataclass
class RunTraces:
    trees: list[SpanTree]
    orphans: int
    spans: int
    malformed: int

    @property
    def complete(self) -> list[SpanTree]:
        return [t for t in self.trees if t.complete]

    def ok_roots(self) -> int:
        return sum(1 for t in self.trees if t.root.server is not None and t.root.server.status != SpanStatus.ERROR)


@dataclass
class Bench:
    """A running deployment plus its collector."""

    handle: DeploymentHandle
    collector: CollectorHandle
    workdir: Path
    workload: Workload
    summaries: list[ShutdownSummary] = field(default_factory=list)

    @property
    def entry(self):
        return self.handle.entry

    @property
    def mode(self) -> str:
        return self.handle.mode

    def mark(self) -> int:
        return self.collector.log_path.stat().st_size if self.collector.log_path.exists() else 0

    def settle(self, timeout: float = 10.0) -> None:
        """Wait until every service has shipped its buffered spans."""
        end = time.monotonic() + timeout
        last = -1
        while time.monotonic() < end:
            pending = sum(s.get("pending", 0) for s in self.handle.stats().values())
            count = self.collector.stats()["spans"]
            if pending == 0 and count == last:
                return
            last = count
            time.sleep(0.25)
        log.warning("spans still pending after %.1fs", timeout)

    def traces(self, start: int, end: int | None = None) -> RunTraces:
        sl = load_span_log(self.collector.log_path, start, end)
        asm = assemble(sl.spans)
        trees = [t for t in asm.trees if t.root.server is None or t.root.server.operation != "Health"]
        return RunTraces(trees, len(asm.orphans), len(sl.spans), sl.errors)

    def run(self, mix: RequestMix, rate: float, duration: float, seed: int = 0, *, warmup: float = 1.0,
            **kw) -> RunResult:
        kw.setdefault("workload", self.workload)
        return run_load_sync(self.entry, mix, rate, duration, seed, warmup=warmup, **kw)

    def traced_run(self, mix: RequestMix, rate: float, duration: float, seed: int = 0, **kw
                   ) -> tuple[RunResult, RunTraces]:
        self.settle()
        start = self.mark()
        result = self.run(mix, rate, duration, seed, **kw)
        self.settle()
        return result, self.traces(start, self.mark())

    def set_slowdown(self, factor: float) -> None:
        apply_slowdown(self.handle, {n: factor for n in self.handle.topology.names})

    def set_tracing(self, on: bool) -> None:
        self.handle.set_tracing(on)


def workload_for(dataset: str | Path) -> Workload:
    from .dataset import read_manifest

    m = read_manifest(dataset)
    return Workload(movies=int(m["n"]), users=int(m.get("users", m["n"])))


@contextlib.contextmanager
def bench(dataset: str | Path, mode: str = "process", *, tracing: bool = True,
          topology: ServiceTopology | None = None, workdir: str | Path | None = None,
          ready_timeout: float = 30.0, **launch_kw) -> Iterator[Bench]:
    """Collector + deployment for the duration of the block; always torn down."""
    own = workdir is None
    workdir = Path(workdir or tempfile.mkdtemp(prefix="moviebench-bench-"))
    t = (topology or load_topology())
    t = t.with_ports(free_port_block(len(t.services)))
    col = start_collector(workdir / "spans" / "spans.log")
    handle = b = None
    try:
        handle = launch(t, col.address, dataset, workdir / "deploy", mode=mode, tracing=tracing,
                        ready_timeout=ready_timeout, **launch_kw)
        b = Bench(handle, col, workdir, workload_for(dataset))
        yield b
        b.summaries.append(shutdown(handle))
    finally:
        if handle is not None:
            shutdown(handle)
            kill_all(handle)
        col.stop()
        if b is not None and b.collector is not col:
            b.collector.stop()  # a replacement started by the caller
        if own:
            shutil.rmtree(workdir, ignore_errors=True)


def search_knee(b: Bench, mix: RequestMix, rates: Sequence[float], duration: float, *, repeats: int = 1,
                seed: int = 0, after: int = 1, cooldown: float = 1.0, throughput_ratio: float = 0.95,
                latency_factor: float = 10.0, **run_kw) -> tuple[SweepCurve, float | None]:
    """Sweep rates in order, stopping ``after`` points past the first knee."""
    points: list[SweepPoint] = []
    knee = None
    left = None
    for rate in rates:
        runs = []
        for r in range(repeats):
            runs.append(b.run(mix, rate, duration, seed + r, **run_kw))
            time.sleep(cooldown)
        points.append(SweepPoint.from_runs(rate, runs))
        log.info("rate %g achieved %.1f p99 %.0fus", rate, points[-1].achieved, points[-1].p99_us)
        if knee is None and len(points) >= 2:
            knee = find_knee(SweepCurve(points, str(mix), throughput_ratio, latency_factor))
            if knee is not None:
                left = after
        if left is not None:
            if left == 0:
                break
            left -= 1
    return SweepCurve(points, str(mix), throughput_ratio, latency_factor), knee


def median(xs: Sequence[float]) -> float:
    s = sorted(xs)
    if not s:
        return math.nan
    mid = len(s) // 2
    return s[mid] if len(s) % 2 else (s[mid - 1] + s[mid]) / 2
