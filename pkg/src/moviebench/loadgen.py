"""Open-loop load generation, rate sweeps and saturation-knee detection.

Send times are computed up front from (rate, duration, seed, arrival) and
latency is measured from the scheduled time, so a slow server cannot hide
its queueing by delaying the generator.
"""
from __future__ import annotations

import asyncio
import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

from . import wire
from .client import MovieClient
from .dataset import MIB
from .histogram import LatencyHistogram, merge, percentile
from .rpc import Address, CallTimeout, Client, RpcError, blocking_call
from .wire import Kind

log = logging.getLogger(__name__)

QUERY_TYPES = ("browse", "review", "rent")
DEFAULT_MIX = "browse=0.8,review=0.15,rent=0.05"
SWEEP_COLUMNS = ("offered_qps", "achieved_qps", "p50_us", "p90_us", "p99_us", "p99_whisker_lo_us",
                 "p99_whisker_hi_us", "errors", "timeouts", "shed")
LAG_LIMIT_NS = 1_000_000


class LoadError(RuntimeError):
    pass


class EntryUnreachable(LoadError):
    pass


class CurveTooShort(ValueError):
    pass


class SweepFailed(LoadError):
    def __init__(self, rate: float, cause: BaseException):
        super().__init__(f"run at {rate:g} QPS failed: {cause}")
        self.rate = rate
        self.cause = cause


@dataclass(frozen=True)
class RequestMix:
    browse: float = 0.8
    review: float = 0.15
    rent: float = 0.05

    def __post_init__(self):
        w = self.weights
        if any(x < 0 or not math.isfinite(x) for x in w):
            raise ValueError("mix weights must be non-negative")
        if abs(sum(w) - 1.0) > 1e-9:
            raise ValueError(f"mix weights must sum to 1, got {sum(w)!r}")

    @property
    def weights(self) -> tuple[float, float, float]:
        return (self.browse, self.review, self.rent)

    @classmethod
    def parse(cls, text: str) -> "RequestMix":
        """``browse=0.8,review=0.15,rent=0.05``; omitted types weigh 0."""
        values = dict.fromkeys(QUERY_TYPES, 0.0)
        for part in filter(None, (p.strip() for p in text.split(","))):
            name, sep, value = part.partition("=")
            if not sep or name.strip() not in values:
                raise ValueError(f"bad mix entry {part!r}")
            values[name.strip()] = float(value)
        return cls(**values)

    @classmethod
    def only(cls, kind: str) -> "RequestMix":
        return cls(**{k: float(k == kind) for k in QUERY_TYPES})

    def __str__(self) -> str:
        return ",".join(f"{k}={v:g}" for k, v in zip(QUERY_TYPES, self.weights))


@dataclass(frozen=True)
class Workload:
    """Parameters of the requests themselves (ids are drawn uniformly)."""

    movies: int = 1000
    users: int = 1000
    review_bytes: int = 256
    price: int = 1
    chunk_size: int = MIB


def schedule(rate: float, duration: float, seed: int, arrival: str = "poisson") -> list[int]:
    """Scheduled send offsets in ns from run start, all < duration."""
    import numpy as np

    if rate < 0 or not math.isfinite(rate):
        raise ValueError("rate must be >= 0")
    if duration <= 0:
        raise ValueError("duration must be > 0")
    if rate == 0:
        return []
    horizon = int(duration * 1e9)
    if arrival == "uniform":
        n = int(round(rate * duration))
        return [int(i * 1e9 / rate) for i in range(n) if i * 1e9 / rate < horizon]
    if arrival != "poisson":
        raise ValueError(f"unknown arrival process {arrival!r}")
    rng = np.random.default_rng([seed, 0])
    out: list[int] = []
    t = 0.0
    expected = int(rate * duration * 1.2) + 16
    while True:
        gaps = rng.exponential(1e9 / rate, size=expected)
        for g in gaps:
            t += g
            if t >= horizon:
                return out
            out.append(int(t))


def request_plan(n: int, mix: RequestMix, workload: Workload, seed: int) -> list[tuple]:
    """Per-slot (type, args) drawn i.i.d. from the mix; independent of the send times."""
    import numpy as np

    rng = np.random.default_rng([seed, 1])
    kinds = rng.choice(3, size=n, p=np.array(mix.weights) / sum(mix.weights)) if n else []
    movies = rng.integers(1, workload.movies + 1, size=n)
    users = rng.integers(1, workload.users + 1, size=n)
    stars = rng.integers(1, 6, size=n)
    plan = []
    for i in range(n):
        kind = QUERY_TYPES[int(kinds[i])]
        if kind == "browse":
            plan.append((kind, (int(movies[i]),)))
        elif kind == "review":
            text = f"review {i} of movie {int(movies[i])} ".encode()
            text = (text * (workload.review_bytes // len(text) + 1))[:workload.review_bytes]
            plan.append((kind, (int(users[i]), int(movies[i]), text, int(stars[i]))))
        else:
            plan.append((kind, (int(users[i]), int(movies[i]), workload.price, workload.chunk_size)))
    return plan


@dataclass
class RunResult:
    offered_rate: float
    achieved_throughput: float
    duration: float
    histograms: dict[str, LatencyHistogram]
    error_count: int = 0
    timeout_count: int = 0
    shed_count: int = 0
    scheduled: int = 0
    ok: int = 0
    ok_rpcs: int = 0
    rpcs: int = 0
    warmup: float = 0.0
    measured: int = 0
    lag_p99_ns: int = 0
    lag_max_ns: int = 0
    errors_by_code: dict[str, int] = field(default_factory=dict)

    @property
    def valid(self) -> bool:
        """False when the generator itself fell behind its schedule."""
        return self.lag_p99_ns <= LAG_LIMIT_NS

    @property
    def overall(self) -> LatencyHistogram:
        out = LatencyHistogram()
        for h in self.histograms.values():
            out = merge(out, h)
        return out

    def p(self, q: float, kind: str | None = None) -> float:
        """Percentile in ns (nan if nothing was measured)."""
        h = self.overall if kind is None else self.histograms[kind]
        return percentile(h, q) if h.count else float("nan")

    def conserved(self) -> bool:
        return self.scheduled == self.ok + self.error_count + self.timeout_count + self.shed_count


async def _probe(entry: Address, timeout: float) -> None:
    loop = asyncio.get_running_loop()
    try:
        resp = await loop.run_in_executor(None, lambda: blocking_call(entry, "Health", timeout=timeout))
    except (RpcError, OSError) as exc:
        raise EntryUnreachable(f"entry {entry[0]}:{entry[1]} unreachable: {exc}") from None
    if resp.kind != Kind.RESPONSE:
        raise EntryUnreachable(f"entry {entry[0]}:{entry[1]} unhealthy")


async def run_load(entry: Address, mix: RequestMix, rate: float, duration: float, seed: int = 0,
                   arrival: str = "poisson", *, workload: Workload = Workload(), warmup: float = 0.0,
                   timeout: float = 5.0, senders: int = 4, connections: int = 8,
                   grace: float | None = None) -> RunResult:
    """Drive ``entry`` open-loop at ``rate`` QPS for ``duration`` seconds.

    Requests scheduled in the first ``warmup`` seconds are sent and counted
    but kept out of the histograms and the throughput figure. Achieved
    throughput counts measured requests that completed successfully by the
    end of the window plus ``grace`` (default min(0.5 s, 10% of the
    window)), scaled by the offered rate.
    """
    if not 0 <= warmup < duration:
        raise ValueError("warmup must be in [0, duration)")
    sched = schedule(rate, duration, seed, arrival)
    plan = request_plan(len(sched), mix, workload, seed)
    hists = [{k: LatencyHistogram() for k in QUERY_TYPES} for _ in range(senders)]
    result = RunResult(rate, 0.0, duration, {}, scheduled=len(sched), warmup=warmup)
    if not sched:
        result.histograms = {k: LatencyHistogram() for k in QUERY_TYPES}
        return result

    await _probe(entry, timeout)
    client = Client(pool_size=connections, default_timeout=timeout)
    mc = MovieClient(entry, client, timeout, wire.IdSource())
    warm_ns = int(warmup * 1e9)
    window_ns = int(duration * 1e9)
    grace_ns = int((min(0.5, 0.1 * (duration - warmup)) if grace is None else grace) * 1e9)
    lags = [0] * len(sched)
    in_time = 0
    next_slot = 0
    inflight: set[asyncio.Task] = set()

    async def issue(i: int, worker: int, start: int) -> None:
        nonlocal in_time
        kind, args = plan[i]
        scheduled = start + sched[i]
        code = None
        rpcs = 1
        try:
            if kind == "browse":
                r = await mc.browse(*args)
            elif kind == "review":
                r = await mc.review(*args)
            else:
                r = await mc.rent(*args[:3], chunk_size=args[3])
            rpcs = r.rpcs
            code = r.error
        except CallTimeout:
            code = "Timeout"
        except RpcError as exc:
            code = getattr(exc, "code", type(exc).__name__)
        done = time.monotonic_ns()
        result.rpcs += rpcs
        result.ok_rpcs += rpcs - (code is not None)
        measured = sched[i] >= warm_ns
        if code is None:
            result.ok += 1
            if measured:
                hists[worker][kind].record(done - scheduled)
                if done - start <= window_ns + grace_ns:
                    in_time += 1
        elif code == "Timeout":
            result.timeout_count += 1
            if measured:
                hists[worker][kind].record(max(done - scheduled, int(timeout * 1e9)))
        elif code == "Shed":
            result.shed_count += 1
        else:
            result.error_count += 1
        if code is not None:
            result.errors_by_code[code] = result.errors_by_code.get(code, 0) + 1

    async def sender(worker: int, start: int) -> None:
        nonlocal next_slot
        loop = asyncio.get_running_loop()
        while next_slot < len(sched):
            i = next_slot
            next_slot += 1
            due = start + sched[i]
            wait = due - time.monotonic_ns()
            if wait > 0:
                await asyncio.sleep(wait / 1e9)
            lags[i] = max(0, time.monotonic_ns() - due)
            task = loop.create_task(issue(i, worker, start))
            inflight.add(task)
            task.add_done_callback(inflight.discard)

    start = time.monotonic_ns() + 20_000_000
    try:
        await asyncio.gather(*(sender(w, start) for w in range(senders)))
        while inflight:
            await asyncio.gather(*list(inflight), return_exceptions=True)
    finally:
        mc.close()

    result.histograms = {k: _merge_all(h[k] for h in hists) for k in QUERY_TYPES}
    result.measured = sum(1 for t in sched if t >= warm_ns)
    if result.measured:
        result.achieved_throughput = rate * in_time / result.measured
    lag_sorted = sorted(lags)
    result.lag_p99_ns = lag_sorted[max(0, math.ceil(0.99 * len(lag_sorted)) - 1)]
    result.lag_max_ns = lag_sorted[-1]
    return result


def _merge_all(hs) -> LatencyHistogram:
    out = LatencyHistogram()
    for h in hs:
        out = merge(out, h)
    return out


def run_load_sync(*args, **kwargs) -> RunResult:
    return asyncio.run(run_load(*args, **kwargs))


@dataclass
class SweepPoint:
    offered: float
    achieved: float
    p50_us: float
    p90_us: float
    p99_us: float
    p99_lo_us: float
    p99_hi_us: float
    errors: int
    timeouts: int
    shed: int
    runs: list[RunResult] = field(default_factory=list, repr=False)

    @classmethod
    def from_runs(cls, rate: float, runs: Sequence[RunResult]) -> "SweepPoint":
        import numpy as np

        def med(xs):
            xs = [x for x in xs if not math.isnan(x)]
            return float(np.median(xs)) if xs else float("nan")

        p99s = [r.p(0.99) / 1e3 for r in runs]
        finite = [x for x in p99s if not math.isnan(x)]
        lo, hi = (float(v) for v in np.percentile(finite, [10, 90])) if finite else (float("nan"),) * 2
        return cls(rate, med(r.achieved_throughput for r in runs), med(r.p(0.5) / 1e3 for r in runs),
                   med(r.p(0.9) / 1e3 for r in runs), med(p99s), lo, hi,
                   sum(r.error_count for r in runs), sum(r.timeout_count for r in runs),
                   sum(r.shed_count for r in runs), list(runs))

    def row(self) -> list[str]:
        return [_fmt(self.offered), _fmt(self.achieved), _fmt(self.p50_us), _fmt(self.p90_us), _fmt(self.p99_us),
                _fmt(self.p99_lo_us), _fmt(self.p99_hi_us), str(self.errors), str(self.timeouts), str(self.shed)]


@dataclass
class SweepCurve:
    points: list[SweepPoint]
    mix: str = ""
    throughput_ratio: float = 0.95
    latency_factor: float = 10.0

    def __post_init__(self):
        rates = [p.offered for p in self.points]
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise ValueError("offered rates must be strictly increasing")

    def __len__(self) -> int:
        return len(self.points)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for p in self.points:
            w.writerow(p.row())
        return buf.getvalue()


def _fmt(x: float) -> str:
    if isinstance(x, float) and math.isnan(x):
        return ""
    return f"{x:.3f}"


def sweep(entry: Address, mix: RequestMix, rates: Sequence[float], duration_per_point: float, seed: int = 0,
          *, repeats: int = 1, cooldown: float = 2.0, arrival: str = "poisson",
          on_point: Callable[[SweepPoint], None] | None = None, **run_kwargs) -> SweepCurve:
    """One run per (rate, repeat); each point aggregates its repeats."""
    rates = list(rates)
    if any(b <= a for a, b in zip(rates, rates[1:])):
        raise ValueError("rates must be strictly increasing")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    points = []
    first = True
    for rate in rates:
        runs = []
        for r in range(repeats):
            if not first and cooldown > 0:
                time.sleep(cooldown)
            first = False
            try:
                runs.append(run_load_sync(entry, mix, rate, duration_per_point, seed + r, arrival, **run_kwargs))
            except (LoadError, RpcError, OSError) as exc:
                raise SweepFailed(rate, exc) from exc
        point = SweepPoint.from_runs(rate, runs)
        points.append(point)
        if on_point:
            on_point(point)
    return SweepCurve(points, str(mix))


def find_knee(c: SweepCurve, throughput_ratio: float | None = None,
              latency_factor: float | None = None) -> float | None:
    """Smallest offered rate where throughput falls below ``throughput_ratio``
    of offered or p99 exceeds ``latency_factor`` times the lowest-rate p99."""
    if len(c.points) < 2:
        raise CurveTooShort("need at least 2 points")
    tr = c.throughput_ratio if throughput_ratio is None else throughput_ratio
    lf = c.latency_factor if latency_factor is None else latency_factor
    base = c.points[0].p99_us
    for p in c.points:
        if p.achieved < tr * p.offered or (not math.isnan(base) and p.p99_us > lf * base):
            return p.offered
    return None


def read_curve_csv(text: str) -> SweepCurve:
    rows = list(csv.DictReader(io.StringIO(text)))
    pts = []
    for r in rows:
        f = {k: float(r[k]) if r[k] != "" else float("nan") for k in SWEEP_COLUMNS}
        pts.append(SweepPoint(f["offered_qps"], f["achieved_qps"], f["p50_us"], f["p90_us"], f["p99_us"],
                              f["p99_whisker_lo_us"], f["p99_whisker_hi_us"], int(f["errors"]),
                              int(f["timeouts"]), int(f["shed"])))
    return SweepCurve(pts)
