"""HTTP control plane: datasets, deployments, load runs and analysis.

The service holds live deployments (and their collectors) in memory. Load
runs execute in a worker thread and return when finished.
"""
from __future__ import annotations

import asyncio
import contextlib
import itertools
import math
import shutil
import tempfile
import threading
from pathlib import Path
from typing import Literal

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field, field_validator

from . import __version__
from .analysis import (EmptyInput, MalformedTree, comm_compute_split, compare_loads,
                       per_service_breakdown, read_breakdown_csv)
from .dataset import InvalidCount, generate_dataset, read_manifest
from .deploy import (CollectorHandle, DeployError, DeploymentHandle, UnknownService, apply_slowdown, kill_all,
                     launch, shutdown, start_collector)
from .experiments import workload_for
from .loadgen import EntryUnreachable, RequestMix, RunResult, SweepCurve, Workload, find_knee, run_load, sweep
from .rpc import parse_address
from .topology import TopologyError, load_topology
from .tracing import assemble, load_span_log


class DatasetRequest(BaseModel):
    out_dir: str
    n: int = 1000
    seed: int = 0
    video_bytes: int = 50 * 1024 * 1024
    video_pool: int = 2


class DatasetInfo(BaseModel):
    root: str
    n: int
    seed: int
    checksum: str


class DeployRequest(BaseModel):
    dataset: str
    mode: Literal["process", "group", "monolith"] = "process"
    topology: str | None = Field(None, description="topology file path; the shipped default if omitted")
    tracing: bool = True
    workdir: str | None = None
    base_port: int | None = Field(None, description="renumber service ports from here; keep file ports if omitted")
    collector: str | None = Field(None, description="existing collector host:port; one is started if omitted")
    ready_timeout: float = 30.0


class DeploymentInfo(BaseModel):
    id: str
    mode: str
    entry: str
    services: dict[str, str]
    collector: str | None
    span_log: str | None
    workdir: str
    pids: dict[str, int]


class SlowdownRequest(BaseModel):
    profile: dict[str, float]


class TracingRequest(BaseModel):
    enabled: bool


class ShutdownInfo(BaseModel):
    services: dict[str, dict[str, int]]
    forced_kills: list[str]
    conserved: bool


class RunRequest(BaseModel):
    deployment: str | None = None
    entry: str | None = None
    mix: str = "browse=0.8,review=0.15,rent=0.05"
    rate: float = Field(ge=0)
    duration: float = Field(gt=0)
    seed: int = 0
    arrival: Literal["poisson", "uniform"] = "poisson"
    warmup: float = 0.0
    timeout: float = 5.0
    movies: int | None = None
    users: int | None = None

    @field_validator("mix")
    @classmethod
    def _mix(cls, v: str) -> str:
        RequestMix.parse(v)
        return v


class RunInfo(BaseModel):
    offered_qps: float
    achieved_qps: float
    scheduled: int
    ok: int
    errors: int
    timeouts: int
    shed: int
    p50_us: float | None
    p90_us: float | None
    p99_us: float | None
    lag_p99_us: float
    valid: bool


class SweepRequest(RunRequest):
    rate: float = 0.0
    rates: list[float]
    repeats: int = Field(1, ge=1)
    cooldown: float = 2.0


class SweepInfo(BaseModel):
    csv: str
    knee: float | None


class BreakdownRequest(BaseModel):
    spans: str
    label: str = ""
    mode: Literal["critical", "total"] = "critical"


class BreakdownInfo(BaseModel):
    fractions: dict[str, float]
    traces: int
    excluded: int
    load_label: str


class SplitInfo(BaseModel):
    services: dict[str, tuple[float, float, float]]


class ShiftRequest(BaseModel):
    low: str
    high: str


class ShiftInfo(BaseModel):
    rows: list[dict]
    inversions: list[tuple[str, str]]


class _Deployment:
    def __init__(self, id_: str, handle: DeploymentHandle, collector: CollectorHandle | None,
                 collector_addr: str | None, span_log: str | None, dataset: str, own_workdir: Path | None):
        self.id = id_
        self.handle = handle
        self.collector = collector
        self.collector_addr = collector_addr
        self.span_log = span_log
        self.dataset = dataset
        self.own_workdir = own_workdir
        self.summary: ShutdownInfo | None = None

    def info(self) -> DeploymentInfo:
        h = self.handle
        hosted = h.hosted()
        return DeploymentInfo(id=self.id, mode=h.mode, entry=_addr(h.entry),
                              services={n: _addr(h.address(n)) for n in hosted},
                              collector=self.collector_addr, span_log=self.span_log, workdir=str(h.workdir),
                              pids=h.pids())


def _addr(a) -> str:
    return f"{a[0]}:{a[1]}"


def _us(x: float) -> float | None:
    return None if math.isnan(x) else x / 1e3


def run_info(r: RunResult) -> RunInfo:
    return RunInfo(offered_qps=r.offered_rate, achieved_qps=r.achieved_throughput, scheduled=r.scheduled, ok=r.ok,
                   errors=r.error_count, timeouts=r.timeout_count, shed=r.shed_count, p50_us=_us(r.p(0.5)),
                   p90_us=_us(r.p(0.9)), p99_us=_us(r.p(0.99)), lag_p99_us=r.lag_p99_ns / 1e3, valid=r.valid)


def create_app() -> FastAPI:
    deployments: dict[str, _Deployment] = {}

    @contextlib.asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        for d in list(deployments.values()):
            shutdown(d.handle)
            kill_all(d.handle)
            if d.collector:
                d.collector.stop()
            if d.own_workdir:
                shutil.rmtree(d.own_workdir, ignore_errors=True)
        deployments.clear()

    app = FastAPI(title="moviebench", version=__version__, lifespan=lifespan)
    ids = itertools.count(1)
    lock = threading.Lock()

    def get(dep_id: str) -> _Deployment:
        d = deployments.get(dep_id)
        if d is None:
            raise HTTPException(404, f"no deployment {dep_id}")
        return d

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "version": __version__}

    @app.post("/datasets", response_model=DatasetInfo)
    def create_dataset(req: DatasetRequest) -> DatasetInfo:
        try:
            ds = generate_dataset(req.n, req.seed, req.out_dir, video_bytes=req.video_bytes,
                                  video_pool=req.video_pool)
        except (InvalidCount, ValueError) as exc:
            raise HTTPException(422, str(exc)) from None
        return DatasetInfo(root=str(ds.root), n=ds.n, seed=ds.seed, checksum=ds.checksum)

    @app.get("/datasets", response_model=DatasetInfo)
    def dataset_info(root: str) -> DatasetInfo:
        try:
            m = read_manifest(root)
        except OSError as exc:
            raise HTTPException(404, str(exc)) from None
        return DatasetInfo(root=root, n=int(m["n"]), seed=int(m["seed"]), checksum=m["checksum"])

    @app.post("/deployments", response_model=DeploymentInfo, status_code=201)
    def create_deployment(req: DeployRequest) -> DeploymentInfo:
        try:
            t = load_topology(req.topology)
        except (OSError, TopologyError) as exc:
            raise HTTPException(422, str(exc)) from None
        if req.base_port is not None:
            t = t.with_ports(req.base_port)
        with lock:
            dep_id = f"d{next(ids)}"
        own = None
        workdir = Path(req.workdir) if req.workdir else None
        if workdir is None:
            own = workdir = Path(tempfile.mkdtemp(prefix=f"moviebench-{dep_id}-"))
        col = None
        span_log = None
        try:
            if req.collector:
                col_addr = parse_address(req.collector)
            else:
                span_log = str(workdir / "spans" / "spans.log")
                col = start_collector(span_log)
                col_addr = col.address
            handle = launch(t, col_addr, req.dataset, workdir / "deploy", mode=req.mode, tracing=req.tracing,
                            ready_timeout=req.ready_timeout)
        except DeployError as exc:
            if col:
                col.stop()
            raise HTTPException(409, f"{type(exc).__name__}: {exc}") from None
        except (OSError, ValueError, TopologyError) as exc:
            if col:
                col.stop()
            raise HTTPException(422, str(exc)) from None
        d = _Deployment(dep_id, handle, col, _addr(col_addr), span_log, req.dataset, own)
        deployments[dep_id] = d
        return d.info()

    @app.get("/deployments", response_model=list[DeploymentInfo])
    def list_deployments() -> list[DeploymentInfo]:
        return [d.info() for d in deployments.values()]

    @app.get("/deployments/{dep_id}", response_model=DeploymentInfo)
    def deployment_info(dep_id: str) -> DeploymentInfo:
        return get(dep_id).info()

    @app.get("/deployments/{dep_id}/stats")
    def deployment_stats(dep_id: str) -> dict:
        return get(dep_id).handle.stats()

    @app.post("/deployments/{dep_id}/slowdown")
    def set_slowdown(dep_id: str, req: SlowdownRequest) -> dict:
        try:
            apply_slowdown(get(dep_id).handle, req.profile)
        except UnknownService as exc:
            raise HTTPException(404, str(exc)) from None
        except ValueError as exc:
            raise HTTPException(422, str(exc)) from None
        return {"applied": req.profile}

    @app.post("/deployments/{dep_id}/tracing")
    def set_tracing(dep_id: str, req: TracingRequest) -> dict:
        get(dep_id).handle.set_tracing(req.enabled)
        return {"tracing": req.enabled}

    @app.delete("/deployments/{dep_id}", response_model=ShutdownInfo)
    def delete_deployment(dep_id: str, deadline: float = 5.0) -> ShutdownInfo:
        d = get(dep_id)
        if d.summary is None:
            s = shutdown(d.handle, deadline)
            kill_all(d.handle)
            if d.collector:
                d.collector.stop()
            d.summary = ShutdownInfo(services=s.services, forced_kills=s.forced_kills, conserved=s.conserved())
        del deployments[dep_id]
        return d.summary

    def _target(req: RunRequest) -> tuple[tuple[str, int], Workload]:
        if req.deployment:
            d = get(req.deployment)
            wl = workload_for(d.dataset)
            entry = d.handle.entry
        elif req.entry:
            entry = parse_address(req.entry)
            wl = Workload()
        else:
            raise HTTPException(422, "give a deployment id or an entry address")
        if req.movies or req.users:
            wl = Workload(movies=req.movies or wl.movies, users=req.users or wl.users)
        return entry, wl

    @app.post("/runs", response_model=RunInfo)
    async def create_run(req: RunRequest) -> RunInfo:
        entry, wl = _target(req)
        try:
            r = await run_load(entry, RequestMix.parse(req.mix), req.rate, req.duration, req.seed, req.arrival,
                               workload=wl, warmup=req.warmup, timeout=req.timeout)
        except EntryUnreachable as exc:
            raise HTTPException(502, str(exc)) from None
        except ValueError as exc:
            raise HTTPException(422, str(exc)) from None
        return run_info(r)

    @app.post("/sweeps", response_model=SweepInfo)
    async def create_sweep(req: SweepRequest) -> SweepInfo:
        entry, wl = _target(req)

        def work() -> SweepCurve:
            return sweep(entry, RequestMix.parse(req.mix), req.rates, req.duration, req.seed,
                         repeats=req.repeats, cooldown=req.cooldown, arrival=req.arrival, workload=wl,
                         warmup=req.warmup, timeout=req.timeout)
        try:
            curve = await asyncio.to_thread(work)
        except ValueError as exc:
            raise HTTPException(422, str(exc)) from None
        except Exception as exc:  # SweepFailed and friends carry the failing rate
            raise HTTPException(502, str(exc)) from None
        knee = find_knee(curve) if len(curve) >= 2 else None
        return SweepInfo(csv=curve.to_csv(), knee=knee)

    def _trees(path: str):
        try:
            log = load_span_log(path)
        except OSError as exc:
            raise HTTPException(404, str(exc)) from None
        return assemble(log.spans).trees

    @app.post("/analyze/breakdown", response_model=BreakdownInfo)
    def analyze_breakdown(req: BreakdownRequest) -> BreakdownInfo:
        try:
            b = per_service_breakdown(_trees(req.spans), req.label, mode=req.mode, skip_errors=True)
        except (EmptyInput, MalformedTree) as exc:
            raise HTTPException(422, str(exc)) from None
        return BreakdownInfo(fractions=b.fractions, traces=b.total_traces, excluded=b.excluded,
                             load_label=b.load_label)

    @app.post("/analyze/split", response_model=SplitInfo)
    def analyze_split(req: BreakdownRequest) -> SplitInfo:
        try:
            rows = comm_compute_split(_trees(req.spans))
        except EmptyInput as exc:
            raise HTTPException(422, str(exc)) from None
        return SplitInfo(services={k: v.as_tuple() for k, v in rows.items()})

    @app.post("/analyze/shift", response_model=ShiftInfo)
    def analyze_shift(req: ShiftRequest) -> ShiftInfo:
        try:
            rep = compare_loads(read_breakdown_csv(req.low), read_breakdown_csv(req.high))
        except ValueError as exc:  # a mismatch or a file that is not a breakdown
            raise HTTPException(422, str(exc)) from None
        except OSError as exc:
            raise HTTPException(404, str(exc)) from None
        return ShiftInfo(rows=[r.__dict__ for r in rep.rows], inversions=rep.inversions)

    app.state.deployments = deployments
    return app


def main(host: str = "127.0.0.1", port: int = 8080) -> None:
    import uvicorn

    uvicorn.run(create_app(), host=host, port=port, log_level="warning")
