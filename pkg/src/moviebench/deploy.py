"""Launch, probe, reconfigure and tear down deployments of a topology."""
from __future__ import annotations

import json
import logging
import os
import shutil
import signal
import socket
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

from .rpc import Address, RpcError, blocking_call, format_address
from .topology import ServiceTopology, TopologyError, validate
from .wire import Kind

log = logging.getLogger(__name__)

HOST = "127.0.0.1"


class DeployError(RuntimeError):
    pass


class PortInUse(DeployError):
    def __init__(self, service: str, port: int):
        super().__init__(f"port {port} for service {service} is already in use")
        self.service = service
        self.port = port


class SpawnFailure(DeployError):
    def __init__(self, service: str, detail: str = ""):
        super().__init__(f"service {service} failed to start{': ' + detail if detail else ''}")
        self.service = service


class ReadinessTimeout(DeployError):
    def __init__(self, service: str, deadline: float):
        super().__init__(f"service {service} not healthy within {deadline:g}s")
        self.service = service
        self.deadline = deadline


class UnknownService(DeployError):
    pass


def port_free(port: int, host: str = HOST) -> bool:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            s.bind((host, port))
        except OSError:
            return False
    return True


def free_port_block(count: int, start: int = 20000, end: int = 60000) -> int:
    """First base port such that base..base+count-1 are all bindable."""
    base = start + (os.getpid() * 37) % 1000 * 20
    tries = 0
    while tries < 2000:
        if base + count >= end:
            base = start
        if all(port_free(base + i) for i in range(count)):
            return base
        base += count
        tries += 1
    raise DeployError("no free port block")


def health(addr: Address, timeout: float = 1.0) -> bool:
    try:
        resp = blocking_call(addr, "Health", timeout=timeout)
    except (RpcError, OSError):
        return False
    return resp.kind == Kind.RESPONSE and resp.get(0) == b"OK"


def _spawn(module: str, args: list[str], log_path: Path) -> subprocess.Popen:
    env = dict(os.environ)
    src = str(Path(__file__).resolve().parent.parent)
    env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "") if env.get("PYTHONPATH") else src
    out = open(log_path, "ab")
    try:
        return subprocess.Popen([sys.executable, "-m", module, *args], stdout=out, stderr=subprocess.STDOUT,
                                env=env, start_new_session=True)
    finally:
        out.close()


def _kill(proc: subprocess.Popen, grace: float = 2.0) -> None:
    if proc.poll() is not None:
        return
    proc.terminate()
    try:
        proc.wait(grace)
    except subprocess.TimeoutExpired:
        proc.kill()
        proc.wait()


@dataclass
class CollectorHandle:
    address: Address
    log_path: Path
    proc: subprocess.Popen | None = None

    def stats(self) -> dict:
        resp = blocking_call(self.address, "Stats", timeout=5.0)
        return json.loads(resp.get(0, b"{}"))

    def stop(self) -> None:
        if self.proc is not None:
            _kill(self.proc)
            self.proc = None


def start_collector(log_path: str | Path, port: int = 0, timeout: float = 10.0) -> CollectorHandle:
    log_path = Path(log_path)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    ready = log_path.with_suffix(".addr")
    ready.unlink(missing_ok=True)
    proc = _spawn("moviebench.collector", ["--log", str(log_path), "--port", str(port), "--ready-file", str(ready)],
                  log_path.with_suffix(".stderr"))
    end = time.monotonic() + timeout
    while time.monotonic() < end:
        if ready.exists():
            host, _, p = ready.read_text().strip().rpartition(":")
            return CollectorHandle((host, int(p)), log_path, proc)
        if proc.poll() is not None:
            raise SpawnFailure("collector", f"exit code {proc.returncode}")
        time.sleep(0.02)
    _kill(proc)
    raise ReadinessTimeout("collector", timeout)


@dataclass
class ShutdownSummary:
    services: dict[str, dict[str, int]] = field(default_factory=dict)
    forced_kills: list[str] = field(default_factory=list)

    @property
    def dropped(self) -> dict[str, int]:
        return {k: v.get("dropped", 0) for k, v in self.services.items()}

    def conserved(self) -> bool:
        return all(v["persisted"] + v["dropped"] == v["recorded"] for v in self.services.values())


@dataclass
class DeploymentHandle:
    topology: ServiceTopology
    mode: str
    workdir: Path
    collector: Address | None
    groups: dict[str, list[str]]  # process key -> services it hosts
    procs: dict[str, subprocess.Popen]
    ready: dict[str, bool] = field(default_factory=dict)
    summary: ShutdownSummary | None = None

    @property
    def entry(self) -> Address:
        return (HOST, self.topology.service(self.topology.entry).port)

    def address(self, service: str) -> Address:
        return (HOST, self.topology.service(service).port)

    def control_addresses(self) -> dict[str, Address]:
        """One control address per process."""
        return {key: self.address(names[0]) for key, names in self.groups.items()}

    def hosted(self) -> list[str]:
        return [n for names in self.groups.values() for n in names]

    def pids(self) -> dict[str, int]:
        return {k: p.pid for k, p in self.procs.items()}

    def stats(self) -> dict[str, dict]:
        out = {}
        for key, addr in self.control_addresses().items():
            resp = blocking_call(addr, "Stats", timeout=5.0)
            data = json.loads(resp.get(0, b"{}"))
            data.pop("_slowdown", None)
            out.update(data)
        return out

    def set_tracing(self, enabled: bool) -> None:
        for addr in self.control_addresses().values():
            blocking_call(addr, "SetTracing", {0: b"1" if enabled else b"0"}, timeout=5.0)


def _prepare_workdir(workdir: Path, dataset: Path) -> None:
    records = workdir / "records"
    if records.exists():
        shutil.rmtree(records)
    shutil.copytree(dataset / "records", records)


def launch(t: ServiceTopology, collector: Address | None, dataset: str | Path, workdir: str | Path | None = None,
           mode: str = "process", tracing: bool = True, ready_timeout: float = 10.0,
           cache_capacity: int | None = None, span_capacity: int | None = None,
           call_timeout: float | None = None) -> DeploymentHandle:
    """Start every service of ``t`` and return once all answer a health probe.

    Modes: ``process`` (one OS process per service), ``group`` (all
    services in one process, still talking RPC over loopback) and
    ``monolith`` (one process, handlers composed in-process, entry port only).
    The workdir receives a fresh copy of the dataset's store logs.
    """
    if mode not in ("process", "group", "monolith"):
        raise ValueError(f"unknown mode {mode!r}")
    issues = validate(t)
    if issues:
        raise TopologyError(issues)
    hosted = [t.entry] if mode == "monolith" else t.names
    for name in hosted:
        port = t.service(name).port
        if not port_free(port):
            raise PortInUse(name, port)

    dataset = Path(dataset).resolve()
    workdir = Path(workdir or tempfile.mkdtemp(prefix="moviebench-")).resolve()
    workdir.mkdir(parents=True, exist_ok=True)
    _prepare_workdir(workdir, dataset)
    topo_path = workdir / "topology.topo"
    topo_path.write_text(t.to_text())
    (workdir / "logs").mkdir(exist_ok=True)

    if mode == "process":
        groups = {name: [name] for name in t.names}
    elif mode == "group":
        groups = {"group": list(t.names)}
    else:
        groups = {"monolith": [t.entry]}

    common = ["--topology", str(topo_path), "--workdir", str(workdir), "--dataset", str(dataset)]
    if collector is not None:
        common += ["--collector", format_address(collector)]
    if not tracing:
        common.append("--no-trace")
    if cache_capacity is not None:
        common += ["--cache-capacity", str(cache_capacity)]
    if span_capacity is not None:
        common += ["--span-capacity", str(span_capacity)]
    if call_timeout is not None:
        common += ["--call-timeout", str(call_timeout)]

    procs: dict[str, subprocess.Popen] = {}
    handle = DeploymentHandle(t, mode, workdir, collector, groups, procs)
    try:
        for key, names in groups.items():
            args = common + (["--monolith"] if mode == "monolith" else ["--services", ",".join(names)])
            procs[key] = _spawn("moviebench.node", args, workdir / "logs" / f"{key}.log")
        deadline = time.monotonic() + ready_timeout
        waiting = {name: key for key, names in groups.items() for name in names}
        while waiting:
            for name, key in list(waiting.items()):
                proc = procs[key]
                if proc.poll() is not None:
                    tail = (workdir / "logs" / f"{key}.log").read_text(errors="replace")[-2000:]
                    raise SpawnFailure(name, f"exit code {proc.returncode}\n{tail}")
                if health(handle.address(name), timeout=1.0):
                    handle.ready[name] = True
                    del waiting[name]
            if waiting:
                if time.monotonic() > deadline:
                    raise ReadinessTimeout(sorted(waiting)[0], ready_timeout)
                time.sleep(0.05)
    except BaseException:
        for proc in procs.values():
            _kill(proc, grace=1.0)
        raise
    return handle


def apply_slowdown(h: DeploymentHandle, profile: dict[str, float]) -> None:
    """Live-update slowdown factors; validated as a whole before anything changes."""
    known = set(h.topology.names)
    unknown = sorted(set(profile) - known)
    if unknown:
        raise UnknownService(f"unknown service(s): {', '.join(unknown)}")
    bad = sorted(k for k, v in profile.items() if not v > 0)
    if bad:
        raise ValueError(f"slowdown factors must be > 0: {', '.join(bad)}")
    for key, names in h.groups.items():
        if h.mode == "monolith":
            part = dict(profile)
        else:
            part = {n: f for n, f in profile.items() if n in names}
        if part:
            resp = blocking_call(h.address(names[0]), "SetSlowdown",
                                 {0: json.dumps(part).encode()}, timeout=5.0)
            if resp.kind != Kind.RESPONSE:
                raise DeployError(f"SetSlowdown failed on {key}: {resp.get(0)!r}")


def shutdown(h: DeploymentHandle, deadline: float = 5.0) -> ShutdownSummary:
    """Drain, flush spans and stop every process. Idempotent.

    Processes that do not finish within ``deadline`` are killed and listed
    in ``forced_kills``; their counters are whatever they last reported.
    """
    if h.summary is not None:
        return h.summary
    summary = ShutdownSummary()
    for key, names in h.groups.items():
        proc = h.procs[key]
        try:
            resp = blocking_call(h.address(names[0]), "Shutdown", {0: str(deadline).encode()},
                                 timeout=deadline + 2.0)
            summary.services.update(json.loads(resp.get(0, b"{}")))
        except (RpcError, OSError, ValueError) as exc:
            log.warning("shutdown of %s failed: %s", key, exc)
    for key, proc in h.procs.items():
        try:
            proc.wait(deadline)
        except subprocess.TimeoutExpired:
            summary.forced_kills.extend(h.groups[key])
            _kill(proc, grace=0.5)
    h.summary = summary
    return summary


def kill_all(h: DeploymentHandle) -> None:
    for proc in h.procs.values():
        if proc.poll() is None:
            try:
                os.killpg(proc.pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
            proc.wait()
