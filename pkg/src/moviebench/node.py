"""Process host for one or more services (or the whole monolith)."""
from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import signal
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .rpc import Client, RpcServer, ServiceError, Tracer, parse_address
from .services import RemoteBackend, ServiceEnv, SharedState, build_envs, monolith_envs
from .topology import ServiceTopology, load_topology
from . import wire

log = logging.getLogger(__name__)


class Node:
    """Hosts services of a topology inside this process.

    ``monolith=True`` serves the entry port only, with every handler composed
    in-process; otherwise each named service gets its own server, tracer and
    outbound client.
    """

    def __init__(self, topology: ServiceTopology, names: list[str], workdir: str | Path,
                 dataset: str | Path, collector: tuple[str, int] | None = None, tracing: bool = True,
                 monolith: bool = False, host: str = "127.0.0.1", span_capacity: int = 65_536,
                 cache_capacity: int | None = None, call_timeout: float = 10.0):
        self.topology = topology
        self.names = list(names)
        self.monolith = monolith
        self.host = host
        self.collector = collector
        self.tracing = tracing
        self.span_capacity = span_capacity
        self.call_timeout = call_timeout
        kwargs = {} if cache_capacity is None else {"cache_capacity": cache_capacity}
        self.state = SharedState(Path(workdir), Path(dataset), **kwargs)
        self.envs: dict[str, ServiceEnv] = {}
        self.servers: dict[str, RpcServer] = {}
        self.tracers: dict[str, Tracer] = {}
        self.clients: list[Client] = []
        self.executors: list[ThreadPoolExecutor] = []
        self.stopped = asyncio.Event()
        self._summary: dict | None = None

    def _control(self) -> dict:
        return {"Shutdown": self._shutdown, "Stats": self._stats,
                "SetSlowdown": self._set_slowdown, "SetTracing": self._set_tracing}

    async def start(self) -> None:
        t = self.topology
        if self.monolith:
            executor = ThreadPoolExecutor(max(4, sum(s.workers for s in t.services)))
            self.executors.append(executor)
            _, self.envs = monolith_envs(t, self.state, executor)
            entry = t.service(t.entry)
            tracer = Tracer(entry.name, self.span_capacity, self.collector, self.tracing)
            self.tracers[entry.name] = tracer
            env = self.envs[entry.name]
            self.servers[entry.name] = RpcServer(entry.name, _adapt(env), entry.workers, entry.queue_capacity,
                                                 tracer, self._control())
            await self.servers[entry.name].start(self.host, entry.port)
            return

        addresses = {s.name: (self.host, s.port) for s in t.services}

        def backend_for(spec):
            tracer = self.tracers[spec.name] = Tracer(spec.name, self.span_capacity, self.collector, self.tracing)
            client = Client(tracer, pool_size=spec.workers, default_timeout=self.call_timeout)
            self.clients.append(client)
            return RemoteBackend(addresses, client, tracer.ids, self.call_timeout)

        def executor_for(spec):
            ex = ThreadPoolExecutor(spec.workers)
            self.executors.append(ex)
            return ex

        self.envs = build_envs(t, self.names, self.state, backend_for, executor_for)
        for name in self.names:
            spec = t.service(name)
            server = RpcServer(name, _adapt(self.envs[name]), spec.workers, spec.queue_capacity,
                               self.tracers[name], self._control())
            self.servers[name] = server
            await server.start(self.host, spec.port)

    async def _stats(self, msg):
        out = {}
        for name, server in self.servers.items():
            tracer = self.tracers.get(name)
            out[name] = {**(tracer.buffer.counters() if tracer else {}), "pending": len(tracer.buffer) if tracer else 0,
                         "shed": server.shed, "served": server.served, "errors": server.errors,
                         "tracing": bool(tracer and tracer.enabled)}
        out["_slowdown"] = {n: e.slowdown for n, e in self.envs.items()}
        return {0: json.dumps(out, sort_keys=True).encode()}

    async def _set_slowdown(self, msg):
        try:
            profile = json.loads(msg.get(0, b"{}"))
        except ValueError:
            raise ServiceError("BadRequest", "profile must be JSON") from None
        unknown = sorted(set(profile) - set(self.envs))
        if unknown:
            raise ServiceError("UnknownService", ",".join(unknown))
        bad = sorted(k for k, v in profile.items() if not (isinstance(v, (int, float)) and v > 0))
        if bad:
            raise ServiceError("BadSlowdown", ",".join(bad))
        for name, factor in profile.items():
            self.envs[name].slowdown = float(factor)
        return {}

    async def _set_tracing(self, msg):
        on = msg.get(0, b"1") == b"1"
        for tracer in self.tracers.values():
            tracer.enabled = on
        return {}

    async def _shutdown(self, msg):
        if self._summary is None:
            deadline = float(msg.get(0, b"5") or 5)
            for server in self.servers.values():
                server.stop_accepting()
            await asyncio.gather(*(s.drain(deadline) for s in self.servers.values()))
            counters = await asyncio.gather(*(tr.close(deadline) for tr in self.tracers.values()))
            summary = {}
            for (name, tracer), c in zip(self.tracers.items(), counters):
                server = self.servers.get(name)
                summary[name] = {**c, "shed": server.shed if server else 0}
            self._summary = summary
            asyncio.get_running_loop().call_later(0.05, self.stopped.set)
        return {0: json.dumps(self._summary, sort_keys=True).encode()}

    async def close(self) -> None:
        for server in self.servers.values():
            await server.close()
        for tracer in self.tracers.values():
            if not tracer._closing:
                await tracer.close(0.5)
        for client in self.clients:
            client.close()
        for ex in self.executors:
            ex.shutdown(wait=False)
        self.state.close()


def _adapt(env: ServiceEnv) -> dict:
    def wrap(handler):
        async def on_request(msg: wire.RpcMessage):
            return await handler(msg.context, msg.as_dict())
        return on_request
    return {method: wrap(h) for method, h in env.handlers.items()}


def main(argv: list[str] | None = None) -> None:
    ap = argparse.ArgumentParser(prog="moviebench-node")
    ap.add_argument("--topology", required=True)
    ap.add_argument("--services", default="", help="comma-separated; empty with --monolith")
    ap.add_argument("--workdir", required=True)
    ap.add_argument("--dataset", required=True)
    ap.add_argument("--collector")
    ap.add_argument("--no-trace", action="store_true")
    ap.add_argument("--monolith", action="store_true")
    ap.add_argument("--span-capacity", type=int, default=65_536)
    ap.add_argument("--cache-capacity", type=int)
    ap.add_argument("--call-timeout", type=float, default=10.0)
    args = ap.parse_args(argv)
    logging.basicConfig(level=os.environ.get("MOVIEBENCH_LOG", "WARNING"))

    topology = load_topology(args.topology)
    names = [n for n in args.services.split(",") if n]

    async def run():
        node = Node(topology, names, args.workdir, args.dataset,
                    parse_address(args.collector) if args.collector else None,
                    tracing=not args.no_trace, monolith=args.monolith, span_capacity=args.span_capacity,
                    cache_capacity=args.cache_capacity, call_timeout=args.call_timeout)
        await node.start()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGTERM, signal.SIGINT):
            loop.add_signal_handler(sig, node.stopped.set)
        await node.stopped.wait()
        await node.close()

    asyncio.run(run())


if __name__ == "__main__":
    main()
