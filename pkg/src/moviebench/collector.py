"""Central span collector: deduplicates span batches and appends them to a span log."""
from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import signal
from collections import Counter, defaultdict
from pathlib import Path

from .rpc import RpcServer, ServiceError
from .tracing import decode_batch

log = logging.getLogger(__name__)


class Collector:
    def __init__(self, log_path: str | Path):
        self.log_path = Path(log_path)
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.log_path, "a", encoding="utf-8")
        self._seen: set[tuple[int, int, str]] = set()
        self.index: dict[int, list[int]] = defaultdict(list)  # trace_id -> line offsets
        self.per_service: Counter[str] = Counter()
        self.duplicates = 0
        self.batches = 0
        self.server: RpcServer | None = None

    def ingest(self, data: bytes) -> int:
        try:
            spans = decode_batch(data)
        except (ValueError, KeyError) as exc:
            raise ServiceError("MalformedBatch", str(exc)) from None
        fresh = 0
        for s in spans:
            if s.key in self._seen:
                self.duplicates += 1
                continue
            self._seen.add(s.key)
            self.index[s.trace_id].append(self._fh.tell())
            self._fh.write(s.to_line() + "\n")
            self.per_service[s.service] += 1
            fresh += 1
        self._fh.flush()
        self.batches += 1
        return fresh

    async def _span_batch(self, msg):
        fresh = self.ingest(msg.get(0, b""))
        return {0: str(fresh).encode()}

    async def _stats(self, msg):
        return {0: json.dumps(self.stats(), sort_keys=True).encode()}

    def stats(self) -> dict:
        return {"spans": sum(self.per_service.values()), "per_service": dict(self.per_service),
                "duplicates": self.duplicates, "batches": self.batches, "traces": len(self.index)}

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        self.server = RpcServer("collector", {}, control={"SpanBatch": self._span_batch, "Stats": self._stats})
        return await self.server.start(host, port)

    async def close(self) -> None:
        if self.server is not None:
            await self.server.close()
        self._fh.close()


def main(argv: list[str] | None = None) -> None:
    ap = argparse.ArgumentParser(prog="moviebench-collector")
    ap.add_argument("--log", required=True)
    ap.add_argument("--host", default="127.0.0.1")
    ap.add_argument("--port", type=int, default=0)
    ap.add_argument("--ready-file")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING)

    async def run():
        col = Collector(args.log)
        addr = await col.start(args.host, args.port)
        if args.ready_file:
            tmp = args.ready_file + ".tmp"
            Path(tmp).write_text(f"{addr[0]}:{addr[1]}\n")
            os.replace(tmp, args.ready_file)
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGTERM, signal.SIGINT):
            loop.add_signal_handler(sig, stop.set)
        await stop.wait()
        await col.close()

    asyncio.run(run())


if __name__ == "__main__":
    main()
