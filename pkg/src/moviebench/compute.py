"""Synthetic per-byte compute and service-unique id generation."""
from __future__ import annotations

import hashlib
import os
import threading
import time
from pathlib import Path

_BLOCK = 4096  # >= 2048 so hashlib releases the GIL while mixing

# Sink for the iterated mixing state; keeps the busy loop observable.
_sink = 0


def synthetic_compute(payload: bytes, cost: float, slowdown: float = 1.0) -> int:
    """Burn roughly ``len(payload) * cost / slowdown`` ns of this thread's CPU time.

    Work is iterated blake2b mixing over windows of the payload, bounded by
    the calling thread's CPU clock so that contention stretches wall time the
    way a slower core would. Returns a 64-bit digest of the payload, which
    depends only on the payload.
    """
    global _sink
    if cost < 0:
        raise ValueError("cost must be >= 0")
    if slowdown <= 0:
        raise ValueError("slowdown must be > 0")
    digest = int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "big")
    budget = int(len(payload) * cost / slowdown)
    if budget <= 0:
        return digest
    if len(payload) < _BLOCK:
        payload = (payload * (_BLOCK // len(payload) + 1))[:_BLOCK]
    view = memoryview(payload)
    last = len(payload) - _BLOCK
    clock = time.thread_time_ns
    deadline = clock() + budget
    state = digest.to_bytes(8, "big")
    off = 0
    rounds = 0
    while clock() < deadline:
        state = hashlib.blake2b(view[off:off + _BLOCK], digest_size=8, key=state).digest()
        off = off + _BLOCK if off + _BLOCK <= last else 0
        rounds += 1
    _sink ^= int.from_bytes(state, "big") ^ rounds
    return digest


class UniqueIdGenerator:
    """Strictly increasing 64-bit ids whose top 16 bits carry the instance id.

    The low 48 bits count up. When ``state_path`` is given, a high-water mark
    is reserved in blocks and persisted before use, so a restarted instance
    never reissues an id.
    """

    BLOCK = 1024

    def __init__(self, instance_id: int, state_path: str | Path | None = None):
        if not 0 <= instance_id < 1 << 16:
            raise ValueError("instance id must fit in 16 bits")
        self.instance_id = instance_id
        self._lock = threading.Lock()
        self._path = Path(state_path) if state_path else None
        self._next = 1
        if self._path and self._path.exists():
            self._next = int(self._path.read_text().strip() or 1)
        self._reserved = self._next

    def _reserve(self) -> None:
        self._reserved = self._next + self.BLOCK
        if self._path:
            tmp = self._path.with_suffix(".tmp")
            tmp.write_text(str(self._reserved))
            os.replace(tmp, self._path)

    def next_id(self) -> int:
        with self._lock:
            if self._next >= self._reserved:
                self._reserve()
            seq = self._next
            if seq >= 1 << 48:
                raise OverflowError("id space exhausted")
            self._next += 1
            return (self.instance_id << 48) | seq
