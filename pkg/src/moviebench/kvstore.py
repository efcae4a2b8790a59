"""Byte-budgeted LRU cache and an append-only log-structured store."""
from __future__ import annotations

import logging
import os
import struct
import threading
import zlib
from collections import OrderedDict
from pathlib import Path

log = logging.getLogger(__name__)


class OversizeValue(ValueError):
    pass


class LRUCache:
    """LRU over a byte budget; a value's size is len(key) + len(value).

    Entries carry a version so that a late fill cannot overwrite a newer
    write-through value (``put`` with an older version is ignored).
    """

    def __init__(self, capacity: int, sizer=None):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._sizer = sizer or (lambda k, v: len(k) + len(v))
        self._data: OrderedDict[str, tuple[bytes, int]] = OrderedDict()
        self._used = 0
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        self.evictions = 0

    def __len__(self) -> int:
        return len(self._data)

    @property
    def used(self) -> int:
        return self._used

    def get(self, key: str) -> bytes | None:
        entry = self.get_versioned(key)
        return None if entry is None else entry[0]

    def get_versioned(self, key: str) -> tuple[bytes, int] | None:
        with self._lock:
            entry = self._data.get(key)
            if entry is None:
                self.misses += 1
                return None
            self._data.move_to_end(key)
            self.hits += 1
            return entry

    def put(self, key: str, value: bytes, version: int = 0) -> bool:
        size = self._sizer(key, value)
        if size > self.capacity:
            raise OversizeValue(f"{size} bytes exceeds cache capacity {self.capacity}")
        with self._lock:
            old = self._data.get(key)
            if old is not None:
                if version < old[1]:
                    return False
                self._used -= self._sizer(key, old[0])
                del self._data[key]
            self._data[key] = (value, version)
            self._used += size
            while self._used > self.capacity:
                k, (v, _) = self._data.popitem(last=False)
                self._used -= self._sizer(k, v)
                self.evictions += 1
            return True

    def delete(self, key: str) -> None:
        with self._lock:
            old = self._data.pop(key, None)
            if old is not None:
                self._used -= self._sizer(key, old[0])


# crc32(4) key_len(2) value_len(4); crc covers lengths, key and value
_REC = struct.Struct(">IHI")


class Corruption(Exception):
    def __init__(self, offset: int):
        super().__init__(f"torn or corrupt record at offset {offset}")
        self.offset = offset


class LogStore:
    """Append-only key/value log with an in-memory index.

    Every put is written through to the OS before it is acknowledged, so
    acknowledged values survive a process restart. On open, a torn or
    corrupt tail is truncated away and the offset is kept in
    ``recovered_corruption``. Versions are the log offsets of the records.
    """

    def __init__(self, path: str | Path, fsync: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        self._index: dict[str, tuple[int, int]] = {}  # key -> (value offset, value length)
        self._lock = threading.Lock()
        self.recovered_corruption: Corruption | None = None
        self._fd = os.open(self.path, os.O_RDWR | os.O_CREAT, 0o644)
        self._end = self._recover()

    def _recover(self) -> int:
        size = os.fstat(self._fd).st_size
        off = 0
        with open(self.path, "rb") as fh:
            data = fh.read()
        while off < size:
            if off + _REC.size > size:
                break
            crc, klen, vlen = _REC.unpack_from(data, off)
            end = off + _REC.size + klen + vlen
            if end > size:
                break
            body = data[off + 4:end]
            if zlib.crc32(body) != crc:
                break
            try:
                key = data[off + _REC.size:off + _REC.size + klen].decode("utf-8")
            except UnicodeDecodeError:
                break
            self._index[key] = (off + _REC.size + klen, vlen)
            off = end
        if off < size:
            self.recovered_corruption = Corruption(off)
            log.warning("%s: %s; truncating %d bytes", self.path, self.recovered_corruption, size - off)
            os.ftruncate(self._fd, off)
        return off

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, key: str) -> bool:
        return key in self._index

    def keys(self):
        return list(self._index)

    def put(self, key: str, value: bytes) -> int:
        kb = key.encode("utf-8")
        head = _REC.pack(0, len(kb), len(value))[4:]
        crc = zlib.crc32(value, zlib.crc32(kb, zlib.crc32(head)))
        rec = struct.pack(">I", crc) + head + kb + value
        with self._lock:
            off = self._end
            os.pwrite(self._fd, rec, off)
            if self.fsync:
                os.fsync(self._fd)
            self._end = off + len(rec)
            self._index[key] = (off + _REC.size + len(kb), len(value))
            return off

    def get_versioned(self, key: str) -> tuple[bytes, int] | None:
        loc = self._index.get(key)
        if loc is None:
            return None
        voff, vlen = loc
        klen = len(key.encode("utf-8"))
        return os.pread(self._fd, vlen, voff), voff - _REC.size - klen

    def get(self, key: str) -> bytes | None:
        entry = self.get_versioned(key)
        return None if entry is None else entry[0]

    def close(self) -> None:
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def compact(path: str | Path) -> int:
    """Rewrite a store log keeping only the latest value of each key.

    Must run offline (no live store on the file). Returns bytes reclaimed.
    """
    path = Path(path)
    before = path.stat().st_size
    tmp = path.with_suffix(path.suffix + ".compact")
    if tmp.exists():
        tmp.unlink()
    with LogStore(path) as src, LogStore(tmp) as dst:
        for key in sorted(src.keys()):
            dst.put(key, src.get(key))
    os.replace(tmp, path)
    return before - path.stat().st_size
