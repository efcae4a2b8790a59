"""Length-prefixed binary framing for service-to-service RPC.

Frame layout (all integers big-endian)::

    length(4) | version(1) kind(1) trace_id(16) span_id(8) parent_span_id(8)
              | method_len(2) method | field_count(2)
              | { tag(1) value_len(4) value }*

The length prefix counts the payload only.
"""
from __future__ import annotations

import enum
import os
import struct
import threading
from dataclasses import dataclass, field
from typing import Iterable, Mapping

VERSION = 0x01
DEFAULT_MAX_FRAME = 16 * 1024 * 1024
MAX_METHOD_LEN = 1024

_LEN = struct.Struct(">I")
_HEAD = struct.Struct(">BB16sQQ")  # version, kind, trace_id bytes, span_id, parent
_U16 = struct.Struct(">H")
_FIELD = struct.Struct(">BI")

MASK64 = (1 << 64) - 1
MASK128 = (1 << 128) - 1


class ProtocolError(ValueError):
    """Base class for everything the codec rejects."""


class OversizeFrame(ProtocolError):
    pass


class InvalidMethod(ProtocolError):
    pass


class Truncated(ProtocolError):
    pass


class BadVersion(ProtocolError):
    pass


class BadKind(ProtocolError):
    pass


class DuplicateTag(ProtocolError):
    pass


class TrailingBytes(ProtocolError):
    pass


class InvalidContext(ProtocolError):
    pass


class Kind(enum.IntEnum):
    REQUEST = 0
    RESPONSE = 1
    ERROR = 2


@dataclass(frozen=True)
class TraceContext:
    trace_id: int
    span_id: int
    parent_span_id: int = 0

    @property
    def is_root(self) -> bool:
        return self.parent_span_id == 0


@dataclass(frozen=True)
class RpcMessage:
    kind: Kind
    context: TraceContext
    method: str = ""
    fields: tuple[tuple[int, bytes], ...] = ()
    version: int = field(default=VERSION)

    def get(self, tag: int, default: bytes | None = None) -> bytes | None:
        for t, v in self.fields:
            if t == tag:
                return v
        return default

    def as_dict(self) -> dict[int, bytes]:
        return dict(self.fields)


def make_fields(values: Mapping[int, bytes] | Iterable[tuple[int, bytes]]) -> tuple[tuple[int, bytes], ...]:
    items = values.items() if isinstance(values, Mapping) else values
    return tuple((int(t), bytes(v)) for t, v in items)


class IdSource:
    """Thread-safe generator of nonzero 64-bit span ids.

    Ids come from a random 64-bit start advanced by an odd multiplier (a
    bijection on 2**64), so one source never repeats within 2**64 draws.
    """

    _STEP = 0x9E3779B97F4A7C15

    def __init__(self, seed: int | None = None):
        if seed is None:
            seed = int.from_bytes(os.urandom(8), "big")
        self._state = seed & MASK64
        self._lock = threading.Lock()

    def next_id(self) -> int:
        with self._lock:
            while True:
                self._state = (self._state + self._STEP) & MASK64
                # splitmix64 finalizer: a bijection, so distinct states give distinct ids
                z = self._state
                z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
                z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
                z ^= z >> 31
                if z:
                    return z

    def trace_id(self) -> int:
        return (self.next_id() << 64) | self.next_id()


_default_ids = IdSource()


def root_context(ids: IdSource | None = None) -> TraceContext:
    ids = ids or _default_ids
    return TraceContext(ids.trace_id(), ids.next_id(), 0)


def child_context(parent: TraceContext, ids: IdSource | None = None) -> TraceContext:
    ids = ids or _default_ids
    span_id = ids.next_id()
    while span_id == parent.span_id:
        span_id = ids.next_id()
    return TraceContext(parent.trace_id, span_id, parent.span_id)


def _check(msg: RpcMessage, max_frame: int) -> bytes:
    if msg.version != VERSION:
        raise BadVersion(f"version {msg.version}")
    if not isinstance(msg.kind, Kind):
        try:
            Kind(msg.kind)
        except ValueError:
            raise BadKind(f"kind {msg.kind}") from None
    ctx = msg.context
    if not (0 < ctx.trace_id <= MASK128) or not (0 < ctx.span_id <= MASK64):
        raise InvalidContext("trace_id and span_id must be nonzero")
    if not (0 <= ctx.parent_span_id <= MASK64):
        raise InvalidContext("parent_span_id out of range")
    method = msg.method.encode("utf-8")
    if msg.kind == Kind.REQUEST and not method:
        raise InvalidMethod("request without method")
    if len(method) > MAX_METHOD_LEN:
        raise InvalidMethod(f"method is {len(method)} bytes")
    return method


def encode_payload(msg: RpcMessage, max_frame: int = DEFAULT_MAX_FRAME) -> bytes:
    method = _check(msg, max_frame)
    ctx = msg.context
    parts = [
        _HEAD.pack(VERSION, int(msg.kind), ctx.trace_id.to_bytes(16, "big"), ctx.span_id, ctx.parent_span_id),
        _U16.pack(len(method)),
        method,
        _U16.pack(len(msg.fields)),
    ]
    size = _HEAD.size + 4 + len(method)
    seen = set()
    for tag, value in msg.fields:
        if not 0 <= tag <= 255:
            raise ProtocolError(f"tag {tag} out of range")
        if tag in seen:
            raise DuplicateTag(f"tag {tag}")
        seen.add(tag)
        size += _FIELD.size + len(value)
        if size > max_frame:
            raise OversizeFrame(f"payload exceeds {max_frame} bytes")
        parts.append(_FIELD.pack(tag, len(value)))
        parts.append(value)
    if len(msg.fields) > 0xFFFF:
        raise ProtocolError("too many fields")
    if size > max_frame:
        raise OversizeFrame(f"payload exceeds {max_frame} bytes")
    return b"".join(parts)


def encode_frame(msg: RpcMessage, max_frame: int = DEFAULT_MAX_FRAME) -> bytes:
    payload = encode_payload(msg, max_frame)
    return _LEN.pack(len(payload)) + payload


def decode_payload(payload: bytes | memoryview) -> RpcMessage:
    buf = memoryview(payload)
    n = len(buf)
    if n < _HEAD.size + 2:
        raise Truncated("payload shorter than header")
    version, kind, trace_b, span_id, parent = _HEAD.unpack_from(buf, 0)
    if version != VERSION:
        raise BadVersion(f"version {version}")
    try:
        kind = Kind(kind)
    except ValueError:
        raise BadKind(f"kind {kind}") from None
    trace_id = int.from_bytes(trace_b, "big")
    if trace_id == 0 or span_id == 0:
        raise InvalidContext("zero trace_id or span_id")
    off = _HEAD.size
    (mlen,) = _U16.unpack_from(buf, off)
    off += 2
    if mlen > MAX_METHOD_LEN:
        raise InvalidMethod(f"method is {mlen} bytes")
    if off + mlen + 2 > n:
        raise Truncated("method runs past payload")
    try:
        method = bytes(buf[off:off + mlen]).decode("utf-8")
    except UnicodeDecodeError:
        raise InvalidMethod("method is not UTF-8") from None
    if kind == Kind.REQUEST and not method:
        raise InvalidMethod("request without method")
    off += mlen
    (count,) = _U16.unpack_from(buf, off)
    off += 2
    fields = []
    seen = set()
    for _ in range(count):
        if off + _FIELD.size > n:
            raise Truncated("field header runs past payload")
        tag, vlen = _FIELD.unpack_from(buf, off)
        off += _FIELD.size
        if off + vlen > n:
            raise Truncated("field value runs past payload")
        if tag in seen:
            raise DuplicateTag(f"tag {tag}")
        seen.add(tag)
        fields.append((tag, bytes(buf[off:off + vlen])))
        off += vlen
    if off != n:
        raise TrailingBytes(f"{n - off} unread bytes")
    return RpcMessage(kind, TraceContext(trace_id, span_id, parent), method, tuple(fields))


def decode_frame(data: bytes | memoryview, max_frame: int = DEFAULT_MAX_FRAME) -> RpcMessage:
    """Decode exactly one frame; bytes after the declared length are rejected."""
    buf = memoryview(data)
    if len(buf) < 4:
        raise Truncated("missing length prefix")
    (length,) = _LEN.unpack_from(buf, 0)
    if length > max_frame:
        raise OversizeFrame(f"declared length {length} exceeds {max_frame}")
    if 4 + length > len(buf):
        raise Truncated(f"length prefix {length} but {len(buf) - 4} bytes available")
    if 4 + length < len(buf):
        raise TrailingBytes(f"{len(buf) - 4 - length} bytes after frame")
    return decode_payload(buf[4:4 + length])


def frame_length(header: bytes, max_frame: int = DEFAULT_MAX_FRAME) -> int:
    (length,) = _LEN.unpack(header)
    if length > max_frame:
        raise OversizeFrame(f"declared length {length} exceeds {max_frame}")
    return length
