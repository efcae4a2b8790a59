import random
import struct
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from moviebench.wire import (
    DEFAULT_MAX_FRAME, BadKind, BadVersion, DuplicateTag, IdSource, InvalidContext, InvalidMethod, Kind,
    OversizeFrame, ProtocolError, RpcMessage, TraceContext, TrailingBytes, Truncated, child_context,
    decode_frame, encode_frame, frame_length, root_context,
)

GOLDEN = Path(__file__).parent / "golden" / "ping.bin"

# Written out by hand from the frame layout, not produced by the encoder.
PING_HEX = (
    "0000002a"                           # length 42
    "01" "00"                            # version 1, request
    "00000000000000000000000000000001"   # trace_id
    "0000000000000001"                   # span_id
    "0000000000000000"                   # parent
    "0004" "50696e67"                    # "Ping"
    "0000"                               # no fields
)


def ping():
    return RpcMessage(Kind.REQUEST, TraceContext(1, 1, 0), "Ping")


def test_golden_ping_bytes():
    frame = encode_frame(ping())
    assert frame == bytes.fromhex(PING_HEX)
    assert frame == GOLDEN.read_bytes()
    assert len(frame) == 46
    assert frame.endswith(bytes.fromhex("0004 50 69 6E 67 00 00".replace(" ", "")))


def test_golden_ping_decodes():
    assert decode_frame(GOLDEN.read_bytes()) == ping()


def test_field_order_preserved_and_empty_value():
    m = RpcMessage(Kind.RESPONSE, TraceContext(7, 8, 9), "", ((5, b""), (1, b"x"), (200, b"yz")))
    out = decode_frame(encode_frame(m))
    assert out.fields == ((5, b""), (1, b"x"), (200, b"yz"))
    assert out.get(200) == b"yz" and out.get(3) is None


def test_max_trace_id():
    m = RpcMessage(Kind.ERROR, TraceContext(2**128 - 1, 2**64 - 1, 2**64 - 1), "X")
    assert decode_frame(encode_frame(m)) == m


@pytest.mark.parametrize("msg, exc", [
    (RpcMessage(Kind.REQUEST, TraceContext(1, 1), ""), InvalidMethod),
    (RpcMessage(Kind.REQUEST, TraceContext(1, 1), "m" * 1025), InvalidMethod),
    (RpcMessage(Kind.REQUEST, TraceContext(0, 1), "m"), InvalidContext),
    (RpcMessage(Kind.REQUEST, TraceContext(1, 0), "m"), InvalidContext),
    (RpcMessage(Kind.REQUEST, TraceContext(1, 1), "m", ((1, b"a"), (1, b"b"))), DuplicateTag),
    (RpcMessage(Kind.REQUEST, TraceContext(1, 1), "m", version=2), BadVersion),
    (RpcMessage(9, TraceContext(1, 1), "m"), BadKind),
])
def test_encode_rejects(msg, exc):
    with pytest.raises(exc):
        encode_frame(msg)


def test_encode_oversize():
    m = RpcMessage(Kind.REQUEST, TraceContext(1, 1), "m", ((1, b"x" * 100),))
    with pytest.raises(OversizeFrame):
        encode_frame(m, max_frame=64)


def test_decode_errors():
    frame = GOLDEN.read_bytes()
    with pytest.raises(Truncated):
        decode_frame(frame[:-1])
    with pytest.raises(TrailingBytes):
        decode_frame(frame + b"\x00")
    with pytest.raises(OversizeFrame):
        decode_frame(struct.pack(">I", DEFAULT_MAX_FRAME + 1) + b"\x00" * 8)
    with pytest.raises(BadVersion):
        decode_frame(frame[:4] + b"\x02" + frame[5:])
    with pytest.raises(BadKind):
        decode_frame(frame[:5] + b"\x03" + frame[6:])
    with pytest.raises(OversizeFrame):
        frame_length(struct.pack(">I", 100), max_frame=50)
    assert frame_length(frame[:4]) == 42


def test_id_source_unique_and_nonzero():
    ids = IdSource(seed=0)
    seen = {ids.next_id() for _ in range(100_000)}
    assert len(seen) == 100_000 and 0 not in seen
    root = root_context(ids)
    child = child_context(root, ids)
    assert root.is_root and child.parent_span_id == root.span_id and child.trace_id == root.trace_id


def _random_message(rng: random.Random) -> RpcMessage:
    kind = rng.choice(list(Kind))
    method = "".join(rng.choice("abcXYZ_.é字") for _ in range(rng.randint(1 if kind == Kind.REQUEST else 0, 20)))
    tags = rng.sample(range(256), rng.randint(0, 12))
    fields = tuple((t, rng.randbytes(rng.choice([0, 1, 7, 64, 1000]))) for t in tags)
    ctx = TraceContext(rng.randint(1, 2**128 - 1), rng.randint(1, 2**64 - 1), rng.choice([0, rng.randint(1, 2**64 - 1)]))
    return RpcMessage(kind, ctx, method, fields)


def test_roundtrip_10k():
    rng = random.Random(11)
    for _ in range(10_000):
        m = _random_message(rng)
        frame = encode_frame(m)
        assert decode_frame(frame) == m
        assert encode_frame(decode_frame(frame)) == frame


def test_fuzz_100k_no_crash():
    """Mutated and random frames either decode or raise ProtocolError."""
    rng = random.Random(5)
    seeds = [encode_frame(_random_message(rng)) for _ in range(200)]
    decoded = 0
    for i in range(100_000):
        op = i % 4
        if op == 0:
            data = rng.randbytes(rng.randint(0, 80))
        else:
            data = bytearray(rng.choice(seeds))
            if op == 1:
                for _ in range(rng.randint(1, 4)):
                    data[rng.randrange(len(data))] = rng.randrange(256)
            elif op == 2:
                data = data[:rng.randrange(len(data) + 1)]
            else:
                pos = rng.randrange(len(data))
                data[pos:pos] = rng.randbytes(rng.randint(1, 5))
            data = bytes(data)
        try:
            decode_frame(data)
            decoded += 1
        except ProtocolError:
            pass
    assert decoded > 0


@settings(max_examples=300, deadline=None)
@given(
    kind=st.sampled_from(list(Kind)),
    method=st.text(min_size=1, max_size=40).filter(lambda s: len(s.encode()) <= 1024),
    trace=st.integers(1, 2**128 - 1),
    span=st.integers(1, 2**64 - 1),
    parent=st.integers(0, 2**64 - 1),
    fields=st.dictionaries(st.integers(0, 255), st.binary(max_size=300), max_size=20),
)
def test_roundtrip_property(kind, method, trace, span, parent, fields):
    m = RpcMessage(kind, TraceContext(trace, span, parent), method, tuple(fields.items()))
    frame = encode_frame(m)
    assert struct.unpack(">I", frame[:4])[0] == len(frame) - 4
    assert decode_frame(frame) == m


@settings(max_examples=500, deadline=None)
@given(st.binary(max_size=200))
def test_arbitrary_bytes_never_crash(data):
    try:
        decode_frame(data)
    except ProtocolError:
        pass
