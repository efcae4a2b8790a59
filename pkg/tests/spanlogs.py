"""Small synthetic span logs shared by the CLI and API tests."""
from moviebench.tracing import Span, SpanKind, write_span_log

MS = 1_000_000


def trace(tid, fe_ms, be_ms):
    """frontend -> backend, with ``be_ms`` of the ``fe_ms`` total spent in the backend."""
    t = tid * 1000 * MS
    return [
        Span(tid, 1, 0, "frontend", "ComposePage", SpanKind.SERVER, t, t + fe_ms * MS, MS // 10, fe_ms * MS - MS),
        Span(tid, 2, 1, "frontend", "Read", SpanKind.CLIENT, t + MS, t + (1 + be_ms) * MS),
        Span(tid, 2, 1, "store", "Read", SpanKind.SERVER, t + MS + MS // 10, t + (1 + be_ms) * MS - MS // 10,
             MS // 20, be_ms * MS // 2),
    ]


def write_log(path, be_ms, n=20, fe_ms=10):
    spans = [s for tid in range(1, n + 1) for s in trace(tid, fe_ms, be_ms)]
    write_span_log(path, spans)
    return path
