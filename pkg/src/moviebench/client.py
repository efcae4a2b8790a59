"""Client-side request helpers for the three query types."""
from __future__ import annotations

from dataclasses import dataclass

from . import wire
from .dataset import MIB, StreamManifest
from .rpc import Address, Client, RemoteError
from .services import SECTIONS, u64
from .wire import Kind, RpcMessage


@dataclass
class Response:
    """A completed end-to-end request: body bytes, or an error code."""

    kind: str
    body: bytes = b""
    error: str | None = None
    rpcs: int = 1

    @property
    def ok(self) -> bool:
        return self.error is None


def _body(msg: RpcMessage) -> bytes:
    return wire.encode_payload(RpcMessage(msg.kind, wire.TraceContext(1, 1, 0), "", msg.fields))


def page_sections(msg_fields: dict[int, bytes]) -> dict[str, bytes]:
    return {name: msg_fields.get(i, b"") for i, name in enumerate(SECTIONS)}


def displayed_rating(page: dict[str, bytes]) -> float | None:
    section = page["rating"]
    if section[:1] != b"\x01":
        return None
    total, count = (int(x) for x in section[9:].decode().split(","))
    return total / count if count else None


class MovieClient:
    """Issues browse/review/rent requests against an entry service.

    Every RPC the client sends is a trace root.
    """

    def __init__(self, entry: Address, client: Client | None = None, timeout: float = 10.0,
                 ids: wire.IdSource | None = None):
        self.entry = entry
        self.client = client or Client(pool_size=4)
        self.timeout = timeout
        self.ids = ids or wire.IdSource()

    async def rpc(self, method: str, fields, timeout: float | None = None) -> RpcMessage:
        req = RpcMessage(Kind.REQUEST, wire.root_context(self.ids), method, wire.make_fields(fields))
        return await self.client.call(self.entry, req, self.timeout if timeout is None else timeout)

    async def browse(self, movie_id: int) -> Response:
        msg = await self.rpc("ComposePage", {0: u64(movie_id)})
        if msg.kind == Kind.ERROR:
            return Response("browse", _body(msg), msg.get(0, b"").decode())
        return Response("browse", _body(msg))

    async def page(self, movie_id: int) -> dict[str, bytes]:
        msg = await self.rpc("ComposePage", {0: u64(movie_id)})
        if msg.kind == Kind.ERROR:
            raise RemoteError(msg.get(0, b"").decode(), msg.get(1, b"").decode())
        return page_sections(msg.as_dict())

    async def review(self, user_id: int, movie_id: int, text: bytes, stars: int) -> Response:
        msg = await self.rpc("ComposeReview", {0: u64(user_id), 1: u64(movie_id), 2: text, 3: u64(stars)})
        if msg.kind == Kind.ERROR:
            return Response("review", _body(msg), msg.get(0, b"").decode())
        return Response("review", _body(msg))

    async def rent(self, user_id: int, movie_id: int, price: int = 1, chunk_size: int = MIB,
                   timeout: float | None = None) -> Response:
        """Authorize, then pull every chunk in order. The body is the manifest
        followed by the byte count delivered."""
        msg = await self.rpc("UserAuth", {0: u64(user_id), 1: u64(movie_id), 2: u64(price), 3: u64(chunk_size)},
                             timeout)
        if msg.kind == Kind.ERROR:
            return Response("rent", _body(msg), msg.get(0, b"").decode())
        manifest = StreamManifest.from_json(msg.get(0))
        delivered = 0
        rpcs = 1
        for index in range(manifest.chunk_count):
            chunk = await self.rpc("RentChunk", {0: manifest.video_ref.encode(), 1: u64(index),
                                                 2: u64(manifest.chunk_size)}, timeout)
            rpcs += 1
            if chunk.kind == Kind.ERROR:
                return Response("rent", _body(chunk), chunk.get(0, b"").decode(), rpcs)
            delivered += len(chunk.get(0, b""))
        body = msg.get(0) + b"|" + str(delivered).encode()
        return Response("rent", body, None if delivered == manifest.total_bytes else "ShortStream", rpcs)

    def close(self) -> None:
        self.client.close()
