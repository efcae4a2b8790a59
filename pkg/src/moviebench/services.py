"""Handlers for every movie service, written once and hosted two ways.

Each handler talks to its callees through a backend. ``RemoteBackend`` turns
a call into a traced RPC (the microservice deployment); ``LocalBackend``
invokes the callee's handler directly in-process (the monolith). Response
bodies therefore do not depend on the deployment.
"""
from __future__ import annotations

import asyncio
import json
import logging
import re
from collections import defaultdict
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Awaitable, Callable, Mapping

from . import wire
from .compute import UniqueIdGenerator, synthetic_compute
from .dataset import (MIB, RECENT_REVIEWS, StreamManifest, dumps, parse_rating, rating_value)
from .kvstore import LogStore, LRUCache, OversizeValue
from .rpc import Address, Client, RemoteError, Reply, RpcError, ServiceError
from .topology import Mode, Role, ServiceSpec, ServiceTopology
from .tracing import SpanStatus
from .wire import Kind, RpcMessage, TraceContext

log = logging.getLogger(__name__)

# page section order; the tag of a section in a ComposedPage is its index here
SECTIONS = ("plot", "thumbnail", "rating", "cast_info", "reviews", "photos", "videos", "recommendations")
SECTION_SERVICES = {
    "plot": ("Plot", "plot"),
    "thumbnail": ("Thumbnail", "thumb"),
    "rating": ("Rating", "rating"),
    "cast-info": ("CastInfo", "cast"),
    "reviews": ("Reviews", "reviews"),
    "photos": ("Photos", "photos"),
    "videos": ("Videos", "videos"),
    "recommend": ("Recommend", "recommend"),
}
SECTION_OF_SERVICE = dict(zip(SECTION_SERVICES, SECTIONS))
FRONTEND_ROUTES = {
    "ComposePage": "compose-page",
    "ComposeReview": "compose-review",
    "UserAuth": "user-auth",
    "RentChunk": "blob",
}
DEFAULT_CHUNK = MIB
DEFAULT_CACHE_CAPACITY = 8 * MIB
INLINE_COMPUTE_NS = 200_000  # shorter budgets run on the event loop

Fields = dict[int, bytes]
Handler = Callable[[TraceContext, Fields], Awaitable["Reply | Fields"]]


def u64(x: int) -> bytes:
    return int(x).to_bytes(8, "big")


def from_u64(b: bytes | None, what: str = "field") -> int:
    if b is None or len(b) != 8:
        raise ServiceError("BadRequest", f"{what} must be 8 bytes")
    return int.from_bytes(b, "big")


class Backend:
    async def call(self, ctx: TraceContext, callee: str, method: str, fields: Mapping[int, bytes]) -> Fields:
        raise NotImplementedError


class RemoteBackend(Backend):
    """Calls go out as RPCs with a fresh child context and a client span."""

    def __init__(self, addresses: Mapping[str, Address], client: Client, ids: wire.IdSource,
                 timeout: float = 10.0):
        self.addresses = dict(addresses)
        self.client = client
        self.ids = ids
        self.timeout = timeout

    async def call(self, ctx, callee, method, fields):
        try:
            addr = self.addresses[callee]
        except KeyError:
            raise RemoteError("UnknownService", callee) from None
        req = RpcMessage(Kind.REQUEST, wire.child_context(ctx, self.ids), method, wire.make_fields(fields))
        resp = await self.client.call(addr, req, self.timeout)
        if resp.kind == Kind.ERROR:
            raise RemoteError((resp.get(0) or b"Error").decode(errors="replace"),
                              (resp.get(1) or b"").decode(errors="replace"))
        return resp.as_dict()


class LocalBackend(Backend):
    """Direct function composition: the callee's handler runs in the caller's task."""

    def __init__(self):
        self.envs: dict[str, "ServiceEnv"] = {}

    async def call(self, ctx, callee, method, fields):
        env = self.envs.get(callee)
        if env is None:
            raise RemoteError("UnknownService", callee)
        handler = env.handlers.get(method)
        if handler is None:
            raise RemoteError("UnknownMethod", method)
        try:
            out = await handler(ctx, dict(fields))
        except ServiceError as exc:
            raise RemoteError(exc.code, exc.message) from None
        if isinstance(out, Reply):
            out = out.fields
        return dict(wire.make_fields(out))


@dataclass
class SharedState:
    """Process-wide resources a service may own."""

    workdir: Path
    dataset: Path
    cache_capacity: int = DEFAULT_CACHE_CAPACITY
    stores: dict[str, LogStore] = field(default_factory=dict)
    caches: dict[str, LRUCache] = field(default_factory=dict)
    id_gens: dict[str, UniqueIdGenerator] = field(default_factory=dict)

    def close(self) -> None:
        for s in self.stores.values():
            s.close()


class KeyLocks:
    def __init__(self):
        self._locks: dict[object, asyncio.Lock] = defaultdict(asyncio.Lock)

    def __call__(self, key) -> asyncio.Lock:
        return self._locks[key]


class ServiceEnv:
    """One service's configuration, state and handler table."""

    def __init__(self, spec: ServiceSpec, topology: ServiceTopology, state: SharedState,
                 backend: Backend, executor: Executor | None = None):
        self.spec = spec
        self.name = spec.name
        self.topology = topology
        self.state = state
        self.backend = backend
        self.slowdown = spec.slowdown
        self.cost = spec.compute_cost
        self.executor = executor
        self.locks = KeyLocks()
        self.handlers: dict[str, Handler] = {"Health": self._health}
        self.handlers.update(_build_handlers(self))

    async def _health(self, ctx, fields):
        return {0: b"OK"}

    async def compute(self, payload: bytes) -> int:
        budget = len(payload) * self.cost / self.slowdown
        if budget < INLINE_COMPUTE_NS or self.executor is None:
            return synthetic_compute(payload, self.cost, self.slowdown)
        loop = asyncio.get_running_loop()
        return await loop.run_in_executor(self.executor, synthetic_compute, payload, self.cost, self.slowdown)

    async def call(self, ctx, callee, method, fields) -> Fields:
        return await self.backend.call(ctx, callee, method, fields)


def _build_handlers(env: ServiceEnv) -> dict[str, Handler]:
    name, role = env.name, env.spec.role
    if name in SECTION_SERVICES:
        return _section_handlers(env)
    builders = {
        "frontend": _frontend_handlers,
        "compose-page": _compose_page_handlers,
        "compose-review": _compose_review_handlers,
        "unique-id": _unique_id_handlers,
        "movie-review": _movie_review_handlers,
        "user-review": _user_review_handlers,
        "update-movie": _update_movie_handlers,
        "user-auth": _user_auth_handlers,
        "review-storage": _review_storage_handlers,
    }
    if name in builders:
        return builders[name](env)
    if role is Role.CACHE:
        return _cache_handlers(env)
    if role is Role.STORE:
        return _store_handlers(env)
    if role is Role.BLOB:
        return _blob_handlers(env)
    if role is Role.FRONTEND:
        return _frontend_handlers(env)
    raise ValueError(f"no implementation for service {name!r} with role {role.value}")


# -- helpers shared by handlers ------------------------------------------------

async def cache_get(env: ServiceEnv, ctx, key: str) -> tuple[bytes, int] | None:
    try:
        r = await env.call(ctx, "cache", "CacheGet", {0: key.encode()})
    except RpcError:
        return None  # an unavailable cache behaves as a miss
    if 0 not in r:
        return None
    return r[0], from_u64(r.get(1), "version")


async def cache_put(env: ServiceEnv, ctx, key: str, value: bytes, version: int) -> None:
    try:
        await env.call(ctx, "cache", "CachePut", {0: key.encode(), 1: value, 2: u64(version)})
    except RpcError as exc:
        log.debug("%s: cache put %s skipped: %s", env.name, key, exc)


async def store_get(env: ServiceEnv, ctx, key: str, store: str = "store") -> tuple[bytes, int] | None:
    try:
        r = await env.call(ctx, store, "StoreGet", {0: key.encode()})
    except RpcError as exc:
        raise ServiceError("StoreUnavailable", f"{store}: {exc}") from None
    if 0 not in r:
        return None
    return r[0], from_u64(r.get(1), "version")


async def store_put(env: ServiceEnv, ctx, key: str, value: bytes, store: str = "store") -> int:
    try:
        r = await env.call(ctx, store, "StorePut", {0: key.encode(), 1: value})
    except RpcError as exc:
        raise ServiceError("StoreUnavailable", f"{store}: {exc}") from None
    return from_u64(r.get(0), "version")


async def call_or_raise(env: ServiceEnv, ctx, callee: str, method: str, fields) -> Fields:
    """Call and re-raise a remote error under the callee's error code."""
    try:
        return await env.call(ctx, callee, method, fields)
    except RemoteError as exc:
        raise ServiceError(exc.code, exc.message) from None
    except RpcError as exc:
        raise ServiceError(exc.code, f"{callee}: {exc}") from None


# -- tiers ---------------------------------------------------------------------

def _cache_handlers(env: ServiceEnv) -> dict[str, Handler]:
    cache = env.state.caches.get(env.name)
    if cache is None:
        cache = env.state.caches[env.name] = LRUCache(env.spec.capacity or env.state.cache_capacity)

    async def get(ctx, f):
        entry = cache.get_versioned(f.get(0, b"").decode())
        if entry is None:
            return {}
        await env.compute(entry[0])
        return {0: entry[0], 1: u64(entry[1])}

    async def put(ctx, f):
        key = f.get(0, b"").decode()
        value = f.get(1, b"")
        try:
            cache.put(key, value, from_u64(f[2], "version") if 2 in f else 0)
        except OversizeValue as exc:
            raise ServiceError("OversizeValue", str(exc)) from None
        await env.compute(value)
        return {}

    return {"CacheGet": get, "CachePut": put}


def _open_store(env: ServiceEnv) -> LogStore:
    store = env.state.stores.get(env.name)
    if store is None:
        store = env.state.stores[env.name] = LogStore(env.state.workdir / "records" / f"{env.name}.log")
    return store


def _store_handlers(env: ServiceEnv) -> dict[str, Handler]:
    store = _open_store(env)

    async def get(ctx, f):
        entry = store.get_versioned(f.get(0, b"").decode())
        if entry is None:
            return {}
        await env.compute(entry[0])
        return {0: entry[0], 1: u64(entry[1])}

    async def put(ctx, f):
        value = f.get(1, b"")
        await env.compute(value)
        return {0: u64(store.put(f.get(0, b"").decode(), value))}

    return {"StoreGet": get, "StorePut": put}


def _review_storage_handlers(env: ServiceEnv) -> dict[str, Handler]:
    handlers = _store_handlers(env)
    store = _open_store(env)

    async def review_storage(ctx, f):
        rid = from_u64(f.get(0), "review_id")
        body = f.get(1, b"")
        await env.compute(body)
        return {0: u64(store.put(f"review:{rid}", body))}

    handlers["ReviewStorage"] = review_storage
    return handlers


_BLOB_NAME = re.compile(r"^[A-Za-z0-9._-]+$")


def _blob_handlers(env: ServiceEnv) -> dict[str, Handler]:
    blobs = env.state.dataset / "blobs"

    async def chunk(ctx, f):
        ref = f.get(0, b"").decode(errors="replace")
        index = from_u64(f.get(1), "index")
        size = from_u64(f.get(2), "chunk_size") if 2 in f else DEFAULT_CHUNK
        if not _BLOB_NAME.match(ref) or size < 1:
            raise ServiceError("BadRequest", "bad blob reference")
        try:
            with open(blobs / ref, "rb") as fh:
                fh.seek(index * size)
                data = fh.read(size)
        except FileNotFoundError:
            raise ServiceError("NotFound", ref) from None
        if not data:
            raise ServiceError("OutOfRange", f"{ref} chunk {index}")
        await env.compute(data)
        return {0: data}

    return {"RentChunk": chunk}


# -- browse --------------------------------------------------------------------

def _section_handlers(env: ServiceEnv) -> dict[str, Handler]:
    method, prefix = SECTION_SERVICES[env.name]

    async def section(ctx, f):
        movie_id = from_u64(f.get(0), "movie_id")
        key = f"{prefix}:{movie_id}"
        entry = await cache_get(env, ctx, key)
        if entry is None:
            entry = await store_get(env, ctx, key)
            if entry is None:
                raise ServiceError("NotFound", f"movie {movie_id}")
            await cache_put(env, ctx, key, entry[0], entry[1])
        value = entry[0]
        digest = await env.compute(value)
        return {0: u64(digest) + value}

    return {method: section}


def _compose_page_handlers(env: ServiceEnv) -> dict[str, Handler]:
    edges = [e for e in env.topology.callees(env.name) if e.callee in SECTION_SERVICES]

    async def one(ctx, callee, movie):
        try:
            return await env.call(ctx, callee, SECTION_SERVICES[callee][0], {0: movie})
        except RpcError as exc:
            return exc

    async def compose(ctx, f):
        movie = f.get(0)
        from_u64(movie, "movie_id")
        results: dict[str, object] = {}
        parallel = [e for e in edges if e.mode is Mode.PARALLEL]
        serial = [e for e in edges if e.mode is Mode.SERIAL]
        if parallel:
            outs = await asyncio.gather(*(one(ctx, e.callee, movie) for e in parallel))
            results.update(zip((e.callee for e in parallel), outs))
        for e in serial:
            results[e.callee] = await one(ctx, e.callee, movie)
        page: Fields = {}
        degraded = False
        for tag, section in enumerate(SECTIONS):
            callee = next((s for s, sec in SECTION_OF_SERVICE.items() if sec == section), None)
            out = results.get(callee)
            if out is None:
                page[tag] = b"\x00Unavailable"
                degraded = True
            elif isinstance(out, RemoteError) and out.code == "NotFound":
                raise ServiceError("NotFound", f"movie {from_u64(movie)}")
            elif isinstance(out, Exception):
                page[tag] = b"\x00" + getattr(out, "code", "Error").encode()
                degraded = True
            else:
                page[tag] = b"\x01" + out.get(0, b"")
        await env.compute(b"".join(page.values()))
        return Reply(page, SpanStatus.DROPPED_CHILD if degraded else SpanStatus.OK)

    return {"ComposePage": compose}


# -- reviews -------------------------------------------------------------------

def _unique_id_handlers(env: ServiceEnv) -> dict[str, Handler]:
    gen = env.state.id_gens.get(env.name)
    if gen is None:
        instance = env.spec.instance if env.spec.instance is not None else 1
        gen = env.state.id_gens[env.name] = UniqueIdGenerator(
            instance, env.state.workdir / "records" / f"{env.name}.state")

    async def unique_id(ctx, f):
        return {0: u64(gen.next_id())}

    return {"UniqueId": unique_id}


def _compose_review_handlers(env: ServiceEnv) -> dict[str, Handler]:
    async def compose(ctx, f):
        user = from_u64(f.get(0), "user_id")
        movie = from_u64(f.get(1), "movie_id")
        text = f.get(2, b"")
        stars = from_u64(f.get(3), "stars")
        if not 1 <= stars <= 5:
            raise ServiceError("InvalidStars", f"stars={stars}")
        rid = from_u64((await call_or_raise(env, ctx, "unique-id", "UniqueId", {})).get(0), "review_id")
        await call_or_raise(env, ctx, "movie-review", "MovieReview",
                            {0: u64(movie), 1: u64(rid), 2: u64(user), 3: u64(stars), 4: text})
        record = dumps({"id": rid, "user": user, "stars": stars, "text": text.decode("latin-1"), "movie": movie})
        await call_or_raise(env, ctx, "review-storage", "ReviewStorage", {0: u64(rid), 1: record})
        await call_or_raise(env, ctx, "user-review", "UserReview", {0: u64(user), 1: u64(rid)})
        await env.compute(text)
        return {0: u64(rid)}

    return {"ComposeReview": compose}


def _movie_review_handlers(env: ServiceEnv) -> dict[str, Handler]:
    async def movie_review(ctx, f):
        movie = from_u64(f.get(0), "movie_id")
        rid = from_u64(f.get(1), "review_id")
        user = from_u64(f.get(2), "user_id")
        stars = from_u64(f.get(3), "stars")
        text = f.get(4, b"")
        key = f"reviews:{movie}"
        async with env.locks(movie):
            entry = await store_get(env, ctx, key)
            if entry is None:
                raise ServiceError("NotFound", f"movie {movie}")
            index = json.loads(entry[0])
            index["ids"].append(rid)
            index["recent"] = (index["recent"] + [{"id": rid, "user": user, "stars": stars,
                                                   "text": text.decode("latin-1")}])[-RECENT_REVIEWS:]
            value = dumps(index)
            version = await store_put(env, ctx, key, value)
            await cache_put(env, ctx, key, value, version)
        await call_or_raise(env, ctx, "update-movie", "UpdateMovie", {0: u64(movie), 1: u64(stars)})
        await env.compute(value)
        return {0: u64(len(index["ids"]))}

    return {"MovieReview": movie_review}


def _update_movie_handlers(env: ServiceEnv) -> dict[str, Handler]:
    async def update(ctx, f):
        movie = from_u64(f.get(0), "movie_id")
        stars = from_u64(f.get(1), "stars")
        key = f"rating:{movie}"
        async with env.locks(movie):
            entry = await store_get(env, ctx, key)
            if entry is None:
                raise ServiceError("NotFound", f"movie {movie}")
            total, count = parse_rating(entry[0])
            value = rating_value(total + stars, count + 1)
            version = await store_put(env, ctx, key, value)
            await cache_put(env, ctx, key, value, version)
        await env.compute(value)
        return {0: value}

    return {"UpdateMovie": update}


def _user_review_handlers(env: ServiceEnv) -> dict[str, Handler]:
    async def user_review(ctx, f):
        user = from_u64(f.get(0), "user_id")
        rid = from_u64(f.get(1), "review_id")
        key = f"ureviews:{user}"
        async with env.locks(user):
            entry = await store_get(env, ctx, key)
            ids = json.loads(entry[0]) if entry else []
            ids.append(rid)
            value = dumps(ids)
            await store_put(env, ctx, key, value)
        await env.compute(value)
        return {0: u64(len(ids))}

    return {"UserReview": user_review}


# -- rent ----------------------------------------------------------------------

def _user_auth_handlers(env: ServiceEnv) -> dict[str, Handler]:
    async def auth(ctx, f):
        user = from_u64(f.get(0), "user_id")
        movie = from_u64(f.get(1), "movie_id")
        price = from_u64(f.get(2), "price")
        chunk = from_u64(f.get(3), "chunk_size") if 3 in f else DEFAULT_CHUNK
        if chunk < 1:
            raise ServiceError("BadRequest", "chunk_size must be >= 1")
        video = await store_get(env, ctx, f"videos:{movie}")
        if video is None:
            raise ServiceError("NotFound", f"movie {movie}")
        meta = json.loads(video[0])
        key = f"user:{user}"
        async with env.locks(user):
            entry = await store_get(env, ctx, key)
            if entry is None:
                raise ServiceError("NotFound", f"user {user}")
            balance = int(entry[0])
            if balance < price:
                raise ServiceError("InsufficientFunds", f"balance {balance} < price {price}")
            balance -= price
            await store_put(env, ctx, key, str(balance).encode())
        manifest = StreamManifest.build(movie, meta["bytes"], chunk, meta["video_ref"], balance).to_json()
        await env.compute(manifest)
        return {0: manifest}

    return {"UserAuth": auth}


# -- frontend ------------------------------------------------------------------

def _frontend_handlers(env: ServiceEnv) -> dict[str, Handler]:
    def route(method: str) -> Handler:
        callee = FRONTEND_ROUTES[method]

        async def forward(ctx, f):
            out = await call_or_raise(env, ctx, callee, method, f)
            if method == "ComposePage":
                await env.compute(b"".join(out[t] for t in sorted(out)))
                degraded = any(v[:1] == b"\x00" for v in out.values())
                return Reply(out, SpanStatus.DROPPED_CHILD if degraded else SpanStatus.OK)
            if method == "ComposeReview":
                await env.compute(f.get(2, b""))
            elif method == "UserAuth":
                await env.compute(out.get(0, b""))
            return out

        return forward

    return {m: route(m) for m in FRONTEND_ROUTES}


def build_envs(topology: ServiceTopology, names: list[str], state: SharedState,
               backend_for: Callable[[ServiceSpec], Backend],
               executor_for: Callable[[ServiceSpec], Executor | None]) -> dict[str, ServiceEnv]:
    envs = {}
    for name in names:
        spec = topology.service(name)
        envs[name] = ServiceEnv(spec, topology, state, backend_for(spec), executor_for(spec))
    return envs


def monolith_envs(topology: ServiceTopology, state: SharedState,
                  executor: Executor | None = None) -> tuple[LocalBackend, dict[str, ServiceEnv]]:
    backend = LocalBackend()
    if executor is None:
        executor = ThreadPoolExecutor(max(4, sum(s.workers for s in topology.services)))
    envs = build_envs(topology, topology.names, state, lambda s: backend, lambda s: executor)
    backend.envs.update(envs)
    return backend, envs
