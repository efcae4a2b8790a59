"""Deterministic synthetic movie dataset.

Layout of a dataset directory::

    manifest                 n, seed, checksum and generation parameters
    records/store.log        movie sections and user accounts
    records/review-storage.log
    blobs/<id>               photo and video files
"""
from __future__ import annotations

import errno
import hashlib
import json
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

from .kvstore import LogStore

if TYPE_CHECKING:
    import numpy as np

MIB = 1 << 20
SECTION_PREFIXES = ("plot", "thumb", "rating", "cast", "reviews", "photos", "videos", "recommend")
RECENT_REVIEWS = 10
RECOMMENDATIONS = 10
DATASET_REVIEW_INSTANCE = 0


class InvalidCount(ValueError):
    pass


class DiskFull(OSError):
    pass


@dataclass
class MovieRecord:
    movie_id: int
    title: str
    plot: bytes
    cast: list[str]
    rating_sum: int
    rating_count: int
    photo_refs: list[str]
    video_ref: str
    review_ids: list[int]

    @property
    def rating(self) -> float | None:
        return self.rating_sum / self.rating_count if self.rating_count else None


@dataclass
class Review:
    review_id: int
    movie_id: int
    user_id: int
    text: bytes
    stars: int
    created_at: int


@dataclass
class UserAccount:
    user_id: int
    balance: int


@dataclass
class StreamManifest:
    movie_id: int
    chunk_size: int
    chunk_count: int
    total_bytes: int
    video_ref: str = ""
    balance: int | None = None

    @classmethod
    def build(cls, movie_id: int, total_bytes: int, chunk_size: int, video_ref: str = "",
              balance: int | None = None) -> "StreamManifest":
        if chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        return cls(movie_id, chunk_size, max(1, math.ceil(total_bytes / chunk_size)), total_bytes,
                   video_ref, balance)

    def to_json(self) -> bytes:
        return json.dumps(self.__dict__, sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_json(cls, data: bytes) -> "StreamManifest":
        return cls(**json.loads(data))


@dataclass
class Dataset:
    root: Path
    n: int
    seed: int
    checksum: str
    params: dict = field(default_factory=dict)
    movies: list[MovieRecord] = field(default_factory=list)
    reviews: list[Review] = field(default_factory=list)
    users: list[UserAccount] = field(default_factory=list)
    blob_sizes: dict[str, int] = field(default_factory=dict)

    @property
    def records_dir(self) -> Path:
        return self.root / "records"

    @property
    def blobs_dir(self) -> Path:
        return self.root / "blobs"


def dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def rating_value(rating_sum: int, rating_count: int) -> bytes:
    return f"{rating_sum},{rating_count}".encode()


def parse_rating(value: bytes) -> tuple[int, int]:
    s, c = value.decode().split(",")
    return int(s), int(c)


def review_entry(r: Review) -> dict:
    return {"id": r.review_id, "user": r.user_id, "stars": r.stars, "text": r.text.decode("latin-1")}


def _lognormal_sizes(rng: "np.random.Generator", count: int, median: int, sigma: float) -> "np.ndarray":
    import numpy as np

    return np.maximum(1, np.rint(rng.lognormal(math.log(median), sigma, count))).astype(np.int64)


def _letters(rng: "np.random.Generator", size: int) -> bytes:
    import numpy as np

    return rng.integers(97, 123, size=size, dtype=np.uint8).tobytes()


def _bounded_zipf(rng: "np.random.Generator", count: int, s: float, upper: int) -> "np.ndarray":
    import numpy as np

    k = np.arange(1, upper + 1, dtype=np.float64)
    p = k ** -s
    p /= p.sum()
    return rng.choice(np.arange(1, upper + 1), size=count, p=p)


def generate_dataset(n: int = 1000, seed: int = 0, out_dir: str | Path = "dataset", *,
                     video_bytes: int = 50 * MIB, video_pool: int = 2, users: int | None = None,
                     balance: int = 1_000_000, size_median: int = 4096, size_sigma: float = 1.0,
                     zipf_s: float = 1.2, max_reviews: int = 200) -> Dataset:
    """Write a dataset of ``n`` movies to ``out_dir``; deterministic in (n, seed, parameters).

    Movies share a pool of ``video_pool`` video blobs (movie i plays video
    i mod pool) to keep the footprint at pool x video_bytes.
    """
    if n < 1:
        raise InvalidCount(f"n must be >= 1, got {n}")
    if not 0 <= seed < 1 << 64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    root = Path(out_dir)
    try:
        return _generate(n, seed, root, video_bytes, max(1, min(video_pool, n)), users or max(n, 100),
                         balance, size_median, size_sigma, zipf_s, max_reviews)
    except OSError as exc:
        if exc.errno == errno.ENOSPC:
            raise DiskFull(errno.ENOSPC, f"disk full while writing {root}") from None
        raise


def _generate(n, seed, root, video_bytes, video_pool, n_users, balance, size_median, size_sigma,
              zipf_s, max_reviews) -> Dataset:
    import numpy as np

    if root.exists():
        for sub in ("records", "blobs"):
            shutil.rmtree(root / sub, ignore_errors=True)
        (root / "manifest").unlink(missing_ok=True)
    (root / "records").mkdir(parents=True, exist_ok=True)
    (root / "blobs").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    plot_sizes = _lognormal_sizes(rng, n, size_median, size_sigma)
    photo_counts = rng.integers(1, 6, size=n)
    photo_sizes = _lognormal_sizes(rng, int(photo_counts.sum()), size_median, size_sigma)
    review_counts = _bounded_zipf(rng, n, zipf_s, max_reviews)
    cast_sizes = rng.integers(3, 13, size=n)

    movies: list[MovieRecord] = []
    reviews: list[Review] = []
    blob_sizes: dict[str, int] = {}
    photo_data: dict[int, list[bytes]] = {}
    review_seq = 0
    photo_pos = 0
    for i in range(n):
        movie_id = i + 1
        title = f"Movie {movie_id:04d} " + _letters(rng, 8).decode()
        plot = _letters(rng, int(plot_sizes[i]))
        cast = [f"Actor {int(a)}" for a in rng.integers(1, 5000, size=int(cast_sizes[i]))]
        photos = []
        refs = []
        for j in range(int(photo_counts[i])):
            size = int(photo_sizes[photo_pos])
            photo_pos += 1
            ref = f"photo-{movie_id}-{j}"
            photos.append(rng.integers(0, 256, size=size, dtype=np.uint8).tobytes())
            refs.append(ref)
        photo_data[movie_id] = photos
        ids = []
        rsum = 0
        k = int(review_counts[i])
        stars = rng.integers(1, 6, size=k)
        authors = rng.integers(1, n_users + 1, size=k)
        lengths = _lognormal_sizes(rng, k, 200, 0.5)
        for r in range(k):
            review_seq += 1
            rid = (DATASET_REVIEW_INSTANCE << 48) | review_seq
            text = _letters(rng, int(lengths[r]))
            reviews.append(Review(rid, movie_id, int(authors[r]), text, int(stars[r]), 1_517_356_800 + review_seq))
            ids.append(rid)
            rsum += int(stars[r])
        movies.append(MovieRecord(movie_id, title, plot, cast, rsum, k, refs, f"video-{i % video_pool}", ids))

    users = [UserAccount(u, balance) for u in range(1, n_users + 1)]

    ranked = sorted(movies, key=lambda m: (-(m.rating or 0.0), m.movie_id))
    top = [(m.movie_id, m.title) for m in ranked[:RECOMMENDATIONS + 1]]

    by_movie: dict[int, list[Review]] = {}
    for r in reviews:
        by_movie.setdefault(r.movie_id, []).append(r)

    digest = hashlib.sha256()
    digest.update(f"n={n};seed={seed};video={video_bytes}x{video_pool};users={n_users};balance={balance}\n".encode())

    def put(store: LogStore, key: str, value: bytes) -> None:
        store.put(key, value)
        digest.update(f"{store.path.name}:{key}:{len(value)}:".encode())
        digest.update(value)

    with LogStore(root / "records" / "store.log") as store, \
            LogStore(root / "records" / "review-storage.log") as rstore:
        for m in movies:
            mid = m.movie_id
            put(store, f"plot:{mid}", m.title.encode() + b"\n" + m.plot)
            put(store, f"thumb:{mid}", photo_data[mid][0][:2048])
            put(store, f"rating:{mid}", rating_value(m.rating_sum, m.rating_count))
            put(store, f"cast:{mid}", dumps(m.cast))
            mine = by_movie.get(mid, [])
            put(store, f"reviews:{mid}", dumps({"ids": m.review_ids,
                                                "recent": [review_entry(r) for r in mine[-RECENT_REVIEWS:]]}))
            put(store, f"photos:{mid}", b"".join(photo_data[mid]))
            put(store, f"videos:{mid}", dumps({"video_ref": m.video_ref, "bytes": video_bytes}))
            put(store, f"recommend:{mid}", dumps([[i, t] for i, t in top if i != mid][:RECOMMENDATIONS]))
        for u in users:
            put(store, f"user:{u.user_id}", str(u.balance).encode())
        for r in reviews:
            put(rstore, f"review:{r.review_id}", dumps({**review_entry(r), "movie": r.movie_id,
                                                        "created_at": r.created_at}))

    for mid, photos in photo_data.items():
        for j, data in enumerate(photos):
            ref = f"photo-{mid}-{j}"
            (root / "blobs" / ref).write_bytes(data)
            blob_sizes[ref] = len(data)
            digest.update(f"blob:{ref}:{len(data)}:".encode())
            digest.update(data)
    for k in range(video_pool):
        ref = f"video-{k}"
        vrng = np.random.default_rng([seed, k])
        h = hashlib.sha256()
        with open(root / "blobs" / ref, "wb") as fh:
            left = video_bytes
            while left:
                step = min(left, 8 * MIB)
                chunk = vrng.integers(0, 256, size=step, dtype=np.uint8).tobytes()
                fh.write(chunk)
                h.update(chunk)
                left -= step
        blob_sizes[ref] = video_bytes
        digest.update(f"blob:{ref}:{video_bytes}:{h.hexdigest()}".encode())

    checksum = digest.hexdigest()
    params = {"users": n_users, "balance": balance, "video_bytes": video_bytes, "video_pool": video_pool,
              "size_median": size_median, "size_sigma": size_sigma, "zipf_s": zipf_s, "max_reviews": max_reviews}
    lines = [f"n {n}", f"seed {seed}", f"checksum {checksum}"] + [f"{k} {v}" for k, v in params.items()]
    (root / "manifest").write_text("\n".join(lines) + "\n")
    return Dataset(root, n, seed, checksum, params, movies, reviews, users, blob_sizes)


def read_manifest(root: str | Path) -> dict[str, str]:
    out = {}
    for line in (Path(root) / "manifest").read_text().splitlines():
        if line.strip():
            key, _, value = line.partition(" ")
            out[key] = value.strip()
    return out


def plot_size_cv(ds: Dataset) -> float:
    import numpy as np

    sizes = np.array([len(m.plot) for m in ds.movies], dtype=float)
    return float(sizes.std() / sizes.mean())
