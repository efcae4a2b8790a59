"""Log-bucketed latency histogram with fixed relative precision."""
from __future__ import annotations

import math
from dataclasses import dataclass


class EmptyHistogram(ValueError):
    pass


class ConfigMismatch(ValueError):
    pass


@dataclass(frozen=True)
class BucketConfig:
    lowest_ns: int = 1_000
    highest_ns: int = 100_000_000_000
    ratio: float = 1.01

    @property
    def buckets(self) -> int:
        return math.ceil(math.log(self.highest_ns / self.lowest_ns) / math.log(self.ratio)) + 1


DEFAULT_CONFIG = BucketConfig()


class LatencyHistogram:
    """Bucket i covers [lowest * ratio^i, lowest * ratio^(i+1)).

    Values below ``lowest_ns`` land in bucket 0 and values above
    ``highest_ns`` in the last bucket; min and max are kept exactly.
    """

    __slots__ = ("config", "counts", "count", "min", "max", "_log_lo", "_log_r")

    def __init__(self, config: BucketConfig = DEFAULT_CONFIG):
        self.config = config
        self.counts = [0] * config.buckets
        self.count = 0
        self.min: int | None = None
        self.max: int | None = None
        self._log_lo = math.log(config.lowest_ns)
        self._log_r = math.log(config.ratio)

    def bucket_of(self, value_ns: int) -> int:
        if value_ns <= self.config.lowest_ns:
            return 0
        i = int((math.log(value_ns) - self._log_lo) / self._log_r)
        return min(i, len(self.counts) - 1)

    def lower_bound(self, i: int) -> float:
        return self.config.lowest_ns * self.config.ratio ** i

    def representative(self, i: int) -> float:
        """Geometric midpoint of bucket i."""
        return self.config.lowest_ns * self.config.ratio ** (i + 0.5)

    def record(self, value_ns: int, n: int = 1) -> None:
        value_ns = int(value_ns)
        self.counts[self.bucket_of(value_ns)] += n
        self.count += n
        if self.min is None or value_ns < self.min:
            self.min = value_ns
        if self.max is None or value_ns > self.max:
            self.max = value_ns

    def percentile(self, q: float) -> float:
        return percentile(self, q)

    def merge(self, other: "LatencyHistogram") -> "LatencyHistogram":
        return merge(self, other)

    def __len__(self) -> int:
        return self.count

    def __repr__(self) -> str:
        return f"LatencyHistogram(count={self.count}, min={self.min}, max={self.max})"


def percentile(h: LatencyHistogram, q: float) -> float:
    """Nearest-rank percentile: representative of the bucket holding sample ceil(q*N)."""
    if not 0 < q <= 1:
        raise ValueError("q must be in (0, 1]")
    if h.count == 0:
        raise EmptyHistogram("histogram is empty")
    rank = max(1, math.ceil(round(q * h.count, 9)))
    seen = 0
    for i, c in enumerate(h.counts):
        seen += c
        if seen >= rank:
            return h.representative(i)
    raise AssertionError("unreachable: rank exceeds count")


def merge(a: LatencyHistogram, b: LatencyHistogram) -> LatencyHistogram:
    if a.config != b.config:
        raise ConfigMismatch(f"{a.config} != {b.config}")
    out = LatencyHistogram(a.config)
    out.counts = [x + y for x, y in zip(a.counts, b.counts)]
    out.count = a.count + b.count
    mins = [v for v in (a.min, b.min) if v is not None]
    maxs = [v for v in (a.max, b.max) if v is not None]
    out.min = min(mins) if mins else None
    out.max = max(maxs) if maxs else None
    return out


def exact_nearest_rank(sorted_values, q: float):
    """Reference nearest-rank on a sorted sequence (used by tests and reports)."""
    if not sorted_values:
        raise EmptyHistogram("no samples")
    rank = max(1, math.ceil(round(q * len(sorted_values), 9)))
    return sorted_values[rank - 1]
