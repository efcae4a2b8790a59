import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moviebench.histogram import (
    BucketConfig, ConfigMismatch, EmptyHistogram, LatencyHistogram, merge, percentile,
)

QS = (0.5, 0.9, 0.99)


def nearest_rank(values, q):
    s = sorted(values)
    return s[max(1, math.ceil(q * len(s) - 1e-9)) - 1]


def hist_of(values):
    h = LatencyHistogram()
    for v in values:
        h.record(v)
    return h


def close(a, b, tol=0.01):
    return abs(a - b) <= tol * b


def test_degenerate():
    h = hist_of([5_000_000] * 1000)
    for q in (0.01, 0.5, 0.99, 1.0):
        assert close(percentile(h, q), 5_000_000)


def test_one_to_thousand_ms():
    h = hist_of([i * 1_000_000 for i in range(1, 1001)])
    assert close(percentile(h, 0.99), 990_000_000)


def test_q_one_is_max_bucket():
    vals = [random.Random(1).randint(1000, 10**9) for _ in range(1000)]
    h = hist_of(vals)
    assert percentile(h, 1.0) >= max(vals) / 1.01
    assert h.max == max(vals) and h.min == min(vals)


def test_errors():
    with pytest.raises(EmptyHistogram):
        percentile(LatencyHistogram(), 0.5)
    with pytest.raises(ValueError):
        percentile(hist_of([1000]), 0)
    with pytest.raises(ConfigMismatch):
        merge(LatencyHistogram(), LatencyHistogram(BucketConfig(ratio=1.02)))


def test_out_of_range_values_clamped():
    h = hist_of([1, 10**13])
    assert h.counts[0] == 1 and h.counts[-1] == 1


def test_merge_counts_add():
    a = hist_of([2000] * 100)
    b = hist_of([3000] * 250)
    m = merge(a, b)
    assert m.count == 350 and sum(m.counts) == 350
    assert m.min == 2000 and m.max == 3000


@pytest.mark.parametrize("dist", ["uniform", "lognormal", "bimodal"])
def test_percentiles_within_one_percent(dist):
    rng = np.random.default_rng(42)
    n = 100_000
    if dist == "uniform":
        xs = rng.uniform(10_000, 50_000_000, n)
    elif dist == "lognormal":
        xs = rng.lognormal(math.log(2_000_000), 1.0, n)
    else:
        xs = np.concatenate([rng.normal(1_000_000, 100_000, n // 2), rng.normal(80_000_000, 5_000_000, n - n // 2)])
    xs = np.maximum(xs, 1000).astype(np.int64)
    rng.shuffle(xs)
    h = hist_of(xs.tolist())
    for q in QS:
        assert close(percentile(h, q), nearest_rank(xs.tolist(), q))


def test_merge_matches_concatenation():
    rng = np.random.default_rng(3)
    a = rng.lognormal(13, 1.2, 30_000).astype(np.int64) + 1000
    b = rng.uniform(1e5, 1e8, 70_000).astype(np.int64)
    m = merge(hist_of(a.tolist()), hist_of(b.tolist()))
    both = np.concatenate([a, b]).tolist()
    for q in QS:
        assert close(percentile(m, q), nearest_rank(both, q))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1000, 10**11), min_size=1, max_size=500), st.floats(0.001, 1.0))
def test_percentile_property(values, q):
    assert close(percentile(hist_of(values), q), nearest_rank(values, q))
