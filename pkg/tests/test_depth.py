import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from pilab.depth import (NormalizedDepthMap, RawDepthMap, normalize_depth_map, object_depth,
                         object_depth_stats, read_maps, write_maps)
from pilab.errors import FormatError, ResolutionError, ValidationError
from pilab.geometry import BBox

raw_maps = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
                  elements=st.floats(0.5, 100.0))


def test_normalize_example():
    out = normalize_depth_map(np.array([[2.0, 5.0, 8.0]])).values
    np.testing.assert_allclose(out, [[1.0, 0.5, 0.0]])


def test_uniform_map_is_all_foreground():
    assert not normalize_depth_map(np.full((3, 4), 7.0)).values.any()


def test_non_finite_rejected():
    with pytest.raises(ValidationError):
        normalize_depth_map(np.array([[1.0, np.inf]]))


def test_contract_on_hundred_random_maps():
    rng = np.random.default_rng(3)
    for _ in range(100):
        raw = rng.uniform(0.5, 50.0, rng.integers(1, 20, size=2))
        out = normalize_depth_map(raw).values
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert out.flat[raw.argmax()] == 0.0 and out.flat[raw.argmin()] == 1.0
        order = np.argsort(raw, axis=None, kind="stable")
        assert np.all(np.diff(out.flat[order]) <= 0)


@given(raw_maps)
def test_order_reversed_exactly(raw):
    out = normalize_depth_map(raw).values
    a, b = np.meshgrid(raw.ravel(), raw.ravel())
    oa, ob = np.meshgrid(out.ravel(), out.ravel())
    assert np.all((oa < ob) == (a > b)) or raw.min() == raw.max()


@given(raw_maps)
def test_idempotent_on_normalized_maps(raw):
    once = normalize_depth_map(raw).values
    if once.max() == once.min():
        return
    # normalizing reverses order again, so twice applied gives the flipped map
    twice = normalize_depth_map(1.0 - once).values
    np.testing.assert_allclose(twice, once, atol=1e-12)


def test_object_stats_two_by_two():
    m = NormalizedDepthMap(np.array([[0.1, 0.2], [0.3, 0.4]]))
    s = object_depth_stats(m, BBox(0, 0, 1, 1))
    assert (s.median, s.mean) == pytest.approx((0.25, 0.25))
    assert (s.q25, s.q75) == pytest.approx((0.175, 0.325))
    assert s.q25 == pytest.approx(np.percentile([0.1, 0.2, 0.3, 0.4], 25))


def test_singleton_pixel_and_outside_box():
    m = NormalizedDepthMap(np.arange(16, dtype=float).reshape(4, 4) / 15)
    s = object_depth_stats(m, BBox(0.25, 0.5, 0.5, 0.75))
    v = m.values[2, 1]
    assert (s.median, s.mean, s.q25, s.q75, s.center_value, s.std) == (v, v, v, v, v, 0.0)
    assert object_depth(m, BBox(0.25, 0.5, 0.5, 0.75)) == v
    with pytest.raises(ResolutionError):
        object_depth_stats(m, BBox(0.01, 0.01, 0.05, 0.05))


def test_median_robust_to_one_outlier():
    rng = np.random.default_rng(0)
    vals = np.sort(rng.uniform(0.4, 0.6, 101))
    with_outlier = np.concatenate([vals, [1.0]])
    from pilab.geometry import DepthStats
    base, pert = DepthStats.from_samples(vals), DepthStats.from_samples(with_outlier)
    step = np.max(np.diff(vals[49:53]))
    assert abs(pert.median - base.median) <= step
    assert abs(pert.mean - base.mean) > abs(pert.median - base.median) / 10


def test_stats_ordering_property():
    rng = np.random.default_rng(1)
    m = NormalizedDepthMap(normalize_depth_map(rng.uniform(1, 9, (10, 10))).values)
    for _ in range(50):
        x1, y1 = rng.uniform(0, 0.8, 2)
        s = object_depth_stats(m, BBox(x1, y1, x1 + 0.2, y1 + 0.2))
        assert 0 <= s.q25 <= s.median <= s.q75 <= 1


def test_binary_roundtrip_and_truncation():
    maps = [RawDepthMap(np.arange(6, dtype=np.float32).reshape(2, 3) + 1),
            RawDepthMap(np.ones((4, 1), dtype=np.float32))]
    data = write_maps(maps)
    assert data[:8] == (3).to_bytes(4, "little") + (2).to_bytes(4, "little")
    back = read_maps(data)
    assert all(np.array_equal(a.values, b.values) for a, b in zip(maps, back))
    with pytest.raises(FormatError) as err:
        read_maps(data[:-2])
    assert err.value.offset is not None
