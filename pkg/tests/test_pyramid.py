import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grnet.autodiff import Parameter, total
from grnet.errors import ConfigError, DimensionError
from grnet.pyramid import (
    DEFAULT_SCALES,
    FeatureMap,
    PyramidConfig,
    extract_pyramid,
    global_aggregate,
    window_bounds,
    window_index_sets,
)

from conftest import loop_pool


def test_default_config_counts():
    cfg = PyramidConfig()
    assert cfg.scales == DEFAULT_SCALES
    assert str(cfg) == "1x1,1x2,2x1,2x2,1x3,3x1,3x3"
    assert cfg.windows_per_scale == [1, 2, 2, 4, 3, 3, 9]
    assert cfg.num_windows == 24
    assert cfg.num_nodes == 124


def test_parse_round_trip_and_errors():
    assert PyramidConfig.parse("1x1,2X3") == PyramidConfig(((1, 1), (2, 3)))
    for bad in ("", "1x1,2", "axb", "1x1,0x2"):
        with pytest.raises(ConfigError):
            PyramidConfig.parse(bad)


@settings(max_examples=60, deadline=None)
@given(size=st.integers(1, 40), parts=st.integers(1, 12))
def test_windows_partition_each_axis(size, parts):
    if parts > size:
        return
    covered = []
    for k in range(parts):
        a, b = window_bounds(size, parts, k)
        assert b > a
        covered.extend(range(a, b))
    assert covered == list(range(size))


@settings(max_examples=30, deadline=None)
@given(h=st.integers(3, 9), w=st.integers(3, 9))
def test_index_sets_partition_map_per_scale(h, w):
    sets = window_index_sets(h, w, DEFAULT_SCALES)
    start = 0
    for n in PyramidConfig().windows_per_scale:
        cells = np.concatenate(sets[start:start + n])
        assert sorted(cells.tolist()) == list(range(h * w))
        start += n


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), h=st.integers(3, 7), w=st.integers(3, 7))
def test_extract_matches_loop_oracle(seed, h, w):
    fm = np.random.default_rng(seed).normal(size=(3, h, w))
    got = extract_pyramid(fm, PyramidConfig()).vectors.data
    assert np.array_equal(got, loop_pool(fm, DEFAULT_SCALES))


def test_global_window_is_channel_max(rng):
    fm = rng.normal(size=(5, 4, 6))
    pf = extract_pyramid(FeatureMap(fm), PyramidConfig())
    assert np.array_equal(pf.scale(1)[0], fm.max(axis=(1, 2)))
    assert np.array_equal(global_aggregate(fm), fm.max(axis=(1, 2)))
    assert pf.scale(7).shape == (9, 5)
    assert len(pf) == 24


def test_batched_equals_single(rng):
    maps = rng.normal(size=(3, 4, 5, 5))
    cfg = PyramidConfig.parse("1x1,2x2")
    batched = extract_pyramid(maps, cfg).vectors.data
    for b in range(3):
        assert np.array_equal(batched[b], extract_pyramid(maps[b], cfg).vectors.data)


def test_pooling_gradient_routes_to_argmax():
    fm = np.zeros((1, 3, 3))
    fm[0, 0, 0] = fm[0, 1, 1] = 5.0  # tie in the global window
    p = Parameter(fm, "fm")
    total(extract_pyramid(p, PyramidConfig(((1, 1),))).vectors).backward()
    expect = np.zeros((1, 3, 3))
    expect[0, 0, 0] = 1.0
    assert np.array_equal(p.grad, expect)


def test_map_too_small_for_grid():
    with pytest.raises(DimensionError, match="2x2"):
        extract_pyramid(np.zeros((2, 2, 2)), PyramidConfig())
    with pytest.raises(DimensionError):
        FeatureMap(np.zeros((2, 0, 3)))
