import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scipy.special import ndtri

from nvsplit.errors import ConfigError
from nvsplit.paths import (
    ETA_STREAM,
    TimeGrid,
    constant_signs,
    gaussian_block,
    make_path,
    make_rademacher,
    uniforms,
)


def test_grid_times_and_neighbours():
    g = TimeGrid(2.0, 8)
    assert g.h == 0.25
    assert g.times[0] == 0.0 and g.times[-1] == 2.0
    assert g.last_before(0.0) == 0.0 and g.first_after(0.0) == 0.0
    assert g.last_before(0.25) == 0.0 and g.first_after(0.25) == 0.25
    assert g.last_before(0.3) == 0.25 and g.first_after(0.3) == 0.5
    with pytest.raises(ConfigError):
        TimeGrid(0.0, 4)
    with pytest.raises(ConfigError):
        TimeGrid(1.0, 0)


def test_path_regenerates_exactly():
    g = TimeGrid(1.0, 64)
    a = make_path(42, [0, 1, 2, 3], 2, g)
    b = make_path(42, [3, 1], 2, g)
    assert np.array_equal(a.increments[3], b.increments[0])
    assert np.array_equal(a.increments[1], b.increments[1])
    assert not np.array_equal(make_path(43, 0, 2, g).increments, a.increments[:1])


def test_prefix_stability():
    # the first increments do not depend on how many were requested
    short = make_path(5, 0, 1, TimeGrid(1.0, 16)).increments * np.sqrt(16)
    long = make_path(5, 0, 1, TimeGrid(1.0, 64)).increments * np.sqrt(64)
    assert np.array_equal(short, long[..., :16])


def test_uniforms_strictly_inside():
    w = np.array([0, 2 ** 64 - 1, 2 ** 63], dtype=np.uint64)
    u = uniforms(w)
    assert np.all((u > 0) & (u < 1))
    assert np.all(np.isfinite(ndtri(u)))
    assert u[2] == pytest.approx(0.5)


def test_increment_moments():
    g = TimeGrid(1.0, 1000)
    inc = make_path(11, np.arange(100), 1, g).increments.ravel()
    n = inc.size
    h = g.h
    mean_se = np.sqrt(h / n)
    var_se = h * np.sqrt(2.0 / (n - 1))
    assert abs(inc.mean()) <= 3 * mean_se
    assert abs(inc.var(ddof=1) - h) <= 3 * var_se


def test_components_uncorrelated():
    inc = make_path(3, np.arange(200), 2, TimeGrid(1.0, 500)).increments
    r = np.corrcoef(inc[:, 0].ravel(), inc[:, 1].ravel())[0, 1]
    assert abs(r) <= 3 / np.sqrt(inc[:, 0].size)


def test_streams_are_disjoint():
    z = gaussian_block(9, 0, [0, 1, ETA_STREAM + 8], 8)
    rows = {tuple(r) for r in z[0]}
    assert len(rows) == 3


@pytest.mark.parametrize("levels", [1, 2, 3, 4])
def test_coarsen_sums_blocks(levels):
    p = make_path(1, [0, 1], 2, TimeGrid(1.0, 64))
    c = p.coarsen(64 >> levels)
    blocks = p.increments.reshape(2, 2, 64 >> levels, 1 << levels).sum(-1)
    np.testing.assert_allclose(c.increments, blocks, rtol=1e-14, atol=1e-15)
    np.testing.assert_allclose(c.values()[..., -1], p.values()[..., -1], atol=1e-13)


def test_coarsen_rejects_bad_ratio():
    p = make_path(1, 0, 1, TimeGrid(1.0, 48))
    with pytest.raises(ConfigError):
        p.coarsen(16)
    with pytest.raises(ConfigError):
        p.coarsen(7)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 63 - 1), st.integers(0, 2 ** 40), st.integers(1, 3), st.integers(1, 4), st.integers(1, 4))
def test_coarsening_associative(seed, index, d, a, b):
    N = 1 << (a + b + 1)
    p = make_path(seed, index, d, TimeGrid(1.0, N))
    stepwise = p.coarsen(N >> a).coarsen(N >> (a + b))
    direct = p.coarsen(N >> (a + b))
    assert np.array_equal(stepwise.increments, direct.increments)


def test_values_start_at_zero():
    v = make_path(2, [0, 1], 3, TimeGrid(1.0, 8)).values()
    assert v.shape == (2, 3, 9)
    assert np.all(v[..., 0] == 0.0)


def test_rademacher_deterministic_and_balanced():
    a = make_rademacher(4, np.arange(50), 400)
    b = make_rademacher(4, np.arange(50), 400)
    assert np.array_equal(a.values, b.values)
    assert set(np.unique(a.values)) == {-1, 1}
    n = a.values.size
    assert abs(a.values.mean()) <= 3 / np.sqrt(n)
    assert a.stream == ETA_STREAM + 400


def test_rademacher_grids_use_separate_streams():
    a = make_rademacher(4, 0, 64).values[0]
    b = make_rademacher(4, 0, 128).values[0, :64]
    assert not np.array_equal(a, b)


def test_constant_signs():
    s = constant_signs(3, 5, -1)
    assert s.values.shape == (3, 5) and np.all(s.values == -1)


def test_negative_index_rejected():
    with pytest.raises(ConfigError):
        make_path(1, -1, 1, TimeGrid(1.0, 4))
