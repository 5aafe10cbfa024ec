"""Property-based checks of the small numerical building blocks."""
import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gaspirn.assembly import build_system, woodbury_inverse
from gaspirn.ingest import MeasurementSeries, OutlierSpec, inject_outliers
from gaspirn.network import build_grid, network_theta
from gaspirn.normalize import Normalizer
from gaspirn.pirn import GradientVector, tbptt_split
from gaspirn.training import clip_gradients

finite = st.floats(-1e6, 1e6, allow_nan=False)
# magnitudes of physical quantities; far from the subnormal range after scaling
physical = st.one_of(st.just(0.0), st.floats(1e-6, 1e9), st.floats(-1e9, -1e-6))


@given(st.integers(1, 500), st.integers(1, 100))
def test_tbptt_chunks_tile_the_sequence(T, window):
    chunks = tbptt_split(T, window)
    assert chunks[0][0] == 0 and chunks[-1][1] == T
    assert all(a[1] == b[0] for a, b in zip(chunks, chunks[1:]))
    assert all(0 < stop - start <= window for start, stop in chunks)
    assert len(chunks) == -(-T // window)


@given(arrays(float, st.integers(1, 30), elements=finite), st.floats(1e-3, 1e3))
def test_clipping_bounds_and_signs(g, bound):
    out = clip_gradients(GradientVector(g, g[:1].copy()), bound).theta
    assert np.all(np.abs(out) <= bound)
    inside = np.abs(g) <= bound
    np.testing.assert_array_equal(out[inside], g[inside])
    assert np.all(np.sign(out[~inside]) == np.sign(g[~inside]))


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.integers(0, 2**31))
@settings(max_examples=50)
def test_outlier_ratios(p, amp, seed):
    vals = np.linspace(1.0, 2.0, 60).reshape(20, 3)
    series = MeasurementSeries(np.arange(20), [("a", "q"), ("b", "q"), ("c", "q")], vals)
    ratio = inject_outliers(series, OutlierSpec(p, amp, seed)).values / vals
    ok = np.isclose(ratio, 1.0, atol=1e-15) | np.isclose(ratio, 1 + amp) | np.isclose(ratio, 1 - amp)
    assert ok.all()


@given(st.floats(1e-3, 1e9), st.floats(1e-3, 1e6), arrays(float, 12, elements=physical))
def test_normalizer_round_trip(pb, fb, x):
    nz = Normalizer(pb, fb)
    np.testing.assert_allclose(nz.state_physical(nz.state(x)), x, rtol=1e-14, atol=0)
    np.testing.assert_allclose(nz.theta_physical(nz.theta(x)), x, rtol=1e-14, atol=0)


@given(arrays(float, 8, elements=st.floats(-0.1, 0.1)))
@settings(max_examples=40, deadline=None)
def test_woodbury_matches_fresh_inverse(three_node_nominal, rel):
    grid = build_grid(three_node_nominal)
    theta = Normalizer(1e6, 10.0).theta(network_theta(three_node_nominal))
    system = build_system(grid, theta)
    fresh = build_system(grid, theta * (1 + rel))
    J = woodbury_inverse(system.J, system.table, theta * rel)
    scale = np.linalg.norm(fresh.J)
    assert np.linalg.norm(J - fresh.J) <= 1e-8 * scale
