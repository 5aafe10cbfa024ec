import numpy as np
import pytest

from conftest import BASE_3NODE, BASE_24, boundary
from gaspirn.assembly import build_system
from gaspirn.ingest import gen_scenario
from gaspirn.network import ControlKind, GasNetwork, Pipeline, TerminalNode, build_grid, network_theta
from gaspirn.normalize import Normalizer
from gaspirn.simulator import (
    InfeasibleBoundaryError,
    Simulator,
    control_vector,
    direct_step,
    fixed_point,
    nominal_network,
    propagate,
    step,
    steady_state,
)


def _single_pipe(segments=10):
    nodes = (TerminalNode("in", ControlKind.PRESSURE), TerminalNode("out", ControlKind.FLOW))
    return GasNetwork(nodes, (Pipeline("P", "in", "out", 40_000.0, 0.5, 0.012, segments),))


class TestSteadyState:
    def test_zero_flow_is_uniform(self, three_node):
        ss = steady_state(three_node, boundary(three_node, {"1": 1.0e6}))
        assert np.all(ss.h[0::2] == 1.0e6)
        assert np.all(ss.h[1::2] == 0.0)

    def test_single_pipe_profile(self):
        net = _single_pipe()
        p = net.pipelines[0]
        ss = steady_state(net, control_vector(net, {"in": 1.0e6, "out": -10.0}))
        drop = p.friction * 340.0**2 * p.length_m * 100.0 / (p.area**2 * p.diameter_m)
        assert ss.node_pressure[1] == pytest.approx(np.sqrt(1e12 - drop), rel=1e-10)
        sq = ss.h[0::2] ** 2
        assert sq[5] == pytest.approx(0.5 * (sq[0] + sq[-1]), rel=1e-12)
        np.testing.assert_allclose(ss.h[1::2], 10.0, rtol=1e-10)

    def test_mass_balance(self, gaslib24):
        u = boundary(gaslib24, BASE_24)
        ss = steady_state(gaslib24, u)
        flow_nodes = [k for k, n in enumerate(gaslib24.nodes) if n.control is ControlKind.FLOW]
        np.testing.assert_allclose(ss.injection[flow_nodes], u[flow_nodes], atol=1e-8)

    def test_matches_discrete_fixed_point(self, three_node):
        u = boundary(three_node, BASE_3NODE)
        net = nominal_network(three_node, u)
        ss = steady_state(net, u)
        h = Simulator(net).fixed_point(u)
        assert np.abs(h[0::2] / ss.h[0::2] - 1).max() < 1e-3

    def test_rejects_infeasible_load(self):
        net = _single_pipe()
        with pytest.raises(InfeasibleBoundaryError):
            steady_state(net, control_vector(net, {"in": 1.0e6, "out": -500.0}))

    def test_rejects_nonpositive_pressure(self, three_node):
        with pytest.raises(InfeasibleBoundaryError):
            steady_state(three_node, boundary(three_node, {"1": 0.0}))

    def test_control_vector_checks_ids(self, three_node):
        with pytest.raises(KeyError, match="unknown"):
            control_vector(three_node, {"1": 1.0, "2": 0.0, "3": 0.0, "Z": 1.0})
        with pytest.raises(KeyError, match="no control value"):
            control_vector(three_node, {"1": 1.0})


class TestStep:
    @pytest.fixture
    def system(self, three_node_nominal):
        nz = Normalizer(1e6, 10.0)
        return build_system(build_grid(three_node_nominal), nz.theta(network_theta(three_node_nominal))), nz

    def test_fixed_point_is_invariant(self, system, three_node_nominal):
        sys_, nz = system
        u = nz.controls(three_node_nominal, boundary(three_node_nominal, BASE_3NODE))
        h, _ = fixed_point(sys_, u)
        h1, _ = step(sys_, h, u)
        np.testing.assert_allclose(h1, h, rtol=1e-12, atol=1e-12)

    def test_block_step_equals_direct_solve(self, system, three_node_nominal):
        sys_, nz = system
        u = nz.controls(three_node_nominal, boundary(three_node_nominal, BASE_3NODE))
        h, _ = fixed_point(sys_, u)
        u2 = u.copy()
        u2[0] *= 1.05
        h1, pn = step(sys_, h, u2)
        x = direct_step(sys_, h, u2)
        np.testing.assert_allclose(h1, x[:12], rtol=0, atol=1e-10)
        np.testing.assert_allclose(pn, x[12:], rtol=0, atol=1e-10)

    def test_pressure_step_propagates_monotonically(self, three_node_nominal):
        sim = Simulator(three_node_nominal, normalizer=Normalizer(1e6, 10.0))
        u0 = boundary(three_node_nominal, {"1": 1.0e6})
        U = np.tile(u0, (200, 1))
        U[1:, 0] = 1.1e6
        traj = sim.simulate(U, h0=steady_state(three_node_nominal, u0).h)
        far = traj.y[:, 2]
        assert far[-1] > far[0]
        assert np.all(np.diff(far) >= -1e-6)
        assert abs(far[-1] - 1.1e6) < abs(far[1] - 1.1e6)


class TestSimulate:
    def test_empty_horizon(self, three_node_nominal):
        h0 = steady_state(three_node_nominal, boundary(three_node_nominal, BASE_3NODE)).h
        traj = Simulator(three_node_nominal).simulate(np.zeros((0, 3)), h0=h0)
        assert traj.T == 0
        np.testing.assert_array_equal(traj.h, h0[None])

    def test_constant_input_gives_constant_output(self, three_node_nominal):
        u = boundary(three_node_nominal, BASE_3NODE)
        traj = Simulator(three_node_nominal, normalizer=Normalizer(1e6, 10.0)).simulate(np.tile(u, (50, 1)))
        np.testing.assert_allclose(traj.y, np.tile(traj.y[0], (50, 1)), rtol=1e-11)

    def test_gaslib24_day_stays_finite_and_positive(self, gaslib24_nominal):
        base = boundary(gaslib24_nominal, BASE_24)
        U = gen_scenario(base, "steps", 1440, seed=3)
        traj = Simulator(gaslib24_nominal, normalizer=Normalizer(1e6, 10.0)).simulate(U)
        assert traj.h.shape == (1441, build_grid(gaslib24_nominal).state_dim)
        assert np.isfinite(traj.h).all()
        assert np.all(traj.h[:, 0::2] > 0)

    def test_normalization_invariance(self, three_node_nominal, rng):
        u = boundary(three_node_nominal, BASE_3NODE)
        U = gen_scenario(u, "ramps", 60, seed=1)
        raw = Simulator(three_node_nominal).simulate(U)
        scaled = Simulator(three_node_nominal, normalizer=Normalizer(1e6, 10.0)).simulate(U)
        np.testing.assert_allclose(scaled.y, raw.y, rtol=1e-9)

    def test_propagate_matches_step(self, three_node_nominal):
        nz = Normalizer(1e6, 10.0)
        system = build_system(build_grid(three_node_nominal), nz.theta(network_theta(three_node_nominal)))
        U = nz.controls(three_node_nominal, gen_scenario(boundary(three_node_nominal, BASE_3NODE), "steps", 20, 0))
        h0, _ = fixed_point(system, U[0])
        H, P = propagate(system, h0, U)
        h = h0
        for t in range(20):
            h, pn = step(system, h, U[t])
            np.testing.assert_allclose(H[t + 1], h, rtol=1e-12, atol=1e-14)
            np.testing.assert_allclose(P[t], pn, rtol=1e-12, atol=1e-14)
