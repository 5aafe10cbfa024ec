import csv

import numpy as np
import pytest

from conftest import BASE_3NODE, boundary
from gaspirn.ingest import gen_scenario
from gaspirn.network import network_theta
from gaspirn.normalize import Normalizer
from gaspirn.pirn import GradientVector, forward
from gaspirn.simulator import Simulator
from gaspirn.training import (
    SchedulerConfig,
    TrainConfig,
    clip_gradients,
    make_coordinates,
    optimizer_basis,
    parameter_mape,
    perturb_parameters,
    scheduled_lr,
    train,
    warm_start,
    write_loss_curve,
)


@pytest.fixture(scope="module")
def dataset(three_node_nominal):
    base = boundary(three_node_nominal, BASE_3NODE)
    sim = Simulator(three_node_nominal, normalizer=Normalizer(1e6, 10.0))
    return [sim.simulate(gen_scenario(base, kind, 120, seed=s)) for s, kind in enumerate(["steps", "ramps", "smooth", "steps"])]


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.batch_size == 16 and cfg.scheduler.step_epochs == 4 and cfg.scheduler.gamma == 0.2
        assert cfg.reg_weight == 1e-4 and cfg.rms_decay == 0.99 and cfg.rms_eps == 1e-8

    def test_round_trip(self):
        cfg = TrainConfig(lr_theta=3e-3, scheduler=SchedulerConfig(10, 0.5))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            TrainConfig.from_dict({"learning_rate": 1.0})

    @pytest.mark.parametrize("field,value", [("lr_theta", 0.0), ("reg_weight", -1.0), ("clip_bound", 0.0),
                                             ("tbptt_window", 0), ("coordinates", "polar")])
    def test_invalid_values(self, field, value):
        with pytest.raises(ValueError, match=field):
            TrainConfig(**{field: value})


class TestSchedulerAndClipping:
    @pytest.mark.parametrize("epoch,expected", [(0, 1.0), (3, 1.0), (4, 0.2), (9, 0.04), (12, 0.008)])
    def test_step_schedule(self, epoch, expected):
        assert scheduled_lr(1.0, epoch, TrainConfig()) == pytest.approx(expected, rel=1e-15)

    def test_clip_within_bound(self):
        g = GradientVector(np.array([0.5, -0.2]), np.array([[0.1]]))
        out = clip_gradients(g, 1.0)
        np.testing.assert_array_equal(out.theta, g.theta)

    def test_clip_large_component(self):
        out = clip_gradients(GradientVector(np.array([10.0, -10.0]), np.array([[3.0]])), 1.0)
        np.testing.assert_array_equal(out.theta, [1.0, -1.0])
        np.testing.assert_array_equal(out.h0, [[1.0]])

    def test_clip_preserves_sign(self, rng):
        g = rng.standard_normal(50) * 5
        out = clip_gradients(GradientVector(g, np.zeros((1, 1))), 0.7)
        assert np.all(np.sign(out.theta) == np.sign(g))

    def test_clip_bound_positive(self):
        with pytest.raises(ValueError):
            clip_gradients(GradientVector(np.zeros(1), np.zeros(1)), 0.0)


class TestWarmStart:
    def test_zero_flow_profile(self, three_node_nominal):
        _, h0 = warm_start(three_node_nominal, network_theta(three_node_nominal),
                           boundary(three_node_nominal, {"1": 1.0e6}))
        assert np.all(h0[0::2] == 1.0e6) and np.all(h0[1::2] == 0.0)

    def test_discrete_profile_is_model_fixed_point(self, three_node_nominal):
        u = boundary(three_node_nominal, BASE_3NODE)
        theta = network_theta(three_node_nominal)
        _, h0 = warm_start(three_node_nominal, theta, u, profile="discrete")
        traj = Simulator(three_node_nominal, theta, Normalizer(1e6, 10.0)).simulate(np.tile(u, (5, 1)), h0=h0)
        np.testing.assert_allclose(traj.h[-1], h0, rtol=1e-9, atol=1e-9)

    def test_unknown_profile(self, three_node_nominal, theta_3node):
        with pytest.raises(ValueError):
            warm_start(three_node_nominal, theta_3node, boundary(three_node_nominal, BASE_3NODE), profile="flat")

    def test_beats_flat_start(self, three_node_nominal, dataset):
        nz = Normalizer(1e6, 10.0)
        net = three_node_nominal
        theta = network_theta(net)
        sim = Simulator(net, theta, nz)
        tr = dataset[0]
        _, h_warm = warm_start(net, theta, tr.u[0])
        h_flat = np.zeros_like(h_warm)
        h_flat[0::2] = tr.u[0, 0]

        def data_term(h0):
            out = forward(sim.system, nz.state(h0), nz.controls(net, tr.u)).outputs[0]
            return float(np.mean(np.sum((out - nz.outputs(net, tr.y)) ** 2, axis=1)))

        assert data_term(h_warm) * 10 <= data_term(h_flat)


class TestPerturbation:
    def test_direct_bounds(self, theta_3node, rng):
        out = perturb_parameters(theta_3node, 0.15, rng, mode="direct")
        ratio = out / theta_3node
        assert np.all(ratio >= 0.85) and np.all(ratio <= 1.15)

    def test_consistent_keeps_friction_sign(self, theta_3node, rng):
        out = perturb_parameters(theta_3node, 0.25, rng).reshape(-1, 4)
        assert np.all(out[:, 1] > 1.0)
        assert np.all(out[:, 2] + out[:, 3] < 0)
        ratio = out[:, [0, 3]] / theta_3node.reshape(-1, 4)[:, [0, 3]]
        assert np.all(np.abs(ratio - 1) <= 0.25)

    def test_unknown_mode(self, theta_3node, rng):
        with pytest.raises(ValueError):
            perturb_parameters(theta_3node, 0.1, rng, mode="other")

    def test_mape(self):
        assert parameter_mape([1.1, 1.8], [1.0, 2.0]) == pytest.approx(10.0)


class TestCoordinatesChoice:
    def test_basis_blocks(self, theta_3node):
        B = optimizer_basis(theta_3node, relative=False)
        np.testing.assert_array_equal(B[:4, :4], [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, -1], [0, 0, 0, 1]])

    def test_pipe_falls_back(self, caplog):
        bad = np.array([1.0, 1.0, 1.0, -1.0])
        coords = make_coordinates(bad, "pipe")
        np.testing.assert_allclose(coords.theta(coords.initial()), bad)
        assert "relative" in caplog.text


class TestTrain:
    def test_stationary_at_truth(self, three_node_nominal, dataset, theta_3node):
        # RMSprop jitter scales with the learning rate, so the optimum is held at a small one
        cfg = TrainConfig(epochs=20, lr_theta=1e-4, lr_state=1e-4, tbptt_window=60)
        res = train(three_node_nominal, dataset, theta_3node, cfg, truth=theta_3node)
        assert res.mape < 0.05
        assert len(res.curve) == 20 and len(res.epoch_data) == 20

    def test_reduces_data_term(self, three_node_nominal, dataset, theta_3node):
        # three outputs do not pin down all eight coefficients, so only the fit is checked here
        theta0 = perturb_parameters(theta_3node, 0.15, np.random.default_rng(2))
        cfg = TrainConfig(epochs=40, lr_theta=1e-2, lr_state=1e-2, reg_weight=0.0, tbptt_window=20,
                          scheduler=SchedulerConfig(20, 0.5))
        res = train(three_node_nominal, dataset, theta0, cfg, truth=theta_3node)
        assert res.epoch_data[-1] < 0.1 * res.epoch_data[0]
        assert len(res.curve) == 40

    def test_deterministic(self, three_node_nominal, dataset, theta_3node):
        theta0 = perturb_parameters(theta_3node, 0.1, np.random.default_rng(5))
        cfg = TrainConfig(epochs=3, batch_size=2, tbptt_window=30, seed=7)
        a = train(three_node_nominal, dataset, theta0, cfg)
        b = train(three_node_nominal, dataset, theta0, cfg)
        assert [r["data_term"] for r in a.curve] == [r["data_term"] for r in b.curve]
        np.testing.assert_array_equal(a.theta, b.theta)

    def test_window_longer_than_sequence(self, three_node_nominal, dataset, theta_3node):
        with pytest.raises(ValueError, match="tbptt_window"):
            train(three_node_nominal, dataset, theta_3node, TrainConfig(tbptt_window=500))

    def test_empty_dataset(self, three_node_nominal, theta_3node):
        with pytest.raises(ValueError, match="empty"):
            train(three_node_nominal, [], theta_3node)

    def test_loss_curve_file(self, three_node_nominal, dataset, theta_3node, tmp_path):
        res = train(three_node_nominal, dataset, theta_3node, TrainConfig(epochs=2, batch_size=2, tbptt_window=60),
                    truth=theta_3node)
        path = tmp_path / "curve.csv"
        write_loss_curve(res.curve, path)
        rows = list(csv.reader(path.open()))
        assert rows[0] == ["epoch", "batch", "data_term", "reg_term", "param_mape_if_truth_known"]
        assert len(rows) == 1 + 2 * 2
        assert float(rows[1][2]) == res.curve[0]["data_term"]
