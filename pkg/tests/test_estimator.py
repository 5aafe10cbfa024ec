import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from conftest import BASE_3NODE, boundary
from gaspirn.estimator import PirnRegressor
from gaspirn.ingest import gen_scenario
from gaspirn.normalize import Normalizer
from gaspirn.simulator import Simulator


@pytest.fixture(scope="module")
def sequences(three_node_nominal):
    base = boundary(three_node_nominal, BASE_3NODE)
    sim = Simulator(three_node_nominal, normalizer=Normalizer(1e6, 10.0))
    trajs = [sim.simulate(gen_scenario(base, k, 90, seed=s)) for s, k in enumerate(["steps", "ramps", "smooth"])]
    return np.stack([t.u for t in trajs]), np.stack([t.y for t in trajs])


def test_params_and_clone(three_node_nominal):
    est = PirnRegressor(three_node_nominal, epochs=3, lr_theta=1e-2)
    params = est.get_params()
    assert params["epochs"] == 3 and params["lr_theta"] == 1e-2
    twin = clone(est)
    assert twin.get_params()["epochs"] == 3 and twin is not est
    est.set_params(epochs=7)
    assert est.epochs == 7


def test_unfitted_predict(three_node_nominal, sequences):
    with pytest.raises(NotFittedError):
        PirnRegressor(three_node_nominal).predict(sequences[0])


def test_fit_predict_score(three_node_nominal, sequences, theta_3node):
    X, y = sequences
    est = PirnRegressor(three_node_nominal, epochs=2, lr_theta=1e-4, lr_state=1e-4, batch_size=3, tbptt_window=30)
    assert est.fit(X, y, truth=theta_3node) is est
    assert est.theta_.shape == theta_3node.shape and est.n_features_in_ == 3
    assert est.mape_ < 0.05
    pred = est.predict(X)
    assert pred.shape == y.shape
    assert est.score(X, y) > 0.9999


def test_single_sequence_is_promoted(three_node_nominal, sequences):
    X, y = sequences
    est = PirnRegressor(three_node_nominal, epochs=1, batch_size=1, tbptt_window=30).fit(X[0], y[0])
    assert est.predict(X[0]).shape == (1,) + y[0].shape


def test_shape_errors(three_node_nominal, sequences):
    X, y = sequences
    est = PirnRegressor(three_node_nominal, epochs=1)
    with pytest.raises(ValueError, match="n_controls|3"):
        est.fit(X[..., :2], y)
    with pytest.raises(ValueError, match="share"):
        est.fit(X, y[:2])


def test_extra_config_is_validated(three_node_nominal, sequences):
    X, y = sequences
    with pytest.raises(ValueError, match="unknown config keys"):
        PirnRegressor(three_node_nominal, config={"momentumz": 0.5}).fit(X, y)
