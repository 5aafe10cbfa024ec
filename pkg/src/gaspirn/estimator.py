"""Estimator interface around the identification routine."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.metrics import r2_score
from sklearn.utils.validation import check_array, check_is_fitted

from .network import GasNetwork, network_theta
from .simulator import Simulator
from .training import TrainConfig, train


def _check_sequences(X, n_channels: int, name: str) -> np.ndarray:
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=float)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[2] != n_channels:
        raise ValueError(f"{name} must be (n_sequences, T, {n_channels}), got {X.shape}")
    return X


class PirnRegressor(BaseEstimator, RegressorMixin):
    """Identify pipeline coefficients from control sequences ``X`` and outputs ``y``.

    ``X`` is ``(n_sequences, T, n_controls)`` and ``y`` is
    ``(n_sequences, T, n_nodes)`` in physical units. ``network`` must carry
    base velocities (see ``nominal_network``). Training options not exposed
    as parameters go in ``config`` (a dict of ``TrainConfig`` fields).
    """

    def __init__(self, network: GasNetwork, theta0=None, epochs: int = 20, lr_theta: float = 1e-3,
                 lr_state: float = 1e-3, batch_size: int = 16, tbptt_window: int = 60, seed: int = 0,
                 config: dict | None = None):
        self.network = network
        self.theta0 = theta0
        self.epochs = epochs
        self.lr_theta = lr_theta
        self.lr_state = lr_state
        self.batch_size = batch_size
        self.tbptt_window = tbptt_window
        self.seed = seed
        self.config = config

    def _config(self) -> TrainConfig:
        opts = dict(self.config or {})
        opts.update(epochs=self.epochs, lr_theta=self.lr_theta, lr_state=self.lr_state,
                    batch_size=self.batch_size, tbptt_window=self.tbptt_window, seed=self.seed)
        return TrainConfig.from_dict(opts)

    def fit(self, X, y, truth=None):
        from .simulator import Trajectory

        net = self.network
        X = _check_sequences(X, net.n_controls, "X")
        y = _check_sequences(y, net.n_nodes, "y")
        if X.shape[:2] != y.shape[:2]:
            raise ValueError("X and y must share the sequence and time axes")
        theta0 = network_theta(net) if self.theta0 is None else np.asarray(self.theta0, dtype=float)
        data = [Trajectory(net.timestep_s, u, yy) for u, yy in zip(X, y)]
        result = train(net, data, theta0, self._config(), truth=truth)
        self.theta_ = result.theta
        self.h0_ = result.h0
        self.normalizer_ = result.normalizer
        self.loss_curve_ = result.curve
        self.mape_ = result.mape
        self.n_features_in_ = net.n_controls
        return self

    def predict(self, X) -> np.ndarray:
        """Outputs of the identified model, each sequence started at its fixed point."""
        check_is_fitted(self, "theta_")
        X = _check_sequences(X, self.network.n_controls, "X")
        sim = Simulator(self.network, self.theta_, self.normalizer_)
        return np.stack([sim.simulate(u).y for u in X])

    def score(self, X, y, sample_weight=None) -> float:
        y = _check_sequences(y, self.network.n_nodes, "y")
        pred = self.predict(X)
        return float(r2_score(y.reshape(-1, y.shape[-1]), pred.reshape(-1, y.shape[-1]),
                              sample_weight=sample_weight))
