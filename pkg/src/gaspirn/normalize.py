"""Scaling between physical units and the O(1) quantities used for training."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import GasNetwork


@dataclass(frozen=True)
class Normalizer:
    """Pressures are divided by ``pressure_base`` (Pa), flows by ``flow_base`` (kg/s).

    Parameters rescale so the normalized matrix reproduces the normalized
    dynamics exactly: ``a`` by flow/pressure, ``c`` and ``d`` by
    pressure/flow, ``b`` unchanged.
    """

    pressure_base: float = 1.0
    flow_base: float = 1.0

    def __post_init__(self):
        if not (self.pressure_base > 0 and self.flow_base > 0):
            raise ValueError("normalization bases must be positive")
        if not (np.isfinite(self.pressure_base) and np.isfinite(self.flow_base)):
            raise ValueError("normalization bases must be finite")

    @classmethod
    def from_data(cls, net: GasNetwork, controls, outputs=None) -> "Normalizer":
        """Bases at the largest absolute pressure and flow seen in the data."""
        kinds_u = np.array(net.control_kinds())
        kinds_y = np.array(net.output_kinds())
        pressures, flows = [0.0], [0.0]
        for arr, kinds in ((controls, kinds_u), (outputs, kinds_y)):
            if arr is None:
                continue
            seqs = arr if isinstance(arr, (list, tuple)) else [arr]
            for a in seqs:
                a = np.asarray(a, dtype=float).reshape(-1, len(kinds))
                if (kinds == "pressure").any():
                    pressures.append(float(np.abs(a[:, kinds == "pressure"]).max()))
                if (kinds == "flow").any():
                    flows.append(float(np.abs(a[:, kinds == "flow"]).max()))
        p, f = max(pressures), max(flows)
        return cls(p if p > 0 else 1.0, f if f > 0 else 1.0)

    def _by_kind(self, kinds) -> np.ndarray:
        return np.where(np.asarray(kinds) == "pressure", self.pressure_base, self.flow_base)

    def state_scale(self, n_comp: int) -> np.ndarray:
        return np.tile([self.pressure_base, self.flow_base], n_comp)

    def control_scale(self, net: GasNetwork) -> np.ndarray:
        return self._by_kind(net.control_kinds())

    def output_scale(self, net: GasNetwork) -> np.ndarray:
        return self._by_kind(net.output_kinds())

    def theta_scale(self, n_pipes: int) -> np.ndarray:
        r = self.flow_base / self.pressure_base
        return np.tile([r, 1.0, 1.0 / r, 1.0 / r], n_pipes)

    def theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return theta * self.theta_scale(theta.size // 4)

    def theta_physical(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return theta / self.theta_scale(theta.size // 4)

    def state(self, h, n_comp: int | None = None) -> np.ndarray:
        h = np.asarray(h, dtype=float)
        return h / self.state_scale(h.shape[-1] // 2)

    def state_physical(self, h) -> np.ndarray:
        h = np.asarray(h, dtype=float)
        return h * self.state_scale(h.shape[-1] // 2)

    def controls(self, net: GasNetwork, u) -> np.ndarray:
        return np.asarray(u, dtype=float) / self.control_scale(net)

    def controls_physical(self, net: GasNetwork, u) -> np.ndarray:
        return np.asarray(u, dtype=float) * self.control_scale(net)

    def outputs(self, net: GasNetwork, y) -> np.ndarray:
        return np.asarray(y, dtype=float) / self.output_scale(net)

    def outputs_physical(self, net: GasNetwork, y) -> np.ndarray:
        return np.asarray(y, dtype=float) * self.output_scale(net)

    def node_pressure(self, p) -> np.ndarray:
        return np.asarray(p, dtype=float) / self.pressure_base

    def node_pressure_physical(self, p) -> np.ndarray:
        return np.asarray(p, dtype=float) * self.pressure_base

    def to_dict(self) -> dict:
        return {"pressure_base": self.pressure_base, "flow_base": self.flow_base}
