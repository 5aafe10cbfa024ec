"""Parameter files and the dispatch-facing state-space export."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .assembly import SystemMatrices
from .ingest import FormatError
from .network import GasNetwork, build_grid, friction_estimates
from .normalize import Normalizer

log = logging.getLogger(__name__)

_COEFFS = ("a", "b", "c", "d")


# ---------------------------------------------------------------- parameters

def params_to_dict(net: GasNetwork, theta, meta: dict | None = None, initial_states=None) -> dict:
    """Per-pipe coefficients with both friction back-solutions and their gap.

    ``b`` and ``c`` both contain the friction factor; the two estimates use
    the pipe's nominal geometry and base velocity, so they agree only when
    the coefficients are mutually consistent.
    """
    theta = np.asarray(theta, dtype=float).reshape(-1, 4)
    if theta.shape[0] != net.n_pipes:
        raise ValueError(f"theta has {theta.shape[0]} pipes, network has {net.n_pipes}")
    out = {}
    for p, t in zip(net.pipelines, theta):
        entry = {k: float(v) for k, v in zip(_COEFFS, t)}
        if p.base_velocity_mps is not None:
            fb, fc = friction_estimates(p, t, net.sound_speed_mps, net.timestep_s)
            entry.update(friction_from_b=fb, friction_from_c=fc, discrepancy=abs(fb - fc))
        out[p.id] = entry
    doc = {"theta": out, "meta": dict(meta or {})}
    if initial_states is not None:
        doc["initial_states"] = np.asarray(initial_states, dtype=float).tolist()
    return doc


def save_params(net: GasNetwork, theta, path, meta=None, initial_states=None) -> None:
    doc = params_to_dict(net, theta, meta, initial_states)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def theta_from_dict(net: GasNetwork, doc: dict) -> np.ndarray:
    try:
        entries = doc["theta"]
    except (KeyError, TypeError):
        raise FormatError("params: missing 'theta'") from None
    extra = set(entries) - {p.id for p in net.pipelines}
    if extra:
        raise FormatError(f"params: unknown pipes {sorted(extra)}")
    rows = []
    for p in net.pipelines:
        if p.id not in entries:
            raise FormatError(f"params: no coefficients for pipe {p.id!r}")
        try:
            rows.append([float(entries[p.id][k]) for k in _COEFFS])
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"params: pipe {p.id!r} needs numeric a, b, c, d") from None
    return np.array(rows).ravel()


def load_params(net: GasNetwork, path) -> tuple[np.ndarray, dict]:
    """``(theta, document)`` from a params JSON file."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    try:
        return theta_from_dict(net, doc), doc
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


# ---------------------------------------------------------------- state space

def state_labels(net: GasNetwork) -> list[str]:
    grid = build_grid(net)
    labels = [""] * grid.state_dim
    for p, (lo, hi) in zip(net.pipelines, grid.pipe_ranges):
        for k, i in enumerate(range(lo, hi)):
            labels[2 * i] = f"{p.id}[{k}].pressure"
            labels[2 * i + 1] = f"{p.id}[{k}].flow"
    return labels


@dataclass(frozen=True)
class StateSpace:
    """``h_t = A h_{t-1} + B u_t``, ``y_t = C h_t``, ``pi_t = J3S h_{t-1} + J4 u_t`` (normalized)."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    J3S: np.ndarray
    J4: np.ndarray
    normalizer: Normalizer
    ordering: dict
    meta: dict

    @property
    def spectral_radius(self) -> float:
        return float(np.abs(np.linalg.eigvals(self.A)).max()) if self.A.size else 0.0

    def run(self, h0, U) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """States ``(T+1, n_h)``, outputs ``(T, n_y)`` and node pressures ``(T, N)``."""
        U = np.atleast_2d(np.asarray(U, dtype=float))
        H = np.empty((U.shape[0] + 1, self.A.shape[0]))
        P = np.empty((U.shape[0], self.J3S.shape[0]))
        H[0] = h0
        for t in range(U.shape[0]):
            P[t] = self.J3S @ H[t] + self.J4 @ U[t]
            H[t + 1] = self.A @ H[t] + self.B @ U[t]
        return H, H[1:] @ self.C.T, P

    def to_dict(self) -> dict:
        return {
            "A": self.A.tolist(), "B": self.B.tolist(), "C": self.C.tolist(),
            "J3S": self.J3S.tolist(), "J4": self.J4.tolist(),
            "ordering": self.ordering,
            "bases": self.normalizer.to_dict(),
            "meta": dict(self.meta, spectral_radius=self.spectral_radius),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "StateSpace":
        need = {"A", "B", "C", "J3S", "J4", "ordering", "bases"}
        missing = need - set(doc)
        if missing:
            raise FormatError(f"statespace: missing keys {sorted(missing)}")
        mats = {k: np.asarray(doc[k], dtype=float) for k in ("A", "B", "C", "J3S", "J4")}
        n_h = mats["A"].shape[0] if mats["A"].ndim == 2 else -1
        ok = (
            mats["A"].shape == (n_h, n_h)
            and mats["B"].shape[0] == n_h
            and mats["C"].shape[1:] == (n_h,)
            and mats["J3S"].shape[1:] == (n_h,)
            and mats["J4"].shape == (mats["J3S"].shape[0], mats["B"].shape[1])
            and len(doc["ordering"].get("state", [])) == n_h
        )
        if not ok:
            raise FormatError("statespace: inconsistent matrix dimensions")
        return cls(normalizer=Normalizer(**doc["bases"]), ordering=doc["ordering"],
                   meta=doc.get("meta", {}), **mats)


def export_statespace(net: GasNetwork, system: SystemMatrices, normalizer: Normalizer,
                      meta: dict | None = None) -> StateSpace:
    """Dense read-out of the current snapshot; warns when the spectral radius exceeds one."""
    ordering = {
        "state": state_labels(net),
        "controls": [f"{i}.{k}" for i, k in zip(net.control_ids(), net.control_kinds())],
        "outputs": [f"{i}.{k}" for i, k in zip(net.node_ids, net.output_kinds())],
        "node_pressure": list(net.node_ids),
        "units": "normalized by bases",
    }
    theta = normalizer.theta_physical(system.theta).reshape(-1, 4)
    meta = dict(meta or {})
    meta["theta"] = {p.id: dict(zip(_COEFFS, map(float, t))) for p, t in zip(net.pipelines, theta)}
    ss = StateSpace(
        A=np.asarray(system.A), B=np.asarray(system.B), C=system.H.toarray(),
        J3S=np.asarray(system.node_A), J4=np.asarray(system.J4),
        normalizer=normalizer, ordering=ordering, meta=meta,
    )
    rho = ss.spectral_radius
    if rho > 1.0:
        log.warning("exported A has spectral radius %.6f > 1", rho)
    return ss


def save_statespace(ss: StateSpace, path) -> None:
    Path(path).write_text(json.dumps(ss.to_dict()) + "\n")


def load_statespace(path) -> StateSpace:
    path = Path(path)
    try:
        return StateSpace.from_dict(json.loads(path.read_text()))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line {exc.lineno}: {exc.msg}") from None
