"""Reference transient simulator and steady-state profiles."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .assembly import SystemMatrices, build_system
from .network import ControlKind, GasNetwork, build_grid, network_theta
from .normalize import Normalizer

log = logging.getLogger(__name__)


class InfeasibleBoundaryError(ValueError):
    pass


class SimulationError(FloatingPointError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


@dataclass
class Trajectory:
    """Controls ``u[t-1]`` and outputs ``y[t-1]`` for ``t = 1..T``; states ``h[t]`` for ``t = 0..T``.

    Measured data carries only ``u`` and ``y``; simulated data also the
    hidden states and node pressures.
    """

    timestep_s: float
    u: np.ndarray
    y: np.ndarray
    h: np.ndarray | None = None
    node_pressure: np.ndarray | None = None

    def __post_init__(self):
        self.u = np.atleast_2d(np.asarray(self.u, dtype=float))
        self.y = np.atleast_2d(np.asarray(self.y, dtype=float))
        if self.u.shape[0] != self.y.shape[0]:
            raise ValueError("controls and outputs must have the same length")
        if self.h is not None and self.h.shape[0] != self.u.shape[0] + 1:
            raise ValueError("states must have one more row than controls")

    @property
    def T(self) -> int:
        return self.u.shape[0]


@dataclass(frozen=True)
class SteadyState:
    h: np.ndarray
    node_pressure: np.ndarray
    pipe_flow: np.ndarray
    injection: np.ndarray

    def pipe_mean_pressure(self, net: GasNetwork) -> np.ndarray:
        grid = build_grid(net)
        return np.array([self.h[2 * lo : 2 * hi : 2].mean() for lo, hi in grid.pipe_ranges])


def control_vector(net: GasNetwork, values: dict) -> np.ndarray:
    """Control vector from ``{node_or_compressor_id: value}``; compressors default to zero boost."""
    ids = net.control_ids()
    unknown = set(values) - set(ids)
    if unknown:
        raise KeyError(f"unknown control ids: {sorted(unknown)}")
    missing = [i for i in net.node_ids if i not in values]
    if missing:
        raise KeyError(f"no control value for nodes {missing}")
    return np.array([float(values.get(i, 0.0)) for i in ids])


def steady_state(net: GasNetwork, boundary, tol: float = 1e-10, max_iter: int = 5000) -> SteadyState:
    """Steady profile: constant flow per pipe, squared pressure linear along it.

    Node pressures are found by successive linearization of the squared
    pressure drop ``R f |f|`` until the mass balance holds to ``tol``
    relative to the injection scale.
    """
    u = np.asarray(boundary, dtype=float)
    if u.shape != (net.n_controls,):
        raise ValueError(f"boundary must have {net.n_controls} entries")
    n_nodes = net.n_nodes
    pos = {n.id: k for k, n in enumerate(net.nodes)}
    fixed = np.array([n.control is ControlKind.PRESSURE for n in net.nodes])
    inj = np.where(fixed, 0.0, u[:n_nodes])
    if np.any(u[:n_nodes][fixed] <= 0):
        raise InfeasibleBoundaryError("controlled pressures must be positive")
    boost = np.zeros(net.n_pipes)
    for k, c in enumerate(net.compressors):
        boost[net.pipe_index(c.pipe)] = u[n_nodes + k]

    c2 = net.sound_speed_mps**2
    R = np.array([p.friction * c2 * p.length_m / (p.area**2 * p.diameter_m) for p in net.pipelines])
    src = np.array([pos[p.from_node] for p in net.pipelines])
    dst = np.array([pos[p.to_node] for p in net.pipelines])

    p_ref = u[:n_nodes][fixed][0] ** 2
    pi = np.where(fixed, u[:n_nodes], np.sqrt(p_ref))
    scale = max(np.abs(inj).sum(), 1e-300)
    flow_scale = max(scale, 1.0)
    w = np.full(net.n_pipes, flow_scale)
    free = np.flatnonzero(~fixed)
    delta = np.zeros(n_nodes)  # squared pressure relative to p_ref
    delta[fixed] = u[:n_nodes][fixed] ** 2 - p_ref

    def flows(delta, pi):
        start = delta[src] + p_ref + np.where(boost != 0, 2 * boost * pi[src] + boost**2, 0.0)
        drop = start - (delta[dst] + p_ref)
        return np.sign(drop) * np.sqrt(np.abs(drop) / R), start

    for it in range(max_iter):
        g = 1.0 / (R * np.maximum(w, 1e-12 * flow_scale))
        kappa = np.where(boost != 0, 2 * boost * pi[src] + boost**2, 0.0)
        # mass balance at free nodes: sum_out f - sum_in f = inj, f = g (d_src + kappa - d_dst)
        L = np.zeros((n_nodes, n_nodes))
        rhs = inj.copy()
        for l in range(net.n_pipes):
            s, t = src[l], dst[l]
            L[s, s] += g[l]
            L[s, t] -= g[l]
            L[t, t] += g[l]
            L[t, s] -= g[l]
            rhs[s] -= g[l] * kappa[l]
            rhs[t] += g[l] * kappa[l]
        if free.size:
            rhs_free = rhs[free] - L[np.ix_(free, np.flatnonzero(fixed))] @ delta[fixed]
            target = np.linalg.solve(L[np.ix_(free, free)], rhs_free)
            # backtrack towards the previous iterate while squared pressures go negative
            for _ in range(60):
                trial = delta.copy()
                trial[free] = target
                if np.all(trial + p_ref > 0):
                    break
                target = 0.5 * (target + delta[free])
            delta = trial
        if np.any(delta + p_ref <= 0):
            bad = [net.nodes[k].id for k in np.flatnonzero(delta + p_ref <= 0)]
            raise InfeasibleBoundaryError(f"negative squared pressure at nodes {bad}")
        pi = np.sqrt(delta + p_ref)
        f, _ = flows(delta, pi)
        balance = np.zeros(n_nodes)
        np.add.at(balance, src, f)
        np.add.at(balance, dst, -f)
        resid = np.abs(balance - inj)[free].max() if free.size else 0.0
        if resid <= tol * flow_scale and np.allclose(np.abs(f), w, rtol=1e-8, atol=tol * flow_scale):
            break
        w = 0.5 * (np.abs(f) + w) if it > 2 else np.maximum(np.abs(f), 1e-12 * flow_scale)
    else:
        raise InfeasibleBoundaryError(f"steady state did not converge (mass residual {resid:.3e})")

    f, start = flows(delta, pi)
    grid = build_grid(net)
    h = np.zeros(grid.state_dim)
    for l, (p, (lo, hi)) in enumerate(zip(net.pipelines, grid.pipe_ranges)):
        x = np.arange(p.n_points) * p.dx
        sq = start[l] - p.friction * c2 * f[l] * abs(f[l]) / (p.area**2 * p.diameter_m) * x
        if np.any(sq <= 0):
            raise InfeasibleBoundaryError(f"pipeline {p.id!r}: squared pressure becomes non-positive")
        h[2 * lo : 2 * hi : 2] = np.sqrt(sq)
        h[2 * lo + 1 : 2 * hi : 2] = f[l]
    injection = np.zeros(n_nodes)
    np.add.at(injection, src, f)
    np.add.at(injection, dst, -f)
    return SteadyState(h=h, node_pressure=pi, pipe_flow=f, injection=injection)


def nominal_network(net: GasNetwork, boundary) -> GasNetwork:
    """``net`` with base velocities taken from its steady state at ``boundary``."""
    from .network import with_base_velocities

    ss = steady_state(net, boundary)
    return with_base_velocities(net, ss.pipe_flow, ss.pipe_mean_pressure(net))


def fixed_point(system: SystemMatrices, u) -> tuple[np.ndarray, np.ndarray]:
    """Discrete steady state: ``h`` with ``h = J1 S h + J2 u`` (normalized units)."""
    lay = system.layout
    E = sp.csr_matrix(
        (np.ones(system.S.nnz), (system.S.nonzero()[0], system.S.nonzero()[1])),
        shape=(lay.size, lay.size),
    )
    rhs = np.zeros(lay.size)
    rhs[lay.u_rows] = np.asarray(u, dtype=float)
    x = sp.linalg.spsolve((system.K - E).tocsc(), rhs)
    return x[: lay.n_h], x[lay.n_h :]


def step(system: SystemMatrices, h_prev, u, index=None) -> tuple[np.ndarray, np.ndarray]:
    """One implicit step in normalized units; returns ``(h_t, node_pressure_t)``."""
    s = system.S @ np.asarray(h_prev, dtype=float)
    u = np.asarray(u, dtype=float)
    h = system.J1 @ s + system.J2 @ u
    pn = system.J3 @ s + system.J4 @ u
    if not (np.all(np.isfinite(h)) and np.all(np.isfinite(pn))):
        raise SimulationError(f"non-finite state at step {index}", step=index)
    return h, pn


def direct_step(system: SystemMatrices, h_prev, u) -> np.ndarray:
    """Reference step by a sparse solve of the full system."""
    lay = system.layout
    rhs = np.zeros(lay.size)
    rhs[: lay.n_dyn] = system.S @ np.asarray(h_prev, dtype=float)
    rhs[lay.u_rows] = u
    return sp.linalg.spsolve(system.K.tocsc(), rhs)


def propagate(system: SystemMatrices, h0, U) -> tuple[np.ndarray, np.ndarray]:
    """Chain of steps (normalized): states ``(T+1, n_h)`` and node pressures ``(T, N)``."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    T = U.shape[0]
    A, NA = system.A, system.node_A
    Bu = U @ system.J2.T
    Du = U @ system.J4.T
    H = np.empty((T + 1, system.layout.n_h))
    P = np.empty((T, system.layout.n_nodes))
    H[0] = h0
    for t in range(T):
        H[t + 1] = A @ H[t] + Bu[t]
        P[t] = NA @ H[t] + Du[t]
        if not np.all(np.isfinite(H[t + 1])):
            raise SimulationError(f"non-finite state at step {t + 1}", step=t + 1)
    return H, P


class Simulator:
    """Implicit-upwind model of ``net`` at parameters ``theta`` (physical units).

    Internally everything runs on normalized quantities; inputs and outputs
    of the public methods are physical.
    """

    def __init__(self, net: GasNetwork, theta=None, normalizer: Normalizer | None = None):
        self.net = net
        self.grid = build_grid(net)
        self.theta = network_theta(net) if theta is None else np.asarray(theta, dtype=float)
        self.normalizer = normalizer or Normalizer()
        self.system = build_system(self.grid, self.normalizer.theta(self.theta))

    def fixed_point(self, u) -> np.ndarray:
        nz = self.normalizer
        h, _ = fixed_point(self.system, nz.controls(self.net, u))
        return nz.state_physical(h)

    def outputs(self, h) -> np.ndarray:
        return np.asarray(self.system.H @ np.asarray(h).T).T

    def simulate(self, U, h0=None) -> Trajectory:
        U = np.asarray(U, dtype=float).reshape(-1, self.net.n_controls)
        nz = self.normalizer
        if h0 is None:
            h0 = self.fixed_point(U[0]) if len(U) else None
        if h0 is None:
            raise ValueError("h0 required for an empty control sequence")
        Hn, Pn = propagate(self.system, nz.state(h0), nz.controls(self.net, U))
        h = nz.state_physical(Hn)
        if np.any(h[:, 0::2] <= 0):
            log.warning("simulated pressures became non-positive")
        flows = h[:, 1::2]
        if np.any(flows < 0):
            log.debug("flow reversal in %d cells", int((flows < 0).sum()))
        y = self.outputs(h[1:]) if len(U) else np.zeros((0, self.net.n_nodes))
        return Trajectory(self.net.timestep_s, U, y, h=h, node_pressure=nz.node_pressure_physical(Pn))


def default_normalizer(net: GasNetwork, U) -> Normalizer:
    return Normalizer.from_data(net, U)


def simulate(net: GasNetwork, theta, U, h0=None, normalizer: Normalizer | None = None) -> Trajectory:
    U = np.asarray(U, dtype=float).reshape(-1, net.n_controls)
    sim = Simulator(net, theta, normalizer or default_normalizer(net, U))
    return sim.simulate(U, h0)
