"""Gas network topology, computation grid and per-pipeline coefficients."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

DEFAULT_SOUND_SPEED = 340.0
DEFAULT_TIMESTEP = 60.0
DEFAULT_SEGMENTS = 10


class ControlKind(str, Enum):
    PRESSURE = "pressure"
    FLOW = "flow"


class NetworkError(ValueError):
    """Raised when a network is structurally unusable."""


@dataclass(frozen=True)
class TerminalNode:
    id: str
    control: ControlKind


@dataclass(frozen=True)
class Pipeline:
    """A pipe from ``from_node`` to ``to_node``; positive flow runs from -> to.

    ``base_velocity_mps`` is the Taylor expansion point of the friction term.
    It may be left as ``None`` and filled in later from a nominal operating
    point with :func:`with_base_velocities`.
    """

    id: str
    from_node: str
    to_node: str
    length_m: float
    diameter_m: float
    friction: float
    segments: int = DEFAULT_SEGMENTS
    base_velocity_mps: float | None = None

    @property
    def area(self) -> float:
        return math.pi * (self.diameter_m / 2.0) ** 2

    @property
    def dx(self) -> float:
        return self.length_m / self.segments

    @property
    def n_points(self) -> int:
        return self.segments + 1


@dataclass(frozen=True)
class Compressor:
    """Pressure boost at terminal node ``node`` discharging into ``pipe``.

    The discharge pipe must start at ``node``; its first computation node sits
    ``boost`` Pa above the node pressure instead of being tied to it.
    """

    id: str
    node: str
    pipe: str


@dataclass(frozen=True)
class GasNetwork:
    nodes: tuple[TerminalNode, ...]
    pipelines: tuple[Pipeline, ...]
    compressors: tuple[Compressor, ...] = ()
    sound_speed_mps: float = DEFAULT_SOUND_SPEED
    timestep_s: float = DEFAULT_TIMESTEP

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "pipelines", tuple(self.pipelines))
        object.__setattr__(self, "compressors", tuple(self.compressors))

    @property
    def node_ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_pipes(self) -> int:
        return len(self.pipelines)

    @property
    def n_controls(self) -> int:
        return len(self.nodes) + len(self.compressors)

    def node_index(self, node_id: str) -> int:
        for k, n in enumerate(self.nodes):
            if n.id == node_id:
                return k
        raise KeyError(node_id)

    def pipe_index(self, pipe_id: str) -> int:
        for k, p in enumerate(self.pipelines):
            if p.id == pipe_id:
                return k
        raise KeyError(pipe_id)

    def control_ids(self) -> list[str]:
        return self.node_ids + [c.id for c in self.compressors]

    def control_kinds(self) -> list[str]:
        """Physical quantity of each control entry: ``"pressure"`` or ``"flow"``."""
        kinds = [n.control.value for n in self.nodes]
        return kinds + ["pressure"] * len(self.compressors)

    def output_kinds(self) -> list[str]:
        """Measured quantity per node: injection flow at pressure nodes, pressure otherwise."""
        return ["flow" if n.control is ControlKind.PRESSURE else "pressure" for n in self.nodes]


def validate_network(net: GasNetwork) -> list[str]:
    """Return a list of human readable invariant violations (empty if valid)."""
    problems: list[str] = []
    ids = [n.id for n in net.nodes]
    if len(set(ids)) != len(ids):
        problems.append("duplicate terminal node ids")
    pipe_ids = [p.id for p in net.pipelines]
    if len(set(pipe_ids)) != len(pipe_ids):
        problems.append("duplicate pipeline ids")
    if not net.nodes:
        problems.append("network has no terminal nodes")
    if not net.pipelines:
        problems.append("network has no pipelines")
    if not net.sound_speed_mps > 0:
        problems.append(f"sound speed must be > 0, got {net.sound_speed_mps}")
    if not net.timestep_s > 0:
        problems.append(f"time step must be > 0, got {net.timestep_s}")

    known = set(ids)
    for p in net.pipelines:
        for end in (p.from_node, p.to_node):
            if end not in known:
                problems.append(f"pipeline {p.id!r} references missing node {end!r}")
        if p.from_node == p.to_node:
            problems.append(f"pipeline {p.id!r} is a self loop")
        if not p.length_m > 0:
            problems.append(f"pipeline {p.id!r}: length must be > 0")
        if not p.diameter_m > 0:
            problems.append(f"pipeline {p.id!r}: diameter must be > 0")
        if not p.friction > 0:
            problems.append(f"pipeline {p.id!r}: friction must be > 0")
        if not (isinstance(p.segments, (int, np.integer)) and p.segments >= 1):
            problems.append(f"pipeline {p.id!r}: segments must be an integer >= 1")
        if p.base_velocity_mps is not None and not p.base_velocity_mps > 0:
            problems.append(f"pipeline {p.id!r}: base velocity must be > 0")

    discharge: dict[str, str] = {}
    comp_ids = [c.id for c in net.compressors]
    if len(set(comp_ids)) != len(comp_ids):
        problems.append("duplicate compressor ids")
    pipes_by_id = {p.id: p for p in net.pipelines}
    for c in net.compressors:
        if c.node not in known:
            problems.append(f"compressor {c.id!r} references missing node {c.node!r}")
            continue
        pipe = pipes_by_id.get(c.pipe)
        if pipe is None:
            problems.append(f"compressor {c.id!r} references missing pipeline {c.pipe!r}")
            continue
        if pipe.from_node != c.node:
            problems.append(f"compressor {c.id!r}: discharge pipeline {c.pipe!r} does not start at {c.node!r}")
        if c.pipe in discharge:
            problems.append(f"pipeline {c.pipe!r} is the discharge of two compressors")
        discharge[c.pipe] = c.id

    if problems:
        return problems

    # flow-controlled nodes need a tied computation node to read their pressure from
    for n in net.nodes:
        if n.control is ControlKind.FLOW:
            tied = [p for p in net.pipelines if p.to_node == n.id] + [
                p for p in net.pipelines if p.from_node == n.id and p.id not in discharge
            ]
            if not tied:
                problems.append(f"flow-controlled node {n.id!r} has no pipeline tied to its pressure")

    adj: dict[str, set[str]] = {i: set() for i in ids}
    for p in net.pipelines:
        adj[p.from_node].add(p.to_node)
        adj[p.to_node].add(p.from_node)
    seen: set[str] = set()
    components = []
    for start in ids:
        if start in seen:
            continue
        comp = {start}
        queue = deque([start])
        while queue:
            cur = queue.popleft()
            for nxt in adj[cur]:
                if nxt not in comp:
                    comp.add(nxt)
                    queue.append(nxt)
        seen |= comp
        components.append(comp)
    if len(components) > 1:
        problems.append(f"network is not connected ({len(components)} components)")
    kinds = {n.id: n.control for n in net.nodes}
    for comp in components:
        if not any(kinds[i] is ControlKind.PRESSURE for i in comp):
            problems.append("no pressure reference in component containing " + ", ".join(sorted(comp)))
    return problems


def check_network(net: GasNetwork) -> GasNetwork:
    problems = validate_network(net)
    if problems:
        raise NetworkError("; ".join(problems))
    return net


@dataclass(frozen=True)
class ComputationGrid:
    """Global numbering of computation nodes and terminal-node incidence.

    Computation nodes are numbered pipeline by pipeline in declaration order,
    upstream to downstream. State vectors interleave ``(pressure, flow)`` per
    computation node, so node ``i`` occupies entries ``2*i`` and ``2*i + 1``.
    """

    pipe_ranges: tuple[tuple[int, int], ...]
    node_members: tuple[tuple[int, ...], ...]  # S_n
    node_inflow: tuple[tuple[int, ...], ...]  # S_n^+
    node_outflow: tuple[tuple[int, ...], ...]  # S_n^-
    node_tied: tuple[tuple[int, ...], ...]  # members whose pressure equals the node pressure
    compressor_links: tuple[tuple[int, int], ...]  # (station node index, outlet computation node)
    node_controls: tuple[ControlKind, ...]
    n_comp: int = field(default=0)

    @property
    def state_dim(self) -> int:
        return 2 * self.n_comp

    @property
    def n_nodes(self) -> int:
        return len(self.node_members)

    @property
    def n_compressors(self) -> int:
        return len(self.compressor_links)

    @staticmethod
    def pressure_index(i: int) -> int:
        return 2 * i

    @staticmethod
    def flow_index(i: int) -> int:
        return 2 * i + 1


def build_grid(net: GasNetwork) -> ComputationGrid:
    check_network(net)
    ranges = []
    start = 0
    for p in net.pipelines:
        ranges.append((start, start + p.n_points))
        start += p.n_points
    members: list[list[int]] = [[] for _ in net.nodes]
    inflow: list[list[int]] = [[] for _ in net.nodes]
    outflow: list[list[int]] = [[] for _ in net.nodes]
    pos = {n.id: k for k, n in enumerate(net.nodes)}
    for p, (lo, hi) in zip(net.pipelines, ranges):
        i_from, i_to = pos[p.from_node], pos[p.to_node]
        members[i_from].append(lo)
        outflow[i_from].append(lo)
        members[i_to].append(hi - 1)
        inflow[i_to].append(hi - 1)
    pipe_pos = {p.id: k for k, p in enumerate(net.pipelines)}
    links = []
    outlets = set()
    for c in net.compressors:
        outlet = ranges[pipe_pos[c.pipe]][0]
        links.append((pos[c.node], outlet))
        outlets.add(outlet)
    tied = [[i for i in sorted(m) if i not in outlets] for m in members]
    return ComputationGrid(
        pipe_ranges=tuple(ranges),
        node_members=tuple(tuple(sorted(m)) for m in members),
        node_inflow=tuple(tuple(sorted(m)) for m in inflow),
        node_outflow=tuple(tuple(sorted(m)) for m in outflow),
        node_tied=tuple(tuple(t) for t in tied),
        compressor_links=tuple(links),
        node_controls=tuple(n.control for n in net.nodes),
        n_comp=start,
    )


@dataclass(frozen=True)
class PipeCoefficients:
    a: float
    b: float
    c: float
    d: float

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c, self.d])


def derive_coefficients(p: Pipeline, u: float, dt: float) -> PipeCoefficients:
    """Implicit-upwind coefficients of one pipeline."""
    if not p.diameter_m > 0 or not p.dx > 0 or not dt > 0:
        raise ValueError(f"pipeline {p.id!r}: diameter, segment length and time step must be positive")
    if p.base_velocity_mps is None:
        raise ValueError(f"pipeline {p.id!r} has no base velocity; see with_base_velocities()")
    area, dx, D, lam, vb = p.area, p.dx, p.diameter_m, p.friction, p.base_velocity_mps
    a = u**2 * dt / (area * dx)
    b = 1.0 + lam * vb * dt / D
    d = -area * dt / dx
    c = area * dt / dx - lam * area * vb**2 * dt / (2.0 * u**2 * D)
    return PipeCoefficients(a, b, c, d)


def network_theta(net: GasNetwork) -> np.ndarray:
    """Parameter vector ``[a_1, b_1, c_1, d_1, a_2, ...]`` in pipeline order."""
    return np.concatenate(
        [derive_coefficients(p, net.sound_speed_mps, net.timestep_s).as_array() for p in net.pipelines]
    )


def base_velocity(flow: float, pressure: float, area: float, u: float) -> float:
    return abs(flow) * u**2 / (area * pressure)


def with_base_velocities(net: GasNetwork, flows, pressures, floor: float = 0.01) -> GasNetwork:
    """Set every pipeline's base velocity from a nominal flow and mean pressure.

    ``floor`` (m/s) keeps the friction term alive on pipes idle at the nominal
    point.
    """
    u = net.sound_speed_mps
    pipes = []
    for p, f, pr in zip(net.pipelines, flows, pressures):
        vb = max(base_velocity(f, pr, p.area, u), floor)
        pipes.append(replace(p, base_velocity_mps=vb))
    return replace(net, pipelines=tuple(pipes))


def implied_pipeline(p: Pipeline, coeffs, u: float, dt: float) -> Pipeline:
    """Physical pipeline reproducing ``coeffs = (a, b, c, d)`` exactly.

    The four coefficients determine area, segment length, friction and base
    velocity once sound speed and time step are fixed.
    """
    a, b, c, d = (float(x) for x in coeffs)
    if not (a > 0 and d < 0 and b > 1 and c + d < 0):
        raise ValueError(f"pipeline {p.id!r}: coefficients {coeffs} have no physical interpretation")
    dx = u * dt / math.sqrt(-a * d)
    area = -d * dx / dt
    diameter = 2.0 * math.sqrt(area / math.pi)
    vb = -2.0 * u**2 * (c + d) / ((b - 1.0) * area)
    lam = (b - 1.0) * diameter / (vb * dt)
    return replace(
        p, length_m=dx * p.segments, diameter_m=diameter, friction=lam, base_velocity_mps=vb
    )


def implied_network(net: GasNetwork, theta) -> GasNetwork:
    theta = np.asarray(theta, dtype=float).reshape(-1, 4)
    u, dt = net.sound_speed_mps, net.timestep_s
    pipes = tuple(implied_pipeline(p, t, u, dt) for p, t in zip(net.pipelines, theta))
    return replace(net, pipelines=pipes)


def friction_estimates(p: Pipeline, coeffs, u: float, dt: float) -> tuple[float, float]:
    """Friction back-solved from ``b`` and from ``c`` using the pipe's own geometry."""
    _, b, c, _ = (float(x) for x in coeffs)
    D, area, dx, vb = p.diameter_m, p.area, p.dx, p.base_velocity_mps
    from_b = (b - 1.0) * D / (vb * dt)
    from_c = (area * dt / dx - c) * 2.0 * u**2 * D / (area * vb**2 * dt)
    return from_b, from_c
