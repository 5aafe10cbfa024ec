"""Network files, scenario generation, outlier injection and measurement CSVs."""
from __future__ import annotations

import csv
import json
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .network import (
    DEFAULT_SEGMENTS,
    Compressor,
    ControlKind,
    GasNetwork,
    NetworkError,
    Pipeline,
    TerminalNode,
    validate_network,
)
from .simulator import Trajectory


class FormatError(ValueError):
    """Malformed input file; the message names the offending location."""


# ---------------------------------------------------------------- native JSON

_NODE_KEYS = {"id", "control"}
_PIPE_KEYS = {"id", "from", "to", "length_m", "diameter_m", "friction", "segments"}
_PIPE_OPTIONAL = {"base_velocity_mps"}
_COMP_KEYS = {"id", "from", "to"}
_CONST_KEYS = {"sound_speed_mps", "timestep_s"}
_TOP_KEYS = {"nodes", "pipes", "compressors", "constants"}


def _check_keys(obj, required, optional, where):
    if not isinstance(obj, dict):
        raise FormatError(f"{where}: expected an object")
    missing = required - obj.keys()
    if missing:
        raise FormatError(f"{where}: missing keys {sorted(missing)}")
    unknown = obj.keys() - required - optional
    if unknown:
        raise FormatError(f"{where}: unknown keys {sorted(unknown)}")


def _number(value, where, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise FormatError(f"{where}: expected a number, got {value!r}")
    if integer and not (isinstance(value, int) or float(value).is_integer()):
        raise FormatError(f"{where}: expected an integer, got {value!r}")
    return int(value) if integer else float(value)


def network_from_dict(doc: dict) -> GasNetwork:
    _check_keys(doc, {"nodes", "pipes"}, _TOP_KEYS - {"nodes", "pipes"}, "network")
    nodes = []
    for k, n in enumerate(doc["nodes"]):
        _check_keys(n, _NODE_KEYS, set(), f"nodes[{k}]")
        try:
            control = ControlKind(n["control"])
        except ValueError:
            raise FormatError(f"node {n['id']!r}: control must be 'pressure' or 'flow'") from None
        nodes.append(TerminalNode(str(n["id"]), control))
    pipes = []
    for k, p in enumerate(doc["pipes"]):
        where = f"pipe {p.get('id', k)!r}" if isinstance(p, dict) else f"pipes[{k}]"
        _check_keys(p, _PIPE_KEYS, _PIPE_OPTIONAL, where)
        vb = p.get("base_velocity_mps")
        pipes.append(
            Pipeline(
                id=str(p["id"]),
                from_node=str(p["from"]),
                to_node=str(p["to"]),
                length_m=_number(p["length_m"], f"{where}.length_m"),
                diameter_m=_number(p["diameter_m"], f"{where}.diameter_m"),
                friction=_number(p["friction"], f"{where}.friction"),
                segments=_number(p["segments"], f"{where}.segments", integer=True),
                base_velocity_mps=None if vb is None else _number(vb, f"{where}.base_velocity_mps"),
            )
        )
    comps = []
    for k, c in enumerate(doc.get("compressors", [])):
        _check_keys(c, _COMP_KEYS, set(), f"compressors[{k}]")
        comps.append(Compressor(str(c["id"]), node=str(c["from"]), pipe=str(c["to"])))
    consts = doc.get("constants", {})
    _check_keys(consts, set(), _CONST_KEYS, "constants")
    net = GasNetwork(
        nodes=tuple(nodes),
        pipelines=tuple(pipes),
        compressors=tuple(comps),
        sound_speed_mps=_number(consts.get("sound_speed_mps", 340.0), "constants.sound_speed_mps"),
        timestep_s=_number(consts.get("timestep_s", 60.0), "constants.timestep_s"),
    )
    problems = validate_network(net)
    if problems:
        raise NetworkError("; ".join(problems))
    return net


def network_to_dict(net: GasNetwork) -> dict:
    pipes = []
    for p in net.pipelines:
        d = {"id": p.id, "from": p.from_node, "to": p.to_node, "length_m": p.length_m,
             "diameter_m": p.diameter_m, "friction": p.friction, "segments": p.segments}
        if p.base_velocity_mps is not None:
            d["base_velocity_mps"] = p.base_velocity_mps
        pipes.append(d)
    return {
        "nodes": [{"id": n.id, "control": n.control.value} for n in net.nodes],
        "pipes": pipes,
        "compressors": [{"id": c.id, "from": c.node, "to": c.pipe} for c in net.compressors],
        "constants": {"sound_speed_mps": net.sound_speed_mps, "timestep_s": net.timestep_s},
    }


def save_network(net: GasNetwork, path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net), indent=2) + "\n")


# ---------------------------------------------------------------- GasLib XML

_UNITS = {"m": 1.0, "km": 1000.0, "mm": 1e-3, "cm": 1e-2}
_UNSUPPORTED = {"valve", "controlValve", "shortPipe", "resistor"}


def nikuradse_friction(diameter_m: float, roughness_m: float) -> float:
    """Fully rough friction factor ``(2 log10(D/k) + 1.14)^-2``."""
    if not (diameter_m > 0 and roughness_m > 0):
        raise ValueError("diameter and roughness must be positive")
    return (2.0 * math.log10(diameter_m / roughness_m) + 1.14) ** -2


def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def _measure(elem, name, where) -> float:
    for child in elem:
        if _local(child.tag) == name:
            unit = child.get("unit", "m")
            if unit not in _UNITS:
                raise FormatError(f"{where}: unsupported unit {unit!r} for {name}")
            try:
                return float(child.get("value")) * _UNITS[unit]
            except (TypeError, ValueError):
                raise FormatError(f"{where}: {name} has no numeric value") from None
    raise FormatError(f"{where}: missing <{name}>")


def load_gaslib(path, segments: int = DEFAULT_SEGMENTS, drop_unsupported: bool = False,
                sound_speed_mps: float = 340.0, timestep_s: float = 60.0) -> GasNetwork:
    """Map the GasLib subset onto a network.

    Sources become pressure-controlled, sinks and innodes flow-controlled.
    A compressor station ``A -> B`` is placed at ``A`` discharging into the
    single pipe leaving ``B``; ``B`` must be an innode. Valves, control
    valves, short pipes and resistors are rejected unless
    ``drop_unsupported``, which merges their endpoints.
    """
    path = Path(path)
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as exc:
        raise FormatError(f"{path}: {exc}") from None
    kinds: dict[str, str] = {}
    order: list[str] = []
    pipes: list[dict] = []
    stations: list[tuple[str, str, str]] = []
    links: list[tuple[str, str, str, str]] = []
    for elem in root.iter():
        tag = _local(elem.tag)
        if tag in ("source", "sink", "innode"):
            nid = elem.get("id")
            if nid is None:
                raise FormatError(f"{path}: <{tag}> without id")
            kinds[nid] = tag
            order.append(nid)
        elif tag == "pipe":
            pid = elem.get("id")
            where = f"{path}: pipe {pid!r}"
            D = _measure(elem, "diameter", where)
            k = _measure(elem, "roughness", where)
            pipes.append({"id": pid, "from": elem.get("from"), "to": elem.get("to"),
                          "length": _measure(elem, "length", where), "diameter": D,
                          "friction": nikuradse_friction(D, k)})
        elif tag == "compressorStation":
            stations.append((elem.get("id"), elem.get("from"), elem.get("to")))
        elif tag in _UNSUPPORTED:
            links.append((tag, elem.get("id"), elem.get("from"), elem.get("to")))
    if links and not drop_unsupported:
        tag, lid, _, _ = links[0]
        raise FormatError(f"{path}: unsupported element <{tag} id={lid!r}> (use drop_unsupported)")

    parent = {n: n for n in order}

    def find(n):
        while parent[n] != n:
            parent[n] = parent[parent[n]]
            n = parent[n]
        return n

    for tag, lid, a, b in links:
        if a not in parent or b not in parent:
            raise FormatError(f"{path}: <{tag} id={lid!r}> references unknown nodes")
        ra, rb = find(a), find(b)
        if ra == rb:
            continue
        if kinds[rb] == "source" and kinds[ra] != "source":
            ra, rb = rb, ra
        elif kinds[ra] == "innode" and kinds[rb] != "innode":
            ra, rb = rb, ra
        if kinds[rb] != "innode" and kinds[ra] != "innode":
            raise FormatError(f"{path}: <{tag} id={lid!r}> joins two boundary nodes")
        parent[rb] = ra

    for p in pipes:
        for end in ("from", "to"):
            if p[end] not in parent:
                raise FormatError(f"{path}: pipe {p['id']!r} references unknown node {p[end]!r}")
        p["from"], p["to"] = find(p["from"]), find(p["to"])

    comps = []
    removed = set()
    for cid, a, b in stations:
        if a not in parent or b not in parent:
            raise FormatError(f"{path}: compressorStation {cid!r} references unknown nodes")
        a, b = find(a), find(b)
        if kinds[b] != "innode":
            raise FormatError(f"{path}: compressorStation {cid!r} must discharge into an innode")
        attached = [p for p in pipes if b in (p["from"], p["to"])]
        if len(attached) != 1:
            raise FormatError(f"{path}: compressorStation {cid!r}: outlet {b!r} needs exactly one pipe")
        p = attached[0]
        if p["to"] == b:
            p["from"], p["to"] = p["to"], p["from"]
        p["from"] = a
        removed.add(b)
        comps.append(Compressor(cid, node=a, pipe=p["id"]))

    nodes = []
    for nid in order:
        if find(nid) != nid or nid in removed:
            continue
        control = ControlKind.PRESSURE if kinds[nid] == "source" else ControlKind.FLOW
        nodes.append(TerminalNode(nid, control))
    net = GasNetwork(
        nodes=tuple(nodes),
        pipelines=tuple(
            Pipeline(p["id"], p["from"], p["to"], p["length"], p["diameter"], p["friction"], segments)
            for p in pipes
        ),
        compressors=tuple(comps),
        sound_speed_mps=sound_speed_mps,
        timestep_s=timestep_s,
    )
    problems = validate_network(net)
    if problems:
        raise NetworkError(f"{path}: " + "; ".join(problems))
    return net


def load_network(path, format: str = "native_json", **kwargs) -> GasNetwork:
    path = Path(path)
    if format == "native_json":
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: line {exc.lineno}: {exc.msg}") from None
        try:
            return network_from_dict(doc)
        except FormatError as exc:
            raise FormatError(f"{path}: {exc}") from None
    if format == "gaslib_xml":
        return load_gaslib(path, **kwargs)
    raise ValueError(f"unknown network format {format!r}")


# ---------------------------------------------------------------- scenarios

SCENARIO_KINDS = ("steps", "ramps", "smooth")


@dataclass(frozen=True)
class Scenario:
    kind: str
    horizon: int
    seed: int
    base_boundary: dict
    amplitude: float = 0.2

    @classmethod
    def from_dict(cls, doc: dict) -> "Scenario":
        _check_keys(doc, {"kind", "horizon", "seed", "base_boundary"}, {"amplitude"}, "scenario")
        if doc["kind"] not in SCENARIO_KINDS:
            raise FormatError(f"scenario: kind must be one of {SCENARIO_KINDS}")
        return cls(doc["kind"], _number(doc["horizon"], "scenario.horizon", integer=True),
                   _number(doc["seed"], "scenario.seed", integer=True),
                   {str(k): float(v) for k, v in doc["base_boundary"].items()},
                   _number(doc.get("amplitude", 0.2), "scenario.amplitude"))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "horizon": self.horizon, "seed": self.seed,
                "base_boundary": dict(self.base_boundary), "amplitude": self.amplitude}


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        return Scenario.from_dict(json.loads(path.read_text()))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line {exc.lineno}: {exc.msg}") from None


def gen_scenario(base, kind: str, horizon: int, seed: int, amplitude: float = 0.2,
                 n_events: int | None = None) -> np.ndarray:
    """Control sequence ``(horizon, n_u)`` perturbed around ``base``.

    The first step is always the base point. Every channel stays within
    ``base * (1 +/- amplitude)``; zero channels stay zero.
    """
    base = np.asarray(base, dtype=float)
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if kind not in SCENARIO_KINDS:
        raise ValueError(f"unknown scenario kind {kind!r}")
    rng = np.random.default_rng(seed)
    n = base.size
    t = np.arange(horizon)
    rel = np.zeros((horizon, n))
    n_events = n_events or max(1, horizon // 30)
    if kind == "steps":
        for j in range(n):
            cuts = np.sort(rng.integers(1, max(horizon, 2), size=n_events))
            levels = rng.uniform(-amplitude, amplitude, size=n_events)
            for c, lv in zip(cuts, levels):
                rel[c:, j] = lv
    elif kind == "ramps":
        for j in range(n):
            knots_t = np.concatenate([[0], np.sort(rng.uniform(1, max(horizon - 1, 1), size=n_events)),
                                      [max(horizon - 1, 1)]])
            knots_v = np.concatenate([[0.0], rng.uniform(-amplitude, amplitude, size=n_events + 1)])
            rel[:, j] = np.interp(t, knots_t, knots_v)
    else:
        n_modes = 3
        for j in range(n):
            weights = rng.dirichlet(np.ones(n_modes)) * amplitude * rng.uniform(0.5, 1.0)
            periods = rng.uniform(max(horizon, 4) / 4.0, max(horizon, 4) * 1.5, size=n_modes)
            signs = rng.choice([-1.0, 1.0], size=n_modes)
            rel[:, j] = (signs * weights * np.sin(2 * np.pi * t[:, None] / periods)).sum(axis=1)
    rel[0] = 0.0
    rel = np.clip(rel, -amplitude, amplitude)
    return base * (1.0 + rel)


def scenario_controls(net: GasNetwork, scenario: Scenario) -> np.ndarray:
    from .simulator import control_vector

    base = control_vector(net, scenario.base_boundary)
    return gen_scenario(base, scenario.kind, scenario.horizon, scenario.seed, scenario.amplitude)


# ---------------------------------------------------------------- measurements

QUANTITIES = ("pressure_Pa", "flow_kgps")
HEADER = ["t_index", "node_id", "quantity", "value"]


@dataclass
class MeasurementSeries:
    """Long-format cells ``(t_index, node_id, quantity, value)`` on a complete grid."""

    t_index: np.ndarray
    keys: list[tuple[str, str]]  # (node_id, quantity) columns
    values: np.ndarray  # (len(t_index), len(keys))

    def __post_init__(self):
        self.t_index = np.asarray(self.t_index, dtype=int)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.t_index), len(self.keys)):
            raise ValueError("values must be (time, key)")
        if len(set(self.keys)) != len(self.keys):
            raise ValueError("duplicate (node_id, quantity) keys")
        if np.any(np.diff(self.t_index) <= 0):
            raise ValueError("t_index must be strictly increasing")

    @property
    def n_cells(self) -> int:
        return self.values.size

    def column(self, node_id: str, quantity: str) -> np.ndarray:
        return self.values[:, self.keys.index((node_id, quantity))]

    def copy(self) -> "MeasurementSeries":
        return MeasurementSeries(self.t_index.copy(), list(self.keys), self.values.copy())


def _quantity(kind: str) -> str:
    return "pressure_Pa" if kind == "pressure" else "flow_kgps"


def series_from_trajectory(net: GasNetwork, traj: Trajectory) -> MeasurementSeries:
    """Controls and outputs of every terminal node plus compressor boosts, ``t = 1..T``."""
    keys, cols = [], []
    for k, (nid, kind) in enumerate(zip(net.node_ids, net.control_kinds())):
        keys.append((nid, _quantity(kind)))
        cols.append(traj.u[:, k])
    for k, (nid, kind) in enumerate(zip(net.node_ids, net.output_kinds())):
        keys.append((nid, _quantity(kind)))
        cols.append(traj.y[:, k])
    for k, c in enumerate(net.compressors):
        keys.append((c.id, "pressure_Pa"))
        cols.append(traj.u[:, net.n_nodes + k])
    values = np.column_stack(cols) if cols else np.zeros((traj.T, 0))
    return MeasurementSeries(np.arange(1, traj.T + 1), keys, values)


def trajectory_from_series(net: GasNetwork, series: MeasurementSeries) -> Trajectory:
    """Split a series into controls and outputs for ``net``."""
    try:
        u = [series.column(i, _quantity(k)) for i, k in zip(net.node_ids, net.control_kinds())]
        u += [series.column(c.id, "pressure_Pa") for c in net.compressors]
        y = [series.column(i, _quantity(k)) for i, k in zip(net.node_ids, net.output_kinds())]
    except ValueError as exc:
        raise FormatError(f"measurements do not cover the network: {exc}") from None
    return Trajectory(net.timestep_s, np.column_stack(u), np.column_stack(y))


def write_measurements(series: MeasurementSeries, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HEADER)
        for r, t in enumerate(series.t_index):
            for c, (nid, q) in enumerate(series.keys):
                w.writerow([int(t), nid, q, repr(float(series.values[r, c]))])


def read_measurements(path) -> MeasurementSeries:
    path = Path(path)
    cells: dict[tuple[str, str], dict[int, float]] = {}
    order: list[tuple[str, str]] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != HEADER:
            raise FormatError(f"{path}: header must be {','.join(HEADER)}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise FormatError(f"{path}:{line_no}: expected 4 fields")
            t_raw, nid, q, v_raw = row
            if q not in QUANTITIES:
                raise FormatError(f"{path}:{line_no}: unknown quantity {q!r}")
            try:
                t, v = int(t_raw), float(v_raw)
            except ValueError:
                raise FormatError(f"{path}:{line_no}: malformed number") from None
            key = (nid, q)
            col = cells.get(key)
            if col is None:
                col = cells[key] = {}
                order.append(key)
            if t in col:
                raise FormatError(f"{path}:{line_no}: duplicate cell (t={t}, {nid}, {q})")
            col[t] = v
    if not order:
        raise FormatError(f"{path}: no measurements")
    times = sorted(set().union(*(c.keys() for c in cells.values())))
    values = np.empty((len(times), len(order)))
    for j, key in enumerate(order):
        col = cells[key]
        if len(col) != len(times):
            missing = sorted(set(times) - col.keys())[:5]
            raise FormatError(f"{path}: missing cells for {key} at t_index {missing}")
        values[:, j] = [col[t] for t in times]
    return MeasurementSeries(np.array(times), order, values)


# ---------------------------------------------------------------- outliers

@dataclass(frozen=True)
class OutlierSpec:
    proportion: float
    amplitude: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.proportion <= 1.0:
            raise ValueError("outlier proportion must be in [0, 1]")
        if not 0.0 <= self.amplitude <= 1.0:
            raise ValueError("outlier amplitude must be in [0, 1]")


def inject_outliers(series: MeasurementSeries, spec: OutlierSpec, columns=None) -> MeasurementSeries:
    """Scale a random fraction of cells by ``1 +/- amplitude`` (sign equiprobable).

    ``columns`` optionally restricts corruption to the given key indices.
    """
    rng = np.random.default_rng(spec.seed)
    out = series.copy()
    shape = out.values.shape
    hit = rng.random(shape) < spec.proportion
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    if columns is not None:
        keep = np.zeros(shape[1], dtype=bool)
        keep[list(columns)] = True
        hit &= keep[None, :]
    out.values[hit] = out.values[hit] * (1.0 + sign[hit] * spec.amplitude)
    return out
