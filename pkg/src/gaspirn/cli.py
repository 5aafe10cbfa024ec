"""Command-line entry point: simulate, identify, evaluate, perturb, export."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .assembly import SingularSystemError, build_system
from .evaluate import evaluate
from .export import export_statespace, load_params, load_statespace, save_params, save_statespace
from .ingest import (
    FormatError,
    OutlierSpec,
    inject_outliers,
    load_network,
    load_scenario,
    read_measurements,
    scenario_controls,
    series_from_trajectory,
    trajectory_from_series,
    write_measurements,
)
from .network import GasNetwork, NetworkError, build_grid, network_theta
from .normalize import Normalizer
from .pirn import NonFiniteError
from .simulator import InfeasibleBoundaryError, SimulationError, Simulator, nominal_network
from .training import TrainConfig, TrainingDiverged, parameter_mape, perturb_parameters, train, write_loss_curve

log = logging.getLogger("gaspirn")

EXIT_OK, EXIT_NUMERIC, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    pass


def _network(args) -> GasNetwork:
    kwargs = {"drop_unsupported": True} if getattr(args, "drop_unsupported", False) else {}
    return load_network(args.network, args.network_format, **kwargs)


def prior_network(net: GasNetwork, u_ref) -> GasNetwork:
    """``net`` itself when every pipe has a base velocity, else its nominal version at ``u_ref``."""
    if all(p.base_velocity_mps is not None for p in net.pipelines):
        return net
    return nominal_network(net, u_ref)


def _json_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise InputError(f"file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: line {exc.lineno}: {exc.msg}") from None


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise InputError(f"file not found: {path}")
    return path


def _normalizer_from(doc: dict | None) -> Normalizer | None:
    bases = (doc or {}).get("meta", {}).get("normalizer")
    return Normalizer(**bases) if bases else None


# ---------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    net = _network(args)
    scenario = load_scenario(_require(args.scenario))
    U = scenario_controls(net, scenario)
    phys = prior_network(net, U[0])
    if args.params:
        theta, _ = load_params(phys, _require(args.params))
    else:
        theta = network_theta(phys)
    nz = Normalizer.from_data(phys, U)
    traj = Simulator(phys, theta, nz).simulate(U)
    write_measurements(series_from_trajectory(phys, traj), args.out)
    if args.states:
        np.savez(args.states, h=traj.h, node_pressure=traj.node_pressure, u=traj.u, y=traj.y)
    if args.truth_out:
        save_params(phys, theta, args.truth_out, meta={"source": "simulate", "scenario": scenario.to_dict()})
    log.info("wrote %d steps to %s", traj.T, args.out)
    return EXIT_OK


def cmd_identify(args) -> int:
    net = _network(args)
    dataset = [trajectory_from_series(net, read_measurements(_require(m))) for m in args.measurements]
    phys = prior_network(net, dataset[0].u[0])
    config = TrainConfig.from_dict(_json_file(args.config)) if args.config else TrainConfig()
    if args.seed is not None:
        config.seed = args.seed
    if args.epochs is not None:
        config.epochs = args.epochs
    if args.theta0:
        theta0, _ = load_params(phys, _require(args.theta0))
    else:
        theta0 = network_theta(phys)
    if args.init_error:
        theta0 = perturb_parameters(theta0, args.init_error, np.random.default_rng(config.seed), mode=args.init_mode)
    truth = load_params(phys, _require(args.truth))[0] if args.truth else None
    result = train(phys, dataset, theta0, config, truth=truth)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "normalizer": result.normalizer.to_dict(),
        "config": config.to_dict(),
        "init_error": args.init_error,
        "init_mape_percent": None if truth is None else parameter_mape(theta0, truth),
        "final_mape_percent": result.mape,
        "epoch_data_term": result.epoch_data,
        "woodbury_fallbacks": result.fallbacks,
        "measurements": [str(m) for m in args.measurements],
    }
    save_params(phys, result.theta, out / "params.json", meta=meta, initial_states=result.h0)
    save_params(phys, theta0, out / "theta0.json", meta={"init_error": args.init_error, "seed": config.seed})
    write_loss_curve(result.curve, out / "loss_curve.csv")
    summary = {"final_mape_percent": result.mape, "final_epoch_data_term": result.epoch_data[-1] if result.epoch_data else None}
    (out / "report.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    net = _network(args)
    traj = trajectory_from_series(net, read_measurements(_require(args.measurements)))
    phys = prior_network(net, traj.u[0])
    theta, doc = load_params(phys, _require(args.params))
    nz = _normalizer_from(doc) or Normalizer.from_data(phys, traj.u, traj.y)
    pred = Simulator(phys, theta, nz).simulate(traj.u)
    report = evaluate(phys, pred.y, traj.y, meta={"measurements": str(args.measurements), "steps": traj.T})
    Path(args.out).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    print(json.dumps({k: report.to_dict()[k] for k in ("pressure", "flow")}))
    return EXIT_OK


def cmd_perturb(args) -> int:
    series = read_measurements(_require(args.measurements))
    spec = OutlierSpec(args.proportion, args.amplitude, args.seed)
    write_measurements(inject_outliers(series, spec), args.out)
    return EXIT_OK


def cmd_export(args) -> int:
    if args.format != "statespace_json":
        raise InputError(f"unsupported export format {args.format!r}")
    net = _network(args)
    if not all(p.base_velocity_mps is not None for p in net.pipelines) and not args.params:
        raise InputError("export needs --params or a network with base velocities")
    theta, doc = load_params(net, _require(args.params)) if args.params else (network_theta(net), {})
    nz = _normalizer_from(doc) or Normalizer()
    system = build_system(build_grid(net), nz.theta(theta))
    ss = export_statespace(net, system, nz, meta={"params": str(args.params)})
    save_statespace(ss, args.out)

    # re-import and compare a short forward run against the live snapshot
    back = load_statespace(args.out)
    rng = np.random.default_rng(0)
    h0 = rng.standard_normal(ss.A.shape[0])
    U = rng.standard_normal((10, ss.B.shape[1]))
    H_ref, _, _ = ss.run(h0, U)
    H_back, _, _ = back.run(h0, U)
    err = float(np.abs(H_back - H_ref).max() / max(np.abs(H_ref).max(), 1e-300))
    if err > 1e-12:
        log.error("re-imported model deviates by %.3e", err)
        return EXIT_NUMERIC
    print(json.dumps({"spectral_radius": ss.spectral_radius, "reimport_error": err}))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gaspirn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def network_args(p):
        p.add_argument("--network", required=True)
        p.add_argument("--network-format", default="native_json", choices=["native_json", "gaslib_xml"])
        p.add_argument("--drop-unsupported", action="store_true",
                       help="merge endpoints of valves, short pipes and resistors (GasLib only)")

    p = sub.add_parser("simulate", help="simulate a scenario into a measurement CSV")
    network_args(p)
    p.add_argument("--scenario", required=True)
    p.add_argument("--params")
    p.add_argument("--out", required=True)
    p.add_argument("--states", help="optional .npz dump of states and node pressures")
    p.add_argument("--truth-out", help="write the parameters used as a params JSON")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("identify", help="identify pipeline coefficients from measurements")
    network_args(p)
    p.add_argument("--measurements", required=True, nargs="+", help="one CSV per sequence")
    p.add_argument("--theta0")
    p.add_argument("--init-error", type=float, default=0.0)
    p.add_argument("--init-mode", default="consistent", choices=["consistent", "direct"])
    p.add_argument("--truth")
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("evaluate", help="trajectory error statistics of a parameter set")
    network_args(p)
    p.add_argument("--params", required=True)
    p.add_argument("--measurements", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("perturb", help="inject multiplicative outliers into a measurement CSV")
    p.add_argument("--measurements", required=True)
    p.add_argument("--proportion", type=float, required=True)
    p.add_argument("--amplitude", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("export", help="export the state-space matrices")
    network_args(p)
    p.add_argument("--params")
    p.add_argument("--format", default="statespace_json")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


_NUMERIC = (SingularSystemError, SimulationError, NonFiniteError, TrainingDiverged,
            InfeasibleBoundaryError, FloatingPointError, np.linalg.LinAlgError)
_INPUT = (InputError, FormatError, NetworkError, FileNotFoundError, KeyError, ValueError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _NUMERIC as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        diag = getattr(exc, "diagnostics", None)
        if diag:
            print(json.dumps({"diagnostics": diag}), file=sys.stderr)
        return EXIT_NUMERIC
    except _INPUT as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
