"""Training harness: warm start, normalization, clipping, truncated BPTT, scheduling."""
from __future__ import annotations

import contextlib
import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .assembly import build_system
from .network import GasNetwork, build_grid, implied_network
from .normalize import Normalizer
from .pirn import (
    LinearCoordinates,
    PipeCoordinates,
    GradientVector,
    PirnModel,
    RMSpropState,
    apply_update,
    backward,
    forward,
    loss,
    regularizer,
    tbptt_split,
)
from .simulator import Simulator, Trajectory, steady_state

log = logging.getLogger(__name__)

__all__ = [
    "Normalizer",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "clip_gradients",
    "parameter_mape",
    "scheduled_lr",
    "tbptt_split",
    "train",
    "warm_start",
]


COORDINATES = ("pipe", "relative", "raw")
DIVERGENCE_FLOOR = 1e-6  # normalized data term below which growth is not treated as divergence


class TrainingDiverged(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class SchedulerConfig:
    step_epochs: int = 4
    gamma: float = 0.2


@dataclass
class TrainConfig:
    lr_theta: float = 1e-3
    lr_state: float = 1e-3
    reg_weight: float = 1e-4
    clip_bound: float = 1.0
    tbptt_window: int = 60
    batch_size: int = 16
    epochs: int = 20
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    reinversion_period: int = 50
    seed: int = 0
    rms_decay: float = 0.99
    rms_eps: float = 1e-8
    rms_momentum: float = 0.0
    coordinates: str = "pipe"
    deterministic: bool = True

    def __post_init__(self):
        if isinstance(self.scheduler, dict):
            self.scheduler = SchedulerConfig(**self.scheduler)
        checks = {
            "lr_theta": self.lr_theta > 0,
            "lr_state": self.lr_state > 0,
            "reg_weight": self.reg_weight >= 0,
            "clip_bound": self.clip_bound > 0,
            "tbptt_window": int(self.tbptt_window) >= 1,
            "batch_size": int(self.batch_size) >= 1,
            "epochs": int(self.epochs) >= 0,
            "reinversion_period": int(self.reinversion_period) >= 1,
            "scheduler.step_epochs": int(self.scheduler.step_epochs) >= 1,
            "scheduler.gamma": self.scheduler.gamma > 0,
            "rms_decay": 0 <= self.rms_decay < 1,
            "rms_eps": self.rms_eps > 0,
            "rms_momentum": 0 <= self.rms_momentum < 1,
            "coordinates": self.coordinates in COORDINATES,
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ValueError(f"invalid training config values: {bad}")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def scheduled_lr(lr: float, epoch: int, config: TrainConfig) -> float:
    """Learning rate in effect during ``epoch`` (0-based)."""
    return lr * config.scheduler.gamma ** (epoch // config.scheduler.step_epochs)


def clip_gradients(grads: GradientVector, bound: float) -> GradientVector:
    if not bound > 0:
        raise ValueError("clip bound must be positive")
    return GradientVector(np.clip(grads.theta, -bound, bound), np.clip(grads.h0, -bound, bound))


def parameter_mape(theta, truth) -> float:
    theta, truth = np.asarray(theta, dtype=float), np.asarray(truth, dtype=float)
    return float(100.0 * np.mean(np.abs(theta - truth) / np.abs(truth)))


def warm_start(net: GasNetwork, theta0, boundary, profile: str = "analytic") -> tuple[np.ndarray, np.ndarray]:
    """``theta0`` and a steady initial state at ``boundary`` (physical units).

    ``discrete`` takes the fixed point of the model at ``theta0`` itself, so a
    model started at the true parameters sees no transient. ``analytic`` uses
    the closed-form steady profile of the pipes implied by ``theta0`` (or of
    the network's own pipe data when ``theta0`` has no physical reading).
    """
    theta0 = np.array(theta0, dtype=float)
    boundary = np.asarray(boundary, dtype=float)
    if profile == "discrete":
        try:
            return theta0, Simulator(net, theta0, Normalizer.from_data(net, boundary)).fixed_point(boundary)
        except np.linalg.LinAlgError as exc:
            log.warning("no discrete fixed point (%s); using the analytic profile", exc)
    elif profile != "analytic":
        raise ValueError(f"unknown warm-start profile {profile!r}")
    try:
        physics = implied_network(net, theta0)
    except ValueError as exc:
        log.warning("%s; warm start uses the network's pipe data", exc)
        physics = net
    return theta0, steady_state(physics, boundary).h


def perturb_parameters(theta, level: float, rng, mode: str = "consistent", net: GasNetwork | None = None):
    """Multiplicative uniform errors in ``[1 - level, 1 + level]``.

    ``direct`` perturbs every coefficient independently. ``consistent``
    perturbs ``a``, ``d`` and the friction term ``b - 1`` and rebuilds ``c``
    from the friction-free part ``-d`` minus the rescaled friction part, so
    the small sum ``c + d`` keeps its physical sign and size.
    """
    theta = np.asarray(theta, dtype=float).reshape(-1, 4)
    n = theta.shape[0]
    if mode == "direct":
        e = rng.uniform(1 - level, 1 + level, size=theta.shape)
        return (theta * e).ravel()
    if mode != "consistent":
        raise ValueError(f"unknown perturbation mode {mode!r}")
    ea, ed, ef, eb = (rng.uniform(1 - level, 1 + level, size=n) for _ in range(4))
    a, b, c, d = theta.T
    fric_c = -(c + d)  # friction share of c
    out = np.empty_like(theta)
    out[:, 0] = a * ea
    out[:, 1] = 1.0 + (b - 1.0) * eb
    out[:, 3] = d * ed
    out[:, 2] = -out[:, 3] - fric_c * ef
    return out.ravel()


@dataclass
class TrainResult:
    model: PirnModel
    normalizer: Normalizer
    theta: np.ndarray
    h0: np.ndarray
    curve: list[dict]
    epoch_data: list[float]
    mape: float | None = None
    fallbacks: int = 0


def _threads(deterministic: bool):
    if not deterministic:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def optimizer_basis(theta0, relative: bool = True) -> np.ndarray:
    """Linear map from optimizer coordinates to parameter changes.

    Per pipe the optimizer moves ``(a, b - 1, c + d, d)``; ``c`` and ``d``
    nearly cancel, so stepping them independently would swamp the small
    friction share of ``c``. With ``relative`` each coordinate is measured
    in units of its initial magnitude.
    """
    theta0 = np.asarray(theta0, dtype=float).reshape(-1, 4)
    block = np.array([[1.0, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, -1], [0, 0, 0, 1]])
    n = theta0.shape[0]
    out = np.zeros((4 * n, 4 * n))
    for k, (a, b, c, d) in enumerate(theta0):
        z = np.abs([a, b - 1.0, c + d, d]) if relative else np.ones(4)
        z[z == 0] = 1.0
        out[4 * k : 4 * k + 4, 4 * k : 4 * k + 4] = block * z
    return out


def make_coordinates(theta0, kind: str = "pipe"):
    """Optimizer coordinates for normalized ``theta0``.

    ``pipe`` falls back to ``relative`` (with a warning) for parameters
    outside its domain, e.g. a friction-free pipe with ``b = 1``.
    """
    if kind == "pipe":
        try:
            return PipeCoordinates(theta0)
        except ValueError as exc:
            log.warning("%s; using relative coordinates", exc)
            kind = "relative"
    if kind == "relative":
        return LinearCoordinates(theta0, optimizer_basis(theta0, True))
    if kind == "raw":
        return LinearCoordinates(theta0)
    raise ValueError(f"unknown coordinates {kind!r}")


def train(net: GasNetwork, dataset: list[Trajectory], theta0, config: TrainConfig | None = None,
          truth=None, normalizer: Normalizer | None = None, h0=None) -> TrainResult:
    """Identify ``theta`` (physical units) from measured control/output sequences.

    All sequences must have the same length. Each batch runs chunk by chunk
    (``tbptt_window`` steps), with one clipped RMSprop update per chunk;
    the next chunk starts from the carried terminal state. ``h0``
    (physical, one row per sequence) overrides the warm-started initial
    states.
    """
    config = config or TrainConfig()
    if not dataset:
        raise ValueError("dataset is empty")
    lengths = {tr.T for tr in dataset}
    if len(lengths) != 1:
        raise ValueError(f"all sequences must have the same length, got {sorted(lengths)}")
    T = lengths.pop()
    if T < 1:
        raise ValueError("sequences must have at least one step")
    if config.tbptt_window > T:
        raise ValueError(f"tbptt_window {config.tbptt_window} exceeds the sequence length {T}")
    theta0 = np.asarray(theta0, dtype=float)
    nz = normalizer or Normalizer.from_data(net, [tr.u for tr in dataset], [tr.y for tr in dataset])
    U = np.stack([nz.controls(net, tr.u) for tr in dataset])
    Y = np.stack([nz.outputs(net, tr.y) for tr in dataset])

    if h0 is None:
        h0 = np.stack([warm_start(net, theta0, tr.u[0])[1] for tr in dataset])
    H0 = nz.state(np.asarray(h0, dtype=float).reshape(len(dataset), -1))

    grid = build_grid(net)
    theta0_n = nz.theta(theta0)
    scale = np.abs(theta0_n)
    scale[scale == 0] = 1.0
    weights = 1.0 / scale
    model = PirnModel(build_system(grid, theta0_n), theta0_n, H0, coords=make_coordinates(theta0_n, config.coordinates))
    state = RMSpropState.zeros(theta0.size, len(dataset), grid.state_dim)
    rng = np.random.default_rng(config.seed)
    truth = None if truth is None else np.asarray(truth, dtype=float)
    chunks = tbptt_split(T, config.tbptt_window)

    curve: list[dict] = []
    epoch_data: list[float] = []
    bad_epochs = 0
    fallbacks = 0
    with _threads(config.deterministic):
        for epoch in range(config.epochs):
            factor = config.scheduler.gamma ** (epoch // config.scheduler.step_epochs)
            order = rng.permutation(len(dataset))
            batch_terms = []
            for b, start in enumerate(range(0, len(order), config.batch_size)):
                idx = np.sort(order[start : start + config.batch_size])
                carried = model.h0[idx]
                data_term = 0.0
                for lo, hi in chunks:
                    share = (hi - lo) / T
                    cache = forward(model.system, carried, U[idx, lo:hi])
                    rep = loss(cache.outputs, Y[idx, lo:hi], model.theta, model.theta0,
                               config.reg_weight * share, weights, horizon=T)
                    grads = backward(model.system, U[idx, lo:hi], Y[idx, lo:hi], cache, model.theta0,
                                     config.reg_weight * share, weights, horizon=T)
                    gh0 = grads.h0 if lo == 0 else np.zeros_like(grads.h0)
                    grads = clip_gradients(GradientVector(model.coords.pullback(model.z, grads.theta), gh0),
                                           config.clip_bound)
                    model, state = apply_update(model, grads, state, config, seq_index=idx, lr_factor=factor)
                    fallbacks += int(model.system.fallback)
                    data_term += rep.data_term
                    carried = cache.states[:, -1]
                reg = regularizer(model.theta, model.theta0, config.reg_weight, weights)
                mape = None if truth is None else parameter_mape(nz.theta_physical(model.theta), truth)
                curve.append({"epoch": epoch, "batch": b, "data_term": data_term,
                              "reg_term": reg, "param_mape": mape})
                batch_terms.append(data_term)
            epoch_data.append(float(np.mean(batch_terms)))
            log.info("epoch %d: data %.3e mape %s", epoch, epoch_data[-1], curve[-1]["param_mape"])
            if epoch_data[-1] > 1e3 * max(epoch_data[0], DIVERGENCE_FLOOR):
                bad_epochs += 1
                if bad_epochs >= 3:
                    raise TrainingDiverged(
                        f"data term grew from {epoch_data[0]:.3e} to {epoch_data[-1]:.3e}",
                        diagnostics={"epoch_data": epoch_data, "theta": nz.theta_physical(model.theta).tolist()},
                    )
            else:
                bad_epochs = 0

    theta = nz.theta_physical(model.theta)
    return TrainResult(
        model=model,
        normalizer=nz,
        theta=theta,
        h0=nz.state_physical(model.h0),
        curve=curve,
        epoch_data=epoch_data,
        mape=None if truth is None else parameter_mape(theta, truth),
        fallbacks=fallbacks,
    )


def write_loss_curve(curve: list[dict], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "batch", "data_term", "reg_term", "param_mape_if_truth_known"])
        for row in curve:
            mape = "" if row["param_mape"] is None else repr(row["param_mape"])
            w.writerow([row["epoch"], row["batch"], repr(row["data_term"]), repr(row["reg_term"]), mape])
