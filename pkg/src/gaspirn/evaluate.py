"""Trajectory error statistics on physical units."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import GasNetwork

FLOOR = 1e-6  # MAPE excludes cells below this fraction of the quantity base


@dataclass(frozen=True)
class Metrics:
    mape: float | None  # percent; None when every cell is below the floor
    rmse: float
    r2: float | None  # None when the measured values have zero variance
    n_cells: int
    n_mape_cells: int

    def to_dict(self) -> dict:
        return {"mape_percent": self.mape, "rmse": self.rmse, "r2": self.r2,
                "n_cells": self.n_cells, "n_mape_cells": self.n_mape_cells}


def metrics(predicted, measured, base: float | None = None) -> Metrics:
    """MAPE, RMSE and R-squared over all cells of two equally shaped arrays.

    ``base`` sets the MAPE floor (``FLOOR * base``); by default the largest
    absolute measured value.
    """
    yhat = np.asarray(predicted, dtype=float).ravel()
    y = np.asarray(measured, dtype=float).ravel()
    if yhat.shape != y.shape:
        raise ValueError("predicted and measured must have the same shape")
    if y.size == 0:
        raise ValueError("no cells to evaluate")
    base = float(np.abs(y).max()) if base is None else float(base)
    err = yhat - y
    rmse = float(np.sqrt(np.mean(err**2)))
    keep = np.abs(y) >= FLOOR * base if base > 0 else np.zeros(y.size, dtype=bool)
    mape = float(100.0 * np.mean(np.abs(err[keep]) / np.abs(y[keep]))) if keep.any() else None
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = None if ss_tot == 0.0 else 1.0 - float(np.sum(err**2)) / ss_tot
    return Metrics(mape, rmse, r2, int(y.size), int(keep.sum()))


@dataclass
class EvaluationReport:
    pressure: Metrics | None
    flow: Metrics | None
    per_node: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "pressure": None if self.pressure is None else self.pressure.to_dict(),
            "flow": None if self.flow is None else self.flow.to_dict(),
            "per_node": {k: v.to_dict() for k, v in self.per_node.items()},
            "meta": self.meta,
        }


def evaluate(net: GasNetwork, predicted, measured, meta: dict | None = None) -> EvaluationReport:
    """Per-quantity and per-node statistics of output trajectories ``(T, N)``."""
    yhat = np.atleast_2d(np.asarray(predicted, dtype=float))
    y = np.atleast_2d(np.asarray(measured, dtype=float))
    if yhat.shape != y.shape or yhat.shape[1] != net.n_nodes:
        raise ValueError(f"outputs must be (T, {net.n_nodes}) and equally shaped")
    kinds = np.array(net.output_kinds())
    report = EvaluationReport(None, None, meta=dict(meta or {}))
    for kind in ("pressure", "flow"):
        cols = kinds == kind
        if not cols.any():
            continue
        base = float(np.abs(y[:, cols]).max())
        setattr(report, kind, metrics(yhat[:, cols], y[:, cols], base))
        for k in np.flatnonzero(cols):
            report.per_node[net.node_ids[k]] = metrics(yhat[:, k], y[:, k], base)
    return report
