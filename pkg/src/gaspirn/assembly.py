"""Compact matrix form of the network and maintenance of its inverse.

Row layout of ``K`` (top to bottom): dynamic rows grouped by pipeline (mass
then momentum equation per computation node after the first), pressure ties,
one row per terminal node (pressure pin or mass balance), one row per
compressor. Columns are the state ``h`` followed by the node pressures.
The right-hand side is ``[S h_prev; 0; u]``.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.csgraph import maximum_bipartite_matching, structural_rank

from .network import ComputationGrid, ControlKind

log = logging.getLogger(__name__)

PARAMS_PER_PIPE = 4


class SingularSystemError(np.linalg.LinAlgError):
    def __init__(self, message, condition=np.inf, rows=(), cols=()):
        super().__init__(message)
        self.condition = condition
        self.rows = tuple(rows)
        self.cols = tuple(cols)


@dataclass(frozen=True)
class Layout:
    n_h: int
    n_dyn: int
    n_tie: int
    n_nodes: int
    n_compressors: int

    @property
    def size(self) -> int:
        return self.n_h + self.n_nodes

    @property
    def n_u(self) -> int:
        return self.n_nodes + self.n_compressors

    @property
    def u_rows(self) -> slice:
        return slice(self.size - self.n_u, self.size)

    @classmethod
    def of(cls, grid: ComputationGrid) -> "Layout":
        n_dyn = 2 * sum(hi - lo - 1 for lo, hi in grid.pipe_ranges)
        n_tie = sum(len(t) for t in grid.node_tied)
        return cls(grid.state_dim, n_dyn, n_tie, grid.n_nodes, grid.n_compressors)


@dataclass(frozen=True)
class OccurrenceTable:
    """Every appearance of a parameter inside ``K``: ``K[row, col] += sign * theta[param]``."""

    param: np.ndarray
    row: np.ndarray
    col: np.ndarray
    sign: np.ndarray
    shape: tuple[int, int]
    n_params: int

    def __len__(self) -> int:
        return len(self.param)

    def delta(self, dtheta) -> sp.csr_matrix:
        """``K(theta + dtheta) - K(theta)`` as a sparse matrix."""
        vals = self.sign * np.asarray(dtheta, dtype=float)[self.param]
        return sp.csr_matrix((vals, (self.row, self.col)), shape=self.shape)

    @property
    def M(self) -> sp.csr_matrix:
        n = len(self)
        return sp.csr_matrix((self.sign, (self.row, np.arange(n))), shape=(self.shape[0], n))

    @property
    def N(self) -> sp.csr_matrix:
        n = len(self)
        return sp.csr_matrix((np.ones(n), (self.col, np.arange(n))), shape=(self.shape[1], n))

    def diag(self, dtheta) -> np.ndarray:
        """Diagonal of the placement matrix: one slot per occurrence."""
        return np.asarray(dtheta, dtype=float)[self.param]


def _pipe_rows(grid: ComputationGrid):
    """Yield ``(pipe, row_mass, row_momentum, i_prev, i)`` for every dynamic row pair."""
    r = 0
    for l, (lo, hi) in enumerate(grid.pipe_ranges):
        for i in range(lo + 1, hi):
            yield l, r, r + 1, i - 1, i
            r += 2


def assemble_K(grid: ComputationGrid, theta) -> tuple[sp.csr_matrix, OccurrenceTable]:
    theta = np.asarray(theta, dtype=float)
    n_pipes = len(grid.pipe_ranges)
    if theta.shape != (PARAMS_PER_PIPE * n_pipes,):
        raise ValueError(f"theta must have length {PARAMS_PER_PIPE * n_pipes}, got shape {theta.shape}")
    lay = Layout.of(grid)
    P, F = grid.pressure_index, grid.flow_index

    rows, cols, vals = [], [], []
    occ_p, occ_r, occ_c, occ_s = [], [], [], []

    def const(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    def param(r, c, k, s):
        occ_p.append(k)
        occ_r.append(r)
        occ_c.append(c)
        occ_s.append(s)

    for l, r_mass, r_mom, ip, i in _pipe_rows(grid):
        base = PARAMS_PER_PIPE * l
        # pi_i + a f_i - a f_{i-1} = pi_i(t-1)
        const(r_mass, P(i), 1.0)
        param(r_mass, F(i), base + 0, 1.0)
        param(r_mass, F(ip), base + 0, -1.0)
        # b f_i + d pi_{i-1} + c pi_i = f_i(t-1)
        param(r_mom, F(i), base + 1, 1.0)
        param(r_mom, P(i), base + 2, 1.0)
        param(r_mom, P(ip), base + 3, 1.0)

    node_col = lay.n_h
    r = lay.n_dyn
    for n, tied in enumerate(grid.node_tied):
        for i in tied:
            const(r, P(i), 1.0)
            const(r, node_col + n, -1.0)
            r += 1
    for n, kind in enumerate(grid.node_controls):
        if kind is ControlKind.PRESSURE:
            const(r, node_col + n, 1.0)
        else:
            # sum of outgoing minus incoming pipe flows equals the injection
            for i in grid.node_outflow[n]:
                const(r, F(i), 1.0)
            for i in grid.node_inflow[n]:
                const(r, F(i), -1.0)
        r += 1
    for n, outlet in grid.compressor_links:
        const(r, P(outlet), 1.0)
        const(r, node_col + n, -1.0)
        r += 1
    if r != lay.size:
        raise SingularSystemError(f"assembled {r} rows for {lay.size} unknowns")

    table = OccurrenceTable(
        param=np.array(occ_p, dtype=int),
        row=np.array(occ_r, dtype=int),
        col=np.array(occ_c, dtype=int),
        sign=np.array(occ_s, dtype=float),
        shape=(lay.size, lay.size),
        n_params=PARAMS_PER_PIPE * n_pipes,
    )
    K0 = sp.coo_matrix((vals, (rows, cols)), shape=table.shape)
    K = (K0 + table.delta(theta)).tocsr()
    K.sort_indices()
    return K, table


def assemble_S(grid: ComputationGrid) -> sp.csr_matrix:
    lay = Layout.of(grid)
    rows, cols = [], []
    for _, r_mass, r_mom, _, i in _pipe_rows(grid):
        rows += [r_mass, r_mom]
        cols += [grid.pressure_index(i), grid.flow_index(i)]
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(lay.n_dyn, lay.n_h))


def assemble_H(grid: ComputationGrid) -> sp.csr_matrix:
    """Output map: injection at pressure nodes, pressure at flow nodes."""
    rows, cols, vals = [], [], []
    for n, kind in enumerate(grid.node_controls):
        if kind is ControlKind.PRESSURE:
            for i in grid.node_outflow[n]:
                rows.append(n)
                cols.append(grid.flow_index(i))
                vals.append(1.0)
            for i in grid.node_inflow[n]:
                rows.append(n)
                cols.append(grid.flow_index(i))
                vals.append(-1.0)
        else:
            rows.append(n)
            cols.append(grid.pressure_index(min(grid.node_tied[n])))
            vals.append(1.0)
    return sp.csr_matrix((vals, (rows, cols)), shape=(grid.n_nodes, grid.state_dim))


def check_structure(K: sp.spmatrix) -> None:
    """Raise :class:`SingularSystemError` naming unmatched rows/cols if ``K`` is structurally singular."""
    K = sp.csr_matrix(K)
    if structural_rank(K) == K.shape[0]:
        return
    match = maximum_bipartite_matching(K, perm_type="column")
    rows = np.flatnonzero(match < 0)
    matched_cols = set(match[match >= 0].tolist())
    cols = [c for c in range(K.shape[1]) if c not in matched_cols]
    raise SingularSystemError(
        f"K is structurally singular: rows {rows.tolist()} / cols {cols} unmatched", rows=rows, cols=cols
    )


def invert_K(K: sp.spmatrix, max_condition: float = 1e14) -> tuple[np.ndarray, float]:
    """Dense inverse of ``K`` and its 1-norm condition number."""
    check_structure(K)
    dense = K.toarray() if sp.issparse(K) else np.asarray(K, dtype=float)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
            lu = scipy.linalg.lu_factor(dense, check_finite=True)
    except (scipy.linalg.LinAlgWarning, ValueError) as exc:
        raise SingularSystemError(f"K could not be factorized: {exc}") from exc
    if np.any(np.diag(lu[0]) == 0):
        raise SingularSystemError("K is numerically singular (zero pivot)")
    J = scipy.linalg.lu_solve(lu, np.eye(dense.shape[0]))
    cond = float(np.linalg.norm(dense, 1) * np.linalg.norm(J, 1))
    if not np.isfinite(cond) or cond > max_condition:
        raise SingularSystemError(f"K is ill-conditioned (cond_1 ~ {cond:.3e})", condition=cond)
    return J, cond


@dataclass(frozen=True)
class SystemMatrices:
    """Immutable snapshot of the network model at one parameter vector."""

    grid: ComputationGrid
    theta: np.ndarray
    K: sp.csr_matrix
    table: OccurrenceTable
    S: sp.csr_matrix
    H: sp.csr_matrix
    J: np.ndarray
    condition: float
    layout: Layout
    updates_since_inversion: int = 0
    fallback: bool = False
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def J1(self) -> np.ndarray:
        return self.J[: self.layout.n_h, : self.layout.n_dyn]

    @property
    def J2(self) -> np.ndarray:
        return self.J[: self.layout.n_h, self.layout.u_rows]

    @property
    def J3(self) -> np.ndarray:
        return self.J[self.layout.n_h :, : self.layout.n_dyn]

    @property
    def J4(self) -> np.ndarray:
        return self.J[self.layout.n_h :, self.layout.u_rows]

    @property
    def A(self) -> np.ndarray:
        """State transition ``J1 S``."""
        if "A" not in self._cache:
            self._cache["A"] = np.asarray((self.S.T @ self.J1.T).T)
        return self._cache["A"]

    @property
    def B(self) -> np.ndarray:
        return self.J2

    @property
    def node_A(self) -> np.ndarray:
        """Node pressure read-out ``J3 S``."""
        if "node_A" not in self._cache:
            self._cache["node_A"] = np.asarray((self.S.T @ self.J3.T).T)
        return self._cache["node_A"]

    def residual(self) -> float:
        """``max |J K - I|``."""
        return float(np.abs(self.K.T.dot(self.J.T).T - np.eye(self.layout.size)).max())


def build_system(grid: ComputationGrid, theta) -> SystemMatrices:
    theta = np.array(theta, dtype=float)
    K, table = assemble_K(grid, theta)
    J, cond = invert_K(K)
    return SystemMatrices(
        grid=grid,
        theta=theta,
        K=K,
        table=table,
        S=assemble_S(grid),
        H=assemble_H(grid),
        J=J,
        condition=cond,
        layout=Layout.of(grid),
    )


def reinvert(system: SystemMatrices, theta=None) -> SystemMatrices:
    theta = system.theta if theta is None else np.array(theta, dtype=float)
    K, _ = assemble_K(system.grid, theta)
    J, cond = invert_K(K)
    return replace(system, theta=theta, K=K, J=J, condition=cond, updates_since_inversion=0,
                   fallback=False, _cache={})


def woodbury_inverse(J: np.ndarray, table: OccurrenceTable, dtheta, compress: bool = True,
                     max_condition: float = 1e12) -> np.ndarray:
    """``(K + M dTheta N^T)^-1`` from ``J = K^-1`` by the matrix inversion lemma.

    Uses ``J - J M dTheta (I + N^T J M dTheta)^-1 N^T J``, which needs no
    inverse of ``dTheta``. With ``compress`` the placement is regrouped by the
    rows of ``K`` it touches (``M dTheta N^T = E V^T``), which shrinks the
    inner system when a row holds several parameters; the identity used is the
    same.
    """
    dtheta = np.asarray(dtheta, dtype=float)
    if not np.all(np.isfinite(dtheta)):
        raise ValueError("parameter step is not finite")
    if not np.any(dtheta):
        return J
    if compress:
        rows = np.unique(table.row)
        local = np.searchsorted(rows, table.row)
        Vt = sp.csr_matrix((table.sign * dtheta[table.param], (local, table.col)),
                           shape=(len(rows), J.shape[0]))
        JU = J[:, rows]
        VtJ = np.asarray(Vt @ J)
        inner = np.eye(len(rows)) + VtJ[:, rows]
    else:
        theta_diag = table.diag(dtheta)
        JU = np.asarray((table.M.T @ J.T).T) * theta_diag
        VtJ = np.asarray(table.N.T @ J)
        inner = np.eye(len(table)) + np.asarray(table.N.T @ JU)
    try:
        lu = scipy.linalg.lu_factor(inner)
    except (ValueError, scipy.linalg.LinAlgError) as exc:
        raise SingularSystemError(f"Woodbury inner system singular: {exc}") from exc
    if np.any(np.diag(lu[0]) == 0):
        raise SingularSystemError("Woodbury inner system singular")
    rcond = 1.0 / (np.linalg.norm(inner, 1) * np.linalg.norm(scipy.linalg.lu_solve(lu, np.eye(len(inner))), 1))
    if rcond < 1.0 / max_condition:
        raise SingularSystemError("Woodbury inner system ill-conditioned", condition=1.0 / rcond)
    return J - JU @ scipy.linalg.lu_solve(lu, VtJ)


def woodbury_update(system: SystemMatrices, dtheta, reinversion_period: int | None = None) -> SystemMatrices:
    """New snapshot at ``theta + dtheta``.

    The inverse is refreshed incrementally; every ``reinversion_period``
    updates, or when the inner system is singular, it is recomputed exactly.
    """
    dtheta = np.asarray(dtheta, dtype=float)
    theta = system.theta + dtheta
    if not np.any(dtheta):
        return system
    count = system.updates_since_inversion + 1
    if reinversion_period is not None and count >= reinversion_period:
        return reinvert(system, theta)
    try:
        J = woodbury_inverse(system.J, system.table, dtheta)
    except SingularSystemError as exc:
        log.warning("Woodbury update failed (%s); re-inverting K", exc)
        return replace(reinvert(system, theta), fallback=True)
    K = (system.K + system.table.delta(dtheta)).tocsr()
    return replace(system, theta=theta, K=K, J=J, updates_since_inversion=count, fallback=False, _cache={})


def dump_triplets(matrix, path) -> None:
    """Write ``row col value`` lines for every stored entry."""
    coo = sp.coo_matrix(matrix)
    with Path(path).open("w") as fh:
        fh.write(f"# shape {coo.shape[0]} {coo.shape[1]}\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r} {c} {v!r}\n")
