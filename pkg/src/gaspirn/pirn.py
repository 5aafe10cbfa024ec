"""Physics-informed recurrent core: recurrence, loss, reverse-mode gradients, updates.

All quantities here are normalized. Batches are arrays with a leading sequence
axis: ``h0`` is ``(B, n_h)``, ``U`` is ``(B, T, n_u)``, ``Y`` is ``(B, T, n_y)``.

The recurrence is ``h_t = A h_{t-1} + B u_t`` with ``A = J1 S`` and
``B = J2``, and outputs ``y_t = H h_t``. With ``x_t = [h_t; node pressures]``
solving ``K x_t = r_t``, a parameter enters through
``dx_t/dtheta_k = -J (dK/dtheta_k) x_t``, and ``dK/dtheta_k`` is the sum of the
signed unit entries listed in the occurrence table. The adjoint
``w_t = J_h^T g_t`` then gives
``dL/dtheta_k = -sum_t sum_(o of k) sign_o w_t[row_o] x_t[col_o]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .assembly import SystemMatrices, woodbury_update


class NonFiniteError(FloatingPointError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


@dataclass
class ForwardCache:
    states: np.ndarray  # (B, T+1, n_h)
    outputs: np.ndarray  # (B, T, n_y)


@dataclass
class LossReport:
    total: float
    data_term: float
    reg_term: float
    residuals: np.ndarray


@dataclass
class GradientVector:
    theta: np.ndarray
    h0: np.ndarray


@dataclass
class RMSpropState:
    theta_sq: np.ndarray
    h0_sq: np.ndarray
    steps: int = 0
    theta_buf: np.ndarray = None
    h0_buf: np.ndarray = None

    def __post_init__(self):
        if self.theta_buf is None:
            self.theta_buf = np.zeros_like(self.theta_sq)
        if self.h0_buf is None:
            self.h0_buf = np.zeros_like(self.h0_sq)

    @classmethod
    def zeros(cls, n_theta: int, n_seq: int, n_h: int) -> "RMSpropState":
        return cls(np.zeros(n_theta), np.zeros((n_seq, n_h)))


class LinearCoordinates:
    """Optimizer coordinates ``z`` with ``theta = origin + basis @ z``."""

    def __init__(self, origin, basis=None):
        self.origin = np.asarray(origin, dtype=float)
        self.basis = np.eye(self.origin.size) if basis is None else np.asarray(basis, dtype=float)

    def initial(self) -> np.ndarray:
        return np.zeros(self.basis.shape[1])

    def theta(self, z) -> np.ndarray:
        return self.origin + self.basis @ z

    def pullback(self, z, grad_theta) -> np.ndarray:
        return self.basis.T @ grad_theta


class PipeCoordinates:
    """Per pipe ``z = (log 1/a, log(-d/(b-1)), log(b-1), (c+d)/sigma)``.

    The three logs are storage capacity, conductance and the friction share
    of ``b``; ``sigma = |c0 + d0|``. In these coordinates the output error
    surface is far closer to quadratic than in ``(a, b, c, d)``, where the
    split of linepack between neighbouring pipes bends into a curved valley.
    """

    def __init__(self, theta0):
        t = np.asarray(theta0, dtype=float).reshape(-1, 4)
        a, b, c, d = t.T
        if np.any(a <= 0) or np.any(b <= 1) or np.any(d >= 0):
            raise ValueError("pipe coordinates need a > 0, b > 1 and d < 0")
        self.sigma = np.abs(c + d)
        self.sigma[self.sigma == 0] = 1e-300
        self._z0 = np.column_stack([-np.log(a), np.log(-d / (b - 1)), np.log(b - 1), (c + d) / self.sigma]).ravel()

    def initial(self) -> np.ndarray:
        return self._z0.copy()

    def theta(self, z) -> np.ndarray:
        q, g, beta, s = np.asarray(z, dtype=float).reshape(-1, 4).T
        d = -np.exp(g + beta)
        return np.column_stack([np.exp(-q), 1.0 + np.exp(beta), s * self.sigma - d, d]).ravel()

    def pullback(self, z, grad_theta) -> np.ndarray:
        t = self.theta(z).reshape(-1, 4)
        ga, gb, gc, gd = np.asarray(grad_theta, dtype=float).reshape(-1, 4).T
        a, b, _, d = t.T
        # dtheta/dz per pipe, applied transposed
        return np.column_stack([-a * ga, d * (gd - gc), (b - 1) * gb + d * (gd - gc), self.sigma * gc]).ravel()


@dataclass
class PirnModel:
    """Trainable parameters, per-sequence initial states and the current snapshot.

    ``coords`` fixes the coordinates the optimizer steps in and ``z`` is the
    current point in them; ``system.theta`` always equals ``coords.theta(z)``
    up to rounding.
    """

    system: SystemMatrices
    theta0: np.ndarray
    h0: np.ndarray
    coords: object = None
    z: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.coords is None:
            self.coords = LinearCoordinates(self.system.theta)
        if self.z is None:
            self.z = self.coords.initial()
        if self.theta.shape != self.theta0.shape:
            raise ValueError("theta and theta0 must have the same length")

    @property
    def theta(self) -> np.ndarray:
        return self.system.theta


def _as_batch(h0, U, Y=None):
    U = np.asarray(U, dtype=float)
    single = U.ndim == 2
    if single:
        U = U[None]
        h0 = np.asarray(h0, dtype=float)[None]
        Y = None if Y is None else np.asarray(Y, dtype=float)[None]
    else:
        h0 = np.asarray(h0, dtype=float)
        Y = None if Y is None else np.asarray(Y, dtype=float)
    return h0, U, Y, single


def forward(system: SystemMatrices, h0, U) -> ForwardCache:
    """Run the recurrence; hidden states are kept for the backward pass."""
    h0, U, _, _ = _as_batch(h0, U)
    B, T, _ = U.shape
    A = system.A
    drive = U @ system.B.T
    states = np.empty((B, T + 1, system.layout.n_h))
    states[:, 0] = h0
    for t in range(T):
        states[:, t + 1] = states[:, t] @ A.T + drive[:, t]
        if not np.isfinite(states[:, t + 1]).all():
            raise NonFiniteError(f"non-finite hidden state at step {t + 1}", step=t + 1)
    outputs = np.asarray(system.H @ states[:, 1:].reshape(-1, states.shape[-1]).T).T
    return ForwardCache(states, outputs.reshape(B, T, -1))


def loss(Yhat, Y, theta, theta0, reg_weight: float, weights=None, horizon=None) -> LossReport:
    """Mean squared output residual per step plus a ridge pull towards ``theta0``.

    For a batch the data term is averaged over sequences. ``weights`` scales
    each parameter deviation (default 1). ``horizon`` replaces the number of
    steps in the per-step mean, so the terms of consecutive chunks add up to
    the term of the whole sequence.
    """
    Yhat = np.asarray(Yhat, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Yhat.shape != Y.shape:
        raise ValueError(f"prediction shape {Yhat.shape} != measurement shape {Y.shape}")
    res = Yhat - Y
    T = horizon or res.shape[-2]
    per_seq = (res**2).sum(axis=(-1, -2)) / T
    data = float(np.mean(per_seq))
    reg = regularizer(theta, theta0, reg_weight, weights)
    return LossReport(data + reg, data, reg, res)


def regularizer(theta, theta0, reg_weight: float, weights=None) -> float:
    dev = np.asarray(theta, dtype=float) - np.asarray(theta0, dtype=float)
    if weights is not None:
        dev = dev * weights
    return float(reg_weight * dev @ dev)


def tbptt_split(T: int, window: int) -> list[tuple[int, int]]:
    """Contiguous ``[start, stop)`` chunks of at most ``window`` steps."""
    if T < 1:
        raise ValueError("cannot split an empty sequence")
    if window < 1:
        raise ValueError("window must be >= 1")
    return [(s, min(s + window, T)) for s in range(0, T, window)]


def backward(system: SystemMatrices, U, Y, cache: ForwardCache, theta0, reg_weight: float,
             weights=None, window: int | None = None, horizon: int | None = None) -> GradientVector:
    """Gradients of :func:`loss` w.r.t. ``theta`` and each sequence's ``h0``.

    ``horizon`` has the same meaning as in :func:`loss`. With ``window`` the adjoint is cut at chunk boundaries: each chunk starts
    from the carried state as a constant, and only the first chunk reaches
    ``h0``.
    """
    if cache is None:
        raise ValueError("backward needs the forward cache")
    _, U, Y, single = _as_batch(np.zeros(1), U, Y)
    states = cache.states
    B, T, _ = U.shape
    lay = system.layout
    res = cache.outputs - Y
    factor = 2.0 / ((horizon or T) * B)
    Hd = system.H.toarray()
    Jh = system.J[: lay.n_h]
    s_rows, s_cols = system.S.nonzero()
    s_target = np.empty(lay.n_dyn, dtype=int)
    s_target[s_rows] = s_cols
    tab = system.table
    chunks = tbptt_split(T, window or T)
    ends = {stop - 1 for _, stop in chunks}

    occ_acc = np.zeros(len(tab))
    carried = np.zeros((B, lay.n_h))
    dh0 = np.zeros((B, lay.n_h))
    for t in range(T - 1, -1, -1):
        if t in ends:
            carried[:] = 0.0
        g = factor * res[:, t] @ Hd + carried
        w = g @ Jh
        if not np.isfinite(w).all():
            raise NonFiniteError(f"non-finite adjoint at step {t + 1}", step=t + 1)
        occ_acc += np.einsum("bk,bk->k", w[:, tab.row], states[:, t + 1, tab.col])
        carried = np.zeros((B, lay.n_h))
        carried[:, s_target] = w[:, : lay.n_dyn]
        if t == 0:
            dh0 = carried.copy()
    dtheta = -np.bincount(tab.param, weights=tab.sign * occ_acc, minlength=tab.n_params)
    dev = system.theta - np.asarray(theta0, dtype=float)
    wgt = 1.0 if weights is None else np.asarray(weights) ** 2
    dtheta = dtheta + 2.0 * reg_weight * wgt * dev
    return GradientVector(dtheta, dh0[0] if single else dh0)


def rmsprop_step(grad, sq, lr, decay, eps, momentum: float = 0.0, buf=None):
    """One RMSprop step; returns ``(delta, new_sq)`` or, with ``buf``, ``(delta, new_sq, new_buf)``.

    With momentum the scaled gradient is accumulated in ``buf`` and the step
    is ``-lr * buf``.
    """
    sq = decay * sq + (1.0 - decay) * grad * grad
    scaled = grad / (np.sqrt(sq) + eps)
    if buf is None:
        return -lr * scaled, sq
    buf = momentum * buf + scaled
    return -lr * buf, sq, buf


def apply_update(model: PirnModel, grads: GradientVector, state: RMSpropState, config,
                 seq_index=None, lr_factor: float = 1.0) -> tuple[PirnModel, RMSpropState]:
    """Step ``theta`` and the selected ``h0`` rows; refresh the inverse incrementally.

    ``grads.theta`` is taken w.r.t. the optimizer coordinates (see
    ``model.coords.pullback``). ``seq_index`` picks the rows of ``model.h0``
    that ``grads.h0`` belongs to.
    """
    if not (np.isfinite(grads.theta).all() and np.isfinite(grads.h0).all()):
        raise NonFiniteError("gradient is not finite")
    decay, eps = config.rms_decay, config.rms_eps
    mom = getattr(config, "rms_momentum", 0.0)
    dz, theta_sq, theta_buf = rmsprop_step(grads.theta, state.theta_sq, config.lr_theta * lr_factor,
                                           decay, eps, mom, state.theta_buf)
    z = model.z + dz
    dtheta = model.coords.theta(z) - model.theta
    idx = np.arange(model.h0.shape[0]) if seq_index is None else np.asarray(seq_index)
    gh = np.asarray(grads.h0).reshape(len(idx), -1)
    dh, h_sq, h_buf = rmsprop_step(gh, state.h0_sq[idx], config.lr_state * lr_factor, decay, eps,
                                   mom, state.h0_buf[idx])
    h0 = model.h0.copy()
    h0[idx] += dh
    h0_sq = state.h0_sq.copy()
    h0_sq[idx] = h_sq
    h0_buf = state.h0_buf.copy()
    h0_buf[idx] = h_buf
    system = woodbury_update(model.system, dtheta, config.reinversion_period)
    new_state = RMSpropState(theta_sq, h0_sq, state.steps + 1, theta_buf, h0_buf)
    return replace(model, system=system, h0=h0, z=z), new_state
