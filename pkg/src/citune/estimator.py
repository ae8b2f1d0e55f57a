"""Consensus + innovations estimator and its error systems.

State vectors stack the agent estimates, ``x = col(theta_1, ..., theta_n)``.
The stacked output map is

    Lambda(t) = [ blockdiag(C_1(t), ..., C_n(t)) ;  sqrt(alpha) * (D(t)^T kron I_N) ]

so the estimator is the gradient flow ``dx/dt = -Gamma Lambda^T (Lambda x - y)``.
Everything here integrates with fixed-step RK4, segment by segment between
graph switching times.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .excitation import RegressorBank
from .integrate import rk4, step_grid
from .netgraph import GraphSchedule, incidence_for_interval, incidence_matrix


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EstimatorConfig:
    gamma_bar: np.ndarray
    alpha: float
    N: int
    h: float = 1e-3
    horizon: float = 50.0

    def __post_init__(self):
        G = np.array(self.gamma_bar, dtype=float)
        object.__setattr__(self, "gamma_bar", G)
        if self.alpha <= 0:
            raise ConfigError("alpha must be strictly positive (the consensus gain is assumed positive)")
        if self.h <= 0 or self.horizon < self.h:
            raise ConfigError("need h > 0 and horizon >= h")
        if G.ndim != 2 or G.shape[0] != G.shape[1] or G.shape[0] % self.N:
            raise ConfigError(f"Gamma must be square with size a multiple of N={self.N}")
        n = G.shape[0] // self.N
        mask = np.kron(np.eye(n), np.ones((self.N, self.N))) == 0
        if np.any(G[mask] != 0):
            raise ConfigError("Gamma must be block diagonal with N x N blocks")
        for i in range(n):
            blk = G[i * self.N:(i + 1) * self.N, i * self.N:(i + 1) * self.N]
            if not np.allclose(blk, blk.T, rtol=0, atol=1e-12):
                raise ConfigError(f"Gamma block {i + 1} is not symmetric")
            try:
                np.linalg.cholesky(blk)
            except np.linalg.LinAlgError:
                raise ConfigError(f"Gamma block {i + 1} is not positive definite (Cholesky failed)")

    @classmethod
    def scalar(cls, gain, n, N, alpha, **kw):
        return cls(gain * np.eye(n * N), alpha, N, **kw)

    @property
    def n(self) -> int:
        return self.gamma_bar.shape[0] // self.N

    @property
    def r1(self) -> float:
        return float(np.linalg.eigvalsh(self.gamma_bar)[-1])

    def gamma_extremes(self):
        ev = np.linalg.eigvalsh(self.gamma_bar)
        return float(ev[0]), float(ev[-1])


@dataclass
class StackedState:
    x_hat: np.ndarray
    t: float


@dataclass
class OutputMap:
    matrix: np.ndarray
    top: np.ndarray
    bottom: np.ndarray
    n_e: int

    def gram(self) -> np.ndarray:
        return self.matrix.T @ self.matrix


def _check_dims(bank: RegressorBank, g: GraphSchedule, nN: int | None = None):
    if bank.n != g.n:
        raise ValueError(f"regressor bank has {bank.n} agents, graph has {g.n} nodes")
    if nN is not None and nN != bank.n * bank.N:
        raise ValueError(f"state size {nN} does not match n*N = {bank.n * bank.N}")


def block_diag_regressor(C: np.ndarray) -> np.ndarray:
    n, N_y, N = C.shape
    out = np.zeros((n * N_y, n * N))
    for i in range(n):
        out[i * N_y:(i + 1) * N_y, i * N:(i + 1) * N] = C[i]
    return out


def assemble_lambda(bank: RegressorBank, g: GraphSchedule, alpha: float, t: float) -> OutputMap:
    _check_dims(bank, g)
    top = block_diag_regressor(bank.at(t))
    D = incidence_matrix(g, t)
    bottom = np.sqrt(alpha) * np.kron(D.T, np.eye(bank.N))
    return OutputMap(np.vstack([top, bottom]), top, bottom, D.shape[1])


def lambda_gram_series(C: np.ndarray, L: np.ndarray, alpha: float) -> np.ndarray:
    """Lambda^T Lambda for regressor samples C of shape (K, n, N_y, N)."""
    K, n, _, N = C.shape
    out = np.zeros((K, n * N, n * N))
    blocks = np.einsum("kiyn,kiym->kinm", C, C)
    for i in range(n):
        out[:, i * N:(i + 1) * N, i * N:(i + 1) * N] = blocks[:, i]
    out += alpha * np.kron(L, np.eye(N))
    return out


class _Segment:
    """Output map pieces on one graph interval; fast products for RK4 stages."""

    def __init__(self, C_half, D, alpha, gamma, y_top=None, y_bot=None, drift=None):
        self.C = C_half
        self.D = D
        self.DT = D.T.copy()
        self.sa = np.sqrt(alpha)
        self.L = alpha * (D @ D.T)
        self.gamma = gamma
        self.y_top = y_top
        self.y_bot = y_bot
        self.drift = drift
        self.n, self.N = C_half.shape[1], C_half.shape[3]

    def _gamma_apply(self, v):
        if self.gamma.ndim == 3:
            return np.einsum("...ij,...j->...i", self.gamma, v)
        return v @ self.gamma

    def gradient(self, j, x):
        X = x.reshape(x.shape[:-1] + (self.n, self.N))
        Cj = self.C[j]
        r = np.einsum("iyn,...in->...iy", Cj, X)
        if self.y_top is not None:
            r = r - self.y_top[j]
        g = np.einsum("iyn,...iy->...in", Cj, r)
        if self.y_bot is None:
            g = g + self.L @ X
        else:
            rb = self.sa * (self.DT @ X) - self.y_bot[j]
            g = g + self.sa * (self.D @ rb)
        return g.reshape(x.shape)

    def rhs(self, j, x):
        dx = -self._gamma_apply(self.gradient(j, x))
        if self.drift is not None:
            dx = dx - self.drift[j]
        return dx


def ci_rhs(state: StackedState, config: EstimatorConfig, bank, g, y_measured) -> np.ndarray:
    """Right-hand side in per-agent form: -a G Lbar x - G Cbar^T (Cbar x - y)."""
    x = np.asarray(state.x_hat, dtype=float)
    _check_dims(bank, g, x.size)
    C = bank.at(state.t)
    Cb = block_diag_regressor(C)
    L = incidence_matrix(g, state.t)
    Lbar = np.kron(L @ L.T, np.eye(bank.N))
    y1 = np.asarray(y_measured, dtype=float).ravel()
    G = config.gamma_bar
    return -config.alpha * G @ (Lbar @ x) - G @ (Cb.T @ (Cb @ x - y1))


def gradient_rhs(state: StackedState, config: EstimatorConfig, bank, g, y_measured) -> np.ndarray:
    """Same dynamics as :func:`ci_rhs` written as -G Lambda^T (Lambda x - y)."""
    x = np.asarray(state.x_hat, dtype=float)
    om = assemble_lambda(bank, g, config.alpha, state.t)
    y = np.concatenate([np.asarray(y_measured, dtype=float).ravel(), np.zeros(om.bottom.shape[0])])
    return -config.gamma_bar @ (om.matrix.T @ (om.matrix @ x - y))


def affine_disturbed_rhs(state: StackedState, config: EstimatorConfig, bank, g, delta_iss) -> np.ndarray:
    """Error dynamics under an additive disturbance: -G Lambda^T Lambda x + delta."""
    om = assemble_lambda(bank, g, config.alpha, state.t)
    x = np.asarray(state.x_hat, dtype=float)
    return -config.gamma_bar @ (om.gram() @ x) + np.asarray(delta_iss, dtype=float)


def _theta_series(theta, ts):
    if callable(theta):
        return np.asarray(theta(ts), dtype=float).reshape(len(ts), -1)
    th = np.asarray(theta, dtype=float).ravel()
    return np.broadcast_to(th, (len(ts), th.size))


@dataclass
class Trajectory:
    t: np.ndarray
    x_hat: np.ndarray
    x_tilde: np.ndarray
    bank: RegressorBank = field(repr=False)
    graph: GraphSchedule = field(repr=False)
    alpha: float = 1.0

    def ytilde(self, k: int) -> np.ndarray:
        om = assemble_lambda(self.bank, self.graph, self.alpha, float(self.t[k]))
        return om.matrix @ self.x_tilde[k]

    def error_norms(self) -> np.ndarray:
        return np.linalg.norm(self.x_tilde, axis=-1)


def _run_segments(config, bank, g, x0, make_segment, batch_shape=()):
    """Integrate across graph intervals; returns (t, states)."""
    ts, xs = [], []
    x = np.array(x0, dtype=float)
    for a, b, k in g.segments(0.0, config.horizon):
        n_steps, h = step_grid(a, b, config.h)
        t_half = a + 0.5 * h * np.arange(2 * n_steps + 1)
        t_half[-1] = b
        seg = make_segment(t_half, incidence_for_interval(g, k))
        out = rk4(seg.rhs, x, h, n_steps)
        t_nodes = t_half[::2]
        if ts:
            out, t_nodes = out[1:], t_nodes[1:]
        ts.append(t_nodes)
        xs.append(out)
        x = out[-1]
    return np.concatenate(ts), np.concatenate(xs)


def _gamma_for(config, gamma_override):
    return config.gamma_bar if gamma_override is None else np.asarray(gamma_override, dtype=float)


def simulate_nominal(
    config: EstimatorConfig,
    bank: RegressorBank,
    g: GraphSchedule,
    x0,
    theta,
    measurements: Callable | None = None,
) -> Trajectory:
    """Run the estimator with exact measurements y_i = C_i theta (or supplied ones).

    ``theta`` is a constant vector or a vectorized callable ``ts -> (K, N)``.
    ``measurements`` optionally maps times to stacked outputs ``(K, n*N_y)``.
    """
    _check_dims(bank, g, np.size(x0))
    n, N, N_y = bank.n, bank.N, bank.N_y

    def make(t_half, D):
        C = bank.sample(t_half)
        if measurements is None:
            y = np.einsum("kiyn,kn->kiy", C, _theta_series(theta, t_half))
        else:
            y = np.asarray(measurements(t_half), dtype=float).reshape(len(t_half), n, N_y)
        return _Segment(C, D, config.alpha, config.gamma_bar, y_top=y)

    t, xh = _run_segments(config, bank, g, x0, make)
    truth = np.tile(_theta_series(theta, t), (1, n))
    return Trajectory(t, xh, xh - truth, bank, g, config.alpha)


def simulate_error(config, bank, g, x0_err, gamma_override=None) -> Trajectory:
    """Nominal error system dx/dt = -G Lambda^T Lambda x (optionally batched gains)."""
    G = _gamma_for(config, gamma_override)

    def make(t_half, D):
        return _Segment(bank.sample(t_half), D, config.alpha, G)

    t, xe = _run_segments(config, bank, g, x0_err, make)
    return Trajectory(t, xe, xe, bank, g, config.alpha)


@dataclass
class DisturbanceSpec:
    """Disturbance delta(t) and its projections.

    ``delta`` maps an array of times to ``(K, r)``.  ``delta2_bar`` is either
    a fixed matrix or a callable ``n_e -> matrix`` for switching graphs.
    ``q``/``w`` define the performance output; ``output_error`` selects
    z = Q Lambda x + W delta instead of z = Q x + W delta.
    """

    delta: Callable
    delta1_bar: np.ndarray
    delta2_bar: np.ndarray | Callable
    q: np.ndarray | None = None
    w: np.ndarray | None = None
    output_error: bool = True

    @property
    def r(self) -> int:
        return self.delta1_bar.shape[1]

    def delta2_for(self, n_e: int) -> np.ndarray:
        if callable(self.delta2_bar):
            return np.asarray(self.delta2_bar(n_e), dtype=float)
        return np.asarray(self.delta2_bar, dtype=float)

    def check(self, n, N, N_y, n_e):
        if self.delta1_bar.shape[0] != n * N:
            raise ValueError(f"Delta1_bar must have {n * N} rows")
        D2 = self.delta2_for(n_e)
        if D2.shape != (n * N_y + N * n_e, self.r):
            raise ValueError(
                f"Delta2_bar must be {(n * N_y + N * n_e, self.r)}, got {D2.shape}"
            )
        if self.q is not None:
            cols = n * N_y + N * n_e if self.output_error else n * N
            if self.q.shape[1] != cols or self.w.shape != (self.q.shape[0], self.r):
                raise ValueError("performance output matrices have inconsistent shapes")


@dataclass
class DisturbedTrajectory:
    t: np.ndarray
    x_tilde: np.ndarray
    z: np.ndarray | None
    delta: np.ndarray


def simulate_disturbed(
    config: EstimatorConfig,
    bank: RegressorBank,
    g: GraphSchedule,
    dist: DisturbanceSpec,
    x0_err=None,
    gamma_override=None,
) -> DisturbedTrajectory:
    """Integrate dx/dt = -G L^T L x + (G L^T D2 - D1) delta from ``x0_err``.

    ``gamma_override`` may be a stack of gains of shape (B, nN, nN); the run
    is then batched and ``x_tilde`` has shape (K, B, nN).
    """
    n, N, N_y = bank.n, bank.N, bank.N_y
    nN = n * N
    _check_dims(bank, g)
    G = _gamma_for(config, gamma_override)
    batch = G.shape[:-2]
    x0 = np.zeros(batch + (nN,)) if x0_err is None else np.broadcast_to(
        np.asarray(x0_err, dtype=float), batch + (nN,)).copy()

    def make(t_half, D):
        n_e = D.shape[1]
        dist.check(n, N, N_y, n_e)
        d = np.asarray(dist.delta(t_half), dtype=float).reshape(len(t_half), -1)
        D2d = d @ dist.delta2_for(n_e).T
        y_top = D2d[:, :n * N_y].reshape(-1, n, N_y)
        y_bot = D2d[:, n * N_y:].reshape(-1, n_e, N)
        drift = d @ dist.delta1_bar.T
        if not np.any(D2d):
            # no output perturbation: keep the nominal arithmetic bit for bit
            y_top = y_bot = None
        return _Segment(bank.sample(t_half), D, config.alpha, G,
                        y_top=y_top, y_bot=y_bot, drift=drift if np.any(drift) else None)

    t, xe = _run_segments(config, bank, g, x0, make)
    delta = np.asarray(dist.delta(t), dtype=float).reshape(len(t), -1)
    z = performance_output(config, bank, g, dist, t, xe, delta) if dist.q is not None else None
    return DisturbedTrajectory(t, xe, z, delta)


def lambda_apply_series(bank, g, alpha, t, x) -> list:
    """Lambda(t_k) x_k grouped by graph interval.

    Returns ``(mask, values)`` pairs; x has shape (K, ..., nN).  At a
    switching time the new interval's graph is used.
    """
    t = np.asarray(t, dtype=float)
    C = bank.sample(t)
    n, N = bank.n, bank.N
    X = x.reshape(x.shape[:-1] + (n, N))
    top = np.einsum("kiyn,k...in->k...iy", C, X).reshape(x.shape[:-1] + (-1,))
    idx = np.searchsorted(np.asarray(g.t_starts), t, side="right") - 1
    outs = []
    for k in np.unique(idx):
        sel = idx == k
        D = incidence_for_interval(g, int(k))
        bot = np.sqrt(alpha) * np.einsum("ie,k...in->k...en", D, X[sel])
        outs.append((sel, np.concatenate([top[sel], bot.reshape(bot.shape[:-2] + (-1,))], axis=-1)))
    return outs


def performance_output(config, bank, g, dist: DisturbanceSpec, t, x, delta) -> np.ndarray:
    """z = Q Lambda x + W delta (output-error form) or z = Q x + W delta."""
    wd = delta @ dist.w.T
    extra = (1,) * (x.ndim - 2)
    wd = wd.reshape(wd.shape[:1] + extra + wd.shape[1:])
    if not dist.output_error:
        return x @ dist.q.T + wd
    z = np.empty(x.shape[:-1] + (dist.q.shape[0],))
    for sel, lx in lambda_apply_series(bank, g, config.alpha, t, x):
        z[sel] = lx @ dist.q.T
    return z + wd


def simulate_iss(config, bank, g, delta_iss: Callable, x0_err) -> Trajectory:
    """Error dynamics with an additive disturbance ``delta_iss(ts) -> (K, nN)``."""

    def make(t_half, D):
        drift = -np.asarray(delta_iss(t_half), dtype=float).reshape(len(t_half), -1)
        return _Segment(bank.sample(t_half), D, config.alpha, config.gamma_bar, drift=drift)

    t, xe = _run_segments(config, bank, g, x0_err, make)
    return Trajectory(t, xe, xe, bank, g, config.alpha)


def random_initial_estimate(n, N, seed=0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(-1.0, 1.0, n * N)
