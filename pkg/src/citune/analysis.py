"""Observability Gramians, excitation-based bounds and the strong Lyapunov function.

Notation: A(t) = Lambda(t)^T Lambda(t) and the nominal error system is
dx/dt = -Gamma A(t) x with transition matrix Phi(s, t).  The window Gramian

    M(t, t-T) = int_{t-T}^{t} Phi(s,t)^T A(s) Phi(s,t) ds

is computed two ways: forward through its matrix ODE, and by quadrature
with Phi integrated backwards from Phi(t, t) = I.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimator import EstimatorConfig, _check_dims
from .excitation import ExcitationReport, RegressorBank, piecewise_grid
from .integrate import rk4, simpson, step_grid
from .netgraph import GraphSchedule, SpectralBounds, incidence_for_interval, integrated_laplacian


class BoundError(ValueError):
    pass


@dataclass(frozen=True)
class GramianResult:
    M: np.ndarray
    window: tuple[float, float]
    method: str
    alpha: float
    gamma: np.ndarray | None = None

    def eig_extremes(self):
        ev = np.linalg.eigvalsh(self.M)
        return float(ev[0]), float(ev[-1])


@dataclass(frozen=True)
class BoundSet:
    iota2_lower: float
    iota2_upper: float
    iota3_lower: float
    iota3_upper: float
    phi1: float
    phi2: float
    kappa1: float
    kappa2: float
    window: float

    def __post_init__(self):
        if not (self.iota3_upper >= self.iota3_lower > 0):
            raise BoundError("need iota3_upper >= iota3_lower > 0")
        if not (self.kappa1 >= self.kappa2 > 0):
            raise BoundError("need kappa1 >= kappa2 > 0")

    def to_dict(self) -> dict:
        return {
            "iota2": [self.iota2_lower, self.iota2_upper],
            "iota3": [self.iota3_lower, self.iota3_upper],
            "phi1": self.phi1,
            "phi2": self.phi2,
            "kappa": [self.kappa2, self.kappa1],
        }


def _as_gamma(gamma, nN):
    G = np.asarray(gamma, dtype=float)
    if G.ndim == 0:
        return float(G) * np.eye(nN)
    return G


def _block_gram(C):
    """blockdiag(C_i^T C_i) for samples C of shape (..., n, N_y, N)."""
    *lead, n, _, N = C.shape
    blocks = np.einsum("...iyn,...iym->...inm", C, C)
    out = np.zeros(tuple(lead) + (n * N, n * N))
    for i in range(n):
        out[..., i * N:(i + 1) * N, i * N:(i + 1) * N] = blocks[..., i, :, :]
    return out


def _lambda_gram(bank, g, alpha, times, k):
    """A = Lambda^T Lambda at ``times`` (any shape) using graph interval ``k``."""
    C = bank.sample(times.ravel()).reshape(times.shape + (bank.n, bank.N_y, bank.N))
    D = incidence_for_interval(g, k)
    return _block_gram(C) + alpha * np.kron(D @ D.T, np.eye(bank.N))


def gramian_oi(bank: RegressorBank, g: GraphSchedule, alpha: float, t: float, T: float,
               h_q: float = 5e-4) -> GramianResult:
    """Integral of Lambda^T Lambda over [t-T, t] (Simpson for the regressors,
    exact for the piecewise-constant Laplacian)."""
    _check_dims(bank, g)
    if T <= 0 or t < T:
        raise ValueError("need T > 0 and t >= T")
    ts, w = piecewise_grid(t - T, t, h_q, bank.node_times(t - T, t))
    M = np.einsum("k,knm->nm", w, _block_gram(bank.sample(ts)))
    M = M + alpha * np.kron(integrated_laplacian(g, t - T, t), np.eye(bank.N))
    return GramianResult(0.5 * (M + M.T), (t - T, t), "quadrature", alpha)


def _pieces(g, a, b, h):
    out = []
    for s0, s1, k in g.segments(a, b):
        n_steps, he = step_grid(s0, s1, h)
        out.append((s0, s1, k, n_steps, he))
    return out


def _crosses(g, a, b):
    return any(a < bp < b for bp in g.breakpoints)


def _ode_piece(A, G, M0, h, n_steps):
    def rhs(j, M):
        X = A[:, j] @ G @ M
        return X + np.swapaxes(X, -1, -2) + A[:, j]

    return rk4(rhs, M0, h, n_steps, record=False)


def _transition_piece(A, G, Phi0, h, n_steps, w0):
    """Backward step from the end of a piece.  A is indexed on the reversed
    half-grid.  Returns (Phi at the start, int f, int w f) with
    w = s - t + T decreasing by h per node from ``w0``."""
    def rhs(j, P):
        return -G @ (A[:, j] @ P)

    Phis = rk4(rhs, Phi0, -h, n_steps)
    An = A[:, ::2]
    f = np.einsum("kbji,bkjl,kblm->kbim", Phis, An, Phis)
    w = w0 - h * np.arange(n_steps + 1)
    return Phis[-1], simpson(f, h), simpson(w[:, None, None, None] * f, h)


def _window_batch(bank, g, alpha, G, t0s, T, h, mode):
    """Batched windows [t0, t0+T] inside one graph interval."""
    n_steps, he = step_grid(0.0, T, h)
    offs = 0.5 * he * np.arange(2 * n_steps + 1)
    offs[-1] = T
    k = g.interval_index(float(t0s[0]))
    nN = bank.n * bank.N
    if mode == "ode":
        A = _lambda_gram(bank, g, alpha, t0s[:, None] + offs[None, :], k)
        return _ode_piece(A, G, np.zeros((t0s.size, nN, nN)), he, n_steps), None
    ends = t0s + T
    A = _lambda_gram(bank, g, alpha, ends[:, None] - offs[None, :], k)
    eye = np.broadcast_to(np.eye(nN), (t0s.size, nN, nN))
    _, M, Pi = _transition_piece(A, G, eye, he, n_steps, T)
    return M, Pi


def _window_single(bank, g, alpha, G, t0, T, h, mode):
    """One window that may cross graph breakpoints; pieces chained."""
    nN = bank.n * bank.N
    pieces = _pieces(g, t0, t0 + T, h)
    if mode == "ode":
        M = np.zeros((1, nN, nN))
        for a, b, k, n_steps, he in pieces:
            offs = a + 0.5 * he * np.arange(2 * n_steps + 1)
            offs[-1] = b
            M = _ode_piece(_lambda_gram(bank, g, alpha, offs[None, :], k), G, M, he, n_steps)
        return M[0], None
    t = t0 + T
    Phi = np.eye(nN)[None]
    M = np.zeros((1, nN, nN))
    Pi = np.zeros((1, nN, nN))
    for a, b, k, n_steps, he in reversed(pieces):
        ts = b - 0.5 * he * np.arange(2 * n_steps + 1)
        ts[-1] = a
        Phi, m, p = _transition_piece(_lambda_gram(bank, g, alpha, ts[None, :], k), G, Phi,
                                      he, n_steps, b - t + T)
        M, Pi = M + m, Pi + p
    return M[0], Pi[0]


def _windows(bank, g, alpha, gamma, t0s, T, h, mode, chunk=256):
    _check_dims(bank, g)
    if T <= 0:
        raise ValueError("window T must be positive")
    t0s = np.atleast_1d(np.asarray(t0s, dtype=float))
    if t0s.size and t0s.min() < 0:
        raise ValueError("windows must start at t >= 0")
    nN = bank.n * bank.N
    G = _as_gamma(gamma, nN)
    M = np.empty((t0s.size, nN, nN))
    Pi = np.empty_like(M) if mode == "transition" else None
    single = np.array([_crosses(g, a, a + T) for a in t0s], dtype=bool)
    for i in np.flatnonzero(single):
        m, p = _window_single(bank, g, alpha, G, t0s[i], T, h, mode)
        M[i] = m
        if Pi is not None:
            Pi[i] = p
    rest = np.flatnonzero(~single)
    ks = np.array([g.interval_index(a) for a in t0s[rest]], dtype=int)
    for k in np.unique(ks):
        idx = rest[ks == k]
        for a in range(0, idx.size, chunk):
            sel = idx[a:a + chunk]
            m, p = _window_batch(bank, g, alpha, G, t0s[sel], T, h, mode)
            M[sel] = m
            if Pi is not None:
                Pi[sel] = p
    if not np.all(np.isfinite(M)):
        raise BoundError("non-finite Gramian entries")
    M = 0.5 * (M + np.swapaxes(M, -1, -2))
    if Pi is not None:
        Pi = 0.5 * (Pi + np.swapaxes(Pi, -1, -2))
    return M, Pi


def gramian_ode_batch(bank, g, alpha, gamma, starts, T, h=1e-3) -> np.ndarray:
    """Solve dM/dt = A G M + M G A + A, M(t0) = 0, on [t0, t0+T] for each start."""
    return _windows(bank, g, alpha, gamma, starts, T, h, "ode")[0]


def gramian_ode(bank, g, config: EstimatorConfig, t0: float, T: float, h: float | None = None) -> GramianResult:
    M = gramian_ode_batch(bank, g, config.alpha, config.gamma_bar, [t0], T, h or config.h)[0]
    return GramianResult(M, (t0, t0 + T), "ode", config.alpha, config.gamma_bar)


def transition_gramians(bank, g, alpha, gamma, ends, T, h=1e-3):
    """(M, Pi) for windows [t-T, t] by backward transition matrices and Simpson.

    Pi is the weighted integral int (s - t + T) Phi^T A Phi ds that enters
    the Lyapunov matrix.
    """
    ends = np.atleast_1d(np.asarray(ends, dtype=float))
    if ends.size and ends.min() < T:
        raise ValueError("window ends must be >= T")
    return _windows(bank, g, alpha, gamma, ends - T, T, h, "transition")


def gramian_quadrature(bank, g, config: EstimatorConfig, t: float, T: float, h: float | None = None) -> GramianResult:
    M, _ = transition_gramians(bank, g, config.alpha, config.gamma_bar, [t], T, h or config.h)
    return GramianResult(M[0], (t - T, t), "quadrature", config.alpha, config.gamma_bar)


def output_gramian_bounds(report: ExcitationReport, spectral: SpectralBounds, alpha: float, n: int,
                          grid: int = 10_000, tol: float = 1e-8):
    """(iota2_lower, iota2_upper) for the window Gramian of the output map.

    The lower bound minimizes over s = |a|^2 in [0, 1] the larger of the
    consensus term alpha*lambda*(1-s) and the excitation term
    (iota1/n) s - 2 r2 T sqrt(s(1-s)).  The grid is zoomed around the
    minimizer until the value changes by less than ``tol`` relative.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    T = report.window
    if abs(spectral.window - T) > 1e-12 * max(1.0, T):
        raise ValueError("excitation and connectivity windows differ")
    upper = T * (report.r2 + alpha * spectral.r3)
    if not np.isfinite(spectral.lambda_lower):
        lower = report.iota1_lower / n
    else:
        al = alpha * spectral.lambda_lower
        c1 = report.iota1_lower / n
        c2 = 2.0 * report.r2 * T

        def obj(u):
            # u = 1 - s keeps full precision near s = 1, where the minimum sits
            # when the excitation constant is small
            return np.maximum(al * u, c1 * (1.0 - u) - c2 * np.sqrt(np.clip(u * (1.0 - u), 0, None)))

        lo, hi = 0.0, 1.0
        lower = np.inf
        for _ in range(200):
            u = np.linspace(lo, hi, grid + 1)
            v = obj(u)
            i = int(np.argmin(v))
            new = float(v[i])
            done = abs(new - lower) <= tol * abs(new)
            lower = min(lower, new)
            if done or hi - lo < 1e-300:
                break
            lo, hi = u[max(i - 1, 0)], u[min(i + 1, grid)]
    if not lower > 0:
        raise BoundError("output Gramian lower bound not positive for these constants")
    return float(lower), float(upper)


def error_gramian_bounds(iota2_lower: float, iota2_upper: float, r1: float, branch_tol: float = 1e-9):
    """(iota3_lower, iota3_upper, phi1, phi2) for the error-system Gramian.

    At phi1 = 1 the lower bound uses the continuous limit
    iota2_lower^2 / (4 iota2_upper) of the general expression.
    """
    if not (iota2_upper >= iota2_lower > 0 and r1 > 0):
        raise ValueError("need iota2_upper >= iota2_lower > 0 and r1 > 0")
    lo, up = iota2_lower, iota2_upper
    phi1 = 0.5 * r1 ** 2 * up ** 2
    x = 2.0 * r1 * up
    phi2 = 0.25 * np.expm1(x) - 0.5 * r1 * up
    iota3_upper = (np.sqrt(up - lo + phi2 * lo) + np.sqrt(up)) ** 2
    if abs(phi1 - 1.0) < branch_tol:
        iota3_lower = lo ** 2 / (4.0 * up)
    else:
        # rationalized form, free of cancellation near phi1 = 1
        iota3_lower = (lo / (np.sqrt(up - lo + phi1 * lo) + np.sqrt(up))) ** 2
    return float(iota3_lower), float(iota3_upper), float(phi1), float(phi2)


def kappas(gamma, T: float, iota3_upper: float):
    ev = np.linalg.eigvalsh(np.atleast_2d(np.asarray(gamma, dtype=float)))
    kappa1 = 0.5 * T / ev[0] + T * iota3_upper
    kappa2 = 0.5 * T / ev[-1]
    return float(kappa1), float(kappa2)


def bound_set(report: ExcitationReport, spectral: SpectralBounds, config: EstimatorConfig,
              iota3=None) -> BoundSet:
    """Analytic bounds; ``iota3`` optionally replaces the error Gramian pair (e.g.
    with the empirical values)."""
    i2l, i2u = output_gramian_bounds(report, spectral, config.alpha, config.n)
    i3l, i3u, p1, p2 = error_gramian_bounds(i2l, i2u, config.r1)
    if iota3 is not None:
        i3l, i3u = iota3
    k1, k2 = kappas(config.gamma_bar, report.window, i3u)
    return BoundSet(i2l, i2u, i3l, i3u, p1, p2, k1, k2, report.window)


def empirical_iota3(bank, g, alpha, gamma_low, gamma_high, T: float, n_starts: int = 1000,
                    horizon: float = 50.0, h: float = 1e-3, t_min: float = 0.0):
    """Sampled Gramian extremes over ``n_starts`` windows inside [t_min, horizon].

    The lower value uses the smallest gains and the upper value the
    largest.  Returns (iota3_lower, iota3_upper).
    """
    if n_starts < 1:
        raise ValueError("n_starts must be >= 1")
    if horizon - T < t_min:
        raise ValueError("no window fits between t_min and the horizon")
    starts = np.linspace(t_min, horizon - T, n_starts) if n_starts > 1 else np.array([t_min])
    ev_low = np.linalg.eigvalsh(gramian_ode_batch(bank, g, alpha, gamma_low, starts, T, h))
    lows = ev_low[:, 0]
    if np.array_equal(np.asarray(gamma_low), np.asarray(gamma_high)):
        highs = ev_low[:, -1]
    else:
        highs = np.linalg.eigvalsh(gramian_ode_batch(bank, g, alpha, gamma_high, starts, T, h))[:, -1]
    worst = int(np.argmin(lows))
    if lows[worst] <= 0:
        raise BoundError(
            f"Gramian not positive definite on window starting at t={starts[worst]:.6g} "
            f"(lambda_min={lows[worst]:.3e})"
        )
    return float(lows.min()), float(highs.max())


@dataclass(frozen=True)
class LyapunovValue:
    V: float
    P_spectrum: np.ndarray
    sandwich_ok: bool | None


def lyapunov_matrices(bank, g, config: EstimatorConfig, ts, T: float, h: float | None = None):
    """P(t) = (T/2) Gamma^{-1} + Pi(t) for each t in ``ts``; also returns M(t, t-T)."""
    M, Pi = transition_gramians(bank, g, config.alpha, config.gamma_bar, ts, T, h or config.h)
    P = 0.5 * T * np.linalg.inv(config.gamma_bar) + Pi
    return P, M


def lyapunov_value(x_tilde, t: float, bank, g, config: EstimatorConfig, T: float,
                   bounds: BoundSet | None = None, h: float | None = None,
                   rel_tol: float = 1e-8) -> LyapunovValue:
    if t < T:
        raise ValueError("need t >= T")
    P, _ = lyapunov_matrices(bank, g, config, [t], T, h)
    x = np.asarray(x_tilde, dtype=float)
    V = float(x @ P[0] @ x)
    spec = np.linalg.eigvalsh(P[0])
    ok = None
    if bounds is not None:
        nx = float(x @ x)
        slack = rel_tol * max(bounds.kappa1 * nx, 1e-300)
        ok = bool(bounds.kappa2 * nx - slack <= V <= bounds.kappa1 * nx + slack)
    return LyapunovValue(V, spec, ok)


def convergence_bound(bounds: BoundSet, x0_norm: float, t, t0: float = 0.0):
    """sqrt(k1/k2) |x(t0)| exp(-iota3 (t - t0) / (2 k1))."""
    t = np.asarray(t, dtype=float)
    if np.any(t < t0):
        raise ValueError("need t >= t0")
    k1, k2 = bounds.kappa1, bounds.kappa2
    out = np.sqrt(k1 / k2) * x0_norm * np.exp(-bounds.iota3_lower * (t - t0) / (2.0 * k1))
    return float(out) if out.ndim == 0 else out


def iss_gain_bound(bounds: BoundSet) -> float:
    """(2 k1 / iota3) sqrt(k1 / k2), evaluated as stated (the beta -> 1 limit
    of the ISS argument)."""
    k1, k2 = bounds.kappa1, bounds.kappa2
    return float(2.0 * k1 / bounds.iota3_lower * np.sqrt(k1 / k2))
