"""L2-gain tuning of the estimator gains through a four-scalar LMI.

At fixed c2 the block matrix is affine in (c1, gamma1, gamma2, gamma).  We
minimize gamma by bisection; each feasibility question over (c1, gamma1,
gamma2) is answered by a central-cut ellipsoid method driven by the
eigenvector subgradient of lambda_max.  Every reported point is checked
again by :func:`feasibility_oracle`.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

VARIANTS = ("standard", "output_error")
EPS_FEAS = 1e-8


class TuningError(ValueError):
    pass


class InfeasibleError(TuningError):
    def __init__(self, msg, best_residual=None):
        super().__init__(msg if best_residual is None else f"{msg} (best residual {best_residual:.3e})")
        self.best_residual = best_residual


def _variant(v):
    if v in ("oe", "OE"):
        v = "output_error"
    if v not in VARIANTS:
        raise ValueError(f"unknown variant {v!r}")
    return v


@dataclass(frozen=True)
class LmiInstance:
    """Scalars, excitation constants and projections of one LMI.

    ``q`` acts on the state (p x nN) in the standard variant and on the
    stacked output error (p x (n N_y + N n_e)) in the output-error variant.
    """

    gamma: float
    gamma1: float
    gamma2: float
    c1: float
    c2: float
    alpha: float
    iota3_lower: float
    iota3_upper: float
    r4: float
    T: float
    delta1_bar: np.ndarray = field(repr=False)
    delta2_bar: np.ndarray = field(repr=False)
    q: np.ndarray = field(repr=False)
    w: np.ndarray = field(repr=False)

    def __post_init__(self):
        for name in ("gamma", "gamma1", "gamma2", "c1", "c2", "alpha",
                     "iota3_lower", "iota3_upper", "r4", "T"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.iota3_upper < self.iota3_lower:
            raise ValueError("need iota3_upper >= iota3_lower")
        for name in ("delta1_bar", "delta2_bar", "q", "w"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        r = self.r
        if self.delta2_bar.shape[1] != r or self.w.shape[1] != r:
            raise ValueError("Delta1_bar, Delta2_bar and W need the same column count r")
        if self.q.shape[0] != self.w.shape[0]:
            raise ValueError("Q and W need the same row count p")
        if not np.allclose(self.w.T @ self.w, np.eye(r), atol=1e-12):
            raise ValueError("W^T W must equal the identity")
        if self.q.shape[1] and not np.allclose(self.q.T @ self.w, 0.0, atol=1e-12):
            raise ValueError("Q^T W must vanish")

    @property
    def nN(self) -> int:
        return self.delta1_bar.shape[0]

    @property
    def m(self) -> int:
        return self.delta2_bar.shape[0]

    @property
    def p(self) -> int:
        return self.q.shape[0]

    @property
    def r(self) -> int:
        return self.delta1_bar.shape[1]

    def scalars(self) -> dict:
        return {k: getattr(self, k) for k in ("gamma", "gamma1", "gamma2", "c1", "c2", "alpha")}

    def with_scalars(self, **kw) -> "LmiInstance":
        return replace(self, **kw)


def _check_q(inst, variant):
    cols = inst.nN if variant == "standard" else inst.m
    if inst.q.shape[1] != cols:
        raise ValueError(f"Q needs {cols} columns for the {variant} variant, got {inst.q.shape[1]}")


def block_sizes(inst: LmiInstance):
    return [inst.m, inst.nN, inst.p, inst.r, inst.nN]


def build_phi_blocks(inst: LmiInstance, variant: str = "output_error") -> np.ndarray:
    """Assemble [[Phi11, Phi12], [Phi12^T, -gamma2 I]]."""
    variant = _variant(variant)
    _check_q(inst, variant)
    m, nN, p, r = inst.m, inst.nN, inst.p, inst.r
    o = np.cumsum([0] + block_sizes(inst))
    F = np.zeros((o[-1], o[-1]))
    c1, c2, i3l, i3u = inst.c1, inst.c2, inst.iota3_lower, inst.iota3_upper
    D1, D2 = inst.delta1_bar, inst.delta2_bar

    def put(i, j, blk):
        F[o[i]:o[i + 1], o[j]:o[j + 1]] = blk
        if i != j:
            F[o[j]:o[j + 1], o[i]:o[i + 1]] = blk.T

    put(0, 0, (-c1 + c2 * inst.T) * np.eye(m))
    put(1, 1, -0.5 * c2 * i3l * np.eye(nN))
    put(2, 2, -np.eye(p))
    k = 8.0 * c2 * i3u ** 2 / i3l
    phi44 = k * D1.T @ D1 + (c1 + k * inst.r4 * inst.gamma1) * D2.T @ D2 - inst.gamma * np.eye(r)
    put(3, 3, phi44)
    if variant == "standard":
        put(2, 1, inst.q)
    else:
        put(2, 0, inst.q)
    put(2, 3, inst.w)
    put(3, 4, -(2.0 * c1 / np.sqrt(c2 * i3l)) * D1.T)
    put(4, 4, -inst.gamma2 * np.eye(nN))
    return F


@dataclass(frozen=True)
class OracleResult:
    feasible: bool
    residual: float
    reason: str = ""
    witness: tuple | None = None

    def __bool__(self):
        return self.feasible


def c2_condition(inst: LmiInstance) -> float:
    """Smallest eigenvalue of [[c2 iota3/2 I, -Q^T], [-Q, I_p]] (standard variant)."""
    nN, p = inst.nN, inst.p
    S = np.block([
        [0.5 * inst.c2 * inst.iota3_lower * np.eye(nN), -inst.q.T],
        [-inst.q, np.eye(p)],
    ])
    return float(np.linalg.eigvalsh(S)[0])


def feasibility_oracle(inst: LmiInstance, variant: str = "output_error", eps_feas: float = EPS_FEAS) -> OracleResult:
    if eps_feas <= 0:
        raise ValueError("eps_feas must be positive")
    variant = _variant(variant)
    if inst.gamma1 < inst.gamma2:
        return OracleResult(False, inst.gamma2 - inst.gamma1, "gamma1 < gamma2")
    if variant == "standard":
        lam = c2_condition(inst)
        if lam <= 0:
            return OracleResult(False, -lam, "c2 condition violated", (lam, None))
    ev, V = np.linalg.eigh(build_phi_blocks(inst, variant))
    res = float(ev[-1])
    if res > -eps_feas:
        return OracleResult(False, res, "block not negative definite", (res, V[:, -1]))
    return OracleResult(True, res)


def _affine_basis(inst, variant):
    """F(x) = F0 + sum x_k F_k over x = (c1, gamma1, gamma2) at the instance's gamma."""
    base = inst.with_scalars(c1=1.0, gamma1=1.0, gamma2=1.0)

    def at(c1, g1, g2):
        # build at unit scalars, then peel the affine parts off by differences
        return build_phi_blocks(base.with_scalars(c1=c1, gamma1=g1, gamma2=g2), variant)

    F111 = at(1.0, 1.0, 1.0)
    F_c1 = at(2.0, 1.0, 1.0) - F111
    F_g1 = at(1.0, 2.0, 1.0) - F111
    F_g2 = at(1.0, 1.0, 2.0) - F111
    F0 = F111 - F_c1 - F_g1 - F_g2
    return F0, (F_c1, F_g1, F_g2)


@dataclass
class _Search:
    x: np.ndarray
    value: float
    iterations: int


def _ellipsoid_feasible(inst, variant, box, eps_feas, max_iter=3000, x_start=None):
    """Look for (c1, gamma1, gamma2) with lambda_max <= -eps_feas and gamma1 >= gamma2."""
    F0, Fk = _affine_basis(inst, variant)
    Fk = np.stack(Fk)
    lo, hi = np.asarray(box[0], float), np.asarray(box[1], float)
    x = 0.5 * (lo + hi) if x_start is None else np.array(x_start, float)
    rad = np.linalg.norm(hi - lo)
    P = rad ** 2 * np.eye(3)
    best = _Search(x.copy(), np.inf, 0)
    n = 3
    for it in range(max_iter):
        # linear constraints first
        if np.any(x <= lo):
            i = int(np.argmin(x - lo))
            g = np.zeros(3)
            g[i] = -1.0
        elif np.any(x > hi):
            i = int(np.argmax(x - hi))
            g = np.zeros(3)
            g[i] = 1.0
        elif x[2] > x[1]:
            g = np.array([0.0, -1.0, 1.0])
        else:
            ev, V = np.linalg.eigh(F0 + np.tensordot(x, Fk, 1))
            val = float(ev[-1])
            if val < best.value:
                best = _Search(x.copy(), val, it)
            if val <= -eps_feas:
                return best
            v = V[:, -1]
            g = np.einsum("i,kij,j->k", v, Fk, v)
        Pg = P @ g
        gPg = float(g @ Pg)
        if gPg <= 1e-300:
            break
        step = Pg / np.sqrt(gPg)
        x = x - step / (n + 1)
        P = (n * n / (n * n - 1.0)) * (P - (2.0 / (n + 1)) * np.outer(step, step))
        P = 0.5 * (P + P.T)
        if np.sqrt(max(np.linalg.eigvalsh(P)[-1], 0.0)) < 1e-12 * rad:
            break
    best.iterations = max_iter
    return best


@dataclass(frozen=True)
class TuningCertificate:
    gamma: float
    gamma1: float
    gamma2: float
    c1: float
    c2: float
    alpha: float
    gamma_bar: np.ndarray
    residual: float
    variant: str
    instance: LmiInstance = field(repr=False)

    def __post_init__(self):
        ev = np.linalg.eigvalsh(self.gamma_bar)
        tol = 1e-12 * max(1.0, np.sqrt(self.gamma1))
        if ev[0] < np.sqrt(self.gamma2) - tol or ev[-1] > np.sqrt(self.gamma1) + tol:
            raise TuningError("Gamma_bar eigenvalues outside [sqrt(gamma2), sqrt(gamma1)]")

    @property
    def sqrt_gamma(self) -> float:
        return float(np.sqrt(self.gamma))

    def to_dict(self) -> dict:
        ev = np.linalg.eigvalsh(self.gamma_bar)
        return {
            "gamma": self.gamma,
            "sqrt_gamma": self.sqrt_gamma,
            "gamma1": self.gamma1,
            "gamma2": self.gamma2,
            "c1": self.c1,
            "c2": self.c2,
            "alpha": self.alpha,
            "residual": self.residual,
            "variant": self.variant,
            "gamma_bar_eigs": [float(ev[0]), float(ev[-1])],
            "iota3": [self.instance.iota3_lower, self.instance.iota3_upper],
            "r4": self.instance.r4,
            "T": self.instance.T,
        }


def select_gamma_bar(gamma1: float, gamma2: float, size: int, policy="conservative") -> np.ndarray:
    """Gain matrix with eigenvalues in [sqrt(gamma2), sqrt(gamma1)].

    ``policy`` is "conservative" (sqrt(gamma2) I), "midpoint", "upper" or a
    callable returning a matrix that is then checked.
    """
    if not gamma1 >= gamma2 > 0:
        raise ValueError("need gamma1 >= gamma2 > 0")
    lo, hi = np.sqrt(gamma2), np.sqrt(gamma1)
    if callable(policy):
        G = np.asarray(policy(gamma1, gamma2, size), dtype=float)
    elif policy == "conservative":
        G = lo * np.eye(size)
    elif policy == "midpoint":
        G = 0.5 * (lo + hi) * np.eye(size)
    elif policy == "upper":
        G = hi * np.eye(size)
    else:
        raise ValueError(f"unknown gain policy {policy!r}")
    if not np.allclose(G, G.T, atol=1e-12):
        raise TuningError("selected Gamma_bar is not symmetric")
    ev = np.linalg.eigvalsh(G)
    tol = 1e-12 * max(1.0, hi)
    if ev[0] < lo - tol or ev[-1] > hi + tol:
        raise TuningError(f"selected Gamma_bar eigenvalues [{ev[0]:.6g}, {ev[-1]:.6g}] "
                          f"outside [{lo:.6g}, {hi:.6g}]")
    return G


def choose_c2(inst: LmiInstance, variant: str, grid=None, margin: float = 1e-6) -> float:
    """Smallest c2 on a log grid meeting the standard-variant condition with
    ``margin`` to spare (a grid point exactly on the boundary leaves no room
    for strict feasibility); 1 for OE."""
    if _variant(variant) == "output_error":
        return 1.0
    grid = np.logspace(-6, 6, 241) if grid is None else np.asarray(grid, float)
    for c2 in grid:
        if c2_condition(inst.with_scalars(c2=float(c2))) > margin:
            return float(c2)
    raise InfeasibleError("no c2 on the grid satisfies the Q condition")


def solve_sdp(template: LmiInstance, variant: str = "output_error", c2: float | None = None,
              box=((0.0, 0.0, 0.0), (1e4, 1e4, 1e4)), rel_tol: float = 1e-4,
              eps_feas: float = EPS_FEAS, gamma_max: float = 1e14, policy="conservative",
              max_iter: int = 3000) -> TuningCertificate:
    """Minimize gamma over (c1, gamma1, gamma2, gamma) at fixed (alpha, c2).

    The scalars in ``template`` only serve as a starting point.
    """
    variant = _variant(variant)
    _check_q(template, variant)
    if c2 is None:
        c2 = choose_c2(template, variant)
    inst = template.with_scalars(c2=float(c2))
    if variant == "standard" and c2_condition(inst) <= 0:
        raise InfeasibleError("c2 does not satisfy the Q condition")

    def probe(gamma, x_start=None):
        trial = inst.with_scalars(gamma=float(gamma))
        return _ellipsoid_feasible(trial, variant, box, eps_feas, max_iter, x_start)

    # bracket: grow gamma until feasible
    hi = 1.0
    found = probe(hi)
    while found.value > -eps_feas:
        hi *= 4.0
        if hi > gamma_max:
            raise InfeasibleError("infeasible in search box", found.value)
        found = probe(hi)
    lo = 0.0
    best = (hi, found.x)
    # a feasible gamma might be below 1
    while hi - lo > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        s = probe(mid, best[1])
        if s.value <= -eps_feas:
            hi, best = mid, (mid, s.x)
        else:
            lo = mid
    gamma, (c1, g1, g2) = best[0], best[1]
    final = inst.with_scalars(gamma=float(gamma), c1=float(c1), gamma1=float(g1), gamma2=float(g2))
    check = feasibility_oracle(final, variant, eps_feas)
    if not check:
        raise InfeasibleError("certificate failed to replay", check.residual)
    G = select_gamma_bar(g1, g2, inst.nN, policy)
    return TuningCertificate(float(gamma), float(g1), float(g2), float(c1), float(c2), inst.alpha,
                             G, check.residual, variant, final)


def replay_relaxed(cert: TuningCertificate, iota3_lower: float, iota3_upper: float,
                   r4: float, T: float, eps_feas: float = EPS_FEAS) -> OracleResult:
    """Replay a certificate with tighter excitation constants."""
    inst = cert.instance
    if not (inst.iota3_upper >= iota3_upper >= iota3_lower >= inst.iota3_lower > 0):
        raise ValueError("relaxed iota3 bounds must lie inside the certified ones")
    if not (inst.r4 >= r4 > 0 and inst.T >= T > 0):
        raise ValueError("relaxed r4 and T must not exceed the certified ones")
    relaxed = inst.with_scalars(iota3_lower=iota3_lower, iota3_upper=iota3_upper, r4=r4, T=T)
    return feasibility_oracle(relaxed, cert.variant, eps_feas)


def golden_section_max(f, a: float, b: float, tol: float = 1e-3, max_iter: int = 100):
    """Maximize a unimodal ``f`` on [a, b]; returns (x, f(x), history)."""
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    hist = {}

    def F(x):
        if x not in hist:
            hist[x] = f(x)
        return hist[x]

    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    for _ in range(max_iter):
        if b - a < tol:
            break
        if F(c) > F(d):
            b, d = d, c
            c = b - invphi * (b - a)
        else:
            a, c = c, d
            d = a + invphi * (b - a)
    x = 0.5 * (a + b)
    return x, F(x), hist


def alpha_search(ratio, alpha_max: float = 10.0, alpha_min: float = 1e-3, tol: float = 1e-3):
    """Golden-section maximization of ``ratio(alpha)`` = iota3_lower/iota3_upper.

    Returns (alpha*, ratio(alpha*)); the endpoints are evaluated too and win
    if they beat the interior point.
    """
    if alpha_min <= 0 or alpha_max <= alpha_min:
        raise ValueError("alpha must be searched in an interval (0, alpha_max]")

    def checked(a):
        v = float(ratio(a))
        if not v > 0:
            raise TuningError(f"non-positive excitation ratio {v:.3e} at alpha={a:.6g}")
        return v

    x, fx, hist = golden_section_max(checked, alpha_min, alpha_max, tol)
    for e in (alpha_min, alpha_max):
        fe = hist[e] if e in hist else checked(e)
        if fe > fx:
            x, fx = e, fe
    return float(x), float(fx)


@dataclass(frozen=True)
class TuningResult:
    certificate: TuningCertificate
    alpha_ratio: float
    r2: float
    r3: float

    def to_dict(self) -> dict:
        d = self.certificate.to_dict()
        d.update(alpha_ratio=self.alpha_ratio, r2=self.r2, r3=self.r3)
        return d


def two_step_tune(bank, g, delta1_bar, delta2_bar, q, w, variant="output_error",
                  gain_range=(0.5, 5.0), T=0.01, n_starts=1000, horizon=50.0, h=1e-3,
                  t_min=0.0, alpha_max=10.0, alpha_tol=1e-3, c2=None, policy="conservative",
                  eps_feas=EPS_FEAS, rel_tol=1e-4, box_max=1e4) -> TuningResult:
    """Pick alpha from the empirical excitation ratio, then solve the SDP.

    ``delta2_bar`` may be a callable of the edge count; the largest edge
    count of the schedule is used.
    """
    from .analysis import empirical_iota3
    from .excitation import max_regressor_norm
    from .netgraph import connectivity_on_average

    g_lo, g_hi = gain_range
    if not 0 < g_lo <= g_hi:
        raise ValueError("gain range must satisfy 0 < low <= high")

    def ratio(a):
        lo, hi = empirical_iota3(bank, g, a, g_lo, g_hi, T, n_starts, horizon, h, t_min)
        return lo / hi

    alpha, best_ratio = alpha_search(ratio, alpha_max, tol=alpha_tol)
    i3l, i3u = empirical_iota3(bank, g, alpha, g_lo, g_hi, T, n_starts, horizon, h, t_min)
    r2 = max_regressor_norm(bank, 0.0, horizon, int(round(horizon / h)) + 1)
    r3 = connectivity_on_average(g, T, horizon).r3
    D2 = delta2_bar(g.max_edges) if callable(delta2_bar) else delta2_bar
    template = LmiInstance(1.0, 1.0, 1.0, 1.0, 1.0 if c2 is None else c2, alpha, i3l, i3u,
                           r2 + alpha * r3, T, delta1_bar, D2, q, w)
    box = ((0.0, 0.0, 0.0), (box_max,) * 3)
    cert = solve_sdp(template, variant, c2, box=box, rel_tol=rel_tol, eps_feas=eps_feas, policy=policy)
    return TuningResult(cert, best_ratio, r2, r3)
