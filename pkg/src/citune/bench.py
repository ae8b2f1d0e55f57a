"""Six mass-spring-damper plants used as the estimation benchmark.

Each plant i follows

    xi1' = xi2
    xi2' = (u_i(t) - k2 xi1 - k3(t) xi2) / k1,     k3' = d1 sin(0.5 t)

and is recast as y_i = xi2' = [u_i, -xi1, -xi2] [1/k1, k2/k1, k3/k1]^T.
The plant constants are not published with the benchmark, so k1 = k2 =
k3(0) = 1 and zero initial plant states are defaults only.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .estimator import DisturbanceSpec
from .excitation import TableBank
from .integrate import rk4, step_grid, trapezoid
from .netgraph import GraphSchedule, ring

N_AGENTS = 6
N_PARAMS = 3


def plant_inputs(ts) -> np.ndarray:
    """The six input signals u_1..u_6, shape (K, 6)."""
    t = np.asarray(ts, dtype=float)
    return np.stack([
        np.sin(t),
        2.0 * np.cos(0.5 * t),
        3.0 * np.sin(3.0 * t),
        3.0 * np.cos(2.0 * t),
        np.sin(t) + 0.5 * np.cos(t),
        2.0 * np.sin(3.0 * t) + np.cos(0.4 * t),
    ], axis=-1)


@dataclass(frozen=True)
class MassSpringParams:
    k1: float = 1.0
    k2: float = 1.0
    k3_0: float = 1.0
    d1: float = 0.0
    d2: float = 0.0
    d3: float = 0.0

    def __post_init__(self):
        if self.k1 <= 0:
            raise ValueError("mass k1 must be positive")

    def k3(self, ts):
        t = np.asarray(ts, dtype=float)
        return self.k3_0 + 2.0 * self.d1 * (1.0 - np.cos(0.5 * t))

    def theta(self, ts) -> np.ndarray:
        t = np.atleast_1d(np.asarray(ts, dtype=float))
        return np.stack([
            np.full_like(t, 1.0 / self.k1),
            np.full_like(t, self.k2 / self.k1),
            self.k3(t) / self.k1,
        ], axis=-1)


@dataclass
class PlantTrajectory:
    params: MassSpringParams
    t: np.ndarray
    xi1: np.ndarray
    xi2: np.ndarray
    acc: np.ndarray
    u: np.ndarray


def simulate_plants(params: MassSpringParams, horizon: float = 50.0, h: float = 5e-4) -> PlantTrajectory:
    """RK4 run of all six plants from rest; samples at every step."""
    n_steps, h = step_grid(0.0, horizon, h)
    t_half = 0.5 * h * np.arange(2 * n_steps + 1)
    u = plant_inputs(t_half)
    k3 = params.k3(t_half)
    k1, k2 = params.k1, params.k2
    u_scaled = u / k1
    c_spring = k2 / k1
    c_damp = k3 / k1

    def rhs(j, x):
        dx = np.empty_like(x)
        dx[0] = x[1]
        dx[1] = u_scaled[j] - c_spring * x[0] - c_damp[j] * x[1]
        return dx

    states = rk4(rhs, np.zeros((2, N_AGENTS)), h, n_steps)
    t = t_half[::2]
    xi1, xi2 = states[:, 0], states[:, 1]
    uu = u[::2]
    acc = (uu - k2 * xi1 - k3[::2, None] * xi2) / k1
    return PlantTrajectory(params, t, xi1, xi2, acc, uu)


class LREInconsistent(ValueError):
    pass


@dataclass
class LinearRegression:
    bank: TableBank
    y: np.ndarray
    t: np.ndarray
    params: MassSpringParams

    def theta(self, ts):
        return self.params.theta(ts)

    def measurements(self, ts):
        """Outputs y_i = C_i theta at arbitrary times (exact on the table)."""
        C = self.bank.sample(ts)
        return np.einsum("kiyn,kn->kiy", C, self.theta(ts)).reshape(len(np.atleast_1d(ts)), -1)


def extract_lre(plants: PlantTrajectory, tol: float = 1e-8) -> LinearRegression:
    C = np.stack([plants.u, -plants.xi1, -plants.xi2], axis=-1)[:, :, None, :]
    y = plants.acc
    theta = plants.params.theta(plants.t)
    resid = np.abs(np.einsum("kin,kn->ki", C[:, :, 0, :], theta) - y).max()
    if resid > tol:
        raise LREInconsistent(f"LRE residual {resid:.3e} exceeds {tol:.1e}")
    return LinearRegression(TableBank(plants.t, C), y, plants.t, plants.params)


@lru_cache(maxsize=16)
def benchmark_lre(params: MassSpringParams = MassSpringParams(), horizon: float = 50.0,
                  h: float = 5e-4) -> LinearRegression:
    return extract_lre(simulate_plants(params, horizon, h))


def benchmark_graph() -> GraphSchedule:
    return ring(N_AGENTS)


@dataclass(frozen=True)
class Scenario:
    id: int
    d1: float
    d2: float
    d3: float
    description: str


SCENARIOS = {
    1: Scenario(1, 0.0, 1.0, 0.5, "No parameter variation, high noise level, high communication disturbances"),
    2: Scenario(2, 0.5, 1.0, 0.5, "Slow parameter variation, high noise level, high communication disturbances"),
    3: Scenario(3, 2.0, 0.25, 0.125, "Fast parameter variation, low noise level, low communication disturbances"),
    4: Scenario(4, 2.0, 0.0, 0.0, "Fast parameter variation, no noise level, no communication disturbances"),
    5: Scenario(5, 2.0, 1.0, 0.5, "Fast parameter variation, high noise level, high communication disturbances"),
}


def projection_matrices(n: int = N_AGENTS, N: int = N_PARAMS, n_e: int = 6, N_y: int = 1):
    """Delta1_bar, Delta2_bar, Q_OE, W_OE for the three-component disturbance.

    Component 1 is the damper drift and enters the third parameter of every
    agent; component 2 is added to every measurement row and component 3 to
    every consensus row.
    """
    d1 = np.zeros((N, 3))
    d1[2, 0] = 1.0
    delta1 = np.kron(np.ones((n, 1)), d1)
    m_top, m_bot = n * N_y, N * n_e
    delta2 = np.zeros((m_top + m_bot, 3))
    delta2[:m_top, 1] = 1.0
    delta2[m_top:, 2] = 1.0
    q = np.zeros((5, m_top + m_bot))
    q[0, :m_top] = 1.0
    q[1, m_top:] = 1.0
    w = np.vstack([np.zeros((2, 3)), np.eye(3)])
    return delta1, delta2, q, w


def scenario_disturbance(s: Scenario, n: int = N_AGENTS, N: int = N_PARAMS, n_e: int = 6) -> DisturbanceSpec:
    amp = np.array([s.d1, s.d2, s.d3])

    def delta(ts):
        t = np.atleast_1d(np.asarray(ts, dtype=float))
        return amp * np.stack([np.sin(0.5 * t), np.sin(50.0 * t), np.sin(50.0 * t)], axis=-1)

    delta1, _, q, w = projection_matrices(n, N, n_e)

    def delta2(ne):
        return projection_matrices(n, N, ne)[1]

    return DisturbanceSpec(delta, delta1, delta2, q, w, output_error=True)


class MetricUndefined(ValueError):
    pass


def l2_metric(z, delta, horizon: float | None = None, t=None):
    """Ratio of L2 norms of z and delta on a uniform grid (trapezoid rule).

    Time runs along the second-to-last axis, so ``z`` may carry leading
    batch axes, e.g. shape (B, K, p) against ``delta`` of shape (K, r).
    """
    z = np.asarray(z, dtype=float)
    delta = np.asarray(delta, dtype=float)
    K = z.shape[-2]
    if t is not None:
        h = float(t[1] - t[0])
    elif horizon is not None:
        h = horizon / (K - 1)
    else:
        raise ValueError("need either horizon or t")
    num = trapezoid(np.sum(z ** 2, axis=-1), h, axis=-1)
    den = trapezoid(np.sum(delta ** 2, axis=-1), h, axis=-1)
    if np.any(np.sqrt(den) < 1e-12):
        raise MetricUndefined("metric undefined for zero disturbance")
    out = np.sqrt(num / den)
    return float(out) if np.ndim(out) == 0 else out


def sweep_gains(center: float, count: int = 7, factor: float = 2.0) -> np.ndarray:
    """``count`` gains spaced by ``factor`` with ``center`` in the middle."""
    if count < 2 or factor <= 1:
        raise ValueError("need at least two gains and factor > 1")
    k = np.arange(count) - (count - 1) // 2
    return center * factor ** k.astype(float)


@dataclass
class SweepResult:
    gains: np.ndarray
    scenarios: tuple
    metrics: np.ndarray  # (scenario, gain)

    @property
    def averages(self) -> np.ndarray:
        return self.metrics.mean(axis=0)

    def best_gain(self, scenario_id: int | None = None) -> float:
        row = self.averages if scenario_id is None else self.metrics[self.scenarios.index(scenario_id)]
        return float(self.gains[int(np.argmin(row))])

    def rows(self):
        for i, s in enumerate(self.scenarios):
            for j, gval in enumerate(self.gains):
                yield s, float(gval), float(self.metrics[i, j])


def scenario_metrics(config, gains, scenario_ids=(1, 2, 3, 4, 5), bank=None, g=None):
    """Metric for every (scenario, scalar gain); each scenario is one batched run."""
    from .estimator import simulate_disturbed

    gains = np.atleast_1d(np.asarray(gains, dtype=float))
    if gains.size < 1:
        raise ValueError("need at least one gain")
    bank = benchmark_lre().bank if bank is None else bank
    g = benchmark_graph() if g is None else g
    nN = bank.n * bank.N
    stack = gains[:, None, None] * np.eye(nN)[None]
    out = np.empty((len(scenario_ids), gains.size))
    for i, sid in enumerate(scenario_ids):
        dist = scenario_disturbance(SCENARIOS[sid], bank.n, bank.N, g.max_edges)
        try:
            run = simulate_disturbed(config, bank, g, dist, gamma_override=stack)
        except Exception as exc:  # keep the scenario id in the message
            raise RuntimeError(f"scenario {sid}: {exc}") from exc
        out[i] = l2_metric(np.moveaxis(run.z, 1, 0), run.delta, t=run.t)
    return out


def gain_sweep(config, gains, scenario_ids=(1, 2, 3, 4, 5), bank=None, g=None) -> SweepResult:
    gains = np.atleast_1d(np.asarray(gains, dtype=float))
    if gains.size < 2:
        raise ValueError("a sweep needs at least two gains")
    return SweepResult(gains, tuple(scenario_ids), scenario_metrics(config, gains, scenario_ids, bank, g))
