"""Regressor banks and cooperative persistency-of-excitation constants."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .integrate import simpson


class CPEViolated(ValueError):
    """The summed regressor window is not positive definite somewhere."""

    def __init__(self, window, lam_min):
        super().__init__(
            f"cPE violated: window [{window[0]:.6g}, {window[1]:.6g}] has "
            f"smallest eigenvalue {lam_min:.3e}"
        )
        self.window = window
        self.lam_min = lam_min


class RegressorBank:
    """Per-agent regressors C_i(t), each of shape (N_y, N).

    Subclasses implement :meth:`sample`, which evaluates all agents at an
    array of times and returns shape ``(K, n, N_y, N)``.
    """

    n: int
    N: int
    N_y: int

    def sample(self, ts) -> np.ndarray:
        raise NotImplementedError

    def at(self, t: float) -> np.ndarray:
        return self.sample(np.array([t]))[0]

    def node_times(self, t0: float, t1: float):
        """Times in [t0, t1] where the regressor may have kinks (tables only)."""
        return np.empty(0)


class FunctionBank(RegressorBank):
    """Regressors given as callables ``t -> array (N_y, N)``, one per agent.

    ``vectorized`` callables accept an array of times and return
    ``(K, N_y, N)``.
    """

    def __init__(self, funcs, vectorized: bool = False):
        self.funcs = list(funcs)
        self.vectorized = vectorized
        probe = self._eval(self.funcs[0], np.array([0.0]))
        self.n = len(self.funcs)
        self.N_y, self.N = probe.shape[1:]

    def _eval(self, f, ts):
        if self.vectorized:
            out = np.asarray(f(ts), dtype=float)
            # a vectorized row regressor may return (K, N)
            return out[:, None, :] if out.ndim == 2 else out
        return np.array([np.atleast_2d(f(t)) for t in ts], dtype=float)

    def sample(self, ts) -> np.ndarray:
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        cols = [self._eval(f, ts).reshape(len(ts), self.N_y, self.N) for f in self.funcs]
        return np.stack(cols, axis=1)

    @classmethod
    def constant(cls, rows):
        mats = [np.atleast_2d(np.asarray(r, dtype=float)) for r in rows]

        def make(C):
            return lambda ts: np.broadcast_to(C, (len(ts),) + C.shape)

        return cls([make(C) for C in mats], vectorized=True)


class TableBank(RegressorBank):
    """Regressors tabulated on a time grid, linearly interpolated."""

    def __init__(self, times, values):
        self.times = np.asarray(times, dtype=float)
        vals = np.asarray(values, dtype=float)
        if vals.ndim != 4 or vals.shape[0] != self.times.size:
            raise ValueError("table values must have shape (K, n, N_y, N)")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("table times must be strictly increasing")
        self.values = vals
        _, self.n, self.N_y, self.N = vals.shape

    def sample(self, ts) -> np.ndarray:
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        if ts.size and (ts.min() < self.times[0] - 1e-12 or ts.max() > self.times[-1] + 1e-12):
            raise ValueError(
                f"regressor table covers [{self.times[0]}, {self.times[-1]}], "
                f"requested [{ts.min()}, {ts.max()}]"
            )
        idx = np.clip(np.searchsorted(self.times, ts, side="right") - 1, 0, self.times.size - 2)
        t0 = self.times[idx]
        w = ((ts - t0) / (self.times[idx + 1] - t0)).reshape(-1, 1, 1, 1)
        return (1.0 - w) * self.values[idx] + w * self.values[idx + 1]

    def node_times(self, t0, t1):
        return self.times[(self.times >= t0) & (self.times <= t1)]

    def agent(self, i: int) -> "TableBank":
        return TableBank(self.times, self.values[:, i:i + 1])

    @classmethod
    def from_csv(cls, path, n: int | None = None, N_y: int | None = None, N: int | None = None):
        """Read a table with header ``t, C{i}_{r}_{c}, ...`` (1-based indices)."""
        path = Path(path)
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = [h.strip() for h in next(reader)]
            rows = np.array([[float(v) for v in row] for row in reader if row])
        if header[0] != "t":
            raise ValueError(f"{path}: first column must be 't'")
        keys = []
        for h in header[1:]:
            if not h.startswith("C"):
                raise ValueError(f"{path}: bad column {h!r}")
            keys.append(tuple(int(v) for v in h[1:].split("_")))
        n = n or max(k[0] for k in keys)
        N_y = N_y or max(k[1] for k in keys)
        N = N or max(k[2] for k in keys)
        vals = np.zeros((rows.shape[0], n, N_y, N))
        for col, (i, r, c) in enumerate(keys, start=1):
            vals[:, i - 1, r - 1, c - 1] = rows[:, col]
        return cls(rows[:, 0], vals)

    def to_csv(self, path):
        header = ["t"]
        for i in range(self.n):
            for r in range(self.N_y):
                for c in range(self.N):
                    header.append(f"C{i + 1}_{r + 1}_{c + 1}")
        flat = self.values.reshape(self.times.size, -1)
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for t, row in zip(self.times, flat):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in row])


class StackedBank(RegressorBank):
    """Concatenate single-agent banks into one bank."""

    def __init__(self, banks):
        self.banks = list(banks)
        self.n = sum(b.n for b in self.banks)
        self.N_y, self.N = self.banks[0].N_y, self.banks[0].N
        if any((b.N_y, b.N) != (self.N_y, self.N) for b in self.banks):
            raise ValueError("all agents must share N and N_y")

    def sample(self, ts):
        return np.concatenate([b.sample(ts) for b in self.banks], axis=1)

    def node_times(self, t0, t1):
        parts = [b.node_times(t0, t1) for b in self.banks]
        return np.unique(np.concatenate(parts)) if parts else np.empty(0)


def regressor_gram(C: np.ndarray) -> np.ndarray:
    """Sum over agents of C_i^T C_i for samples of shape (..., n, N_y, N)."""
    return np.einsum("...iyn,...iym->...nm", C, C)


def _quad_grid(t0, t1, h_q):
    m = int(np.ceil((t1 - t0) / h_q - 1e-9))
    m = max(m + (m % 2), 2)
    return np.linspace(t0, t1, m + 1), (t1 - t0) / m


def piecewise_grid(t0, t1, h_q, nodes=()):
    """Quadrature nodes and weights on [t0, t1], split at table ``nodes``.

    Each piece gets composite Simpson with an even number of intervals, so
    piecewise-quadratic integrands (squared linear interpolants) are
    integrated exactly.
    """
    cuts = np.unique(np.concatenate([[t0, t1], np.asarray(nodes, dtype=float)]))
    cuts = cuts[(cuts >= t0) & (cuts <= t1)]
    ts, ws = [], []
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b - a <= 1e-15 * max(1.0, abs(b)):
            continue
        g, hq = _quad_grid(a, b, h_q)
        w = np.full(g.size, 2.0)
        w[1::2] = 4.0
        w[0] = w[-1] = 1.0
        ts.append(g)
        ws.append(w * hq / 3.0)
    return np.concatenate(ts), np.concatenate(ws)


def cpe_window(bank: RegressorBank, t: float, T: float, h_q: float = 5e-4) -> np.ndarray:
    """Composite-Simpson integral of sum_i C_i^T C_i over [t-T, t]."""
    if T <= 0:
        raise ValueError("window T must be positive")
    if t < T:
        raise ValueError(f"window end t={t} precedes T={T}")
    ts, w = piecewise_grid(t - T, t, h_q, bank.node_times(t - T, t))
    return np.einsum("k,knm->nm", w, regressor_gram(bank.sample(ts)))


def cpe_windows(bank, ends, T, h_q=5e-4) -> np.ndarray:
    """Stack of :func:`cpe_window` for every window end in ``ends``."""
    ends = np.asarray(ends, dtype=float)
    if ends.size and ends.min() < T:
        raise ValueError("window ends must be >= T")
    out = np.empty((ends.size, bank.N, bank.N))
    if ends.size and bank.node_times(ends.min() - T, ends.max()).size:
        # tables: nodes fall differently in every window
        for k, e in enumerate(ends):
            out[k] = cpe_window(bank, e, T, h_q)
        return out
    _, hq = _quad_grid(0.0, T, h_q)
    m = int(round(T / hq))
    offs = np.linspace(-T, 0.0, m + 1)
    chunk = max(1, 200_000 // (m + 1))
    for a in range(0, ends.size, chunk):
        e = ends[a:a + chunk]
        ts = (e[:, None] + offs[None, :]).ravel()
        G = regressor_gram(bank.sample(ts)).reshape(e.size, m + 1, bank.N, bank.N)
        out[a:a + chunk] = simpson(G, hq, axis=1)
    return out


@dataclass(frozen=True)
class ExcitationReport:
    window: float
    iota1_lower: float
    iota1_upper: float
    r2: float
    r4: float | None = None
    worst_window_end: float | None = None

    def with_r4(self, alpha: float, r3: float) -> "ExcitationReport":
        return replace(self, r4=r4_constant(self, alpha, r3))


def max_regressor_norm(bank: RegressorBank, t0: float, t1: float, samples: int = 1000) -> float:
    """max over t, i of ||C_i^T(t) C_i(t)|| on a grid plus any table nodes.

    For linearly interpolated tables the squared norm is convex between
    nodes, so the node maximum is exact.
    """
    ts = np.union1d(np.linspace(t0, t1, samples), bank.node_times(t0, t1))
    r2 = 0.0
    for a in range(0, ts.size, 50_000):
        C = bank.sample(ts[a:a + 50_000])
        G = np.einsum("kiyn,kiym->kinm", C, C)
        r2 = max(r2, float(np.linalg.eigvalsh(G)[..., -1].max()))
    return r2


def cpe_bounds(
    bank: RegressorBank,
    T: float,
    horizon: float,
    samples: int = 1000,
    h_q: float = 5e-4,
    tol: float = 1e-12,
    t_min: float = 0.0,
) -> ExcitationReport:
    """Sampled cPE constants over windows [t-T, t] inside [t_min, horizon]."""
    if horizon < 2 * T:
        raise ValueError("horizon must be at least 2T")
    if horizon - T < t_min:
        raise ValueError("no window fits between t_min and the horizon")
    ends = np.linspace(t_min + T, horizon, samples)
    ev = np.linalg.eigvalsh(cpe_windows(bank, ends, T, h_q))
    lows = ev[:, 0]
    worst = int(np.argmin(lows))
    if lows[worst] <= tol:
        raise CPEViolated((ends[worst] - T, ends[worst]), float(lows[worst]))
    r2 = max_regressor_norm(bank, 0.0, horizon, samples)
    return ExcitationReport(
        window=float(T),
        iota1_lower=float(lows[worst]),
        iota1_upper=float(ev[:, -1].max()),
        r2=r2,
        worst_window_end=float(ends[worst]),
    )


def r4_constant(report: ExcitationReport, alpha: float, r3: float) -> float:
    if alpha <= 0:
        raise ValueError("consensus gain alpha must be positive")
    return report.r2 + alpha * r3
