"""Piecewise-constant undirected communication graphs.

Nodes are numbered 1..n as in the config files.  Each edge is stored with
its lower node first; that node is the source (+1) of the incidence column
and the other node the sink (-1).
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass

import numpy as np


class GraphError(ValueError):
    pass


class NotConnectedOnAverage(GraphError):
    def __init__(self, window, zero_count):
        super().__init__(
            f"not connected on average: window [{window[0]:.6g}, {window[1]:.6g}] "
            f"has {zero_count} near-zero Laplacian eigenvalues"
        )
        self.window = window
        self.zero_count = zero_count


@dataclass(frozen=True)
class GraphSchedule:
    n: int
    t_starts: tuple[float, ...]
    edges: tuple[tuple[tuple[int, int], ...], ...]

    def __post_init__(self):
        if self.n < 1:
            raise GraphError("node count must be positive")
        if not self.t_starts:
            raise GraphError("schedule needs at least one interval")
        if len(self.t_starts) != len(self.edges):
            raise GraphError("one edge list per interval")
        if self.t_starts[0] != 0:
            raise GraphError("first interval must start at t=0")
        if any(b <= a for a, b in zip(self.t_starts, self.t_starts[1:])):
            raise GraphError("interval starts must be strictly increasing")
        norm = []
        for k, edge_list in enumerate(self.edges):
            seen = set()
            fixed = []
            for e in edge_list:
                i, j = (int(v) for v in e)
                if i == j:
                    raise GraphError(f"self-loop at node {i} in interval {k}")
                if not (1 <= i <= self.n and 1 <= j <= self.n):
                    raise GraphError(f"edge ({i},{j}) out of range 1..{self.n} in interval {k}")
                e2 = (min(i, j), max(i, j))
                if e2 in seen:
                    raise GraphError(f"duplicate edge {e2} in interval {k}")
                seen.add(e2)
                fixed.append(e2)
            norm.append(tuple(fixed))
        object.__setattr__(self, "edges", tuple(norm))
        object.__setattr__(self, "t_starts", tuple(float(t) for t in self.t_starts))

    @classmethod
    def static(cls, n, edges):
        return cls(n, (0.0,), (tuple(edges),))

    @classmethod
    def from_dict(cls, spec: dict) -> "GraphSchedule":
        intervals = spec["intervals"]
        return cls(
            int(spec["n"]),
            tuple(float(iv["t_start"]) for iv in intervals),
            tuple(tuple(tuple(e) for e in iv["edges"]) for iv in intervals),
        )

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "intervals": [
                {"t_start": t, "edges": [list(e) for e in es]}
                for t, es in zip(self.t_starts, self.edges)
            ],
        }

    @property
    def breakpoints(self) -> tuple[float, ...]:
        return self.t_starts[1:]

    @property
    def max_edges(self) -> int:
        return max(len(es) for es in self.edges)

    def interval_index(self, t: float) -> int:
        if t < 0:
            raise GraphError(f"time {t} precedes the first interval")
        return bisect.bisect_right(self.t_starts, t) - 1

    def edges_at(self, t: float):
        return self.edges[self.interval_index(t)]

    def segments(self, t0: float, t1: float):
        """Yield ``(a, b, k)`` pieces of [t0, t1] on which interval ``k`` is active."""
        k = self.interval_index(t0)
        a = t0
        while a < t1:
            b = self.t_starts[k + 1] if k + 1 < len(self.t_starts) else np.inf
            b = min(b, t1)
            if b > a:
                yield a, b, k
            a = b
            k += 1


def ring(n: int) -> GraphSchedule:
    if n < 3:
        raise GraphError("a ring needs at least 3 nodes")
    return GraphSchedule.static(n, [(i, i + 1) for i in range(1, n)] + [(1, n)])


def path(n: int) -> GraphSchedule:
    return GraphSchedule.static(n, [(i, i + 1) for i in range(1, n)])


def _incidence(n: int, edge_list) -> np.ndarray:
    D = np.zeros((n, len(edge_list)))
    for col, (i, j) in enumerate(edge_list):
        D[i - 1, col] = 1.0
        D[j - 1, col] = -1.0
    return D


def incidence_for_interval(g: GraphSchedule, k: int) -> np.ndarray:
    return _incidence(g.n, g.edges[k])


def incidence_matrix(g: GraphSchedule, t: float) -> np.ndarray:
    """Oriented incidence matrix D(t), shape (n, n_e(t))."""
    return _incidence(g.n, g.edges_at(t))


def laplacian(g: GraphSchedule, t: float) -> np.ndarray:
    D = incidence_matrix(g, t)
    return D @ D.T


def integrated_laplacian(g: GraphSchedule, t0: float, t1: float) -> np.ndarray:
    """Exact integral of L(s) over [t0, t1]."""
    if t1 <= t0:
        raise GraphError("integration window must have t1 > t0")
    total = np.zeros((g.n, g.n))
    for a, b, k in g.segments(t0, t1):
        D = incidence_for_interval(g, k)
        total += (b - a) * (D @ D.T)
    return total


@dataclass(frozen=True)
class SpectralBounds:
    r3: float
    lambda_lower: float
    window: float


def connectivity_on_average(
    g: GraphSchedule,
    T: float,
    horizon: float | None = None,
    samples: int = 100,
    rel_tol: float = 1e-9,
) -> SpectralBounds:
    """Check that every window [t-T, t] has a connected integrated graph.

    Windows end at ``samples`` uniform points of [T, horizon] plus every
    time at which either window edge crosses a breakpoint.  Between those
    times the integrated Laplacian is affine in t, so its second eigenvalue
    (a minimum over the complement of the ones vector) is concave there and
    the sampled minimum is the exact one.
    """
    if T <= 0:
        raise GraphError("window T must be positive")
    if horizon is None:
        horizon = (g.t_starts[-1] if len(g.t_starts) > 1 else 0.0) + 2.0 * T
    horizon = max(horizon, T)
    ends = set(np.linspace(T, horizon, max(samples, 2)).tolist())
    for b in g.breakpoints:
        for t in (b, b + T):
            if T <= t <= horizon:
                ends.add(float(t))
    lam_lower = np.inf
    for t in sorted(ends):
        K = integrated_laplacian(g, t - T, t)
        ev = np.linalg.eigvalsh(K)
        scale = np.trace(K) if np.trace(K) > 0 else 1.0
        zeros = int(np.sum(ev < rel_tol * scale))
        if zeros != 1:
            raise NotConnectedOnAverage((t - T, t), zeros)
        if g.n > 1:
            lam_lower = min(lam_lower, ev[1])
    r3 = 0.0
    starts = [t for t in g.t_starts if t <= horizon]
    for t in starts:
        L = laplacian(g, t)
        if L.size:
            r3 = max(r3, float(np.linalg.eigvalsh(L)[-1]))
    return SpectralBounds(r3=r3, lambda_lower=float(lam_lower), window=float(T))
