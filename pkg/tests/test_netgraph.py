import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from citune.netgraph import (GraphError, GraphSchedule, NotConnectedOnAverage, connectivity_on_average,
                             incidence_matrix, integrated_laplacian, laplacian, path, ring)

TRIANGLE = GraphSchedule.static(3, [(1, 2), (1, 3), (2, 3)])


def alternating(period=1.0, cycles=4):
    """Two spanning trees of 4 nodes that alternate."""
    a = [(1, 2), (2, 3), (3, 4)]
    b = [(1, 3), (2, 4), (1, 4)]
    starts = tuple(period * k for k in range(2 * cycles))
    return GraphSchedule(4, starts, tuple(a if k % 2 == 0 else b for k in range(2 * cycles)))


def test_single_edge_incidence():
    g = GraphSchedule.static(2, [(1, 2)])
    assert np.array_equal(incidence_matrix(g, 0.0), [[1.0], [-1.0]])
    assert np.array_equal(laplacian(g, 0.0), [[1, -1], [-1, 1]])


def test_reversed_edge_keeps_lower_node_as_source():
    g = GraphSchedule.static(3, [(3, 1)])
    assert np.array_equal(incidence_matrix(g, 0.0)[:, 0], [1.0, 0.0, -1.0])


def test_empty_edge_list():
    g = GraphSchedule.static(4, [])
    assert incidence_matrix(g, 1.0).shape == (4, 0)
    assert np.array_equal(laplacian(g, 1.0), np.zeros((4, 4)))


def test_triangle():
    D = incidence_matrix(TRIANGLE, 0.0)
    assert np.array_equal(D.sum(axis=0), np.zeros(3))
    assert np.array_equal(laplacian(TRIANGLE, 0.0), [[2, -1, -1], [-1, 2, -1], [-1, -1, 2]])


def test_path_spectrum():
    ev = np.linalg.eigvalsh(laplacian(path(3), 0.0))
    assert np.allclose(ev, [0, 1, 3], atol=1e-12)


def test_negative_time_rejected():
    with pytest.raises(GraphError):
        incidence_matrix(TRIANGLE, -0.1)


@pytest.mark.parametrize("edges, msg", [
    ([(1, 1)], "self-loop"),
    ([(1, 2), (2, 1)], "duplicate"),
    ([(1, 5)], "out of range"),
])
def test_invalid_edges(edges, msg):
    with pytest.raises(GraphError, match=msg):
        GraphSchedule.static(3, edges)


def test_invalid_starts():
    with pytest.raises(GraphError):
        GraphSchedule(3, (0.5,), (((1, 2),),))
    with pytest.raises(GraphError):
        GraphSchedule(3, (0.0, 1.0, 1.0), (((1, 2),),) * 3)


def test_json_roundtrip():
    g = alternating()
    assert GraphSchedule.from_dict(g.to_dict()) == g


def test_integrated_constant():
    L = laplacian(TRIANGLE, 0.0)
    assert np.array_equal(integrated_laplacian(TRIANGLE, 0.0, 2.0), 2 * L)


def test_integrated_partial_edge():
    g = GraphSchedule(2, (0.0, 1.0), (((1, 2),), ()))
    assert np.allclose(integrated_laplacian(g, 0.0, 2.0), laplacian(g, 0.0))


def test_integrated_matches_riemann_sum():
    g = alternating(period=0.37)
    t0, t1, h = 0.1, 1.9, 1e-4
    ts = t0 + h * (np.arange(int(round((t1 - t0) / h))) + 0.5)
    riemann = h * sum(laplacian(g, t) for t in ts)
    assert np.allclose(integrated_laplacian(g, t0, t1), riemann, atol=1e-9)


def test_integrated_rejects_empty_window():
    with pytest.raises(GraphError):
        integrated_laplacian(TRIANGLE, 1.0, 1.0)


def test_integrated_additive():
    g = alternating(0.3)
    a = integrated_laplacian(g, 0.05, 0.7) + integrated_laplacian(g, 0.7, 1.45)
    assert np.allclose(a, integrated_laplacian(g, 0.05, 1.45), atol=1e-14)


@pytest.mark.parametrize("T", [0.1, 1.0, 3.0])
def test_connectivity_constant_ring(T):
    sb = connectivity_on_average(ring(6), T, horizon=10.0)
    lam2 = np.linalg.eigvalsh(laplacian(ring(6), 0.0))[1]
    assert abs(sb.lambda_lower - T * lam2) < 1e-9
    assert sb.r3 == pytest.approx(4.0)
    assert sb.r3 >= sb.lambda_lower > 0


def test_isolated_node_fails():
    g = GraphSchedule.static(4, [(1, 2), (2, 3)])
    with pytest.raises(NotConnectedOnAverage):
        connectivity_on_average(g, 1.0, horizon=5.0)


def test_alternating_trees_connected():
    g = alternating(period=1.0)
    sb = connectivity_on_average(g, 1.0, horizon=8.0)
    assert sb.lambda_lower > 0
    # a window shorter than one interval still sees a spanning tree
    assert connectivity_on_average(g, 0.5, horizon=8.0).lambda_lower > 0


def test_switching_union_needed():
    # neither half is connected alone, only their union
    g = GraphSchedule(4, (0.0, 1.0, 2.0, 3.0), (((1, 2), (3, 4)), ((2, 3),), ((1, 2), (3, 4)), ((2, 3),)))
    with pytest.raises(NotConnectedOnAverage):
        connectivity_on_average(g, 0.5, horizon=4.0)
    assert connectivity_on_average(g, 2.0, horizon=4.0).lambda_lower > 0


@st.composite
def schedules(draw):
    n = draw(st.integers(2, 6))
    pairs = [(i, j) for i in range(1, n + 1) for j in range(i + 1, n + 1)]
    k = draw(st.integers(1, 4))
    edges = tuple(tuple(draw(st.lists(st.sampled_from(pairs), unique=True))) for _ in range(k))
    return GraphSchedule(n, tuple(float(i) for i in range(k)), edges)


@settings(max_examples=60, deadline=None)
@given(schedules(), st.floats(0, 5))
def test_laplacian_properties(g, t):
    D = incidence_matrix(g, t)
    L = laplacian(g, t)
    assert np.array_equal(L, D @ D.T)
    assert np.array_equal(L, L.T)
    assert np.array_equal(L @ np.ones(g.n), np.zeros(g.n))
    assert np.array_equal(np.diag(L), np.abs(D).sum(axis=1))
    if D.shape[1]:
        assert np.all((D == 1).sum(axis=0) == 1) and np.all((D == -1).sum(axis=0) == 1)
    ev, V = np.linalg.eigh(L)
    assert abs(ev[0]) < 1e-12


@settings(max_examples=60, deadline=None)
@given(schedules(), st.floats(0, 5), st.integers(1, 4), st.integers(0, 2**31))
def test_consensus_kernel(g, t, N, seed):
    theta = np.random.default_rng(seed).normal(size=N)
    D = incidence_matrix(g, t)
    assert np.array_equal(np.kron(D.T, np.eye(N)) @ np.kron(np.ones(g.n), theta) == 0,
                          np.ones(D.shape[1] * N, bool))
