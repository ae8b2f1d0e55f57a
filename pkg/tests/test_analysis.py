import numpy as np
import pytest

from citune import bench
from citune.analysis import (BoundError, BoundSet, convergence_bound, empirical_iota3, error_gramian_bounds,
                             gramian_ode, gramian_ode_batch, gramian_oi, gramian_quadrature, iss_gain_bound,
                             kappas, lyapunov_matrices, lyapunov_value, output_gramian_bounds,
                             transition_gramians)
from citune.estimator import EstimatorConfig, simulate_error
from citune.excitation import ExcitationReport, FunctionBank
from citune.netgraph import GraphSchedule, SpectralBounds, ring

SOLO = GraphSchedule.static(1, [])
SCALAR = FunctionBank.constant([[1.0]])
SCALAR_2 = FunctionBank.constant([[1.0, 0.5]])


def rel_fro(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_oi_zero_and_constant():
    zero = FunctionBank.constant([[0.0, 0.0]])
    assert np.array_equal(gramian_oi(zero, SOLO, 1.0, 1.0, 1.0).M, np.zeros((2, 2)))
    bank = FunctionBank.constant([[1.0, 2.0], [0.5, -1.0]])
    g = GraphSchedule.static(2, [(1, 2)])
    A = np.diag([5.0, 5.0, 1.25, 1.25])
    A[:2, :2] = [[1, 2], [2, 4]]
    A[2:, 2:] = [[0.25, -0.5], [-0.5, 1.0]]
    A += 0.3 * np.kron([[1, -1], [-1, 1]], np.eye(2))
    assert np.allclose(gramian_oi(bank, g, 0.3, 2.0, 0.7).M, 0.7 * A, atol=1e-13)


def test_ode_zero_output_map():
    zero = FunctionBank.constant([[0.0]])
    cfg = EstimatorConfig.scalar(1.0, 1, 1, 1.0)
    assert np.array_equal(gramian_ode(zero, SOLO, cfg, 0.0, 1.0).M, np.zeros((1, 1)))


def test_scalar_closed_form_both_methods():
    cfg = EstimatorConfig.scalar(1.0, 1, 1, 1.0)
    exact = (np.e ** 2 - 1) / 2
    ode = gramian_ode(SCALAR, SOLO, cfg, 0.0, 1.0, h=1e-4).M[0, 0]
    quad = gramian_quadrature(SCALAR, SOLO, cfg, 1.0, 1.0, h=1e-4).M[0, 0]
    assert abs(ode - exact) / exact < 1e-10
    assert abs(quad - exact) / exact < 1e-10


def test_benchmark_dual_method(lre):
    g = bench.benchmark_graph()
    cfg = EstimatorConfig.scalar(2.0, 6, 3, 1.0)
    a = gramian_ode(lre.bank, g, cfg, 12.0, 0.5, h=1e-4).M
    b = gramian_quadrature(lre.bank, g, cfg, 12.5, 0.5, h=1e-4).M
    assert rel_fro(a, b) < 1e-6
    assert np.abs(a - a.T).max() < 1e-10
    assert np.linalg.eigvalsh(a)[0] > -1e-10


def test_switching_window_dual_method():
    g = GraphSchedule(3, (0.0, 0.4, 0.9), (((1, 2),), ((2, 3),), ((1, 3), (1, 2))))
    bank = FunctionBank([lambda t: [[np.sin(t), 1.0]], lambda t: [[0.0, np.cos(2 * t)]], lambda t: [[1.0, t]]])
    G = np.diag([1.0, 2.0, 0.5, 1.5, 1.0, 0.7])
    a = gramian_ode_batch(bank, g, 0.8, G, [0.2], 1.0, h=1e-4)[0]
    b = transition_gramians(bank, g, 0.8, G, [1.2], 1.0, h=1e-4)[0][0]
    assert rel_fro(a, b) < 1e-6


def test_batch_matches_single(lre):
    g = bench.benchmark_graph()
    starts = np.array([1.0, 7.3, 30.0])
    batch = gramian_ode_batch(lre.bank, g, 1.0, 1.5, starts, 0.01)
    for s, M in zip(starts, batch):
        single = gramian_ode_batch(lre.bank, g, 1.0, 1.5, [s], 0.01)[0]
        assert np.allclose(M, single, rtol=1e-12, atol=1e-18)


def report(T=0.5, r2=2.0, i1=1.0):
    return ExcitationReport(T, i1, i1, r2)


def test_output_bounds_upper_formula():
    lo, up = output_gramian_bounds(report(), SpectralBounds(4.0, 1.0, 0.5), 0.5, 3)
    assert up == 2.0
    assert 0 < lo <= up


def test_output_bounds_degenerate_excitation():
    with pytest.raises(BoundError):
        output_gramian_bounds(report(i1=0.0), SpectralBounds(4.0, 1.0, 0.5), 0.5, 3)


def test_output_bounds_single_agent():
    lo, _ = output_gramian_bounds(report(i1=0.6), SpectralBounds(0.0, np.inf, 0.5), 1.0, 1)
    assert lo == 0.6


def test_output_bounds_grid_refinement():
    rep = ExcitationReport(0.01, 1.2e-6, 0.3, 11.06)
    sp = SpectralBounds(4.0, 0.01, 0.01)
    a = output_gramian_bounds(rep, sp, 1.0, 6, grid=1000)[0]
    b = output_gramian_bounds(rep, sp, 1.0, 6, grid=100_000)[0]
    assert b > 0 and abs(a - b) <= 1e-6 * b


def test_output_bounds_window_mismatch():
    with pytest.raises(ValueError):
        output_gramian_bounds(report(), SpectralBounds(4.0, 1.0, 0.3), 0.5, 3)


def test_error_bounds_phi():
    lo, up, p1, p2 = error_gramian_bounds(0.5, 1.0, 1.0)
    assert p1 == 0.5
    assert p2 == pytest.approx((np.e ** 2 - 1) / 4 - 0.5, abs=1e-12)
    assert p2 == pytest.approx(1.09726, abs=1e-5)
    assert 0 < lo <= up


def test_error_bounds_unit_phi_branch():
    # phi1 = 1 exactly at r1 * iota2_upper = sqrt(2)
    up = 1.0
    r1 = np.sqrt(2.0)
    lo2 = 0.3
    lo, _, p1, _ = error_gramian_bounds(lo2, up, r1)
    assert abs(p1 - 1) < 1e-9
    assert lo == pytest.approx(lo2 ** 2 / (4 * up), rel=1e-12)
    # the general expression is continuous across phi1 = 1
    for eps in (1e-6, -1e-6):
        r = np.sqrt(2.0 * (1 + eps))
        assert error_gramian_bounds(lo2, up, r)[0] == pytest.approx(lo, rel=1e-5)


def test_error_bounds_reject():
    with pytest.raises(ValueError):
        error_gramian_bounds(2.0, 1.0, 1.0)


def test_empirical_single_start_matches_ode(lre):
    g = bench.benchmark_graph()
    cfg = EstimatorConfig.scalar(1.0, 6, 3, 1.3)
    lo, hi = empirical_iota3(lre.bank, g, 1.3, 1.0, 1.0, 0.01, n_starts=1, t_min=5.0)
    ev = gramian_ode(lre.bank, g, cfg, 5.0, 0.01).eig_extremes()
    assert (lo, hi) == ev


def test_empirical_gain_ordering(lre):
    g = bench.benchmark_graph()
    lo, hi = empirical_iota3(lre.bank, g, 1.0, 0.5, 5.0, 0.01, n_starts=50, t_min=1.0)
    lo1, hi1 = empirical_iota3(lre.bank, g, 1.0, 1.0, 1.0, 0.01, n_starts=50, t_min=1.0)
    assert lo <= lo1 <= hi1 <= hi


def test_empirical_rejects_unexcited_window():
    zero = FunctionBank.constant([[0.0]])
    with pytest.raises(BoundError, match="not positive definite"):
        empirical_iota3(zero, SOLO, 1.0, 1.0, 1.0, 0.5, n_starts=3, horizon=2.0)


def test_lyapunov_trivial():
    cfg = EstimatorConfig(np.diag([2.0, 4.0]), 1.0, 2)
    zero = FunctionBank.constant([[0.0, 0.0]])
    x = np.array([1.0, -2.0])
    assert lyapunov_value(np.zeros(2), 1.0, SCALAR_2, SOLO, cfg, 0.5).V == 0.0
    v = lyapunov_value(x, 1.0, zero, SOLO, cfg, 0.5).V
    assert v == pytest.approx(0.25 * (1 / 2 + 4 / 4), rel=1e-14)


def test_lyapunov_derivative_identity():
    # scalar C = 1, gain g: V along x(t) = x0 e^{-g t} has dV/dt = -M x^2
    g_ = 1.5
    cfg = EstimatorConfig.scalar(g_, 1, 1, 1.0, h=1e-4)
    T, t, dt = 0.4, 1.0, 1e-4
    P, M = lyapunov_matrices(SCALAR, SOLO, cfg, [t - dt, t + dt], T)
    x = np.exp(-g_ * np.array([t - dt, t + dt]))
    V = P[:, 0, 0] * x ** 2
    dV = (V[1] - V[0]) / (2 * dt)
    Mt = transition_gramians(SCALAR, SOLO, 1.0, g_, [t], T, 1e-4)[0][0, 0, 0]
    assert dV == pytest.approx(-Mt * np.exp(-g_ * t) ** 2, rel=1e-6)


def test_sandwich_flag():
    cfg = EstimatorConfig.scalar(1.0, 1, 1, 1.0)
    k1, k2 = kappas(cfg.gamma_bar, 0.5, 10.0)
    b = BoundSet(1, 1, 0.1, 10.0, 0.5, 1.0, k1, k2, 0.5)
    assert lyapunov_value([1.0], 1.0, SCALAR, SOLO, cfg, 0.5, bounds=b).sandwich_ok
    tight = BoundSet(1, 1, 0.1, 10.0, 0.5, 1.0, k2 * 1.0001, k2, 0.5)
    assert lyapunov_value([1.0], 1.0, SCALAR, SOLO, cfg, 0.5, bounds=tight).sandwich_ok is False


def test_convergence_envelope():
    b = BoundSet(1, 1, 0.2, 1.0, 0.5, 1.0, 3.0, 1.0, 1.0)
    assert convergence_bound(b, 2.0, 0.0) >= 2.0
    half = 2 * b.kappa1 * np.log(2) / b.iota3_lower
    assert convergence_bound(b, 2.0, half) == pytest.approx(convergence_bound(b, 2.0, 0.0) / 2)
    with pytest.raises(ValueError):
        convergence_bound(b, 1.0, -1.0)


def test_iss_gain():
    eq = BoundSet(1, 1, 0.5, 1.0, 0.5, 1.0, 2.0, 2.0, 1.0)
    assert iss_gain_bound(eq) == pytest.approx(8.0)
    base = BoundSet(1, 1, 0.5, 1.0, 0.5, 1.0, 2.0, 1.0, 1.0)
    dbl = BoundSet(1, 1, 0.5, 1.0, 0.5, 1.0, 4.0, 1.0, 1.0)
    assert iss_gain_bound(dbl) / iss_gain_bound(base) == pytest.approx(2 * np.sqrt(2))


def test_boundset_validation():
    with pytest.raises(BoundError):
        BoundSet(1, 1, 2.0, 1.0, 0, 0, 2, 1, 1)
    with pytest.raises(BoundError):
        BoundSet(1, 1, 0.5, 1.0, 0, 0, 1, 2, 1)


def test_iss_trajectory_bounded_by_gain():
    # scalar plant: empirical window constants feed the ISS gain
    from citune.estimator import simulate_iss

    g_, T = 2.0, 0.5
    cfg = EstimatorConfig.scalar(g_, 1, 1, 1.0, horizon=20.0)
    M = transition_gramians(SCALAR, SOLO, 1.0, g_, [T], T)[0][0, 0, 0]
    k1, k2 = kappas(cfg.gamma_bar, T, M)
    b = BoundSet(T, T, M, M, 0, 0, k1, k2, T)
    d = 0.3
    tr = simulate_iss(cfg, SCALAR, SOLO, lambda ts: 0.3 * np.sin(3 * ts)[:, None], [0.0])
    assert np.abs(tr.x_tilde[len(tr.t) // 2:]).max() <= iss_gain_bound(b) * d


def test_nominal_below_envelope_small_case():
    g = ring(3)
    bank = FunctionBank([lambda t: [[1.0, np.sin(t)]], lambda t: [[np.cos(t), 1.0]],
                         lambda t: [[0.5, 0.5]]])
    cfg = EstimatorConfig.scalar(1.0, 3, 2, 1.0, horizon=10.0)
    T = 0.5
    lo, hi = empirical_iota3(bank, g, 1.0, 1.0, 1.0, T, n_starts=200, horizon=10.0)
    k1, k2 = kappas(cfg.gamma_bar, T, hi)
    b = BoundSet(1, 1, lo, hi, 0, 0, k1, k2, T)
    x0 = np.array([1.0, -1.0, 0.5, 0.2, -0.3, 0.8])
    tr = simulate_error(cfg, bank, g, x0)
    env = convergence_bound(b, np.linalg.norm(x0), tr.t)
    assert np.all(tr.error_norms() <= env * (1 + 1e-9))
