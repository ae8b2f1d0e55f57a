import numpy as np
import pytest

from citune import bench
from citune.estimator import (ConfigError, DisturbanceSpec, EstimatorConfig, StackedState, affine_disturbed_rhs,
                              assemble_lambda, ci_rhs, gradient_rhs, lambda_gram_series, random_initial_estimate,
                              simulate_disturbed, simulate_error, simulate_iss, simulate_nominal)
from citune.excitation import FunctionBank
from citune.integrate import IntegrationError, rk4
from citune.netgraph import GraphSchedule, laplacian, path, ring


def scalar_bank(c=1.0):
    return FunctionBank.constant([[c]])


SOLO = GraphSchedule.static(1, [])


def test_config_validation():
    with pytest.raises(ConfigError, match="alpha"):
        EstimatorConfig.scalar(1.0, 2, 2, 0.0)
    with pytest.raises(ConfigError, match="block diagonal"):
        EstimatorConfig(np.ones((4, 4)) + np.eye(4), 1.0, 2)
    with pytest.raises(ConfigError, match="Cholesky"):
        EstimatorConfig(np.diag([1.0, -1.0]), 1.0, 2)
    with pytest.raises(ConfigError, match="symmetric"):
        EstimatorConfig(np.array([[1.0, 0.5], [0.0, 1.0]]), 1.0, 2)
    cfg = EstimatorConfig.scalar(2.0, 3, 2, 1.0)
    assert cfg.h == 1e-3 and cfg.horizon == 50.0 and cfg.n == 3 and cfg.r1 == 2.0


def test_single_agent_lambda():
    bank = FunctionBank.constant([[[1.0, 2.0], [3.0, 4.0]]])
    om = assemble_lambda(bank, SOLO, 1.0, 0.3)
    assert np.array_equal(om.matrix, [[1, 2], [3, 4]])
    assert om.n_e == 0


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        assemble_lambda(scalar_bank(), ring(3), 1.0, 0.0)


def test_benchmark_lambda_gram(lre):
    g = bench.benchmark_graph()
    alpha = 0.7
    om = assemble_lambda(lre.bank, g, alpha, 0.0)
    expect = om.top.T @ om.top + alpha * np.kron(laplacian(g, 0.0), np.eye(3))
    assert np.abs(om.gram() - expect).max() < 1e-12
    series = lambda_gram_series(lre.bank.sample([0.0]), laplacian(g, 0.0), alpha)[0]
    assert np.abs(series - expect).max() < 1e-12


def test_consensus_rows_vanish(lre):
    g = bench.benchmark_graph()
    theta = np.array([0.3, -1.2, 2.0])
    om = assemble_lambda(lre.bank, g, 2.0, 4.0)
    assert np.array_equal(om.bottom @ np.tile(theta, 6), np.zeros(om.bottom.shape[0]))


def test_rhs_formulations_agree(lre):
    rng = np.random.default_rng(1)
    g = bench.benchmark_graph()
    cfg = EstimatorConfig(np.kron(np.eye(6), np.diag([1.0, 2.0, 0.5])), 1.3, 3)
    for _ in range(1000):
        t = rng.uniform(0, 50)
        x = rng.normal(size=18) * 10 ** rng.uniform(-2, 2)
        y = rng.normal(size=6)
        s = StackedState(x, t)
        a = ci_rhs(s, cfg, lre.bank, g, y)
        b = gradient_rhs(s, cfg, lre.bank, g, y)
        assert np.linalg.norm(a - b) <= 1e-10 * (1 + np.linalg.norm(x))


def test_equilibrium_rhs(lre):
    g = bench.benchmark_graph()
    cfg = EstimatorConfig.scalar(1.0, 6, 3, 1.0)
    theta = np.array([1.0, 1.0, 1.0])
    y = lre.bank.at(2.0)[:, 0, :] @ theta
    assert np.allclose(ci_rhs(StackedState(np.tile(theta, 6), 2.0), cfg, lre.bank, g, y), 0, atol=1e-12)


def test_single_agent_identity_regressor():
    bank = FunctionBank.constant([np.eye(2)])
    cfg = EstimatorConfig.scalar(1.0, 1, 2, 1.0)
    theta = np.array([1.0, -2.0])
    x = np.array([0.5, 0.5])
    assert np.allclose(ci_rhs(StackedState(x, 0.0), cfg, bank, SOLO, theta), -(x - theta))


def test_nominal_equilibrium(lre):
    g = bench.benchmark_graph()
    cfg = EstimatorConfig.scalar(2.0, 6, 3, 1.0, horizon=5.0)
    theta = np.array([1.0, 1.0, 1.0])
    tr = simulate_nominal(cfg, lre.bank, g, np.tile(theta, 6), theta)
    assert np.abs(tr.x_tilde).max() < 1e-12


@pytest.mark.parametrize("gain", [0.5, 2.0])
def test_scalar_closed_form(gain):
    cfg = EstimatorConfig.scalar(gain, 1, 1, 1.0, horizon=3.0)
    tr = simulate_nominal(cfg, scalar_bank(), SOLO, [2.0], [0.5])
    expect = 1.5 * np.exp(-gain * tr.t)
    assert np.abs(tr.x_tilde[:, 0] - expect).max() < 1e-8


def test_rk4_order():
    errs = []
    for h in (0.1, 0.05):
        x = rk4(lambda j, x: -x, np.array([1.0]), h, int(round(1 / h)), record=False)
        errs.append(abs(x[0] - np.exp(-1)))
    assert 14 < errs[0] / errs[1] < 18


def test_rk4_nonfinite():
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(IntegrationError, match="non-finite"):
        rk4(lambda j, x: x * x, np.array([1.0]), 0.5, 10)


def test_steps_land_on_breakpoints():
    g = GraphSchedule(2, (0.0, 0.3337, 1.0), (((1, 2),), (), ((1, 2),)))
    bank = FunctionBank.constant([[1.0], [0.0]])
    cfg = EstimatorConfig.scalar(1.0, 2, 1, 1.0, horizon=2.0, h=0.01)
    tr = simulate_error(cfg, bank, g, [1.0, 0.0])
    assert np.any(np.isclose(tr.t, 0.3337, rtol=0, atol=1e-15))
    assert np.any(np.isclose(tr.t, 1.0, rtol=0, atol=1e-15))
    # node 2 is cut off on [0.3337, 1): its error stays frozen there
    seg = (tr.t >= 0.3337) & (tr.t <= 1.0)
    assert np.ptp(tr.x_tilde[seg, 1]) < 1e-15


def disturbance(lre, amp=(1.0, 1.0, 0.5), zero_proj=False):
    d1, d2, q, w = bench.projection_matrices()
    if zero_proj:
        d1, d2 = 0 * d1, 0 * d2
    amp = np.asarray(amp)

    def delta(ts):
        t = np.atleast_1d(ts)
        return amp * np.stack([np.sin(0.5 * t), np.sin(50 * t), np.cos(7 * t)], axis=-1)

    return DisturbanceSpec(delta, d1, d2, q, w)


def test_disturbed_zero_delta_matches_error(lre):
    g = bench.benchmark_graph()
    cfg = EstimatorConfig.scalar(1.5, 6, 3, 1.0, horizon=5.0)
    x0 = random_initial_estimate(6, 3, seed=3)
    nom = simulate_error(cfg, lre.bank, g, x0)
    d = simulate_disturbed(cfg, lre.bank, g, disturbance(lre, amp=(0, 0, 0)), x0)
    assert np.array_equal(d.x_tilde, nom.x_tilde)
    d = simulate_disturbed(cfg, lre.bank, g, disturbance(lre, zero_proj=True), x0)
    assert np.array_equal(d.x_tilde, nom.x_tilde)


def test_error_equals_nominal_estimate(lre):
    g = bench.benchmark_graph()
    cfg = EstimatorConfig.scalar(1.0, 6, 3, 1.0, horizon=3.0)
    x0 = random_initial_estimate(6, 3)
    nom = simulate_nominal(cfg, lre.bank, g, x0, lre.theta)
    err = simulate_error(cfg, lre.bank, g, x0 - np.tile(lre.theta(0.0)[0], 6))
    assert np.abs(nom.x_tilde - err.x_tilde).max() < 1e-10


def test_batched_gains_match_single(lre):
    g = bench.benchmark_graph()
    cfg = EstimatorConfig.scalar(1.0, 6, 3, 1.0, horizon=3.0)
    dist = disturbance(lre)
    gains = [0.5, 2.0]
    stack = np.array([k * np.eye(18) for k in gains])
    batch = simulate_disturbed(cfg, lre.bank, g, dist, gamma_override=stack)
    for b, k in enumerate(gains):
        single = simulate_disturbed(EstimatorConfig.scalar(k, 6, 3, 1.0, horizon=3.0), lre.bank, g, dist)
        assert np.abs(batch.x_tilde[:, b] - single.x_tilde).max() < 1e-13
        assert np.abs(batch.z[:, b] - single.z).max() < 1e-12


def test_disturbed_reproducible(lre):
    g = bench.benchmark_graph()
    cfg = EstimatorConfig.scalar(1.0, 6, 3, 1.0, horizon=5.0)
    dist = bench.scenario_disturbance(bench.SCENARIOS[2])
    a = simulate_disturbed(cfg, lre.bank, g, dist)
    b = simulate_disturbed(cfg, lre.bank, g, dist)
    m = bench.l2_metric(a.z, a.delta, t=a.t)
    assert np.isfinite(m) and m == bench.l2_metric(b.z, b.delta, t=b.t)


def test_disturbance_shape_check(lre):
    g = bench.benchmark_graph()
    d1, d2, q, w = bench.projection_matrices()
    bad = DisturbanceSpec(lambda ts: np.zeros((len(ts), 3)), d1, d2[:-1], q, w)
    with pytest.raises(ValueError, match="Delta2_bar"):
        simulate_disturbed(EstimatorConfig.scalar(1.0, 6, 3, 1.0, horizon=1.0), lre.bank, g, bad)


def test_affine_rhs():
    bank = scalar_bank(2.0)
    cfg = EstimatorConfig.scalar(3.0, 1, 1, 1.0)
    s = StackedState(np.array([0.7]), 0.0)
    assert np.allclose(affine_disturbed_rhs(s, cfg, bank, SOLO, [0.0]), -3.0 * 4.0 * 0.7)
    assert np.allclose(affine_disturbed_rhs(s, cfg, bank, SOLO, [0.2]), -3.0 * 4.0 * 0.7 + 0.2)


def test_iss_steady_state():
    g_, c, d = 3.0, 2.0, 0.6
    cfg = EstimatorConfig.scalar(g_, 1, 1, 1.0, horizon=5.0)
    tr = simulate_iss(cfg, scalar_bank(c), SOLO, lambda ts: np.full((len(ts), 1), d), [1.0])
    assert tr.x_tilde[-1, 0] == pytest.approx(d / (g_ * c * c), abs=1e-10)


def test_path_graph_consensus():
    # only agent 1 sees the parameter; consensus carries it along the path
    bank = FunctionBank.constant([[1.0], [0.0], [0.0]])
    cfg = EstimatorConfig.scalar(1.0, 3, 1, 2.0, horizon=30.0)
    tr = simulate_nominal(cfg, bank, path(3), np.zeros(3), [1.0])
    assert np.abs(tr.x_tilde[-1]).max() < 1e-3
