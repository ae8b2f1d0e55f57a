import time

import numpy as np
import pytest

from citune import bench, tuner
from citune.estimator import EstimatorConfig

ACCEPTANCE = {}


def record(k, ok, detail=""):
    ACCEPTANCE[k] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def lre():
    return bench.benchmark_lre()


@pytest.fixture(scope="session")
def ring6():
    return bench.benchmark_graph()


@pytest.fixture(scope="session")
def tuned(lre, ring6):
    """Two-step tuning of the benchmark with the default settings."""
    d1, _, q, w = bench.projection_matrices()

    def d2(n_e):
        return bench.projection_matrices(n_e=n_e)[1]

    t0 = time.perf_counter()
    res = tuner.two_step_tune(lre.bank, ring6, d1, d2, q, w, t_min=1.0)
    return res, time.perf_counter() - t0


@pytest.fixture(scope="session")
def sweep(lre, ring6, tuned):
    res, _ = tuned
    cert = res.certificate
    gain = float(np.linalg.eigvalsh(cert.gamma_bar)[0])
    cfg = EstimatorConfig.scalar(1.0, 6, 3, cert.alpha)
    t0 = time.perf_counter()
    out = bench.gain_sweep(cfg, bench.sweep_gains(gain), bank=lre.bank, g=ring6)
    return out, gain, time.perf_counter() - t0
