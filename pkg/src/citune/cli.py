"""Command line front end: simulate, gramian-bounds, tune, evaluate, report."""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis, bench, tuner
from .config import ConfigErrors, RunConfig, build_bank, dump_json, validate_config
from .estimator import (ConfigError, EstimatorConfig, random_initial_estimate, simulate_disturbed,
                        simulate_nominal)
from .excitation import CPEViolated, cpe_bounds
from .integrate import IntegrationError
from .netgraph import GraphError, connectivity_on_average

DOMAIN_ERRORS = (CPEViolated, GraphError, tuner.TuningError, analysis.BoundError, IntegrationError,
                 bench.LREInconsistent, bench.MetricUndefined)


class UsageError(Exception):
    pass


def threads() -> int:
    try:
        return max(1, int(os.environ.get("CITUNE_THREADS", "1")))
    except ValueError:
        return 1


def _write_csv(path, header, rows):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _out_dir(args, run: RunConfig) -> Path:
    out = Path(args.out or run.raw["out"])
    out.mkdir(parents=True, exist_ok=True)
    run.echo(out)
    return out


def _initial_estimate(run, bank, seed):
    x0 = run.raw["estimator"]["x0"]
    if x0 is not None:
        return np.asarray(x0, dtype=float)
    return random_initial_estimate(bank.n, bank.N, seed)


def _trajectory_files(out, stem, t, xhat, xtil, meta):
    nN = xhat.shape[1]
    header = ["t"] + [f"xhat_{i + 1}" for i in range(nN)] + [f"xtilde_{i + 1}" for i in range(nN)]
    _write_csv(out / f"{stem}.csv", header, (np.concatenate([[tk], a, b]) for tk, a, b in zip(t, xhat, xtil)))
    (out / f"{stem}.json").write_text(dump_json(meta))


def _scenario_ids(spec):
    if spec in (None, "all"):
        return [1, 2, 3, 4, 5]
    try:
        sid = int(spec)
    except ValueError:
        raise UsageError(f"scenario must be 1..5 or 'all', got {spec!r}")
    if sid not in bench.SCENARIOS:
        raise UsageError(f"scenario must be 1..5 or 'all', got {spec!r}")
    return [sid]


def cmd_simulate(args, run: RunConfig):
    out = _out_dir(args, run)
    bank, theta = build_bank(run)
    cfg, g = run.estimator, run.graph
    seed = run.seed if args.seed is None else args.seed
    if args.scenario is None:
        if theta is None:
            raise UsageError("simulate needs 'theta' in the config for table regressors")
        x0 = _initial_estimate(run, bank, seed)
        traj = simulate_nominal(cfg, bank, g, x0, theta)
        norms = traj.error_norms()
        meta = {"kind": "nominal", "seed": seed, "alpha": cfg.alpha, "h": cfg.h, "horizon": cfg.horizon,
                "error_norm_initial": float(norms[0]), "error_norm_final": float(norms[-1])}
        _trajectory_files(out, "trajectory", traj.t, traj.x_hat, traj.x_tilde, meta)
        print(dump_json(meta), end="")
        return 0
    summary = {}
    for sid in _scenario_ids(args.scenario):
        s = bench.SCENARIOS[sid]
        dist = bench.scenario_disturbance(s, bank.n, bank.N, g.max_edges)
        run_d = simulate_disturbed(cfg, bank, g, dist)
        if theta is None:
            truth = np.zeros_like(run_d.x_tilde)
        else:
            pl = run.raw["plant"]
            params = bench.MassSpringParams(pl["k1"], pl["k2"], pl["k3_0"], s.d1, s.d2, s.d3)
            truth = np.tile(params.theta(run_d.t), (1, bank.n))
        metric = bench.l2_metric(run_d.z, run_d.delta, t=run_d.t)
        meta = {"kind": "disturbed", "scenario": sid, "alpha": cfg.alpha, "metric": metric,
                "error_norm_final": float(np.linalg.norm(run_d.x_tilde[-1]))}
        _trajectory_files(out, f"trajectory_s{sid}", run_d.t, truth + run_d.x_tilde, run_d.x_tilde, meta)
        summary[str(sid)] = meta
    print(dump_json(summary), end="")
    return 0


def _excitation_setup(run, bank, args):
    ex = run.raw["excitation"]
    T = float(args.window if args.window is not None else ex["T"])
    horizon = run.estimator.horizon
    report = cpe_bounds(bank, T, horizon, ex["samples"], ex["h_q"], t_min=ex["t_min"])
    spectral = connectivity_on_average(run.graph, T, horizon)
    return T, report, spectral


def cmd_gramian_bounds(args, run: RunConfig):
    out = _out_dir(args, run)
    bank, _ = build_bank(run)
    cfg = run.estimator
    T, report, spectral = _excitation_setup(run, bank, args)
    report = report.with_r4(cfg.alpha, spectral.r3)
    i2l, i2u = analysis.output_gramian_bounds(report, spectral, cfg.alpha, cfg.n)
    i3l, i3u, p1, p2 = analysis.error_gramian_bounds(i2l, i2u, cfg.r1)
    result = {"iota2": [i2l, i2u], "iota3": [i3l, i3u], "phi1": p1, "phi2": p2,
              "iota1": [report.iota1_lower, report.iota1_upper], "r2": report.r2,
              "r3": spectral.r3, "r4": report.r4, "lambda_lower": spectral.lambda_lower, "T": T}
    used = (i3l, i3u)
    if args.empirical:
        g_lo, g_hi = cfg.gamma_extremes()
        starts = args.starts or run.raw["tuner"]["starts"]
        emp = analysis.empirical_iota3(bank, run.graph, cfg.alpha, g_lo, g_hi, T, starts, cfg.horizon,
                                       cfg.h, run.raw["excitation"]["t_min"])
        result["iota3_empirical"] = list(emp)
        used = emp
    bounds = analysis.BoundSet(i2l, i2u, used[0], used[1], p1, p2,
                               *analysis.kappas(cfg.gamma_bar, T, used[1]), T)
    result["kappa"] = [bounds.kappa2, bounds.kappa1]
    result["iss_gain"] = analysis.iss_gain_bound(bounds)
    result["kappa_source"] = "empirical" if args.empirical else "analytic"
    (out / "bounds.json").write_text(dump_json(result))
    print(dump_json(result), end="")
    return 0


def _projections(bank, g):
    if bank.N < 3:
        raise UsageError("the benchmark disturbance projections need N >= 3 parameters")
    d1, _, q, w = bench.projection_matrices(bank.n, bank.N, g.max_edges, bank.N_y)

    def d2(n_e):
        return bench.projection_matrices(bank.n, bank.N, n_e, bank.N_y)[1]

    return d1, d2, q, w


def cmd_tune(args, run: RunConfig):
    out = _out_dir(args, run)
    bank, _ = build_bank(run)
    tun, ex = run.raw["tuner"], run.raw["excitation"]
    variant = args.variant or tun["variant"]
    d1, d2, q, w = _projections(bank, run.graph)
    if tuner._variant(variant) == "standard":
        q = np.zeros((q.shape[0], bank.n * bank.N))
    res = tuner.two_step_tune(
        bank, run.graph, d1, d2, q, w, variant=variant, gain_range=tuple(tun["gain_range"]),
        T=float(args.window or ex["T"]), n_starts=int(args.starts or tun["starts"]),
        horizon=run.estimator.horizon, h=run.estimator.h, t_min=ex["t_min"],
        alpha_max=tun["alpha_max"], alpha_tol=tun["alpha_tol"], c2=tun["c2"], policy=tun["policy"],
        eps_feas=tun["eps_feas"], rel_tol=tun["rel_tol"], box_max=tun["box"])
    cert = res.to_dict()
    (out / "certificate.json").write_text(dump_json(cert))
    print(dump_json(cert), end="")
    return 0


def _load_gains(path, run: RunConfig):
    """(alpha, scalar gain, certificate dict or None)."""
    if path is None:
        G = run.estimator.gamma_bar
        if not np.allclose(G, G[0, 0] * np.eye(G.shape[0])):
            raise UsageError("evaluate needs a scalar gain (Gamma = g I)")
        return run.estimator.alpha, float(G[0, 0]), None
    try:
        cert = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigErrors([f"gains file not found: {path}"])
    except json.JSONDecodeError as exc:
        raise ConfigErrors([f"invalid JSON in {path}: {exc}"])
    try:
        return float(cert["alpha"]), float(cert["gamma_bar_eigs"][0]), cert
    except (KeyError, TypeError, IndexError):
        raise ConfigErrors([f"{path} is not a certificate (needs alpha and gamma_bar_eigs)"])


def _metrics(run, alpha, gains, sids):
    bank, _ = build_bank(run)
    cfg = EstimatorConfig(np.eye(bank.n * bank.N), alpha, bank.N, h=run.estimator.h,
                          horizon=run.estimator.horizon)

    def one(sid):
        return bench.scenario_metrics(cfg, gains, (sid,), bank, run.graph)[0]

    with ThreadPoolExecutor(max_workers=threads()) as pool:
        rows = list(pool.map(one, sids))
    return np.array(rows)


def cmd_evaluate(args, run: RunConfig):
    out = _out_dir(args, run)
    alpha, gain, cert = _load_gains(args.gains, run)
    sids = _scenario_ids(args.scenario)
    sw = run.raw["sweep"]
    gains = bench.sweep_gains(gain, sw["count"], sw["factor"]) if args.sweep else np.array([gain])
    M = _metrics(run, alpha, gains, sids)
    rows = [(sid, float(gv), float(M[i, j])) for i, sid in enumerate(sids) for j, gv in enumerate(gains)]
    _write_csv(out / "metrics.csv", ["scenario", "gain", "metric"], rows)
    summary = {"alpha": alpha, "gain": gain, "gains": gains, "scenarios": sids,
               "metrics": {str(s): M[i].tolist() for i, s in enumerate(sids)},
               "average": M.mean(axis=0).tolist()}
    if cert is not None:
        summary["sqrt_gamma"] = float(cert.get("sqrt_gamma", np.sqrt(cert.get("gamma", np.inf))))
        summary["within_bound"] = bool(np.all(M <= summary["sqrt_gamma"]))
    (out / "summary.json").write_text(dump_json(summary))
    print(dump_json(summary), end="")
    return 0


def cmd_report(args, run: RunConfig):
    from .svgplot import grouped_bars, line_plot

    out = _out_dir(args, run)
    alpha, gain, _ = _load_gains(args.gains, run)
    sw = run.raw["sweep"]
    gains = bench.sweep_gains(gain, sw["count"], sw["factor"])
    sids = _scenario_ids(args.scenario)
    M = _metrics(run, alpha, gains, sids)
    summary = {"alpha": alpha, "gains": gains, "scenarios": sids,
               "metrics": {str(s): M[i].tolist() for i, s in enumerate(sids)},
               "average": M.mean(axis=0).tolist(),
               "best_gain_average": float(gains[int(np.argmin(M.mean(axis=0)))])}
    (out / "report.json").write_text(dump_json(summary))
    if args.svg:
        groups = [f"S{s}" for s in sids] + ["avg"]
        vals = np.vstack([M, M.mean(axis=0)[None]])
        labels = [f"g={gv:.3g}" for gv in gains]
        (out / "sweep.svg").write_text(grouped_bars(groups, labels, vals, "Measured L2 gain per scenario",
                                                    "metric"))
        bank, theta = build_bank(run)
        cfg = EstimatorConfig(gain * np.eye(bank.n * bank.N), alpha, bank.N, h=run.estimator.h,
                              horizon=run.estimator.horizon)
        if theta is not None:
            seed = run.seed if args.seed is None else args.seed
            traj = simulate_nominal(cfg, bank, run.graph, _initial_estimate(run, bank, seed), theta)
            (out / "nominal_error.svg").write_text(line_plot(
                traj.t, [traj.error_norms()], ["|x_tilde|"], "Nominal estimation error", "norm", log=True))
        curves = []
        for sid in sids:
            dist = bench.scenario_disturbance(bench.SCENARIOS[sid], bank.n, bank.N, run.graph.max_edges)
            rd = simulate_disturbed(cfg, bank, run.graph, dist)
            curves.append((rd.t, np.linalg.norm(rd.x_tilde, axis=-1)))
        (out / "disturbed_error.svg").write_text(line_plot(
            curves[0][0], [c[1] for c in curves], [f"S{s}" for s in sids],
            "Disturbed estimation error", "norm"))
    print(dump_json(summary), end="")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "gramian-bounds": cmd_gramian_bounds,
    "tune": cmd_tune,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="citune", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="run configuration (JSON)")
        sp.add_argument("--out", help="output directory (default from config)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--scenario", help="1..5 or all")
        sp.add_argument("--variant", choices=["standard", "oe", "output_error"])
        sp.add_argument("--empirical", action="store_true", help="also compute sampled Gramian bounds")
        sp.add_argument("--starts", type=int, help="number of Gramian windows")
        sp.add_argument("--window", type=float, help="excitation window T")
        sp.add_argument("--svg", action="store_true", help="write SVG plots")
        sp.add_argument("--gains", help="certificate JSON with alpha and gains")
        sp.add_argument("--sweep", action="store_true", help="evaluate the gain sweep around the gain")
        sp.add_argument("--h", type=float, help="integration step (default 1e-3)")
        sp.add_argument("--h-q", type=float, dest="h_q", help="quadrature step (default 5e-4)")
        sp.add_argument("--eps-feas", type=float, dest="eps_feas", help="LMI feasibility margin (default 1e-8)")
    return p


def _overrides(args) -> dict:
    out = {}
    if args.h is not None:
        out["estimator.h"] = args.h
    if args.h_q is not None:
        out["excitation.h_q"] = args.h_q
    if args.eps_feas is not None:
        out["tuner.eps_feas"] = args.eps_feas
    return out


def _fail(code, kind, message):
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}, sort_keys=True) + "\n")
    return code


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and 2
    try:
        run = validate_config(path=args.config, overrides=_overrides(args))
        return COMMANDS[args.command](args, run)
    except ConfigErrors as exc:
        return _fail(2, "config", "; ".join(exc.errors))
    except (ConfigError, UsageError) as exc:
        return _fail(2, "config", str(exc))
    except DOMAIN_ERRORS as exc:
        return _fail(1, type(exc).__name__, str(exc))


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
