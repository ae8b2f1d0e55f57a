"""Run configuration: JSON schema checks, defaults and object construction."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .estimator import ConfigError, EstimatorConfig
from .netgraph import GraphError, GraphSchedule, ring

DEFAULTS = {
    "seed": 0,
    "out": "citune-out",
    "graph": {"builtin": "ring", "n": 6},
    "regressor": {"kind": "builtin", "name": "mass_spring"},
    "plant": {"k1": 1.0, "k2": 1.0, "k3_0": 1.0, "h": 5e-4},
    "theta": None,
    "estimator": {"alpha": 1.0, "gamma": 1.0, "h": 1e-3, "horizon": 50.0, "x0": None},
    "excitation": {"T": 0.01, "samples": 1000, "h_q": 5e-4, "t_min": 1.0},
    "tuner": {
        "variant": "output_error",
        "c2": None,
        "gain_range": [0.5, 5.0],
        "alpha_max": 10.0,
        "alpha_tol": 1e-3,
        "starts": 1000,
        "eps_feas": 1e-8,
        "rel_tol": 1e-4,
        "box": 1e4,
        "policy": "conservative",
    },
    "sweep": {"count": 7, "factor": 2.0},
}


class ConfigErrors(ConfigError):
    """All schema problems of one config file."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class RunConfig:
    raw: dict
    graph: GraphSchedule
    estimator: EstimatorConfig
    path: Path | None = None

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    def section(self, name) -> dict:
        return self.raw[name]

    def echo(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        p = out / "resolved_config.json"
        p.write_text(dump_json(self.raw))
        return p


def dump_json(obj) -> str:
    return json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n"


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def _merge(defaults, given, where, errors):
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if k not in defaults:
            errors.append(f"unknown key {where}{k!r}")
        elif isinstance(defaults[k], dict) and k != "graph" and k != "regressor":
            if not isinstance(v, dict):
                errors.append(f"{where}{k} must be an object")
            else:
                out[k] = _merge(defaults[k], v, f"{where}{k}.", errors)
        else:
            out[k] = v
    return out


def _gamma_matrix(spec, n, N, errors):
    """Scalar, list of per-agent blocks, or a full matrix."""
    try:
        arr = np.asarray(spec, dtype=float)
    except (TypeError, ValueError):
        errors.append("estimator.gamma must be a number, a list of N x N blocks or a matrix")
        return None
    if arr.ndim == 0:
        return float(arr) * np.eye(n * N)
    if arr.ndim == 3:
        if arr.shape != (n, N, N):
            errors.append(f"estimator.gamma blocks must have shape ({n}, {N}, {N})")
            return None
        G = np.zeros((n * N, n * N))
        for i in range(n):
            G[i * N:(i + 1) * N, i * N:(i + 1) * N] = arr[i]
        return G
    if arr.ndim == 2 and arr.shape == (n * N, n * N):
        return arr
    errors.append(f"estimator.gamma has unsupported shape {arr.shape}")
    return None


def build_graph(spec) -> GraphSchedule:
    if isinstance(spec, dict) and "builtin" in spec:
        extra = set(spec) - {"builtin", "n"}
        if extra:
            raise GraphError(f"unknown graph keys {sorted(extra)}")
        if spec["builtin"] != "ring":
            raise GraphError(f"unknown builtin graph {spec['builtin']!r}")
        return ring(int(spec.get("n", 6)))
    if not isinstance(spec, dict) or set(spec) - {"n", "intervals"}:
        raise GraphError("graph must be {'n', 'intervals'} or {'builtin': 'ring', 'n'}")
    return GraphSchedule.from_dict(spec)


def _table_header_dims(path):
    import csv

    with Path(path).open(newline="") as fh:
        header = [h.strip() for h in next(csv.reader(fh))]
    keys = [tuple(int(v) for v in h[1:].split("_")) for h in header[1:]]
    return max(k[0] for k in keys), max(k[2] for k in keys)


def resolve_file(name, base):
    p = Path(name)
    if not p.is_absolute() and base is not None:
        p = Path(base) / p
    return p


def _regressor_dims(spec, errors, base=None):
    """(n, N) implied by the regressor spec."""
    specs = spec if isinstance(spec, list) else [spec]
    n = 0
    N = None
    for s in specs:
        if not isinstance(s, dict) or "kind" not in s:
            errors.append("regressor entries need a 'kind'")
            return None, None
        if s["kind"] == "builtin":
            if set(s) - {"kind", "name", "agent"}:
                errors.append(f"unknown regressor keys {sorted(set(s) - {'kind', 'name', 'agent'})}")
            if s.get("name") != "mass_spring":
                errors.append(f"unknown builtin regressor {s.get('name')!r}")
                return None, None
            n += 1 if "agent" in s else 6
            N = 3
        elif s["kind"] == "table":
            if set(s) - {"kind", "file"}:
                errors.append(f"unknown regressor keys {sorted(set(s) - {'kind', 'file'})}")
            if "file" not in s:
                errors.append("table regressor needs 'file'")
                return None, None
            f = resolve_file(s["file"], base)
            try:
                ni, Ni = _table_header_dims(f)
            except (OSError, ValueError, StopIteration) as exc:
                errors.append(f"regressor table {f}: {exc}")
                return None, None
            if N is not None and Ni != N:
                errors.append("all regressor tables need the same parameter count")
            n += ni
            N = Ni
        else:
            errors.append(f"unknown regressor kind {s['kind']!r}")
            return None, None
    return n, N


def _apply_overrides(data, overrides):
    """Set dotted keys such as ``"tuner.eps_feas"`` on a copy of ``data``."""
    data = copy.deepcopy(data)
    for key, value in (overrides or {}).items():
        node = data
        *head, last = key.split(".")
        for k in head:
            node = node.setdefault(k, {})
        node[last] = value
    return data


def validate_config(data: dict | None = None, path=None, overrides=None) -> RunConfig:
    """Fill defaults and check everything; raises ConfigErrors listing all problems.

    ``overrides`` maps dotted keys to values applied on top of the file
    (command-line flags).
    """
    errors = []
    if data is None:
        p = Path(path)
        try:
            data = json.loads(p.read_text())
        except FileNotFoundError:
            raise ConfigErrors([f"config file not found: {p}"])
        except json.JSONDecodeError as exc:
            raise ConfigErrors([f"invalid JSON in {p}: {exc}"])
    if not isinstance(data, dict):
        raise ConfigErrors(["config must be a JSON object"])
    data = _apply_overrides(data, overrides)
    raw = _merge(DEFAULTS, data, "", errors)
    if not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool):
        errors.append("seed must be an integer")

    graph = None
    try:
        graph = build_graph(raw["graph"])
    except (GraphError, KeyError, TypeError, ValueError) as exc:
        errors.append(f"graph: {exc}")

    base = Path(path).parent if path else None
    n, N = _regressor_dims(raw["regressor"], errors, base)
    if graph is not None and n is not None and n != graph.n:
        errors.append(f"regressor has {n} agents but graph has {graph.n} nodes")

    est = raw["estimator"]
    alpha = est["alpha"]
    if not isinstance(alpha, (int, float)) or not alpha > 0:
        errors.append("estimator.alpha must be strictly positive (the consensus gain is assumed positive)")
    for key in ("h", "horizon"):
        if not isinstance(est[key], (int, float)) or not est[key] > 0:
            errors.append(f"estimator.{key} must be positive")
    exc_cfg = raw["excitation"]
    if not exc_cfg["T"] > 0:
        errors.append("excitation.T must be positive")
    tun = raw["tuner"]
    if tun["variant"] not in ("standard", "output_error", "oe"):
        errors.append("tuner.variant must be 'standard' or 'output_error'")
    gr = tun["gain_range"]
    if not (isinstance(gr, list) and len(gr) == 2 and 0 < gr[0] <= gr[1]):
        errors.append("tuner.gain_range must be [low, high] with 0 < low <= high")
    if not tun["eps_feas"] > 0:
        errors.append("tuner.eps_feas must be positive")
    if raw["sweep"]["count"] < 2:
        errors.append("sweep.count must be at least 2")
    for key in ("k1", "k2", "k3_0"):
        if not raw["plant"][key] > 0:
            errors.append(f"plant.{key} must be positive")

    estimator = None
    if n is not None and N is not None and not any(e.startswith("estimator.") for e in errors):
        G = _gamma_matrix(est["gamma"], n, N, errors)
        if G is not None:
            try:
                estimator = EstimatorConfig(G, float(alpha), N, h=float(est["h"]),
                                            horizon=float(est["horizon"]))
            except ConfigError as exc:
                errors.append(f"estimator.gamma: {exc}")
    if errors:
        raise ConfigErrors(errors)
    return RunConfig(raw, graph, estimator, Path(path) if path else None)


def build_bank(run: RunConfig):
    """(bank, theta) for the configured regressor; theta is a callable or vector."""
    from .bench import MassSpringParams, benchmark_lre
    from .excitation import StackedBank, TableBank

    raw = run.raw
    specs = raw["regressor"] if isinstance(raw["regressor"], list) else [raw["regressor"]]
    base = run.path.parent if run.path else None
    banks, thetas = [], []
    for s in specs:
        if s["kind"] == "builtin":
            pl = raw["plant"]
            params = MassSpringParams(pl["k1"], pl["k2"], pl["k3_0"])
            lre = benchmark_lre(params, float(raw["estimator"]["horizon"]), float(pl["h"]))
            banks.append(lre.bank if "agent" not in s else lre.bank.agent(int(s["agent"]) - 1))
            thetas.append(lre.theta)
        else:
            banks.append(TableBank.from_csv(resolve_file(s["file"], base)))
            thetas.append(None)
    bank = banks[0] if len(banks) == 1 else StackedBank(banks)
    if raw["theta"] is not None:
        theta = np.asarray(raw["theta"], dtype=float)
    elif all(t is not None for t in thetas):
        theta = thetas[0]
    else:
        theta = None
    return bank, theta
