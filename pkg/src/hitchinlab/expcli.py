"""Command line driver: ``hitchinlab <subcommand> --config c.json --out dir``.

Each subcommand reads one JSON config, runs a pipeline, and writes
``report.json`` (canonical key order, floats with 17 significant digits) plus
CSV tables into the output directory.  The exit status is 0 when every
acceptance check named in the report passed, 1 when some check failed,
2 for an invalid config and 3 for a numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import scipy

from . import __version__
from . import hitchinsolve as hs
from . import parweights as pw
from .fitting import DecayFit, FitError, fit_exponential_decay, strictly_decreasing
from .localmodel import LocalModelSpec, ModelError
from .wkbtransport import GaugeError, PathConnectionData, PathError, TransportError, wkb_compare

SUBCOMMANDS = ("weights", "solve-local", "decouple", "limit", "wkb", "hkappa", "fit")

EXIT_OK, EXIT_CHECKS, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------------------
# canonical output


def _canon(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _canon(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canon(v) for v in obj]
    if isinstance(obj, Fraction):
        return pw.fraction_to_json(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, complex):
        return {"re": obj.real, "im": obj.imag}
    if isinstance(obj, np.ndarray):
        return _canon(obj.tolist())
    return obj


def _fmt_float(x: float) -> str:
    if math.isnan(x) or math.isinf(x):
        return "null"
    s = format(x, ".17g")
    return s if any(ch in s for ch in ".en") else s + ".0"


def dumps(obj: Any, indent: int = 0) -> str:
    """Canonical JSON: sorted keys, floats with 17 significant digits."""
    obj = _canon(obj)
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, float):
        return _fmt_float(obj)
    if isinstance(obj, (int, str)):
        return json.dumps(obj)
    if isinstance(obj, list):
        if not obj:
            return "[]"
        return "[\n" + ",\n".join(pad + dumps(v, indent + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = sorted(obj.items())
        return "{\n" + ",\n".join(pad + json.dumps(k) + ": " + dumps(v, indent + 1) for k, v in items) + "\n" + end + "}"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _csv(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    def cell(v):
        if isinstance(v, float) or isinstance(v, np.floating):
            return _fmt_float(float(v)).replace("null", "nan")
        return str(v)

    lines = [",".join(header)] + [",".join(cell(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(_canon(config), sort_keys=True, separators=(",", ":")).encode()).hexdigest()


# ----------------------------------------------------------------------------
# config helpers


def _get(cfg: dict, key: str, kind=None, default=None, required: bool = False):
    if key not in cfg:
        if required:
            raise ConfigError(f"missing config key {key!r}")
        return default
    v = cfg[key]
    if kind is not None and not isinstance(v, kind):
        raise ConfigError(f"config key {key!r} has the wrong type ({type(v).__name__})")
    return v


def _t_list(cfg: dict, key: str = "t_list") -> List[float]:
    ts = _get(cfg, key, list, required=True)
    if not ts:
        raise ConfigError(f"{key} must be nonempty")
    try:
        vals = [float(x) for x in ts]
    except (TypeError, ValueError):
        raise ConfigError(f"{key} must contain numbers") from None
    if any(not v > 0 for v in vals) or any(b <= a for a, b in zip(vals, vals[1:])):
        raise ConfigError(f"{key} must be positive and strictly increasing")
    return vals


def _model(cfg: dict) -> LocalModelSpec:
    m = _get(cfg, "model", dict, required=True)
    try:
        return LocalModelSpec.from_json(m)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model: {exc}") from None


def _solver(cfg: dict) -> hs.SolveConfig:
    s = dict(_get(cfg, "solver", dict, default={}))
    allowed = set(hs.SolveConfig.__dataclass_fields__)
    extra = set(s) - allowed
    if extra:
        raise ConfigError(f"unknown solver keys {sorted(extra)}")
    try:
        return hs.SolveConfig(**s)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid solver settings: {exc}") from None


def _check(name: str, criterion: str, passed: bool, **detail) -> dict:
    return {"name": name, "criterion": criterion, "passed": bool(passed), **detail}


def _map(fn: Callable, items: Sequence, jobs: int) -> list:
    """Evaluate ``fn`` on the sweep points, in a process pool when ``jobs > 1``.

    Results keep the order of ``items`` whatever the completion order.
    """
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


# ----------------------------------------------------------------------------
# pipelines: each returns (results, tables, checks)


def run_weights(cfg: dict, seed: int, jobs: int):
    try:
        spec = pw.GlobalSpectralSpec.from_json(_get(cfg, "spec", dict, required=True))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid spectral spec: {exc}") from None
    try:
        wa = pw.weights(spec)
    except pw.WeightError as exc:
        raise ConfigError(str(exc)) from None
    checks = [_check("degree_rule", "both parabolic degrees equal degE/2",
                     wa.degree1 == spec.half_degree and wa.degree2 == spec.half_degree)]
    expect = cfg.get("expect_a_star")
    if expect is not None:
        checks.append(_check("a_star", "a_star equals the configured value",
                             wa.a_star == pw.fraction_from_json(expect), expected=expect))
    if cfg.get("oracle", False) and spec.a_max > 0:
        oracle = pw.bisection_a(spec)
        cell = spec.a_max / 10**6
        checks.append(_check("oracle", "a_star lies in the bracketing cell of the bisection oracle",
                             oracle <= wa.a_star < oracle + cell, oracle=oracle))
    n_random = int(cfg.get("random_specs", 0))
    if n_random:
        rng = np.random.default_rng(seed)
        ok = 0
        for _ in range(n_random):
            sp = pw.random_stable_spec(rng)
            w = pw.weights(sp)
            ok += int(w.degree1 == sp.half_degree == w.degree2)
        checks.append(_check("random_degree_rule", f"degree rule on {n_random} random stable specs",
                             ok == n_random, passed_count=ok))
    results = {"spec": spec.to_json(), "assignment": wa.to_json(), "stability": pw.stability_check(spec)}
    return results, {"weights.csv": wa.to_csv()}, checks


def _solve(cfg: dict):
    spec = _model(cfg)
    sc = _solver(cfg)
    if spec.mode not in ("stable", "polystable"):
        raise ConfigError(f"model is {spec.mode}; the solver needs a stable or polystable model")
    profile, report = hs.solve_harmonic(spec, sc)
    return spec, sc, profile, report


def _profile_csv(profile: hs.RadialMetricProfile) -> str:
    f1, f2, g = profile.e_frame()
    rows = zip(profile.radii, f1, f2, g.real, g.imag, profile.log_a, profile.q.real, profile.q.imag)
    return _csv(["r", "f1", "f2", "re_g", "im_g", "log_a", "re_q", "im_q"], [list(map(float, r)) for r in rows])


def run_solve_local(cfg: dict, seed: int, jobs: int):
    spec, sc, profile, report = _solve(cfg)
    checks = [_check("converged", "interior residual below tolerance", report.converged,
                     residual_sup=report.residual_sup)]
    results = {"model": spec.to_json(), "solver": sc.to_json(),
               "report": {k: v for k, v in report.to_json().items() if k != "trace"},
               "profile": profile.to_json(spec)}
    try:
        bc = hs.extract_bc(profile, spec, max_spread=float(cfg.get("bc_max_spread", 1e-3)))
        results["b_c"] = {"value": bc.b_c, "spread": bc.spread, "window": list(bc.window)}
        exp = cfg.get("expect_bc")
        if exp is not None:
            checks.append(_check("b_c", "b_c within tolerance of the configured value",
                                 abs(bc.b_c - float(exp["value"])) <= float(exp["tol"]), value=bc.b_c))
    except hs.SolveError as exc:
        results["b_c"] = {"error": str(exc)}
        checks.append(_check("b_c_spread", "b_c estimator spread within bound", False))
    if spec.ell > 0 or spec.c != 0:
        fit = hs.offdiagonal_decay_fit(profile, spec)
        results["offdiagonal_fit"] = fit.to_json()
        r2_min = cfg.get("offdiagonal_r2_min")
        if r2_min is not None:
            checks.append(_check("offdiagonal_decay", "|h(v1,v2)| fits K exp(-delta r^(m+1)), delta > 0",
                                 fit.eps > 0 and fit.r2 >= float(r2_min)))
    trace = [[float(t["iter"]), float(t["dt"]), t["sup"], t["l2"], float(t["accepted"])] for t in report.trace]
    tables = {"profile.csv": _profile_csv(profile),
              "trace.csv": _csv(["iter", "dt", "sup", "l2", "accepted"], trace)}
    return results, tables, checks


def _scan_checks(scan: hs.ScanResult, cfg: dict, label: str) -> List[dict]:
    checks = [_check(f"{label}_monotone", "strictly decreasing over t", scan.strictly_decreasing),
              _check(f"{label}_rate", "fitted exponent positive", scan.fit.valid and scan.fit.eps > 0)]
    r2_min = cfg.get("r2_min")
    if r2_min is not None:
        checks.append(_check(f"{label}_r2", f"fit R^2 >= {r2_min}", scan.fit.valid and scan.fit.r2 >= float(r2_min)))
    return checks


def run_decouple(cfg: dict, seed: int, jobs: int):
    t_vals = _t_list(cfg)
    spec, sc, profile, report = _solve(cfg)
    ann = cfg.get("annulus", [1.0, 2.0])
    scan = hs.decoupling_scan(profile, spec, t_vals, (float(ann[0]), float(ann[1])))
    results = {"model": spec.to_json(), "solver": sc.to_json(), "residual_sup": report.residual_sup,
               "scan": scan.to_json()}
    table = _csv(["t", "bracket_sup"], list(zip(scan.t, scan.values)))
    return results, {"decouple.csv": table}, _scan_checks(scan, cfg, "decoupling")


def run_limit(cfg: dict, seed: int, jobs: int):
    t_vals = _t_list(cfg)
    spec, sc, profile, report = _solve(cfg)
    bc = hs.extract_bc(profile, spec)
    T = float(cfg.get("T", 1.0))
    scan = hs.limit_convergence_check(profile, spec, bc.b_c, t_vals, T)
    results = {"model": spec.to_json(), "solver": sc.to_json(), "b_c": bc.b_c, "scan": scan.to_json()}
    table = _csv(["t", "distance_sup"], list(zip(scan.t, scan.values)))
    return results, {"limit.csv": table}, _scan_checks(scan, cfg, "limit")


def _path_from_config(cfg: dict) -> PathConnectionData:
    p = _get(cfg, "path", dict, required=True)
    try:
        if "n_nodes" in p:
            return PathConnectionData.from_json(p)
        a = [complex(x) for x in p["a"]]
        b = [complex(x) for x in p.get("b", [0.0] * len(a))]
        B = np.asarray(p.get("B", np.zeros((len(a), len(a)))), dtype=complex)
        return PathConnectionData.constant(a, b, B, int(p.get("n", 2000)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid path: {exc}") from None


def _wkb_point(args):
    path_json, t = args
    rep = wkb_compare(PathConnectionData.from_json(path_json), [t])
    return rep.kappa[0], rep.errors[0], rep.target


def run_wkb(cfg: dict, seed: int, jobs: int):
    conn = _path_from_config(cfg)
    t_vals = _t_list(cfg)
    pj = conn.to_json()
    out = _map(_wkb_point, [(pj, t) for t in t_vals], jobs)
    kappas = [o[0] for o in out]
    errors = [o[1] for o in out]
    target = out[0][2]
    fit = DecayFit.from_samples(t_vals, errors)
    results = {"t": t_vals, "kappa": kappas, "target": list(target), "errors": errors, "fit": fit.to_json()}
    checks = []
    if cfg.get("expect_zero_error", False):
        checks.append(_check("exact", "all errors exactly 0", all(e == 0.0 for e in errors)))
    ratio = cfg.get("min_ratio_per_doubling")
    if ratio is not None:
        ok = all(a >= float(ratio) * b for a, b in zip(errors, errors[1:]))
        checks.append(_check("doubling", f"error shrinks by >= {ratio} per step of the t list", ok))
    if cfg.get("expect_decreasing", False):
        checks.append(_check("monotone", "errors strictly decreasing", strictly_decreasing(errors)))
    r = conn.rank
    rows = [[t, e] + list(k) + list(target) for t, e, k in zip(t_vals, errors, kappas)]
    header = ["t", "err_inf"] + [f"kappa_{i + 1}" for i in range(r)] + [f"target_{i + 1}" for i in range(r)]
    return results, {"wkb.csv": _csv(header, rows)}, checks


def _hkappa_point(args):
    model_json, L, kappa, n_r, n_a = args
    spec = LocalModelSpec.from_json(model_json)
    res = hs.hkappa_residual(kappa, L, spec, n_r, n_a)
    return res.sup, res.l2


def run_hkappa(cfg: dict, seed: int, jobs: int):
    spec = _model(cfg)
    L = _get(cfg, "L", int, required=True)
    kappas = _get(cfg, "kappa_list", list, required=True)
    if not kappas or any(not 0 < float(k) < 1 for k in kappas):
        raise ConfigError("kappa_list must hold values in (0, 1)")
    grid = _get(cfg, "grid", dict, default={})
    n_r, n_a = int(grid.get("n_radii", 200)), int(grid.get("n_angles", 64))
    out = _map(_hkappa_point, [(spec.to_json(), L, float(k), n_r, n_a) for k in kappas], jobs)
    sups = [o[0] for o in out]
    ratios = [b / a for a, b in zip(sups, sups[1:])]
    bound = 2.0 ** (-(L - 1))
    checks = []
    if all(abs(float(b) - float(a) / 2) < 1e-15 for a, b in zip(kappas, kappas[1:])):
        checks.append(_check("kappa_scaling", f"residual(kappa/2)/residual(kappa) <= 2^-(L-1) = {bound}",
                             all(r <= bound for r in ratios)))
    results = {"model": spec.to_json(), "L": L, "kappa": [float(k) for k in kappas], "residual_sup": sups,
               "residual_l2": [o[1] for o in out], "ratios": ratios}
    table = _csv(["kappa", "residual_sup", "residual_l2"], [[float(k), o[0], o[1]] for k, o in zip(kappas, out)])
    return results, {"hkappa.csv": table}, checks


def run_fit(cfg: dict, seed: int, jobs: int):
    if "samples" in cfg:
        samples = [(float(x), float(y)) for x, y in cfg["samples"]]
    elif "synthetic" in cfg:
        syn = cfg["synthetic"]
        rng = np.random.default_rng(seed)
        xs = [float(x) for x in syn["x"]]
        noise = float(syn.get("noise", 0.0))
        samples = [(x, float(syn["C"]) * math.exp(-float(syn["eps"]) * x) * (1 + noise * rng.standard_normal()))
                   for x in xs]
    else:
        raise ConfigError("fit needs 'samples' or 'synthetic'")
    try:
        fit = fit_exponential_decay(samples)
    except FitError as exc:
        raise ConfigError(str(exc)) from None
    checks = []
    if "expect_eps" in cfg:
        e = cfg["expect_eps"]
        checks.append(_check("eps", "fitted rate within tolerance",
                             abs(fit.eps - float(e["value"])) <= float(e["tol"]), eps=fit.eps))
    results = {"fit": fit.to_json()}
    return results, {"samples.csv": _csv(["x", "y"], samples)}, checks


PIPELINES: Dict[str, Callable] = {
    "weights": run_weights,
    "solve-local": run_solve_local,
    "decouple": run_decouple,
    "limit": run_limit,
    "wkb": run_wkb,
    "hkappa": run_hkappa,
    "fit": run_fit,
}


# ----------------------------------------------------------------------------
# driver


def run_experiment(subcommand: str, config: dict, out_dir, seed: int = 0, jobs: int = 1) -> int:
    """Run one pipeline, write its report, and return the exit status."""
    out = Path(out_dir)
    if subcommand not in PIPELINES:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    if not isinstance(config, dict):
        raise ConfigError("config must be a JSON object")
    status = EXIT_OK
    error = None
    try:
        results, tables, checks = PIPELINES[subcommand](config, seed, jobs)
    except ConfigError:
        raise
    except (hs.SolveError, GaugeError, TransportError, hs.RangeError, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        results, tables, checks = {}, {}, []
        error = {"type": type(exc).__name__, "message": str(exc)}
        rep = getattr(exc, "report", None)
        if rep is not None:
            error["residual_sup"] = rep.residual_sup
            error["iterations"] = rep.iterations
        status = EXIT_NUMERIC
    except (ModelError, PathError, pw.WeightError, KeyError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    if status == EXIT_OK and not all(c["passed"] for c in checks):
        status = EXIT_CHECKS
    report = {
        "subcommand": subcommand,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "versions": {"hitchinlab": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
        "results": results,
        "checks": checks,
        "passed": status == EXIT_OK,
        "exit_status": status,
    }
    if error is not None:
        report["error"] = error
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(dumps(report) + "\n")
    for name, text in tables.items():
        (out / name).write_text(text)
    return status


def _jobs(arg: Optional[int]) -> int:
    if arg is not None:
        return max(1, arg)
    env = os.environ.get("HITCHINLAB_JOBS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"HITCHINLAB_JOBS must be an integer, got {env!r}") from None
    return 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hitchinlab", description=__doc__.splitlines()[0])
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", required=True, help="path to the JSON config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: $HITCHINLAB_JOBS or 1)")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        try:
            config = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        return run_experiment(args.subcommand, config, args.out, args.seed, _jobs(args.jobs))
    except ConfigError as exc:
        print(f"hitchinlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
