"""Command line harness: ``shadow-da {run,compare,sweep,selftest}``.

Experiments are described by INI files (see ``configs/``). Every section and
key is validated against :data:`SCHEMA`; unknown names are rejected. Outputs
go to ``<root>/<experiment name>/`` where ``root`` is the ``output`` key or
the ``SHADOWDA_OUTPUT_ROOT`` environment variable. Each CSV starts with a
``# config_hash=... seed=...`` line and numbers use 17 significant digits.

Exit codes: 0 success, 1 invalid configuration, 2 numerical failure.
"""

import argparse
import configparser
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import metrics
from ._csv import write_rows
from .assimilate import NewtonSettings, WindowSchedule, full_newton, window_driver
from .baseline4dvar import CGSettings, fourdvar_driver
from .errors import ConfigError, ShadowDAError
from .models import build_model
from .obs import (
    direct_insertion_complete,
    generate_truth,
    observe,
    selector,
    sync_errors,
    write_observations_csv,
    write_trajectory_csv,
)
from .params import newton_with_params, trivial_dynamics_estimate
from .tangent import lyapunov_exponents, propagate_frames, seed_basis, write_exponent_csv

log = logging.getLogger("shadowda")

OUTPUT_ENV = "SHADOWDA_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2
METHODS = ("full_newton", "projected", "fourdvar", "param_est", "sync_demo", "lyapunov")


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(conv):
    def parse(s):
        return [conv(t) for t in s.replace(",", " ").split()]

    return parse


def _choice(*options):
    def parse(s):
        if s not in options:
            raise ValueError(f"expected one of {options}")
        return s

    return parse


SCHEMA = {
    "experiment": {
        "name": str,
        "method": _choice(*METHODS),
        "ensemble": int,
        "seed": int,
        "output": str,
    },
    "model": {
        "name": str,
        "dimension": int,
        "dt": float,
        "substeps": int,
        "scheme": _choice("euler", "rk4"),
        "sigma": float,
        "rho": float,
        "beta": float,
        "forcing": float,
    },
    "truth": {"T": float, "transient": float},
    "observations": {
        "nu2": float,
        "half_width": float,
        "noise": _choice("gaussian", "uniform"),
        "every_k": int,
        "components": _list(int),
        "seed_offset": int,
    },
    "schedule": {"tau1": float, "dtau": float},
    "newton": {
        "p": int,
        "tol": float,
        "floor_tol": float,
        "max_iter": int,
        "sync_mode": _choice("interleaved", "deferred"),
        "reorthogonalize": _bool,
        "auto_restart": _bool,
        "n_spin": int,
        "basis": _list(int),
    },
    "fourdvar": {"gtol": float, "max_iter": int},
    "params": {
        "free": _list(str),
        "initial": _list(float),
        "estimator": _choice("augmented", "trivial", "fourdvar"),
        "time_dependent": _bool,
    },
    "sync": {"p_values": _list(int), "spin": int, "threshold": float},
    "sweep": {"parameter": str, "values": _list(str)},
}

REQUIRED = {"experiment": ("method",), "model": ("name",)}


def load_config(path, overrides=None):
    """Parse and validate a config file; returns ``(raw, typed)`` dictionaries.

    ``raw`` keeps the strings (for hashing), ``typed`` the converted values.
    ``overrides`` maps ``"section.key"`` to replacement strings.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    cp.optionxform = str
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    raw = {s: dict(cp[s]) for s in cp.sections()}
    for key, val in (overrides or {}).items():
        sec, _, opt = key.partition(".")
        raw.setdefault(sec, {})[opt] = val
    typed = {}
    for sec, items in raw.items():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        typed[sec] = {}
        for key, val in items.items():
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {sec}.{key}")
            try:
                typed[sec][key] = SCHEMA[sec][key](val)
            except ValueError as exc:
                raise ConfigError(f"{sec}.{key}: {exc}") from None
    for sec, keys in REQUIRED.items():
        for key in keys:
            if key not in typed.get(sec, {}):
                raise ConfigError(f"missing required key {sec}.{key}")
    typed["experiment"].setdefault("name", Path(path).stem)
    return raw, typed


def config_hash(raw):
    canon = json.dumps(raw, sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def _get(cfg, sec, key, default=None):
    return cfg.get(sec, {}).get(key, default)


def make_model(cfg):
    m = cfg["model"]
    kw = {k: m[k] for k in ("dt", "substeps", "scheme", "sigma", "rho", "beta", "forcing") if k in m}
    if "dimension" in m:
        kw["dimension"] = m["dimension"]
    try:
        return build_model(m["name"], **kw)
    except TypeError as exc:
        raise ConfigError(f"model: {exc}") from None


def make_settings(cfg):
    n = cfg.get("newton", {})
    kw = {k: n[k] for k in ("p", "tol", "floor_tol", "max_iter", "sync_mode", "reorthogonalize",
                            "auto_restart", "n_spin") if k in n}
    try:
        return NewtonSettings(**kw)
    except ValueError as exc:
        raise ConfigError(f"newton: {exc}") from None


def make_basis(cfg, d):
    comps = _get(cfg, "newton", "basis")
    if comps is None:
        return None
    return np.eye(d)[:, comps]


def make_observations(cfg, truth, seed):
    o = cfg.get("observations", {})
    noise = o.get("noise", "gaussian")
    if noise == "uniform":
        scale = o.get("half_width", 1.0)
    else:
        scale = float(np.sqrt(o.get("nu2", 1.0)))
    d = truth.shape[1]
    H = selector(d, o["components"]) if "components" in o else None
    return observe(truth, H, scale, o.get("every_k", 1), seed + o.get("seed_offset", 1000), noise)


# -- one ensemble member ------------------------------------------------------


class Member:
    """Everything produced by one realization."""

    def __init__(self, seed, truth, obs, grid, proxy):
        self.seed = seed
        self.truth = truth
        self.obs = obs
        self.grid = grid
        self.proxy = proxy
        self.rows = []
        self.reports = []
        self.extra = {}


def _schedule(cfg, T, dt_map):
    s = cfg.get("schedule", {})
    tau1 = s.get("tau1", T)
    try:
        return WindowSchedule(tau1, s.get("dtau", tau1), T, dt_map)
    except ValueError as exc:
        raise ConfigError(f"schedule: {exc}") from None


def _prepare(cfg, model, seed):
    T = cfg["truth"]["T"]
    truth = generate_truth(model, T, seed, _get(cfg, "truth", "transient", 10.0))
    obs = make_observations(cfg, truth, seed)
    grid = obs.grid_model(model)
    proxy = obs.values.copy() if obs.is_full_state else direct_insertion_complete(model, obs)
    return Member(seed, truth, obs, grid, proxy)


def _score_row(mem, label, report, schedule=None):
    bnd = schedule.boundaries() if schedule is not None else ()
    sc = metrics.score(
        report.estimate, mem.truth, mem.obs, mem.grid, bnd,
        iterations=report.mean_iterations(),
        n_windows=len(report.windows),
        failed=len(report.failed_windows),
    )
    row = {"label": label, "seed": mem.seed, "obs_seed": mem.obs.seed,
           "C_obs": metrics.obs_discrepancy(mem.truth, mem.obs)}
    row.update(sc.as_row())
    return row


def run_member(cfg, model, seed):
    method = cfg["experiment"]["method"]
    T = cfg["truth"]["T"]
    if method == "lyapunov":
        truth = generate_truth(model, T, seed, _get(cfg, "truth", "transient", 10.0))
        p = _get(cfg, "newton", "p", model.dimension)
        frame = propagate_frames(model, truth, seed_basis(model.dimension, p))
        lam = lyapunov_exponents(frame, model.map_dt)
        mem = Member(seed, truth, None, model, None)
        mem.extra["frame"] = frame
        mem.rows.append({"label": "exponents", "seed": seed,
                         **{f"lambda{i + 1}": v for i, v in enumerate(lam)}})
        return mem
    if method == "sync_demo":
        return _sync_member(cfg, model, seed)

    mem = _prepare(cfg, model, seed)
    settings = make_settings(cfg)
    grid, proxy = mem.grid, mem.proxy
    sched = _schedule(cfg, T, grid.map_dt)
    if method == "full_newton":
        rep = full_newton(grid, proxy, settings)
        mem.reports.append(rep)
        mem.rows.append(_score_row(mem, "full_newton", rep))
    elif method == "projected":
        rep = window_driver(grid, proxy, sched, settings, make_basis(cfg, model.dimension))
        mem.reports.append(rep)
        mem.rows.append(_score_row(mem, "projected", rep, sched))
    elif method == "fourdvar":
        f = cfg.get("fourdvar", {})
        cg = CGSettings(**{k: f[k] for k in ("gtol", "max_iter") if k in f})
        H = None if mem.obs.is_full_state else mem.obs.H
        rep = fourdvar_driver(grid, mem.obs.values, sched, cg, H=H)
        mem.reports.append(rep)
        mem.rows.append(_score_row(mem, "fourdvar", rep, sched))
    elif method == "param_est":
        _param_member(cfg, mem, settings, sched)
    return mem


def _param_member(cfg, mem, settings, sched):
    p = cfg.get("params", {})
    free = p.get("free")
    if not free:
        raise ConfigError("param_est needs params.free")
    grid = mem.grid
    est = p.get("estimator", "augmented")
    initial = p.get("initial", list(grid.params[grid.param_index(free)]))
    if len(initial) % len(free):
        raise ConfigError("params.initial must hold a multiple of len(params.free) values")
    for k in range(0, len(initial), len(free)):
        a0 = initial[k : k + len(free)]
        if est == "augmented":
            rep, ahat = newton_with_params(grid, mem.proxy, a0, free, settings,
                                           p.get("time_dependent", False))
        elif est == "trivial":
            rep, ahat = trivial_dynamics_estimate(grid, mem.proxy, a0, free, settings)
        else:
            f = cfg.get("fourdvar", {})
            cg = CGSettings(**{k: f[k] for k in ("gtol", "max_iter") if k in f})
            rep = fourdvar_driver(grid, mem.obs.values, sched, cg, free=free, alpha0=a0)
            ahat = rep.params
        mem.reports.append(rep)
        row = _score_row(mem, f"{est}:" + ",".join(f"{v:g}" for v in a0), rep,
                         sched if est == "fourdvar" else None)
        ahat = np.atleast_1d(np.asarray(ahat, dtype=float))
        if ahat.ndim > 1:
            ahat = ahat.mean(axis=0)
        for name, a, v in zip(free, a0, ahat):
            row[f"{name}_initial"] = a
            row[f"{name}_estimate"] = v
        row["converged"] = rep.converged
        mem.rows.append(row)


def _sync_member(cfg, model, seed):
    s = cfg.get("sync", {})
    T = cfg["truth"]["T"]
    n_spin = s.get("spin", 400)
    full = generate_truth(model, T + n_spin * model.map_dt, seed, _get(cfg, "truth", "transient", 10.0))
    pre, driver = full[: n_spin + 1], full[n_spin:]
    rng = np.random.default_rng(seed + _get(cfg, "observations", "seed_offset", 1000))
    z0 = driver[0] + rng.standard_normal(model.dimension)
    mem = Member(seed, driver, None, model, None)
    thr = s.get("threshold", 1e-8)
    curves = {}
    for p in s.get("p_values", [12, 13, 14, 15, 20]):
        try:
            err = sync_errors(model, pre, driver, p, z0, _get(cfg, "newton", "reorthogonalize", False))
        except ShadowDAError as exc:
            log.warning("sync p=%d failed: %s", p, exc)
            err = np.full(driver.shape[0], np.inf)
        curves[p] = err
        below = np.nonzero(err < thr)[0]
        mem.rows.append({"label": f"p={p}", "seed": seed, "p": p, "final_error": err[-1],
                         "synchronized": bool(below.size),
                         "time_to_threshold": below[0] * model.map_dt if below.size else float("nan")})
    mem.extra["curves"] = curves
    return mem


# -- orchestration --------------------------------------------------------------


def output_dir(cfg):
    root = os.environ.get(OUTPUT_ENV) or cfg["experiment"].get("output", "runs")
    return Path(root) / cfg["experiment"]["name"]


def _write_member(out, mem, tags, method):
    out.mkdir(parents=True, exist_ok=True)
    dt_map = mem.grid.map_dt
    write_trajectory_csv(out / "truth.csv", mem.truth, tags=tags)
    if method == "lyapunov":
        write_exponent_csv(out / "exponents.csv", mem.extra["frame"], dt_map, tags=tags)
        return
    if method == "sync_demo":
        curves = mem.extra["curves"]
        ps = sorted(curves)
        rows = ([n, n * dt_map] + [curves[p][n] for p in ps] for n in range(mem.truth.shape[0]))
        write_rows(out / "sync_errors.csv", ["time_index", "time"] + [f"err_p{p}" for p in ps], rows, tags)
        return
    write_observations_csv(out / "observations.csv", mem.obs, tags=tags)
    for k, rep in enumerate(mem.reports):
        suffix = "" if len(mem.reports) == 1 else f"_{k}"
        write_trajectory_csv(out / f"estimate{suffix}.csv", rep.estimate, prefix="u", tags=tags)
        rows = ([w.index, w.start, w.stop, w.method, w.iterations, w.converged, w.floor_accepted,
                 w.residual_history[-1] if w.residual_history else None, w.message]
                for w in rep.windows)
        write_rows(out / f"windows{suffix}.csv",
                   ["window", "start", "stop", "method", "iterations", "converged", "floor_accepted",
                    "final_ratio", "message"], rows, tags)


def run_experiment(cfg, raw, write=True):
    """Run every ensemble member; returns ``(status, rows, out_dir)``."""
    exp = cfg["experiment"]
    method = exp["method"]
    if "T" not in cfg.get("truth", {}):
        raise ConfigError("missing required key truth.T")
    model = make_model(cfg)
    make_settings(cfg)
    chash = config_hash(raw)
    out = output_dir(cfg)
    rows = []
    status = EXIT_OK
    for i in range(exp.get("ensemble", 1)):
        seed = exp.get("seed", 0) + i
        tags = {"config_hash": chash, "seed": seed}
        try:
            mem = run_member(cfg, model, seed)
        except ConfigError:
            raise
        except ShadowDAError as exc:
            log.error("member %d (seed %d) failed: %s", i, seed, exc)
            rows.append({"label": "error", "seed": seed, "message": str(exc)})
            status = EXIT_NUMERIC
            continue
        for r in mem.rows:
            r["member"] = i
            if r.get("failed_windows") or r.get("converged") is False:
                status = max(status, EXIT_NUMERIC)
        rows.extend(mem.rows)
        if write:
            _write_member(out / f"member_{i:03d}", mem, tags, method)
    if write:
        _write_summary(out, rows, cfg, raw, chash, status)
    return status, rows, out


def _columns(rows):
    cols = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    return cols


def _write_summary(out, rows, cfg, raw, chash, status):
    out.mkdir(parents=True, exist_ok=True)
    cols = _columns(rows)
    seed = cfg["experiment"].get("seed", 0)
    tags = {"config_hash": chash, "seed": seed}
    write_rows(out / "scores.csv", cols, ([r.get(c) for c in cols] for r in rows), tags)
    meta = {"config_hash": chash, "seed": seed, "ensemble": cfg["experiment"].get("ensemble", 1),
            "config": raw, "status": status,
            "failures": [r for r in rows if r.get("label") == "error"]}
    digests = [r for r in rows if "obs_seed" in r]
    meta["obs_seeds"] = sorted({int(r["obs_seed"]) for r in digests})
    with open(out / "metadata.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True, default=str)
    table = summary_table(rows)
    if table:
        (out / "table.txt").write_text(table + "\n")


def summary_table(rows):
    """Mean scores per label in the layout of :func:`metrics.format_table`."""
    scored = [r for r in rows if "MSE" in r]
    if not scored:
        return ""
    labels = list(dict.fromkeys(r["label"] for r in scored))
    sets, c_obs = [], []
    for lab in labels:
        rs = [r for r in scored if r["label"] == lab]
        mean = {k: float(np.mean([r[k] for r in rs])) for k in ("C", "MSE", "D", "D_boundary", "iterations")}
        sets.append(metrics.ScoreSet(**mean))
        c_obs.append(np.mean([r["C_obs"] for r in rs]))
    return metrics.format_table(labels, sets, c_obs=float(np.mean(c_obs)))


def compare(path_a, path_b):
    """Run two configs on the same data and tabulate them side by side."""
    results = []
    for path in (path_a, path_b):
        raw, cfg = load_config(path)
        st, rows, _ = run_experiment(cfg, raw)
        results.append((cfg["experiment"]["name"], st, [r for r in rows if "MSE" in r]))
    (na, sa, ra), (nb, sb, rb) = results
    key = lambda rs: [(r["seed"], r["obs_seed"], round(r["C_obs"], 12)) for r in rs]
    if key(ra) != key(rb):
        raise ConfigError("runs were made on different observations; refusing to compare")
    sets = []
    for rs in (ra, rb):
        mean = {k: float(np.mean([r[k] for r in rs])) for k in ("C", "MSE", "D", "D_boundary", "iterations")}
        sets.append(metrics.ScoreSet(**mean))
    c_obs = float(np.mean([r["C_obs"] for r in ra]))
    return max(sa, sb), metrics.format_table([na, nb], sets, c_obs=c_obs), sets


def sweep(path):
    """Run the config once per value of ``[sweep] parameter``."""
    raw, cfg = load_config(path)
    sw = cfg.get("sweep")
    if not sw or "parameter" not in sw or "values" not in sw:
        raise ConfigError("sweep needs [sweep] parameter and values")
    name = cfg["experiment"]["name"]
    key = sw["parameter"].partition(".")[2]
    status, table_rows = EXIT_OK, []
    for val in sw["values"]:
        over = {sw["parameter"]: val, "experiment.name": f"{name}/{key}={val}"}
        sub_raw, sub_cfg = load_config(path, overrides=over)
        sub_cfg.pop("sweep", None)
        sub_raw.pop("sweep", None)
        st, rows, _ = run_experiment(sub_cfg, sub_raw)
        status = max(status, st)
        scored = [r for r in rows if "MSE" in r]
        if scored:
            mean = {k: float(np.mean([r[k] for r in scored])) for k in ("C", "MSE", "D", "D_boundary", "iterations")}
            table_rows.append([val, mean["C"], mean["MSE"], mean["D"], mean["D_boundary"], mean["iterations"],
                               sum(r["failed_windows"] for r in scored)])
    out = output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    header = [sw["parameter"], "C", "MSE", "D", "D_boundary", "iterations", "failed_windows"]
    write_rows(out / "sweep.csv", header, table_rows, {"config_hash": config_hash(raw),
                                                       "seed": cfg["experiment"].get("seed", 0)})
    lines = [" | ".join(header)] + [" | ".join(str(v) if isinstance(v, str) else f"{v:.4g}" for v in r)
                                     for r in table_rows]
    return status, "\n".join(lines)


def main(argv=None):
    ap = argparse.ArgumentParser(prog="shadow-da", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)
    p_run = sub.add_parser("run", help="run one experiment config")
    p_run.add_argument("config")
    p_cmp = sub.add_parser("compare", help="run two configs on the same data and compare")
    p_cmp.add_argument("config_a")
    p_cmp.add_argument("config_b")
    p_sw = sub.add_parser("sweep", help="run a config over the values in its [sweep] section")
    p_sw.add_argument("config")
    sub.add_parser("selftest", help="fast invariant checks")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.cmd == "run":
            raw, cfg = load_config(args.config)
            status, rows, out = run_experiment(cfg, raw)
            table = summary_table(rows)
            print(table or "\n".join(str(r) for r in rows))
            print(f"outputs in {out}")
            return status
        if args.cmd == "compare":
            status, table, _ = compare(args.config_a, args.config_b)
            print(table)
            return status
        if args.cmd == "sweep":
            status, table = sweep(args.config)
            print(table)
            return status
        from .selftest import run_selftest

        return EXIT_OK if run_selftest(verbose=True) else EXIT_NUMERIC
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
