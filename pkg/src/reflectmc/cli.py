"""Configuration-driven command line tying the solver stack together.

A run is described by one TOML (or JSON) file with domain / problem / solver
/ task / output sections; unknown keys are rejected so typos fail loudly.
Tasks: solve-mc, solve-fd, compare, probe, invert, bayes.  Every run writes
its artifacts plus a manifest (config hash, seed, library versions, wall
time) into the output directory.  Exit codes: 0 success, 2 configuration or
validation failure, 1 runtime error; failures also emit machine-readable
JSON on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from . import __version__
from . import bayes as bayes_mod
from . import estimator as est_mod
from . import fd as fd_mod
from . import inverse as inv_mod
from .geometry import FixedDomain, GeometryError, TimeVaryingDomain
from .problem import (CoefficientSet, Problem, ProblemError, SourceData,
                      validate_assumptions)
from .sde import SimConfig


class ConfigError(ValueError):
    pass


_SCHEMA = {
    "domain": {"kind", "a", "b", "center", "radius", "robin_ends",
               "robin_arcs", "tol_pi", "tubular_width", "margin", "cavity"},
    "problem": {"A", "a_vec", "b_vec", "a_scal", "sigma_rob", "f", "psi",
                "h", "regularity", "T"},
    "solver": {"dt", "n_paths", "master_seed", "scheme", "workers",
               "fd_h", "fd_k", "fd_nr", "fd_ntheta", "fd_nt", "fd_tol"},
    "task": {"name", "points", "target", "approach", "pi_eps", "pi_start",
             "observations", "theta_star", "box", "budget", "arc", "n_arc",
             "n_time", "vary", "fixed_center", "noise_std", "prior", "sigma",
             "n_samples", "n_pairs", "tab_nodes", "eta", "gamma_exp"},
    "output": {"dir", "figures"},
}

_TASKS = ("solve-mc", "solve-fd", "compare", "probe", "invert", "bayes")


def load_config(path) -> dict:
    """Parse and validate a TOML/JSON config; rejects unknown keys."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = p.read_bytes()
    if p.suffix == ".json":
        try:
            cfg = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON config: {exc}") from None
    else:
        try:
            cfg = tomllib.loads(text.decode())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"malformed TOML config: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a table")
    for section, body in cfg.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be a table")
        extra = set(body) - _SCHEMA[section]
        if extra:
            raise ConfigError(
                f"unknown keys {sorted(extra)} in section {section!r}")
    for required in ("domain", "problem", "task"):
        if required not in cfg:
            raise ConfigError(f"missing required section {required!r}")
    name = cfg["task"].get("name")
    if name not in _TASKS:
        raise ConfigError(f"task name must be one of {_TASKS}, got {name!r}")
    return cfg


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def build_domain(cfg: dict) -> TimeVaryingDomain:
    dc = cfg["domain"]
    kind = dc.get("kind")
    kwargs = {}
    for key in ("tol_pi", "tubular_width"):
        if key in dc:
            kwargs[key] = float(dc[key])
    if kind == "interval":
        base = FixedDomain(kind="interval", a=float(dc.get("a", 0.0)),
                           b=float(dc.get("b", 1.0)),
                           robin_ends=frozenset(dc.get("robin_ends", [])),
                           **kwargs)
    elif kind == "disk":
        base = FixedDomain(kind="disk",
                           center=tuple(dc.get("center", (0.0, 0.0))),
                           radius=float(dc.get("radius", 1.0)),
                           robin_arcs=tuple(tuple(a) for a in
                                            dc.get("robin_arcs", [])),
                           **kwargs)
    else:
        raise ConfigError(f"unsupported domain kind {kind!r}")
    T = float(cfg["problem"].get("T", 1.0))
    return TimeVaryingDomain.build(
        base, keyframes=dc.get("cavity"), horizon=T,
        margin=float(dc.get("margin", 0.05)))


def build_problem(cfg: dict) -> Problem:
    domain = build_domain(cfg)
    pc = cfg["problem"]
    coeffs = CoefficientSet.parse(
        domain.dim, A=pc.get("A", 0.5), a_vec=pc.get("a_vec"),
        b_vec=pc.get("b_vec"), a_scal=pc.get("a_scal", "0"),
        sigma_rob=pc.get("sigma_rob", "0"))
    sources = SourceData.parse(
        domain.dim, f=pc.get("f", "0"), psi=pc.get("psi", "0"),
        h=pc.get("h", "0"), regularity_class=pc.get("regularity", "smooth"))
    return Problem(domain=domain, coeffs=coeffs, sources=sources,
                   T=float(pc.get("T", 1.0)))


def sim_config(cfg: dict) -> SimConfig:
    sc = cfg.get("solver", {})
    return SimConfig(dt=float(sc.get("dt", 1e-3)),
                     scheme=sc.get("scheme", "projection"),
                     master_seed=int(sc.get("master_seed", 0)))


def fd_grid_for(cfg: dict, domain: TimeVaryingDomain):
    sc = cfg.get("solver", {})
    if domain.dim == 1:
        return fd_mod.FDGrid1D(h=float(sc.get("fd_h", 1 / 400)),
                               k=float(sc.get("fd_k", 1 / 800)))
    return fd_mod.FDGrid2D(nr=int(sc.get("fd_nr", 40)),
                           ntheta=int(sc.get("fd_ntheta", 64)),
                           nt=int(sc.get("fd_nt", 80)))


def _task_points(cfg, dim):
    pts = cfg["task"].get("points")
    if not pts:
        raise ConfigError("this task needs task.points = [[s, x...], ...]")
    out = []
    for row in pts:
        if len(row) != dim + 1:
            raise ConfigError(f"each point needs 1 + {dim} entries, got {row}")
        out.append((float(row[0]), [float(v) for v in row[1:]]))
    return out


# -- tasks -------------------------------------------------------------------

def _task_solve_mc(cfg, problem, out_dir, workers):
    scfg = sim_config(cfg)
    n_paths = int(cfg.get("solver", {}).get("n_paths", 10000))
    rows = est_mod.solution_field(_task_points(cfg, problem.domain.dim),
                                  problem, scfg, n_paths, workers=workers)
    est_mod.field_to_csv(rows, out_dir / "field.csv", scfg)
    est_mod.field_to_json(rows, out_dir / "field.json", scfg)
    return ["field.csv", "field.json"], {"rows": rows, "cfg": scfg}


def _fd_solution(cfg, problem):
    grid = fd_grid_for(cfg, problem.domain)
    if problem.domain.dim == 1:
        return fd_mod.solve_backward_1d(problem, grid)
    return fd_mod.solve_backward_2d(problem, grid)


def _task_solve_fd(cfg, problem, out_dir, workers):
    sol = _fd_solution(cfg, problem)
    points = _task_points(cfg, problem.domain.dim)
    path = out_dir / "fd_field.csv"
    values = []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s", "x", "value"])
        for s, x in points:
            val = float(sol(s, np.array([x]))[0])
            values.append(val)
            w.writerow([repr(s), ";".join(repr(v) for v in x), repr(val)])
    return ["fd_field.csv"], {"sol": sol, "values": values}


def compare(mc_rows, fd_values, fd_tol=1e-3) -> dict:
    """Per-point gap report between an MC field and FD oracle values."""
    entries = [r for r in mc_rows if not r.skipped]
    if len(entries) != len(fd_values):
        raise ConfigError(
            f"grid mismatch: {len(entries)} MC points vs {len(fd_values)} "
            "FD values")
    gaps, ok = [], 0
    for row, ref in zip(entries, fd_values):
        gap = row.estimate.mean - ref
        within = abs(gap) <= 3.0 * row.estimate.std_error + fd_tol
        ok += within
        gaps.append({"s": row.s, "x": list(row.x), "mc": row.estimate.mean,
                     "fd": ref, "gap": gap,
                     "std_error": row.estimate.std_error,
                     "within": bool(within)})
    return {"points": gaps,
            "max_abs_gap": max((abs(g["gap"]) for g in gaps), default=0.0),
            "fraction_within": (ok / len(gaps)) if gaps else 1.0,
            "fd_tol": fd_tol}


def _task_compare(cfg, problem, out_dir, workers):
    arts_mc, mc = _task_solve_mc(cfg, problem, out_dir, workers)
    arts_fd, fdr = _task_solve_fd(cfg, problem, out_dir, workers)
    fd_tol = float(cfg.get("solver", {}).get("fd_tol", 1e-3))
    report = compare(mc["rows"], fdr["values"], fd_tol)
    with open(out_dir / "compare.json", "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return arts_mc + arts_fd + ["compare.json"], {"report": report, **mc}


def _task_probe(cfg, problem, out_dir, workers):
    tc = cfg["task"]
    scfg = sim_config(cfg)
    n_paths = int(cfg.get("solver", {}).get("n_paths", 10000))
    dim = problem.domain.dim
    target_row = tc.get("target")
    if not target_row:
        raise ConfigError("probe needs task.target = [s, x...]")
    target = (float(target_row[0]), [float(v) for v in target_row[1:]])
    approach = [(float(r[0]), [float(v) for v in r[1:]])
                for r in tc.get("approach", [])]
    rows = est_mod.boundary_continuity_probe(target, approach, problem,
                                             scfg, n_paths)
    est_mod.field_to_csv(rows, out_dir / "probe.csv", scfg)
    artifacts = ["probe.csv"]
    stats = {}
    if dim == 2 and tc.get("pi_eps"):
        start = tc.get("pi_start", target_row)
        fr = est_mod.pi_attainability_stat(
            float(start[0]), [float(v) for v in start[1:]],
            [float(e) for e in tc["pi_eps"]], problem, scfg, n_paths)
        stats["pi_fractions"] = {repr(k): v for k, v in fr.items()}
    with open(out_dir / "probe_stats.json", "w") as fh:
        json.dump(stats, fh, indent=1, sort_keys=True)
        fh.write("\n")
    artifacts.append("probe_stats.json")
    return artifacts, {"rows": rows, "cfg": scfg}


def _inversion_pieces(cfg, problem):
    tc = cfg["task"]
    base = problem.domain.base
    if base.kind != "disk":
        raise ConfigError("shape inversion runs on the disk configuration")
    model = inv_mod.ModelData(coeffs=problem.coeffs, sources=problem.sources,
                              T=problem.T)
    arc = tuple(tc.get("arc", (-np.pi * 0.95, np.pi * 0.95)))
    spec = inv_mod.ObservationSpec(arc=arc, n_arc=int(tc.get("n_arc", 16)),
                                   n_time=int(tc.get("n_time", 32)))
    vary = list(tc.get("vary", ["cx", "cy", "r"]))
    fixed_center = [float(v) for v in tc.get("fixed_center", (0.0, 0.0))]

    def builder(vec):
        vals = dict(zip(vary, [float(v) for v in np.atleast_1d(vec)]))
        cx = vals.get("cx", fixed_center[0])
        cy = vals.get("cy", fixed_center[1])
        r = vals.get("r")
        if r is None:
            raise ConfigError("the cavity radius 'r' must be a varied "
                              "parameter")
        return inv_mod.DomainParam.static(base, problem.T, (cx, cy), r)

    return model, spec, vary, builder


def _task_invert(cfg, problem, out_dir, workers):
    tc = cfg["task"]
    model, spec, vary, builder = _inversion_pieces(cfg, problem)
    grid = fd_grid_for(cfg, problem.domain)
    artifacts = []
    if tc.get("observations"):
        d = inv_mod.observations_from_csv(tc["observations"])
    else:
        theta_star = tc.get("theta_star")
        if not theta_star:
            raise ConfigError("invert needs task.observations or "
                              "task.theta_star")
        d = inv_mod.synthesize_observations(
            builder(theta_star), model, spec,
            noise_std=float(tc.get("noise_std", 0.0)),
            seed=int(cfg.get("solver", {}).get("master_seed", 0)))
        inv_mod.observations_to_csv(d, out_dir / "observations.csv")
        artifacts.append("observations.csv")
    box = [(float(lo), float(hi)) for lo, hi in tc.get("box", [])]
    if len(box) != len(vary):
        raise ConfigError("task.box must give one (lo, hi) per varied "
                          "parameter")
    res = inv_mod.minimize_cost(
        d, box, int(tc.get("budget", 120)), builder, model, spec=spec,
        fd_grid=grid, log_path=out_dir / "eval_log.jsonl")
    with open(out_dir / "inversion.json", "w") as fh:
        json.dump({"theta_hat": [float(v) for v in res.theta],
                   "vary": vary, "V": res.value, "n_evals": res.n_evals},
                  fh, indent=1, sort_keys=True)
        fh.write("\n")
    artifacts += ["eval_log.jsonl", "inversion.json"]
    return artifacts, {"result": res}


def _task_bayes(cfg, problem, out_dir, workers):
    tc = cfg["task"]
    model, spec, vary, builder = _inversion_pieces(cfg, problem)
    grid = fd_grid_for(cfg, problem.domain)
    prior = bayes_mod.PriorBox(bounds=tuple(
        (float(lo), float(hi)) for lo, hi in tc.get("prior", [])))
    if prior.ndim != len(vary):
        raise ConfigError("task.prior must give one (lo, hi) per varied "
                          "parameter")
    noise = bayes_mod.NoiseModel(sigma2=float(tc.get("sigma", 0.02)) ** 2)
    fop = bayes_mod.ForwardOp(builder, model, spec, fd_grid=grid, prior=prior)
    if prior.ndim == 1:
        nodes = np.linspace(prior.bounds[0][0], prior.bounds[0][1],
                            int(tc.get("tab_nodes", 33)))
        forward = bayes_mod.TabulatedForwardOp(fop, nodes)
    else:
        forward = fop
    theta_star = tc.get("theta_star")
    if not theta_star:
        raise ConfigError("bayes needs task.theta_star")
    y_star = forward(np.asarray(theta_star, dtype=float))
    seed = int(cfg.get("solver", {}).get("master_seed", 0))
    n_samples = int(tc.get("n_samples", 20000))
    samples = prior.sample(n_samples, seed)
    fvals = bayes_mod._forward_values(forward, samples)
    ens = bayes_mod.posterior(y_star, n_samples, prior, forward, noise,
                              seed=seed, samples=samples, fvals=fvals)
    bayes_mod.ensemble_to_csv(ens, out_dir / "ensemble.csv")
    c_f = fop.estimate_cf(prior, n_samples=100, seed=seed) \
        if not hasattr(forward, "batch") else \
        1.1 * float(np.max(np.linalg.norm(forward.batch(
            prior.sample(1000, seed + 1)), axis=-1)))
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(int(tc.get("n_pairs", 5))):
        y = y_star + noise.sigma * rng.standard_normal(len(y_star))
        yp = y_star + noise.sigma * rng.standard_normal(len(y_star))
        ea = bayes_mod.posterior(y, n_samples, prior, forward, noise,
                                 samples=samples, fvals=fvals)
        eb = bayes_mod.posterior(yp, n_samples, prior, forward, noise,
                                 samples=samples, fvals=fvals)
        rows.append(bayes_mod.stability_bound_check(y, yp, noise, ea, eb,
                                                    c_f))
    bayes_mod.stability_report_to_json(
        rows, out_dir / "stability.json",
        meta={"c_f": float(c_f), "sigma": noise.sigma, "m": forward.m,
              "posterior_mean": [float(v) for v in ens.mean()],
              "ess": ens.ess})
    return ["ensemble.csv", "stability.json"], {"ensemble": ens}


_RUNNERS = {"solve-mc": _task_solve_mc, "solve-fd": _task_solve_fd,
            "compare": _task_compare, "probe": _task_probe,
            "invert": _task_invert, "bayes": _task_bayes}


# -- orchestration -----------------------------------------------------------

def _emit_error(stage, message, code):
    sys.stderr.write(json.dumps(
        {"error": message, "stage": stage, "exit_code": code}) + "\n")
    return code


def _write_manifest(out_dir, cfg, task, artifacts, wall_time):
    manifest = {
        "config_hash": config_hash(cfg),
        "task": task,
        "seed": int(cfg.get("solver", {}).get("master_seed", 0)),
        "versions": {"reflectmc": __version__,
                     "numpy": np.__version__,
                     "python": sys.version.split()[0]},
        "artifacts": sorted(artifacts),
        "wall_time_s": wall_time,
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def run(config_path, overrides=None) -> int:
    """Execute a config-driven run; returns the process exit code."""
    overrides = overrides or {}
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        return _emit_error("config", str(exc), 2)

    sc = cfg.setdefault("solver", {})
    for key in ("master_seed", "n_paths", "dt", "workers"):
        if overrides.get(key) is not None:
            sc[key] = overrides[key]
    if overrides.get("task"):
        cfg["task"]["name"] = overrides["task"]
        if cfg["task"]["name"] not in _TASKS:
            return _emit_error("config",
                               f"unknown task {cfg['task']['name']!r}", 2)
    out_base = overrides.get("out_dir") or cfg.get("output", {}).get(
        "dir", "out")
    figures = bool(overrides.get("figures")
                   or cfg.get("output", {}).get("figures", False))

    try:
        problem = build_problem(cfg)
    except (ConfigError, GeometryError, ProblemError, ValueError) as exc:
        return _emit_error("config", str(exc), 2)

    report_v = validate_assumptions(problem)
    out_dir = Path(out_base)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "validation.json", "w") as fh:
        json.dump(report_v.as_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    task = cfg["task"]["name"]
    if not report_v.passed:
        _write_manifest(out_dir, cfg, task, ["validation.json"], 0.0)
        return _emit_error("validation",
                           "; ".join(report_v.hard_failures), 2)

    workers = sc.get("workers")
    t0 = time.perf_counter()
    try:
        artifacts, payload = _RUNNERS[task](cfg, problem, out_dir, workers)
        if figures:
            from . import report as report_mod
            artifacts += report_mod.render_figures(task, out_dir)
    except (ConfigError, ValueError, RuntimeError) as exc:
        _write_manifest(out_dir, cfg, task, ["validation.json"],
                        round(time.perf_counter() - t0, 3))
        return _emit_error("runtime", f"{type(exc).__name__}: {exc}", 1)
    wall = round(time.perf_counter() - t0, 3)
    _write_manifest(out_dir, cfg, task, artifacts + ["validation.json"], wall)
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="reflectmc",
        description="Monte Carlo / finite-difference solver for mixed "
                    "Robin-Dirichlet problems on time-varying domains")
    ap.add_argument("--config", required=True, help="TOML or JSON run config")
    ap.add_argument("--seed", type=int, default=None,
                    help="override solver.master_seed")
    ap.add_argument("--paths", type=int, default=None,
                    help="override solver.n_paths")
    ap.add_argument("--dt", type=float, default=None,
                    help="override solver.dt")
    ap.add_argument("--out-dir", default=None, help="output directory")
    ap.add_argument("--task", default=None, help="override task.name")
    ap.add_argument("--workers", type=int, default=None,
                    help="override worker count (never changes numbers)")
    ap.add_argument("--figures", action="store_true",
                    help="also render figures next to the tables")
    args = ap.parse_args(argv)
    code = run(args.config, overrides={
        "master_seed": args.seed, "n_paths": args.paths, "dt": args.dt,
        "out_dir": args.out_dir, "task": args.task, "workers": args.workers,
        "figures": args.figures})
    return code


if __name__ == "__main__":
    sys.exit(main())
