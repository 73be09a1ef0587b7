"""Monte Carlo evaluation of the stochastic solution and path diagnostics.

The stochastic solution at (s, x) is the three-term expectation

    v(s, x) = -E[ int_s^{sigma ^ T} e^Z f dt ]
              -E[ int e^Z psi dL ]
              +E[ e^{Z(T)} h(X(T)) ; sigma > T ],

estimated over independent reflected paths.  Each evaluation point owns a
counter-based RNG stream keyed by (master_seed, point_index), so fields are
reproducible for any worker count; reductions use compensated summation in
fixed order.  Diagnostics cover local-time moments against an occupation-time
oracle, boundary continuity probes toward the Dirichlet part, corner
(Robin/Dirichlet border) attainability statistics, and stopping-probability
profiles near the fixed Dirichlet boundary.
"""

from __future__ import annotations

import csv
import json
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .problem import Problem
from .sde import BatchResult, SimConfig, SimulationError, simulate_batch

WORKERS_ENV = "REFLECTMC_WORKERS"


class EstimatorError(RuntimeError):
    pass


@dataclass(frozen=True)
class Estimate:
    """A Monte Carlo estimate with its three-term breakdown.

    breakdown = (source term, Robin term, terminal term); the three terms
    sum to mean by construction.
    """

    mean: float
    std_error: float
    n_paths: int
    breakdown: tuple

    @classmethod
    def exact_zero(cls, n_paths=0):
        return cls(mean=0.0, std_error=0.0, n_paths=n_paths,
                   breakdown=(0.0, 0.0, 0.0))


def _fsum_mean(values) -> float:
    return math.fsum(values) / len(values)


def _terms_from_batch(problem: Problem, res: BatchResult):
    """Per-path (term1, term2, term3) arrays in path-index order."""
    h = problem.sources.h
    term1 = -res.source_integral
    term2 = -res.robin_integral
    if h.is_zero:
        term3 = np.zeros(res.n_paths)
    else:
        surv = ~res.stopped
        term3 = np.zeros(res.n_paths)
        if np.any(surv):
            term3[surv] = (np.exp(res.Z[surv])
                           * h(problem.T, res.X_final[surv]))
    return term1, term2, term3


def _estimate_from_terms(term1, term2, term3) -> Estimate:
    n = len(term1)
    m1 = _fsum_mean(term1)
    m2 = _fsum_mean(term2)
    m3 = _fsum_mean(term3)
    mean = m1 + m2 + m3
    totals = term1 + term2 + term3
    var = math.fsum((totals - mean) ** 2) / max(n - 1, 1)
    return Estimate(mean=mean, std_error=math.sqrt(var / n), n_paths=n,
                    breakdown=(m1, m2, m3))


def stochastic_solution(s, x, problem: Problem, domain=None,
                        cfg: SimConfig = None, n_paths: int = 10000,
                        point_index: int = 0) -> Estimate:
    """Estimate v(s, x) from n_paths reflected paths.

    A start point in the closed Dirichlet part returns exactly 0 (the
    boundary value) without simulating.
    """
    if cfg is None:
        raise EstimatorError("a SimConfig is required")
    if n_paths < 2:
        raise EstimatorError("n_paths must be at least 2")
    domain = domain if domain is not None else problem.domain
    x = np.asarray(x, dtype=float).reshape(domain.dim)
    if domain.dist_to_dirichlet(s, x) <= 1e-12:
        return Estimate.exact_zero(n_paths)
    if problem.sources.all_zero:
        return Estimate.exact_zero(n_paths)
    res = simulate_batch(problem, s, x, cfg, n_paths,
                         stream_ids=(point_index,))
    return _estimate_from_terms(*_terms_from_batch(problem, res))


def worker_count(workers=None) -> int:
    """Effective worker count: explicit argument, else the environment."""
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get(WORKERS_ENV)
    return max(1, int(env)) if env else 1


@dataclass(frozen=True)
class FieldRow:
    s: float
    x: tuple
    estimate: Estimate | None
    skipped: bool = False
    reason: str = ""


def solution_field(grid, problem: Problem, cfg: SimConfig, n_paths,
                   workers=None) -> list:
    """Estimates at each (s, x) grid point, one RNG stream per point.

    Points within the corner tolerance of the Robin/Dirichlet border are
    skipped with a warning: the representation is not claimed continuous
    there.  The worker count never affects the numbers.
    """
    base = problem.domain.base
    pts = [(float(s), np.asarray(x, dtype=float).reshape(problem.domain.dim))
           for (s, x) in grid]
    tol = base.tol_pi * max(1.0, getattr(base, "radius", 1.0) or 1.0)

    def one(i):
        s, x = pts[i]
        if base.kind != "interval":
            d_pi = float(base.dist_to_pi(x[None, :])[0])
            if d_pi <= tol:
                warnings.warn(
                    f"grid point {i} at (s={s}, x={tuple(x)}) lies in the "
                    "corner collar; skipped", stacklevel=2)
                return FieldRow(s=s, x=tuple(map(float, x)), estimate=None, skipped=True,
                                reason="corner_collar")
        est = stochastic_solution(s, x, problem, cfg=cfg, n_paths=n_paths,
                                  point_index=i)
        return FieldRow(s=s, x=tuple(map(float, x)), estimate=est)

    nw = worker_count(workers)
    if nw == 1:
        return [one(i) for i in range(len(pts))]
    with ThreadPoolExecutor(max_workers=nw) as ex:
        return list(ex.map(one, range(len(pts))))


def local_time_moment(s, x, lam, problem: Problem, cfg: SimConfig,
                      n_paths: int, stream_id: int = 0) -> Estimate:
    """E[e^{lam L(T)}] on the pure-reflection run (stopping disabled)."""
    if lam < 0:
        raise EstimatorError("lambda must be nonnegative")
    res = simulate_batch(problem, s, x, cfg, n_paths,
                         stream_ids=(stream_id,), disable_stopping=True)
    vals = np.exp(lam * res.L)
    mean = _fsum_mean(vals)
    var = math.fsum((vals - mean) ** 2) / max(n_paths - 1, 1)
    return Estimate(mean=mean, std_error=math.sqrt(var / n_paths),
                    n_paths=n_paths, breakdown=(mean, 0.0, 0.0))


def local_time_mean(s, x, problem: Problem, cfg: SimConfig, n_paths: int,
                    stream_id: int = 0) -> Estimate:
    """E[L(T)] on the pure-reflection run."""
    res = simulate_batch(problem, s, x, cfg, n_paths,
                         stream_ids=(stream_id,), disable_stopping=True)
    mean = _fsum_mean(res.L)
    var = math.fsum((res.L - mean) ** 2) / max(n_paths - 1, 1)
    return Estimate(mean=mean, std_error=math.sqrt(var / n_paths),
                    n_paths=n_paths, breakdown=(mean, 0.0, 0.0))


def occupation_time_estimate(s, x, problem: Problem, cfg: SimConfig,
                             n_paths: int, eps: float,
                             stream_id: int = 1) -> Estimate:
    """Occupation-time oracle for E[L(T)]: the boundary-collar sojourn
    integral int 1_{phi < eps} (n.An)/(beta.n) dt divided by eps converges
    to the accumulated local time as eps -> 0 (pure-reflection run)."""
    if eps <= 0:
        raise EstimatorError("collar width eps must be positive")
    res = simulate_batch(problem, s, x, cfg, n_paths,
                         stream_ids=(stream_id,), disable_stopping=True,
                         occupation_eps=eps)
    vals = res.extras["occupation"] / eps
    mean = _fsum_mean(vals)
    var = math.fsum((vals - mean) ** 2) / max(n_paths - 1, 1)
    return Estimate(mean=mean, std_error=math.sqrt(var / n_paths),
                    n_paths=n_paths, breakdown=(mean, 0.0, 0.0))


def boundary_continuity_probe(target, approach, problem: Problem,
                              cfg: SimConfig, n_paths: int) -> list:
    """Estimates along an approach sequence toward a lateral-boundary point.

    target = (s, x_target).  Returns FieldRows for the approach points
    followed by the target itself when it lies on the Robin part (where the
    representation extends continuously); a target inside the corner collar
    is refused.
    """
    s_t, x_t = target
    base = problem.domain.base
    x_t = np.asarray(x_t, dtype=float)
    if base.kind != "interval":
        tol = base.tol_pi * max(1.0, base.radius)
        if float(base.dist_to_pi(x_t[None, :])[0]) <= tol:
            raise EstimatorError("probe target lies in the corner collar")
    rows = []
    for i, (s, x) in enumerate(approach):
        est = stochastic_solution(s, x, problem, cfg=cfg, n_paths=n_paths,
                                  point_index=i)
        rows.append(FieldRow(s=float(s), x=tuple(map(float, np.atleast_1d(x))),
                             estimate=est))
    on_robin = (problem.domain.dist_to_dirichlet(s_t, x_t) > 1e-12)
    if on_robin:
        est = stochastic_solution(s_t, x_t, problem, cfg=cfg,
                                  n_paths=n_paths, point_index=len(rows))
        rows.append(FieldRow(s=float(s_t), x=tuple(map(float, x_t)), estimate=est))
    return rows


def pi_attainability_stat(s, x, eps_list, problem: Problem, cfg: SimConfig,
                          n_paths: int, stream_id: int = 0):
    """Fractions of paths with a reflection event within eps of the
    Robin/Dirichlet border before their stop; zeros when the border is empty."""
    eps_list = list(eps_list)
    if not problem.domain.has_pi:
        return {float(e): 0.0 for e in eps_list}
    res = simulate_batch(problem, s, x, cfg, n_paths,
                         stream_ids=(stream_id,), track_pi=True)
    dmin = res.extras["pi_min_dist"]
    return {float(e): float(np.mean(dmin <= e)) for e in eps_list}


def dirichlet_proximity_stat(points, eta, problem: Problem, cfg: SimConfig,
                             n_paths: int):
    """Sample P(sigma_s >= s + 2 eta) for each start point (s, x)."""
    out = []
    for i, (s, x) in enumerate(points):
        x = np.asarray(x, dtype=float)
        if problem.domain.dist_to_dirichlet(s, x) <= 1e-12:
            out.append(0.0)
            continue
        horizon = min(problem.T, s + 2.0 * eta)
        cfg_i = SimConfig(dt=cfg.dt, scheme=cfg.scheme,
                          master_seed=cfg.master_seed, max_time=horizon,
                          collar_guard=cfg.collar_guard,
                          max_halvings=cfg.max_halvings)
        res = simulate_batch(problem, s, x, cfg_i, n_paths, stream_ids=(i,))
        surv = (~res.stopped) | (res.stop_time >= s + 2.0 * eta - 1e-15)
        out.append(float(np.mean(surv)))
    return out


def amplitude_bound(problem: Problem, cfg: SimConfig, s, x, n_paths=2000):
    """Sampled a-priori amplitude bound: (||f|| T + ||psi|| E L + ||h||) sup e^Z."""
    from .problem import _sample_points
    rng = np.random.default_rng(12345)
    xs = _sample_points(problem.domain, 400, rng)
    ts = rng.uniform(0, problem.T, 400)
    sup_f = float(np.max(np.abs(problem.sources.f(ts, xs))))
    sup_h = float(np.max(np.abs(problem.sources.h(ts, xs))))
    sup_psi = float(np.max(np.abs(problem.sources.psi(ts, xs))))
    res = simulate_batch(problem, s, x, cfg, n_paths, stream_ids=(991,),
                         disable_stopping=True)
    EL = float(np.mean(res.L))
    supZ = float(np.exp(np.max(res.Z)))
    bound = (sup_f * problem.T + sup_psi * EL + sup_h) * supZ
    if not np.isfinite(bound):
        raise EstimatorError("sampled amplitude bound is not finite")
    return bound


# -- artifact emission -------------------------------------------------------

CSV_COLUMNS = ("s", "x", "mean", "std_error", "term1", "term2", "term3",
               "n_paths", "dt", "seed")


def field_to_csv(rows, path, cfg: SimConfig):
    """Write solution-field rows to CSV with the declared column schema."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for row in rows:
            if row.skipped:
                continue
            est = row.estimate
            w.writerow([repr(row.s), ";".join(repr(v) for v in row.x),
                        repr(est.mean), repr(est.std_error),
                        repr(est.breakdown[0]), repr(est.breakdown[1]),
                        repr(est.breakdown[2]), est.n_paths,
                        repr(cfg.dt), cfg.master_seed])


def field_to_json(rows, path, cfg: SimConfig):
    payload = []
    for row in rows:
        entry = {"s": row.s, "x": list(row.x), "skipped": row.skipped}
        if row.skipped:
            entry["reason"] = row.reason
        else:
            est = row.estimate
            entry.update(mean=est.mean, std_error=est.std_error,
                         term1=est.breakdown[0], term2=est.breakdown[1],
                         term3=est.breakdown[2], n_paths=est.n_paths,
                         dt=cfg.dt, seed=cfg.master_seed)
        payload.append(entry)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
