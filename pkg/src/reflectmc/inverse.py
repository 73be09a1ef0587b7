"""Shape identification from boundary data: cost functional and minimizer.

A candidate Dirichlet shape is a parametrized cavity inside the fixed domain.
The misfit between the model's boundary trace and observed data d on an
observation arc Gamma-omega is

    V(theta) = int_0^T int_{Gamma-omega} |u^{D(theta)} - d|^2 dS dt,

discretized by trapezoid rules in time and arc length.  V is continuous in
the Hausdorff distance between the closed Dirichlet sets, which is what the
continuity experiment measures; the probabilistic variant accumulates the
squared residual against local time along reflected paths.  The minimizer is
a coordinate grid scan followed by a Nelder-Mead polish, logging every
evaluation as JSON lines.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize as _nm_minimize

from .geometry import (FixedDomain, GeometryError, TimeVaryingDomain,
                       hausdorff_distance)
from .problem import CoefficientSet, Problem, SourceData
from .sde import SimConfig, simulate_batch
from . import estimator as est_mod
from . import fd as fd_mod


class InverseError(ValueError):
    pass


@dataclass(frozen=True)
class DomainParam:
    """Cavity parameters mapping to a time-varying domain.

    keyframes: tuple of (t, center tuple, radius); a single keyframe means a
    static cavity.  Admissibility (positive radius, clearance margin) is
    enforced when the domain is built.
    """

    base: FixedDomain
    horizon: float
    keyframes: tuple
    margin: float = 0.05

    def domain(self) -> TimeVaryingDomain:
        try:
            return TimeVaryingDomain.build(
                self.base,
                keyframes=[(t, *c, float(r)) for (t, c, r) in self.keyframes],
                horizon=self.horizon, margin=self.margin)
        except GeometryError as exc:
            raise InverseError(f"inadmissible cavity parameters: {exc}") from None

    @classmethod
    def static(cls, base, horizon, center, radius, margin=0.05):
        return cls(base=base, horizon=horizon,
                   keyframes=((0.0, tuple(center), float(radius)),),
                   margin=margin)


@dataclass(frozen=True)
class ObservationData:
    """Observed boundary values over time samples x observation-arc points."""

    times: np.ndarray          # (nt,)
    arc_params: np.ndarray     # (na,) angles on the observation arc
    values: np.ndarray         # (nt, na)
    provenance: str = "external"

    def __post_init__(self):
        if self.values.shape != (len(self.times), len(self.arc_params)):
            raise InverseError(
                f"observation shape {self.values.shape} does not match "
                f"{len(self.times)} times x {len(self.arc_params)} arc points")

    def interpolator(self):
        """Bilinear interpolant d(t, angle) clamped to the sampled window."""
        from scipy.interpolate import RegularGridInterpolator
        return RegularGridInterpolator(
            (self.times, self.arc_params), self.values,
            bounds_error=False, fill_value=None)


@dataclass(frozen=True)
class ObservationSpec:
    """Where the data lives: an arc of the Robin boundary sampled uniformly."""

    arc: tuple = (-np.pi / 4, np.pi / 4)  # quarter arc by default
    n_arc: int = 16
    n_time: int = 32

    def nodes(self, base: FixedDomain, T):
        times = np.linspace(0.0, T, self.n_time)
        angles = np.linspace(self.arc[0], self.arc[1], self.n_arc)
        pts = np.stack([base.center[0] + base.radius * np.cos(angles),
                        base.center[1] + base.radius * np.sin(angles)], axis=-1)
        return times, angles, pts

    def quad_weights(self, base: FixedDomain, T):
        """Trapezoid weights in t and arc length."""
        wt = np.full(self.n_time, T / (self.n_time - 1))
        wt[0] *= 0.5
        wt[-1] *= 0.5
        arclen = base.radius * (self.arc[1] - self.arc[0])
        ws = np.full(self.n_arc, arclen / (self.n_arc - 1))
        ws[0] *= 0.5
        ws[-1] *= 0.5
        return wt, ws


@dataclass(frozen=True)
class ModelData:
    """Everything except the cavity: coefficients, sources, horizon."""

    coeffs: CoefficientSet
    sources: SourceData
    T: float

    def problem(self, theta: DomainParam) -> Problem:
        return Problem(domain=theta.domain(), coeffs=self.coeffs,
                       sources=self.sources, T=self.T)


def model_trace(theta: DomainParam, model: ModelData, spec: ObservationSpec,
                solver="fd", fd_grid=None, cfg=None, n_paths=20000):
    """u^{D(theta)} evaluated on the observation nodes, shape (nt, na)."""
    problem = model.problem(theta)
    times, angles, pts = spec.nodes(theta.base, model.T)
    if solver == "fd":
        grid = fd_grid if fd_grid is not None else fd_mod.FDGrid2D()
        sol = fd_mod.solve_backward_2d(problem, grid)
        return fd_mod.trace_on_observation(sol, angles, times)
    if solver != "mc":
        raise InverseError(f"unknown solver {solver!r}")
    if cfg is None:
        raise InverseError("mc solver needs a SimConfig")
    out = np.empty((len(times), len(pts)))
    for i, t in enumerate(times):
        for j, x in enumerate(pts):
            # shared (point-index keyed) streams make V(theta) couple
            # across theta through common random numbers
            e = est_mod.stochastic_solution(
                float(t), x, problem, cfg=cfg, n_paths=n_paths,
                point_index=i * len(pts) + j)
            out[i, j] = e.mean
    return out


def cost_functional(theta: DomainParam, d: ObservationData, model: ModelData,
                    spec: ObservationSpec = None, solver="fd", fd_grid=None,
                    cfg=None, n_paths=20000) -> float:
    """Quadrature of the squared trace misfit over [0,T] x Gamma-omega."""
    spec = spec if spec is not None else ObservationSpec(
        n_arc=len(d.arc_params), n_time=len(d.times),
        arc=(float(d.arc_params[0]), float(d.arc_params[-1])))
    if (len(d.times), len(d.arc_params)) != (spec.n_time, spec.n_arc):
        raise InverseError("observation data does not match the spec shape")
    tr = model_trace(theta, model, spec, solver=solver, fd_grid=fd_grid,
                     cfg=cfg, n_paths=n_paths)
    wt, ws = spec.quad_weights(theta.base, model.T)
    resid = (tr - d.values) ** 2
    return float(np.einsum("i,j,ij->", wt, ws, resid))


def synthesize_observations(theta_star: DomainParam, model: ModelData,
                            spec: ObservationSpec, fd_grid=None,
                            noise_std=0.0, seed=0) -> ObservationData:
    """Noiseless-or-noisy data from a generating cavity on a fine oracle grid
    (finer than any inversion grid, to avoid the inverse crime)."""
    grid = fd_grid if fd_grid is not None else fd_mod.FDGrid2D(
        nr=64, ntheta=96, nt=160)
    tr = model_trace(theta_star, model, spec, solver="fd", fd_grid=grid)
    if noise_std > 0:
        rng = np.random.default_rng(seed)
        tr = tr + noise_std * rng.standard_normal(tr.shape)
    times, angles, _ = spec.nodes(theta_star.base, model.T)
    return ObservationData(times=times, arc_params=angles, values=tr,
                           provenance="synthetic-from-theta_star")


def continuity_experiment(theta_sequence, theta_limit: DomainParam,
                          d: ObservationData, model: ModelData,
                          spec: ObservationSpec = None, solver="fd",
                          fd_grid=None, cfg=None, n_paths=20000):
    """Rows (hausdorff distance to the limit shape, |V_m - V|).

    With the mc solver all evaluations share one seed, so the costs are
    coupled through common random numbers.
    """
    V_lim = cost_functional(theta_limit, d, model, spec=spec, solver=solver,
                            fd_grid=fd_grid, cfg=cfg, n_paths=n_paths)
    dom_lim = theta_limit.domain()
    rows = []
    for theta in theta_sequence:
        V_m = cost_functional(theta, d, model, spec=spec, solver=solver,
                              fd_grid=fd_grid, cfg=cfg, n_paths=n_paths)
        dH = hausdorff_distance(theta.domain(), dom_lim)
        rows.append({"hausdorff": dH, "gap": abs(V_m - V_lim),
                     "V_m": V_m, "V_limit": V_lim})
    return rows


def probabilistic_cost(nu_init, gamma_exp, theta: DomainParam,
                       d: ObservationData, model: ModelData,
                       u_field, cfg: SimConfig, n_paths: int,
                       arc=(-np.pi / 4, np.pi / 4)):
    """Local-time-driven misfit E[ int t^gamma 1_{Gamma-omega} |u - d|^2 dL ].

    nu_init: array of start points on/near the observation arc (paths split
    evenly across them); u_field(t, xb) evaluates the model solution on the
    boundary; d supplies the data via bilinear interpolation in (t, angle).
    """
    if gamma_exp < 0:
        raise InverseError("the time exponent must be nonnegative")
    problem = model.problem(theta)
    base = theta.base
    d_itp = d.interpolator()
    lo, hi = arc

    def residual_on_events(t_evt, xb, n_in, dL, Z):
        ang = np.arctan2(xb[:, 1] - base.center[1], xb[:, 0] - base.center[0])
        in_arc = (ang >= lo) & (ang <= hi)
        uvals = u_field(t_evt, xb)
        dvals = d_itp(np.stack([np.full(len(xb), t_evt), ang], axis=-1))
        out = (t_evt ** gamma_exp) * (uvals - dvals) ** 2 * dL
        return np.where(in_arc, out, 0.0)

    nu_init = np.atleast_2d(np.asarray(nu_init, dtype=float))
    per = max(2, n_paths // len(nu_init))
    vals = []
    for k, x0 in enumerate(nu_init):
        res = simulate_batch(problem, 0.0, x0, cfg, per, stream_ids=(k,),
                             reflection_functional=residual_on_events)
        vals.append(res.extras["reflection_acc"])
    vals = np.concatenate(vals)
    mean = math.fsum(vals) / len(vals)
    var = math.fsum((vals - mean) ** 2) / max(len(vals) - 1, 1)
    return est_mod.Estimate(mean=mean, std_error=math.sqrt(var / len(vals)),
                            n_paths=len(vals), breakdown=(mean, 0.0, 0.0))


@dataclass
class MinimizeResult:
    theta: np.ndarray
    value: float
    n_evals: int
    log: list = field(default_factory=list)


def minimize_cost(d: ObservationData, theta_box, budget, builder,
                  model: ModelData, spec: ObservationSpec = None,
                  solver="fd", fd_grid=None, cfg=None, n_paths=20000,
                  log_path=None) -> MinimizeResult:
    """Coordinate-grid scan plus Nelder-Mead polish within the theta box.

    builder(vec) -> DomainParam maps optimizer vectors to cavity parameters;
    inadmissible vectors cost +inf.  Every evaluation is appended to the
    JSON-lines log.
    """
    theta_box = [(float(lo), float(hi)) for (lo, hi) in theta_box]
    ndim = len(theta_box)
    if budget < 2 ** ndim:
        raise InverseError("budget smaller than a minimal grid scan")
    log = []

    def V(vec):
        vec = np.clip(vec, [lo for lo, _ in theta_box],
                      [hi for _, hi in theta_box])
        try:
            val = cost_functional(builder(vec), d, model, spec=spec,
                                  solver=solver, fd_grid=fd_grid, cfg=cfg,
                                  n_paths=n_paths)
        except InverseError:
            val = float("inf")
        log.append({"theta": [float(v) for v in vec], "V": val})
        return val

    # stage 1: full-factorial grid using about half the budget
    n_grid = max(2, int((budget / 2) ** (1.0 / ndim)))
    axes = [np.linspace(lo, hi, n_grid) for (lo, hi) in theta_box]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, ndim)
    vals = np.array([V(v) for v in mesh])
    best = mesh[int(np.argmin(vals))]

    # stage 2: Nelder-Mead polish with the remaining budget
    remaining = budget - len(log)
    if remaining > ndim + 1:
        span = np.array([hi - lo for (lo, hi) in theta_box])
        res = _nm_minimize(V, best, method="Nelder-Mead",
                           options={"maxfev": remaining,
                                    "xatol": 1e-4, "fatol": 1e-12,
                                    "initial_simplex": np.vstack(
                                        [best] + [best + 0.5 * span[i] / n_grid
                                                  * np.eye(ndim)[i]
                                                  for i in range(ndim)])})
        cand = np.clip(res.x, [lo for lo, _ in theta_box],
                       [hi for _, hi in theta_box])
        if res.fun <= np.min(vals):
            best = cand
    best_val = min(entry["V"] for entry in log)
    if log_path is not None:
        with open(log_path, "w") as fh:
            for entry in log:
                fh.write(json.dumps(entry) + "\n")
    return MinimizeResult(theta=np.asarray(best, dtype=float), value=best_val,
                          n_evals=len(log), log=log)


# -- observation CSV round-trip ---------------------------------------------

def observations_to_csv(d: ObservationData, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "arc_param", "value"])
        for i, t in enumerate(d.times):
            for j, a in enumerate(d.arc_params):
                w.writerow([repr(float(t)), repr(float(a)),
                            repr(float(d.values[i, j]))])


def observations_from_csv(path, provenance="external") -> ObservationData:
    ts, angs, vals = [], [], {}
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if header != ["t", "arc_param", "value"]:
            raise InverseError(f"unexpected observation header {header}")
        for row in rd:
            t, a, v = float(row[0]), float(row[1]), float(row[2])
            vals[(t, a)] = v
            if t not in ts:
                ts.append(t)
            if a not in angs:
                angs.append(a)
    times = np.array(sorted(ts))
    arc = np.array(sorted(angs))
    mat = np.array([[vals[(t, a)] for a in arc] for t in times])
    return ObservationData(times=times, arc_params=arc, values=mat,
                           provenance=provenance)
