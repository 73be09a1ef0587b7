"""Euler scheme for the reflecting diffusion with boundary local time.

The pair (X, L) follows the oblique-reflection dynamics: free Euler proposal
X* = X + c_vec dt + M sqrt(dt) xi with M M^T = 2A, then a boundary push along
the inward conormal beta = A n_in whenever the proposal leaves Omega-bar:

    dL = overshoot / (beta . n_in),   X_new = X* + beta dL.

The optional half-space scheme additionally samples the excursion minimum of
the distance-to-boundary process over the step (Brownian-bridge extremum), so
local time also accrues on near-boundary steps that never leave the domain;
this removes the O(sqrt(dt)) local-time deficit of plain projection.

Paths are stopped at the entrance time to the closed Dirichlet part: interior
(cavity) entrances are detected by segment/sphere crossing with one bisection
refinement in time, fixed-boundary entrances by the classification of the
reflection point.  The weight Z accumulates c_scal dt along the path and
gamma dL at reflections.

Everything is driven by counter-based Philox streams keyed on
(master_seed, stream ids), with per-step draws of full batch shape, so results
are independent of scheduling and worker count.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .geometry import TimeVaryingDomain
from .problem import Problem


class SimulationError(RuntimeError):
    pass


def philox_stream(master_seed, *ids) -> np.random.Generator:
    """Counter-based RNG stream derived from (master_seed, ids...)."""
    ss = np.random.SeedSequence([int(master_seed) & (2**63 - 1),
                                 *[int(i) & (2**63 - 1) for i in ids]])
    return np.random.Generator(np.random.Philox(seed=ss))


@dataclass(frozen=True)
class SimConfig:
    dt: float
    scheme: str = "projection"  # 'projection' | 'halfspace'
    master_seed: int = 0
    max_time: float | None = None  # horizon T; defaults to the problem horizon
    collar_guard: float | None = None  # defaults to the domain tubular width
    max_halvings: int = 8

    def __post_init__(self):
        if self.dt <= 0:
            raise SimulationError("dt must be positive")
        if self.scheme not in ("projection", "halfspace"):
            raise SimulationError(f"unknown scheme {self.scheme!r}")

    def check_step_size(self, problem: Problem, n_check=64, seed=0):
        """Warn when a typical step can overshoot the boundary collar."""
        rng = np.random.default_rng(seed)
        dom = problem.domain
        width = dom.base.tubular_width
        from .problem import _sample_points
        xs = _sample_points(dom, n_check, rng)
        ts = rng.uniform(0, problem.T, n_check)
        sup_c = float(np.max(np.linalg.norm(problem.nondiv.c_vec(ts, xs), axis=-1)))
        sup_A = float(np.max(np.abs(problem.coeffs.A(ts, xs))))
        guard = 4.0 * sup_c * self.dt + 4.0 * np.sqrt(2.0 * sup_A * self.dt)
        if guard > width:
            warnings.warn(
                f"dt={self.dt} lets 4-sigma steps ({guard:.3g}) exceed the "
                f"boundary collar ({width:.3g}); expect collar errors",
                stacklevel=2)
        return guard <= width


class PathStatus(Enum):
    RUNNING = "running"
    STOPPED_DIRICHLET = "stopped_dirichlet"
    REACHED_T = "reached_T"


@dataclass
class PathState:
    t: float
    X: np.ndarray
    L: float = 0.0
    Z: float = 0.0
    status: PathStatus = PathStatus.RUNNING
    stop_time: float | None = None


@dataclass
class PathRecord:
    start_time: float
    start_point: np.ndarray
    stop_time: float
    stopped: bool
    L_final: float
    Z_final: float
    X_final: np.ndarray
    source_integral: float
    robin_integral: float


@dataclass
class BatchResult:
    """Per-path arrays from one vectorized simulation batch."""

    s: float
    n_paths: int
    stop_time: np.ndarray
    stopped: np.ndarray
    L: np.ndarray
    Z: np.ndarray
    X_final: np.ndarray
    source_integral: np.ndarray
    robin_integral: np.ndarray
    extras: dict = field(default_factory=dict)


def _field_eval(fld):
    """(kind, payload): 'zero' | 'const' | 'fn' for cheap per-step evaluation."""
    if fld.is_zero:
        return ("zero", 0.0)
    if fld.is_constant:
        return ("const", fld.constant_value())
    return ("fn", fld)


def _segment_sphere_crossing(P0, P1, c, r):
    """Earliest lambda in [0,1] where P0 + lambda (P1-P0) meets the closed ball,
    or inf when the segment stays outside."""
    d = P1 - P0
    m = P0 - c
    a = np.sum(d * d, axis=-1)
    b = 2.0 * np.sum(m * d, axis=-1)
    cq = np.sum(m * m, axis=-1) - r * r
    lam = np.full(len(P0), np.inf)
    inside0 = cq <= 0.0
    lam[inside0] = 0.0
    disc = b * b - 4.0 * a * cq
    ok = (~inside0) & (disc >= 0.0) & (a > 0.0)
    if np.any(ok):
        sq = np.sqrt(disc[ok])
        l1 = (-b[ok] - sq) / (2.0 * a[ok])
        hit = (l1 >= 0.0) & (l1 <= 1.0)
        vals = np.where(hit, l1, np.inf)
        lam[ok] = vals
    return lam


class _Engine:
    """Vectorized batch simulation; one instance per (problem, config)."""

    def __init__(self, problem: Problem, cfg: SimConfig):
        self.problem = problem
        self.cfg = cfg
        self.dom: TimeVaryingDomain = problem.domain
        self.base = self.dom.base
        self.dim = self.dom.dim
        nd = problem.nondiv
        self.nd = nd
        self.collar = (cfg.collar_guard if cfg.collar_guard is not None
                       else self.base.tubular_width)
        self.T = cfg.max_time if cfg.max_time is not None else problem.T
        self.A_const = nd.A.constant_value() if nd.A.is_constant else None
        if self.A_const is not None:
            self.M_const = diffusion_factor(self.A_const)
        self.c_vec_const = (nd.c_vec.constant_value() if nd.c_vec.is_constant
                            else None)
        self.c_scal = _field_eval(nd.c_scal)
        self.f = _field_eval(problem.sources.f)
        self.psi = _field_eval(problem.sources.psi)
        self.sigma_rob = _field_eval(nd.sigma_rob)
        self.a_vec_zero = nd.a_vec.is_zero

    def _eval(self, spec, t, x):
        kind, payload = spec
        if kind == "zero":
            return 0.0
        if kind == "const":
            return payload
        return payload(t, x)

    def drift(self, t, x):
        if self.c_vec_const is not None:
            return self.c_vec_const
        return self.nd.c_vec(t, x)

    def noise_matrix(self, t, x):
        """(dim, dim) constant factor or (n, dim, dim) batch of factors."""
        if self.A_const is not None:
            return self.M_const
        Avals = self.nd.A(t, x)
        try:
            return np.linalg.cholesky(2.0 * Avals)
        except np.linalg.LinAlgError:
            raise SimulationError("diffusion matrix not positive definite") from None

    def beta_at(self, t, xb, n_in):
        if self.A_const is not None:
            return n_in @ self.A_const.T
        return self.nd.beta(t, xb, n_in)

    def gamma_at(self, t, xb, n_in):
        g = -self._eval(self.sigma_rob, t, xb)
        if not self.a_vec_zero:
            g = g + np.einsum("...i,...i->...", self.nd.a_vec(t, xb), n_in)
        return g

    # -- main loop ----------------------------------------------------------

    def run(self, s, x0, n_paths, rng, disable_stopping=False,
            occupation_eps=None, track_pi=False, reflection_functional=None):
        T = self.T
        dim = self.dim
        dt0 = self.cfg.dt
        halfspace = self.cfg.scheme == "halfspace"
        x0 = np.asarray(x0, dtype=float).reshape(dim)

        X = np.tile(x0, (n_paths, 1))
        L = np.zeros(n_paths)
        Z = np.zeros(n_paths)
        src = np.zeros(n_paths)
        rob = np.zeros(n_paths)
        stop_time = np.full(n_paths, T)
        stopped = np.zeros(n_paths, dtype=bool)
        occ = np.zeros(n_paths) if occupation_eps is not None else None
        pi_min = (np.full(n_paths, np.inf) if track_pi else None)
        refl_acc = np.zeros(n_paths) if reflection_functional is not None else None

        cavity_live = (not self.dom.cavity.is_empty) and not disable_stopping
        fixed_dirichlet = (not disable_stopping)
        have_f = self.f[0] != "zero"
        have_psi = self.psi[0] != "zero"
        have_cs = self.c_scal[0] != "zero"
        have_gamma = not (self.sigma_rob[0] == "zero" and self.a_vec_zero)

        alive = np.ones(n_paths, dtype=bool)
        n_steps = int(np.ceil((T - s) / dt0 - 1e-12))
        t = s
        for istep in range(n_steps):
            dt = min(dt0, T - t)
            t1 = t + dt
            xi = rng.standard_normal((n_paths, dim))
            if halfspace:
                U = rng.random(n_paths)
            if not np.any(alive):
                break
            idx = np.flatnonzero(alive)
            Xa = X[idx]
            tc = self.problem.clamp_time(t)

            drift = self.drift(tc, Xa)
            M = self.noise_matrix(tc, Xa)
            if M.ndim == 2:
                dW = np.sqrt(dt) * xi[idx] @ M.T
            else:
                dW = np.sqrt(dt) * np.einsum("nij,nj->ni", M, xi[idx])
            prop = Xa + drift * dt + dW

            phi_old = self.base.signed_distance(Xa)
            phi_new = self.base.signed_distance(prop)
            if np.any(phi_new < -self.collar):
                raise SimulationError(
                    "proposal escaped beyond the boundary collar; reduce dt")

            if halfspace:
                # bridge extremum of the distance-to-boundary process
                _, n_b = self.base.signed_distance_and_normal(prop)
                if self.A_const is not None:
                    s2 = 2.0 * np.einsum("ni,ij,nj->n", n_b, self.A_const, n_b)
                else:
                    xb_all = self.base.boundary_projection(prop)
                    s2 = 2.0 * np.einsum("ni,nij,nj->n", n_b,
                                         self.nd.A(tc, xb_all), n_b)
                w_eff = phi_new - phi_old
                logu = np.log(np.maximum(U[idx], 1e-300))
                mstar = 0.5 * (-w_eff + np.sqrt(w_eff * w_eff
                                                - 2.0 * s2 * dt * logu))
                dK = np.maximum(0.0, mstar - phi_old)
                refl = dK > 0.0
            else:
                refl = phi_new < 0.0
                dK = np.where(refl, -phi_new, 0.0)

            X_new = prop.copy()
            dL = np.zeros(len(idx))
            if np.any(refl):
                r_i = np.flatnonzero(refl)
                xb = self.base.boundary_projection(prop[r_i])
                _, n_in = self.base.signed_distance_and_normal(xb)
                beta = self.beta_at(tc, xb, n_in)
                denom = np.einsum("ni,ni->n", beta, n_in)
                if np.any(denom <= 0.0):
                    raise SimulationError(
                        "conormal reflection not inward (beta . n <= 0)")
                dLr = dK[r_i] / denom
                moved = prop[r_i] + beta * dLr[:, None]
                # absorb residual overshoot from boundary curvature
                phi_m = self.base.signed_distance(moved)
                out = phi_m < 0.0
                if np.any(out):
                    moved[out] = self.base.boundary_projection(moved[out])
                X_new[r_i] = moved
                dL[r_i] = dLr

            # entrance-time detection
            stop_now = np.zeros(len(idx), dtype=bool)
            stop_t = np.full(len(idx), np.inf)
            hit_pt = None
            if cavity_live:
                c0, r0 = self.dom.cavity.at(tc)
                if r0 > 0.0 or not self.dom.cavity.is_empty:
                    lam = _segment_sphere_crossing(Xa, X_new, c0, r0)
                    hit = np.isfinite(lam)
                    if np.any(hit):
                        # one refinement with the cavity evaluated at the hit time
                        th = t + lam[hit] * dt
                        lam2 = lam.copy()
                        for pi_idx, tt in zip(np.flatnonzero(hit), th):
                            c1, r1 = self.dom.cavity.at(
                                min(tt, self.dom.horizon))
                            l2 = _segment_sphere_crossing(
                                Xa[pi_idx:pi_idx + 1], X_new[pi_idx:pi_idx + 1],
                                c1, r1)[0]
                            if np.isfinite(l2):
                                lam2[pi_idx] = l2
                        hit2 = np.isfinite(lam2)
                        stop_now |= hit2
                        stop_t = np.where(hit2, t + lam2 * dt, stop_t)
                        hit_pt = (hit2, Xa + lam2[:, None].clip(0, 1)
                                  * (X_new - Xa))
                    # endpoint containment at t1 as a safety net
                    c1, r1 = self.dom.cavity.at(self.problem.clamp_time(t1))
                    if r1 > 0.0:
                        inside_end = (np.linalg.norm(X_new - c1, axis=-1) <= r1)
                        newly = inside_end & ~stop_now
                        if np.any(newly):
                            stop_now |= newly
                            stop_t = np.where(newly, t1, stop_t)
            if fixed_dirichlet and np.any(refl):
                r_i = np.flatnonzero(refl)
                xb = self.base.boundary_projection(prop[r_i])
                on_robin = self.base.robin_mask(xb)
                dir_hit = ~on_robin
                if np.any(dir_hit):
                    sub = r_i[dir_hit]
                    stop_now[sub] = True
                    stop_t[sub] = np.minimum(stop_t[sub], t1)

            stop_t = np.minimum(stop_t, t1)
            surv = ~stop_now

            # accumulate integrals with left-endpoint quadrature
            dt_eff = np.where(stop_now, stop_t - t, dt)
            if have_f:
                fval = self._eval(self.f, tc, Xa)
                src[idx] += np.exp(Z[idx]) * fval * dt_eff
            if occ is not None:
                band = phi_old < occupation_eps
                if np.any(band):
                    b_i = np.flatnonzero(band)
                    xb_o = self.base.boundary_projection(Xa[b_i])
                    _, n_o = self.base.signed_distance_and_normal(xb_o)
                    if self.A_const is not None:
                        nAn = np.einsum("ni,ij,nj->n", n_o, self.A_const, n_o)
                    else:
                        nAn = np.einsum("ni,nij,nj->n", n_o,
                                        self.nd.A(tc, xb_o), n_o)
                    beta_o = self.beta_at(tc, xb_o, n_o)
                    bn = np.einsum("ni,ni->n", beta_o, n_o)
                    occ[idx[b_i]] += dt_eff[b_i] * nAn / bn
            if have_cs:
                Z[idx] += self._eval(self.c_scal, tc, Xa) * dt_eff

            # reflection bookkeeping only for surviving paths
            eff = refl & surv
            if np.any(eff):
                r_i = np.flatnonzero(eff)
                xb = self.base.boundary_projection(prop[r_i])
                _, n_in = self.base.signed_distance_and_normal(xb)
                gidx = idx[r_i]
                L[gidx] += dL[r_i]
                if have_psi:
                    pv = self._eval(self.psi, tc, xb)
                    rob[gidx] += np.exp(Z[gidx]) * pv * dL[r_i]
                if reflection_functional is not None:
                    refl_acc[gidx] += reflection_functional(
                        t1, xb, n_in, dL[r_i], Z[gidx])
                if have_gamma:
                    Z[gidx] += self.gamma_at(tc, xb, n_in) * dL[r_i]
                if pi_min is not None:
                    pi_min[gidx] = np.minimum(pi_min[gidx],
                                              self.base.dist_to_pi(xb))
            if pi_min is not None and np.any(refl & ~surv):
                # stopping reflections still count as boundary events
                r_i = np.flatnonzero(refl & ~surv)
                xb = self.base.boundary_projection(prop[r_i])
                pi_min[idx[r_i]] = np.minimum(pi_min[idx[r_i]],
                                              self.base.dist_to_pi(xb))

            # freeze stopped paths
            if np.any(stop_now):
                s_i = np.flatnonzero(stop_now)
                gidx = idx[s_i]
                stopped[gidx] = True
                stop_time[gidx] = stop_t[s_i]
                if hit_pt is not None:
                    hmask, hpts = hit_pt
                    take = hmask[s_i]
                    X[gidx[take]] = hpts[s_i][take]
                    rest = ~take
                    X[gidx[rest]] = X_new[s_i][rest]
                else:
                    X[gidx] = X_new[s_i]
                alive[gidx] = False

            live_i = np.flatnonzero(surv)
            X[idx[live_i]] = X_new[live_i]
            t = t1

        return BatchResult(
            s=s, n_paths=n_paths, stop_time=stop_time, stopped=stopped,
            L=L, Z=Z, X_final=X, source_integral=src, robin_integral=rob,
            extras={k: v for k, v in
                    (("occupation", occ), ("pi_min_dist", pi_min),
                     ("reflection_acc", refl_acc)) if v is not None},
        )


def diffusion_factor(A_val: np.ndarray) -> np.ndarray:
    """Lower-triangular M with M M^T = 2 A."""
    A_val = np.asarray(A_val, dtype=float)
    if not np.allclose(A_val, A_val.T, rtol=1e-10, atol=1e-14):
        raise SimulationError("diffusion matrix must be symmetric")
    try:
        return np.linalg.cholesky(2.0 * A_val)
    except np.linalg.LinAlgError:
        raise SimulationError("diffusion matrix not positive definite") from None


def simulate_batch(problem: Problem, s, x0, cfg: SimConfig, n_paths,
                   stream_ids=(), **options) -> BatchResult:
    """Simulate n_paths independent paths from (s, x0); deterministic in
    (cfg.master_seed, stream_ids) and independent of worker scheduling."""
    engine = _Engine(problem, cfg)
    rng = philox_stream(cfg.master_seed, *stream_ids)
    return engine.run(s, x0, n_paths, rng, **options)


def local_time_reflect(X_proposed, domain, beta_field):
    """(X_new, dL, X_b) for one out-of-domain proposal; the projection rule.

    beta_field(X_b, n_in) returns the oblique direction at the boundary point
    (callers bind the evaluation time).
    """
    base = domain.base if isinstance(domain, TimeVaryingDomain) else domain
    X_proposed = np.asarray(X_proposed, dtype=float)
    phi, _ = base.signed_distance_and_normal(X_proposed)
    if phi >= 0:
        raise SimulationError("local_time_reflect expects an exterior proposal")
    xb = base.boundary_projection(X_proposed[None, :])[0]
    _, n_in = base.signed_distance_and_normal(xb)
    beta = np.asarray(beta_field(xb, n_in), dtype=float).reshape(-1)
    denom = float(beta @ n_in)
    if denom <= 0:
        raise SimulationError("conormal reflection not inward (beta . n <= 0)")
    dL = -phi / denom
    X_new = X_proposed + beta * dL
    if base.signed_distance(X_new[None, :])[0] < 0:
        X_new = base.boundary_projection(X_new[None, :])[0]
    return X_new, dL, xb


def step(state: PathState, domain, nondiv, cfg: SimConfig,
         rng_stream: np.random.Generator) -> PathState:
    """Advance one path state by one time step (scalar reference path).

    Retries with halved dt (up to cfg.max_halvings) when the proposal
    escapes the boundary collar.  cfg.max_time supplies the horizon T.
    """
    if state.status is not PathStatus.RUNNING:
        raise SimulationError("step requires a running path")
    if cfg.max_time is None:
        raise SimulationError("step needs cfg.max_time as the horizon")
    base = domain.base
    T = cfg.max_time
    dim = domain.dim
    collar = cfg.collar_guard if cfg.collar_guard is not None else base.tubular_width
    dt = min(cfg.dt, T - state.t)
    xi = rng_stream.standard_normal(dim)
    tc = min(state.t, T)
    for _ in range(cfg.max_halvings + 1):
        drift = nondiv.c_vec(tc, state.X[None, :])[0]
        Aval = nondiv.A(tc, state.X[None, :])[0]
        M = diffusion_factor(Aval)
        prop = state.X + drift * dt + np.sqrt(dt) * (M @ xi)
        if base.signed_distance(prop[None, :])[0] >= -collar:
            break
        dt = dt / 2.0
        xi = rng_stream.standard_normal(dim)
    else:
        raise SimulationError("proposal escaped the collar after max halvings")
    t1 = state.t + dt
    dL = 0.0
    xb = None
    if base.signed_distance(prop[None, :])[0] < 0:
        X_new, dL, xb = local_time_reflect(
            prop, domain,
            lambda b, n: nondiv.beta(tc, b[None, :], n[None, :])[0])
    else:
        X_new = prop
    Z_new = state.Z + float(nondiv.c_scal(tc, state.X[None, :])[0]) * dt
    if dL > 0:
        _, n_in = base.signed_distance_and_normal(xb)
        Z_new += float(nondiv.gamma(tc, xb[None, :], n_in[None, :])[0]) * dL
    new = PathState(t=t1, X=X_new, L=state.L + dL, Z=Z_new)
    stop = dirichlet_stop_check(state.t, state.X, t1, X_new, domain,
                                reflection_point=xb)
    if stop is not None:
        new.status = PathStatus.STOPPED_DIRICHLET
        new.stop_time = stop
    elif t1 >= T - 1e-15:
        new.status = PathStatus.REACHED_T
    return new


def simulate_path(s, x, problem: Problem, domain, cfg: SimConfig,
                  path_index: int = 0) -> PathRecord:
    """One path, on its own stream keyed by (master_seed, path_index)."""
    x = np.asarray(x, dtype=float)
    domain = domain if domain is not None else problem.domain
    if (not domain.inside(s, x)
            and domain.dist_to_dirichlet(s, x) <= 1e-12):
        return PathRecord(start_time=s, start_point=x, stop_time=s,
                          stopped=True, L_final=0.0, Z_final=0.0,
                          X_final=x.copy(), source_integral=0.0,
                          robin_integral=0.0)
    res = simulate_batch(problem, s, x, cfg, 1, stream_ids=(path_index,))
    return PathRecord(
        start_time=s, start_point=x, stop_time=float(res.stop_time[0]),
        stopped=bool(res.stopped[0]), L_final=float(res.L[0]),
        Z_final=float(res.Z[0]), X_final=res.X_final[0],
        source_integral=float(res.source_integral[0]),
        robin_integral=float(res.robin_integral[0]),
    )


def dirichlet_stop_check(t_prev, x_prev, t_new, x_new, domain: TimeVaryingDomain,
                         reflection_point=None):
    """Entrance time into the closed Dirichlet part over one step, or None."""
    if not domain.cavity.is_empty:
        c0, r0 = domain.cavity.at(t_prev)
        lam = _segment_sphere_crossing(x_prev[None, :], x_new[None, :], c0, r0)[0]
        if np.isfinite(lam):
            th = t_prev + lam * (t_new - t_prev)
            c1, r1 = domain.cavity.at(th)
            lam2 = _segment_sphere_crossing(x_prev[None, :], x_new[None, :],
                                            c1, r1)[0]
            if np.isfinite(lam2):
                return t_prev + lam2 * (t_new - t_prev)
            return th
        c1, r1 = domain.cavity.at(t_new)
        if r1 > 0 and np.linalg.norm(x_new - c1) <= r1:
            return t_new
    if reflection_point is not None:
        if not bool(np.atleast_1d(domain.base.robin_mask(reflection_point))[0]):
            return t_new
    return None
