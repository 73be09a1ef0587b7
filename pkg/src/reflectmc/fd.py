"""Deterministic finite-difference reference solver for the terminal-boundary problem.

Solves the backward parabolic problem by time reversal (tau = T - t) with
Crank-Nicolson stepping:

* 1D: divergence-form flux discretization on an interval, Robin flux closure
  at Robin ends via a half-cell finite-volume balance, optional moving interior
  Dirichlet barrier.
* 2D: cell-centered polar grid on a disk (no stair-casing on the Robin arcs),
  isotropic diffusion only, cavity imposed by hard masking of deep cells plus a
  penalty band one cell wide so the solution varies continuously with the
  cavity parameters.

This solver shares only the geometry/problem definitions with the Monte Carlo
path; it is the independent reference the estimator is checked against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .problem import Problem, ProblemError

TWO_PI = 2.0 * math.pi


class FDError(RuntimeError):
    pass


@dataclass(frozen=True)
class FDGrid1D:
    h: float
    k: float

    def __post_init__(self):
        if self.h <= 0 or self.k <= 0:
            raise FDError("grid steps must be positive")


@dataclass(frozen=True)
class FDGrid2D:
    nr: int = 40
    ntheta: int = 64
    nt: int = 80
    band_cells: float = 1.0  # penalty band width at the cavity edge, in cells

    def __post_init__(self):
        if min(self.nr, self.ntheta, self.nt) < 4:
            raise FDError("2D grid too coarse")


@dataclass
class FDSolution:
    """u[time_level][...node] on the ascending time grid, with interpolation."""

    times: np.ndarray
    u: np.ndarray  # (nt+1, ...) original-time orientation, u[-1] = h
    kind: str  # 'line' | 'polar'
    meta: dict

    def sup_norm(self) -> float:
        mask = self.meta.get("active_mask")
        if mask is not None:
            return float(np.max(np.abs(self.u[mask])))
        return float(np.max(np.abs(self.u)))

    # -- evaluation ---------------------------------------------------------

    def __call__(self, s, x):
        """Interpolated field value at time s, point x (vectorized over x)."""
        if self.kind == "line":
            return self._eval_line(s, x)
        return self._eval_polar(s, x)

    def _time_weights(self, s):
        times = self.times
        s = float(np.clip(s, times[0], times[-1]))
        m = int(np.clip(np.searchsorted(times, s) - 1, 0, len(times) - 2))
        w = (s - times[m]) / (times[m + 1] - times[m])
        return m, w

    def _eval_line(self, s, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))[..., 0]
        m, w = self._time_weights(s)
        xs = self.meta["x_nodes"]
        v0 = np.interp(x, xs, self.u[m])
        v1 = np.interp(x, xs, self.u[m + 1])
        return (1 - w) * v0 + w * v1

    def _eval_polar(self, s, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        m, w = self._time_weights(s)
        out = (1 - w) * self._polar_level(m, x) + w * self._polar_level(m + 1, x)
        return out

    def _polar_level(self, m, x):
        c0 = self.meta["center"]
        rs = self.meta["r_cells"]
        ntheta = self.meta["ntheta"]
        dtheta = TWO_PI / ntheta
        v = x - c0
        rho = np.linalg.norm(v, axis=-1)
        theta = np.mod(np.arctan2(v[..., 1], v[..., 0]), TWO_PI)
        lvl = self.u[m]
        i = np.clip(np.searchsorted(rs, rho) - 1, 0, len(rs) - 2)
        wr = np.clip((rho - rs[i]) / (rs[i + 1] - rs[i]), 0.0, 1.0)
        jf = theta / dtheta - 0.5
        j0 = np.floor(jf).astype(int) % ntheta
        j1 = (j0 + 1) % ntheta
        wt = jf - np.floor(jf)
        return ((1 - wr) * ((1 - wt) * lvl[i, j0] + wt * lvl[i, j1])
                + wr * ((1 - wt) * lvl[i + 1, j0] + wt * lvl[i + 1, j1]))

    def boundary_value(self, s, theta):
        """Robin-boundary trace value at angle(s) theta (2D) via the flux closure."""
        if self.kind != "polar":
            raise FDError("boundary_value by angle applies to the polar solution")
        m, w = self._time_weights(s)
        return ((1 - w) * self._boundary_level(m, theta)
                + w * self._boundary_level(m + 1, theta))

    def _boundary_level(self, m, theta):
        ubv = self.meta["boundary_values"][m]
        ntheta = self.meta["ntheta"]
        dtheta = TWO_PI / ntheta
        theta = np.mod(np.asarray(theta, dtype=float), TWO_PI)
        jf = theta / dtheta - 0.5
        j0 = np.floor(jf).astype(int) % ntheta
        j1 = (j0 + 1) % ntheta
        wt = jf - np.floor(jf)
        return (1 - wt) * ubv[j0] + wt * ubv[j1]


# ---------------------------------------------------------------------------
# 1D solver
# ---------------------------------------------------------------------------

def solve_backward_1d(problem: Problem, grid: FDGrid1D, barrier=None) -> FDSolution:
    """Crank-Nicolson in reversed time on the interval domain.

    barrier: optional callable t -> position; nodes with x >= barrier(t) are
    held at zero (moving interior Dirichlet edge).
    """
    base = problem.domain.base
    if base.kind != "interval":
        raise FDError("solve_backward_1d needs an interval domain")
    a, b = base.a, base.b
    T = problem.T
    N = int(round((b - a) / grid.h))
    h = (b - a) / N
    M = int(round(T / grid.k))
    k = T / M
    xs = a + h * np.arange(N + 1)
    co = problem.coeffs
    src = problem.sources

    left_robin = "left" in base.robin_ends
    right_robin = "right" in base.robin_ends

    xcol = xs[:, None]
    xf = (xs[:-1] + xs[1:]) / 2.0  # interior faces
    xfcol = xf[:, None]

    def operator(t):
        """Tridiagonal Theta and affine part g with (d/dtau) w = Theta w + g."""
        Af = co.A.entry(0, 0)(t, xfcol)
        af = co.a_vec.components[0](t, xfcol)
        bn = co.b_vec.components[0](t, xcol)
        an = co.a_scal(t, xcol)
        fn = src.f(t, xcol)
        lo = np.zeros(N + 1)
        di = np.zeros(N + 1)
        up = np.zeros(N + 1)
        g = -fn.copy()
        # interior nodes: flux divergence + drift + zeroth order
        iF = np.arange(1, N)
        # F_{i+1/2} = A_f (w_{i+1}-w_i)/h + a_f (w_{i+1}+w_i)/2
        cR_up = Af[iF] / h + af[iF] / 2.0       # weight of w_{i+1} in F_{i+1/2}
        cR_di = -Af[iF] / h + af[iF] / 2.0      # weight of w_i   in F_{i+1/2}
        cL_di = Af[iF - 1] / h + af[iF - 1] / 2.0   # weight of w_i in F_{i-1/2}
        cL_lo = -Af[iF - 1] / h + af[iF - 1] / 2.0  # weight of w_{i-1}
        up[iF] = cR_up / h - bn[iF] / (2 * h)
        di[iF] = (cR_di - cL_di) / h - an[iF]
        lo[iF] = -cL_lo / h + bn[iF] / (2 * h)
        # left end
        if left_robin:
            sig = float(co.sigma_rob(t, xs[:1, None])[0])
            psi = float(src.psi(t, xs[:1, None])[0])
            # half-cell balance: (F_{1/2} - F_b) / (h/2), F_b = sigma w0 + psi
            c_up = Af[0] / h + af[0] / 2.0
            c_di = -Af[0] / h + af[0] / 2.0
            up[0] = 2 * c_up / h - bn[0] / h
            di[0] = 2 * (c_di - sig) / h - an[0] + bn[0] / h
            g[0] += -2 * psi / h
        else:
            di[0] = 0.0
            up[0] = 0.0
            g[0] = 0.0
        # right end
        if right_robin:
            sig = float(co.sigma_rob(t, xs[-1:, None])[0])
            psi = float(src.psi(t, xs[-1:, None])[0])
            # n_in = -1 there: F_b = -(sigma w_N + psi)
            c_di = Af[-1] / h + af[-1] / 2.0
            c_lo = -Af[-1] / h + af[-1] / 2.0
            di[N] = 2 * (-c_di - sig) / h - an[N] - bn[N] / h
            lo[N] = -2 * c_lo / h + bn[N] / h
            g[N] += -2 * psi / h
        else:
            di[N] = 0.0
            lo[N] = 0.0
            g[N] = 0.0
        return lo, di, up, g

    def mask_at(t):
        if barrier is None:
            return None
        return xs >= barrier(t)

    u = np.empty((M + 1, N + 1))
    w = src.h(T, xcol).copy()
    m0 = mask_at(T)
    if not left_robin:
        w[0] = 0.0
    if not right_robin:
        w[N] = 0.0
    if m0 is not None:
        w[m0] = 0.0
    u[M] = w

    for step in range(M):
        t_old = T - step * k
        t_new = T - (step + 1) * k
        lo_o, di_o, up_o, g_o = operator(t_old)
        lo_n, di_n, up_n, g_n = operator(t_new)
        rhs = (w + (k / 2) * (lo_o * np.roll(w, 1) + di_o * w + up_o * np.roll(w, -1))
               + (k / 2) * (g_o + g_n))
        # implicit tridiagonal (I - k/2 Theta_new)
        ab = np.zeros((3, N + 1))
        ab[0, 1:] = -(k / 2) * up_n[:-1]
        ab[1, :] = 1.0 - (k / 2) * di_n
        ab[2, :-1] = -(k / 2) * lo_n[1:]
        mask = mask_at(t_new)
        fixed = np.zeros(N + 1, dtype=bool)
        if not left_robin:
            fixed[0] = True
        if not right_robin:
            fixed[N] = True
        if mask is not None:
            fixed |= mask
        if np.any(fixed):
            idx = np.where(fixed)[0]
            rhs[idx] = 0.0
            ab[1, idx] = 1.0
            up_idx = idx[idx < N]
            ab[0, up_idx + 1] = 0.0  # drop w_{i+1} coupling from fixed row i
            lo_idx = idx[idx > 0]
            ab[2, lo_idx - 1] = 0.0  # drop w_{i-1} coupling from fixed row i
        try:
            w = sla.solve_banded((1, 1), ab, rhs)
        except np.linalg.LinAlgError as exc:
            raise FDError(f"singular linear system at step {step}: {exc}") from None
        if np.any(fixed):
            w[fixed] = 0.0
        u[M - 1 - step] = w

    times = np.linspace(0.0, T, M + 1)
    return FDSolution(times=times, u=u, kind="line",
                      meta={"x_nodes": xs, "h": h, "k": k,
                            "left_robin": left_robin, "right_robin": right_robin})


# ---------------------------------------------------------------------------
# 2D polar solver
# ---------------------------------------------------------------------------

def _isotropic_alpha(problem: Problem):
    A = problem.coeffs.A
    dim = A.dim
    for i in range(dim):
        for j in range(dim):
            if i != j and not A.entry(i, j).is_zero:
                raise ProblemError("2D FD solver needs isotropic diffusion A = alpha*I")
    for i in range(1, dim):
        if (A.entry(i, i).expr - A.entry(0, 0).expr) != 0:
            raise ProblemError("2D FD solver needs isotropic diffusion A = alpha*I")
    if not (problem.coeffs.a_vec.is_zero and problem.coeffs.b_vec.is_zero):
        raise ProblemError("2D FD solver supports a_vec = b_vec = 0 only")
    return A.entry(0, 0)


def solve_backward_2d(problem: Problem, grid: FDGrid2D) -> FDSolution:
    """Crank-Nicolson on a cell-centered polar grid with per-level cavity masks."""
    dom = problem.domain
    base = dom.base
    if base.kind != "disk":
        raise FDError("solve_backward_2d needs a disk domain")
    alpha = _isotropic_alpha(problem)
    co = problem.coeffs
    src = problem.sources
    T = problem.T
    R = base.radius
    c0 = np.asarray(base.center)
    nr, nth, nt = grid.nr, grid.ntheta, grid.nt
    dr = R / nr
    dth = TWO_PI / nth
    k = T / nt

    r_cells = (np.arange(nr) + 0.5) * dr
    th_cells = (np.arange(nth) + 0.5) * dth
    RR, TT = np.meshgrid(r_cells, th_cells, indexing="ij")
    XX = c0[0] + RR * np.cos(TT)
    YY = c0[1] + RR * np.sin(TT)
    cells = np.stack([XX.ravel(), YY.ravel()], axis=-1)  # (nr*nth, 2)
    n_cells = nr * nth

    bpts = c0 + R * np.stack([np.cos(th_cells), np.sin(th_cells)], axis=-1)
    robin_cols = base.robin_mask(bpts, tol=0.0)

    band = grid.band_cells * dr
    penalty = 1.0e4 * max(1.0 / k, float(np.max(np.abs(alpha(0.0, cells)))) / dr**2)

    def cavity_fields(t):
        """(hard_mask, penalty_weight) per cell for the cavity at original time t."""
        c, rad = dom.cavity.at(t)
        if rad <= 0.0:
            return np.zeros(n_cells, dtype=bool), np.zeros(n_cells)
        xi = rad - np.linalg.norm(cells - c, axis=-1)  # >0 inside cavity
        hard = xi >= band
        s = np.clip((xi + band) / (2.0 * band), 0.0, 1.0)
        wgt = np.where(hard, 0.0, penalty * s * s * (3 - 2 * s))
        return hard, wgt

    # static operator caching: coefficients independent of t and cavity static
    static_coeffs = all(
        not any(s.name == "t" for s in e.expr.free_symbols)
        for e in (alpha, co.a_scal, co.sigma_rob, src.f, src.psi))
    static_cavity = (dom.cavity.is_empty
                     or (len(dom.cavity.times) == 1)
                     or (np.allclose(dom.cavity.centers, dom.cavity.centers[0])
                         and np.allclose(dom.cavity.radii, dom.cavity.radii[0])))
    static_op = static_coeffs and static_cavity

    def faces_alpha(t):
        # radial faces between cells i and i+1 at r=(i+1)dr, theta cells
        rf = (np.arange(1, nr)) * dr
        RF, TF = np.meshgrid(rf, th_cells, indexing="ij")
        pr = np.stack([c0[0] + RF * np.cos(TF), c0[1] + RF * np.sin(TF)], axis=-1)
        a_r = alpha(t, pr.reshape(-1, 2)).reshape(nr - 1, nth)
        # angular faces between cells j and j+1 at theta=(j+1)dth
        thf = (np.arange(nth) + 1.0) * dth
        RT, TT2 = np.meshgrid(r_cells, thf, indexing="ij")
        pt = np.stack([c0[0] + RT * np.cos(TT2), c0[1] + RT * np.sin(TT2)], axis=-1)
        a_t = alpha(t, pt.reshape(-1, 2)).reshape(nr, nth)
        # outer boundary face values at theta cells
        a_b = alpha(t, bpts)
        return a_r, a_t, a_b

    def assemble(t):
        """Theta (sparse) and affine g with d/dtau w = Theta w + g, plus masks."""
        hard, wgt = cavity_fields(t)
        a_r, a_t, a_b = faces_alpha(t)
        an = co.a_scal(t, cells)
        fn = src.f(t, cells)
        sig = co.sigma_rob(t, bpts)
        psi = src.psi(t, bpts)

        rows, colns, vals = [], [], []
        diag = np.zeros(n_cells)
        g = -fn.copy()

        def idx(i, j):
            return i * nth + (j % nth)

        # radial coupling
        for i in range(nr):
            ri = r_cells[i]
            cell_idx = idx(i, np.arange(nth))
            # inner face (between i-1 and i)
            if i > 0:
                rf = i * dr
                coef = a_r[i - 1] * rf / (dr * ri * dr)
                rows.extend(cell_idx)
                colns.extend(idx(i - 1, np.arange(nth)))
                vals.extend(coef)
                diag[cell_idx] -= coef
            # outer face (between i and i+1 or boundary)
            if i < nr - 1:
                rf = (i + 1) * dr
                coef = a_r[i] * rf / (dr * ri * dr)
                rows.extend(cell_idx)
                colns.extend(idx(i + 1, np.arange(nth)))
                vals.extend(coef)
                diag[cell_idx] -= coef
            else:
                # boundary closure
                Dr = 1.0 + sig * dr / (2.0 * a_b)
                robin = robin_cols
                # Robin columns: flux R*alpha u_r = -R (sigma w + psi)/Dr
                coefR = np.where(robin, -R * sig / (Dr * ri * dr), 0.0)
                gR = np.where(robin, -R * psi / (Dr * ri * dr), 0.0)
                # Dirichlet columns: flux = -2 alpha R w/dr
                coefD = np.where(robin, 0.0, -2.0 * a_b * R / (dr * ri * dr))
                diag[cell_idx] += coefR + coefD
                g[cell_idx] += gR
        # angular coupling
        for i in range(nr):
            ri = r_cells[i]
            cell_idx = idx(i, np.arange(nth))
            jp = (np.arange(nth) + 1) % nth
            jm = (np.arange(nth) - 1) % nth
            coef_p = a_t[i] / (dth * ri * ri * dth)           # face j+1/2
            coef_m = a_t[i][jm] / (dth * ri * ri * dth)       # face j-1/2
            rows.extend(cell_idx)
            colns.extend(idx(i, jp))
            vals.extend(coef_p)
            rows.extend(cell_idx)
            colns.extend(idx(i, jm))
            vals.extend(coef_m)
            diag[cell_idx] -= coef_p + coef_m
        diag -= an
        rows.extend(np.arange(n_cells))
        colns.extend(np.arange(n_cells))
        vals.extend(diag)
        Th = sps.csr_matrix((vals, (rows, colns)), shape=(n_cells, n_cells))
        # the stiff penalty stays out of Th: it is applied implicitly only,
        # Crank-Nicolson would ring on it
        return Th, g, hard, wgt

    u = np.empty((nt + 1, nr, nth))
    bvals = np.empty((nt + 1, nth))
    w = src.h(T, cells).copy()
    Th_new, g_new, hard_new, wgt_new = assemble(T)
    w[hard_new] = 0.0
    u[nt] = w.reshape(nr, nth)

    ident = sps.identity(n_cells, format="csr")
    lu = None

    def boundary_from(wvec, t):
        sig = co.sigma_rob(t, bpts)
        psi = src.psi(t, bpts)
        a_b = alpha(t, bpts)
        wall = wvec.reshape(nr, nth)[nr - 1]
        ub = (wall - dr * psi / (2 * a_b)) / (1.0 + sig * dr / (2 * a_b))
        return np.where(robin_cols, ub, 0.0)

    bvals[nt] = boundary_from(w, T)

    for step in range(nt):
        t_old = T - step * k
        t_new = T - (step + 1) * k
        Th_old, g_old, hard_old = Th_new, g_new, hard_new
        if not (static_op and step > 0):
            Th_new, g_new, hard_new, wgt_new = assemble(t_new)
        # Rannacher startup, and implicit Euler across mask changes: plain
        # Crank-Nicolson rings on the discontinuous data these introduce
        backward_euler = step < 2 or np.any(hard_new != hard_old)
        if backward_euler:
            rhs = w + k * g_new
            Msys = ident - k * Th_new + k * sps.diags(wgt_new)
        else:
            rhs = w + (k / 2) * (Th_old @ w) + (k / 2) * (g_old + g_new)
            Msys = ident - (k / 2) * Th_new + k * sps.diags(wgt_new)
        if np.any(hard_new):
            hidx = np.where(hard_new)[0]
            Msys = Msys.tolil()
            Msys[hidx, :] = 0.0
            Msys[hidx, hidx] = 1.0
            Msys = Msys.tocsr()
            rhs[hidx] = 0.0
        cache_key = backward_euler
        if not static_op or lu is None or lu[0] != cache_key:
            lu = (cache_key, spla.splu(Msys.tocsc()))
        w = lu[1].solve(rhs)
        if np.any(hard_new):
            w[hard_new] = 0.0
        u[nt - 1 - step] = w.reshape(nr, nth)
        bvals[nt - 1 - step] = boundary_from(w, t_new)

    times = np.linspace(0.0, T, nt + 1)
    return FDSolution(times=times, u=u, kind="polar",
                      meta={"center": c0, "radius": R, "r_cells": r_cells,
                            "ntheta": nth, "nr": nr, "dr": dr, "k": k,
                            "boundary_values": bvals,
                            "robin_cols": robin_cols})


def trace_on_observation(sol: FDSolution, obs, times):
    """Boundary trace samples, row-major in time.

    obs: for 'line' solutions, end label 'left'/'right'; for 'polar'
    solutions, an array of angles that must lie on the Robin part.
    """
    times = np.asarray(times, dtype=float)
    if sol.kind == "line":
        xs = sol.meta["x_nodes"]
        if obs == "left":
            if not sol.meta["left_robin"]:
                raise FDError("observation end is not on the Robin part")
            col = 0
        elif obs == "right":
            if not sol.meta["right_robin"]:
                raise FDError("observation end is not on the Robin part")
            col = len(xs) - 1
        else:
            raise FDError(f"unknown 1D observation spec {obs!r}")
        vals = np.interp(times, sol.times, sol.u[:, col])
        return vals[:, None]
    angles = np.asarray(obs, dtype=float)
    out = np.empty((len(times), len(angles)))
    for it, s in enumerate(times):
        out[it] = sol.boundary_value(s, angles)
    return out


def sup_norm(sol: FDSolution) -> float:
    return sol.sup_norm()
