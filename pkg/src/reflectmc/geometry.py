"""Fixed domain, boundary dissection, and the time-varying domain with a moving cavity.

The fixed domain Omega is an interval, a disk, or a ball, so signed distances,
inward normals, and boundary projections are closed-form.  The Robin part of
the boundary is a union of arcs (disk), polar-angle bands (ball), or endpoints
(interval); the fixed Dirichlet part is the complement and Pi is the common
border of the two.  The time-varying domain D(t) removes a single ball cavity
with piecewise-linear keyframed center and radius; the cavity's lateral surface
is the moving Dirichlet part.

All geometry values are immutable after construction and safe for concurrent
reads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.spatial import cKDTree

TWO_PI = 2.0 * math.pi


class GeometryError(ValueError):
    pass


class BoundaryClass(Enum):
    ROBIN = "robin"
    DIRICHLET_FIXED = "dirichlet_fixed"
    PI = "pi"
    INTERIOR = "interior"


def _norm_angle(a):
    return np.mod(a, TWO_PI)


def _arc_contains(theta, lo, hi, tol=0.0):
    """Membership of angle theta in the closed arc [lo, hi] (may wrap past 2*pi)."""
    theta = _norm_angle(theta)
    lo_n = _norm_angle(lo)
    span = _norm_angle(hi - lo) if not np.isclose(hi - lo, TWO_PI) else TWO_PI
    rel = _norm_angle(theta - lo_n)
    return (rel <= span + tol) | (rel >= TWO_PI - tol)


def _ang_dist(a, b):
    d = np.abs(_norm_angle(a) - _norm_angle(b))
    return np.minimum(d, TWO_PI - d)


@dataclass(frozen=True)
class FixedDomain:
    """Fixed smooth domain Omega with its Robin/Dirichlet boundary dissection.

    kind: 'interval' | 'disk' | 'ball'
    interval params: a, b; robin_ends subset of {'left','right'}
    disk params: center (2,), radius; robin_arcs list of (lo, hi) in radians
    ball params: center (3,), radius; robin_bands list of (lo, hi) polar angles in [0, pi]
    """

    kind: str
    a: float = 0.0
    b: float = 1.0
    center: tuple = (0.0, 0.0)
    radius: float = 1.0
    robin_ends: frozenset = frozenset()
    robin_arcs: tuple = ()
    robin_bands: tuple = ()
    tubular_width: float = 0.25
    tol_pi: float = 1e-9

    def __post_init__(self):
        if self.kind not in ("interval", "disk", "ball"):
            raise GeometryError(f"unknown shape {self.kind!r}")
        if self.kind == "interval":
            if not self.b > self.a:
                raise GeometryError("interval needs b > a")
            bad = set(self.robin_ends) - {"left", "right"}
            if bad:
                raise GeometryError(f"unknown interval ends {bad}")
        else:
            if self.radius <= 0:
                raise GeometryError("radius must be positive")
            want = 2 if self.kind == "disk" else 3
            if len(self.center) != want:
                raise GeometryError(f"{self.kind} center must have {want} components")
        if self.tubular_width <= 0:
            raise GeometryError("tubular_width must be positive")

    @property
    def dim(self) -> int:
        return {"interval": 1, "disk": 2, "ball": 3}[self.kind]

    @property
    def dirichlet_ends(self) -> frozenset:
        return frozenset({"left", "right"}) - self.robin_ends

    # -- signed distance / normals ------------------------------------------

    def signed_distance(self, x):
        """phi_Omega, positive inside, vectorized over points of shape (..., dim)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind == "interval":
            return np.minimum(x[..., 0] - self.a, self.b - x[..., 0])
        rho = np.linalg.norm(x - np.asarray(self.center), axis=-1)
        return self.radius - rho

    def signed_distance_and_normal(self, x):
        """(phi, n_in) with n_in the inward unit normal of the nearest Gamma point.

        Raises GeometryError if x lies outside deeper than the tubular collar.
        """
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x2 = np.atleast_2d(x)
        phi = self.signed_distance(x2)
        if np.any(phi < -self.tubular_width):
            raise GeometryError("point outside the boundary collar; shrink the step")
        if self.kind == "interval":
            near_left = (x2[..., 0] - self.a) <= (self.b - x2[..., 0])
            n = np.where(near_left[..., None], 1.0, -1.0)
        else:
            c = np.asarray(self.center)
            v = x2 - c
            rho = np.linalg.norm(v, axis=-1, keepdims=True)
            # at the exact center the nearest-point normal is ill-defined; pick e1
            e1 = np.zeros(self.dim)
            e1[0] = 1.0
            n = np.where(rho > 1e-300, -v / np.maximum(rho, 1e-300), -e1)
        if single:
            return float(phi[0]), n[0]
        return phi, n

    def boundary_projection(self, x):
        """Nearest point on Gamma (vectorized)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind == "interval":
            near_left = (x[..., 0] - self.a) <= (self.b - x[..., 0])
            return np.where(near_left[..., None], self.a, self.b)
        c = np.asarray(self.center)
        v = x - c
        rho = np.linalg.norm(v, axis=-1, keepdims=True)
        u = np.where(rho > 1e-300, v / np.maximum(rho, 1e-300), 0.0)
        return c + self.radius * u

    # -- dissection ----------------------------------------------------------

    def _boundary_param(self, x):
        """Angular (disk), polar-angle (ball), or end-label parameter of boundary points."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        c = np.asarray(self.center)
        if self.kind == "disk":
            v = x - c
            return np.arctan2(v[..., 1], v[..., 0])
        if self.kind == "ball":
            v = x - c
            rho = np.maximum(np.linalg.norm(v, axis=-1), 1e-300)
            return np.arccos(np.clip(v[..., 2] / rho, -1.0, 1.0))
        raise GeometryError("interval boundary has no continuous parameter")

    def pi_params(self):
        """Dissection-border parameters (angles for disk, polar angles for ball)."""
        if self.kind == "interval":
            return np.array([])
        arcs = self.robin_arcs if self.kind == "disk" else self.robin_bands
        pts = []
        for lo, hi in arcs:
            if self.kind == "disk" and np.isclose(_norm_angle(hi - lo), 0.0) and hi != lo:
                continue  # full-circle Robin arc has no border
            for p in (lo, hi):
                if self.kind == "ball" and (p <= 0.0 or p >= math.pi):
                    continue  # poles are not dissection borders
                pts.append(p)
        return np.array(pts)

    def dist_to_pi(self, x):
        """Euclidean distance from points to the Pi set (inf when Pi is empty)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        params = self.pi_params()
        if params.size == 0:
            return np.full(x.shape[:-1], np.inf)
        c = np.asarray(self.center)
        v = x - c
        rho = np.linalg.norm(v, axis=-1)
        if self.kind == "disk":
            theta = np.arctan2(v[..., 1], v[..., 0])
            d2 = np.min(
                [rho**2 + self.radius**2
                 - 2 * rho * self.radius * np.cos(theta - p) for p in params],
                axis=0,
            )
            return np.sqrt(np.maximum(d2, 0.0))
        psi = np.arccos(np.clip(v[..., 2] / np.maximum(rho, 1e-300), -1, 1))
        d2 = np.min(
            [rho**2 + self.radius**2
             - 2 * rho * self.radius * np.cos(psi - p) for p in params],
            axis=0,
        )
        return np.sqrt(np.maximum(d2, 0.0))

    def robin_mask(self, x, tol=None):
        """True where the boundary point x lies on the (open) Robin part Gamma'."""
        tol = self.tol_pi if tol is None else tol
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind == "interval":
            near_left = (x[..., 0] - self.a) <= (self.b - x[..., 0])
            left_ok = "left" in self.robin_ends
            right_ok = "right" in self.robin_ends
            return np.where(near_left, left_ok, right_ok)
        param = self._boundary_param(x)
        arcs = self.robin_arcs if self.kind == "disk" else self.robin_bands
        mask = np.zeros(param.shape, dtype=bool)
        for lo, hi in arcs:
            if self.kind == "disk":
                mask |= _arc_contains(param, lo, hi)
            else:
                mask |= (param >= lo) & (param <= hi)
        # ties near Pi resolve toward Pi, i.e. out of the open Robin part
        near_pi = self.dist_to_pi(x) <= tol * max(1.0, self.radius)
        return mask & ~near_pi

    def classify_boundary(self, x):
        """BoundaryClass of a point known to lie on Gamma."""
        x = np.asarray(x, dtype=float)
        d_pi = float(self.dist_to_pi(x)[0]) if self.kind != "interval" else np.inf
        if d_pi <= self.tol_pi * max(1.0, getattr(self, "radius", 1.0)):
            return BoundaryClass.PI
        if bool(np.atleast_1d(self.robin_mask(x))[0]):
            return BoundaryClass.ROBIN
        return BoundaryClass.DIRICHLET_FIXED

    def sample_boundary(self, n, part="all"):
        """n sample points on Gamma ('all'), on Gamma'' ('dirichlet'), or Gamma' ('robin')."""
        if self.kind == "interval":
            pts = []
            if part in ("all",):
                pts = [[self.a], [self.b]]
            else:
                ends = self.robin_ends if part == "robin" else self.dirichlet_ends
                if "left" in ends:
                    pts.append([self.a])
                if "right" in ends:
                    pts.append([self.b])
            return np.array(pts, dtype=float).reshape(-1, 1)
        c = np.asarray(self.center)
        if self.kind == "disk":
            theta = np.linspace(0, TWO_PI, n, endpoint=False)
            pts = c + self.radius * np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        else:
            # Fibonacci sphere
            i = np.arange(n)
            z = 1 - 2 * (i + 0.5) / n
            phi_g = i * math.pi * (3 - math.sqrt(5))
            s = np.sqrt(np.maximum(1 - z**2, 0))
            pts = c + self.radius * np.stack(
                [s * np.cos(phi_g), s * np.sin(phi_g), z], axis=-1)
        if part == "all":
            return pts
        mask = self.robin_mask(pts)
        return pts[mask] if part == "robin" else pts[~mask]


@dataclass(frozen=True)
class Cavity:
    """Piecewise-linear keyframed ball cavity K(t)."""

    times: np.ndarray
    centers: np.ndarray  # (k, dim)
    radii: np.ndarray

    @classmethod
    def from_keyframes(cls, keyframes, dim):
        arr = np.asarray(keyframes, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != dim + 2:
            raise GeometryError(
                f"cavity keyframes must be rows (t, c1..c{dim}, r)")
        order = np.argsort(arr[:, 0])
        arr = arr[order]
        if np.any(arr[:, -1] < 0):
            raise GeometryError("cavity radius must be nonnegative")
        return cls(times=arr[:, 0], centers=arr[:, 1:-1], radii=arr[:, -1])

    @classmethod
    def none(cls, dim):
        return cls(times=np.array([0.0]), centers=np.zeros((1, dim)),
                   radii=np.array([0.0]))

    @property
    def is_empty(self) -> bool:
        return bool(np.all(self.radii == 0.0))

    def at(self, t):
        """(center, radius) at time t, clamped to the keyframe range."""
        c = np.array([np.interp(t, self.times, self.centers[:, i])
                      for i in range(self.centers.shape[1])])
        r = float(np.interp(t, self.times, self.radii))
        return c, r

    def lipschitz_constants(self):
        if len(self.times) < 2:
            return 0.0, 0.0
        dt = np.diff(self.times)
        dt = np.where(dt > 0, dt, np.inf)
        lc = np.max(np.linalg.norm(np.diff(self.centers, axis=0), axis=-1) / dt)
        lr = np.max(np.abs(np.diff(self.radii)) / dt)
        return float(lc), float(lr)


@dataclass(frozen=True)
class TimeVaryingDomain:
    """D(t) = Omega minus a keyframed ball cavity; Dirichlet parts Sigma1, Sigma2."""

    base: FixedDomain
    cavity: Cavity
    horizon: float
    margin: float = 0.05
    _n_check: int = field(default=64, repr=False)

    @classmethod
    def build(cls, base, keyframes=None, horizon=1.0, margin=0.05):
        cavity = (Cavity.from_keyframes(keyframes, base.dim)
                  if keyframes is not None else Cavity.none(base.dim))
        dom = cls(base=base, cavity=cavity, horizon=horizon, margin=margin)
        dom._validate()
        return dom

    def _validate(self):
        if self.cavity.is_empty:
            return
        if self.base.dim == 1:
            raise GeometryError(
                "an interior cavity disconnects a 1D domain; use r = 0")
        for t in np.linspace(0.0, self.horizon, self._n_check):
            c, r = self.cavity.at(t)
            gap = float(self.base.signed_distance(c[None, :])[0]) - r
            if gap < self.margin:
                raise GeometryError(
                    f"cavity too close to Gamma at t={t:.4g}: clearance "
                    f"{gap:.4g} < margin {self.margin:.4g}")

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def has_pi(self) -> bool:
        return self.base.pi_params().size > 0

    def cavity_at(self, t):
        return self.cavity.at(t)

    def has_fixed_dirichlet(self) -> bool:
        if self.base.kind == "interval":
            return len(self.base.dirichlet_ends) > 0
        return len(self.base.sample_boundary(512, part="dirichlet")) > 0

    def inside(self, t, x):
        """Strict membership x in D(t) (boundary points count as outside)."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x2 = np.atleast_2d(x)
        ok = self.base.signed_distance(x2) > 0
        if not self.cavity.is_empty:
            c, r = self.cavity.at(t)
            if r > 0:
                ok &= np.linalg.norm(x2 - c, axis=-1) > r
        return bool(ok[0]) if single else ok

    def dist_to_dirichlet(self, t, x):
        """Spatial Euclidean distance from x to Sigma-bar(t) = Gamma'' + dK(t)."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x2 = np.atleast_2d(x)
        d = np.full(x2.shape[:-1], np.inf)
        base = self.base
        if base.kind == "interval":
            for end, pos in (("left", base.a), ("right", base.b)):
                if end in base.dirichlet_ends:
                    d = np.minimum(d, np.abs(x2[..., 0] - pos))
        else:
            c0 = np.asarray(base.center)
            v = x2 - c0
            rho = np.linalg.norm(v, axis=-1)
            arcs = base.robin_arcs if base.kind == "disk" else base.robin_bands
            param = base._boundary_param(x2)
            on_robin = np.zeros(param.shape, dtype=bool)
            for lo, hi in arcs:
                if base.kind == "disk":
                    on_robin |= _arc_contains(param, lo, hi)
                else:
                    on_robin |= (param >= lo) & (param <= hi)
            # radially aligned distance where the angular position is Dirichlet
            d = np.where(~on_robin, np.abs(base.radius - rho), d)
            # distance to the border points/rings of the Dirichlet part
            d_pi = base.dist_to_pi(x2)
            has_dirichlet = self.has_fixed_dirichlet()
            if has_dirichlet and base.pi_params().size:
                d = np.minimum(d, d_pi)
            if base.kind == "ball":
                # Dirichlet bands may include the poles
                for pole in (0.0, math.pi):
                    in_robin_pole = any(lo <= pole <= hi for lo, hi in arcs)
                    if not in_robin_pole and has_dirichlet:
                        psi = base._boundary_param(x2)
                        dd = np.sqrt(np.maximum(
                            rho**2 + base.radius**2
                            - 2 * rho * base.radius * np.cos(psi - pole), 0))
                        d = np.minimum(d, dd)
        if not self.cavity.is_empty:
            c, r = self.cavity.at(t)
            if r > 0:
                d = np.minimum(d, np.abs(np.linalg.norm(x2 - c, axis=-1) - r))
        return float(d[0]) if single else d

    def sample_dirichlet_spacetime(self, n_space=256, n_time=128):
        """Dense (t, x) samples of the closed Dirichlet part Sigma-bar."""
        pts = []
        ts = np.linspace(0.0, self.horizon, n_time)
        fixed = (self.base.sample_boundary(n_space, part="dirichlet")
                 if self.base.kind != "interval"
                 else self.base.sample_boundary(n_space, part="dirichlet"))
        for t in ts:
            if len(fixed):
                pts.append(np.column_stack([np.full(len(fixed), t), fixed]))
            if not self.cavity.is_empty:
                c, r = self.cavity.at(t)
                if r > 0:
                    if self.dim == 2:
                        th = np.linspace(0, TWO_PI, n_space, endpoint=False)
                        ring = c + r * np.stack([np.cos(th), np.sin(th)], axis=-1)
                    else:
                        i = np.arange(n_space)
                        z = 1 - 2 * (i + 0.5) / n_space
                        ph = i * math.pi * (3 - math.sqrt(5))
                        s = np.sqrt(np.maximum(1 - z**2, 0))
                        ring = c + r * np.stack(
                            [s * np.cos(ph), s * np.sin(ph), z], axis=-1)
                    pts.append(np.column_stack([np.full(n_space, t), ring]))
        if not pts:
            return np.empty((0, 1 + self.dim))
        return np.concatenate(pts, axis=0)


def classify_point(domain: TimeVaryingDomain, t, x, tol_boundary=1e-9) -> BoundaryClass:
    """Partition-consistent class of a point of Omega-bar at time t."""
    x = np.asarray(x, dtype=float)
    base = domain.base
    phi = float(base.signed_distance(x[None, :])[0])
    scale = max(1.0, getattr(base, "radius", 1.0), abs(base.b - base.a)
                if base.kind == "interval" else 1.0)
    if phi < -tol_boundary * scale:
        raise GeometryError(f"point {x} lies outside Omega-bar")
    if phi > tol_boundary * scale:
        return BoundaryClass.INTERIOR
    return base.classify_boundary(x)


def hausdorff_distance(dom_a: TimeVaryingDomain, dom_b: TimeVaryingDomain,
                       n_space=256, n_time=128) -> float:
    """Symmetric Hausdorff distance between dense samplings of the two
    closed space-time Dirichlet parts; error is on the order of the sampling
    resolution."""
    pa = dom_a.sample_dirichlet_spacetime(n_space, n_time)
    pb = dom_b.sample_dirichlet_spacetime(n_space, n_time)
    if len(pa) == 0 or len(pb) == 0:
        raise GeometryError("Hausdorff distance needs nonempty Dirichlet parts")
    ta = cKDTree(pa)
    tb = cKDTree(pb)
    d_ab = np.max(tb.query(pa)[0])
    d_ba = np.max(ta.query(pb)[0])
    return float(max(d_ab, d_ba))
