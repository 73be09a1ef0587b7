"""Bayesian shape identification: posterior sampling and Hellinger stability.

The forward operator F composes the boundary-value solve (cavity parameters
to Robin-boundary trace) with a linear sampling map onto m design points in
[0,T] x Gamma-omega.  With iid Gaussian noise the likelihood is

    Psi(theta; y) = (2 pi sigma^2)^{-m/2} exp(-||y - F(theta)||^2 / (2 sigma^2)),

and the posterior is computed by self-normalized importance sampling from
the uniform prior over the admissible parameter box, with all weight
arithmetic in log space.  Two posteriors built on the same prior sample set
admit a Monte Carlo Hellinger distance, which the stability check compares
against the Lipschitz bound

    d_Hell <= exp(3 s^2/(4 sigma^2)) (s/sigma) (||y - y'||/sigma),
    s = sigma(y,y') <= max(||y||, ||y'||) + C_F,

where C_F bounds ||F|| over the admissible class (estimated by box sampling).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import fd as fd_mod
from .inverse import DomainParam, InverseError, ModelData, ObservationSpec
from .sde import philox_stream


class BayesError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseModel:
    sigma2: float

    def __post_init__(self):
        if self.sigma2 <= 0:
            raise BayesError("noise variance must be positive")

    @property
    def sigma(self):
        return math.sqrt(self.sigma2)


@dataclass(frozen=True)
class PriorBox:
    """Uniform prior over an axis-aligned parameter box."""

    bounds: tuple  # ((lo, hi), ...) per component

    @property
    def ndim(self):
        return len(self.bounds)

    def sample(self, n, seed):
        rng = philox_stream(seed, 424243)
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        return lo + (hi - lo) * rng.random((n, self.ndim))

    def contains(self, theta):
        return all(lo - 1e-12 <= v <= hi + 1e-12
                   for v, (lo, hi) in zip(theta, self.bounds))


class ForwardOp:
    """F = G2 o G1: cavity parameters -> trace -> R^m at fixed design points.

    The fd backend is deterministic; the mc backend freezes a dedicated seed
    so F is a fixed function of theta either way.
    """

    def __init__(self, builder, model: ModelData, design: ObservationSpec,
                 fd_grid=None, solver="fd", cfg=None, n_paths=20000,
                 prior: PriorBox = None):
        self.builder = builder
        self.model = model
        self.design = design
        self.fd_grid = fd_grid if fd_grid is not None else fd_mod.FDGrid2D()
        self.solver = solver
        self.cfg = cfg
        self.n_paths = n_paths
        self.prior = prior
        self.m = design.n_time * design.n_arc

    def __call__(self, theta):
        from .inverse import model_trace
        theta = np.asarray(theta, dtype=float)
        if self.prior is not None and not self.prior.contains(theta):
            raise BayesError(f"parameters {theta.tolist()} outside the "
                             "admissible box")
        param = self.builder(theta)
        tr = model_trace(param, self.model, self.design, solver=self.solver,
                         fd_grid=self.fd_grid, cfg=self.cfg,
                         n_paths=self.n_paths)
        return tr.reshape(self.m)

    def estimate_cf(self, prior: PriorBox, n_samples=1000, seed=7,
                    safety=1.1):
        """C_F as a safety factor times the max of ||F|| over prior samples."""
        thetas = prior.sample(n_samples, seed)
        best = 0.0
        for th in thetas:
            try:
                best = max(best, float(np.linalg.norm(self(th))))
            except (BayesError, InverseError):
                continue
        return safety * best


class TabulatedForwardOp:
    """One-parameter F interpolated componentwise over a theta grid.

    Tabulation makes dense posterior sampling and the quadrature oracle share
    the exact same forward map, at the cost of one solve per grid node.
    """

    def __init__(self, base_op: ForwardOp, theta_grid):
        self.theta_grid = np.asarray(theta_grid, dtype=float)
        if self.theta_grid.ndim != 1 or len(self.theta_grid) < 2:
            raise BayesError("tabulation needs a 1D grid of parameters")
        self.values = np.stack([base_op(np.array([t]))
                                for t in self.theta_grid])
        self.m = base_op.m

    def __call__(self, theta):
        t = float(np.atleast_1d(theta)[0])
        if t < self.theta_grid[0] - 1e-12 or t > self.theta_grid[-1] + 1e-12:
            raise BayesError(f"parameter {t} outside the tabulated range")
        out = np.empty(self.m)
        for j in range(self.m):
            out[j] = np.interp(t, self.theta_grid, self.values[:, j])
        return out

    def batch(self, thetas):
        thetas = np.asarray(thetas, dtype=float).reshape(-1)
        return np.stack([np.interp(thetas, self.theta_grid, self.values[:, j])
                         for j in range(self.m)], axis=-1)


def log_likelihood(theta, y, noise: NoiseModel, forward) -> float:
    y = np.asarray(y, dtype=float)
    r = y - forward(theta)
    m = len(y)
    return (-0.5 * m * math.log(2 * math.pi * noise.sigma2)
            - float(r @ r) / (2 * noise.sigma2))


def likelihood(theta, y, noise: NoiseModel, forward) -> float:
    """Gaussian likelihood Psi(theta; y)."""
    return math.exp(log_likelihood(theta, y, noise, forward))


@dataclass
class PosteriorEnsemble:
    samples: np.ndarray      # (n, ndim) prior draws
    log_psi: np.ndarray      # log Psi(theta_k; y), including the constant
    weights: np.ndarray      # self-normalized, sum to 1
    z_hat: float             # mean_k Psi(theta_k; y)
    ess: float
    seed: int
    y: np.ndarray

    @property
    def n_samples(self):
        return len(self.samples)

    def mean(self):
        return self.weights @ self.samples


def _forward_values(forward, thetas):
    if hasattr(forward, "batch"):
        return forward.batch(thetas)
    return np.stack([forward(th) for th in thetas])


def posterior(y, n_samples, prior: PriorBox, forward, noise: NoiseModel,
              seed=0, samples=None, fvals=None) -> PosteriorEnsemble:
    """Self-normalized importance sampling with the prior as proposal.

    Pass precomputed (samples, fvals) to build several posteriors on a shared
    sample set (required by the Hellinger estimator).
    """
    if n_samples < 100:
        raise BayesError("need at least 100 prior samples")
    y = np.asarray(y, dtype=float)
    if samples is None:
        samples = prior.sample(n_samples, seed)
    if fvals is None:
        fvals = _forward_values(forward, samples)
    if fvals.shape != (len(samples), len(y)):
        raise BayesError("forward-value matrix does not match samples/data")
    m = len(y)
    resid2 = np.sum((fvals - y[None, :]) ** 2, axis=-1)
    log_psi = (-0.5 * m * np.log(2 * np.pi * noise.sigma2)
               - resid2 / (2 * noise.sigma2))
    lse = logsumexp(log_psi)
    weights = np.exp(log_psi - lse)
    z_hat = float(np.exp(lse - np.log(len(samples))))
    ess = float(1.0 / np.sum(weights ** 2))
    if ess < 10:
        warnings.warn(f"degenerate posterior ensemble: ESS {ess:.2f} < 10",
                      stacklevel=2)
    return PosteriorEnsemble(samples=samples, log_psi=log_psi,
                             weights=weights, z_hat=z_hat, ess=ess,
                             seed=seed, y=y)


def hellinger(ens_a: PosteriorEnsemble, ens_b: PosteriorEnsemble) -> float:
    """Monte Carlo Hellinger distance of two posteriors on shared samples.

    d = sqrt( (1/2) mean_k ( sqrt(n w_k) - sqrt(n w'_k) )^2 ), since
    n w_k estimates the density ratio Psi_k / Z at theta_k.
    """
    if ens_a.samples is not ens_b.samples and not (
            ens_a.samples.shape == ens_b.samples.shape
            and np.array_equal(ens_a.samples, ens_b.samples)):
        raise BayesError("Hellinger distance requires a shared sample set")
    n = ens_a.n_samples
    diff = np.sqrt(n * ens_a.weights) - np.sqrt(n * ens_b.weights)
    return math.sqrt(0.5 * float(np.mean(diff ** 2)))


def hellinger_std_error(ens_a: PosteriorEnsemble, ens_b: PosteriorEnsemble,
                        n_splits=10) -> float:
    """Batch-split standard error of the Hellinger estimate."""
    n = ens_a.n_samples
    idx = np.array_split(np.arange(n), n_splits)
    vals = []
    for part in idx:
        wa = np.exp(ens_a.log_psi[part] - logsumexp(ens_a.log_psi[part]))
        wb = np.exp(ens_b.log_psi[part] - logsumexp(ens_b.log_psi[part]))
        diff = np.sqrt(len(part) * wa) - np.sqrt(len(part) * wb)
        vals.append(math.sqrt(0.5 * float(np.mean(diff ** 2))))
    return float(np.std(vals, ddof=1) / math.sqrt(n_splits))


def log_stability_bound(y, y_prime, noise: NoiseModel, c_f: float) -> float:
    """log of the Lipschitz bound, with sigma(y,y') <= max(||y||,||y'||) + C_F.

    Returned in log form because the exponential factor overflows for any
    realistically small noise level; -inf when y = y'.
    """
    y = np.asarray(y, dtype=float)
    y_prime = np.asarray(y_prime, dtype=float)
    gap = float(np.linalg.norm(y - y_prime))
    if gap == 0.0:
        return -math.inf
    s = max(float(np.linalg.norm(y)), float(np.linalg.norm(y_prime))) + float(c_f)
    sig = noise.sigma
    return float(3.0 * s * s / (4.0 * noise.sigma2)
                 + math.log(s / sig) + math.log(gap / sig))


def stability_bound(y, y_prime, noise: NoiseModel, c_f: float) -> float:
    """The Lipschitz bound itself; +inf when it overflows a float."""
    lb = log_stability_bound(y, y_prime, noise, c_f)
    if lb == -math.inf:
        return 0.0
    return math.exp(lb) if lb < 700.0 else math.inf


def stability_bound_check(y, y_prime, noise: NoiseModel,
                          ens_a: PosteriorEnsemble, ens_b: PosteriorEnsemble,
                          c_f: float) -> dict:
    """(d_hell, bound, pass) for one data pair on a shared ensemble."""
    d = hellinger(ens_a, ens_b)
    se = hellinger_std_error(ens_a, ens_b)
    bound = stability_bound(y, y_prime, noise, c_f)
    log_bound = log_stability_bound(y, y_prime, noise, c_f)
    passed = (d <= 3.0 * se) if bound == 0.0 else (
        math.inf if bound == math.inf else bound + 3.0 * se) >= d
    return {"d_hell": d, "bound": bound, "log_bound": log_bound,
            "std_error": se, "passed": bool(passed)}


def hellinger_quadrature(y, y_prime, noise: NoiseModel,
                         forward: TabulatedForwardOp, prior: PriorBox,
                         n_nodes=2001) -> float:
    """Deterministic 1-parameter oracle: trapezoid quadrature of the
    Hellinger integral over the prior interval."""
    (lo, hi), = prior.bounds
    ts = np.linspace(lo, hi, n_nodes)
    F = forward.batch(ts)
    m = F.shape[1]
    y = np.asarray(y, dtype=float)
    y_prime = np.asarray(y_prime, dtype=float)
    const = -0.5 * m * np.log(2 * np.pi * noise.sigma2)
    lp_a = const - np.sum((F - y) ** 2, axis=-1) / (2 * noise.sigma2)
    lp_b = const - np.sum((F - y_prime) ** 2, axis=-1) / (2 * noise.sigma2)
    w = np.full(n_nodes, 1.0 / (n_nodes - 1))
    w[0] *= 0.5
    w[-1] *= 0.5

    def log_z(lp):
        return logsumexp(lp, b=w)

    ratio_a = np.exp(lp_a - log_z(lp_a))
    ratio_b = np.exp(lp_b - log_z(lp_b))
    integrand = (np.sqrt(ratio_a) - np.sqrt(ratio_b)) ** 2
    return math.sqrt(0.5 * float(np.sum(w * integrand)))


# -- artifact emission -------------------------------------------------------

def ensemble_to_csv(ens: PosteriorEnsemble, path):
    import csv
    ndim = ens.samples.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"theta{i+1}" for i in range(ndim)]
                   + ["log_weight", "weight"])
        lw = ens.log_psi - logsumexp(ens.log_psi)
        for k in range(ens.n_samples):
            w.writerow([repr(float(v)) for v in ens.samples[k]]
                       + [repr(float(lw[k])), repr(float(ens.weights[k]))])


def stability_report_to_json(rows, path, meta=None):
    payload = {"pairs": rows, "meta": meta or {}}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
