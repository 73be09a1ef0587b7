import math

import numpy as np
import pytest

from reflectmc.bayes import (BayesError, ForwardOp, NoiseModel, PriorBox,
                             TabulatedForwardOp, ensemble_to_csv, hellinger,
                             hellinger_quadrature, hellinger_std_error,
                             likelihood, log_likelihood, log_stability_bound,
                             posterior, stability_bound,
                             stability_bound_check, stability_report_to_json)
from reflectmc.fd import FDGrid2D
from reflectmc.geometry import FixedDomain
from reflectmc.inverse import DomainParam, ModelData, ObservationSpec
from reflectmc.problem import CoefficientSet, SourceData


@pytest.fixture(scope="module")
def setup():
    base = FixedDomain(kind="disk", robin_arcs=((-np.pi, np.pi),))
    model = ModelData(coeffs=CoefficientSet.parse(2, A=0.5),
                      sources=SourceData.parse(2, h="1"), T=1.0)
    design = ObservationSpec(arc=(-np.pi / 4, np.pi / 4), n_arc=3, n_time=3)
    prior = PriorBox(bounds=((0.2, 0.5),))

    def builder(vec):
        return DomainParam.static(base, 1.0, (0.0, 0.0), float(vec[0]))

    op = ForwardOp(builder, model, design,
                   fd_grid=FDGrid2D(nr=16, ntheta=24, nt=20), prior=prior)
    tab = TabulatedForwardOp(op, np.linspace(0.2, 0.5, 13))
    return base, model, design, prior, op, tab


def test_forward_shape_and_determinism(setup):
    _, _, design, _, op, _ = setup
    v1 = op(np.array([0.3]))
    v2 = op(np.array([0.3]))
    assert v1.shape == (design.n_time * design.n_arc,)
    assert np.array_equal(v1, v2)


def test_forward_rejects_outside_box(setup):
    *_, op, _ = setup
    with pytest.raises(BayesError):
        op(np.array([0.9]))


def test_forward_continuity_modulus(setup):
    *_, tab = setup
    ref = tab(np.array([0.35]))
    for delta in (0.02, 0.01, 0.005):
        gap = np.linalg.norm(tab(np.array([0.35 + delta])) - ref)
        assert gap < 1.0
    gaps = [np.linalg.norm(tab(np.array([0.35 + d])) - ref)
            for d in (0.02, 0.01, 0.005)]
    assert gaps[0] >= gaps[1] >= gaps[2]


def test_likelihood_values():
    noise = NoiseModel(sigma2=0.25)
    m = 4
    y = np.arange(4, dtype=float)
    fwd = lambda theta: y  # residual zero
    base_val = likelihood(None, y, noise, fwd)
    assert base_val == pytest.approx((2 * math.pi * 0.25) ** (-m / 2))
    fwd2 = lambda theta: y + math.sqrt(2 * 0.25 / m)  # ||r||^2 = 2 sigma^2
    assert likelihood(None, y, noise, fwd2) == pytest.approx(
        base_val * math.exp(-1.0))


def test_likelihood_normalizes_in_y():
    # m = 1: Psi(theta; .) is the N(F(theta), sigma^2) density, integral 1
    from scipy.integrate import quad
    from scipy.stats import norm
    noise = NoiseModel(sigma2=0.3)
    f0 = 0.7
    fwd = lambda th: np.array([f0])
    assert likelihood(None, np.array([1.1]), noise, fwd) == pytest.approx(
        norm.pdf(1.1, loc=f0, scale=noise.sigma))
    total = quad(lambda y: likelihood(None, np.array([y]), noise, fwd),
                 f0 - 12 * noise.sigma, f0 + 12 * noise.sigma)[0]
    assert total == pytest.approx(1.0, abs=1e-6)


def test_posterior_flat_likelihood_uniform_weights(setup):
    _, _, _, prior, _, tab = setup
    noise = NoiseModel(sigma2=(1e6) ** 2)
    y = tab(np.array([0.35]))
    ens = posterior(y, 500, prior, tab, noise, seed=3)
    assert np.all(np.abs(ens.weights - 1.0 / 500) <= 1e-6)
    assert ens.z_hat > 0


def test_posterior_recovers_parameter(setup):
    _, _, _, prior, _, tab = setup
    noise = NoiseModel(sigma2=1e-6)
    y = tab(np.array([0.35]))
    ens = posterior(y, 5000, prior, tab, noise, seed=3)
    assert abs(float(ens.mean()[0]) - 0.35) < 0.01
    assert abs(float(np.sum(ens.weights)) - 1.0) < 1e-12


def test_posterior_requires_min_samples(setup):
    _, _, _, prior, _, tab = setup
    with pytest.raises(BayesError):
        posterior(np.zeros(9), 50, prior, tab, NoiseModel(sigma2=1.0))


def test_posterior_log_space_no_overflow(setup):
    # residuals of order ||y - F||^2 / sigma^2 = 1e6 stay finite in log space
    _, _, _, prior, _, tab = setup
    noise = NoiseModel(sigma2=1e-6)
    y = tab(np.array([0.35])) + 1.0
    with pytest.warns(UserWarning, match="ESS"):
        ens = posterior(y, 200, prior, tab, noise, seed=3)
    assert np.all(np.isfinite(ens.weights))
    assert np.isfinite(ens.z_hat)


def test_hellinger_self_zero_and_symmetry(setup):
    _, _, _, prior, _, tab = setup
    noise = NoiseModel(sigma2=1e-2)
    samples = prior.sample(400, 5)
    fvals = np.stack([tab(th) for th in samples])
    y1 = tab(np.array([0.3]))
    y2 = tab(np.array([0.4]))
    e1 = posterior(y1, 400, prior, tab, noise, samples=samples, fvals=fvals)
    e2 = posterior(y2, 400, prior, tab, noise, samples=samples, fvals=fvals)
    assert hellinger(e1, e1) == 0.0
    assert hellinger(e1, e2) == hellinger(e2, e1)
    se = hellinger_std_error(e1, e2)
    assert hellinger(e1, e2) <= 1.0 + 3 * se


def test_hellinger_requires_shared_samples(setup):
    _, _, _, prior, _, tab = setup
    noise = NoiseModel(sigma2=1e-2)
    y = tab(np.array([0.3]))
    e1 = posterior(y, 200, prior, tab, noise, seed=1)
    e2 = posterior(y, 200, prior, tab, noise, seed=2)
    with pytest.raises(BayesError):
        hellinger(e1, e2)


def test_hellinger_quadrature_cross_check(setup):
    _, _, _, prior, _, tab = setup
    noise = NoiseModel(sigma2=1e-2)
    y1 = tab(np.array([0.3]))
    y2 = tab(np.array([0.33]))
    samples = prior.sample(20000, 5)
    fvals = tab.batch(samples)
    e1 = posterior(y1, 20000, prior, tab, noise, samples=samples, fvals=fvals)
    e2 = posterior(y2, 20000, prior, tab, noise, samples=samples, fvals=fvals)
    d_mc = hellinger(e1, e2)
    d_qu = hellinger_quadrature(y1, y2, noise, tab, prior)
    assert abs(d_mc - d_qu) / d_qu < 0.02


def test_stability_bound_monotone_in_gap():
    noise = NoiseModel(sigma2=1.0)
    y = np.zeros(3)
    bounds = [log_stability_bound(y, y + g, noise, c_f=1.0)
              for g in (0.1, 0.2, 0.4)]
    assert bounds[0] < bounds[1] < bounds[2]


def test_stability_bound_self_pair(setup):
    _, _, _, prior, _, tab = setup
    noise = NoiseModel(sigma2=1e-2)
    y = tab(np.array([0.3]))
    samples = prior.sample(400, 5)
    fvals = tab.batch(samples)
    ens = posterior(y, 400, prior, tab, noise, samples=samples, fvals=fvals)
    rep = stability_bound_check(y, y, noise, ens, ens, c_f=1.0)
    assert rep["d_hell"] == 0.0 and rep["bound"] == 0.0 and rep["passed"]
    assert log_stability_bound(y, y, noise, 1.0) == -math.inf
    assert stability_bound(y, y, noise, 1.0) == 0.0


def test_estimate_cf_positive(setup):
    _, _, _, prior, op, _ = setup
    c_f = op.estimate_cf(prior, n_samples=5)
    assert c_f > 0


def test_artifact_emission(tmp_path, setup):
    _, _, _, prior, _, tab = setup
    noise = NoiseModel(sigma2=1e-2)
    y = tab(np.array([0.3]))
    ens = posterior(y, 200, prior, tab, noise, seed=1)
    p = tmp_path / "ens.csv"
    ensemble_to_csv(ens, p)
    lines = p.read_text().strip().splitlines()
    assert lines[0] == "theta1,log_weight,weight"
    assert len(lines) == 201
    jp = tmp_path / "stab.json"
    stability_report_to_json([{"d_hell": 0.0, "bound": 0.0, "passed": True}],
                             jp, meta={"sigma2": 1e-2})
    import json
    payload = json.loads(jp.read_text())
    assert payload["pairs"][0]["passed"] is True
