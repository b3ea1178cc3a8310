import math

import numpy as np
import pytest
from scipy import stats
from scipy.special import gammaln

from saddlemax.errors import NoSaddlepoint, NotSupported, QuadratureNonpositive, TailNotDecayed
from saddlemax.likelihoods import (
    ApproximationKind,
    Observation,
    QuadratureConfig,
    QuadratureScheme,
    exact_p_factor,
    grad_log_likelihood,
    log_likelihood,
    log_lstar0,
)
from saddlemax.model_zoo import (
    GammaModel,
    LinearMapModel,
    NormalModel,
    NormalWithSquareModel,
    PoissonModel,
)

KINDS = list(ApproximationKind)


def test_kind_parsing():
    assert ApproximationKind.parse("Saddlepoint") is ApproximationKind.SADDLEPOINT
    assert ApproximationKind.parse("normal_approx") is ApproximationKind.NORMAL_APPROX
    with pytest.raises(ValueError):
        ApproximationKind.parse("laplace")


def test_observation_roundtrip():
    obs = Observation.from_x([6.0, 3.0], 3)
    np.testing.assert_allclose(obs.y, [2.0, 1.0])
    np.testing.assert_allclose(obs.x, [6.0, 3.0])
    with pytest.raises(ValueError):
        Observation([1.0], 0)


def test_lstar_values():
    assert log_lstar0(GammaModel(), [2.0, 1.0], [0.0]) == 0.0
    assert log_lstar0(PoissonModel(), [3.0], [math.log(5 / 3)]) == pytest.approx(-0.554128, abs=1e-6)
    assert log_lstar0(GammaModel(), [2.0, 1.0], [0.5]) == pytest.approx(-0.613706, abs=1e-6)


def test_poisson_totals():
    obs = Observation.from_x([5], 1)
    spa = log_likelihood(PoissonModel(), [3.0], obs, "spa").total
    exact = log_likelihood(PoissonModel(), [3.0], obs, "exact").total
    assert spa == pytest.approx(-3 + 5 * math.log(3) + 5 - 5 * math.log(5) - 0.5 * math.log(10 * math.pi), abs=1e-12)
    assert exact == pytest.approx(stats.poisson.logpmf(5, 3.0), abs=1e-12)
    assert math.exp(spa - exact) == pytest.approx(120 / (math.sqrt(10 * math.pi) * (5 / math.e) ** 5), rel=1e-10)


def test_factor_identity():
    obs = Observation.from_x([5], 1)
    L = log_likelihood(PoissonModel(), [3.0], obs, "exact")
    assert L.total == L.log_lstar + L.log_p
    p = exact_p_factor(PoissonModel(), [3.0], L.saddle.s_hat, 1)
    assert p == pytest.approx(math.exp(stats.poisson.logpmf(5, 3.0) + 0.554128), rel=1e-5)
    assert L.total == pytest.approx(L.log_lstar + math.log(p), abs=1e-10)


def test_p_factor_values():
    assert exact_p_factor(NormalModel.location([[1.0]]), [0.0], [0.7], 4) == pytest.approx(
        1 / math.sqrt(8 * math.pi), rel=1e-10)
    ratio = exact_p_factor(GammaModel(), [2.0, 1.0], [0.5], 64) / (1 / math.sqrt(2 * math.pi * 64 * 8))
    assert abs(ratio - 1) <= 0.01


def test_gamma_exact_with_algebraic_tails():
    # n*alpha = 2: the inversion integrand decays like |phi|^-2
    g = GammaModel()
    for n, a in [(1, 2.0), (2, 1.0), (1, 3.0)]:
        obs = Observation.from_x([1.7], n)
        L = log_likelihood(g, [a, 1.3], obs, "exact")
        assert L.total == pytest.approx(stats.gamma.logpdf(1.7, n * a, scale=1 / 1.3), abs=1e-9)


def test_tail_failure_is_reported():
    with pytest.raises(TailNotDecayed):
        log_likelihood(NormalWithSquareModel(), [0.4, 1.3], Observation([0.5, 1.9], 6), "exact")
    quad = QuadratureConfig(oscillatory_fallback=False, max_doublings=0)
    with pytest.raises(TailNotDecayed):
        log_likelihood(GammaModel(), [1.0, 1.0], Observation([1.0], 2), "exact", quad)


def test_quadrature_config_validation():
    with pytest.raises(ValueError):
        QuadratureConfig(nodes_per_dim=200)
    with pytest.raises(NotSupported):
        QuadratureConfig(scheme=QuadratureScheme.TANH_SINH)


def test_nonpositive_and_complex_residue_are_caught():
    from saddlemax import likelihoods as lk

    quad = QuadratureConfig()
    phi = np.zeros((3, 1))
    with pytest.raises(QuadratureNonpositive):
        lk._finish(None, None, 1.0, phi, None, np.array([0.5, -2.0, 0.5], complex), 1.0, None, False, quad, "t")
    with pytest.raises(QuadratureNonpositive):
        lk._finish(None, None, 1.0, phi, None, np.array([1.0, 1.0 + 1e-3j, 1.0]), 1.0, None, False, quad, "t")


def test_normal_exactness_random():
    rng = np.random.default_rng(1)
    for _ in range(100):
        m = int(rng.integers(1, 4))
        a = rng.normal(size=(m, m))
        cov = a @ a.T + 0.5 * np.eye(m)
        model = NormalModel.location(cov)
        theta = rng.normal(size=m)
        n = float(rng.uniform(1, 50))
        x = rng.normal(n * theta, 2 * math.sqrt(n))
        spa = log_likelihood(model, theta, Observation.from_x(x, n), "spa").total
        assert abs(spa - stats.multivariate_normal.logpdf(x, n * theta, n * cov)) <= 1e-12


def test_scaling_identities():
    g = GammaModel()
    y = np.array([2.7])
    z1 = log_likelihood(g, [2.0, 1.0], Observation(y, 1), "zeroth").total
    for n in (2.0, 5.0, 40.0):
        z = log_likelihood(g, [2.0, 1.0], Observation(y, n), "zeroth")
        s = log_likelihood(g, [2.0, 1.0], Observation(y, n), "spa")
        assert z.total == pytest.approx(n * z1, rel=1e-14)
        assert s.total - z.total == pytest.approx(-0.5 * math.log(2 * math.pi * n * s.saddle.hess_at_saddle[0, 0]),
                                                  abs=1e-12)
    assert log_likelihood(g, [2.0, 1.0], Observation([2.0], 9), "zeroth").total == 0.0


def test_affine_invariance_of_spa():
    rng = np.random.default_rng(4)
    base = NormalWithSquareModel()
    theta = np.array([0.3, 1.4])
    y = np.array([0.5, 1.9])
    for _ in range(5):
        A = rng.normal(size=(2, 2)) + 2 * np.eye(2)
        b = rng.normal(size=2)
        model = LinearMapModel(A, base, b)
        n = 7.0
        L0 = log_likelihood(base, theta, Observation(y, n), "spa").total
        L1 = log_likelihood(model, theta, Observation(A @ y + b, n), "spa").total
        assert L1 == pytest.approx(L0 - math.log(abs(np.linalg.det(A))), abs=1e-10)


@pytest.mark.parametrize("model,theta", [(PoissonModel(), [3.0]), (GammaModel(), [2.0, 1.5])])
def test_ratio_error_is_order_one_over_n(model, theta):
    ns = [8, 16, 32, 64, 128]
    y = np.array([1.4 * model.mean(theta)[0]])
    if model.is_lattice:
        ns_x = [round(n * y[0]) for n in ns]
    errs = []
    for i, n in enumerate(ns):
        x = ns_x[i] if model.is_lattice else n * y[0]
        obs = Observation.from_x([x], n)
        spa = log_likelihood(model, theta, obs, "spa").total
        exact = log_likelihood(model, theta, obs, "exact").total
        errs.append(abs(math.expm1(spa - exact)))
    slope = np.polyfit(np.log(ns), np.log(errs), 1)[0]
    assert -1.2 <= slope <= -0.8
    assert max(e * n for e, n in zip(errs, ns)) < 0.2


def test_gamma_fi_gradient_formula():
    g = GammaModel("fi")
    for n, y, th in [(1, 1.3, 0.8), (10, 0.7, 1.4), (64, 1.0, 1.1)]:
        grad = grad_log_likelihood(g, [th], Observation([y], n), "spa")[0]
        assert grad == pytest.approx(n * (-math.log(th) + 1 / (2 * n * th) + math.log(y)), rel=1e-10, abs=1e-12)


def test_normal_approx_value():
    g = GammaModel()
    L = log_likelihood(g, [2.0, 1.0], Observation([2.5], 10), "normal")
    assert L.total == pytest.approx(stats.norm.logpdf(25.0, 20.0, math.sqrt(20.0)), abs=1e-12)
    assert L.log_lstar + L.log_p == pytest.approx(L.total, abs=1e-14)


def test_boundary_observation():
    with pytest.raises(NoSaddlepoint):
        log_likelihood(PoissonModel(), [3.0], Observation([0.0], 1), "spa")


def test_exact_needs_small_dimension():
    model = NormalModel.location(np.eye(3))
    with pytest.raises(NotSupported):
        log_likelihood(model, np.zeros(3), Observation(np.ones(3), 5), "exact")


def test_lattice_pmf_reproduced():
    for x in range(1, 41):
        L = log_likelihood(PoissonModel(), [7.5], Observation.from_x([x], 1), "exact")
        assert math.exp(L.total - stats.poisson.logpmf(x, 7.5)) == pytest.approx(1.0, rel=1e-10)


def test_mixture_closed_form_against_exact():
    from saddlemax.model_zoo import MixtureNormalModel

    mix = MixtureNormalModel()
    for n in (1, 3, 8):
        obs = Observation.from_x([0.4], n)
        exact = log_likelihood(mix, [0.6], obs, "exact").total
        assert exact == pytest.approx(mix.closed_form_log_density([0.6], [0.4], n), abs=1e-9)


def test_normal_square_closed_form_against_exact():
    m = NormalWithSquareModel()
    obs = Observation([0.5, 1.9], 30)
    exact = log_likelihood(m, [0.4, 1.3], obs, "exact").total
    assert exact == pytest.approx(m.closed_form_log_density([0.4, 1.3], obs.x, 30), abs=1e-9)
    # independent oracle: X1 ~ N(n mu, n v) and (X2 - X1^2/n)/v ~ chi2(n-1)
    n, mu, v = 30, 0.4, 1.3
    x1, x2 = obs.x
    w = x2 - x1 * x1 / n
    ref = stats.norm.logpdf(x1, n * mu, math.sqrt(n * v)) + stats.chi2.logpdf(w / v, n - 1) - math.log(v)
    assert exact == pytest.approx(ref, abs=1e-9)
    assert gammaln(3) == pytest.approx(math.log(2))
