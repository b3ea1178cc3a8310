import math

import numpy as np
import pytest
from scipy import stats

from saddlemax.cgf_core import Block, eval_cgf
from saddlemax.errors import DomainError, NotSupported, RankDeficient
from saddlemax.likelihoods import Observation, grad_log_likelihood, log_likelihood
from saddlemax.model_zoo import (
    BirthDeathModel,
    ConcatModel,
    GammaModel,
    LinearMapModel,
    MixtureNormalModel,
    NormalWithSquareModel,
    PoissonModel,
    birthdeath_alpha_q,
    compose_concat,
    compose_linear,
)

from zoo_cases import CASES, draw


def test_closed_form_examples():
    got = PoissonModel().closed_form_log_density([3.0], [5], 1)
    assert got == pytest.approx(stats.poisson.logpmf(5, 3.0), abs=1e-12)
    assert got == pytest.approx(-2.294430, abs=1e-6)
    got = GammaModel().closed_form_log_density([4.0, 1.0], [3.0], 1)
    assert got == pytest.approx(3 * math.log(3) - 3 - math.log(6), abs=1e-12)
    assert got == pytest.approx(stats.gamma.logpdf(3.0, 4.0), abs=1e-12)


def test_closed_form_gradients():
    cases = [(PoissonModel(), [2.5], [4.0], 3), (GammaModel(), [2.0, 1.3], [3.1], 2),
             (GammaModel("fi"), [1.2], [5.0], 4), (NormalWithSquareModel(), [0.3, 1.2], [2.0, 9.0], 5)]
    for m, th, x, n in cases:
        th = np.asarray(th)
        g = m.closed_form_grad(th, x, n)
        for j in range(len(th)):
            e = np.zeros(len(th))
            e[j] = 1e-6
            fd = (m.closed_form_log_density(th + e, x, n) - m.closed_form_log_density(th - e, x, n)) / 2e-6
            assert g[j] == pytest.approx(fd, rel=1e-6, abs=1e-8)


def test_normal_square_ratio_n3():
    m = NormalWithSquareModel()
    obs = Observation([0.2, 1.5], 3)
    r = math.exp(log_likelihood(m, [0.1, 1.1], obs, "spa").total - m.closed_form_log_density([0.1, 1.1], obs.x, 3))
    assert r == pytest.approx(math.exp(1.5) / math.sqrt(3 * math.pi), rel=1e-10)
    assert r == pytest.approx(1.459843, abs=1e-6)


def test_birthdeath_alpha_q():
    lam, mu, t = 1.0, 0.5, 1.0
    a, q = birthdeath_alpha_q(lam - mu, lam + mu, t)
    e = math.exp((lam - mu) * t)
    assert a == pytest.approx(mu * (e - 1) / (lam * e - mu), rel=1e-12)
    assert a == pytest.approx(0.2823667, abs=1e-7)
    assert 0 < a < 1 and 0 < q < 1
    lam0 = 0.8
    a0, q0 = birthdeath_alpha_q(0.0, 2 * lam0, 2.0)
    assert a0 == pytest.approx(lam0 * 2 / (1 + lam0 * 2), rel=1e-12)
    assert q0 == pytest.approx(a0, rel=1e-12)
    lo, hi = birthdeath_alpha_q(-1e-6, 1.6, 2.0), birthdeath_alpha_q(1e-6, 1.6, 2.0)
    assert 0.5 * (lo[0] + hi[0]) == pytest.approx(a0, rel=1e-10)
    with pytest.raises(DomainError):
        birthdeath_alpha_q(2.0, 1.0, 1.0)


def test_birthdeath_mean():
    rng = np.random.default_rng(2)
    for _ in range(20):
        om = rng.uniform(-0.6, 0.6)
        nu = abs(om) + rng.uniform(0.2, 2)
        t = rng.uniform(0.2, 3)
        m = BirthDeathModel(t)
        h = 1e-6
        fd = (m.k0([h], [om, nu]) - m.k0([-h], [om, nu])) / (2 * h)
        assert fd == pytest.approx(math.exp(om * t), abs=1e-8)
        assert m.grad_s([0.0], [om, nu])[0] == pytest.approx(math.exp(om * t), rel=1e-12)


def test_birthdeath_pmf_by_inversion_sums_to_one():
    m = BirthDeathModel(1.0)
    theta = [0.2, 1.0]
    total = 0.0
    for x in range(1, 60):
        total += math.exp(log_likelihood(m, theta, Observation.from_x([x], 3), "exact").total)
    # P(X = 0) for three independent ancestors is alpha^3
    a = birthdeath_alpha_q(0.2, 1.0, 1.0)[0]
    assert total + a**3 == pytest.approx(1.0, abs=1e-8)


def test_linear_identity_and_sum():
    p = PoissonModel()
    lin = compose_linear(np.eye(1), p)
    for s in (-0.3, 0.4):
        a = eval_cgf(lin, [s], [2.0])
        b = eval_cgf(p, [s], [2.0])
        for blk in ("k0", "grad_s", "hess_s", "grad_theta", "cross", "hess_theta"):
            np.testing.assert_array_equal(getattr(a, blk), getattr(b, blk))
    two = compose_concat(PoissonModel(), [1.0, 1.0])
    summed = compose_linear(np.array([[1.0, 1.0]]), two)
    assert summed.k0([0.3], [2.0]) == pytest.approx(2 * 2.0 * math.expm1(0.3), rel=1e-14)
    assert summed.is_lattice


def test_concat_hessian_blocks():
    c = ConcatModel(GammaModel(), [1.0, 2.5])
    h = c.hess_s(np.array([0.1, -0.4]), [2.0, 1.0])
    g = GammaModel()
    assert h[0, 1] == 0 and h[1, 0] == 0
    assert h[0, 0] == pytest.approx(g.hess_s([0.1], [2.0, 1.0])[0, 0])
    assert h[1, 1] == pytest.approx(2.5 * g.hess_s([-0.4], [2.0, 1.0])[0, 0])
    with pytest.raises(DomainError):
        ConcatModel(GammaModel(), [1.0, -1.0])


def test_rank_checks():
    with pytest.raises(RankDeficient):
        LinearMapModel(np.array([[1.0, 2.0], [2.0, 4.0]]), ConcatModel(PoissonModel(), [1, 1]))


def test_gamma_pi_gradient_identity():
    # alpha = r = theta: log L_hat = n theta (log y - y + 1) - 0.5 log(2 pi n y^2 / theta)
    g = GammaModel("pi")
    rng = np.random.default_rng(0)
    for _ in range(10):
        th, xi, n = rng.uniform(0.5, 3), rng.normal(), int(rng.integers(4, 200))
        y = 1 + xi / math.sqrt(n)
        expected = n * (math.log(y) - y + 1) + 1 / (2 * th)
        got = grad_log_likelihood(g, [th], Observation([y], n), "spa")[0]
        assert got == pytest.approx(expected, rel=1e-10, abs=1e-10)
        total = log_likelihood(g, [th], Observation([y], n), "spa").total
        assert total == pytest.approx(n * th * (math.log(y) - y + 1) - 0.5 * math.log(2 * math.pi * n * y * y / th),
                                      rel=1e-12, abs=1e-12)


def test_mixture_closed_form_n1():
    mix = MixtureNormalModel()
    v = 0.25 * math.exp(-2 * 0.7**2)
    ref = math.log(0.5 * stats.norm.pdf(0.3, 1, math.sqrt(v)) + 0.5 * stats.norm.pdf(0.3, -1, math.sqrt(v)))
    assert mix.closed_form_log_density([0.7], [0.3], 1) == pytest.approx(ref, abs=1e-12)
    with pytest.raises(NotSupported):
        mix.closed_form_log_density([0.7], [0.3], 2.5)


@pytest.mark.parametrize("name", sorted(CASES))
def test_sampling_mean(name):
    rng = np.random.default_rng(8)
    model, theta, _ = draw(name, rng)
    if not model.can_sample:
        with pytest.raises(NotSupported):
            model.sample(theta, 2, rng)
        return
    n = 5
    xs = np.array([model.sample(theta, n, rng) for _ in range(4000)])
    mean = model.mean(theta) * n
    cov = eval_cgf(model, np.zeros(model.m), theta, [Block.HESS_S]).hess_s * n
    se = np.sqrt(np.diag(cov) / len(xs))
    assert np.all(np.abs(xs.mean(axis=0) - mean) < 5 * se)

