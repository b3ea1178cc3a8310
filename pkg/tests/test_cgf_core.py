import math

import numpy as np
import pytest

from saddlemax.cgf_core import (
    Block,
    CgfModel,
    ModelSignature,
    eval_cgf,
    eval_complex_mgf,
    fd_derivative_oracle,
    fd_step,
)
from saddlemax.errors import DomainError, NotSupported
from saddlemax.model_zoo import GammaModel, NormalModel, PoissonModel

from zoo_cases import CASES, draw

_CHECKED = [Block.GRAD_S, Block.HESS_S, Block.THIRD_S, Block.GRAD_THETA, Block.CROSS,
            Block.HESS_THETA, Block.DHESS_DTHETA]


def _close(a, b, rel=1e-5, abs_=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.all(np.abs(a - b) <= np.maximum(abs_, rel * np.abs(b)))


@pytest.mark.parametrize("name", sorted(CASES))
def test_analytic_blocks_match_central_differences(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(50):
        model, theta, s = draw(name, rng)
        ev = eval_cgf(model, s, theta, list(Block), allow_fd=True)
        for b in _CHECKED:
            if b in ev.fd_blocks:
                continue
            fd = fd_derivative_oracle(model, s, theta, b)
            assert _close(getattr(ev, b.value), fd), (name, b, theta, s)


@pytest.mark.parametrize("name", sorted(CASES))
def test_cgf_vanishes_at_zero_and_hessian_is_positive(name):
    rng = np.random.default_rng(7)
    for _ in range(20):
        model, theta, s = draw(name, rng)
        if model.in_domain(np.zeros(model.m), theta):
            assert abs(model.k0(np.zeros(model.m), theta)) < 1e-15
        assert np.all(np.linalg.eigvalsh(eval_cgf(model, s, theta, [Block.HESS_S]).hess_s) > 0)


@pytest.mark.parametrize("name", sorted(CASES))
def test_complex_mgf_is_bounded_by_real_mgf(name):
    rng = np.random.default_rng(11)
    for _ in range(20):
        model, theta, s = draw(name, rng)
        phi = rng.normal(0, 3, model.m)
        m0, _ = eval_complex_mgf(model, s, phi, theta)
        assert abs(m0) <= math.exp(model.k0(s, theta)) * (1 + 1e-12)
        m_real, kp = eval_complex_mgf(model, s, np.zeros(model.m), theta)
        assert m_real == pytest.approx(math.exp(model.k0(s, theta)), rel=1e-12)
        np.testing.assert_allclose(kp.real, model.grad_s(s, theta), rtol=1e-12, atol=1e-14)


def test_poisson_at_zero():
    ev = eval_cgf(PoissonModel(), [0.0], [3.0])
    assert ev.k0 == 0.0
    np.testing.assert_allclose(ev.grad_s, [3.0])
    np.testing.assert_allclose(ev.hess_s, [[3.0]])


def test_gamma_and_normal_values():
    assert eval_cgf(GammaModel(), [0.5], [2.0, 1.0], [Block.K0]).k0 == pytest.approx(1.386294, abs=1e-6)
    assert eval_cgf(NormalModel.univariate(), [0.25], [1.0, 4.0], [Block.K0]).k0 == pytest.approx(0.375)


def test_complex_examples():
    m0, _ = eval_complex_mgf(PoissonModel(), [0.0], [math.pi], [3.0])
    assert m0 == pytest.approx(math.exp(-6), rel=1e-12)
    m0, _ = eval_complex_mgf(NormalModel.univariate(), [0.0], [2.0], [0.0, 1.0])
    assert m0 == pytest.approx(math.exp(-2), rel=1e-12)


def test_oracle_examples():
    g = fd_derivative_oracle(GammaModel(), [0.5], [2.0, 1.0], "grad_s", step=1e-6)
    assert g[0] == pytest.approx(4.0, rel=1e-8)
    h = fd_derivative_oracle(NormalModel.univariate(), [0.3], [0.0, 2.5], "hess_s")
    assert h[0, 0] == pytest.approx(2.5, abs=1e-6)
    c = fd_derivative_oracle(PoissonModel(), [0.0], [2.0], "cross")
    assert c[0, 0] == pytest.approx(1.0, rel=1e-8)


class _OnlyK0(CgfModel):
    name = "only_k0"

    def __init__(self):
        self.signature = ModelSignature(1, 1)

    def in_domain(self, s, theta):
        return True

    def k0(self, s, theta):
        return theta[0] * (math.exp(s[0]) - 1)


def test_fallback_is_flagged_and_can_be_disabled():
    ev = eval_cgf(_OnlyK0(), [0.2], [3.0], [Block.GRAD_S, Block.CROSS])
    assert Block.GRAD_S in ev.fd_blocks and Block.CROSS in ev.fd_blocks
    assert ev.grad_s[0] == pytest.approx(3 * math.exp(0.2), rel=1e-8)
    with pytest.raises(NotSupported):
        eval_cgf(_OnlyK0(), [0.2], [3.0], [Block.GRAD_S], allow_fd=False)


def test_domain_errors():
    with pytest.raises(DomainError):
        eval_cgf(GammaModel(), [1.5], [2.0, 1.0])
    with pytest.raises(DomainError):
        eval_cgf(PoissonModel(), [0.0], [-1.0])
    with pytest.raises(DomainError):
        fd_derivative_oracle(GammaModel(), [1.0 - 1e-9], [2.0, 1.0], "grad_s")


def test_signature_and_step():
    with pytest.raises(ValueError):
        ModelSignature(0, 1)
    np.testing.assert_allclose(fd_step([0.0, 1e3]), [1e-6, 1e-3])
