"""Built-in CGF models and the linear-map / concatenation combinators."""

from __future__ import annotations

import math

import numpy as np
from scipy import special

from .cgf_core import CgfModel, ModelSignature, SupportKind, as_vector
from .errors import DomainError, NotSupported, RankDeficient

__all__ = [
    "ExpFamilyModel",
    "PoissonModel",
    "GammaModel",
    "NormalModel",
    "NormalWithSquareModel",
    "GammaLogModel",
    "BirthDeathModel",
    "MixtureNormalModel",
    "LinearMapModel",
    "ConcatModel",
    "birthdeath_alpha_q",
    "compose_linear",
    "compose_concat",
]


def _gauss_logpdf(x, mean, cov):
    r = np.asarray(x, dtype=float) - mean
    c = np.linalg.cholesky(cov)
    z = np.linalg.solve(c, r)
    logdet = 2.0 * np.sum(np.log(np.diag(c)))
    return float(-0.5 * z @ z - 0.5 * logdet - 0.5 * r.shape[0] * math.log(2 * math.pi))


def _require_int(n, what):
    if abs(n - round(n)) > 1e-12 or n < 1:
        raise NotSupported(f"{what} needs a positive integer n, got {n}")
    return int(round(n))


# ---------------------------------------------------------------------------
# exponential families: K0(s; theta) = rho(eta(theta) + s) - rho(eta(theta))
# ---------------------------------------------------------------------------


class ExpFamilyModel(CgfModel):
    """Per-summand natural exponential family with log-partition ``rho``.

    Subclasses implement ``natural(theta) -> (eta, jac (m,p), hess (m,p,p))``,
    ``rho``/``rho_grad`` (complex-capable, vectorised over leading axes),
    ``rho_derivs(e) -> (g, H, T, Q)`` up to fourth order, and
    ``natural_in_domain``.
    """

    has_second_nu_derivs = True
    complex_log_is_continuous = True

    def natural(self, theta):
        raise NotImplementedError

    def theta_from_natural(self, eta):
        raise NotImplementedError

    def rho(self, e):
        raise NotImplementedError

    def rho_grad(self, e):
        raise NotImplementedError

    def rho_derivs(self, e):
        raise NotImplementedError

    def natural_in_domain(self, e) -> bool:
        raise NotImplementedError

    def in_domain(self, s, theta):
        eta = self.natural(theta)[0]
        return bool(np.all(np.isfinite(s))) and self.natural_in_domain(eta + s)

    def k0(self, s, theta):
        eta = self.natural(theta)[0]
        return float(self.rho(eta + s) - self.rho(eta))

    def grad_s(self, s, theta):
        eta = self.natural(theta)[0]
        return self.rho_derivs(eta + s)[0]

    def hess_s(self, s, theta):
        eta = self.natural(theta)[0]
        return self.rho_derivs(eta + s)[1]

    def third_s(self, s, theta):
        eta = self.natural(theta)[0]
        return self.rho_derivs(eta + s)[2]

    def grad_theta(self, s, theta):
        eta, jac, _ = self.natural(theta)
        return (self.rho_derivs(eta + s)[0] - self.rho_derivs(eta)[0]) @ jac

    def cross(self, s, theta):
        eta, jac, _ = self.natural(theta)
        return self.rho_derivs(eta + s)[1] @ jac

    def hess_theta(self, s, theta):
        eta, jac, hes = self.natural(theta)
        g1, h1 = self.rho_derivs(eta + s)[:2]
        g0, h0 = self.rho_derivs(eta)[:2]
        return jac.T @ (h1 - h0) @ jac + np.einsum("k,kij->ij", g1 - g0, hes)

    def dhess_dtheta(self, s, theta):
        eta, jac, _ = self.natural(theta)
        t = self.rho_derivs(eta + s)[2]
        return np.einsum("abl,lj->jab", t, jac)

    def d2hess_dtheta(self, s, theta):
        eta, jac, hes = self.natural(theta)
        _, _, t, q = self.rho_derivs(eta + s)
        return np.einsum("abkl,ki,lj->ijab", q, jac, jac) + np.einsum("abl,lij->ijab", t, hes)

    def log_mgf_complex(self, z, theta):
        eta = self.natural(theta)[0]
        return self.rho(eta + z) - self.rho(eta)

    def grad_s_complex(self, z, theta):
        eta = self.natural(theta)[0]
        return self.rho_grad(eta + z)

    def grad_theta_complex(self, z, theta):
        eta, jac, _ = self.natural(theta)
        return (self.rho_grad(eta + z) - self.rho_derivs(eta)[0]) @ jac

    def saddle_hint(self, theta, y):
        try:
            eta_hat = self.natural_from_mean(y)
        except (NotImplementedError, DomainError):
            return None
        return eta_hat - self.natural(theta)[0]

    def natural_from_mean(self, y):
        raise NotImplementedError

    def mean_in_interior(self, theta, y):
        try:
            self.natural_from_mean(np.asarray(y, dtype=float))
        except DomainError:
            return False
        except NotImplementedError:
            pass
        return True


class PoissonModel(ExpFamilyModel):
    """Poisson summands with rate ``theta = (lambda,)``: ``K0 = lambda (e^s - 1)``."""

    name = "poisson"
    param_names = ("lambda",)
    has_closed_form_likelihood = True
    can_sample = True

    def __init__(self):
        self.signature = ModelSignature(1, 1, SupportKind.INTEGER_LATTICE)

    def theta_in_domain(self, theta):
        return bool(np.isfinite(theta[0]) and theta[0] > 0)

    def in_domain(self, s, theta):
        return bool(np.all(np.isfinite(s)))

    def natural(self, theta):
        lam = theta[0]
        return np.array([math.log(lam)]), np.array([[1.0 / lam]]), np.array([[[-1.0 / lam**2]]])

    def theta_from_natural(self, eta):
        return np.exp(np.asarray(eta, dtype=float))

    def natural_from_mean(self, y):
        if y[0] <= 0:
            raise DomainError("Poisson mean must be positive")
        return np.log(y)

    def natural_in_domain(self, e):
        return True

    def rho(self, e):
        return np.exp(e[..., 0])

    def rho_grad(self, e):
        return np.exp(e)

    def rho_derivs(self, e):
        v = math.exp(e[0])
        return np.array([v]), np.array([[v]]), np.full((1, 1, 1), v), np.full((1, 1, 1, 1), v)

    def k0(self, s, theta):
        return float(theta[0] * math.expm1(s[0]))

    def closed_form_log_density(self, theta, x, n):
        x = float(np.atleast_1d(x)[0])
        if x < 0:
            return -math.inf
        lam = n * theta[0]
        return float(x * math.log(lam) - lam - special.gammaln(x + 1.0))

    def closed_form_grad(self, theta, x, n):
        x = float(np.atleast_1d(x)[0])
        return np.array([x / theta[0] - n])

    def sample(self, theta, n, rng):
        return np.array([float(rng.poisson(n * theta[0]))])


class NormalWithSquareModel(ExpFamilyModel):
    """Normal summands observed through ``(Z, Z^2)`` with ``theta = (mu, sigma2)``."""

    name = "normal_square"
    param_names = ("mu", "sigma2")
    has_closed_form_likelihood = True
    can_sample = True

    def __init__(self):
        self.signature = ModelSignature(2, 2)

    def theta_in_domain(self, theta):
        return bool(np.all(np.isfinite(theta)) and theta[1] > 0)

    def natural(self, theta):
        mu, v = theta
        eta = np.array([mu / v, -0.5 / v])
        jac = np.array([[1.0 / v, -mu / v**2], [0.0, 0.5 / v**2]])
        hes = np.zeros((2, 2, 2))
        hes[0, 0, 1] = hes[0, 1, 0] = -1.0 / v**2
        hes[0, 1, 1] = 2.0 * mu / v**3
        hes[1, 1, 1] = -1.0 / v**3
        return eta, jac, hes

    def theta_from_natural(self, eta):
        v = -0.5 / eta[1]
        return np.array([eta[0] * v, v])

    def natural_from_mean(self, y):
        v = y[1] - y[0] ** 2
        if not v > 0:
            raise DomainError("need y2 > y1^2")
        return np.array([y[0] / v, -0.5 / v])

    def natural_in_domain(self, e):
        return bool(e[1] < 0)

    def s_box(self, theta):
        eta = self.natural(theta)[0]
        return np.array([-np.inf, -np.inf]), np.array([np.inf, -eta[1]])

    def rho(self, e):
        a, w = e[..., 0], -e[..., 1]
        return a * a / (4 * w) - 0.5 * np.log(w)

    def rho_grad(self, e):
        a, w = e[..., 0], -e[..., 1]
        return np.stack([a / (2 * w), a * a / (4 * w * w) + 1 / (2 * w)], axis=-1)

    def rho_derivs(self, e):
        a, w = float(e[0]), float(-e[1])
        g = np.array([a / (2 * w), a * a / (4 * w * w) + 1 / (2 * w)])
        h = np.array([[1 / (2 * w), a / (2 * w * w)], [a / (2 * w * w), a * a / (2 * w**3) + 1 / (2 * w * w)]])
        t = np.empty((2, 2, 2))
        t[0, 0, 0] = 0.0
        t[0, 0, 1] = t[0, 1, 0] = t[1, 0, 0] = 1 / (2 * w * w)
        t[0, 1, 1] = t[1, 0, 1] = t[1, 1, 0] = a / w**3
        t[1, 1, 1] = 1.5 * a * a / w**4 + 1 / w**3
        q = np.zeros((2, 2, 2, 2))
        vals = {0: 0.0, 1: 0.0, 2: 1 / w**3, 3: 3 * a / w**4, 4: 6 * a * a / w**5 + 3 / w**4}
        for idx in np.ndindex(2, 2, 2, 2):
            q[idx] = vals[sum(idx)]
        return g, h, t, q

    def closed_form_log_density(self, theta, x, n):
        mu, v = theta
        x1, x2 = np.asarray(x, dtype=float)
        w = x2 - x1 * x1 / n
        if n <= 1 or w <= 0:
            return -math.inf
        lx1 = -0.5 * (x1 - n * mu) ** 2 / (n * v) - 0.5 * math.log(2 * math.pi * n * v)
        k = 0.5 * (n - 1)
        lw = k * math.log(0.5 / v) + (k - 1) * math.log(w) - w / (2 * v) - special.gammaln(k)
        return float(lx1 + lw)

    def closed_form_grad(self, theta, x, n):
        mu, v = theta
        x1, x2 = np.asarray(x, dtype=float)
        w = x2 - x1 * x1 / n
        d_mu = (x1 - n * mu) / v
        d_v = 0.5 * (x1 - n * mu) ** 2 / (n * v * v) - 0.5 / v - 0.5 * (n - 1) / v + w / (2 * v * v)
        return np.array([d_mu, d_v])

    def sample(self, theta, n, rng):
        z = rng.normal(theta[0], math.sqrt(theta[1]), size=_require_int(n, "sampling"))
        return np.array([z.sum(), (z * z).sum()])


class GammaLogModel(ExpFamilyModel):
    """Gamma(alpha, r) summands observed through ``(Z, log Z)``; ``theta = (alpha, r)``."""

    name = "gamma_log"
    param_names = ("alpha", "r")
    can_sample = True

    def __init__(self):
        self.signature = ModelSignature(2, 2)

    def theta_in_domain(self, theta):
        return bool(np.all(np.isfinite(theta)) and theta[0] > 0 and theta[1] > 0)

    def natural(self, theta):
        alpha, r = theta
        return np.array([-r, alpha]), np.array([[0.0, -1.0], [1.0, 0.0]]), np.zeros((2, 2, 2))

    def theta_from_natural(self, eta):
        return np.array([eta[1], -eta[0]])

    def natural_in_domain(self, e):
        return bool(e[0] < 0 and e[1] > 0)

    def mean_in_interior(self, theta, y):
        # (E Z, E log Z) is attainable iff E log Z < log E Z (Jensen, strict)
        return bool(y[0] > 0 and y[1] < math.log(y[0]))

    def s_box(self, theta):
        alpha, r = theta
        return np.array([-np.inf, -alpha]), np.array([r, np.inf])

    def rho(self, e):
        return special.loggamma(e[..., 1]) - e[..., 1] * np.log(-e[..., 0])

    def rho_grad(self, e):
        w = -e[..., 0]
        return np.stack([e[..., 1] / w, special.psi(e[..., 1]) - np.log(w)], axis=-1)

    def rho_derivs(self, e):
        w, b = float(-e[0]), float(e[1])
        pg = [float(special.polygamma(k, b)) for k in range(4)]
        g = np.array([b / w, pg[0] - math.log(w)])
        h = np.array([[b / w**2, 1 / w], [1 / w, pg[1]]])
        t = np.zeros((2, 2, 2))
        t[0, 0, 0] = 2 * b / w**3
        t[0, 0, 1] = t[0, 1, 0] = t[1, 0, 0] = 1 / w**2
        t[1, 1, 1] = pg[2]
        q = np.zeros((2, 2, 2, 2))
        q[0, 0, 0, 0] = 6 * b / w**4
        for idx in ((0, 0, 0, 1), (0, 0, 1, 0), (0, 1, 0, 0), (1, 0, 0, 0)):
            q[idx] = 2 / w**3
        q[1, 1, 1, 1] = pg[3]
        return g, h, t, q

    def sample(self, theta, n, rng):
        z = rng.gamma(theta[0], 1.0 / theta[1], size=_require_int(n, "sampling"))
        return np.array([z.sum(), np.log(z).sum()])


# ---------------------------------------------------------------------------
# Gamma with shape/rate maps
# ---------------------------------------------------------------------------

_GAMMA_VARIANTS = {
    # theta -> (alpha, r) = M @ theta + c
    "free_alpha_r": (np.eye(2), np.zeros(2), ("alpha", "r")),
    "fi": (np.array([[1.0], [0.0]]), np.array([0.0, 1.0]), ("theta",)),
    "pi": (np.array([[1.0], [1.0]]), np.zeros(2), ("theta",)),
}


class GammaModel(CgfModel):
    """Gamma summands, ``K0 = alpha log r - alpha log(r - s)``.

    ``variant`` selects the parametrisation: ``free_alpha_r`` uses
    ``theta = (alpha, r)``, ``fi`` fixes ``r = 1`` with ``alpha = theta`` and
    ``pi`` ties ``alpha = r = theta`` (mean one for every theta).
    """

    has_closed_form_likelihood = True
    has_second_nu_derivs = True
    can_sample = True
    complex_log_is_continuous = True

    def __init__(self, variant="free_alpha_r"):
        if variant not in _GAMMA_VARIANTS:
            raise ValueError(f"unknown Gamma variant {variant!r}")
        self.variant = variant
        self._map, self._off, self.param_names = _GAMMA_VARIANTS[variant]
        self.signature = ModelSignature(1, self._map.shape[1])
        self.name = {"free_alpha_r": "gamma", "fi": "gamma_fi", "pi": "gamma_pi"}[variant]

    def shape_rate(self, theta):
        ar = self._map @ np.asarray(theta, dtype=float) + self._off
        return float(ar[0]), float(ar[1])

    def theta_in_domain(self, theta):
        if not np.all(np.isfinite(theta)):
            return False
        a, r = self.shape_rate(theta)
        return a > 0 and r > 0

    def in_domain(self, s, theta):
        return bool(np.isfinite(s[0]) and s[0] < self.shape_rate(theta)[1])

    def s_box(self, theta):
        return np.array([-np.inf]), np.array([self.shape_rate(theta)[1]])

    def saddle_hint(self, theta, y):
        a, r = self.shape_rate(theta)
        return np.array([r - a / y[0]]) if y[0] > 0 else None

    def mean_in_interior(self, theta, y):
        return bool(y[0] > 0)

    def k0(self, s, theta):
        a, r = self.shape_rate(theta)
        return float(-a * math.log1p(-s[0] / r))

    def grad_s(self, s, theta):
        a, r = self.shape_rate(theta)
        return np.array([a / (r - s[0])])

    def hess_s(self, s, theta):
        a, r = self.shape_rate(theta)
        return np.array([[a / (r - s[0]) ** 2]])

    def third_s(self, s, theta):
        a, r = self.shape_rate(theta)
        return np.array([[[2 * a / (r - s[0]) ** 3]]])

    def grad_theta(self, s, theta):
        a, r = self.shape_rate(theta)
        u = r - s[0]
        return np.array([-math.log1p(-s[0] / r), a / r - a / u]) @ self._map

    def cross(self, s, theta):
        a, r = self.shape_rate(theta)
        u = r - s[0]
        return (np.array([1 / u, -a / u**2]) @ self._map)[None, :]

    def hess_theta(self, s, theta):
        a, r = self.shape_rate(theta)
        u = r - s[0]
        h = np.array([[0.0, 1 / r - 1 / u], [1 / r - 1 / u, -a / r**2 + a / u**2]])
        return self._map.T @ h @ self._map

    def dhess_dtheta(self, s, theta):
        a, r = self.shape_rate(theta)
        u = r - s[0]
        return (np.array([1 / u**2, -2 * a / u**3]) @ self._map)[:, None, None]

    def d2hess_dtheta(self, s, theta):
        a, r = self.shape_rate(theta)
        u = r - s[0]
        h = np.array([[0.0, -2 / u**3], [-2 / u**3, 6 * a / u**4]])
        return (self._map.T @ h @ self._map)[:, :, None, None]

    def log_mgf_complex(self, z, theta):
        a, r = self.shape_rate(theta)
        return -a * np.log(1 - z[..., 0] / r)

    def grad_s_complex(self, z, theta):
        a, r = self.shape_rate(theta)
        return a / (r - z)

    def grad_theta_complex(self, z, theta):
        a, r = self.shape_rate(theta)
        zz = z[..., 0]
        d = np.stack([-np.log(1 - zz / r), a / r - a / (r - zz)], axis=-1)
        return d @ self._map

    def closed_form_log_density(self, theta, x, n):
        a, r = self.shape_rate(theta)
        x = float(np.atleast_1d(x)[0])
        if x <= 0:
            return -math.inf
        k = n * a
        return float(k * math.log(r) + (k - 1) * math.log(x) - r * x - special.gammaln(k))

    def closed_form_grad(self, theta, x, n):
        a, r = self.shape_rate(theta)
        x = float(np.atleast_1d(x)[0])
        d = np.array([n * math.log(r) + n * math.log(x) - n * special.digamma(n * a), n * a / r - x])
        return d @ self._map

    def sample(self, theta, n, rng):
        a, r = self.shape_rate(theta)
        return np.array([rng.gamma(n * a, 1.0 / r)])


# ---------------------------------------------------------------------------
# Normal
# ---------------------------------------------------------------------------


class NormalModel(CgfModel):
    """Normal summands ``N(mu(theta), Sigma(theta))``: ``K0 = s mu + s Sigma s^T / 2``.

    ``mean_jac`` (m, p), ``cov_jac`` (p, m, m), ``mean_hess`` (m, p, p) and
    ``cov_hess`` (p, p, m, m) are optional callables; any that are missing make
    the theta blocks fall back to finite differences.
    """

    name = "normal"
    has_closed_form_likelihood = True
    can_sample = True
    complex_log_is_continuous = True

    def __init__(self, mean_fn, cov_fn, m, p, mean_jac=None, cov_jac=None, mean_hess=None,
                 cov_hess=None, theta_domain=None, param_names=None):
        self.signature = ModelSignature(m, p)
        self._mean, self._cov = mean_fn, cov_fn
        self._mj, self._cj, self._mh, self._ch = mean_jac, cov_jac, mean_hess, cov_hess
        self._theta_domain = theta_domain
        self.has_analytic_theta_derivs = None not in (mean_jac, cov_jac, mean_hess, cov_hess)
        self.has_complex_theta_derivs = mean_jac is not None and cov_jac is not None
        self.has_second_nu_derivs = cov_hess is not None
        self.param_names = tuple(param_names) if param_names else tuple(f"theta{j}" for j in range(p))

    @classmethod
    def location(cls, cov):
        """``theta = mu`` with fixed covariance."""
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        m = cov.shape[0]
        return cls(
            lambda th: np.asarray(th, dtype=float), lambda th: cov, m, m,
            mean_jac=lambda th: np.eye(m), cov_jac=lambda th: np.zeros((m, m, m)),
            mean_hess=lambda th: np.zeros((m, m, m)), cov_hess=lambda th: np.zeros((m, m, m, m)),
            param_names=[f"mu{j}" for j in range(m)],
        )

    @classmethod
    def location_scale(cls, base_cov):
        """``theta = (mu, tau)`` with ``Sigma = exp(tau) * base_cov``."""
        base = np.atleast_2d(np.asarray(base_cov, dtype=float))
        m = base.shape[0]

        def mj(th):
            return np.hstack([np.eye(m), np.zeros((m, 1))])

        def cj(th):
            d = np.zeros((m + 1, m, m))
            d[m] = math.exp(th[m]) * base
            return d

        def ch(th):
            d = np.zeros((m + 1, m + 1, m, m))
            d[m, m] = math.exp(th[m]) * base
            return d

        return cls(
            lambda th: np.asarray(th[:m], dtype=float), lambda th: math.exp(th[m]) * base, m, m + 1,
            mean_jac=mj, cov_jac=cj, mean_hess=lambda th: np.zeros((m, m + 1, m + 1)), cov_hess=ch,
            param_names=[f"mu{j}" for j in range(m)] + ["log_scale"],
        )

    @classmethod
    def univariate(cls):
        """``theta = (mu, sigma2)``."""
        cj = np.zeros((2, 1, 1))
        cj[1, 0, 0] = 1.0
        return cls(
            lambda th: np.array([th[0]]), lambda th: np.array([[th[1]]]), 1, 2,
            mean_jac=lambda th: np.array([[1.0, 0.0]]), cov_jac=lambda th: cj,
            mean_hess=lambda th: np.zeros((1, 2, 2)), cov_hess=lambda th: np.zeros((2, 2, 1, 1)),
            theta_domain=lambda th: th[1] > 0, param_names=["mu", "sigma2"],
        )

    def theta_in_domain(self, theta):
        if not np.all(np.isfinite(theta)):
            return False
        return True if self._theta_domain is None else bool(self._theta_domain(theta))

    def in_domain(self, s, theta):
        return bool(np.all(np.isfinite(s)))

    def _need(self, f):
        if f is None:
            raise NotImplementedError
        return f

    def saddle_hint(self, theta, y):
        return np.linalg.solve(self._cov(theta), np.asarray(y) - self._mean(theta))

    def k0(self, s, theta):
        return float(s @ self._mean(theta) + 0.5 * s @ self._cov(theta) @ s)

    def grad_s(self, s, theta):
        return self._mean(theta) + self._cov(theta) @ s

    def hess_s(self, s, theta):
        return np.array(self._cov(theta), dtype=float)

    def third_s(self, s, theta):
        return np.zeros((self.m,) * 3)

    def grad_theta(self, s, theta):
        mj, cj = self._need(self._mj)(theta), self._need(self._cj)(theta)
        return s @ mj + 0.5 * np.einsum("a,jab,b->j", s, cj, s)

    def cross(self, s, theta):
        mj, cj = self._need(self._mj)(theta), self._need(self._cj)(theta)
        return mj + np.einsum("jab,b->aj", cj, s)

    def hess_theta(self, s, theta):
        mh, ch = self._need(self._mh)(theta), self._need(self._ch)(theta)
        return np.einsum("a,aij->ij", s, mh) + 0.5 * np.einsum("a,ijab,b->ij", s, ch, s)

    def dhess_dtheta(self, s, theta):
        return np.array(self._need(self._cj)(theta), dtype=float)

    def d2hess_dtheta(self, s, theta):
        return np.array(self._need(self._ch)(theta), dtype=float)

    def log_mgf_complex(self, z, theta):
        mu, cov = self._mean(theta), self._cov(theta)
        return z @ mu + 0.5 * np.einsum("...a,ab,...b->...", z, cov, z)

    def grad_s_complex(self, z, theta):
        return self._mean(theta) + z @ self._cov(theta)

    def grad_theta_complex(self, z, theta):
        if self._mj is None or self._cj is None:
            raise NotSupported("normal model without map Jacobians")
        mj, cj = self._mj(theta), self._cj(theta)
        return z @ mj + 0.5 * np.einsum("...a,jab,...b->...j", z, cj, z)

    def closed_form_log_density(self, theta, x, n):
        return _gauss_logpdf(x, n * self._mean(theta), n * self._cov(theta))

    def closed_form_grad(self, theta, x, n):
        if self._mj is None or self._cj is None:
            return super().closed_form_grad(theta, x, n)
        mu, cov = self._mean(theta), self._cov(theta)
        mj, cj = self._mj(theta), self._cj(theta)
        w = np.linalg.solve(n * cov, np.asarray(x, dtype=float) - n * mu)
        cinv = np.linalg.inv(cov)
        return (
            n * (w @ mj)
            + 0.5 * n * np.einsum("a,jab,b->j", w, cj, w)
            - 0.5 * np.einsum("ab,jba->j", cinv, cj)
        )

    def sample(self, theta, n, rng):
        return rng.multivariate_normal(n * self._mean(theta), n * self._cov(theta))


# ---------------------------------------------------------------------------
# Birth-death process
# ---------------------------------------------------------------------------


def _g_derivs(omega, t):
    """``g(w) = (e^{wt}-1)/w`` and its first two derivatives, smooth at w = 0."""
    wt = omega * t
    if abs(wt) < 0.5:
        g = g1 = g2 = 0.0
        for j in range(40):
            base = t ** (j + 1) / math.factorial(j + 1)
            g += base * omega**j
            if j >= 1:
                g1 += base * j * omega ** (j - 1)
            if j >= 2:
                g2 += base * j * (j - 1) * omega ** (j - 2)
        return g, g1, g2
    e, em1 = math.exp(wt), math.expm1(wt)
    g = em1 / omega
    g1 = t * e / omega - em1 / omega**2
    g2 = t * t * e / omega - 2 * t * e / omega**2 + 2 * em1 / omega**3
    return g, g1, g2


def _bd_alpha_q(omega, nu, t):
    """alpha, q with their gradients (2,) and Hessians (2, 2) in (omega, nu)."""
    g, g1, g2 = _g_derivs(omega, t)
    big_p, big_m = nu + omega, nu - omega
    u = big_p * g
    du = np.array([g + big_p * g1, g])
    d2u = np.array([[2 * g1 + big_p * g2, g1], [g1, 0.0]])
    den = u + 2.0
    q = u / den
    dq = 2 / den**2 * du
    d2q = -4 / den**3 * np.outer(du, du) + 2 / den**2 * d2u
    a = big_m * g
    da = np.array([-g + big_m * g1, g])
    d2a = np.array([[-2 * g1 + big_m * g2, g1], [g1, 0.0]])
    w = 1 / den
    dw = -du / den**2
    d2w = 2 * np.outer(du, du) / den**3 - d2u / den**2
    alpha = a * w
    dalpha = da * w + a * dw
    d2alpha = d2a * w + np.outer(da, dw) + np.outer(dw, da) + a * d2w
    return alpha, q, dalpha, dq, d2alpha, d2q


def birthdeath_alpha_q(omega, nu, t):
    """Modified-geometric parameters ``(alpha, q)`` of one interval's offspring count.

    ``omega = lambda - mu`` and ``nu = lambda + mu``; continuous through ``omega = 0``.
    """
    if not (t > 0 and -nu < omega < nu):
        raise DomainError("need t > 0 and -nu < omega < nu")
    alpha, q = _bd_alpha_q(float(omega), float(nu), float(t))[:2]
    return alpha, q


class BirthDeathModel(CgfModel):
    """Linear birth-death counts over one interval of length ``t`` from one ancestor.

    ``theta = (omega, nu) = (lambda - mu, lambda + mu)``.  The offspring count has
    a modified geometric law with ``M0 = (alpha + (1-q-alpha) e^s) / (1 - q e^s)``.
    """

    name = "birth_death"
    param_names = ("omega", "nu")
    can_sample = True

    def __init__(self, t=1.0):
        if not t > 0:
            raise ValueError("t must be positive")
        self.t = float(t)
        self.signature = ModelSignature(1, 2, SupportKind.INTEGER_LATTICE)

    def theta_in_domain(self, theta):
        return bool(np.all(np.isfinite(theta)) and -theta[1] < theta[0] < theta[1])

    def _aq(self, theta):
        return _bd_alpha_q(float(theta[0]), float(theta[1]), self.t)

    def in_domain(self, s, theta):
        q = self._aq(theta)[1]
        return bool(np.isfinite(s[0]) and s[0] < -math.log(q))

    def mean_in_interior(self, theta, y):
        return bool(y[0] > 0)

    def s_box(self, theta):
        return np.array([-np.inf]), np.array([-math.log(self._aq(theta)[1])])

    def mean(self, theta):
        return np.array([math.exp(theta[0] * self.t)])

    def _parts(self, s, theta):
        alpha, q, da, dq, d2a, d2q = self._aq(theta)
        e = math.exp(s[0])
        c = 1 - q - alpha
        n_ = (1 - q) + c * math.expm1(s[0])
        d_ = (1 - q) - q * math.expm1(s[0])
        return alpha, q, c, e, n_, d_, da, dq, d2a, d2q

    def k0(self, s, theta):
        alpha, q = self._aq(theta)[:2]
        em1 = math.expm1(s[0])
        return float(math.log1p((1 - q - alpha) * em1 / (1 - q)) - math.log1p(-q * em1 / (1 - q)))

    def grad_s(self, s, theta):
        alpha, q, c, e, n_, d_ = self._parts(s, theta)[:6]
        return np.array([c * e / n_ + q * e / d_])

    def hess_s(self, s, theta):
        alpha, q, c, e, n_, d_ = self._parts(s, theta)[:6]
        return np.array([[alpha * c * e / n_**2 + q * e / d_**2]])

    def third_s(self, s, theta):
        alpha, q, c, e, n_, d_ = self._parts(s, theta)[:6]
        v = alpha * c * e * (alpha - c * e) / n_**3 + q * e * (1 + q * e) / d_**3
        return np.array([[[v]]])

    def grad_theta(self, s, theta):
        alpha, q, c, e, n_, d_, da, dq = self._parts(s, theta)[:8]
        f_a = -math.expm1(s[0]) / n_
        f_q = -e / n_ + e / d_
        return f_a * da + f_q * dq

    def cross(self, s, theta):
        alpha, q, c, e, n_, d_, da, dq = self._parts(s, theta)[:8]
        f_sa = -e * (1 - q) / n_**2
        f_sq = -alpha * e / n_**2 + e / d_**2
        return (f_sa * da + f_sq * dq)[None, :]

    def hess_theta(self, s, theta):
        alpha, q, c, e, n_, d_, da, dq, d2a, d2q = self._parts(s, theta)
        em1 = math.expm1(s[0])
        f_a = -em1 / n_
        f_q = -e / n_ + e / d_
        f_aa = -(em1 / n_) ** 2
        f_aq = -e * em1 / n_**2
        f_qq = -(e / n_) ** 2 + (e / d_) ** 2
        return (
            f_aa * np.outer(da, da)
            + f_aq * (np.outer(da, dq) + np.outer(dq, da))
            + f_qq * np.outer(dq, dq)
            + f_a * d2a
            + f_q * d2q
        )

    def dhess_dtheta(self, s, theta):
        alpha, q, c, e, n_, d_, da, dq = self._parts(s, theta)[:8]
        r = alpha - c * e
        f_ssa = -(1 - q) * e * r / n_**3
        f_ssq = -alpha * e * r / n_**3 + e * (1 + q * e) / d_**3
        return (f_ssa * da + f_ssq * dq)[:, None, None]

    def _complex_parts(self, z, theta):
        alpha, q, da, dq = self._aq(theta)[:4]
        e = np.exp(z[..., 0])
        c = 1 - q - alpha
        return alpha, q, c, e, alpha + c * e, 1 - q * e, da, dq

    def log_mgf_complex(self, z, theta):
        alpha, q, c, e, n_, d_ = self._complex_parts(z, theta)[:6]
        return np.log(n_) - np.log(d_)

    def grad_s_complex(self, z, theta):
        alpha, q, c, e, n_, d_ = self._complex_parts(z, theta)[:6]
        return (c * e / n_ + q * e / d_)[..., None]

    def grad_theta_complex(self, z, theta):
        alpha, q, c, e, n_, d_, da, dq = self._complex_parts(z, theta)
        f_a = (1 - e) / n_
        f_q = -e / n_ + e / d_
        return f_a[..., None] * da + f_q[..., None] * dq

    def sample(self, theta, n, rng):
        alpha, q = self._aq(theta)[:2]
        k = rng.binomial(_require_int(n, "sampling"), 1 - alpha)
        extra = rng.negative_binomial(k, 1 - q) if k > 0 else 0
        return np.array([float(k + extra)])


# ---------------------------------------------------------------------------
# Two-component mixture
# ---------------------------------------------------------------------------


class MixtureNormalModel(CgfModel):
    """``Y = exp(-theta^2) Z / 2 + B`` with ``B = +-1`` equiprobable and ``Z ~ N(0, 1)``.

    ``K0 = exp(-2 theta^2) s^2 / 8 + log cosh s``.
    """

    name = "mixture_normal"
    param_names = ("theta",)
    has_closed_form_likelihood = True
    has_second_nu_derivs = True
    can_sample = True

    def __init__(self):
        self.signature = ModelSignature(1, 1)

    @staticmethod
    def _v(theta):
        th = float(theta[0])
        v = 0.25 * math.exp(-2 * th * th)
        return v, -4 * th * v, (16 * th * th - 4) * v

    def in_domain(self, s, theta):
        return bool(np.isfinite(s[0]))

    def k0(self, s, theta):
        x = abs(float(s[0]))
        return float(0.5 * self._v(theta)[0] * x * x + x + math.log1p(math.exp(-2 * x)) - math.log(2))

    def grad_s(self, s, theta):
        return np.array([self._v(theta)[0] * s[0] + math.tanh(s[0])])

    def hess_s(self, s, theta):
        return np.array([[self._v(theta)[0] + 1 / math.cosh(s[0]) ** 2]])

    def third_s(self, s, theta):
        return np.array([[[-2 * math.tanh(s[0]) / math.cosh(s[0]) ** 2]]])

    def grad_theta(self, s, theta):
        return np.array([0.5 * self._v(theta)[1] * s[0] ** 2])

    def cross(self, s, theta):
        return np.array([[self._v(theta)[1] * s[0]]])

    def hess_theta(self, s, theta):
        return np.array([[0.5 * self._v(theta)[2] * s[0] ** 2]])

    def dhess_dtheta(self, s, theta):
        return np.full((1, 1, 1), self._v(theta)[1])

    def d2hess_dtheta(self, s, theta):
        return np.full((1, 1, 1, 1), self._v(theta)[2])

    def log_mgf_complex(self, z, theta):
        zz = z[..., 0]
        return 0.5 * self._v(theta)[0] * zz * zz + np.log(np.cosh(zz))

    def grad_s_complex(self, z, theta):
        return self._v(theta)[0] * z + np.tanh(z)

    def grad_theta_complex(self, z, theta):
        return 0.5 * self._v(theta)[1] * z * z

    def closed_form_log_density(self, theta, x, n):
        n = _require_int(n, "mixture density")
        x = float(np.atleast_1d(x)[0])
        var = n * self._v(theta)[0]
        k = np.arange(n + 1)
        logw = special.gammaln(n + 1) - special.gammaln(k + 1) - special.gammaln(n - k + 1) - n * math.log(2)
        centres = 2.0 * k - n
        terms = logw - 0.5 * (x - centres) ** 2 / var - 0.5 * math.log(2 * math.pi * var)
        return float(special.logsumexp(terms))

    def sample(self, theta, n, rng):
        n = _require_int(n, "sampling")
        sd = math.sqrt(n * self._v(theta)[0])
        return np.array([rng.normal(0.0, sd) + 2.0 * rng.binomial(n, 0.5) - n])


# ---------------------------------------------------------------------------
# combinators
# ---------------------------------------------------------------------------


class LinearMapModel(CgfModel):
    """``X = A U (+ n*offset)``: ``K0(s) = K_U(s A) + s . offset``.

    ``A`` is ``m x k`` of rank ``m``; ``offset`` is a per-summand shift.
    """

    def __init__(self, A, latent: CgfModel, offset=None):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        if A.shape[1] != latent.m:
            raise ValueError("A must have as many columns as the latent dimension")
        sv = np.linalg.svd(A, compute_uv=False)
        if A.shape[0] > A.shape[1] or sv[-1] <= 1e-10 * sv[0]:
            raise RankDeficient("A must have full row rank")
        self.A = A
        self.latent = latent
        self.offset = np.zeros(A.shape[0]) if offset is None else as_vector(offset, A.shape[0], "offset")
        lattice = (
            latent.is_lattice
            and np.all(A == np.round(A))
            and np.all(self.offset == np.round(self.offset))
        )
        kind = SupportKind.INTEGER_LATTICE if lattice else SupportKind.CONTINUOUS
        self.signature = ModelSignature(A.shape[0], latent.p, kind)
        self.name = f"linear({latent.name})"
        self.param_names = latent.param_names
        self.has_analytic_theta_derivs = latent.has_analytic_theta_derivs
        self.has_complex_mgf = latent.has_complex_mgf
        self.has_complex_theta_derivs = latent.has_complex_theta_derivs
        self.has_second_nu_derivs = latent.has_second_nu_derivs
        self.square = A.shape[0] == A.shape[1]
        self.has_closed_form_likelihood = self.square and latent.has_closed_form_likelihood
        self.can_sample = latent.can_sample
        self.complex_log_is_continuous = latent.complex_log_is_continuous

    def theta_in_domain(self, theta):
        return self.latent.theta_in_domain(theta)

    def in_domain(self, s, theta):
        return self.latent.in_domain(s @ self.A, theta)

    def mean_in_interior(self, theta, y):
        if not self.square:
            return True
        yu = np.linalg.solve(self.A, np.asarray(y, dtype=float) - self.offset)
        return self.latent.mean_in_interior(theta, yu)

    def saddle_hint(self, theta, y):
        if not self.square:
            return None
        yu = np.linalg.solve(self.A, np.asarray(y, dtype=float) - self.offset)
        su = self.latent.saddle_hint(theta, yu)
        return None if su is None else np.linalg.solve(self.A.T, su)

    def k0(self, s, theta):
        return float(self.latent.k0(s @ self.A, theta) + s @ self.offset)

    def grad_s(self, s, theta):
        return self.A @ self.latent.grad_s(s @ self.A, theta) + self.offset

    def hess_s(self, s, theta):
        return self.A @ self.latent.hess_s(s @ self.A, theta) @ self.A.T

    def third_s(self, s, theta):
        t = self.latent.third_s(s @ self.A, theta)
        return np.einsum("ai,bj,ck,kij->cab", self.A, self.A, self.A, t)

    def grad_theta(self, s, theta):
        return self.latent.grad_theta(s @ self.A, theta)

    def cross(self, s, theta):
        return self.A @ self.latent.cross(s @ self.A, theta)

    def hess_theta(self, s, theta):
        return self.latent.hess_theta(s @ self.A, theta)

    def dhess_dtheta(self, s, theta):
        d = self.latent.dhess_dtheta(s @ self.A, theta)
        return np.einsum("ai,jik,bk->jab", self.A, d, self.A)

    def d2hess_dtheta(self, s, theta):
        d = self.latent.d2hess_dtheta(s @ self.A, theta)
        return np.einsum("ak,ijkl,bl->ijab", self.A, d, self.A)

    def log_mgf_complex(self, z, theta):
        return self.latent.log_mgf_complex(z @ self.A, theta) + z @ self.offset

    def grad_s_complex(self, z, theta):
        return self.latent.grad_s_complex(z @ self.A, theta) @ self.A.T + self.offset

    def grad_theta_complex(self, z, theta):
        return self.latent.grad_theta_complex(z @ self.A, theta)

    def _latent_x(self, x, n):
        return np.linalg.solve(self.A, np.asarray(x, dtype=float) - n * self.offset)

    def closed_form_log_density(self, theta, x, n):
        if not self.has_closed_form_likelihood:
            raise NotSupported("linear map without a closed-form latent density")
        val = self.latent.closed_form_log_density(theta, self._latent_x(x, n), n)
        if self.is_lattice:
            return val
        return val - math.log(abs(np.linalg.det(self.A)))

    def closed_form_grad(self, theta, x, n):
        return self.latent.closed_form_grad(theta, self._latent_x(x, n), n)

    def sample(self, theta, n, rng):
        return self.A @ self.latent.sample(theta, n, rng) + n * self.offset


class ConcatModel(CgfModel):
    """``k`` independent blocks sharing theta: ``K0(s) = sum_j beta_j K_base(s_j)``.

    Block ``j`` of the observation sums ``n * beta_j`` copies of the base summand.
    """

    def __init__(self, base: CgfModel, beta):
        beta = as_vector(beta, name="beta")
        if np.any(beta <= 0):
            raise DomainError("beta entries must be positive")
        self.base = base
        self.beta = beta
        self.k = beta.shape[0]
        self.m0 = base.m
        self.signature = ModelSignature(self.k * base.m, base.p, base.support_kind)
        self.name = f"concat({base.name})"
        self.param_names = base.param_names
        for flag in ("has_analytic_theta_derivs", "has_complex_mgf", "has_complex_theta_derivs",
                     "has_second_nu_derivs", "has_closed_form_likelihood", "can_sample",
                     "complex_log_is_continuous"):
            setattr(self, flag, getattr(base, flag))

    def _blocks(self, s):
        return np.asarray(s, dtype=float).reshape(self.k, self.m0)

    def theta_in_domain(self, theta):
        return self.base.theta_in_domain(theta)

    def in_domain(self, s, theta):
        return all(self.base.in_domain(sj, theta) for sj in self._blocks(s))

    def s_box(self, theta):
        lo, hi = self.base.s_box(theta)
        return np.tile(lo, self.k), np.tile(hi, self.k)

    def mean_in_interior(self, theta, y):
        return all(self.base.mean_in_interior(theta, yj / self.beta[j])
                   for j, yj in enumerate(self._blocks(y)))

    def saddle_hint(self, theta, y):
        hints = []
        for j, yj in enumerate(self._blocks(y)):
            h = self.base.saddle_hint(theta, yj / self.beta[j])
            if h is None:
                return None
            hints.append(h)
        return np.concatenate(hints)

    def mean(self, theta):
        return np.concatenate([b * self.base.mean(theta) for b in self.beta])

    def k0(self, s, theta):
        return float(sum(b * self.base.k0(sj, theta) for b, sj in zip(self.beta, self._blocks(s))))

    def grad_s(self, s, theta):
        return np.concatenate([b * self.base.grad_s(sj, theta) for b, sj in zip(self.beta, self._blocks(s))])

    def _blockdiag(self, mats):
        m0, out = self.m0, np.zeros(mats[0].shape[:-2] + (self.m, self.m))
        for j, mat in enumerate(mats):
            out[..., j * m0:(j + 1) * m0, j * m0:(j + 1) * m0] = mat
        return out

    def hess_s(self, s, theta):
        return self._blockdiag([b * self.base.hess_s(sj, theta) for b, sj in zip(self.beta, self._blocks(s))])

    def third_s(self, s, theta):
        m0, out = self.m0, np.zeros((self.m,) * 3)
        for j, (b, sj) in enumerate(zip(self.beta, self._blocks(s))):
            sl = slice(j * m0, (j + 1) * m0)
            out[sl, sl, sl] = b * self.base.third_s(sj, theta)
        return out

    def grad_theta(self, s, theta):
        return sum(b * self.base.grad_theta(sj, theta) for b, sj in zip(self.beta, self._blocks(s)))

    def cross(self, s, theta):
        return np.vstack([b * self.base.cross(sj, theta) for b, sj in zip(self.beta, self._blocks(s))])

    def hess_theta(self, s, theta):
        return sum(b * self.base.hess_theta(sj, theta) for b, sj in zip(self.beta, self._blocks(s)))

    def dhess_dtheta(self, s, theta):
        return self._blockdiag([b * self.base.dhess_dtheta(sj, theta) for b, sj in zip(self.beta, self._blocks(s))])

    def d2hess_dtheta(self, s, theta):
        return self._blockdiag([b * self.base.d2hess_dtheta(sj, theta) for b, sj in zip(self.beta, self._blocks(s))])

    def _zblocks(self, z):
        return z.reshape(z.shape[:-1] + (self.k, self.m0))

    def log_mgf_complex(self, z, theta):
        zb = self._zblocks(z)
        return sum(b * self.base.log_mgf_complex(zb[..., j, :], theta) for j, b in enumerate(self.beta))

    def grad_s_complex(self, z, theta):
        zb = self._zblocks(z)
        parts = [b * self.base.grad_s_complex(zb[..., j, :], theta) for j, b in enumerate(self.beta)]
        return np.concatenate(parts, axis=-1)

    def grad_theta_complex(self, z, theta):
        zb = self._zblocks(z)
        return sum(b * self.base.grad_theta_complex(zb[..., j, :], theta) for j, b in enumerate(self.beta))

    def closed_form_log_density(self, theta, x, n):
        xb = self._blocks(x)
        return float(sum(self.base.closed_form_log_density(theta, xj, n * b) for b, xj in zip(self.beta, xb)))

    def closed_form_grad(self, theta, x, n):
        xb = self._blocks(x)
        return sum(self.base.closed_form_grad(theta, xj, n * b) for b, xj in zip(self.beta, xb))

    def sample(self, theta, n, rng):
        return np.concatenate([self.base.sample(theta, n * b, rng) for b in self.beta])


def compose_linear(A, latent, offset=None):
    return LinearMapModel(A, latent, offset)


def compose_concat(base, beta):
    return ConcatModel(base, beta)
