"""Factored log-likelihoods: exact (by inversion), saddlepoint, zeroth-order, normal.

Every likelihood is written as ``log L = n*log L*0(s_hat, theta) + log P`` where
``log L*0(s, theta) = K0(s) - s.K0'(s)`` and the P-factor depends on the kind:

* exact: the tilted density at its own mean, computed by Fourier inversion,
* saddlepoint: ``det(2 pi n K0''(s_hat))^{-1/2}``,
* zeroth order: 1,
* normal: whatever makes the total equal the ``N(n K0'(0), n K0''(0))`` log-density.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.linalg import cho_factor, cho_solve

from .cgf_core import Block, CgfModel, as_vector, eval_cgf
from .errors import (
    DomainError,
    NoSaddlepoint,
    NotSupported,
    QuadratureNonpositive,
    TailNotDecayed,
)
from .saddle_solver import SaddleResult, SolverConfig, solve_saddlepoint

__all__ = [
    "ApproximationKind",
    "QuadratureScheme",
    "QuadratureConfig",
    "Observation",
    "FactoredLogLikelihood",
    "log_lstar0",
    "log_likelihood",
    "grad_log_likelihood",
    "log_likelihood_and_grad",
    "exact_p_factor",
    "zeroth_order_hessian",
]

_LOG2PI = math.log(2 * math.pi)


class ApproximationKind(enum.Enum):
    EXACT = "exact"
    SADDLEPOINT = "spa"
    ZEROTH_ORDER = "zeroth"
    NORMAL_APPROX = "normal"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        aliases = {"saddlepoint": "spa", "zerothorder": "zeroth", "zeroth_order": "zeroth",
                   "normalapprox": "normal", "normal_approx": "normal"}
        key = str(value).strip().lower()
        return cls(aliases.get(key, key))


class QuadratureScheme(enum.Enum):
    TRAPEZOID_PERIODIC = "trapezoid_periodic"
    PLAIN_TRAPEZOID = "plain_trapezoid"
    TANH_SINH = "tanh_sinh"


@dataclass(frozen=True)
class QuadratureConfig:
    """Inversion settings.

    Continuous models use a truncated trapezoid rule on
    ``[-R, R]^m`` with ``R = truncation_radius_multiplier * max_j sqrt((K0''^{-1})_jj / n)``.
    If the integrand has not decayed to ``tail_tol`` at the edge, the radius and
    node count are doubled up to ``max_doublings`` times; a one-dimensional
    integrand with algebraic tails then falls back to an oscillatory
    semi-infinite rule (``oscillatory_fallback``).  Lattice models use the
    periodic trapezoid rule on ``[-pi, pi)^m`` with at least ``lattice_nodes``
    nodes per axis.
    """

    nodes_per_dim: int = 201
    truncation_radius_multiplier: float = 12.0
    scheme: QuadratureScheme = QuadratureScheme.PLAIN_TRAPEZOID
    lattice_nodes: int = 256
    tail_tol: float = 1e-13
    max_doublings: int = 4
    imag_tol: float = 1e-8
    oscillatory_fallback: bool = True

    def __post_init__(self):
        if self.nodes_per_dim < 3 or self.nodes_per_dim % 2 == 0:
            raise ValueError("nodes_per_dim must be odd so that phi = 0 is a node")
        if self.lattice_nodes < 2 or self.lattice_nodes % 2:
            raise ValueError("lattice_nodes must be even")
        if self.scheme is QuadratureScheme.TANH_SINH:
            raise NotSupported("tanh_sinh inversion is not implemented")


@dataclass(frozen=True)
class Observation:
    """Observed ``x = n*y``; ``y`` is the implied per-summand mean."""

    y: np.ndarray
    n: float

    def __post_init__(self):
        object.__setattr__(self, "y", as_vector(self.y, name="y"))
        if not self.n > 0:
            raise ValueError("n must be positive")

    @classmethod
    def from_x(cls, x, n):
        return cls(as_vector(x, name="x") / n, float(n))

    @property
    def x(self):
        return self.n * self.y


@dataclass
class FactoredLogLikelihood:
    log_lstar: float
    log_p: float
    kind: ApproximationKind
    saddle: SaddleResult | None
    total: float


def log_lstar0(model: CgfModel, theta, s):
    """``K0(s; theta) - s . K0'(s; theta)``."""
    ev = eval_cgf(model, s, theta, [Block.K0, Block.GRAD_S])
    return float(ev.k0 - as_vector(s) @ ev.grad_s)


def _logdet_spd(a):
    c = np.linalg.cholesky(a)
    return 2.0 * float(np.sum(np.log(np.diag(c))))


# ---------------------------------------------------------------------------
# inversion quadrature
# ---------------------------------------------------------------------------


def _unwrap_phase(im, centre):
    """Continuous phase on a 1-d or 2-d grid, anchored at the centre node."""
    two_pi = 2 * math.pi
    if im.ndim == 1:
        out = np.unwrap(im)
        return out - two_pi * np.round(out[centre] / two_pi)
    col = np.unwrap(im[:, centre])
    col -= two_pi * np.round(col[centre] / two_pi)
    rows = np.unwrap(im, axis=1)
    rows += two_pi * np.round((col - rows[:, centre]) / two_pi)[:, None]
    return rows


def _grid(axis, m):
    if m == 1:
        return axis[:, None]
    a, b = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([a, b], axis=-1)


def _edge_max(f):
    a = np.abs(f)
    if a.ndim == 1:
        return max(a[0], a[-1])
    return max(a[0].max(), a[-1].max(), a[:, 0].max(), a[:, -1].max())


def _integrand(model, theta, s, n, phi, k0s, grad_s, centre):
    z = s + 1j * phi
    ell = model.log_mgf_complex(z, theta) - k0s
    im = _unwrap_phase(np.asarray(ell.imag, dtype=float), centre)
    expo = n * (ell.real + 1j * im) - 1j * n * (phi @ grad_s)
    return np.exp(expo), z


def _derivative_terms(model, theta, n, phi, z, ev):
    ds = n * (model.grad_s_complex(z, theta) - ev.grad_s - 1j * (phi @ ev.hess_s))
    dt = n * (model.grad_theta_complex(z, theta) - ev.grad_theta - 1j * (phi @ ev.cross))
    return ds, dt


@dataclass
class _PResult:
    value: float
    d_s: np.ndarray | None = None
    d_theta: np.ndarray | None = None
    method: str = ""


def _p_lattice(model, theta, s, n, quad, ev, want_grad):
    m = model.m
    sd_x = math.sqrt(n * float(np.max(np.diag(ev.hess_s))))
    nodes = quad.lattice_nodes
    while nodes < 40 * sd_x:
        nodes *= 2
    if nodes ** m > 2**22:
        raise NotSupported("lattice inversion grid too large")
    axis = -math.pi + 2 * math.pi * np.arange(nodes) / nodes
    phi = _grid(axis, m)
    f, z = _integrand(model, theta, s, n, phi, ev.k0, ev.grad_s, nodes // 2)
    w = 1.0 / nodes**m
    return _finish(model, theta, n, phi, z, f, w, ev, want_grad, quad, "lattice_trapezoid")


def _finish(model, theta, n, phi, z, f, w, ev, want_grad, quad, method):
    value = float(np.sum(f.real)) * w
    imag = float(np.sum(f.imag)) * w
    if not value > 0:
        raise QuadratureNonpositive(f"inversion gave P = {value:.3g}")
    if abs(imag) > quad.imag_tol * value:
        raise QuadratureNonpositive(f"inversion imaginary residue {imag:.3g} vs P = {value:.3g}")
    out = _PResult(value, method=method)
    if want_grad:
        ds, dt = _derivative_terms(model, theta, n, phi, z, ev)
        axes = tuple(range(f.ndim))
        out.d_s = np.sum((f[..., None] * ds).real, axis=axes) * w
        out.d_theta = np.sum((f[..., None] * dt).real, axis=axes) * w
    return out


def _p_continuous(model, theta, s, n, quad, ev, want_grad):
    m = model.m
    if m > 2:
        raise NotSupported("exact inversion is limited to m <= 2")
    ainv = np.linalg.inv(ev.hess_s)
    sigma = math.sqrt(float(np.max(np.diag(ainv))) / n)
    radius = quad.truncation_radius_multiplier * sigma
    nodes = quad.nodes_per_dim
    for _ in range(quad.max_doublings + 1):
        axis = np.linspace(-radius, radius, nodes)
        phi = _grid(axis, m)
        f, z = _integrand(model, theta, s, n, phi, ev.k0, ev.grad_s, nodes // 2)
        if _edge_max(f) < quad.tail_tol:
            w = (axis[1] - axis[0]) ** m / (2 * math.pi) ** m
            return _finish(model, theta, n, phi, z, f, w, ev, want_grad, quad, "trapezoid")
        radius *= 2
        nodes = 2 * nodes - 1
        if nodes**m > 2**22:
            break
    if m == 1 and quad.oscillatory_fallback and getattr(model, "complex_log_is_continuous", False):
        return _p_oscillatory(model, theta, s, n, ev, want_grad, sigma)
    raise TailNotDecayed(f"integrand at radius {radius / 2:.3g} has not decayed below {quad.tail_tol:g}")


def _p_oscillatory(model, theta, s, n, ev, want_grad, sigma):
    """``(1/pi) int_0^inf Re[A(phi) e^{-i phi x}] dphi`` for algebraic tails.

    ``A(phi) = exp(n (log M0(s + i phi) - K0(s)))``.  The cos/sin weighted
    semi-infinite rule handles the slowly decaying oscillatory tail.
    """
    x = n * float(ev.grad_s[0])
    scale = 1.0 / math.sqrt(2 * math.pi) / sigma

    def amp(phi):
        z = np.array([[s[0] + 1j * phi]])
        return np.exp(n * (model.log_mgf_complex(z, theta)[0] - ev.k0))

    def weighted(fun):
        # per-cycle flags are noisy at low frequency; the global error estimate decides
        opts = dict(epsabs=1e-12 * scale, limlst=400, limit=400, full_output=1)
        c, ec = integrate.quad(lambda t: fun(t).real, 0, np.inf, weight="cos", wvar=x, **opts)[:2]
        d, ed = integrate.quad(lambda t: fun(t).imag, 0, np.inf, weight="sin", wvar=x, **opts)[:2]
        if not ec + ed <= 1e-8 * max(scale, abs(c) + abs(d)):
            raise TailNotDecayed(f"oscillatory quadrature error estimate {ec + ed:.3g} is too large")
        return (c + d) / math.pi

    value = weighted(amp)
    if not value > 0:
        raise QuadratureNonpositive(f"inversion gave P = {value:.3g}")
    out = _PResult(value, method="oscillatory")
    if want_grad:
        def d_fun(k, which):
            def f(phi):
                z = np.array([[s[0] + 1j * phi]])
                if which == "s":
                    d = n * (model.grad_s_complex(z, theta)[0, k] - ev.grad_s[k] - 1j * phi * ev.hess_s[0, k])
                else:
                    d = n * (model.grad_theta_complex(z, theta)[0, k] - ev.grad_theta[k]
                             - 1j * phi * ev.cross[0, k])
                return amp(phi) * d
            return f

        out.d_s = np.array([weighted(d_fun(k, "s")) for k in range(model.m)])
        out.d_theta = np.array([weighted(d_fun(k, "t")) for k in range(model.p)])
    return out


def _p_factor(model, theta, s, n, quad, want_grad=False):
    if not model.has_complex_mgf:
        raise NotSupported(f"{model.name}: exact likelihood needs the complex MGF")
    blocks = [Block.K0, Block.GRAD_S, Block.HESS_S]
    if want_grad:
        blocks += [Block.GRAD_THETA, Block.CROSS]
    ev = eval_cgf(model, s, theta, blocks)
    if model.is_lattice:
        return _p_lattice(model, theta, s, n, quad, ev, want_grad)
    return _p_continuous(model, theta, s, n, quad, ev, want_grad)


def exact_p_factor(model: CgfModel, theta, s, n, quad: QuadratureConfig | None = None):
    """``P_n(s, theta)`` (continuous) or ``P_int,n(s, theta)`` (integer lattice)."""
    quad = quad or QuadratureConfig()
    theta = as_vector(theta, model.p, "theta")
    s = as_vector(s, model.m, "s")
    return _p_factor(model, theta, s, float(n), quad).value


# ---------------------------------------------------------------------------
# likelihood kinds
# ---------------------------------------------------------------------------


def _normal_approx(model, theta, obs, want_grad):
    zero = np.zeros(model.m)
    if not model.in_domain(zero, theta):
        raise DomainError("normal approximation needs 0 in the interior of S_theta")
    blocks = [Block.GRAD_S, Block.HESS_S] + ([Block.CROSS, Block.DHESS_DTHETA] if want_grad else [])
    ev = eval_cgf(model, zero, theta, blocks)
    n = obs.n
    cov = ev.hess_s
    c = cho_factor(cov)
    r = obs.x - n * ev.grad_s
    w = cho_solve(c, r)
    total = -0.5 * (r @ w) / n - 0.5 * (model.m * (_LOG2PI + math.log(n)) + _logdet_spd(cov))
    grad = None
    if want_grad:
        cinv = cho_solve(c, np.eye(model.m))
        grad = (
            w @ ev.cross
            + 0.5 / n * np.einsum("a,jab,b->j", w, ev.dhess_dtheta, w)
            - 0.5 * np.einsum("ab,jba->j", cinv, ev.dhess_dtheta)
        )
    return float(total), grad


def _spa_logp_grad(model, theta, n, saddle):
    ev = eval_cgf(model, saddle.s_hat, theta, [Block.THIRD_S, Block.DHESS_DTHETA])
    dh = ev.dhess_dtheta + np.einsum("kab,kj->jab", ev.third_s, saddle.sens_theta)
    return -0.5 * np.einsum("ab,jba->j", saddle.sens_y, dh)


def log_likelihood_and_grad(model: CgfModel, theta, obs: Observation, kind, quad=None,
                            want_grad=True, solver: SolverConfig | None = None):
    """Factored log-likelihood and (optionally) its theta-gradient."""
    kind = ApproximationKind.parse(kind)
    quad = quad or QuadratureConfig()
    theta = as_vector(theta, model.p, "theta")
    if obs.y.shape[0] != model.m:
        raise ValueError(f"observation has dimension {obs.y.shape[0]}, model has m={model.m}")
    n = obs.n
    if not model.theta_in_domain(theta):
        raise DomainError(f"{model.name}: theta={theta} outside the parameter domain")

    if kind is ApproximationKind.NORMAL_APPROX:
        total, grad = _normal_approx(model, theta, obs, want_grad)
        try:
            saddle = solve_saddlepoint(model, theta, obs.y, solver, sensitivities=False)
            ev = eval_cgf(model, saddle.s_hat, theta, [Block.K0])
            log_lstar = n * (ev.k0 - saddle.s_hat @ obs.y)
        except (NoSaddlepoint, DomainError, ArithmeticError):
            saddle, log_lstar = None, 0.0
        return FactoredLogLikelihood(log_lstar, total - log_lstar, kind, saddle, total), grad

    saddle = solve_saddlepoint(model, theta, obs.y, solver, sensitivities=want_grad)
    s_hat = saddle.s_hat
    blocks = [Block.K0] + ([Block.GRAD_THETA] if want_grad else [])
    ev = eval_cgf(model, s_hat, theta, blocks)
    log_lstar = n * (ev.k0 - s_hat @ obs.y)
    grad = n * ev.grad_theta if want_grad else None

    if kind is ApproximationKind.ZEROTH_ORDER:
        log_p = 0.0
    elif kind is ApproximationKind.SADDLEPOINT:
        log_p = -0.5 * (model.m * (_LOG2PI + math.log(n)) + _logdet_spd(saddle.hess_at_saddle))
        if want_grad:
            grad = grad + _spa_logp_grad(model, theta, n, saddle)
    else:
        analytic = want_grad and model.has_complex_theta_derivs
        pr = _p_factor(model, theta, s_hat, n, quad, want_grad=analytic)
        log_p = math.log(pr.value)
        if analytic:
            grad = grad + (pr.d_theta + pr.d_s @ saddle.sens_theta) / pr.value
        elif want_grad:
            grad = _fd_total_grad(model, theta, obs, kind, quad, solver)
    total = log_lstar + log_p
    return FactoredLogLikelihood(float(log_lstar), float(log_p), kind, saddle, float(total)), grad


def _fd_total_grad(model, theta, obs, kind, quad, solver):
    g = np.empty(model.p)
    for j in range(model.p):
        e = np.zeros(model.p)
        e[j] = 1e-6
        hi = log_likelihood_and_grad(model, theta + e, obs, kind, quad, False, solver)[0].total
        lo = log_likelihood_and_grad(model, theta - e, obs, kind, quad, False, solver)[0].total
        g[j] = (hi - lo) / 2e-6
    return g


def log_likelihood(model: CgfModel, theta, obs: Observation, kind, quad=None, solver=None):
    return log_likelihood_and_grad(model, theta, obs, kind, quad, False, solver)[0]


def grad_log_likelihood(model: CgfModel, theta, obs: Observation, kind, quad=None, solver=None):
    return log_likelihood_and_grad(model, theta, obs, kind, quad, True, solver)[1]


def zeroth_order_hessian(model: CgfModel, theta, obs: Observation, solver=None):
    """``n (grad_theta^T grad_theta K0 - B^T K0''^{-1} B)`` at the saddlepoint."""
    theta = as_vector(theta, model.p, "theta")
    saddle = solve_saddlepoint(model, theta, obs.y, solver)
    ev = eval_cgf(model, saddle.s_hat, theta, [Block.HESS_THETA, Block.CROSS])
    return obs.n * (ev.hess_theta + ev.cross.T @ saddle.sens_theta)
