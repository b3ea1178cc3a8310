"""Local maximisation of the likelihood kinds and identifiability diagnostics."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .cgf_core import Block, CgfModel, as_vector, eval_cgf
from .errors import DomainError, NoSaddlepoint, NotConverged, RankDeficient
from .likelihoods import (
    ApproximationKind,
    Observation,
    QuadratureConfig,
    log_likelihood_and_grad,
    zeroth_order_hessian,
)
from .saddle_solver import SolverConfig, solve_saddlepoint

__all__ = [
    "MleFit",
    "fit_mle",
    "fit_reference_mle",
    "mle_error_pair",
    "ParameterSplit",
    "IdentifiabilityMode",
    "IdentifiabilityReport",
    "identifiability",
    "ExpFamilyAdapter",
    "expfamily_mle",
]

_NEAR_SINGULAR = 1e-8


@dataclass
class MleFit:
    """Result of a local likelihood maximisation.

    ``hessian_theta`` is the observed Hessian of the log-likelihood at
    ``theta_hat``; ``trace`` holds the accepted ``(theta, total)`` iterates.
    ``source`` records which objective was maximised.
    """

    theta_hat: np.ndarray
    kind: ApproximationKind | None
    grad_norm: float
    hessian_theta: np.ndarray
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)
    near_singular: bool = False
    source: str = ""
    total: float = float("nan")


def _in_box(theta, lo, hi):
    return bool(np.all(theta > lo) and np.all(theta < hi))


def _fd_hessian(grad, theta, lo, hi):
    """Central differences of ``grad``; steps shrink while the stencil leaves the domain."""
    p = theta.shape[0]
    h = np.empty((p, p))
    for j in range(p):
        step = 1e-5 * max(1.0, abs(theta[j]))
        step = min(step, 0.5 * (theta[j] - lo[j]), 0.5 * (hi[j] - theta[j]))
        for _ in range(20):
            e = np.zeros(p)
            e[j] = step
            try:
                h[:, j] = (grad(theta + e) - grad(theta - e)) / (2 * step)
                break
            except DomainError:
                step *= 0.25
        else:
            raise DomainError("finite-difference Hessian stencil leaves the parameter domain")
    return 0.5 * (h + h.T)


def _ascent_direction(g, h):
    """Newton direction on the eigen-modified Hessian (forced negative definite)."""
    w, v = np.linalg.eigh(h)
    scale = max(1.0, float(np.max(np.abs(w))))
    w_mod = -np.maximum(np.abs(w), 1e-8 * scale)
    return -(v @ ((v.T @ g) / w_mod))


def _clip_step(theta, step, lo, hi):
    """Largest ``t <= 1`` keeping ``theta + t*step`` a fraction inside the box."""
    t = 1.0
    for j in range(theta.shape[0]):
        if step[j] > 0 and np.isfinite(hi[j]):
            t = min(t, 0.9 * (hi[j] - theta[j]) / step[j])
        elif step[j] < 0 and np.isfinite(lo[j]):
            t = min(t, 0.9 * (lo[j] - theta[j]) / step[j])
    return t


def _maximise(objective: Callable, hessian: Callable, theta0, lo, hi, scale, tol, max_iter):
    """Damped Newton ascent; ``objective(theta) -> (total, grad)``.

    ``hessian(theta, g, final)`` is called with ``final=True`` once the
    gradient test passes; that matrix decides convergence and is reported.
    """
    theta = theta0.copy()
    f, g = objective(theta)
    trace = [(theta.copy(), f)]
    target = tol * scale
    it = 0
    h = None
    while True:
        gnorm = float(np.max(np.abs(g)))
        h = hessian(theta, g, gnorm <= target)
        negdef = bool(np.all(np.linalg.eigvalsh(h) < 0))
        if gnorm <= target and negdef:
            return theta, f, g, h, it, True, trace
        if it >= max_iter:
            break
        it += 1
        step = _ascent_direction(g, h)
        t = _clip_step(theta, step, lo, hi)
        slope = float(g @ step)
        accepted = False
        for _ in range(50):
            trial = theta + t * step
            if _in_box(trial, lo, hi):
                try:
                    f_new, g_new = objective(trial)
                except (NoSaddlepoint, DomainError, ArithmeticError):
                    f_new = -math.inf
                if np.isfinite(f_new) and (
                    f_new >= f + 1e-4 * t * slope
                    or (f_new >= f - 1e-12 * (1 + abs(f)) and np.max(np.abs(g_new)) < gnorm)
                ):
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            break
        theta, f, g = trial, f_new, g_new
        trace.append((theta.copy(), f))
    return theta, f, g, h, it, False, trace


def _finish_fit(theta, f, g, h, it, ok, trace, kind, source, tol, scale, raise_on_fail):
    w = np.linalg.eigvalsh(h)
    near = bool(np.min(np.abs(w)) < _NEAR_SINGULAR * np.max(np.abs(w)))
    fit = MleFit(theta, kind, float(np.max(np.abs(g))), h, it, ok, trace, near, source, float(f))
    if not ok and raise_on_fail:
        raise NotConverged(
            f"{source}: gradient norm {fit.grad_norm:.3g} (target {tol * scale:.3g}) after {it} iterations",
            fit,
        )
    return fit


def _box(box, p):
    if box is None:
        return np.full(p, -np.inf), np.full(p, np.inf)
    lo = np.array([b[0] for b in box], dtype=float)
    hi = np.array([b[1] for b in box], dtype=float)
    if lo.shape[0] != p or np.any(lo >= hi):
        raise ValueError("box must give p (lo, hi) pairs with lo < hi")
    return lo, hi


def fit_mle(model: CgfModel, obs: Observation, kind, theta_init, box=None, tol=1e-10,
            max_iter=100, quad: QuadratureConfig | None = None, solver: SolverConfig | None = None,
            raise_on_fail=True) -> MleFit:
    """Local maximiser of the ``kind`` log-likelihood inside ``box``.

    The zeroth-order kind uses its analytic Hessian; the other kinds use
    central differences of the analytic gradient.  Exact fits steer with the
    (much cheaper) saddlepoint Hessian and difference the exact gradient only
    for the final curvature check.  Convergence requires
    ``max|grad| <= tol*(1+n)`` and a negative definite Hessian.
    """
    kind = ApproximationKind.parse(kind)
    theta0 = as_vector(theta_init, model.p, "theta_init")
    lo, hi = _box(box, model.p)
    if not model.theta_in_domain(theta0):
        raise DomainError(f"{model.name}: theta_init outside the parameter domain")
    if not _in_box(theta0, lo, hi):
        raise DomainError("theta_init must lie strictly inside the box")

    def objective(theta):
        L, g = log_likelihood_and_grad(model, theta, obs, kind, quad, True, solver)
        return L.total, g

    def grad_only(theta):
        return objective(theta)[1]

    def spa_grad(theta):
        return log_likelihood_and_grad(model, theta, obs, ApproximationKind.SADDLEPOINT, quad, True, solver)[1]

    if kind is ApproximationKind.ZEROTH_ORDER:
        def hessian(theta, g, final):
            return zeroth_order_hessian(model, theta, obs, solver)
    elif kind is ApproximationKind.EXACT:
        def hessian(theta, g, final):
            if not final:
                try:
                    return _fd_hessian(spa_grad, theta, lo, hi)
                except (NoSaddlepoint, DomainError, ArithmeticError):
                    pass
            return _fd_hessian(grad_only, theta, lo, hi)
    else:
        def hessian(theta, g, final):
            return _fd_hessian(grad_only, theta, lo, hi)

    scale = 1.0 + obs.n
    res = _maximise(objective, hessian, theta0, lo, hi, scale, tol, max_iter)
    return _finish_fit(*res, kind, kind.value, tol, scale, raise_on_fail)


def fit_reference_mle(model: CgfModel, obs: Observation, theta_init, box=None, tol=1e-10,
                      max_iter=100, quad=None, solver=None, raise_on_fail=True) -> MleFit:
    """The exact MLE: closed-form density where the model has one, else the exact kind."""
    if not model.has_closed_form_likelihood:
        fit = fit_mle(model, obs, ApproximationKind.EXACT, theta_init, box, tol, max_iter, quad,
                      solver, raise_on_fail)
        fit.source = "exact_quadrature"
        return fit
    theta0 = as_vector(theta_init, model.p, "theta_init")
    lo, hi = _box(box, model.p)
    if not _in_box(theta0, lo, hi):
        raise DomainError("theta_init must lie strictly inside the box")
    x = obs.x

    def objective(theta):
        if not model.theta_in_domain(theta):
            raise DomainError("theta outside the parameter domain")
        return model.closed_form_log_density(theta, x, obs.n), model.closed_form_grad(theta, x, obs.n)

    def hessian(theta, g, final):
        return _fd_hessian(lambda t: model.closed_form_grad(t, x, obs.n), theta, lo, hi)

    scale = 1.0 + obs.n
    res = _maximise(objective, hessian, theta0, lo, hi, scale, tol, max_iter)
    return _finish_fit(*res, ApproximationKind.EXACT, "closed_form", tol, scale, raise_on_fail)


def mle_error_pair(model: CgfModel, obs: Observation, kinds, theta_init, box=None, tol=1e-10,
                   quad=None, solver=None, reference_for_exact=False):
    """Fit two kinds from the same start and return ``(fit1, fit2, max|diff|)``.

    With ``reference_for_exact`` an exact kind is fitted by :func:`fit_reference_mle`.
    """
    fits = []
    for k in kinds:
        k = ApproximationKind.parse(k)
        if k is ApproximationKind.EXACT and reference_for_exact:
            fits.append(fit_reference_mle(model, obs, theta_init, box, tol, quad=quad, solver=solver))
        else:
            fits.append(fit_mle(model, obs, k, theta_init, box, tol, quad=quad, solver=solver))
    gap = float(np.max(np.abs(fits[0].theta_hat - fits[1].theta_hat)))
    return fits[0], fits[1], gap


# ---------------------------------------------------------------------------
# identifiability
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParameterSplit:
    """``theta = (omega, nu)`` where the model mean depends on ``omega`` only."""

    omega_indices: tuple
    nu_indices: tuple

    def __post_init__(self):
        om, nu = tuple(int(i) for i in self.omega_indices), tuple(int(i) for i in self.nu_indices)
        object.__setattr__(self, "omega_indices", om)
        object.__setattr__(self, "nu_indices", nu)
        if set(om) & set(nu):
            raise ValueError("omega and nu indices overlap")

    def validate(self, p):
        if sorted(self.omega_indices + self.nu_indices) != list(range(p)):
            raise ValueError(f"split must partition 0..{p - 1}")


class IdentifiabilityMode(enum.Enum):
    FULL = "full"
    PARTIAL = "partial"


@dataclass
class IdentifiabilityReport:
    mode: IdentifiabilityMode
    A: np.ndarray
    B: np.ndarray
    H: np.ndarray
    H_negdef: bool
    B_omega: np.ndarray | None = None
    J: np.ndarray | None = None
    projection_residual: float | None = None
    xi0_residuals: np.ndarray | None = None
    E: np.ndarray | None = None
    E_negdef: bool | None = None
    offdiag_max: float | None = None
    offdiag_ok: bool | None = None


def identifiability(model: CgfModel, s0, theta0, split: ParameterSplit | None = None,
                    xi0=None) -> IdentifiabilityReport:
    """Curvature diagnostics at ``(s0, theta0)``.

    Full mode reports ``H = grad_theta^2 K0 - B^T A^{-1} B``.  Partial mode
    (``split`` given, ``s0 = 0``) adds the matrix ``J``, the per-``nu``
    constraint residuals and ``E`` when ``xi0`` is supplied, and the
    off-diagonal check ``max|B_omega^T A^{-1} dA/dnu_j J|``.
    """
    s0 = as_vector(s0, model.m, "s0")
    theta0 = as_vector(theta0, model.p, "theta0")
    need = [Block.HESS_S, Block.CROSS, Block.HESS_THETA]
    if split is not None:
        need += [Block.DHESS_DTHETA]
        if xi0 is not None:
            need += [Block.D2HESS_DTHETA]
    ev = eval_cgf(model, s0, theta0, need)
    A, B = ev.hess_s, ev.cross
    ainv = np.linalg.inv(A)
    ainv = 0.5 * (ainv + ainv.T)
    H = ev.hess_theta - B.T @ ainv @ B
    H = 0.5 * (H + H.T)
    report = IdentifiabilityReport(
        IdentifiabilityMode.FULL, A, B, H, bool(np.all(np.linalg.eigvalsh(H) < 0))
    )
    if split is None:
        return report

    split.validate(model.p)
    if np.any(s0 != 0):
        raise DomainError("partial identifiability is defined at s0 = 0")
    om, nu = list(split.omega_indices), list(split.nu_indices)
    Bw = B[:, om]
    if om:
        if np.linalg.matrix_rank(Bw) < len(om):
            raise RankDeficient(f"B_omega has rank < {len(om)}")
        G = Bw.T @ ainv @ Bw
        J = ainv - ainv @ Bw @ np.linalg.solve(G, Bw.T @ ainv)
    else:
        J = ainv.copy()
    J = 0.5 * (J + J.T)
    Q = ev.dhess_dtheta[nu]
    report.mode = IdentifiabilityMode.PARTIAL
    report.B_omega = Bw
    report.J = J
    report.projection_residual = float(np.max(np.abs(J @ A @ J - J)))
    off = [np.max(np.abs(Bw.T @ ainv @ Qj @ J)) for Qj in Q] if om else [0.0]
    report.offdiag_max = float(max(off, default=0.0))
    report.offdiag_ok = report.offdiag_max <= 1e-10

    if xi0 is not None:
        xi = as_vector(xi0, model.m, "xi0")
        v = J @ xi
        report.xi0_residuals = np.array([v @ Qj @ v - np.trace(ainv @ Qj) for Qj in Q])
        Q2 = ev.d2hess_dtheta[np.ix_(nu, nu)]
        p2 = len(nu)
        E = np.empty((p2, p2))
        for i in range(p2):
            for j in range(p2):
                inner = 0.5 * Q2[i, j] - Q[i] @ J @ Q[j]
                E[i, j] = v @ inner @ v - 0.5 * np.trace(ainv @ Q2[i, j] - ainv @ Q[i] @ ainv @ Q[j])
        E = 0.5 * (E + E.T)
        report.E = E
        report.E_negdef = bool(np.all(np.linalg.eigvalsh(E) < 0)) if p2 else True
    return report


# ---------------------------------------------------------------------------
# exponential families
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExpFamilyAdapter:
    """``K0(s; theta) = rho(eta(theta) + s) - rho(eta(theta))``.

    ``natural_param_map`` maps theta to eta; ``rho`` is the log-partition
    function; ``inverse_map`` (optional) maps eta back to theta.
    """

    natural_param_map: Callable
    rho: Callable
    inverse_map: Callable | None = None

    @classmethod
    def from_model(cls, model):
        """Adapter for a built-in :class:`~saddlemax.model_zoo.ExpFamilyModel`."""
        return cls(lambda th: model.natural(th)[0], model.rho, model.theta_from_natural)


def expfamily_mle(adapter: ExpFamilyAdapter, model: CgfModel, obs: Observation, probes=None,
                  tol=1e-9):
    """``(eta_hat, theta_hat)`` from ``eta_hat = eta(theta_any) + s_hat(theta_any; y)``.

    Two probe parameters are used and must agree to ``tol``; ``theta_hat`` is
    ``None`` without an inverse map.
    """
    if probes is None:
        raise ValueError("two probe parameters are required")
    etas = []
    for th in probes:
        th = as_vector(th, model.p, "probe")
        sad = solve_saddlepoint(model, th, obs.y, sensitivities=False)
        etas.append(np.asarray(adapter.natural_param_map(th), dtype=float) + sad.s_hat)
    spread = max(float(np.max(np.abs(e - etas[0]))) for e in etas)
    if spread > tol * (1 + float(np.max(np.abs(etas[0])))):
        raise NotConverged(f"probe disagreement {spread:.3g} in eta_hat")
    eta = etas[0]
    theta = None if adapter.inverse_map is None else np.asarray(adapter.inverse_map(eta), dtype=float)
    return eta, theta
