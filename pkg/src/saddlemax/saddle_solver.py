"""Damped Newton solver for the saddlepoint equation ``K0'(s; theta) = y``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .cgf_core import CgfModel, as_vector
from .errors import DomainError, NoSaddlepoint, SingularHessian

__all__ = ["SolverConfig", "SaddleResult", "solve_saddlepoint", "saddle_sensitivities"]

_COND_LIMIT = 1e14


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-12
    max_iter: int = 100
    init: np.ndarray | None = None

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")


@dataclass
class SaddleResult:
    s_hat: np.ndarray
    hess_at_saddle: np.ndarray
    sens_theta: np.ndarray
    sens_y: np.ndarray
    residual_norm: float
    iterations: int


def _chol(h):
    w = np.linalg.eigvalsh(h)
    if w[0] <= 0 or w[-1] > _COND_LIMIT * w[0]:
        raise SingularHessian(f"K0'' ill-conditioned (eigenvalues {w[0]:.3g}..{w[-1]:.3g})")
    try:
        return cho_factor(h)
    except LinAlgError as exc:  # pragma: no cover - eigvalsh already screened
        raise SingularHessian(str(exc)) from None


def saddle_sensitivities(model: CgfModel, theta, s_hat):
    """``(grad_theta s_hat^T, grad_y s_hat^T) = (-K0''^{-1} B, K0''^{-1})``."""
    theta = as_vector(theta, model.p, "theta")
    s_hat = as_vector(s_hat, model.m, "s")
    from .cgf_core import Block, eval_cgf

    ev = eval_cgf(model, s_hat, theta, [Block.HESS_S, Block.CROSS])
    c = _chol(ev.hess_s)
    return -cho_solve(c, ev.cross), cho_solve(c, np.eye(model.m))


def solve_saddlepoint(model: CgfModel, theta, y, cfg: SolverConfig | None = None,
                      sensitivities=True) -> SaddleResult:
    """Solve ``K0'(s; theta) = y`` by damped Newton from the model hint or zero.

    Steps are halved while the trial point leaves ``S_theta`` or neither the
    convex merit ``K0(s) - s.y`` nor the residual decreases.
    """
    cfg = cfg or SolverConfig()
    theta = as_vector(theta, model.p, "theta")
    y = as_vector(y, model.m, "y")
    if not model.theta_in_domain(theta):
        raise DomainError(f"{model.name}: theta={theta} outside the parameter domain")
    if not np.all(np.isfinite(y)):
        raise NoSaddlepoint("non-finite y")
    if not model.mean_in_interior(theta, y):
        raise NoSaddlepoint(f"y={y} is not an interior mean of {model.name}")

    s = None
    if cfg.init is not None:
        s = as_vector(cfg.init, model.m, "init")
    else:
        hint = model.saddle_hint(theta, y)
        if hint is not None and np.all(np.isfinite(hint)) and model.in_domain(np.asarray(hint, float), theta):
            s = np.asarray(hint, dtype=float)
    if s is None:
        s = np.zeros(model.m)
    if not model.in_domain(s, theta):
        raise NoSaddlepoint("initial dual point is outside S_theta")

    scale = 1.0 + np.max(np.abs(y))
    target = cfg.tol * scale
    grad = model.grad_s(s, theta)
    resid = grad - y
    rnorm = float(np.max(np.abs(resid)))
    merit = model.k0(s, theta) - s @ y
    it = 0
    while rnorm > target:
        if it >= cfg.max_iter:
            raise NoSaddlepoint(f"residual {rnorm:.3g} after {it} iterations (y={y})")
        it += 1
        h = model.hess_s(s, theta)
        try:
            step = -cho_solve(cho_factor(h), resid)
        except LinAlgError:
            raise NoSaddlepoint("K0'' lost positive definiteness") from None
        slope = resid @ step
        t = 1.0
        for _ in range(60):
            trial = s + t * step
            if np.all(np.isfinite(trial)) and model.in_domain(trial, theta):
                g_new = model.grad_s(trial, theta)
                r_new = g_new - y
                rn_new = float(np.max(np.abs(r_new)))
                m_new = model.k0(trial, theta) - trial @ y
                if np.isfinite(m_new) and (m_new <= merit + 1e-4 * t * slope or rn_new < rnorm):
                    break
            t *= 0.5
        else:
            raise NoSaddlepoint(f"line search failed at residual {rnorm:.3g} (y={y})")
        s, resid, rnorm, merit = trial, r_new, rn_new, m_new

    h = np.asarray(model.hess_s(s, theta), dtype=float)
    if sensitivities:
        sens_theta, sens_y = saddle_sensitivities(model, theta, s)
    else:
        _chol(h)
        sens_theta = sens_y = None
    return SaddleResult(s, h, sens_theta, sens_y, rnorm, it)
