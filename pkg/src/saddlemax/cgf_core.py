"""Model contract for per-summand cumulant generating functions.

A model supplies ``K0(s; theta)``, the CGF of one summand ``Y_theta``, together
with derivative blocks in ``s`` and ``theta`` and, optionally, the MGF along
complex dual points ``s + i*phi``.  Under the standard asymptotic regime the
observation is ``x = n*y`` and the full CGF is ``n*K0``.

Conventions: ``s`` is a 1-d array of length ``m`` (a row vector in the maths),
``theta`` is a 1-d array of length ``p``.  Block shapes are

=================  ==============  =======================================
block              shape           meaning
=================  ==============  =======================================
``k0``             ()              K0
``grad_s``         (m,)            K0'
``hess_s``         (m, m)          K0''
``third_s``        (m, m, m)       [k] = dK0''/ds_k
``grad_theta``     (p,)            dK0/dtheta
``cross``          (m, p)          d^2 K0 / ds dtheta
``hess_theta``     (p, p)          d^2 K0 / dtheta^2
``dhess_dtheta``   (p, m, m)       [j] = dK0''/dtheta_j
``d2hess_dtheta``  (p, p, m, m)    [i, j] = d^2 K0''/dtheta_i dtheta_j
=================  ==============  =======================================

Missing analytic blocks are filled by central differences of the next lower
block (``fd_step``), and such blocks are listed in ``CgfEvaluation.fd_blocks``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import DomainError, NotSupported

__all__ = [
    "SupportKind",
    "ModelSignature",
    "Block",
    "CgfEvaluation",
    "CgfModel",
    "eval_cgf",
    "eval_complex_mgf",
    "fd_derivative_oracle",
    "fd_step",
    "as_vector",
]


class SupportKind(enum.Enum):
    CONTINUOUS = "continuous"
    INTEGER_LATTICE = "integer_lattice"


@dataclass(frozen=True)
class ModelSignature:
    m: int
    p: int
    support_kind: SupportKind = SupportKind.CONTINUOUS

    def __post_init__(self):
        if self.m < 1 or self.p < 1:
            raise ValueError("m and p must be positive")


class Block(enum.Enum):
    K0 = "k0"
    GRAD_S = "grad_s"
    HESS_S = "hess_s"
    THIRD_S = "third_s"
    GRAD_THETA = "grad_theta"
    CROSS = "cross"
    HESS_THETA = "hess_theta"
    DHESS_DTHETA = "dhess_dtheta"
    D2HESS_DTHETA = "d2hess_dtheta"


# block -> (lower block it is differentiated from, variable)
_FD_SOURCE = {
    Block.GRAD_S: (Block.K0, "s"),
    Block.HESS_S: (Block.GRAD_S, "s"),
    Block.THIRD_S: (Block.HESS_S, "s"),
    Block.GRAD_THETA: (Block.K0, "theta"),
    Block.CROSS: (Block.GRAD_S, "theta"),
    Block.HESS_THETA: (Block.GRAD_THETA, "theta"),
    Block.DHESS_DTHETA: (Block.HESS_S, "theta"),
    Block.D2HESS_DTHETA: (Block.DHESS_DTHETA, "theta"),
}

_THETA_BLOCKS = frozenset(
    {Block.GRAD_THETA, Block.CROSS, Block.HESS_THETA, Block.DHESS_DTHETA, Block.D2HESS_DTHETA}
)


@dataclass
class CgfEvaluation:
    """Requested derivative blocks of K0 at one ``(s, theta)``.

    Blocks that were not requested are ``None``.
    """

    k0: float | None = None
    grad_s: np.ndarray | None = None
    hess_s: np.ndarray | None = None
    third_s: np.ndarray | None = None
    grad_theta: np.ndarray | None = None
    cross: np.ndarray | None = None
    hess_theta: np.ndarray | None = None
    dhess_dtheta: np.ndarray | None = None
    d2hess_dtheta: np.ndarray | None = None
    fd_blocks: frozenset = field(default_factory=frozenset)

    # alternate name for dhess_dtheta
    @property
    def dK0pp_dtheta(self):
        return self.dhess_dtheta


def as_vector(v, length=None, name="vector"):
    a = np.atleast_1d(np.asarray(v, dtype=float)).ravel()
    if length is not None and a.shape[0] != length:
        raise ValueError(f"{name} must have length {length}, got {a.shape[0]}")
    return a


def fd_step(v):
    """Per-coordinate central-difference step ``max(1e-6, 1e-6*|v|)``."""
    return np.maximum(1e-6, 1e-6 * np.abs(np.asarray(v, dtype=float)))


class CgfModel:
    """Base class for per-summand CGF models.

    Subclasses set ``signature`` and implement ``k0`` and ``in_domain``; every
    other analytic block is optional.  Unimplemented blocks raise
    ``NotImplementedError`` and are filled by finite differences in
    :func:`eval_cgf`.

    The complex methods take ``z`` of shape ``(..., m)`` and evaluate along
    the leading axes.  ``log_mgf_complex`` may use any branch of the complex
    log; the inversion code unwraps the phase along each axis.
    """

    signature: ModelSignature
    name = "model"
    param_names: tuple = ()
    has_analytic_theta_derivs = True
    has_complex_mgf = True
    has_complex_theta_derivs = True
    has_second_nu_derivs = False
    has_closed_form_likelihood = False
    can_sample = False
    # True when log_mgf_complex is continuous along every vertical line in S_theta
    complex_log_is_continuous = False

    @property
    def m(self):
        return self.signature.m

    @property
    def p(self):
        return self.signature.p

    @property
    def support_kind(self):
        return self.signature.support_kind

    @property
    def is_lattice(self):
        return self.signature.support_kind is SupportKind.INTEGER_LATTICE

    # -- domains -----------------------------------------------------------
    def theta_in_domain(self, theta) -> bool:
        return bool(np.all(np.isfinite(theta)))

    def in_domain(self, s, theta) -> bool:
        raise NotImplementedError

    def s_box(self, theta):
        """Open per-coordinate box containing ``S_theta`` (used to damp steps)."""
        return np.full(self.m, -np.inf), np.full(self.m, np.inf)

    def saddle_hint(self, theta, y):
        """Starting point for the saddlepoint solver, or ``None`` for zero."""
        return None

    def mean_in_interior(self, theta, y) -> bool:
        """``False`` when ``y`` is known to lie outside the open set of attainable means."""
        return True

    # -- analytic blocks -----------------------------------------------------
    def k0(self, s, theta):
        raise NotImplementedError

    def grad_s(self, s, theta):
        raise NotImplementedError

    def hess_s(self, s, theta):
        raise NotImplementedError

    def third_s(self, s, theta):
        raise NotImplementedError

    def grad_theta(self, s, theta):
        raise NotImplementedError

    def cross(self, s, theta):
        raise NotImplementedError

    def hess_theta(self, s, theta):
        raise NotImplementedError

    def dhess_dtheta(self, s, theta):
        raise NotImplementedError

    def d2hess_dtheta(self, s, theta):
        raise NotImplementedError

    # -- complex MGF -----------------------------------------------------------
    def log_mgf_complex(self, z, theta):
        raise NotSupported(f"{self.name}: no complex MGF")

    def grad_s_complex(self, z, theta):
        raise NotSupported(f"{self.name}: no complex K0'")

    def grad_theta_complex(self, z, theta):
        raise NotSupported(f"{self.name}: no complex theta-derivatives")

    # -- oracles -----------------------------------------------------------------
    def closed_form_log_density(self, theta, x, n):
        raise NotSupported(f"{self.name}: no closed-form likelihood")

    def closed_form_grad(self, theta, x, n):
        """Gradient of :meth:`closed_form_log_density`; 4th-order FD by default."""
        theta = as_vector(theta, self.p)
        g = np.empty(self.p)
        for j in range(self.p):
            h = 1e-3 * max(1.0, abs(theta[j]))
            e = np.zeros(self.p)
            e[j] = h
            f = [self.closed_form_log_density(theta + k * e, x, n) for k in (-2, -1, 1, 2)]
            g[j] = (f[0] - 8 * f[1] + 8 * f[2] - f[3]) / (12 * h)
        return g

    def sample(self, theta, n, rng):
        raise NotSupported(f"{self.name}: sampling not available")

    def mean(self, theta):
        """Per-summand mean ``K0'(0; theta)``."""
        return np.asarray(self.grad_s(np.zeros(self.m), as_vector(theta, self.p)), dtype=float)

    def __repr__(self):
        return f"{type(self).__name__}(m={self.m}, p={self.p})"


def _analytic(model, block, s, theta):
    return getattr(model, block.value)(s, theta)


def _central_diff(f, v, check):
    """Stack of central differences of ``f`` w.r.t. each coordinate of ``v``."""
    h = fd_step(v)
    out = []
    for k in range(v.shape[0]):
        e = np.zeros_like(v)
        e[k] = h[k]
        if not (check(v + e) and check(v - e)):
            raise DomainError("finite-difference stencil leaves the domain")
        out.append((np.asarray(f(v + e)) - np.asarray(f(v - e))) / (2 * h[k]))
    return np.stack(out)


def _fd_block(model, block, s, theta, allow_fd, used):
    lower, var = _FD_SOURCE[block]

    if var == "s":
        d = _central_diff(
            lambda v: _resolve(model, lower, v, theta, allow_fd, used),
            s,
            lambda v: model.in_domain(v, theta),
        )
    else:
        d = _central_diff(
            lambda v: _resolve(model, lower, s, v, allow_fd, used),
            theta,
            lambda v: model.theta_in_domain(v) and model.in_domain(s, v),
        )
    if block is Block.CROSS:
        return d.T
    if block in (Block.HESS_S, Block.HESS_THETA):
        return 0.5 * (d + d.T)
    return d


def _resolve(model, block, s, theta, allow_fd, used):
    try:
        return _analytic(model, block, s, theta)
    except NotImplementedError:
        if block is Block.K0 or not allow_fd:
            raise NotSupported(f"{model.name}: block {block.value} unavailable") from None
        used.add(block)
        return _fd_block(model, block, s, theta, allow_fd, used)


def eval_cgf(model: CgfModel, s, theta, order: Iterable[Block] | None = None, allow_fd=True):
    """Evaluate the requested blocks of ``K0`` at ``(s, theta)``.

    ``order`` defaults to every block except ``third_s`` and ``d2hess_dtheta``.
    """
    s = as_vector(s, model.m, "s")
    theta = as_vector(theta, model.p, "theta")
    if not model.theta_in_domain(theta):
        raise DomainError(f"{model.name}: theta={theta} outside the parameter domain")
    if not model.in_domain(s, theta):
        raise DomainError(f"{model.name}: s={s} outside S_theta")
    if order is None:
        order = [b for b in Block if b not in (Block.THIRD_S, Block.D2HESS_DTHETA)]
    used = set()
    out = {}
    for b in order:
        b = Block(b)
        out[b.value] = _resolve(model, b, s, theta, allow_fd, used)
    if "k0" in out:
        out["k0"] = float(out["k0"])
    return CgfEvaluation(**out, fd_blocks=frozenset(used))


def fd_derivative_oracle(model: CgfModel, s, theta, which, step=None):
    """Central-difference estimate of block ``which`` from its lower block.

    The lower block is analytic when the model provides it.  ``step`` overrides
    the default per-coordinate step.
    """
    block = Block(which)
    if block is Block.K0:
        raise ValueError("K0 has no lower block")
    s = as_vector(s, model.m, "s")
    theta = as_vector(theta, model.p, "theta")
    if not (model.theta_in_domain(theta) and model.in_domain(s, theta)):
        raise DomainError("oracle point outside the domain")
    if step is None:
        return _fd_block(model, block, s, theta, True, set())
    lower, var = _FD_SOURCE[block]
    v0 = s if var == "s" else theta
    out = []
    for k in range(v0.shape[0]):
        e = np.zeros_like(v0)
        e[k] = step
        if var == "s":
            pts = (s + e, theta), (s - e, theta)
        else:
            pts = (s, theta + e), (s, theta - e)
        for ss, tt in pts:
            if not (model.theta_in_domain(tt) and model.in_domain(ss, tt)):
                raise DomainError("finite-difference stencil leaves the domain")
        hi = _resolve(model, lower, *pts[0], True, set())
        lo = _resolve(model, lower, *pts[1], True, set())
        out.append((np.asarray(hi) - np.asarray(lo)) / (2 * step))
    d = np.stack(out)
    if block is Block.CROSS:
        return d.T
    if block in (Block.HESS_S, Block.HESS_THETA):
        return 0.5 * (d + d.T)
    return d


def eval_complex_mgf(model: CgfModel, s, phi, theta):
    """``M0(s + i*phi)`` and ``K0'(s + i*phi)`` at a single complex dual point."""
    if not model.has_complex_mgf:
        raise NotSupported(f"{model.name}: no complex MGF")
    s = as_vector(s, model.m, "s")
    phi = as_vector(phi, model.m, "phi")
    theta = as_vector(theta, model.p, "theta")
    if not (model.theta_in_domain(theta) and model.in_domain(s, theta)):
        raise DomainError("real part outside S_theta")
    z = (s + 1j * phi)[None, :]
    m0 = complex(np.exp(model.log_mgf_complex(z, theta))[0])
    kp = np.asarray(model.grad_s_complex(z, theta))[0]
    return m0, kp
