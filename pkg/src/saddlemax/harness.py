"""Model registry and experiment runners behind the ``saddlemax`` CLI.

Experiments write a CSV table (floats as ``%.17g``) plus a sidecar
``<output>.json`` with the config echo, library versions and slope fits.

CSV columns per experiment:

* converge: ``n, status, ref_<j>..., theta_<kind>_<j>..., gap_<kind>...``
* sample: ``replicate, status, ref_<j>..., theta_<kind>_<j>...``
* posterior: ``kind, mean_<j>..., cov_<j>_<k>...``
* spa_vs_clt: ``mode, point, n, y, ratio_spa, ratio_clt``
"""

from __future__ import annotations

import csv
import io
import json
import math
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy
from scipy.special import logsumexp

from . import __version__
from .cgf_core import Block, as_vector, eval_cgf
from .errors import GridUnderflow, NotSupported, SaddlemaxError
from .likelihoods import ApproximationKind, Observation, log_likelihood
from .mle import fit_mle, fit_reference_mle, identifiability
from .model_zoo import (
    BirthDeathModel,
    ConcatModel,
    GammaLogModel,
    GammaModel,
    LinearMapModel,
    MixtureNormalModel,
    NormalModel,
    NormalWithSquareModel,
    PoissonModel,
)
from .saddle_solver import solve_saddlepoint

__all__ = [
    "MODEL_IDS",
    "build_model",
    "theta_from_params",
    "ExperimentConfig",
    "SlopeFit",
    "fit_slope",
    "run_converge",
    "run_sample",
    "run_posterior",
    "run_spa_vs_clt",
    "run_experiment",
    "write_csv",
]

_STRUCTURAL = {"t", "blocks", "beta", "A", "offset", "cov", "variant"}


def _base_model(model_id, params):
    if model_id == "poisson":
        return PoissonModel()
    if model_id == "gamma":
        return GammaModel(params.get("variant", "free_alpha_r"))
    if model_id == "gamma_fi":
        return GammaModel("fi")
    if model_id == "gamma_pi":
        return GammaModel("pi")
    if model_id == "normal":
        if "cov" in params:
            return NormalModel.location(np.asarray(params["cov"], dtype=float))
        return NormalModel.univariate()
    if model_id == "normal_square":
        return NormalWithSquareModel()
    if model_id == "gamma_log":
        return GammaLogModel()
    if model_id == "birth_death":
        return BirthDeathModel(float(params.get("t", 1.0)))
    if model_id == "mixture_normal":
        return MixtureNormalModel()
    raise ValueError(f"unknown model id {model_id!r}; known: {', '.join(MODEL_IDS)}")


MODEL_IDS = (
    "poisson", "gamma", "gamma_fi", "gamma_pi", "normal", "normal_square", "gamma_log",
    "birth_death", "mixture_normal",
)


def build_model(model_id, params=None):
    """Build a zoo model from a string id and a flat parameter table.

    Structural keys: ``t`` (birth-death interval), ``cov`` (fixed covariance
    for ``normal``), ``variant`` (``gamma``), ``blocks`` or ``beta``
    (concatenate independent blocks) and ``A`` / ``offset`` (linear map,
    applied last).  Other keys are parameter values, see
    :func:`theta_from_params`.
    """
    params = dict(params or {})
    model = _base_model(model_id, params)
    if "beta" in params or "blocks" in params:
        beta = params.get("beta")
        if beta is None:
            beta = [1.0] * int(params["blocks"])
        model = ConcatModel(model, np.atleast_1d(np.asarray(beta, dtype=float)))
    if "A" in params:
        model = LinearMapModel(np.asarray(params["A"], dtype=float), model, params.get("offset"))
    return model


def theta_from_params(model, params):
    """Collect ``theta`` from ``params`` by the model's parameter names, or ``None``."""
    params = params or {}
    names = list(model.param_names)
    if names and all(nm in params for nm in names):
        return np.array([float(params[nm]) for nm in names])
    return None


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Experiment settings; JSON keys mirror the field names.

    ``y`` is ``y0`` when given, else the model mean at ``theta0`` (with the
    ``omega_indices`` entries replaced by ``omega_prime``); ``xi`` adds
    ``xi/sqrt(n)``.
    """

    model: str
    experiment: str = "converge"
    params: dict = field(default_factory=dict)
    n_grid: list = field(default_factory=list)
    kinds: list = field(default_factory=lambda: ["spa"])
    theta0: list | None = None
    y0: list | None = None
    omega_prime: list | None = None
    omega_indices: list = field(default_factory=list)
    xi: list | None = None
    replicates: int = 1
    seed: int = 0
    output: str | None = None
    theta_init: list | None = None
    box: list | None = None
    tol: float = 1e-10
    slope_window: int = 5
    gap_coords: list | None = None
    data_model: str | None = None
    data_params: dict | None = None
    data_theta: list | None = None
    deterministic: bool = False
    grid_points: int | None = None
    grid_halfwidth: float = 8.0
    s_grid: list = field(default_factory=list)
    y_scaled: list = field(default_factory=list)
    threads: int = 1

    def __post_init__(self):
        self.experiment = self.experiment.replace("-", "_")
        if self.experiment not in ("converge", "sample", "posterior", "spa_vs_clt"):
            raise ValueError(f"unknown experiment {self.experiment!r}")
        if any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            raise ValueError("n_grid must be strictly increasing")
        if any(not n > 0 for n in self.n_grid):
            raise ValueError("n_grid entries must be positive")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.kinds = [ApproximationKind.parse(k).value for k in self.kinds]

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def build(self):
        model = build_model(self.model, self.params)
        theta0 = None
        if self.theta0 is not None:
            theta0 = as_vector(self.theta0, model.p, "theta0")
        else:
            theta0 = theta_from_params(model, self.params)
        return model, theta0

    def y_at(self, model, theta0, n):
        if self.y0 is not None:
            y = as_vector(self.y0, model.m, "y0")
        else:
            if theta0 is None:
                raise ValueError("theta0 or y0 is required")
            th = theta0.copy()
            if self.omega_prime is not None:
                th[list(self.omega_indices)] = self.omega_prime
            y = model.mean(th)
        if self.xi is not None:
            y = y + as_vector(self.xi, model.m, "xi") / math.sqrt(n)
        return y

    def start(self, model, theta0):
        init = self.theta_init if self.theta_init is not None else theta0
        if init is None:
            raise ValueError("theta_init or theta0 is required")
        return as_vector(init, model.p, "theta_init")


# ---------------------------------------------------------------------------
# slopes and output
# ---------------------------------------------------------------------------


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    r_squared: float
    n_used: list
    noisy: bool


def fit_slope(n_values, gaps, window=None):
    """Least squares of ``log gap`` on ``log n`` over the largest ``window`` n with positive gap."""
    pairs = [(float(n), float(g)) for n, g in zip(n_values, gaps) if g is not None and g > 0
             and np.isfinite(g)]
    pairs.sort()
    if window is not None:
        pairs = pairs[-window:]
    if len(pairs) < 2:
        return SlopeFit(float("nan"), float("nan"), float("nan"), [p[0] for p in pairs], True)
    lx = np.log([p[0] for p in pairs])
    ly = np.log([p[1] for p in pairs])
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss if ss > 0 else 1.0
    return SlopeFit(float(slope), float(intercept), r2, [p[0] for p in pairs], r2 < 0.98)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


def write_csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _metadata(cfg, extra):
    meta = {
        "config": asdict(cfg),
        "versions": {
            "saddlemax": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }
    meta.update(extra)
    return meta


def _emit(cfg, csv_text, meta):
    if cfg.output:
        out = Path(cfg.output)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(csv_text)
        Path(str(out) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=_jsonable))


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, SlopeFit):
        return asdict(v)
    raise TypeError(f"cannot serialise {type(v).__name__}")


def _fit_kind(model, obs, kind, init, box, tol):
    kind = ApproximationKind.parse(kind)
    if kind is ApproximationKind.EXACT:
        return fit_reference_mle(model, obs, init, box, tol)
    return fit_mle(model, obs, kind, init, box, tol)


# ---------------------------------------------------------------------------
# converge
# ---------------------------------------------------------------------------


def _converge_row(cfg_dict, n):
    cfg = ExperimentConfig.from_dict(cfg_dict)
    model, theta0 = cfg.build()
    init = cfg.start(model, theta0)
    y = cfg.y_at(model, theta0, n)
    obs = Observation(y, n)
    coords = cfg.gap_coords if cfg.gap_coords is not None else list(range(model.p))
    try:
        ref = fit_reference_mle(model, obs, init, cfg.box, cfg.tol)
        out = {"ref": ref.theta_hat, "source": ref.source, "theta": {}, "gap": {}, "status": "ok"}
        for k in cfg.kinds:
            if k == "exact" and ref.source != "closed_form":
                fit = ref
            else:
                fit = fit_mle(model, obs, k, init, cfg.box, cfg.tol)
            out["theta"][k] = fit.theta_hat
            out["gap"][k] = float(np.max(np.abs(fit.theta_hat[coords] - ref.theta_hat[coords])))
    except (SaddlemaxError, ValueError) as exc:
        return {"status": f"failed: {type(exc).__name__}: {exc}".replace("\n", " ")}
    return out


def _pmap(fn, args, threads):
    if threads and threads > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, *zip(*args)))
    return [fn(*a) for a in args]


def run_converge(cfg: ExperimentConfig):
    """Fit every kind at each n and fit log-log slopes of the gaps to the exact MLE.

    Returns ``(rows, slopes, csv_text, metadata)``.
    """
    model, theta0 = cfg.build()
    cfg_dict = asdict(cfg)
    results = _pmap(_converge_row, [(cfg_dict, n) for n in cfg.n_grid], cfg.threads)
    p = model.p
    header = ["n", "status"] + [f"ref_{j}" for j in range(p)]
    header += [f"theta_{k}_{j}" for k in cfg.kinds for j in range(p)] + [f"gap_{k}" for k in cfg.kinds]
    rows = []
    for n, r in zip(cfg.n_grid, results):
        if r["status"] != "ok":
            rows.append([float(n), r["status"]] + [None] * (len(header) - 2))
            continue
        row = [float(n), "ok"] + list(r["ref"])
        for k in cfg.kinds:
            row += list(r["theta"][k])
        row += [r["gap"][k] for k in cfg.kinds]
        rows.append(row)
    slopes = {}
    for k in cfg.kinds:
        if k == "exact":
            continue
        gaps = [r["gap"][k] if r["status"] == "ok" else None for r in results]
        slopes[k] = fit_slope(cfg.n_grid, gaps, cfg.slope_window)
    sources = sorted({r["source"] for r in results if r["status"] == "ok"})
    meta = _metadata(cfg, {
        "reference_source": sources,
        "slope_window": f"largest {cfg.slope_window} n values with positive gap",
        "slopes": {k: asdict(v) for k, v in slopes.items()},
        "noisy": sorted(k for k, v in slopes.items() if v.noisy),
    })
    text = write_csv(header, rows)
    _emit(cfg, text, meta)
    return results, slopes, text, meta


# ---------------------------------------------------------------------------
# sample
# ---------------------------------------------------------------------------


def _data_model(cfg, model, theta0):
    if cfg.data_model is None:
        return model, theta0
    dm = build_model(cfg.data_model, cfg.data_params or {})
    dth = as_vector(cfg.data_theta, dm.p, "data_theta") if cfg.data_theta is not None else theta_from_params(dm, cfg.data_params)
    if dth is None:
        raise ValueError("data_theta is required with data_model")
    return dm, dth


def _sample_replicate(cfg_dict, r):
    cfg = ExperimentConfig.from_dict(cfg_dict)
    model, theta0 = cfg.build()
    dm, dth = _data_model(cfg, model, theta0)
    n = cfg.n_grid[0]
    init = cfg.start(model, theta0)
    if cfg.deterministic:
        x = n * dm.mean(dth)
    else:
        rng = np.random.default_rng(int(cfg.seed) ^ int(r))
        x = np.asarray(dm.sample(dth, n, rng), dtype=float)
    obs = Observation.from_x(x, n)
    try:
        thetas = {k: _fit_kind(model, obs, k, init, cfg.box, cfg.tol).theta_hat for k in cfg.kinds}
    except (SaddlemaxError, ValueError) as exc:
        return {"status": f"failed: {type(exc).__name__}", "x": x}
    return {"status": "ok", "x": x, "theta": thetas}


def _theory_cov(cfg, model, theta0):
    """``H^{-1} B^T A^{-1} Sigma A^{-1} B H^{-1}`` at the data mean (``-H^{-1}`` when well specified)."""
    dm, dth = _data_model(cfg, model, theta0)
    y0 = dm.mean(dth)
    sigma = eval_cgf(dm, np.zeros(dm.m), dth, [Block.HESS_S]).hess_s
    s0 = solve_saddlepoint(model, theta0, y0, sensitivities=False).s_hat
    rep = identifiability(model, s0, theta0)
    hinv = np.linalg.inv(rep.H)
    ainv = np.linalg.inv(rep.A)
    g = ainv @ rep.B @ hinv
    return g.T @ sigma @ g


def run_sample(cfg: ExperimentConfig):
    """Monte-Carlo sampling distribution of ``sqrt(n)(theta_hat - theta0)`` per kind.

    Replicate ``r`` uses ``numpy.random.default_rng(seed ^ r)``.  Returns
    ``(summary, csv_text, metadata)``.
    """
    model, theta0 = cfg.build()
    if theta0 is None:
        raise ValueError("theta0 is required")
    n = cfg.n_grid[0]
    cfg_dict = asdict(cfg)
    results = _pmap(_sample_replicate, [(cfg_dict, r) for r in range(cfg.replicates)], cfg.threads)
    ok = [r for r in results if r["status"] == "ok"]
    failed = len(results) - len(ok)
    summary = {"n": n, "replicates": cfg.replicates, "failed": failed,
               "failed_fraction": failed / cfg.replicates, "kinds": {}}
    for k in cfg.kinds:
        z = np.array([math.sqrt(n) * (r["theta"][k] - theta0) for r in ok]).reshape(len(ok), model.p)
        summary["kinds"][k] = {
            "mean": z.mean(axis=0) if len(ok) else None,
            "cov": np.atleast_2d(np.cov(z, rowvar=False, ddof=1)) if len(ok) > 1 else None,
        }
    if len(cfg.kinds) > 1 and ok:
        gaps = [max(float(np.max(np.abs(r["theta"][a] - r["theta"][b])))
                    for a in cfg.kinds for b in cfg.kinds) for r in ok]
        summary["max_cross_kind_gap"] = max(gaps)
    try:
        summary["theory_cov"] = _theory_cov(cfg, model, theta0)
    except (SaddlemaxError, ValueError, NotSupported) as exc:
        summary["theory_cov"] = None
        summary["theory_cov_error"] = str(exc)
    summary["passed_failure_budget"] = summary["failed_fraction"] <= 0.01

    header = ["replicate", "status"] + [f"x_{j}" for j in range(model.m)]
    header += [f"theta_{k}_{j}" for k in cfg.kinds for j in range(model.p)]
    rows = []
    for i, r in enumerate(results):
        row = [i, r["status"]] + list(np.atleast_1d(r["x"]).astype(float))
        for k in cfg.kinds:
            row += list(r["theta"][k]) if r["status"] == "ok" else [None] * model.p
        rows.append(row)
    text = write_csv(header, rows)
    meta = _metadata(cfg, {"summary": summary, "rng": "numpy default_rng(seed ^ replicate)"})
    _emit(cfg, text, meta)
    if not summary["passed_failure_budget"]:
        raise SaddlemaxError(f"{failed} of {cfg.replicates} replicates failed (more than 1%)")
    return summary, text, meta


# ---------------------------------------------------------------------------
# posterior
# ---------------------------------------------------------------------------


def run_posterior(cfg: ExperimentConfig):
    """Flat-prior grid posterior of ``sqrt(n)(Theta - theta0)`` per kind.

    The grid spans ``theta0 +- grid_halfwidth/sqrt(n)`` per coordinate.
    Returns ``(summary, csv_text, metadata)``.
    """
    model, theta0 = cfg.build()
    if theta0 is None:
        raise ValueError("theta0 is required")
    if model.p > 2:
        raise NotSupported("grid posteriors need p <= 2")
    n = cfg.n_grid[0]
    obs = Observation(cfg.y_at(model, theta0, n), n)
    pts = cfg.grid_points or (4001 if model.p == 1 else 201)
    half = cfg.grid_halfwidth / math.sqrt(n)
    axes = [np.linspace(t - half, t + half, pts) for t in theta0]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, model.p)
    summary = {"n": n, "grid_points": pts, "halfwidth": half, "kinds": {}}
    rows = []
    for k in cfg.kinds:
        ll = np.full(mesh.shape[0], -np.inf)
        for i, th in enumerate(mesh):
            if not model.theta_in_domain(th):
                continue
            try:
                ll[i] = log_likelihood(model, th, obs, k).total
            except (SaddlemaxError, ValueError):
                pass
        if not np.any(np.isfinite(ll)):
            raise GridUnderflow(f"every grid log-likelihood is -inf for kind {k}")
        w = np.exp(ll - logsumexp(ll))
        z = math.sqrt(n) * (mesh - theta0)
        mean = w @ z
        cov = (z - mean).T @ ((z - mean) * w[:, None])
        summary["kinds"][k] = {"mean": mean, "cov": cov, "theta_mean": w @ mesh}
        rows.append([k] + list(mean) + list(cov.ravel()))
    header = ["kind"] + [f"mean_{j}" for j in range(model.p)]
    header += [f"cov_{i}_{j}" for i in range(model.p) for j in range(model.p)]
    text = write_csv(header, rows)
    meta = _metadata(cfg, {"summary": summary, "prior": "flat on the grid box"})
    _emit(cfg, text, meta)
    return summary, text, meta


# ---------------------------------------------------------------------------
# saddlepoint vs normal approximation
# ---------------------------------------------------------------------------


def run_spa_vs_clt(cfg: ExperimentConfig):
    """Relative density errors ``|exp(approx - exact) - 1|`` of the SPA and the CLT.

    Points come from ``s_grid`` (``y = K0'(s; theta0)``) and ``y_scaled``
    (``y = y0 (1 + c/sqrt(n))`` with ``y0`` the model mean).  Returns
    ``(rows, slopes, csv_text, metadata)``; slopes are SPA error vs n per ``s``.
    """
    model, theta0 = cfg.build()
    if model.m != 1 or not model.has_closed_form_likelihood:
        raise NotSupported("spa_vs_clt needs a univariate model with a closed-form density")
    y0 = model.mean(theta0)
    pts = [("s", float(s)) for s in cfg.s_grid] + [("y_scaled", float(c)) for c in cfg.y_scaled]
    rows = []
    for mode, v in pts:
        for n in cfg.n_grid:
            if mode == "s":
                y = eval_cgf(model, [v], theta0, [Block.GRAD_S]).grad_s
            else:
                y = y0 * (1 + v / math.sqrt(n))
            obs = Observation(y, n)
            exact = model.closed_form_log_density(theta0, obs.x, n)
            spa = log_likelihood(model, theta0, obs, "spa").total
            clt = log_likelihood(model, theta0, obs, "normal").total
            rows.append([mode, v, float(n), float(y[0]), abs(math.expm1(spa - exact)),
                         abs(math.expm1(clt - exact))])
    slopes = {}
    for mode, v in pts:
        if mode == "s" and v != 0:
            sel = [r for r in rows if r[0] == "s" and r[1] == v]
            slopes[f"s={v:g}"] = fit_slope([r[2] for r in sel], [r[4] for r in sel], cfg.slope_window)
    text = write_csv(["mode", "point", "n", "y", "ratio_spa", "ratio_clt"], rows)
    meta = _metadata(cfg, {"slopes": {k: asdict(v) for k, v in slopes.items()}})
    _emit(cfg, text, meta)
    return rows, slopes, text, meta


def run_experiment(cfg: ExperimentConfig):
    runner = {
        "converge": run_converge,
        "sample": run_sample,
        "posterior": run_posterior,
        "spa_vs_clt": run_spa_vs_clt,
    }[cfg.experiment]
    return runner(cfg)

