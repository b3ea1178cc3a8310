"""Command-line entry point ``saddlemax``.

Examples::

    saddlemax solve --model poisson --params lambda=3 --y 5
    saddlemax eval --model gamma_fi --params theta=1.2 --kind spa --x 40 --n 32
    saddlemax fit --model gamma_fi --kind exact --x 40 --n 32 --init 1 --box 0.1:10
    saddlemax experiment converge --config conv.json --out conv.csv
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

import numpy as np

from .errors import SaddlemaxError
from .harness import ExperimentConfig, build_model, run_experiment, theta_from_params
from .likelihoods import Observation, log_likelihood_and_grad
from .mle import fit_mle, fit_reference_mle
from .saddle_solver import solve_saddlepoint


def _csv_floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _value(v):
    v = v.strip()
    if v.startswith("[") or v.startswith("{"):
        return json.loads(v)
    try:
        return float(v) if any(c in v for c in ".eE") or not v.lstrip("-").isdigit() else int(v)
    except ValueError:
        return v


def _params(text):
    out = {}
    if not text:
        return out
    for item in _split_top(text):
        key, sep, val = item.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"expected key=value, got {item!r}")
        out[key.strip()] = _value(val)
    return out


def _split_top(text):
    """Split on commas outside brackets."""
    parts, depth, cur = [], 0, ""
    for ch in text:
        if ch in "[{":
            depth += 1
        elif ch in "]}":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append(cur)
            cur = ""
        else:
            cur += ch
    if cur.strip():
        parts.append(cur)
    return parts


def _box(text):
    if not text:
        return None
    out = []
    for item in text.split(","):
        lo, _, hi = item.partition(":")
        out.append((float(lo) if lo.strip() else -np.inf, float(hi) if hi.strip() else np.inf))
    return out


def _model_theta(args, required=True):
    model = build_model(args.model, args.params)
    theta = np.array(_csv_floats(args.theta)) if getattr(args, "theta", None) else theta_from_params(model, args.params)
    if theta is None and required:
        raise SystemExit(f"give --theta or parameters {', '.join(model.param_names)} in --params")
    return model, theta


def _dump(obj, out):
    text = json.dumps(obj, indent=2, default=lambda v: v.tolist() if isinstance(v, np.ndarray) else str(v))
    if out:
        with open(out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _cmd_solve(args):
    model, theta = _model_theta(args)
    res = solve_saddlepoint(model, theta, _csv_floats(args.y))
    _dump({"s_hat": res.s_hat, "hess_at_saddle": res.hess_at_saddle, "sens_theta": res.sens_theta,
           "sens_y": res.sens_y, "residual_norm": res.residual_norm, "iterations": res.iterations},
          args.out)


def _cmd_eval(args):
    model, theta = _model_theta(args)
    obs = Observation.from_x(_csv_floats(args.x), args.n)
    L, g = log_likelihood_and_grad(model, theta, obs, args.kind)
    _dump({"kind": L.kind.value, "total": L.total, "log_lstar": L.log_lstar, "log_p": L.log_p,
           "grad": g, "s_hat": None if L.saddle is None else L.saddle.s_hat}, args.out)


def _cmd_fit(args):
    model = build_model(args.model, args.params)
    obs = Observation.from_x(_csv_floats(args.x), args.n)
    init = _csv_floats(args.init)
    box = _box(args.box)
    if args.kind == "exact" and args.reference:
        fit = fit_reference_mle(model, obs, init, box, args.tol, raise_on_fail=False)
    else:
        fit = fit_mle(model, obs, args.kind, init, box, args.tol, raise_on_fail=False)
    cov = None
    if fit.converged:
        cov = -np.linalg.inv(fit.hessian_theta)
    _dump({"theta_hat": fit.theta_hat, "kind": args.kind, "source": fit.source, "total": fit.total,
           "grad_norm": fit.grad_norm, "hessian_theta": fit.hessian_theta, "cov_plugin": cov,
           "iterations": fit.iterations, "converged": fit.converged,
           "near_singular": fit.near_singular}, args.out)
    return 0 if fit.converged else 3


def _cmd_experiment(args):
    cfg = ExperimentConfig.from_file(args.config)
    cfg = replace(cfg, experiment=args.which)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.threads is not None:
        cfg = replace(cfg, threads=args.threads)
    if args.out:
        cfg = replace(cfg, output=args.out)
    result = run_experiment(cfg)
    text = result[-2]
    if not cfg.output:
        sys.stdout.write(text)
    meta = result[-1]
    for key in ("slopes", "noisy"):
        if key in meta and meta[key]:
            print(f"{key}: {json.dumps(meta[key], default=str)}", file=sys.stderr)


def build_parser():
    ap = argparse.ArgumentParser(prog="saddlemax", description="Saddlepoint likelihoods and MLEs from CGFs.")
    ap.add_argument("--seed", type=int, default=None, help="RNG seed for experiments")
    ap.add_argument("--threads", type=int, default=None, help="worker processes for experiments")
    ap.add_argument("--out", default=None, help="output file (JSON for commands, CSV for experiments)")
    sub = ap.add_subparsers(dest="command", required=True)

    def model_args(p, theta=True):
        p.add_argument("--model", required=True, help="model id, e.g. poisson, gamma_fi, birth_death")
        p.add_argument("--params", type=_params, default={}, help="k=v,... (theta values and structure)")
        if theta:
            p.add_argument("--theta", default=None, help="theta as csv (overrides --params)")

    p = sub.add_parser("solve", help="solve the saddlepoint equation K0'(s) = y")
    model_args(p)
    p.add_argument("--y", required=True, help="implied mean y as csv")
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("eval", help="evaluate a log-likelihood and its gradient")
    model_args(p)
    p.add_argument("--kind", default="spa", choices=["exact", "spa", "zeroth", "normal"])
    p.add_argument("--x", required=True, help="observation as csv")
    p.add_argument("--n", type=float, required=True, help="number of summands")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("fit", help="locally maximise a log-likelihood")
    model_args(p, theta=False)
    p.add_argument("--kind", default="spa", choices=["exact", "spa", "zeroth", "normal"])
    p.add_argument("--x", required=True)
    p.add_argument("--n", type=float, required=True)
    p.add_argument("--init", required=True, help="starting theta as csv")
    p.add_argument("--box", default=None, help="lo:hi,... per coordinate")
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--reference", action="store_true",
                   help="with --kind exact, use the closed-form density when available")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("experiment", help="run an experiment from a JSON config")
    p.add_argument("which", choices=["converge", "sample", "posterior", "spa-vs-clt"])
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_experiment)

    # global options are also accepted after the subcommand
    for sp in sub.choices.values():
        sp.add_argument("--seed", type=int, default=argparse.SUPPRESS, help=argparse.SUPPRESS)
        sp.add_argument("--threads", type=int, default=argparse.SUPPRESS, help=argparse.SUPPRESS)
        sp.add_argument("--out", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        rc = args.func(args)
    except (SaddlemaxError, ValueError) as exc:
        print(f"saddlemax: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return rc or 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
