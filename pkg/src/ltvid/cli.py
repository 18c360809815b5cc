"""Command-line front end.

Exit codes: 0 ok, 2 usage or unreadable input, 3 ill-posed data, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import io as lio
from .errors import DataError, NumericalError, PhaseUndefined, RankDeficient
from .ltv import (AUTO_SPARSE_FRACTION, ELEMENTWISE, GROUP, ParameterEvolution,
                  check_identifiability, fit_l2, fit_segments_dp, fit_sparse,
                  select_lambda_ml, sparse_lambda_max)
from .numeric import fit_lti

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
AUTO_GRID = np.logspace(-2, 4, 7)

L2_METHODS = ("l2d1", "l2d2", "poly")
SPARSE_METHODS = {"gl1": (GROUP, 1), "gl2": (GROUP, 2), "l1": (ELEMENTWISE, 1)}
METHODS = L2_METHODS + tuple(SPARSE_METHODS) + ("dp", "lti")


class UsageError(Exception):
    pass


def _lambda_arg(text):
    if text == "auto":
        return text
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid lambda {text!r}") from None
    if not np.isfinite(v) or v < 0:
        raise argparse.ArgumentTypeError("lambda must be a nonnegative number or 'auto'")
    return v


def _float_list(text):
    """Comma-separated reals; a trailing ``pi`` multiplies by pi (``4pi``)."""
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        try:
            out.append(float(tok[:-2] or 1) * np.pi if tok.endswith("pi") else float(tok))
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid number {tok!r}") from None
    return out


def _load(fn, path):
    try:
        return fn(path)
    except DataError as e:
        raise UsageError(str(e)) from e


# ---------------------------------------------------------------------------
# ident


def _evolution(args):
    if args.method == "l2d1":
        return ParameterEvolution.identity()
    if args.method == "l2d2":
        return ParameterEvolution.second_order()
    if not args.poly:
        raise UsageError("--method poly needs --poly coefficients")
    return ParameterEvolution.polynomial(args.poly)


def _prior_from_file(path, K):
    model = _load(lio.load_model, path)
    if not hasattr(model, "param_covs") or model.param_covs is None:
        raise UsageError("prior model must be an LTV model with parameter covariances")
    params, covs = model.params, model.param_covs
    if params.shape[1] != K:
        raise UsageError("prior model dimensions do not match the data")

    def prior(t):
        if t >= params.shape[0]:
            return None, None
        return params[t], covs[t]
    return prior


def identify(traj, method, lam="auto", segments=1, poly=None, prior=None):
    """Library path of ``ident``; returns ``(model, summary dict)``."""
    ns = argparse.Namespace(method=method, poly=poly)
    summary = {"method": method}
    if method in L2_METHODS:
        evo = _evolution(ns)
        if lam == "auto":
            lam, _ = select_lambda_ml(traj, AUTO_GRID, evo)
        model = fit_l2(traj, lam, evo, prior=prior)
        summary.update(penalty="squared 2-norm", order=evo.order, **{"lambda": lam})
    elif method in SPARSE_METHODS:
        pen, order = SPARSE_METHODS[method]
        if lam == "auto":
            lam = AUTO_SPARSE_FRACTION * sparse_lambda_max(traj, order, pen)
        model = fit_sparse(traj, lam, order, pen)
        summary.update(penalty="group 2-norm" if pen == GROUP else "1-norm", order=order,
                       **{"lambda": lam})
    elif method == "dp":
        model = fit_segments_dp(traj, segments)
        summary.update(penalty="segments", order=0, breakpoints=list(model.breakpoints))
    elif method == "lti":
        lam_v = 0.0 if lam == "auto" else lam
        model = fit_lti(traj, lam_v)
        summary.update(penalty="ridge", order=0, **{"lambda": lam_v})
    else:
        raise UsageError(f"unknown method {method!r}")
    return model, summary


def _step_norm_rows(model, method):
    if method == "lti":
        return []
    ltv = model.to_ltv() if hasattr(model, "to_ltv") else model
    norms = ltv.step_norms(1)
    return [[t + 1, float(v)] for t, v in enumerate(norms)]


def cmd_ident(args, out):
    traj = _load(lio.load_trajectory, args.input)
    prior = None
    if args.prior:
        if args.method not in L2_METHODS:
            raise UsageError("--prior is only supported by the l2 methods")
        prior = _prior_from_file(args.prior, traj.n * (traj.n + traj.m))
    try:
        model, summary = identify(traj, args.method, args.lam, args.segments, args.poly, prior)
    except RankDeficient as e:
        ident = check_identifiability(traj, 1)
        raise DataError(f"{e}; identifiability: smallest singular value "
                        f"{ident.min_singular_value:.3g} (well posed: {ident.well_posed})") from e
    rows = _step_norm_rows(model, args.method)
    if rows:
        t_max, v_max = max(rows, key=lambda r: r[1])
        summary["largest_step_t"] = int(t_max)
        summary["largest_step"] = v_max
    meta = {"method": args.method, "lambda": summary.get("lambda"), "seed": None}
    if args.output:
        lio.save_model(args.output, model, meta)
    for key in ("method", "penalty", "order", "lambda", "breakpoints", "largest_step_t"):
        if key in summary:
            out.write(f"# {key}: {summary[key]}\n")
    text = lio.table_to_csv(["t", "step_norm"], rows)
    if args.steps:
        lio.atomic_write(args.steps, text)
    else:
        out.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# spectral


def spectral_tables(est, grid, ci=None, n_mc=2000, seed=0):
    """Power table and functional-dependency table as CSV text."""
    from .spectral import amplitude, confidence_bands, phase, power_spectrum

    power = lio.table_to_csv(["omega", "power"],
                             [[float(w), float(p)] for w, p in zip(est.omega, power_spectrum(est))])
    header = ["omega", "v", "amplitude", "phase"]
    if ci is not None:
        header += ["amplitude_lo", "amplitude_hi", "phase_lo", "phase_hi"]
    rows = []
    for i, w in enumerate(est.omega):
        amp = amplitude(est, i, grid)
        ph = np.full(grid.size, np.nan)
        ok = amp >= 1e-12
        if np.any(ok):
            try:
                ph[ok] = phase(est, i, grid[ok])
            except PhaseUndefined:
                pass
        if ci is not None:
            b = confidence_bands(est, i, grid, ci, n_mc, seed)
            cols = [b.amplitude_lo, b.amplitude_hi, b.phase_lo, b.phase_hi]
        else:
            cols = []
        for g in range(grid.size):
            rows.append([float(w), float(grid[g]), float(amp[g]), float(ph[g])]
                        + [float(c[g]) for c in cols])
    return power, lio.table_to_csv(header, rows)


def cmd_spectral(args, out):
    from .spectral import (DEMO_OMEGA, BasisFunctionExpansion, fit_spectrum,
                           spectral_lambda_max, demo_signal)

    if args.demo == "ch10":
        sig = demo_signal(seed=args.seed)
        freqs = args.freqs or list(DEMO_OMEGA)
        J = args.nbasis or 50
        reg = args.reg or "ridge"
        lam = 0.01 if args.lam is None else args.lam
    else:
        if not args.input:
            raise UsageError("need an input file or --demo ch10")
        sig = _load(lio.load_signal, args.input)
        freqs = args.freqs
        J = args.nbasis or 10
        reg = args.reg or "none"
        lam = 0.0 if args.lam is None else args.lam
    if not freqs:
        raise UsageError("need at least one frequency (--freqs)")
    if args.ci is not None and reg not in ("none", "ridge"):
        raise UsageError("--ci needs --reg none or ridge")
    if args.ci is not None and not 0 < args.ci < 1:
        raise UsageError("--ci must lie in (0, 1)")
    bfe = BasisFunctionExpansion.uniform(sig.v, J)
    if lam == "auto":
        if reg in ("l1", "group_l2"):
            lam = AUTO_SPARSE_FRACTION * spectral_lambda_max(sig, freqs, bfe, reg)
        else:
            raise UsageError("--lambda auto is only defined for sparse regularizers here")
    est = fit_spectrum(sig, freqs, bfe, reg, lam)
    grid = np.linspace(float(sig.v.min()), float(sig.v.max()), args.grid)
    power, table = spectral_tables(est, grid, args.ci, args.mc, args.seed)
    if args.output:
        lio.save_model(args.output, est, {"method": reg, "lambda": lam, "seed": args.seed})
    if args.table:
        lio.atomic_write(args.table, table)
    out.write(power)
    return EXIT_OK


# ---------------------------------------------------------------------------
# rl


def cmd_rl(args, out):
    from .trajopt import pendulum_damping_task, rl_loop

    if args.iters < 1:
        raise UsageError("--iters must be at least 1")
    task = pendulum_damping_task(scale=RL_COST_SCALE)
    kw = {} if args.eps is None else {"eps": args.eps}
    res = rl_loop(task, args.model, args.iters, args.seed, **kw)
    text = lio.table_to_csv(["iteration", "cost"],
                            [[i + 1, float(c)] for i, c in enumerate(res.costs)])
    if args.output:
        lio.atomic_write(args.output, text)
    else:
        out.write(text)
    return EXIT_OK


#: cost scale of the CLI's pendulum task (makes Q_uu^-1 of order one)
RL_COST_SCALE = 1000.0


# ---------------------------------------------------------------------------
# simulate


def simulate(gen, seed=0, T=None, n=None, dt=None, sigma=None):
    """Library path of ``simulate``; returns ``(Trajectory, metadata dict)``."""
    from . import simulators as sims

    meta = {"generator": gen, "seed": seed}
    if gen == "jump":
        spec = sims.SimSpec(T=T, seed=seed, sigma_e=sigma)
        res = sims.gen_jump_linear(spec)
        meta["breakpoints"] = [int(b) for b in res.breakpoints]
    elif gen == "drift":
        res = sims.gen_drifting_ltv(sims.SimSpec(T=T, seed=seed, sigma_v=sigma),
                                    n=n or 3)
    elif gen == "pendulum":
        params = sims.PendulumParams(dt=dt or 0.01)
        res = sims.gen_pendulum(sims.SimSpec(T=T, seed=seed, sigma_meas=sigma or 0.0), params)
    elif gen == "randlin":
        n = n or 10
        dt = dt or 0.02
        res, sys_ = sims.gen_random_linear(sims.SimSpec(T=T, seed=seed, sigma_v=sigma), n, dt)
        mags = np.abs(np.linalg.eigvals(sys_.A))
        meta.update(n=n, dt=dt, eigenvalue_magnitude=float(np.exp(-dt * dt)),
                    eigenvalue_magnitudes=[float(v) for v in np.sort(mags)],
                    A=sys_.A.tolist(), B=sys_.B.tolist())
    else:
        raise UsageError(f"unknown generator {gen!r}")
    meta["T"] = res.traj.T
    return res.traj, meta


def cmd_simulate(args, out):
    traj, meta = simulate(args.gen, args.seed, args.T, args.n, args.dt, args.sigma)
    text = lio.trajectory_to_csv(traj)
    if args.output:
        lio.atomic_write(args.output, text)
        lio.atomic_write(args.output + ".meta.json", json.dumps(meta, indent=1, sort_keys=True) + "\n")
    else:
        out.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ltvid", description="LTV identification, LPV spectra and model-based RL")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("ident", help="identify a (time-varying) linear model from a trajectory CSV")
    q.add_argument("input")
    q.add_argument("--method", choices=METHODS, required=True)
    q.add_argument("--lambda", dest="lam", type=_lambda_arg, default="auto")
    q.add_argument("--segments", type=int, default=1, help="number of breakpoints for dp")
    q.add_argument("--poly", type=_float_list, help="monic evolution polynomial for poly")
    q.add_argument("--prior", help="LTV model JSON used as a Gaussian prior")
    q.add_argument("--output", help="model JSON")
    q.add_argument("--steps", help="step-norm CSV (default stdout)")
    q.set_defaults(func=cmd_ident)

    q = sub.add_parser("spectral", help="LPV spectral estimate from an x,v,y CSV")
    q.add_argument("input", nargs="?")
    q.add_argument("--demo", choices=["ch10"])
    q.add_argument("--freqs", type=_float_list)
    q.add_argument("--nbasis", type=int)
    q.add_argument("--reg", choices=["none", "ridge", "l1", "group_l2"])
    q.add_argument("--lambda", dest="lam", type=_lambda_arg)
    q.add_argument("--ci", type=float)
    q.add_argument("--grid", type=int, default=101)
    q.add_argument("--mc", type=int, default=2000)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--output", help="model JSON")
    q.add_argument("--table", help="amplitude/phase CSV")
    q.set_defaults(func=cmd_spectral)

    q = sub.add_parser("rl", help="model-based RL on the pendulum damping task")
    q.add_argument("--env", choices=["pendulum"], default="pendulum")
    q.add_argument("--model", choices=["truth", "ltv", "ltv_prior", "lti"], default="ltv")
    q.add_argument("--iters", type=int, default=25)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--eps", type=float, default=None)
    q.add_argument("--output", help="cost-trace CSV (default stdout)")
    q.set_defaults(func=cmd_rl)

    q = sub.add_parser("simulate", help="generate a trajectory CSV")
    q.add_argument("--gen", choices=["jump", "drift", "pendulum", "randlin"], required=True)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--T", type=int)
    q.add_argument("--n", type=int)
    q.add_argument("--dt", type=float)
    q.add_argument("--sigma", type=float, help="generator noise level")
    q.add_argument("--output", help="trajectory CSV (metadata in <output>.meta.json)")
    q.set_defaults(func=cmd_simulate)
    return p


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args, out)
    except UsageError as e:
        sys.stderr.write(f"error: {e}\n")
        return EXIT_USAGE
    except DataError as e:
        sys.stderr.write(f"data error: {e}\n")
        return EXIT_DATA
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as e:
        sys.stderr.write(f"numerical failure: {e}\n")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
