"""Command-line front end.

Every command writes its outputs and a ``manifest.json`` into ``--out``.
Outputs are computed in full before anything is written, so a failing
command leaves no partial files. Exit codes: 0 ok, 2 input error,
3 numerical failure, 4 convergence diagnostic.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
import warnings
from importlib import metadata

import numpy as np

from .calibrated import reference_model
from .core import RatingScale, load_scale, parse_continuous_csv, parse_discrete_csv, save_scale, \
    write_continuous_csv
from .ctmc import GeneratorMatrix, allowed_pairs, load_generator, mle_continuous, save_generator
from .em import EmConfig, em_fit
from .errors import (BoundaryWarning, ConvergenceError, ConvergenceWarning, DataError,
                     NotPositiveDefiniteError, NumericalError, RatingMigrationError)
from .mcmc import McmcConfig, config_dict, posterior_summary, run_chains, save_summary, write_chain_csv
from .momentum import fit_momentum_mle, load_model, save_model
from .selection import bic_compare, cox_momentum_test
from .simulate import SimConfig, monte_carlo_tpm, simulate_ctmc, simulate_momentum
from .wald import hessian, pd_curve, save_intervals, wald_intervals, write_pd_curve

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL, EXIT_CONVERGENCE = 0, 2, 3, 4


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _diagnostic(kind: str, message: str, details: dict | None = None, **extra) -> None:
    doc = {"level": kind, "message": message, **extra}
    for k, v in (details or {}).items():
        doc.setdefault(k, v)
    sys.stderr.write(json.dumps(doc) + "\n")


def parse_grid(text: str) -> np.ndarray:
    """``a:b:step`` (inclusive of ``b`` when it lies on the grid) or a comma list."""
    try:
        if ":" in text:
            a, b, step = (float(x) for x in text.split(":"))
            if not step > 0 or b < a:
                raise ValueError
            n = int(np.floor((b - a) / step + 1e-9))
            return a + step * np.arange(n + 1)
        return np.array([float(x) for x in text.split(",")])
    except ValueError:
        raise DataError(f"cannot parse grid {text!r}; use a:b:step or a comma list") from None


def _scale(args) -> RatingScale:
    return load_scale(args.scale) if getattr(args, "scale", None) else RatingScale.moodys()


def _json_writer(doc):
    def write(path):
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2)
    return write


# each command returns (files, config echo, inputs); files maps name -> writer(path)

def cmd_estimate_em(args):
    scale = _scale(args)
    panel = parse_discrete_csv(args.panel, scale)
    cfg = EmConfig(epsilon=args.epsilon, tol=args.tol, max_iter=args.max_iter, init=args.init)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = em_fit(panel, cfg)
    for w in caught:
        if issubclass(w.category, BoundaryWarning):
            _diagnostic("warning", str(w.message), pairs=res.boundary_pairs)

    def trace(path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["iteration", "loglik"])
            for k, ll in enumerate(res.trace, 1):
                wr.writerow([k, repr(ll)])

    files = {"generator.json": lambda p: save_generator(res.generator, p), "trace.csv": trace}
    echo = {"epsilon": cfg.epsilon, "tol": cfg.tol, "max_iter": cfg.max_iter, "init": cfg.init,
            "n_iter": res.n_iter, "converged": res.converged}
    diag = None if res.converged else f"EM stopped after {res.n_iter} steps without converging"
    return files, echo, [args.panel, args.scale], diag


def cmd_wald(args):
    Q = load_generator(args.generator, load_scale(args.scale) if args.scale else None)
    panel = parse_discrete_csv(args.panel, Q.scale)
    pairs = allowed_pairs(Q, args.threshold)
    bundle = hessian(Q, panel, pairs)
    iv = wald_intervals(Q, bundle, args.level)
    files = {"intervals.json": lambda p: save_intervals(iv, p)}
    echo = {"level": args.level, "threshold": args.threshold, "pairs": pairs.labelled(Q.scale)}
    if args.pd_grid or args.rating:
        if not (args.pd_grid and args.rating):
            raise DataError("--pd-grid and --rating must be given together")
        grid = parse_grid(args.pd_grid)
        i = Q.scale.index(args.rating)
        target = Q.scale.index(args.target) if args.target else None
        points = pd_curve(Q, bundle, i, grid, args.level, target)
        files["pd_curve.csv"] = lambda p: write_pd_curve(points, p)
        echo.update({"pd_grid": args.pd_grid, "rating": args.rating, "target": args.target})
    return files, echo, [args.panel, args.generator, args.scale], None


def cmd_mle_continuous(args):
    scale = _scale(args)
    hist = parse_continuous_csv(args.events, scale, args.window_end)
    Q = mle_continuous(hist, args.first_transition_only)
    files = {"generator.json": lambda p: save_generator(Q, p)}
    return files, {"first_transition_only": args.first_transition_only}, [args.events, args.scale], None


def cmd_fit_momentum(args):
    scale = _scale(args)
    hist = parse_continuous_csv(args.events, scale, args.window_end)
    if hist.n_transitions == 0:
        raise DataError("history contains no transitions")
    cfg = McmcConfig(iterations=args.iterations, burn_in=args.burn_in,
                     proposal_shape=args.proposal_shape, seed=args.seed, chains=args.chains)
    chains = run_chains(hist, cfg, args.workers)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        summary = posterior_summary(chains, args.level)
    diag = None
    for w in caught:
        if issubclass(w.category, ConvergenceWarning):
            diag = str(w.message)
    files = {}
    for k, ch in enumerate(chains):
        files[f"chain_{k}.csv"] = (lambda c: lambda p: write_chain_csv(c, p))(ch)
    files["summary.json"] = lambda p: save_summary(summary, p, {"chains": len(chains),
                                                                 "seeds": [c.seed for c in chains]})
    files["model.json"] = lambda p: save_model(summary.model, p)
    return files, config_dict(cfg), [args.events, args.scale], diag


def _load_dynamics(args):
    if args.model and args.generator:
        raise DataError("give either --model or --generator, not both")
    if args.generator:
        return load_generator(args.generator)
    if args.model:
        return load_model(args.model)
    return reference_model()


def _sim_config(args, grid=()):
    return SimConfig(args.n_firms, args.horizon, tuple(grid), args.seed, args.withdrawal_rate)


def cmd_simulate(args):
    dyn = _load_dynamics(args)
    cfg = _sim_config(args)
    if isinstance(dyn, GeneratorMatrix):
        hist = simulate_ctmc(dyn, cfg, args.workers)
    else:
        hist = simulate_momentum(dyn, cfg, args.workers)
    files = {"events.csv": lambda p: write_continuous_csv(hist, p)}
    return files, _sim_echo(cfg), [args.model, args.generator], None


def _sim_echo(cfg: SimConfig) -> dict:
    return {"n_firms_per_rating": cfg.n_firms_per_rating, "horizon": cfg.horizon,
            "snapshot_grid": list(cfg.snapshot_grid), "seed": cfg.seed,
            "withdrawal_rate": cfg.withdrawal_rate}


def cmd_tpm(args):
    dyn = _load_dynamics(args)
    grid = parse_grid(args.grid)
    cfg = _sim_config(args, grid)
    est = monte_carlo_tpm(dyn, cfg, args.workers)
    labels = dyn.scale.labels
    report = {"times": est.times.tolist(), "labels": list(labels)}
    if est.analytic is not None:
        report["max_abs_z"] = est.max_abs_z()

    def write_csv(path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "from", "to", "p", "se"])
            for k, t in enumerate(est.times):
                for i in range(len(labels)):
                    for j in range(len(labels)):
                        w.writerow([repr(float(t)), labels[i], labels[j], repr(float(est.p[k, i, j])),
                                    repr(float(est.se[k, i, j]))])

    if args.format == "csv":
        files = {"tpm.csv": write_csv}
    else:
        files = {"tpm.json": _json_writer({**report, "p": est.p.tolist(), "se": est.se.tolist()})}
    files["summary.json"] = _json_writer(report)
    return files, _sim_echo(cfg), [args.model, args.generator], None


def cmd_bic(args):
    scale = _scale(args)
    hist = parse_continuous_csv(args.events, scale, args.window_end)
    markov = mle_continuous(hist)
    if args.model:
        model = load_model(args.model)
        source = "given"
    else:
        model = fit_momentum_mle(hist).model
        source = "maximum likelihood"
    rep = bic_compare(hist, markov, model, args.n_definition)
    doc = {**rep.to_dict(), "momentum_source": source, "alpha": list(model.params.alpha),
           "beta": list(model.params.beta)}
    return {"bic.json": _json_writer(doc)}, {"n_definition": args.n_definition,
                                             "momentum_source": source}, [args.events, args.scale, args.model], None


def cmd_cox(args):
    scale = _scale(args)
    hist = parse_continuous_csv(args.events, scale, args.window_end)
    directions = ("downward", "upward") if args.direction == "both" else (args.direction,)
    out = {d: cox_momentum_test(hist, d).to_dict() for d in directions}
    return {"cox.json": _json_writer(out)}, {"direction": args.direction}, [args.events, args.scale], None


def cmd_synth(args):
    model = load_model(args.model) if args.model else reference_model()
    cfg = _sim_config(args)
    hist = simulate_momentum(model, cfg, args.workers)
    files = {"events.csv": lambda p: write_continuous_csv(hist, p),
             "scale.json": lambda p: save_scale(model.scale, p),
             "model.json": lambda p: save_model(model, p)}
    return files, _sim_echo(cfg), [args.model], None


def _add_common(p, seeded=False):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int, default=1)
    if seeded:
        p.add_argument("--seed", type=int, required=True)


def _add_sim(p):
    p.add_argument("--model", help="momentum model JSON (default: reference calibration)")
    p.add_argument("--generator", help="generator JSON (CTMC simulation)")
    p.add_argument("--n-firms", type=int, default=100_000, help="firms per initial rating")
    p.add_argument("--horizon", type=float, default=10.0)
    p.add_argument("--withdrawal-rate", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ratingmigration", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate-em", help="EM generator estimate from a count panel")
    p.add_argument("panel")
    p.add_argument("--scale")
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--max-iter", type=int, default=5000)
    p.add_argument("--init", choices=("diagonal-adjacent", "uniform"), default="diagonal-adjacent")
    _add_common(p)
    p.set_defaults(func=cmd_estimate_em)

    for name in ("wald-ci", "pd-curve"):
        p = sub.add_parser(name, help="Wald intervals and delta-method PD curves")
        p.add_argument("panel")
        p.add_argument("--generator", required=True)
        p.add_argument("--scale")
        p.add_argument("--level", type=float, default=0.95)
        p.add_argument("--threshold", type=float, default=1e-8)
        p.add_argument("--pd-grid", required=name == "pd-curve")
        p.add_argument("--rating", required=name == "pd-curve")
        p.add_argument("--target", help="column label (default: the default state)")
        _add_common(p)
        p.set_defaults(func=cmd_wald)

    def events_parser(name, help_):
        q = sub.add_parser(name, help=help_)
        q.add_argument("events")
        q.add_argument("--scale")
        q.add_argument("--window-end", type=float, default=None)
        return q

    p = events_parser("mle-continuous", "CTMC MLE from continuous event histories")
    p.add_argument("--first-transition-only", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_mle_continuous)

    p = events_parser("fit-momentum", "MCMC calibration of the momentum model")
    p.add_argument("--iterations", type=int, default=11000)
    p.add_argument("--burn-in", type=int, default=1000)
    p.add_argument("--chains", type=int, default=1)
    p.add_argument("--proposal-shape", type=float, default=200.0)
    p.add_argument("--level", type=float, default=0.95)
    _add_common(p, seeded=True)
    p.set_defaults(func=cmd_fit_momentum)

    p = sub.add_parser("simulate", help="simulate event histories")
    _add_sim(p)
    _add_common(p, seeded=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("tpm", help="Monte-Carlo transition matrices")
    _add_sim(p)
    p.add_argument("--grid", default="1", help="snapshot times, a:b:step or comma list")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    _add_common(p, seeded=True)
    p.set_defaults(func=cmd_tpm)

    p = events_parser("bic-compare", "BIC of momentum versus Markov models")
    p.add_argument("--model", help="momentum model JSON (default: maximum likelihood fit)")
    p.add_argument("--n-definition", choices=("transitions", "entities"), default="transitions")
    _add_common(p)
    p.set_defaults(func=cmd_bic)

    p = events_parser("cox-test", "stratified Cox test for rating momentum")
    p.add_argument("--direction", choices=("downward", "upward", "both"), default="both")
    _add_common(p)
    p.set_defaults(func=cmd_cox)

    p = sub.add_parser("synth", help="synthetic rating histories from the momentum model")
    p.add_argument("--model", help="momentum model JSON (default: reference calibration)")
    p.add_argument("--n-firms", type=int, default=250, help="firms per initial rating")
    p.add_argument("--horizon", type=float, default=10.0)
    p.add_argument("--withdrawal-rate", type=float, default=None)
    _add_common(p, seeded=True)
    p.set_defaults(func=cmd_synth, generator=None)
    return parser


def _write_outputs(out: str, files: dict, manifest: dict) -> None:
    os.makedirs(out, exist_ok=True)
    for name, writer in files.items():
        writer(os.path.join(out, name))
    manifest["outputs"] = sorted(files)
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    start = time.perf_counter()
    try:
        files, echo, inputs, diag = args.func(args)
    except NotPositiveDefiniteError as exc:
        _diagnostic("error", str(exc), exc.to_dict(), type="NotPositiveDefinite")
        return EXIT_NUMERICAL
    except ConvergenceError as exc:
        _diagnostic("error", str(exc), type="Convergence")
        return EXIT_CONVERGENCE
    except NumericalError as exc:
        details = exc.to_dict() if hasattr(exc, "to_dict") else {}
        _diagnostic("error", str(exc), details, type=type(exc).__name__)
        return EXIT_NUMERICAL
    except (DataError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        _diagnostic("error", str(exc), type=type(exc).__name__)
        return EXIT_INPUT
    except RatingMigrationError as exc:
        _diagnostic("error", str(exc), type=type(exc).__name__)
        return EXIT_NUMERICAL
    manifest = {"command": args.command, "argv": argv, "inputs": [p for p in inputs if p],
                "config": echo, "seed": getattr(args, "seed", None), "version": _version(),
                "wall_time_seconds": time.perf_counter() - start}
    _write_outputs(args.out, files, manifest)
    if diag:
        _diagnostic("error", diag, type="ConvergenceDiagnostic")
        return EXIT_CONVERGENCE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
