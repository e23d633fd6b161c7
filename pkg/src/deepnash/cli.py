"""Command-line entry point.

Every command writes its artifacts and a ``manifest.json`` into ``--out``.
Artifacts are deterministic: the same configuration reproduces them byte for
byte. Set ``DEEPNASH_CACHE_DIR`` to reuse deep-state solves across runs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import pickle
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import bounds as bnd
from . import dss
from . import meanfield as mf
from . import simulate as sim
from .model import ModelError, build_binary_coupled, build_example1, load, validate

EXIT_ERROR = 2
EXIT_RESIDUAL = 3

BUILTINS = ("example1", "example1-small", "binary-coupled")


class CliError(Exception):
    def __init__(self, message, kind="error", path=""):
        super().__init__(message)
        self.kind, self.path = kind, path


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not serializable: {type(o).__name__}")


class Artifacts:
    def __init__(self, out: Path):
        self.out = out
        out.mkdir(parents=True, exist_ok=True)
        self.files: dict[str, str] = {}

    def write(self, name: str, text: str) -> Path:
        path = self.out / name
        path.write_text(text)
        self.files[name] = hashlib.sha256(text.encode()).hexdigest()
        return path


def _config_dict(args) -> dict:
    skip = {"func", "config", "out", "command"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _manifest(args, arts: Artifacts, spec=None, extra=None) -> None:
    cfg = _config_dict(args)
    text = json.dumps(cfg, sort_keys=True)
    man = {
        "command": args.command,
        "config": cfg,
        "config_hash": hashlib.sha256(text.encode()).hexdigest(),
        "seed": getattr(args, "seed", None),
        "versions": {"deepnash": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "artifacts": dict(sorted(arts.files.items())),
    }
    if spec is not None:
        man["model_digest"] = spec.digest()
    if extra:
        man.update(extra)
    (arts.out / "manifest.json").write_text(_dump(man))


def _spec_from_args(args, *, default="example1"):
    if getattr(args, "model", None):
        spec = load(args.model)
    else:
        name = getattr(args, "builtin", None) or default
        n = args.n
        if name == "example1":
            spec = build_example1(n or 100, beta=args.beta if args.beta is not None else 0.9,
                                  horizon=args.horizon)
            if args.horizon is not None and args.beta is None:
                spec = spec.replace(beta=None)
        elif name == "example1-small":
            spec = build_example1(n or 10, beta=args.beta, horizon=args.horizon or 10)
        elif name == "binary-coupled":
            spec = build_binary_coupled(n or 16, horizon=args.horizon or 4, beta=args.beta)
        else:
            raise CliError(f"unknown builtin model {name!r}", "config", "builtin")
    report = validate(spec)
    if not report.ok:
        raise CliError(str(report), "model-validation", "model")
    return spec


def _options(args) -> dss.SolverOptions:
    for name in ("fp_tol", "vi_tol"):
        if getattr(args, name) <= 0:
            raise CliError(f"--{name.replace('_', '-')} must be > 0", "config", name)
    return dss.SolverOptions(fp_tol=args.fp_tol, vi_tol=args.vi_tol, max_iters=args.max_iters,
                             threads=args.threads, probe=getattr(args, "probe", False))


def _cache_path(spec, args, kind: str) -> Path | None:
    root = os.environ.get("DEEPNASH_CACHE_DIR")
    if not root:
        return None
    key = json.dumps({"model": spec.digest(), "kind": kind, "fp_tol": args.fp_tol, "vi_tol": args.vi_tol,
                      "max_iters": args.max_iters, "version": __version__}, sort_keys=True)
    return Path(root) / (hashlib.sha256(key.encode()).hexdigest() + ".pkl")


def _solve_dss(spec, args):
    path = _cache_path(spec, args, "dss")
    if path is not None and path.exists():
        with open(path, "rb") as fh:
            return pickle.load(fh)
    opts = _options(args)
    if spec.discounted:
        result = dss.solve_discounted(spec, options=opts)
    else:
        result = dss.solve_finite(spec, options=opts)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            pickle.dump(result, fh)
    return result


def _residual_status(args, report, what: str) -> int:
    if report.all_converged:
        return 0
    msg = {"warning": "non-converged fixed points", "solver": what, **report.summary()}
    print(_dump(msg), file=sys.stderr, end="")
    return 0 if args.allow_residual else EXIT_RESIDUAL


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_solve_dss(args) -> int:
    spec = _spec_from_args(args)
    strat, values, report = _solve_dss(spec, args)
    arts = Artifacts(Path(args.out))
    arts.write("strategy.json", _dump(strat.to_json(values)))
    arts.write("values.json", _dump(values.to_json()))
    arts.write("fixed_point_report.csv", report.to_csv())
    summary = report.summary()
    summary["sweep_diffs"] = report.sweep_diffs
    arts.write("report.json", _dump(summary))
    arts.write("model.json", _dump(spec.to_dict()))
    _manifest(args, arts, spec)
    print(_dump(report.summary()), end="")
    return _residual_status(args, report, "dss")


def _load_dss_strategy(path, spec) -> dss.EquilibriumStrategy:
    obj = json.loads(Path(path).read_text())
    if "entries" not in obj:
        raise CliError(f"{path} is not a deep-state strategy", "config", "strategy")
    return dss.EquilibriumStrategy.from_json(obj, spec.n_states)


def cmd_audit(args) -> int:
    spec = _spec_from_args(args)
    strat = _load_dss_strategy(args.strategy, spec)
    res = dss.exploitability_audit(spec, strat)
    arts = Artifacts(Path(args.out))
    out = res.to_json()
    out["fp_tol"] = args.fp_tol
    arts.write("audit.json", _dump(out))
    _manifest(args, arts, spec)
    print(_dump(out), end="")
    if args.fail_above is not None and res.gap > args.fail_above:
        return EXIT_RESIDUAL
    return 0


def cmd_solve_ns(args) -> int:
    spec = _spec_from_args(args)
    opts = _options(args)
    grid = mf.build_grid(spec.n_states, args.grid_k)
    if spec.discounted:
        value, ns, report = mf.solve_smfe_discounted(spec, grid, args.trunc_T, options=opts)
    else:
        value, ns, report = mf.solve_smfe_finite(spec, grid, options=opts)
    arts = Artifacts(Path(args.out))
    arts.write("ns_strategy.json", _dump(ns.to_json()))
    arts.write("grid.csv", grid.to_csv())
    arts.write("fixed_point_report.csv", report.to_csv())
    summary = report.summary()
    summary["sweep_diffs"] = report.sweep_diffs
    arts.write("report.json", _dump(summary))
    arts.write("trajectory.dat", "".join(f"{t} {m!r}\n" for t, m in enumerate(ns.m_trajectory[:, -1])))
    _manifest(args, arts, spec)
    print(_dump(report.summary()), end="")
    return _residual_status(args, report, "mean-field")


def cmd_simulate(args) -> int:
    spec = _spec_from_args(args)
    obj = json.loads(Path(args.strategy).read_text())
    if "m_trajectory" in obj:
        strategy = mf.NSStrategy.from_json(obj)
        horizon = args.horizon_sim or strategy.horizon
    else:
        strategy = dss.EquilibriumStrategy.from_json(obj, spec.n_states)
        horizon = args.horizon_sim or spec.horizon
        if horizon is None:
            raise CliError("--stages is required for a stationary strategy", "config", "stages")
    res = sim.simulate(spec, strategy, horizon, args.replications, args.seed)
    arts = Artifacts(Path(args.out))
    arts.write("trajectories.csv", res.trajectories_csv())
    arts.write("simulation.json", _dump(res.to_json()))
    _manifest(args, arts, spec)
    print(_dump(res.summary()), end="")
    return 0


def cmd_bounds(args) -> int:
    spec = _spec_from_args(args)
    if args.Kc is not None:
        given = args.Kp is not None or args.Km is not None
        consts = bnd.BoundConstants(args.Kp or 0.0, args.Kc, args.Km if args.Km is not None else 1.0,
                                    spec.beta, "user-supplied", spec.decoupled and not given)
    else:
        consts = bnd.estimate_constants(spec, args.samples, args.seed)
    report = bnd.guarantee_report(spec, consts, spec.n, args.gap)
    arts = Artifacts(Path(args.out))
    arts.write("bounds.json", _dump(report))
    _manifest(args, arts, spec)
    refused = report.get("discounted", {}).get("error")
    if refused:
        print(_dump(report["discounted"]), file=sys.stderr, end="")
        return EXIT_ERROR
    print(_dump(report), end="")
    return 0


def cmd_convergence(args) -> int:
    opts = _options(args)
    n_list = [int(v) for v in args.n_list.split(",")]
    horizon = args.horizon or 4

    def template(n):
        return build_binary_coupled(n, horizon=horizon)

    res = sim.convergence_experiment(template, n_list, args.replications, args.seed,
                                     grid_k=args.grid_k, options=opts)
    arts = Artifacts(Path(args.out))
    arts.write("convergence.json", _dump(res.to_json()))
    arts.write("convergence.dat", res.plot_data())
    _manifest(args, arts)
    print(_dump(res.to_json()), end="")
    return 0


def cmd_example1(args) -> int:
    if args.builtin is None and args.model is None:
        args.builtin = "example1"
    spec = _spec_from_args(args)
    strat, values, report = _solve_dss(spec, args)
    arts = Artifacts(Path(args.out))
    arts.write("strategy.json", _dump(strat.to_json(values)))
    arts.write("fixed_point_report.csv", report.to_csv())
    out = {"solver": report.summary()}
    if args.simulate:
        stages = args.horizon_sim or 50
        paths = []
        for r in range(args.initial_states):
            res = sim.simulate(spec, strat, stages, 1, args.seed + r)
            paths.append(res.paths[0, :, 1])
        paths = np.array(paths)
        lo = spec.cost.alpha if hasattr(spec.cost, "alpha") else None
        hi = spec.cost.gamma if hasattr(spec.cost, "gamma") else None
        lines = ["replication,t,request_count"]
        for r, p in enumerate(paths):
            lines.extend(f"{r},{t},{int(c)}" for t, c in enumerate(p))
        arts.write("trajectories.csv", "\n".join(lines) + "\n")
        arts.write("trajectories.dat", "".join(
            f"{t} " + " ".join(str(int(c)) for c in paths[:, t]) + "\n" for t in range(paths.shape[1])))
        if lo is not None:
            tail = paths[:, 4:stages]
            out["band"] = {"lower": lo, "upper": hi, "from_stage": 5,
                           "fraction_inside": float(np.mean((tail >= lo) & (tail <= hi)))}
    arts.write("example1.json", _dump(out))
    _manifest(args, arts, spec)
    print(_dump(out), end="")
    return _residual_status(args, report, "dss")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser):
    p.add_argument("--model", help="model JSON file")
    p.add_argument("--builtin", choices=BUILTINS, help="builtin model instead of --model")
    p.add_argument("--n", type=int, help="population size for builtin models")
    p.add_argument("--horizon", type=int, help="finite horizon for builtin models")
    p.add_argument("--beta", type=float, help="discount factor for builtin models")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--fp-tol", type=float, default=1e-8)
    p.add_argument("--vi-tol", type=float, default=1e-8)
    p.add_argument("--max-iters", type=int, default=10_000)
    p.add_argument("--grid-k", type=int, default=200)
    p.add_argument("--trunc-T", type=int, default=None)
    p.add_argument("--replications", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-list", default="4,8,16,32,64")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--allow-residual", action="store_true",
                   help="exit 0 even if some fixed points did not converge")
    p.add_argument("--config", help="JSON file with option values (a manifest also works)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepnash", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve-dss", help="deep Nash equilibrium under deep-state sharing")
    _common(p)
    p.add_argument("--probe", action="store_true", help="flag nodes with several equilibria")
    p.set_defaults(func=cmd_solve_dss)

    p = sub.add_parser("audit", help="exploitability of a saved deep-state strategy")
    _common(p)
    p.add_argument("--strategy", required=True)
    p.add_argument("--fail-above", type=float, default=None)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("solve-ns", help="sequential mean-field equilibrium (no sharing)")
    _common(p)
    p.set_defaults(func=cmd_solve_ns)

    p = sub.add_parser("simulate", help="Monte Carlo run of a saved strategy")
    _common(p)
    p.add_argument("--strategy", required=True)
    p.add_argument("--stages", dest="horizon_sim", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bounds", help="model constants and approximation guarantees")
    _common(p)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--gap", type=float, default=0.0, help="|d - m| for the finite bound")
    p.add_argument("--Kp", type=float)
    p.add_argument("--Kc", type=float)
    p.add_argument("--Km", type=float)
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("convergence", help="gap between finite-n equilibrium and NS cost")
    _common(p)
    p.set_defaults(func=cmd_convergence)

    p = sub.add_parser("example1", help="solve and simulate the request-control example")
    _common(p)
    p.add_argument("--simulate", action="store_true")
    p.add_argument("--initial-states", type=int, default=20)
    p.add_argument("--stages", dest="horizon_sim", type=int, default=None)
    p.set_defaults(func=cmd_example1)
    return parser


def _apply_config(parser, argv):
    """Options from ``--config`` become defaults; explicit flags still win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return parser.parse_args(argv)
    try:
        cfg = json.loads(Path(known.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config: {exc}", "config", "config") from exc
    cfg = cfg.get("config", cfg)
    args = parser.parse_args(argv)
    sub_parser = parser._subparsers._group_actions[0].choices[args.command]
    valid = {a.dest for a in sub_parser._actions}
    unknown = sorted(k for k in cfg if k not in valid)
    if unknown:
        raise CliError(f"unknown config keys {unknown}", "config", "config")
    sub_parser.set_defaults(**cfg)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        if args.replications < 1:
            raise CliError("--replications must be >= 1", "config", "replications")
        return args.func(args)
    except CliError as exc:
        err = {"error": exc.kind, "message": str(exc), "path": exc.path}
    except ModelError as exc:
        err = {"error": "model", "message": str(exc), "path": getattr(exc, "path", "")}
    except bnd.AssumptionViolation as exc:
        err = exc.to_json()
    except (OSError, ValueError, KeyError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "path": ""}
    print(_dump(err), file=sys.stderr, end="")
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
