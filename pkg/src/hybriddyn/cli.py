"""Command-line front end.

Configuration precedence: built-in defaults < ``--config`` file (flat
``key = value`` lines with namespaced keys such as ``em.sgd.batch``) < flags.
Exit codes: 0 success, 1 usage or input error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .data import read_dataset, write_dataset
from .em import EmOptions, fit_em
from .envs import (AffineModel, ENV_IDS, collect_trajectories, default_init, hanging_init,
                   make_env, sweep_nmse)
from .errors import HybridDynError
from .features import polynomial
from .hbreps import RepsConfig, hbreps_iterate
from .priors import HyperParams
from .rarhmm import FORMAT_VERSION, HybridPolicy, ModelParams, count_parameters, forecast_sweep

USAGE_KINDS = {"ParseError", "DimensionMismatch", "DomainError", "UnsupportedEnv"}

# config-file key -> argparse destination
CONFIG_KEYS = {
    "seed": "seed", "threads": "threads",
    "env.id": "env", "env.dt": "dt", "env.noise": "noise", "env.init": "init",
    "sim.n": "n", "sim.t": "t", "sim.policy": "policy",
    "em.k": "k", "em.iters": "iters", "em.tol": "tol", "em.solver": "solver",
    "em.sgd.batch": "sgd_batch", "em.sgd.step": "sgd_step", "em.sgd.decay": "sgd_decay",
    "em.sgd.epochs": "sgd_epochs", "em.eb": "eb", "em.eb.step": "eb_step",
    "em.link": "link", "em.link.width": "width", "em.tied_noise": "tied_noise",
    "clone.degree": "degree",
    "reps.epsilon": "epsilon", "reps.theta": "theta", "reps.samples": "samples",
    "reps.iters": "iters", "reps.mode": "mode", "reps.value_reg": "value_reg",
    "reps.eval_rollouts": "eval_rollouts",
    "eval.splits": "splits", "eval.train_fraction": "train_fraction",
    "forecast.horizons": "horizons",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

def _num(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def emit_metrics(rows, path) -> None:
    """CSV with a header row; floats written with round-trip precision."""
    rows = list(rows)
    fields: list[str] = []
    for r in rows:
        fields += [k for k in r if k not in fields]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(_num(v)) if isinstance(_num(v), float) else _num(v)
                        for k, v in r.items()})


def write_model(path, model: ModelParams, hyper: HyperParams | None = None, extra=None) -> None:
    doc = {"format_version": FORMAT_VERSION, "model": model.to_dict(),
           "hyper": None if hyper is None else hyper.to_dict(),
           "parameter_count": count_parameters(model)}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1))


def read_model(path) -> tuple[ModelParams, HyperParams | None]:
    from .errors import ParseError

    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid model document ({exc.msg})") from exc
    if doc.get("format_version") != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported format_version {doc.get('format_version')!r}")
    hyper = HyperParams.from_dict(doc["hyper"]) if doc.get("hyper") else None
    return ModelParams.from_dict(doc["model"]), hyper


def read_config(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        out[CONFIG_KEYS[key]] = value
    return out


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    if str(s).lower() in ("1", "true", "yes", "on"):
        return True
    if str(s).lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


def _horizons(s) -> list[int]:
    try:
        return [int(h) for h in str(s).split(",") if h.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad horizon list {s!r}") from exc


def _em_flags(p):
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--solver", choices=["sgd", "lbfgs"], default="sgd")
    p.add_argument("--sgd-batch", dest="sgd_batch", type=int, default=256)
    p.add_argument("--sgd-step", dest="sgd_step", type=float, default=1e-2)
    p.add_argument("--sgd-decay", dest="sgd_decay", type=float, default=100.0)
    p.add_argument("--sgd-epochs", dest="sgd_epochs", type=int, default=5)
    p.add_argument("--eb", type=_bool, default=True)
    p.add_argument("--eb-step", dest="eb_step", type=float, default=1e-2)
    p.add_argument("--link", choices=["linear", "neural"], default="linear")
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--tied-noise", dest="tied_noise", type=_bool, default=False)
    p.add_argument("--out", required=True)
    p.add_argument("--diagnostics", default=None)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", default=None)
    common.add_argument("--threads", type=int, default=None)

    parser = _Parser(prog="hybriddyn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("simulate", parents=[common], help="collect a dataset")
    p.add_argument("--env", choices=ENV_IDS, required=True)
    p.add_argument("--policy", default="random", help="random, expert or a model file")
    p.add_argument("--n", type=int, default=25)
    p.add_argument("--t", type=int, default=250)
    p.add_argument("--dt", type=float, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--init", choices=["default", "hanging"], default="default")
    p.add_argument("--out", required=True)

    for name, helptext in (("sysid", "fit an open-loop model"),
                           ("clone", "fit a closed-loop model (behavioral cloning)")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        _em_flags(p)
        if name == "clone":
            p.add_argument("--degree", type=int, default=3)

    p = sub.add_parser("forecast", parents=[common], help="forecast NMSE per horizon")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--train", default=None, help="training data for the affine baseline")
    p.add_argument("--horizons", type=_horizons, default=[1, 20, 40, 60, 80])
    p.add_argument("--out", required=True)

    p = sub.add_parser("rl", parents=[common], help="hybrid REPS from a fitted model")
    p.add_argument("--env", choices=ENV_IDS, required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--dt", type=float, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--iters", type=int, default=30)
    p.add_argument("--samples", type=int, default=5000)
    p.add_argument("--epsilon", type=float, default=RepsConfig.epsilon)
    p.add_argument("--theta", type=float, default=RepsConfig.theta_reset)
    p.add_argument("--value-reg", dest="value_reg", type=float, default=RepsConfig.value_reg)
    p.add_argument("--value-degree", dest="value_degree", type=int, default=3)
    p.add_argument("--policy-degree", dest="policy_degree", type=int, default=3)
    p.add_argument("--mode", choices=["hbreps", "hireps", "flat_reps"], default="hbreps")
    p.add_argument("--eval-rollouts", dest="eval_rollouts", type=int, default=20)
    p.add_argument("--out", required=True)
    p.add_argument("--policy-out", dest="policy_out", default=None)

    p = sub.add_parser("eval", parents=[common], help="split protocol: rARHMM vs affine NMSE")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--splits", type=int, default=24)
    p.add_argument("--train-fraction", dest="train_fraction", type=float, default=0.5)
    p.add_argument("--horizons", type=_horizons, default=[1, 20, 40, 60, 80])
    p.add_argument("--out", required=True)
    return parser


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        cfg = read_config(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        defaults = {}
        for dest, raw in cfg.items():
            if dest not in known:
                raise UsageError(f"config key for {dest!r} does not apply to {args.command}")
            action = known[dest]
            defaults[dest] = action.type(raw) if action.type else raw
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _em_options(args) -> EmOptions:
    return EmOptions(max_iters=args.iters, tol=args.tol, transition_solver=args.solver,
                     sgd_batch=args.sgd_batch, sgd_step=args.sgd_step, sgd_decay=args.sgd_decay,
                     sgd_epochs=args.sgd_epochs, eb=args.eb, eb_step=args.eb_step,
                     link_kind=args.link, link_width=args.width, seed=args.seed)


def cmd_simulate(args) -> None:
    spec = make_env(args.env, dt=args.dt, noise_std=args.noise)
    policy = args.policy
    if policy not in ("random", "expert"):
        model, _ = read_model(policy)
        policy = HybridPolicy(model, "mean", action_limit=spec.action_limit)
    init = hanging_init(spec) if args.init == "hanging" else default_init(spec)
    write_dataset(collect_trajectories(spec, policy, args.n, args.t, init, args.seed), args.out)


def _fit(args, closed_loop: bool) -> None:
    from .em import default_hyper

    data = read_dataset(args.data)
    feats = polynomial(data[0].state_dim, args.degree) if closed_loop else None
    hyper = default_hyper(data, args.k, feats, tied_noise=args.tied_noise)
    res = fit_em(data, hyper, args.k, _em_options(args), np.random.default_rng(args.seed), feats)
    write_model(args.out, res.model, res.hyper)
    emit_metrics(res.diagnostics, args.diagnostics or str(args.out) + ".diagnostics.csv")


def _nmse_table(errors_per_traj, horizons, variance) -> dict[int, list[float]]:
    table = {h: [] for h in horizons}
    for errs in errors_per_traj:
        for h, v in sweep_nmse(errs, variance).items():
            if np.isfinite(v):
                table[h].append(v)
    return table


def cmd_forecast(args) -> None:
    model, _ = read_model(args.model)
    test = read_dataset(args.data)
    var = np.concatenate([t.x for t in test]).var(axis=0)
    rows = []
    models = [("rarhmm", lambda t: forecast_sweep(model, t, args.horizons))]
    if args.train:
        aff = AffineModel.fit(read_dataset(args.train))
        models.append(("affine", lambda t: aff.forecast_sweep(t, args.horizons)))
    for name, fn in models:
        table = _nmse_table([fn(t) for t in test], args.horizons, var)
        rows += [{"model": name, "horizon": h, "mean": float(np.mean(v)) if v else float("nan"),
                  "std": float(np.std(v)) if v else float("nan")} for h, v in table.items()]
    emit_metrics(rows, args.out)


def cmd_eval(args) -> None:
    data = read_dataset(args.data)
    rng = np.random.default_rng(args.seed)
    n_train = max(1, int(round(args.train_fraction * len(data))))
    if n_train >= len(data):
        raise UsageError("need at least one test trajectory")
    scores = {("rarhmm", h): [] for h in args.horizons}
    scores.update({("affine", h): [] for h in args.horizons})
    for split in range(args.splits):
        order = rng.permutation(len(data))
        train = [data[i] for i in order[:n_train]]
        test = [data[i] for i in order[n_train:]]
        var = np.concatenate([t.x for t in test]).var(axis=0)
        res = fit_em(train, None, args.k, EmOptions(max_iters=args.iters, seed=args.seed + split),
                     np.random.default_rng(args.seed + split))
        aff = AffineModel.fit(train)
        for name, fn in (("rarhmm", lambda t: forecast_sweep(res.model, t, args.horizons)),
                         ("affine", lambda t: aff.forecast_sweep(t, args.horizons))):
            errs = [fn(t) for t in test]
            pooled = {h: np.concatenate([e[h] for e in errs]) for h in args.horizons}
            for h, v in sweep_nmse(pooled, var).items():
                scores[(name, h)].append(v)
    rows = [{"model": name, "horizon": h, "mean": float(np.nanmean(v)), "std": float(np.nanstd(v)),
             "splits": len(v)} for (name, h), v in scores.items()]
    emit_metrics(rows, args.out)


def cmd_rl(args) -> None:
    spec = make_env(args.env, dt=args.dt, noise_std=args.noise)
    model, _ = read_model(args.model)
    cfg = RepsConfig(epsilon=args.epsilon, theta_reset=args.theta, samples_per_iter=args.samples,
                     iters=args.iters, value_degree=args.value_degree,
                     policy_degree=args.policy_degree, mode=args.mode, value_reg=args.value_reg,
                     eval_rollouts=args.eval_rollouts, seed=args.seed)
    res = hbreps_iterate(spec, model, cfg, rng=np.random.default_rng(args.seed))
    emit_metrics(res.curve, args.out)
    if args.policy_out:
        write_model(args.policy_out, res.model,
                    extra={"value": {"features": res.value.features.to_dict(),
                                     "tau": res.value.tau.tolist()}})


COMMANDS = {"simulate": cmd_simulate, "sysid": lambda a: _fit(a, False),
            "clone": lambda a: _fit(a, True), "forecast": cmd_forecast, "rl": cmd_rl,
            "eval": cmd_eval}


def _report(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        threads = args.threads or os.environ.get("HYBRIDDYN_THREADS")
        if threads is not None and int(threads) < 1:
            raise UsageError("threads must be positive")
        COMMANDS[args.command](args)
    except UsageError as exc:
        _report("UsageError", str(exc))
        return 1
    except HybridDynError as exc:
        _report(exc.kind, str(exc))
        return 1 if exc.kind in USAGE_KINDS else 2
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        _report("IOError", str(exc))
        return 1
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        _report("NumericalError", str(exc))
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
