"""Command-line interface: ``fedspa run | account | calibrate-sigma | bound | calibrate-clip``.

Exit codes: 0 success, 1 usage error, 2 bad configuration or input data,
3 runtime failure, 4 privacy target infeasible.
"""

import argparse
import csv
import json
import math
import re
import sys
from pathlib import Path

import numpy as np

from fedspa import accountant, engine, rng as rngs
from fedspa.config import ConfigError, load_datasets, load_plan, make_partition, make_round_config
from fedspa.errors import (CalibrationError, FedSpaError, FormatError, InvalidParameter, NoFeasibleAlpha,
                           NumericError, ProtocolError)
from fedspa.models import init_params
from fedspa.theory import TheoryConstants, lemma1_rate, optimal_p, theorem2_bound, zeta_dp_sq

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME, EXIT_PRIVACY = 0, 1, 2, 3, 4

ROUND_COLUMNS = ("t", "loss_train", "acc_train", "acc_test", "bits_cum", "eps_realized_max")
SUMMARY_COLUMNS = ("cell", "scheme", "server_update", "p", "sigma", "clip", "T", "best_acc_train",
                   "best_acc_test", "final_loss_train", "cost_mb", "eps_realized_max")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return repr(value)
    return str(value)


def _json_num(x):
    # JSON has no inf; report it as a string
    if isinstance(x, (np.floating, np.integer)):
        x = x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    return x


# -- run ----------------------------------------------------------------------

def _cell_filename(label: str) -> str:
    return "cell_" + re.sub(r"[^A-Za-z0-9_.=-]+", "-", label) + ".csv"


def _participation_bound(plan, cfg) -> int:
    if plan.settings["participation_bound"] == "worst":
        return cfg.T
    return max(1, math.ceil(round(cfg.sample_rate * cfg.T, 9)))


def _resolve_cell(plan, kw, train, partition):
    """Fix the clip and, if a target epsilon is set, the noise level of one cell."""
    clip = kw.get("clip")
    probe = make_round_config(kw, clip=1.0 if clip == "auto" else None)
    spec = engine.model_spec(probe, train)
    if clip == "auto":
        theta0 = init_params(spec, rngs.stream(probe.master_seed, rngs.INIT), probe.init_scale)
        clip = engine.calibrate_clip(spec, theta0, train, partition, plan.settings["clip_samples"],
                                     seed=probe.master_seed)
        if not clip > 0:
            raise ConfigError("automatic clip bound came out as 0; set [round] clip explicitly")
    sigma = None
    target = plan.target_epsilon
    if target is not None and probe.scheme != "fedavg":
        if clip is None:
            raise ConfigError("a target epsilon needs a clipping bound")
        cfg = make_round_config(kw, clip=clip, sigma=0.0)
        m = min(partition.sizes())
        params = engine.accountant_params(cfg, spec.param_dim, m, _participation_bound(plan, cfg))
        sigma = accountant.calibrate_sigma(target, params, cfg.alpha_max, method=plan.settings["calibration_method"])
    return make_round_config(kw, clip=clip, sigma=sigma)


def cmd_run(args) -> int:
    plan = load_plan(args.plan)
    train_full, test = load_datasets(plan.data)
    out = Path(args.output_dir) if args.output_dir else plan.output_dir
    out.mkdir(parents=True, exist_ok=True)
    seed = plan.base.get("master_seed", engine.RoundConfig.master_seed)
    header = f"# plan_sha256={plan.plan_hash} master_seed={seed}"
    summary = []
    try:
        _run_cells(plan, args, train_full, test, out, summary)
    finally:
        # flushed even when a cell fails part-way
        _write_summary(plan, out, header, seed, summary)
    return EXIT_OK


def _run_cells(plan, args, train_full, test, out, summary):
    for label, kw in plan.cells():
        n_agents = kw.get("n_agents", engine.RoundConfig.n_agents)
        train, part = make_partition(train_full, plan.data, n_agents)
        cfg = _resolve_cell(plan, kw, train, part)
        path = out / _cell_filename(label)
        with open(path, "w", newline="") as fh:
            fh.write(f"# plan_sha256={plan.plan_hash} master_seed={cfg.master_seed} cell={label}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(ROUND_COLUMNS)

            def emit(rec):
                writer.writerow([_fmt(rec.t), _fmt(rec.loss_train), _fmt(rec.acc_train), _fmt(rec.acc_test),
                                 _fmt(rec.bits_ideal_cum), _fmt(rec.eps_realized_max)])
                fh.flush()

            result = engine.run(cfg, train, part, test, on_round=emit)
        recs = result.records
        p_eff = cfg.p if cfg.scheme == "fedspa" else 1.0
        cost = engine.bits_to_mb(engine.comm_cost_bits(p_eff, result.spec.param_dim, cfg.T, cfg.sample_rate))
        row = {
            "cell": label, "scheme": cfg.scheme, "server_update": cfg.server_update, "p": p_eff,
            "sigma": cfg.sigma, "clip": cfg.clip, "T": cfg.T,
            "best_acc_train": max((r.acc_train for r in recs), default=None),
            "best_acc_test": max((r.acc_test for r in recs), default=None) if test is not None else None,
            "final_loss_train": recs[-1].loss_train if recs else None,
            "cost_mb": cost,
            "eps_realized_max": recs[-1].eps_realized_max if recs else None,
        }
        summary.append(row)
        if not args.quiet:
            print(f"{label}: best_acc_train={_fmt(row['best_acc_train'])} cost_mb={cost:.6g} "
                  f"sigma={cfg.sigma:.6g}", file=sys.stderr)


def _write_summary(plan, out, header, seed, summary):
    with open(out / "summary.csv", "w", newline="") as fh:
        fh.write(f"{header}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for row in summary:
            writer.writerow([_fmt(row[c]) for c in SUMMARY_COLUMNS])
    doc = {"plan_sha256": plan.plan_hash, "master_seed": seed,
           "cells": [{k: _json_num(v) for k, v in row.items()} for row in summary]}
    (out / "summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# -- account / calibrate-sigma --------------------------------------------------

def _accountant_args(p):
    p.add_argument("--B", type=int, required=True, help="minibatch size")
    p.add_argument("--m", type=int, help="local dataset size (gives q = B/m)")
    p.add_argument("--q", type=float, help="sampling ratio, alternative to --m")
    p.add_argument("--p", type=float, default=1.0, help="sparsification ratio")
    p.add_argument("--G", type=float, default=1.0, help="l2 clipping bound")
    p.add_argument("--tau", type=int, default=1, help="local steps per round")
    p.add_argument("--I", type=int, default=1, dest="participation", help="rounds the agent takes part in")
    p.add_argument("--delta", type=float, default=1e-3)
    p.add_argument("--alpha-max", type=int, default=accountant.DEFAULT_ALPHA_MAX)
    p.add_argument("--constraint", choices=accountant.CONSTRAINT_MODES, default="normalized")


def _params(args, sigma):
    if args.m is None and args.q is None:
        raise UsageError("give --m or --q")
    return accountant.AccountantParams(B=args.B, sigma=sigma, m=args.m, q=args.q, p=args.p, G=args.G,
                                       tau=args.tau, participation=args.participation, delta=args.delta,
                                       constraint=args.constraint)


def cmd_account(args) -> int:
    params = _params(args, args.sigma)
    doc = {"sigma_prime_sq": _json_num(params.sigma_prime_sq), "steps": params.steps, "q": params.q}
    status = EXIT_OK
    alphas = accountant.feasible_alphas(params, args.alpha_max)
    try:
        alpha, eps = accountant.min_epsilon(params, args.alpha_max)
        doc["closed"] = {"best_alpha": alpha, "epsilon": eps, "feasible_alphas": alphas}
    except NoFeasibleAlpha as exc:
        doc["closed"] = {"error": str(exc), "feasible_alphas": alphas}
        status = EXIT_PRIVACY
    alpha, eps = accountant.min_epsilon_series(params, args.alpha_max)
    doc["series"] = {"best_alpha": alpha, "epsilon": _json_num(eps)}
    print(json.dumps(doc, indent=2))
    return status


def cmd_calibrate_sigma(args) -> int:
    params = _params(args, 1.0)
    sigma = accountant.calibrate_sigma(args.target_epsilon, params, args.alpha_max, args.tolerance, args.method)
    check = params.with_sigma(sigma)
    if args.method == "closed":
        alpha, eps = accountant.min_epsilon(check, args.alpha_max)
    else:
        alpha, eps = accountant.min_epsilon_series(check, args.alpha_max)
    print(json.dumps({"sigma": sigma, "epsilon": eps, "best_alpha": alpha, "method": args.method}, indent=2))
    return EXIT_OK


# -- bound ------------------------------------------------------------------------

def cmd_bound(args) -> int:
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    try:
        raw = tomllib.loads(Path(args.constants).read_text())
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{args.constants}: {exc}") from None
    raw = raw.get("constants", raw)
    try:
        c = TheoryConstants.from_dict(raw)
    except InvalidParameter as exc:
        raise ConfigError(str(exc)) from None
    res = theorem2_bound(c)
    doc = {
        "zeta_dp_sq": zeta_dp_sq(c),
        "xi": res.xi,
        "xi_prime": res.xi_prime,
        "bound": res.bound,
        "stepsize_cap": res.stepsize_cap,
        "stepsize_ok": res.stepsize_ok,
        "lemma1_rate": lemma1_rate(c) if c.G > 0 else None,
        "optimal_p": optimal_p(c.G, c.zeta_l, c.d, c.sigma),
    }
    print(json.dumps({k: _json_num(v) for k, v in doc.items()}, indent=2))
    return EXIT_OK


# -- calibrate-clip ------------------------------------------------------------------

def cmd_calibrate_clip(args) -> int:
    plan = load_plan(args.plan)
    train_full, _ = load_datasets(plan.data)
    kw = dict(plan.base)
    kw["clip"] = 1.0
    cfg = make_round_config(kw)
    train, part = make_partition(train_full, plan.data, cfg.n_agents)
    spec = engine.model_spec(cfg, train)
    theta0 = init_params(spec, rngs.stream(cfg.master_seed, rngs.INIT), cfg.init_scale)
    bound = engine.calibrate_clip(spec, theta0, train, part, args.n_samples, seed=cfg.master_seed,
                                  pooled=not args.per_coordinate)
    d = spec.param_dim
    if args.per_coordinate:
        doc = {"d": d, "per_coord_bound": [float(b) for b in bound]}
    else:
        doc = {"d": d, "per_coord_bound": bound, "G": bound * math.sqrt(d)}
    print(json.dumps(doc, indent=2))
    return EXIT_OK


# -- entry point -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedspa", description="Sparsification-amplified DP federated learning simulator")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="run every cell of an experiment plan")
    p.add_argument("plan", help="TOML plan file")
    p.add_argument("--output-dir", help="override [plan] output_dir")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("account", help="epsilon for a parameter set")
    _accountant_args(p)
    p.add_argument("--sigma", type=float, required=True, help="per-coordinate noise std")
    p.set_defaults(func=cmd_account)

    p = sub.add_parser("calibrate-sigma", help="smallest sigma meeting a target epsilon")
    _accountant_args(p)
    p.add_argument("--target-epsilon", type=float, required=True)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--method", choices=("closed", "series"), default="closed")
    p.set_defaults(func=cmd_calibrate_sigma)

    p = sub.add_parser("bound", help="evaluate the convergence bound for constants in a TOML file")
    p.add_argument("constants", help="TOML file with L, G, zeta_l, zeta_g, f0_minus_fstar, ...")
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser("calibrate-clip", help="median-gradient clipping bound for a plan's model and data")
    p.add_argument("plan")
    p.add_argument("--n-samples", type=int, default=100)
    p.add_argument("--per-coordinate", action="store_true", help="report one bound per coordinate")
    p.set_defaults(func=cmd_calibrate_clip)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"fedspa: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CalibrationError, NoFeasibleAlpha) as exc:
        print(f"fedspa: privacy target infeasible: {exc}", file=sys.stderr)
        return EXIT_PRIVACY
    except (ConfigError, FormatError, InvalidParameter, OSError) as exc:
        print(f"fedspa: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ProtocolError, NumericError, FedSpaError) as exc:
        print(f"fedspa: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
