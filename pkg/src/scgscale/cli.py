"""Command-line harness: train, sweep, plan, estimate, fit.

Configs are JSON with a schema_version field; unknown keys are rejected so a
mistyped hyperparameter fails loudly instead of silently using a default.
Exit codes: 0 success, 2 config or input error, 3 invariant violation,
4 numeric failure. All emitted floats carry 17 significant digits.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import replace

import numpy as np

from . import estimation, experiments, problems, scaling
from .estimation import FitTerm, PowerLawModel, bundled_constant_laws
from .optimizer import (
    ConstantBeta,
    ScgConfig,
    Stage,
    StagePlan,
    HorizonBeta,
    WarmdownBeta,
    run,
    run_staged,
)
from .scaling import ProblemConstants, TunedConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INVARIANT = 3
EXIT_NUMERIC = 4

_FMT = "{:.17g}".format


class ConfigError(Exception):
    pass


class NumericError(Exception):
    pass


def _fmt_value(v):
    if isinstance(v, float):
        return float(_FMT(v))
    if isinstance(v, dict):
        return {k: _fmt_value(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_fmt_value(x) for x in v]
    return v


def _dump_json(obj, path=None):
    text = json.dumps(_fmt_value(obj), indent=2)
    if path is None:
        print(text)
    else:
        with open(path, "w") as fh:
            fh.write(text + "\n")


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}")


def _require_keys(d: dict, allowed: set[str], required: set[str], where: str):
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    missing = required - set(d)
    if missing:
        raise ConfigError(f"missing keys in {where}: {sorted(missing)}")


def _check_schema_version(d: dict, where: str):
    if d.get("schema_version") != 1:
        raise ConfigError(f"{where} must declare schema_version 1")


def _beta_schedule_from_dict(d: dict):
    _require_keys(d, {"type", "value", "gamma", "total_steps", "warmdown_steps", "c", "iters"}, {"type"}, "beta schedule")
    kind = d["type"]
    try:
        if kind == "constant":
            return ConstantBeta(float(d["value"]))
        if kind == "warmdown":
            if "warmdown_steps" in d:
                return WarmdownBeta(float(d["gamma"]), int(d["total_steps"]), int(d["warmdown_steps"]))
            return WarmdownBeta.default_tail(float(d["gamma"]), int(d["total_steps"]))
        if kind == "horizon":
            return HorizonBeta(float(d["c"]), int(d["iters"]))
    except KeyError as exc:
        raise ConfigError(f"beta schedule is missing {exc}")
    raise ConfigError(f"unknown beta schedule type {kind!r}")


_OPT_KEYS = {
    "variant",
    "alpha",
    "beta",
    "iters",
    "seed",
    "radii",
    "eval_every",
    "store_gradients",
    "momentum_init",
    "check_invariants",
}


def _optimizer_from_dict(d: dict) -> tuple[ScgConfig, str]:
    _require_keys(d, _OPT_KEYS, {"alpha", "beta", "iters"}, "optimizer config")
    variant = d.get("variant", "scg")
    if variant not in ("scg", "uscg"):
        raise ConfigError(f"unknown variant {variant!r}")
    cfg = ScgConfig(
        alpha=float(d["alpha"]),
        beta=_beta_schedule_from_dict(d["beta"]),
        iters=int(d["iters"]),
        seed=int(d.get("seed", 0)),
        radii=tuple(d["radii"]) if d.get("radii") is not None else None,
        eval_every=int(d.get("eval_every", 1)),
        store_gradients=bool(d.get("store_gradients", False)),
        momentum_init=d.get("momentum_init", "first_sample"),
        check_invariants=bool(d.get("check_invariants", True)),
    )
    return cfg, variant


def _stages_from_list(items) -> StagePlan:
    stages = []
    for i, d in enumerate(items):
        _require_keys(
            d,
            {"token_allotment", "B", "S", "beta", "alpha", "note"},
            {"token_allotment", "B", "S", "beta", "alpha"},
            f"stage {i}",
        )
        stages.append(
            Stage(
                token_allotment=float(d["token_allotment"]),
                B=float(d["B"]),
                S=float(d["S"]),
                beta=float(d["beta"]),
                alpha=float(d["alpha"]),
                note=d.get("note", ""),
            )
        )
    return StagePlan(tuple(stages))


def cmd_train(args) -> int:
    cfg_dict = _load_json(args.config)
    _check_schema_version(cfg_dict, "train config")
    _require_keys(
        cfg_dict,
        {"schema_version", "problem", "optimizer", "stages"},
        {"problem", "optimizer"},
        "train config",
    )
    try:
        spec = problems.spec_from_dict(cfg_dict["problem"])
        opt_cfg, variant = _optimizer_from_dict(cfg_dict["optimizer"])
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc))
    os.makedirs(args.out, exist_ok=True)
    if "stages" in cfg_dict:
        plan = _stages_from_list(cfg_dict["stages"])
        log = run_staged(spec, plan, opt_cfg, variant=variant)
    else:
        log = run(spec, opt_cfg, variant=variant)
    if not math.isfinite(log.final_loss):
        raise NumericError(f"final loss is not finite: {log.final_loss}")
    log.to_csv(os.path.join(args.out, "runlog.csv"))
    summary = {
        "schema_version": 1,
        "final_loss": log.final_loss,
        "invariant_violations": log.invariant_violations,
        "checked_steps": log.checked_steps,
        "first_violation": log.first_violation,
        "config": cfg_dict,
    }
    _dump_json(summary, os.path.join(args.out, "summary.json"))
    if log.invariant_violations > 0:
        print(
            f"invariant violations detected: {log.invariant_violations} "
            f"(first: {log.first_violation})",
            file=sys.stderr,
        )
        return EXIT_INVARIANT
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg_dict = _load_json(args.config)
    _check_schema_version(cfg_dict, "sweep config")
    _require_keys(
        cfg_dict,
        {
            "schema_version",
            "problem",
            "token_budget",
            "grid",
            "rule",
            "repetitions",
            "seed_base",
            "constants",
            "eval_stride",
        },
        {"problem", "token_budget", "grid", "rule"},
        "sweep config",
    )
    rule_d = cfg_dict["rule"]
    _require_keys(rule_d, {"kind", "c", "beta", "alpha", "mode"}, {"kind"}, "sweep rule")
    consts = None
    if "constants" in cfg_dict:
        consts = _constants_from_dict(cfg_dict["constants"], "constants")
    try:
        spec = problems.spec_from_dict(cfg_dict["problem"])
        cfg = experiments.SweepConfig(
            problem=spec,
            token_budget=float(cfg_dict["token_budget"]),
            grid=tuple((float(b), float(s)) for b, s in cfg_dict["grid"]),
            rule=experiments.BetaRule(
                kind=rule_d["kind"],
                c=float(rule_d.get("c", 1.0)),
                beta=rule_d.get("beta"),
                alpha=rule_d.get("alpha"),
                mode=rule_d.get("mode", "asymptotic"),
            ),
            repetitions=int(cfg_dict.get("repetitions", 1)),
            seed_base=int(cfg_dict.get("seed_base", 0)),
            constants=consts,
            eval_stride=cfg_dict.get("eval_stride"),
        )
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc))
    result = experiments.run_sweep(cfg, jobs=args.jobs)
    os.makedirs(args.out, exist_ok=True)
    experiments.sweep_rows_to_csv(result, os.path.join(args.out, "sweep.csv"))
    return EXIT_OK


_CONSTS_KEYS = {"L", "mu", "rho", "sigma_star", "delta0", "c"}


def _constants_from_dict(d: dict, where: str) -> ProblemConstants:
    _require_keys(d, _CONSTS_KEYS, {"L", "mu", "rho"}, where)
    try:
        return ProblemConstants(
            L=float(d["L"]),
            mu=float(d["mu"]),
            rho=float(d["rho"]),
            sigma_star=float(d.get("sigma_star", 0.0)),
            delta0=float(d.get("delta0", 1.0)),
            c=float(d.get("c", 1.0)),
        )
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}")


def _parse_consts_arg(text: str, where: str) -> ProblemConstants:
    parts = text.split(",")
    if len(parts) != 3:
        raise ConfigError(f"{where} must be 'L,mu,rho', got {text!r}")
    try:
        L, mu, rho = (float(p) for p in parts)
        return ProblemConstants(L=L, mu=mu, rho=rho, sigma_star=0.0)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}")


def _shape_consts(shape_text: str, batch: float, where: str) -> ProblemConstants:
    parts = shape_text.split(",")
    if len(parts) != 2:
        raise ConfigError(f"{where} must be 'n_layer,n_embd', got {shape_text!r}")
    n_layer, n_embd = (float(p) for p in parts)
    laws = bundled_constant_laws()
    cov = {"n_layer": n_layer, "n_embd": n_embd, "batch_size": batch}
    return ProblemConstants(
        L=laws["L"].value(cov), mu=laws["mu"].value(cov), rho=laws["rho"].value(cov),
        sigma_star=0.0,
    )


def _tuned_from_args(args) -> TunedConfig:
    for name in ("b0", "s0", "beta0", "t0"):
        if getattr(args, name) is None:
            raise ConfigError(f"--{name} is required for rule {args.rule}")
    return TunedConfig(
        B0=args.b0, S0=args.s0, beta0=args.beta0,
        alpha0=args.alpha0 if args.alpha0 is not None else 1.0,
        T0=args.t0,
    )


def _plan_constants(args, which: str) -> ProblemConstants:
    consts_arg = getattr(args, f"consts{which}")
    shape_arg = getattr(args, f"shape{which}")
    if consts_arg and shape_arg:
        raise ConfigError(f"give either --consts{which} or --shape{which}, not both")
    if consts_arg:
        return _parse_consts_arg(consts_arg, f"--consts{which}")
    if shape_arg:
        batch = getattr(args, f"batch{which}")
        if batch is None:
            raise ConfigError(f"--shape{which} needs --batch{which} for the batch covariate")
        return _shape_consts(shape_arg, batch, f"--shape{which}")
    raise ConfigError(f"rule {args.rule} needs --consts{which} or --shape{which}")


def cmd_plan(args) -> int:
    rule = args.rule
    out: dict = {"rule": rule}
    inputs: dict = {}
    bs1 = b1 = s1 = beta1 = alpha1 = None
    stages_out = None
    consts_for_regime = None

    if rule in ("model_size", "stages", "nonconvex"):
        base = _tuned_from_args(args)
        consts0 = _plan_constants(args, "0")
        consts1 = _plan_constants(args, "1")
        consts_for_regime = consts1
        inputs.update(
            {
                "B0": base.B0, "S0": base.S0, "beta0": base.beta0,
                "alpha0": base.alpha0, "T0": base.T0,
                "consts0": {"L": consts0.L, "mu": consts0.mu, "rho": consts0.rho},
                "consts1": {"L": consts1.L, "mu": consts1.mu, "rho": consts1.rho},
            }
        )
    if rule == "model_size":
        if args.t1 is None:
            raise ConfigError("--t1 is required for rule model_size")
        res = scaling.transfer_model_size(base, consts0, consts1, T1=args.t1)
        bs1, beta1, alpha1 = res.bs1, res.beta1, res.alpha1
        if args.round != "none":
            factor = scaling.round_scale(bs1 / (base.B0 * base.S0), args.round)
            bs1 = base.B0 * base.S0 * factor
        inputs["T1"] = args.t1
        inputs["round"] = args.round
    elif rule == "token_budget":
        base = _tuned_from_args(args)
        if args.t1 is None:
            raise ConfigError("--t1 is required for rule token_budget")
        laws = bundled_constant_laws()
        if args.rho_law == "bundled":
            rho_model = laws["rho"]
            fixed = {"n_layer": args.n_layer, "n_embd": args.n_embd}
        else:
            rho_model = PowerLawModel.from_dict(_load_json(args.rho_law))
            fixed = {}
        try:
            b1, beta1 = scaling.transfer_token_budget(
                base, rho_model, args.t1, fixed_covariates=fixed
            )
        except RuntimeError as exc:
            raise NumericError(str(exc))
        bs1 = b1 * base.S0
        alpha1 = base.alpha0
        inputs.update(
            {
                "B0": base.B0, "S0": base.S0, "beta0": base.beta0, "T0": base.T0,
                "T1": args.t1, "rho_law": args.rho_law,
            }
        )
    elif rule == "stages":
        if not args.budgets:
            raise ConfigError("--budgets is required for rule stages")
        budgets = [float(t) for t in args.budgets.split(",")]
        plan = scaling.plan_stages(base, consts0, consts1, budgets)
        stages_out = [
            {
                "token_allotment": st.token_allotment,
                "B": st.B, "S": st.S, "beta": st.beta, "alpha": st.alpha,
                "note": st.note,
            }
            for st in plan.stages
        ]
        last = plan.stages[-1]
        bs1, b1, s1, beta1, alpha1 = last.B * last.S, last.B, last.S, last.beta, last.alpha
        inputs["budgets"] = budgets
    elif rule == "sqrt":
        base = _tuned_from_args(args)
        if args.t1 is None:
            raise ConfigError("--t1 is required for rule sqrt")
        bs1, beta1 = scaling.sqrt_rule(base, args.t1)
        alpha1 = base.alpha0
        inputs.update({"B0": base.B0, "S0": base.S0, "beta0": base.beta0, "T0": base.T0, "T1": args.t1})
    elif rule == "nonconvex":
        if args.d0 is None or args.d1 is None:
            raise ConfigError("--d0 and --d1 are required for rule nonconvex")
        bs1 = scaling.nonconvex_rule(base, consts0, consts1, args.d0, args.d1)
        alpha1 = base.alpha0
        inputs.update({"D0": args.d0, "D1": args.d1})
    else:
        raise ConfigError(f"unknown rule {rule!r}")

    if b1 is None and bs1 is not None:
        s1 = args.s0
        b1 = bs1 / s1
    if s1 is None:
        s1 = args.s0

    if rule == "token_budget" and args.rho_law == "bundled":
        laws = bundled_constant_laws()
        cov = {"n_layer": args.n_layer, "n_embd": args.n_embd, "batch_size": b1}
        consts_for_regime = ProblemConstants(
            L=laws["L"].value(cov), mu=laws["mu"].value(cov), rho=laws["rho"].value(cov),
            sigma_star=0.0,
        )

    regime = None
    if args.sigma_star is not None and consts_for_regime is not None and bs1 is not None:
        t_at = args.t1 if args.t1 is not None else args.t0
        consts_at = replace(consts_for_regime, sigma_star=args.sigma_star)
        try:
            regime = scaling.error_law(t_at, b1, s1, consts_at).regime
        except ValueError:
            regime = None  # budget below one step at the chosen scale
    inputs["sigma_star"] = args.sigma_star

    out.update(
        {
            "inputs": inputs,
            "BS1": bs1,
            "B1": b1,
            "S1": s1,
            "beta1": beta1,
            "alpha1": alpha1,
            "regime_at_choice": regime,
        }
    )
    if stages_out is not None:
        out["stages"] = stages_out
    _dump_json(out, args.out)
    return EXIT_OK


def _read_csv_columns(path, required: set[str]):
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise ConfigError(f"{path}: empty input")
            missing = required - set(reader.fieldnames)
            if missing:
                raise ConfigError(
                    f"{path}: missing columns {sorted(missing)} (line 1)"
                )
            cols = {name: [] for name in reader.fieldnames}
            for lineno, row in enumerate(reader, start=2):
                for name, val in row.items():
                    if val is None:
                        raise ConfigError(f"{path}: short row (line {lineno})")
                    try:
                        cols[name].append(float(val))
                    except ValueError:
                        raise ConfigError(
                            f"{path}: bad float {val!r} in column {name} (line {lineno})"
                        )
    except FileNotFoundError:
        raise ConfigError(f"input file not found: {path}")
    if not cols or not next(iter(cols.values())):
        raise ConfigError(f"{path}: no data rows")
    return {k: np.asarray(v) for k, v in cols.items()}


def cmd_estimate(args) -> int:
    kind = args.kind
    if kind == "mu":
        cols = _read_csv_columns(args.infile, set())
        loss_col = "loss" if "loss" in cols else None
        dual_col = "g_dual" if "g_dual" in cols else ("dual_grad_norm" if "dual_grad_norm" in cols else None)
        if loss_col is None or dual_col is None:
            raise ConfigError(
                f"{args.infile}: need columns loss and g_dual (or dual_grad_norm)"
            )
        try:
            fit = estimation.estimate_mu(
                cols[loss_col], cols[dual_col], loss_cap=args.loss_cap, delta=args.delta
            )
        except ValueError as exc:
            raise ConfigError(str(exc))
        result = {
            "estimator": "mu",
            "window": None,
            "value": fit.slope,
            "intercept": fit.intercept,
            "n_points": fit.n_points,
        }
    elif kind == "L":
        cols = _read_csv_columns(args.infile, {"grad_diff_dual", "step_disp"})
        try:
            value = estimation.smoothness_from_steps(
                cols["grad_diff_dual"], cols["step_disp"], window=args.window
            )
        except ValueError as exc:
            raise ConfigError(str(exc))
        result = {
            "estimator": "L",
            "window": args.window,
            "value": value,
            "n_points": len(cols["grad_diff_dual"]),
        }
    elif kind == "rho":
        cols = _read_csv_columns(args.infile, {"diff_dual", "diff_euclid"})
        dual, eucl = cols["diff_dual"], cols["diff_euclid"]
        keep = eucl > 0
        if not np.any(keep):
            raise NumericError("all pairs are degenerate (zero euclidean difference)")
        ratios = (dual[keep] / eucl[keep])[-args.window :]
        result = {
            "estimator": "rho",
            "window": args.window,
            "value": float(np.mean(ratios)),
            "n_points": int(np.sum(keep)),
        }
    elif kind == "variance":
        cols = _read_csv_columns(args.infile, {"scale", "variance"})
        order = np.argsort(cols["scale"])
        scales = cols["scale"][order]
        variances = cols["variance"][order]
        if np.any(variances <= 0):
            raise NumericError("degenerate variance data: nonpositive variances")
        try:
            model = estimation.fit_power_law(
                {"scale": scales}, variances, [FitTerm("scale")]
            )
        except (ValueError, RuntimeError) as exc:
            raise NumericError(str(exc))
        result = {
            "estimator": "variance",
            "window": None,
            "model": model.to_dict(),
            "n_points": len(scales),
        }
    else:
        raise ConfigError(f"unknown estimator kind {kind!r}")
    _dump_json(result, args.out)
    return EXIT_OK


def cmd_fit(args) -> int:
    shape_d = _load_json(args.shape)
    _require_keys(shape_d, {"schema_version", "terms", "value_column"}, {"terms"}, "fit shape")
    terms = []
    for i, t in enumerate(shape_d["terms"]):
        _require_keys(t, {"name", "shift", "exponent"}, {"name"}, f"shape term {i}")
        terms.append(FitTerm(t["name"], t.get("shift"), t.get("exponent")))
    value_column = shape_d.get("value_column", "value")
    cols = _read_csv_columns(args.infile, {value_column} | {t.name for t in terms})
    try:
        model = estimation.fit_power_law(
            {t.name: cols[t.name] for t in terms}, cols[value_column], terms, seed=args.seed
        )
    except ValueError as exc:
        raise ConfigError(str(exc))
    except RuntimeError as exc:
        raise NumericError(str(exc))
    _dump_json(
        {
            "estimator": "power_law",
            "model": model.to_dict(),
            "n_points": len(cols[value_column]),
        },
        args.out,
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="scgscale",
        description="norm-constrained conditional-gradient training harness "
        "and batch/token scaling planner",
    )
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the optimizer from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="run a (B, S) grid under a token budget")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    pl = sub.add_parser("plan", help="hyperparameter transfer and stage planning")
    pl.add_argument(
        "--rule",
        required=True,
        choices=["model_size", "token_budget", "stages", "sqrt", "nonconvex"],
    )
    pl.add_argument("--b0", type=float)
    pl.add_argument("--s0", type=float)
    pl.add_argument("--beta0", type=float)
    pl.add_argument("--alpha0", type=float)
    pl.add_argument("--t0", type=float)
    pl.add_argument("--t1", type=float)
    pl.add_argument("--consts0", help="L,mu,rho for the base model")
    pl.add_argument("--consts1", help="L,mu,rho for the target model")
    pl.add_argument("--shape0", help="n_layer,n_embd routed through the bundled laws")
    pl.add_argument("--shape1", help="n_layer,n_embd routed through the bundled laws")
    pl.add_argument("--batch0", type=float, help="batch covariate for --shape0")
    pl.add_argument("--batch1", type=float, help="batch covariate for --shape1")
    pl.add_argument("--budgets", help="comma-separated cumulative token totals")
    pl.add_argument("--d0", type=float, help="base model size (nonconvex rule)")
    pl.add_argument("--d1", type=float, help="target model size (nonconvex rule)")
    pl.add_argument("--rho-law", default="bundled", help="'bundled' or a model JSON path")
    pl.add_argument("--n-layer", type=float, default=6.0, help="fixed covariate for the bundled rho law")
    pl.add_argument("--n-embd", type=float, default=768.0, help="fixed covariate for the bundled rho law")
    pl.add_argument("--sigma-star", type=float, help="noise scale for the regime label")
    pl.add_argument("--round", default="none", choices=["none", "pow2", "mult32"])
    pl.add_argument("--out", help="write the JSON here instead of stdout")
    pl.set_defaults(func=cmd_plan)

    e = sub.add_parser("estimate", help="estimate a constant from a CSV")
    e.add_argument("--kind", required=True, choices=["L", "mu", "rho", "variance"])
    e.add_argument("--in", dest="infile", required=True)
    e.add_argument("--window", type=int, default=100)
    e.add_argument("--loss-cap", type=float, default=5.0)
    e.add_argument("--delta", type=float, default=1.345)
    e.add_argument("--out")
    e.set_defaults(func=cmd_estimate)

    f = sub.add_parser("fit", help="fit a shifted power law to CSV data")
    f.add_argument("--shape", required=True, help="JSON term layout")
    f.add_argument("--in", dest="infile", required=True)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out")
    f.set_defaults(func=cmd_fit)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
