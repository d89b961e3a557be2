"""Command-line front end: ``addbart fit | compare | simulate | folds | design``."""

from __future__ import annotations

import argparse
import configparser
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from .additive_models import (AdditiveConfig, fit_treatment_bart, fit_treatment_bart_binary,
                              fit_two_bart, fit_two_bart_binary, treatment_summary)
from .data import BINARY, CONTINUOUS, CovariateSplit, DataError, load_csv, make_folds
from .model_comparison import compare_additivity, lpml_of
from .sampler_continuous import SINGLE, TREATMENT, TWO_BART, BartConfig, fit_bart
from .sampler_logit import fit_logit_bart
from .sim_design import (DesignTargets, InfeasibleDesign, StudyPlan, get_scenario,
                         replicates_csv, run_replication_study, solve_design, summarize,
                         summary_csv)

PROG = "addbart"

# option name -> (type, default); None defaults mean "not set"
OPTIONS = {
    "data": (str, None),
    "response": (str, None),
    "binary": ("flag", False),
    "categorical": (str, ""),
    "split_minus": (str, None),
    "split_plus": (str, None),
    "treatment": (str, None),
    "model": (str, SINGLE),
    "trees": (int, 200),
    "trees_per_component": (int, None),
    "k": (float, 2.0),
    "nu": (float, 3.0),
    "q": (float, 0.9),
    "lambda": (float, None),
    "burn": (int, 1000),
    "draws": (int, 1000),
    "thin": (int, 1),
    "max_cuts": (int, 100),
    "seed": (int, None),
    "jobs": (int, 1),
    "out": (str, None),
    "ospe": ("flag", False),
    "folds": (int, 5),
    "keep_trees": ("flag", False),
    "scenario": (str, "SC1"),
    "gamma": (str, "0,0.25,0.44"),
    "n": (str, "500"),
    "reps": (int, 20),
    "alpha": (float, 0.2),
    "delta": (float, 0.45),
    "treatment_design": ("flag", False),
    "n_mc": (int, 1000000),
    "summary": (str, None),
}


class CliError(Exception):
    pass


def _add_common(p: argparse.ArgumentParser, names):
    for name in names:
        typ, _ = OPTIONS[name]
        flag = "--" + name.replace("_", "-")
        if typ == "flag":
            p.add_argument(flag, action="store_true", default=argparse.SUPPRESS)
        else:
            p.add_argument(flag, type=typ, default=argparse.SUPPRESS,
                           dest=name, metavar=name.upper())


DATA_OPTS = ["data", "response", "binary", "categorical"]
PRIOR_OPTS = ["trees", "trees_per_component", "k", "nu", "q", "lambda", "burn", "draws", "thin",
              "max_cuts", "seed"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=PROG, description="Additivity assessment with BART.")
    parser.add_argument("--config", help="key = value file with [common] and per-command sections")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit one model and write a draw archive")
    _add_common(p, DATA_OPTS + PRIOR_OPTS + ["model", "split_minus", "split_plus", "treatment",
                                             "out", "keep_trees"])

    p = sub.add_parser("compare", help="single vs additive model: LPML, PsBF, optional OSPE")
    _add_common(p, DATA_OPTS + PRIOR_OPTS + ["split_minus", "split_plus", "treatment", "out",
                                             "ospe", "folds", "jobs"])

    p = sub.add_parser("simulate", help="replication study over designed datasets")
    _add_common(p, PRIOR_OPTS + ["binary", "scenario", "gamma", "n", "reps", "alpha", "delta",
                                 "treatment_design", "n_mc", "out", "summary", "ospe", "jobs"])

    p = sub.add_parser("folds", help="write a k-fold assignment CSV")
    _add_common(p, DATA_OPTS + ["folds", "seed", "out"])

    p = sub.add_parser("design", help="print a solved simulation design as JSON")
    _add_common(p, ["binary", "scenario", "gamma", "alpha", "delta", "treatment_design",
                    "n_mc", "seed", "out"])
    return parser


def _coerce(name, text):
    typ, _ = OPTIONS[name]
    if typ == "flag":
        return text.strip().lower() in ("1", "true", "yes", "on")
    return typ(text)


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then config-file values, then command-line flags."""
    cfg = {name: default for name, (_, default) in OPTIONS.items()}
    if args.config:
        cp = configparser.ConfigParser()
        if not cp.read(args.config, encoding="utf-8"):
            raise CliError(f"cannot read config file {args.config}")
        for section in ("common", args.command):
            if cp.has_section(section):
                for key, text in cp.items(section):
                    name = key.replace("-", "_")
                    if name not in OPTIONS:
                        raise CliError(f"unknown key {key!r} in [{section}] of {args.config}")
                    try:
                        cfg[name] = _coerce(name, text)
                    except ValueError:
                        raise CliError(f"bad value {text!r} for {key} in {args.config}") from None
    for name in OPTIONS:
        if hasattr(args, name):
            cfg[name] = getattr(args, name)
    if cfg["seed"] is None:
        env = os.environ.get("ADDBART_SEED")
        try:
            cfg["seed"] = int(env) if env else 0
        except ValueError:
            raise CliError(f"ADDBART_SEED must be an integer, got {env!r}") from None
    cfg["command"] = args.command
    return cfg


def _names(text):
    return [t.strip() for t in text.split(",") if t.strip()] if text else []


def _floats(text):
    return [float(t) for t in _names(text)]


def _ints(text):
    return [int(t) for t in _names(text)]


def bart_config(cfg) -> AdditiveConfig:
    return AdditiveConfig(m=cfg["trees"], k=cfg["k"], nu=cfg["nu"], q=cfg["q"],
                          lambda_=cfg["lambda"], burn_in=cfg["burn"], draws=cfg["draws"],
                          thin=cfg["thin"], seed=cfg["seed"], max_cuts=cfg["max_cuts"],
                          keep_trees=cfg["keep_trees"],
                          m_per_component=cfg["trees_per_component"])


def _single_config(config: AdditiveConfig) -> BartConfig:
    return BartConfig.from_dict(config.to_dict())


def load_data(cfg):
    if not cfg["data"]:
        raise CliError("--data is required")
    if not cfg["response"]:
        raise CliError("--response is required")
    kind = BINARY if cfg["binary"] else CONTINUOUS
    return load_csv(cfg["data"], cfg["response"], kind, _names(cfg["categorical"]))


def _target(cfg, data):
    if cfg["treatment"]:
        if cfg["split_minus"] or cfg["split_plus"]:
            raise CliError("give either --treatment or --split-minus/--split-plus, not both")
        return data.column_index(cfg["treatment"])
    if not (cfg["split_minus"] and cfg["split_plus"]):
        raise CliError("need --split-minus and --split-plus, or --treatment")
    return CovariateSplit.from_names(data, _names(cfg["split_minus"]), _names(cfg["split_plus"]))


def _write_text(path, text):
    Path(path).write_text(text, encoding="utf-8", newline="")


def _config_echo(cfg):
    return {k: v for k, v in sorted(cfg.items())}


def cmd_fit(cfg, out=None) -> int:
    out = out or sys.stdout
    data = load_data(cfg)
    config = bart_config(cfg)
    binary = data.response_kind == BINARY
    model = cfg["model"]
    if model == SINGLE:
        fit = (fit_logit_bart if binary else fit_bart)(data, _single_config(config))
    elif model == TWO_BART:
        split = _target(cfg, data)
        if not isinstance(split, CovariateSplit):
            raise CliError("model two_bart needs --split-minus and --split-plus")
        fit = (fit_two_bart_binary if binary else fit_two_bart)(data, split, config)
    elif model == TREATMENT:
        if not cfg["treatment"]:
            raise CliError("model treatment needs --treatment")
        col = data.column_index(cfg["treatment"])
        fit = (fit_treatment_bart_binary if binary else fit_treatment_bart)(data, col, config)
    else:
        raise CliError(f"unknown model {model!r}; choose single, two_bart or treatment")
    fit.config["run"] = _config_echo(cfg)
    path = cfg["out"] or "fit.npz"
    fit.save(path)
    mean = fit.posterior_mean()
    print(f"model: {model} ({data.response_kind}), n = {data.n}, draws = {fit.n_draws}", file=out)
    print(f"LPML = {lpml_of(fit):.4f}", file=out)
    if binary:
        print(f"in-sample Brier score = {np.mean((data.y - mean) ** 2):.6g}", file=out)
    else:
        print(f"in-sample RMSE = {math.sqrt(np.mean((data.y - mean) ** 2)):.6g}", file=out)
        print(f"posterior mean sigma^2 = {np.mean(fit.sigma2):.6g}", file=out)
    if fit.beta is not None:
        b, lo, hi = treatment_summary(fit)
        print(f"beta ({cfg['treatment']}) = {b:.4f} ({lo:.4f}, {hi:.4f})  [95% credible interval]",
              file=out)
    print(f"archive: {path}", file=out)
    return 0


def cmd_compare(cfg, out=None) -> int:
    out = out or sys.stdout
    data = load_data(cfg)
    target = _target(cfg, data)
    config = bart_config(cfg)
    report = compare_additivity(data, target, _single_config(config), config,
                                with_ospe=cfg["ospe"], n_folds=cfg["folds"], jobs=cfg["jobs"])
    doc = report.to_dict()
    doc["run_config"] = _config_echo(cfg)
    print(f"LPML nonadditive = {report.lpml_nonadditive:.4f}, additive = {report.lpml_additive:.4f}",
          file=out)
    print(report.verdict_line(), file=out)
    if report.r_ospe is not None:
        print(report.ospe_line(), file=out)
    path = cfg["out"] or "comparison.json"
    _write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"report: {path}", file=out)
    return 0


def cmd_simulate(cfg, out=None) -> int:
    out = out or sys.stdout
    kind = BINARY if cfg["binary"] else CONTINUOUS
    scenarios = _names(cfg["scenario"])
    for s in scenarios:
        get_scenario(s)
    plan = StudyPlan(scenarios=tuple(scenarios), gammas=tuple(_floats(cfg["gamma"])),
                     ns=tuple(_ints(cfg["n"])), reps=cfg["reps"], kind=kind,
                     treatment=cfg["treatment_design"], alpha=cfg["alpha"],
                     delta=cfg["delta"], seed=cfg["seed"], n_mc=cfg["n_mc"])
    config = bart_config(cfg)
    result = run_replication_study(plan, _single_config(config), config,
                                   with_ospe=cfg["ospe"], jobs=cfg["jobs"])
    path = cfg["out"] or "replicates.csv"
    _write_text(path, replicates_csv(result.rows))
    summary = summarize(result.rows)
    summary_path = cfg["summary"] or str(Path(path).with_suffix("")) + ".summary.csv"
    _write_text(summary_path, summary_csv(summary))
    meta = {"run_config": _config_echo(cfg),
            "failures": [{"cell": c, "error": e} for c, e in result.failures],
            "designs": [{"scenario": k[0], "kind": k[1], "gamma": k[2], **v.to_dict()}
                        for k, v in result.solutions.items()]}
    _write_text(path + ".json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for row in summary:
        print(f"{row['scenario']} n={row['n']} gamma={row['gamma']}: "
              f"P(correct PsBF) = {row['p_correct_psbf']:.2f}, "
              f"median log10 PsBF = {row['median_log10_psbf']:.3f}", file=out)
    print(f"replicates: {path} ({len(result.rows)} rows); summary: {summary_path}", file=out)
    for cell, err in result.failures:
        print(f"{PROG}: cell {cell} failed: {err}", file=sys.stderr)
    return 1 if result.failures else 0


def cmd_folds(cfg, out=None) -> int:
    out = out or sys.stdout
    data = load_data(cfg)
    folds = make_folds(data.n, cfg["folds"], cfg["seed"])
    path = cfg["out"] or "folds.csv"
    folds.to_csv(path)
    print(f"{folds.k} folds of sizes {folds.sizes().tolist()} written to {path}", file=out)
    return 0


def cmd_design(cfg, out=None) -> int:
    out = out or sys.stdout
    kind = BINARY if cfg["binary"] else CONTINUOUS
    scenario = get_scenario(cfg["scenario"], cfg["treatment_design"])
    docs = []
    for gamma in _floats(cfg["gamma"]):
        targets = DesignTargets(alpha=cfg["alpha"], delta=cfg["delta"], gamma=gamma)
        sol = solve_design(scenario, kind, targets, cfg["n_mc"], cfg["seed"])
        docs.append({"scenario": scenario.name, **sol.to_dict()})
    text = json.dumps(docs if len(docs) != 1 else docs[0], indent=2, sort_keys=True) + "\n"
    if cfg["out"]:
        _write_text(cfg["out"], text)
    out.write(text)
    return 0


COMMANDS = {"fit": cmd_fit, "compare": cmd_compare, "simulate": cmd_simulate,
            "folds": cmd_folds, "design": cmd_design}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except (CliError, DataError, InfeasibleDesign, KeyError, ValueError, TypeError,
            OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"{PROG}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
