"""Command-line front end.

Subcommands: run, compare, identify-friction, tune, validate-model.
Exit codes are exhaustive: 0 success, 1 configuration or usage error,
2 runtime abort (plant or estimator diverged mid-run). Artifacts are
deterministic for a given scenario and seed; re-running a command
overwrites its outputs byte for byte.
"""

import argparse
import dataclasses
import json
import os
import re
import sys

import numpy as np

from .control import ControlError
from .estimator import EstimatorError, NoiseConfig, tune_covariances
from .friction import (IdentifiabilityError, identify_friction,
                       load_samples_csv)
from .model import (ModelError, ModelSemanticError, load_model,
                    validate_model)
from .simulation import (ScenarioError, SimulationError, compute_rmse,
                         load_scenario, run_scenario)
from . import report

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_ABORT = 2


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; the contract reserves 2 for
    # runtime aborts, so remap
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return EXIT_CONFIG


def _status(message: str):
    print(message, file=sys.stderr)


def _write_text(path, text: str):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _slug(name: str) -> str:
    return re.sub(r"[^\w.-]+", "_", name.strip()) or "scenario"


def _load_scenario_with_overrides(args):
    scn = load_scenario(args.scenario)
    overrides = {}
    if getattr(args, "model", None):
        overrides["model"] = load_model(args.model)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.duration is not None:
        overrides["duration"] = args.duration
    if overrides:
        scn = dataclasses.replace(scn, **overrides)
    return scn


# ---------------------------------------------------------------------------
# run


def cmd_run(args) -> int:
    scn = _load_scenario_with_overrides(args)
    loop = args.estimator
    if loop == "both":
        return _fail("run drives a single control loop; use the compare "
                     "subcommand to evaluate both estimators")
    if loop == "rnea":
        loop = "rnea_baseline"
    if loop is None and scn.estimator == "both":
        loop = "ukf"

    result = run_scenario(scn, estimator=loop)

    os.makedirs(args.out, exist_ok=True)
    stem = os.path.join(args.out, _slug(scn.name))
    _write_text(stem + "_log.csv", result.log.to_csv())
    _write_text(stem + "_summary.txt", result.summary_text())
    if result.log.n_rows:
        report.save_tracking_figure(result, stem + "_tracking.png")
        report.save_estimation_figure(result, stem + "_estimation.png")
    _status(f"wrote {stem}_log.csv ({result.log.n_rows} rows)")

    if result.aborted:
        print(f"error: scenario aborted at t={result.abort_time:.4f} s: "
              f"{result.abort_reason}", file=sys.stderr)
        return EXIT_ABORT
    print(result.summary_text(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare


def _estimation_rmse(result, column):
    if not result.log.n_rows:
        return np.full(result.scenario.model.n_joints, np.nan)
    return compute_rmse(result.log.column(column),
                        result.log.column("tau_truth"))


def cmd_compare(args) -> int:
    scn = _load_scenario_with_overrides(args)
    if scn.estimator != "both":
        return _fail(f"scenario '{scn.name}' sets estimator "
                     f"'{scn.estimator}'; comparison needs 'both'")

    _status("running fused-estimator loop...")
    res_ukf = run_scenario(scn, estimator="ukf")
    _status("running model-only baseline loop...")
    res_rnea = run_scenario(scn, estimator="rnea_baseline")

    names = scn.model.joint_names()
    rmse_ukf = _estimation_rmse(res_ukf, "tau_ukf")
    rmse_rnea = _estimation_rmse(res_rnea, "tau_rnea")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = rmse_ukf / rmse_rnea

    lines = [f"scenario: {scn.name}", f"seed: {scn.seed}"]
    for res, label in ((res_ukf, "fused"), (res_rnea, "model-only")):
        if res.aborted:
            lines.append(f"{label} loop aborted at "
                         f"t={res.abort_time:.4f} s: {res.abort_reason}")
    header = f"{'joint':<16}{'rmse_ukf':>12}{'rmse_rnea':>12}{'ratio':>10}"
    lines.append(header)
    lines.append("-" * len(header))
    csv_lines = ["joint,rmse_ukf,rmse_rnea,ratio"]
    for j, name in enumerate(names):
        lines.append(f"{name:<16}{rmse_ukf[j]:>12.5f}{rmse_rnea[j]:>12.5f}"
                     f"{ratio[j]:>10.4f}")
        csv_lines.append(f"{name},{float(rmse_ukf[j])!r},"
                         f"{float(rmse_rnea[j])!r},{float(ratio[j])!r}")
    text = "\n".join(lines) + "\n"

    os.makedirs(args.out, exist_ok=True)
    stem = os.path.join(args.out, _slug(scn.name))
    _write_text(stem + "_compare.csv", "\n".join(csv_lines) + "\n")
    _write_text(stem + "_compare.txt", text)
    report.save_comparison_figure(names, rmse_ukf, rmse_rnea,
                                  stem + "_compare.png",
                                  title=f"{scn.name}: estimation RMSE")
    print(text, end="")

    if res_ukf.aborted:
        # the baseline aborting is a legitimate outcome to report; the
        # fused loop going down means the comparison itself failed
        print(f"error: fused loop aborted at t={res_ukf.abort_time:.4f} s: "
              f"{res_ukf.abort_reason}", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


# ---------------------------------------------------------------------------
# identify-friction


def cmd_identify_friction(args) -> int:
    if args.k1_step <= 0 or args.k1_max <= args.k1_min:
        return _fail("k1 grid needs k1-min < k1-max and k1-step > 0")
    try:
        samples = load_samples_csv(args.dataset)
    except FileNotFoundError:
        return _fail(f"dataset file not found: {args.dataset}")

    grid = np.arange(args.k1_min, args.k1_max, args.k1_step)
    try:
        fit = identify_friction(samples, grid)
    except IdentifiabilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print("hint: log steady-motion samples at several speeds in both "
              "directions, e.g. slow constant-velocity sweeps", file=sys.stderr)
        return EXIT_CONFIG

    os.makedirs(args.out, exist_ok=True)
    stem = os.path.join(args.out,
                        _slug(os.path.splitext(
                            os.path.basename(args.dataset))[0]))
    doc = {"k0": fit.params.k0, "k1": fit.params.k1, "k2": fit.params.k2,
           "rmse": fit.rmse, "n_samples": len(samples)}
    _write_text(stem + "_friction.json",
                json.dumps(doc, indent=2, sort_keys=True) + "\n")
    report.save_friction_figure(samples, fit, stem + "_fit.png")
    print(f"k0 = {fit.params.k0!r} Nm")
    print(f"k1 = {fit.params.k1!r} s/rad")
    print(f"k2 = {fit.params.k2!r} Nm*s/rad")
    print(f"rmse = {fit.rmse!r} Nm over {len(samples)} samples")
    return EXIT_OK


# ---------------------------------------------------------------------------
# tune


def _parse_param(spec: str):
    name, sep, rest = spec.partition("=")
    if not sep or not rest:
        raise ValueError(f"--param wants NAME=V1,V2,... got '{spec}'")
    valid = {f.name for f in dataclasses.fields(NoiseConfig)}
    if name not in valid:
        raise ValueError(f"unknown covariance field '{name}'; choose from "
                         f"{sorted(valid)}")
    try:
        values = [float(v) for v in rest.split(",")]
    except ValueError:
        raise ValueError(f"--param {name}: values must be numbers") from None
    return name, values


def cmd_tune(args) -> int:
    try:
        spec = dict(_parse_param(p) for p in args.param)
    except ValueError as exc:
        return _fail(str(exc))

    rep = tune_covariances(args.scenario, spec, seed=args.seed or 0,
                           max_evals=args.max_evals)

    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "tune.json")
    _write_text(out_path, rep.to_json() + "\n")
    _status(f"wrote {out_path}")
    best = {k: getattr(rep.best, k) for k in spec}
    print(f"best: {json.dumps(best, sort_keys=True)}")
    print(f"score: {rep.best_score!r} Nm pooled RMSE "
          f"over {len(rep.evaluations)} evaluations")
    return EXIT_OK


# ---------------------------------------------------------------------------
# validate-model


def cmd_validate_model(args) -> int:
    try:
        model = load_model(args.model)
    except FileNotFoundError:
        return _fail(f"model file not found: {args.model}")
    except ModelSemanticError as exc:
        # parsing runs the same rule set and packs every diagnostic into
        # one message; unpack for line-per-finding output
        for d in str(exc).split("; "):
            print(d)
        print(f"error: {args.model} failed validation", file=sys.stderr)
        return EXIT_CONFIG
    diags = validate_model(model)
    for d in diags:
        print(d)
    if diags:
        print(f"error: {args.model} failed validation", file=sys.stderr)
        return EXIT_CONFIG
    print(f"model '{model.name}' ok: {model.n_joints} joints, "
          f"{len(model.links)} links")
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="torquefusion",
                description="Joint-torque estimation and control "
                            "validation for robots without torque sensors")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def common(sp, estimator=False):
        sp.add_argument("--scenario", required=True,
                        help="scenario JSON file")
        sp.add_argument("--model", help="model JSON overriding the "
                                        "scenario's model path")
        sp.add_argument("--out", default=".",
                        help="directory for artifacts (default: .)")
        sp.add_argument("--seed", type=int, help="override scenario seed")
        sp.add_argument("--duration", type=float,
                        help="override scenario duration [s]")
        if estimator:
            sp.add_argument("--estimator", choices=("ukf", "rnea", "both"),
                            help="which estimate closes the torque loop "
                                 "(default: scenario's, 'both' mapping "
                                 "to ukf)")

    sp = sub.add_parser("run", help="simulate one closed-loop scenario")
    common(sp, estimator=True)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("compare",
                        help="run fused and model-only loops, tabulate RMSE")
    common(sp)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("identify-friction",
                        help="fit friction parameters to a sample CSV")
    sp.add_argument("--dataset", required=True,
                    help="CSV with columns s_dot,residual_torque")
    sp.add_argument("--out", default=".")
    sp.add_argument("--k1-min", type=float, default=0.5)
    sp.add_argument("--k1-max", type=float, default=8.0)
    sp.add_argument("--k1-step", type=float, default=0.05)
    sp.set_defaults(func=cmd_identify_friction)

    sp = sub.add_parser("tune",
                        help="grid-search filter covariances on scenarios")
    sp.add_argument("--scenario", required=True, action="append",
                    help="scenario JSON file (repeatable)")
    sp.add_argument("--param", required=True, action="append",
                    help="NAME=V1,V2,... covariance values to grid "
                         "(repeatable)")
    sp.add_argument("--out", default=".")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--max-evals", type=int)
    sp.set_defaults(func=cmd_tune)

    sp = sub.add_parser("validate-model",
                        help="check a model file and list diagnostics")
    sp.add_argument("--model", required=True, help="model JSON file")
    sp.set_defaults(func=cmd_validate_model)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, ModelError, EstimatorError, ControlError,
            IdentifiabilityError) as exc:
        return _fail(str(exc))
    except SimulationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except FileNotFoundError as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
