"""Command-line driver: one subcommand per module plus manifest replay.

Every run writes its outputs and a ``manifest.json`` (resolved config,
master seed, tool version, output digests) into ``--out-dir``. ``rerun``
executes a manifest again and checks that the digests still match.

Exit codes: 0 success, 1 computation failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._rng import fresh_seed

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

DEFAULTS = {
    "simulate": {
        "form": "correct", "m": None, "t": None, "replicates": 20, "alpha": 1.0,
        "gain": 0.4, "offset": 0.1, "n_val": None, "prior_variance": None,
    },
    "fit-law": {
        "input": None, "form": "basic", "covariates": {}, "weighting": "none", "n_starts": 8,
        "targets": [0.5, 0.8],
    },
    "svca": {
        "input": None, "max_dims": 30, "threshold_sds": 4.0, "shuffles": 2, "block": 72,
        "bin_width": None, "normalization": "per_dim", "sizes": None, "repeats": 5,
    },
    "trend": {
        "input": None, "year_min": None, "reference_year": 2000.0, "lookback": None,
        "project": [], "level": 0.90,
    },
    "distill": {
        "sizes": [1, 4, 16], "betas": [0, 1, 10, 100, 300], "noise_fracs": [0.0, 0.05, 0.10],
        "study": {},
    },
    "verify-appendix": {
        "grid": "default", "replicates": 200, "tolerance": 0.02, "n_val": 5000,
    },
}
REQUIRED = {
    "simulate": ("m", "t"),
    "fit-law": ("input",),
    "svca": ("input",),
    "trend": ("input",),
    "distill": (),
    "verify-appendix": (),
}
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ parsing


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text):
    return [int(float(v)) for v in text.split(",") if v.strip()]


def _kv(text):
    key, sep, val = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        return key.strip(), json.loads(val)
    except json.JSONDecodeError:
        return key.strip(), val


def build_parser():
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, default=None, help="master seed; drawn and recorded if omitted")
    shared.add_argument("--jobs", type=int, default=None, help="worker processes (default: all cores)")
    shared.add_argument("--out-dir", default="twinlab-out", help="directory for outputs and manifest")
    shared.add_argument("--config", default=None, help="JSON file with parameters; flags override it")

    p = argparse.ArgumentParser(prog="twinlab", description="Digital-twin scaling, dimensionality and distillation lab")
    p.add_argument("--version", action="version", version=f"twinlab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[shared], help="LNP scaling sweep")
    s.add_argument("--form", choices=["correct", "wrong"])
    s.add_argument("--m", type=int, help="readout dimension")
    s.add_argument("--t", type=_ints, help="comma-separated training sizes")
    s.add_argument("--replicates", type=int)
    s.add_argument("--alpha", type=float, help="visible fraction for --form wrong")
    s.add_argument("--gain", type=float)
    s.add_argument("--offset", type=float)
    s.add_argument("--n-val", type=int)
    s.add_argument("--prior-variance", type=float)

    f = sub.add_parser("fit-law", parents=[shared], help="fit a log-sigmoid scaling law")
    f.add_argument("--input", help="ScalingCurve CSV")
    f.add_argument("--form", choices=["basic", "readout", "wrong_core", "learned_core", "analytic"])
    f.add_argument("--cov", type=_kv, action="append", dest="cov", help="covariate key=value (repeatable)")
    f.add_argument("--weighting", choices=["none", "se"])
    f.add_argument("--n-starts", type=int)
    f.add_argument("--targets", type=_floats, help="FEVE targets for time-to-target")

    v = sub.add_parser("svca", parents=[shared], help="SVCA spectrum or dimension sweep")
    v.add_argument("--input", help="activity CSV or .bin with JSON sidecar")
    v.add_argument("--max-dims", type=int)
    v.add_argument("--threshold-sds", type=float)
    v.add_argument("--shuffles", type=int)
    v.add_argument("--block", type=int)
    v.add_argument("--bin-width", type=float)
    v.add_argument("--normalization", choices=["per_dim", "total"])
    v.add_argument("--sizes", type=_ints, help="neuron counts for a dimension sweep")
    v.add_argument("--repeats", type=int)

    t = sub.add_parser("trend", parents=[shared], help="capability trend regression")
    t.add_argument("--input", help="CSV with year,value[,modality]")
    t.add_argument("--year-min", type=float)
    t.add_argument("--reference-year", type=float)
    t.add_argument("--lookback", type=int, help="apply the frontier filter first")
    t.add_argument("--project", type=_floats, help="comma-separated years to project to")
    t.add_argument("--level", type=float)

    d = sub.add_parser("distill", parents=[shared], help="teacher-student robustness study")
    d.add_argument("--sizes", type=_ints)
    d.add_argument("--betas", type=_floats)
    d.add_argument("--noise-fracs", type=_floats)
    d.add_argument("--n-seeds", type=int)
    d.add_argument("--mode", choices=["literal", "additive", "rescaled"])
    d.add_argument("--epochs", type=int)

    a = sub.add_parser("verify-appendix", parents=[shared], help="closed-form FEVE versus simulation")
    a.add_argument("--grid", choices=["default"])
    a.add_argument("--replicates", type=int)
    a.add_argument("--tolerance", type=float)
    a.add_argument("--n-val", type=int)

    r = sub.add_parser("rerun", help="re-execute a manifest and compare output digests")
    r.add_argument("manifest", help="path to manifest.json")
    r.add_argument("--out-dir", default=None, help="where to write the rerun (default: <manifest dir>/rerun)")
    r.add_argument("--jobs", type=int, default=None)
    return p


def resolve(command, args):
    """Built-in defaults, then the config file, then explicit flags."""
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(loaded) - set(cfg) - {"seed"}
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update({k: v for k, v in loaded.items() if k != "seed"})
    flags = vars(args)
    for key in cfg:
        if flags.get(key) is not None:
            cfg[key] = flags[key]
    if command == "fit-law" and flags.get("cov"):
        cfg["covariates"] = {**(cfg["covariates"] if isinstance(cfg["covariates"], dict) else {}), **dict(flags["cov"])}
    if command == "distill":
        study = dict(cfg["study"])
        for key in ("n_seeds", "mode", "epochs"):
            if flags.get(key) is not None:
                study[key] = flags[key]
        cfg["study"] = study
    missing = [k for k in REQUIRED[command] if cfg.get(k) is None]
    if missing:
        raise UsageError(f"missing required {', '.join('--' + k.replace('_', '-') for k in missing)}")
    return cfg


# ---------------------------------------------------------------- commands


def _write(out, name, text, written):
    path = Path(out) / name
    path.write_text(text)
    written.append(path)
    return path


def cmd_simulate(cfg, seed, jobs, out):
    from .lnp_sim import CoreMixSpec, PoissonNeuronSpec, run_scaling_sweep

    if cfg["form"] not in ("correct", "wrong"):
        raise ValueError("form must be 'correct' or 'wrong'")
    spec = PoissonNeuronSpec.draw(int(cfg["m"]), cfg["gain"], cfg["offset"], rng_seed=seed)
    mix = CoreMixSpec(float(cfg["alpha"])) if cfg["form"] == "wrong" else None
    curve = run_scaling_sweep(spec, mix, cfg["t"], int(cfg["replicates"]), seed, cfg["n_val"],
                              cfg["prior_variance"], jobs)
    written = []
    _write(out, "curve.csv", curve.to_csv(), written)
    _write(out, "curve.json", curve.to_json(), written)
    status = EXIT_OK
    n_missing = int(curve.missing.sum())
    if n_missing:
        print(f"twinlab: error: {n_missing} sweep point(s) failed; completed points kept", file=sys.stderr)
        status = EXIT_FAIL
    return written, status


def cmd_fitlaw(cfg, seed, jobs, out):
    from .curves import ScalingCurve
    from .scaling_laws import LawForm, fit_law, predict_law, time_to_target

    inputs = cfg["input"] if isinstance(cfg["input"], list) else [cfg["input"]]
    curves = [ScalingCurve.from_csv(Path(p)) for p in inputs]
    covs = cfg["covariates"]
    form = LawForm(cfg["form"])
    target = curves[0] if len(curves) == 1 else curves
    cov_arg = (covs or None) if len(curves) == 1 else covs
    fit = fit_law(target, form, cov_arg, weighting=cfg["weighting"], n_starts=int(cfg["n_starts"]))
    per_curve = covs if isinstance(covs, list) else [covs] * len(curves)
    report = {"fit": fit.to_dict(), "time_to_target": []}
    lines = ["curve,t,observed,predicted"]
    for j, (curve, cv) in enumerate(zip(curves, per_curve)):
        pred = predict_law(fit, curve.t, cv or None)
        for t_, y_, p_ in zip(curve.t, curve.feve_mean, pred):
            lines.append(f"{j},{float(t_)!r},{float(y_)!r},{float(p_)!r}")
        for tgt in cfg["targets"]:
            try:
                val = float(time_to_target(fit, tgt, cv or None))
            except ValueError:  # unreachable target or non-converged fit
                val = None
            report["time_to_target"].append({"curve": j, "target": tgt, "t": val})
    written = []
    _write(out, "fit.json", json.dumps(report, indent=2, sort_keys=True), written)
    _write(out, "fitted.csv", "\n".join(lines) + "\n", written)
    return written, EXIT_OK if fit.converged else EXIT_FAIL


def cmd_svca(cfg, seed, jobs, out):
    from .svca import dimension_sweep, fit_power_law, load_activity, svca

    rec = load_activity(cfg["input"])
    kw = dict(threshold_sds=cfg["threshold_sds"], n_shuffles=cfg["shuffles"], block=cfg["block"],
              bin_width=cfg["bin_width"], normalization=cfg["normalization"])
    written = []
    if cfg["sizes"]:
        rows = dimension_sweep(rec, cfg["sizes"], int(cfg["repeats"]), seed, cfg["max_dims"], **kw)
        lines = ["n_neurons,dims_mean,dims_se"] + [f"{s},{m!r},{e!r}" for s, m, e in rows]
        _write(out, "sweep.csv", "\n".join(lines) + "\n", written)
        report = {"sweep": [list(r) for r in rows]}
        usable = [(s, m) for s, m, _ in rows if m > 0]
        if len(usable) >= 3:
            pl = fit_power_law(usable)
            report["power_law"] = {"prefactor": pl.prefactor, "exponent": pl.exponent, "r2_loglog": pl.r2_loglog}
        _write(out, "report.json", json.dumps(report, indent=2, sort_keys=True), written)
    else:
        k = min(int(cfg["max_dims"]), rec.n_neurons // 2)
        spec = svca(rec, k, seed, **kw)
        _write(out, "spectrum.csv", spec.to_csv(), written)
        _write(out, "report.json", json.dumps(spec.to_dict(), indent=2, sort_keys=True), written)
    return written, EXIT_OK


def cmd_trend(cfg, seed, jobs, out):
    from .trend import CapabilitySeries, fit_trend, frontier_filter, project

    series = CapabilitySeries.from_csv(Path(cfg["input"]))
    if cfg["lookback"]:
        series = frontier_filter(series, int(cfg["lookback"]))
    fits = fit_trend(series, cfg["year_min"], cfg["reference_year"])
    lines = ["modality,year,center,lower,upper"]
    for mod, fit in fits.items():
        if not fit.defined:
            continue
        for y in cfg["project"]:
            c, (lo, hi) = project(fit, y, cfg["level"])
            lines.append(f"{mod},{float(y)!r},{c!r},{lo!r},{hi!r}")
    written = []
    _write(out, "trend.json", json.dumps({m: f.to_dict() for m, f in fits.items()}, indent=2, sort_keys=True), written)
    _write(out, "projections.csv", "\n".join(lines) + "\n", written)
    return written, EXIT_OK


def cmd_distill(cfg, seed, jobs, out):
    from .distill.study import StudyConfig, run_distillation_study, train_teacher

    study_cfg = StudyConfig.from_dict(cfg["study"])
    teacher = train_teacher(study_cfg, seed)
    rep = run_distillation_study(cfg["sizes"], cfg["betas"], cfg["noise_fracs"], seed, study_cfg, jobs, teacher)
    written = []
    _write(out, "study.csv", rep.to_csv(), written)
    doc = json.loads(rep.to_json())
    doc.pop("runtime_s")
    _write(out, "study.json", json.dumps(doc, indent=2, sort_keys=True), written)
    teacher.save(Path(out) / "teacher.bin")
    written += [Path(out) / "teacher.bin", Path(out) / "teacher.bin.json"]
    failed = any(r.error for r in rep.rows)
    return written, EXIT_FAIL if failed else EXIT_OK


def cmd_verify_appendix(cfg, seed, jobs, out):
    from .scaling_laws import compare_theory_simulation

    rep = compare_theory_simulation(None, int(cfg["replicates"]), seed, float(cfg["tolerance"]), int(cfg["n_val"]))
    written = []
    _write(out, "theory.csv", rep.to_csv(), written)
    summary = {"ok": rep.ok, "max_gap": rep.max_gap, "tolerance": rep.tolerance,
               "breaches": sum(r.breach for r in rep.rows), "cells": len(rep.rows)}
    _write(out, "report.json", json.dumps(summary, indent=2, sort_keys=True), written)
    if not rep.ok:
        print(f"twinlab: error: {summary['breaches']} of {summary['cells']} cells exceed tolerance "
              f"{rep.tolerance} (max gap {rep.max_gap:.4f})", file=sys.stderr)
    return written, EXIT_OK if rep.ok else EXIT_FAIL


COMMANDS = {
    "simulate": cmd_simulate,
    "fit-law": cmd_fitlaw,
    "svca": cmd_svca,
    "trend": cmd_trend,
    "distill": cmd_distill,
    "verify-appendix": cmd_verify_appendix,
}


# ---------------------------------------------------------------- manifest


def sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def execute(command, cfg, seed, jobs, out_dir):
    """Run a command, write its manifest, return (manifest, exit status)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        written, status = COMMANDS[command](cfg, seed, jobs, out)
    except Exception as exc:  # module errors are reported, not raised
        if isinstance(exc, (KeyboardInterrupt, SystemExit)):
            raise
        record = {"command": command, "error_type": type(exc).__name__, "message": str(exc).splitlines()[0] if str(exc) else ""}
        (out / "error.json").write_text(json.dumps(record, indent=2, sort_keys=True))
        print(f"twinlab: error: {record['error_type']}: {record['message']}", file=sys.stderr)
        return None, EXIT_FAIL
    manifest = {
        "command": command,
        "config": cfg,
        "master_seed": seed,
        "tool_version": __version__,
        "jobs": jobs,
        "runtime_s": round(time.perf_counter() - t0, 3),
        "exit_status": status,
        "outputs": [{"path": p.name, "sha256": sha256(p)} for p in written],
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest, status


def rerun(manifest_path, out_dir=None, jobs=None):
    """Re-execute a manifest; returns (list of mismatched outputs, exit status)."""
    path = Path(manifest_path)
    man = json.loads(path.read_text())
    out = Path(out_dir) if out_dir else path.parent / "rerun"
    new, status = execute(man["command"], man["config"], man["master_seed"], jobs or man.get("jobs") or 1, out)
    if new is None:
        return None, EXIT_FAIL
    before = {o["path"]: o["sha256"] for o in man["outputs"]}
    after = {o["path"]: o["sha256"] for o in new["outputs"]}
    mismatched = sorted(k for k in set(before) | set(after) if before.get(k) != after.get(k))
    return mismatched, status


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    np.seterr(over="ignore", under="ignore")
    if args.command == "rerun":
        try:
            mismatched, status = rerun(args.manifest, args.out_dir, args.jobs)
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            print(f"twinlab: error: cannot replay manifest: {exc}", file=sys.stderr)
            return EXIT_USAGE
        if mismatched is None:
            return EXIT_FAIL
        if mismatched:
            print(f"twinlab: error: outputs differ from manifest: {', '.join(mismatched)}", file=sys.stderr)
            return EXIT_FAIL
        print("all outputs reproduced byte-identically")
        return status
    try:
        cfg = resolve(args.command, args)
    except UsageError as exc:
        parser.error(str(exc))  # exits with status 2
    seed = args.seed
    if seed is None and args.config:
        seed = json.loads(Path(args.config).read_text()).get("seed")
    if seed is None:
        seed = fresh_seed()
        print(f"seed not given; using {seed}", file=sys.stderr)
    jobs = args.jobs or os.cpu_count() or 1
    manifest, status = execute(args.command, cfg, int(seed), jobs, args.out_dir)
    if manifest is not None:
        print(json.dumps({"out_dir": str(args.out_dir), "outputs": manifest["outputs"], "exit_status": status}))
    return status


if __name__ == "__main__":
    sys.exit(main())
