"""Command line entry points for the twin-experiment harness.

Exit codes: 0 success, 1 a run failed, 2 configuration error.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import harness
from .harness import ConfigError, default_config, load_config


def _add_common(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--out-dir", default="out", help="directory for result files")
    p.add_argument("--runs", type=int, help="override the run count")


def _build_parser():
    ap = argparse.ArgumentParser(prog="mmda",
                                 description="ensemble DA on adaptive moving meshes")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="single twin experiment")
    _add_common(run)

    tune = sub.add_parser("tune", help="inflation x localization grid")
    _add_common(tune)
    tune.add_argument("--inflations", default="1.0,1.05,1.1")
    tune.add_argument("--loc", default="0.5,1.0")

    for name, help_txt in (
        ("compare-loc", "tuned MT vs GC-mod vs GC-obs"),
        ("compare-mesh", "ensemble vs observation vs intersect common mesh"),
        ("compare-interp", "DG vs linear interpolation"),
    ):
        p = sub.add_parser(name, help=help_txt)
        _add_common(p)

    sweep = sub.add_parser("sweep-cov", help="scale all error covariances together")
    _add_common(sweep)
    sweep.add_argument("--scales", default="0.0001,0.01,1.0")

    noisy = sub.add_parser("noisy-data", help="observations drawn with R_truth = alpha^2 I")
    _add_common(noisy)
    noisy.add_argument("--alphas", default="0.1,1.0,10.0")
    return ap


def _load(args):
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg.master_seed = args.seed
    if args.runs is not None:
        cfg.run_count = args.runs
    return cfg.validate()


def _variant(cfg, **overrides):
    params = cfg.resolved_dict()
    problem = params.pop("problem")
    params.update(overrides)
    return default_config(problem, **params)


def _write_group(out_dir, label, cfg, results):
    d = os.path.join(out_dir, label)
    os.makedirs(d, exist_ok=True)
    for r in results:
        harness.write_rmse_csv(r, os.path.join(d, f"rmse_seed{r.seed}.csv"))
    harness.write_summary_csv(results, os.path.join(d, "summary.csv"), cfg.window)
    harness.write_manifest(cfg, os.path.join(d, "meta.txt"),
                           extra={"label": label})
    return all(r.ok for r in results)


def _run_groups(cfg, groups, out_dir):
    all_ok = True
    lines = []
    for label, variant in groups:
        results = harness.run_many(variant)
        ok = _write_group(out_dir, label, variant, results)
        all_ok = all_ok and ok
        start, end = variant.window
        good = [r for r in results if r.ok]
        mean = np.mean([harness.windowed_mean(r, start, end) for r in good]) if good else math.nan
        lines.append(f"{label}: mean windowed analysis RMSE {mean:.4f} "
                     f"({len(good)}/{len(results)} runs ok)")
    print("\n".join(lines))
    return 0 if all_ok else 1


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        cfg = _load(args)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    os.makedirs(args.out_dir, exist_ok=True)

    try:
        if args.command == "run":
            result = harness.run_twin_experiment(
                cfg, snapshot_dir=os.path.join(args.out_dir, "snapshots"))
            harness.write_rmse_csv(result, os.path.join(args.out_dir, "rmse.csv"))
            harness.write_summary_csv([result], os.path.join(args.out_dir, "summary.csv"),
                                      cfg.window)
            harness.write_manifest(cfg, os.path.join(args.out_dir, "meta.txt"),
                                   extra={"status": result.status})
            start, end = cfg.window
            print(f"status {result.status}, windowed analysis RMSE "
                  f"{harness.windowed_mean(result, start, end):.4f}")
            return 0 if result.ok else 1

        if args.command == "tune":
            inflations = [float(v) for v in args.inflations.split(",")]
            locs = [float(v) for v in args.loc.split(",")]
            rows = harness.tune_grid(cfg, inflations, locs)
            path = os.path.join(args.out_dir, "tune.csv")
            with open(path, "w") as fh:
                fh.write("inflation,loc,mean_rmse,n_ok,n_failed\n")
                for row in rows:
                    fh.write(f"{row['inflation']},{row['loc']},{row['mean_rmse']!r},"
                             f"{row['n_ok']},{row['n_failed']}\n")
            for row in rows:
                print(f"rho={row['inflation']} L={row['loc']}: "
                      f"RMSE {row['mean_rmse']:.4f} ({row['n_ok']} ok)")
            return 0 if all(r["n_failed"] == 0 for r in rows) else 1

        if args.command == "compare-loc":
            groups = []
            for scheme in ("mt", "gc_mod", "gc_obs"):
                rho, L = harness.TUNED[cfg.problem][scheme]
                groups.append(
                    (scheme, _variant(cfg, loc_scheme=scheme, inflation=rho, loc_L=L))
                )
            return _run_groups(cfg, groups, args.out_dir)

        if args.command == "compare-mesh":
            groups = [(mode, _variant(cfg, mesh_mode=mode))
                      for mode in ("ensemble", "observation", "intersect")]
            return _run_groups(cfg, groups, args.out_dir)

        if args.command == "compare-interp":
            groups = [(kind, _variant(cfg, interpolation=kind))
                      for kind in ("dg", "linear")]
            return _run_groups(cfg, groups, args.out_dir)

        if args.command == "sweep-cov":
            scales = [float(v) for v in args.scales.split(",")]
            groups = [
                (f"cov{scale:g}",
                 _variant(cfg, sigma_model=scale, r_obs=scale, p0_b=scale, r_truth=-1.0))
                for scale in scales
            ]
            return _run_groups(cfg, groups, args.out_dir)

        if args.command == "noisy-data":
            alphas = [float(v) for v in args.alphas.split(",")]
            groups = [(f"alpha{a:g}", _variant(cfg, r_truth=a * a)) for a in alphas]
            return _run_groups(cfg, groups, args.out_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    raise SystemExit(main())
