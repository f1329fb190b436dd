"""Command line: ``simulate``, ``fit``, ``clone`` and ``report``.

Exit codes: 0 success, 2 configuration or user error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .diagnostics import LOG_ESS_CUTOFF
from .experiments import (ExperimentConfig, clone_study, fit, load_config, merge, write_fit,
                          write_verdicts)
from .model import SIM_PARAMS, STOCKS, ConfigError, write_drivers
from .sampler import NumericalError
from .synth import generate_study, load_dataset, write_dataset

log = logging.getLogger("dalec_ssm")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dalec-ssm", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or TOML experiment configuration")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for chains")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate synthetic datasets")
    s.add_argument("--scenario", choices=["daily", "monthly", "annual"], help="stock observation frequency")
    s.add_argument("--flux-mask", choices=["all", "neon_gpp", "neon_nee"])
    s.add_argument("--replicates", type=int)
    s.add_argument("--horizon", type=int, help="days")
    s.add_argument("--drivers", help="driver CSV (default: bundled two-year file)")

    f = sub.add_parser("fit", parents=[common], help="run MCMC on a dataset directory")
    f.add_argument("dataset")
    f.add_argument("--latent-step", help="daily | monthly | explicit:[t0,...]")
    f.add_argument("--chains", type=int)
    f.add_argument("--iterations", type=int)
    f.add_argument("--burn-in", type=int)
    f.add_argument("--init", choices=["auto", "gp", "particle_filter", "truth_debug"])
    f.add_argument("--drivers")

    c = sub.add_parser("clone", parents=[common], help="data-cloning identifiability study")
    c.add_argument("dataset")
    c.add_argument("--r", help="comma-separated clone counts, e.g. 1,5,25")
    c.add_argument("--params", help="comma-separated parameters to classify (default: all)")
    c.add_argument("--latent-step")
    c.add_argument("--iterations", type=int)
    c.add_argument("--burn-in", type=int)
    c.add_argument("--init", choices=["auto", "gp", "particle_filter", "truth_debug"])
    c.add_argument("--drivers")

    r = sub.add_parser("report", parents=[common], help="summary tables from result directories")
    r.add_argument("results", nargs="+")
    return p


def _config(args) -> ExperimentConfig:
    base = load_config(args.config)
    over: dict = {"scenario": {}, "mcmc": {}, "init": {}}
    g = lambda name: getattr(args, name, None)  # noqa: E731
    over["scenario"].update({"stock_frequency": g("scenario"), "flux_mask": g("flux_mask"),
                             "replicates": g("replicates"), "horizon_days": g("horizon"),
                             "seed": g("seed")})
    over["mcmc"].update({"chains": g("chains"), "total_iterations": g("iterations"), "burn_in": g("burn_in"),
                         "seed": g("seed")})
    over["init"].update({"mode": g("init")})
    over.update({"grid": g("latent_step"), "drivers": g("drivers"), "out": g("out")})
    if g("r"):
        try:
            over["clone_r"] = [int(v) for v in args.r.split(",")]
        except ValueError as exc:
            raise ConfigError(f"--r expects integers: {args.r}") from exc
    over = {k: ({kk: vv for kk, vv in v.items() if vv is not None} if isinstance(v, dict) else v)
            for k, v in over.items()}
    cfg = ExperimentConfig.from_dict(merge(base, over))
    mc = cfg.mcmc
    if mc.burn_in >= mc.total_iterations:
        raise ConfigError("burn_in must be smaller than the number of iterations")
    return cfg


def _seed(args, cfg: ExperimentConfig) -> int:
    return int(args.seed) if args.seed is not None else int(cfg.mcmc.seed)


def cmd_simulate(args) -> int:
    cfg = _config(args)
    drivers = cfg.load_drivers()
    out = Path(cfg.out)
    study = generate_study(cfg.scenario, drivers, params=SIM_PARAMS, init_mean=np.asarray(cfg.init_mean),
                           noise=cfg.noise, acm_config=cfg.acm)
    out.mkdir(parents=True, exist_ok=True)
    write_drivers(drivers, out / "drivers.csv")
    for ds in study:
        write_dataset(ds, out / f"replicate_{ds.manifest['replicate']:03d}")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(study)} replicate(s) to {out}")
    return 0


def _dataset_and_drivers(path: str, cfg: ExperimentConfig):
    d = Path(path)
    if not (d / "manifest.json").exists():
        raise ConfigError(f"not a dataset directory (no manifest.json): {d}")
    ds = load_dataset(d)
    if cfg.drivers is None:
        for cand in (d / "drivers.csv", d.parent / "drivers.csv"):
            if cand.exists():
                cfg.drivers = str(cand)
                break
    cfg.scenario.horizon_days = ds.truth.states.shape[0] - 1
    return ds, cfg.load_drivers()


def cmd_fit(args) -> int:
    cfg = _config(args)
    ds, drivers = _dataset_and_drivers(args.dataset, cfg)
    seed = _seed(args, cfg)
    result = fit(ds, drivers, cfg, seed, args.jobs)
    out = Path(cfg.out)
    summary = write_fit(result, out, cfg, ds.truth, {"dataset": str(Path(args.dataset)), "seed": seed})
    for i, ch in enumerate(summary["chains"]):
        print(f"chain {i}: mean log-ESS(phi) = {ch['mean_log_ess_precision']:.3f} (cut-off {LOG_ESS_CUTOFF:.2f})")
    if "rhat_params" in summary:
        print("R-hat: " + " ".join(f"{k}={v:.3f}" for k, v in summary["rhat_params"].items()))
    return 0


def cmd_clone(args) -> int:
    cfg = _config(args)
    ds, drivers = _dataset_and_drivers(args.dataset, cfg)
    seed = _seed(args, cfg)
    params = args.params.split(",") if args.params else None
    study = clone_study(ds, drivers, cfg, seed, **({"parameters": params} if params else {}), jobs=args.jobs)
    out = Path(cfg.out)
    for r, res in study.fits.items():
        write_fit(res, out / f"r_{r:03d}", cfg, ds.truth, {"dataset": str(Path(args.dataset)), "r": r})
    write_verdicts(study, out)
    for v in study.verdicts.values():
        print(f"{v.parameter}: {v.verdict}")
    return 0


def _find(paths: List[str], name: str) -> List[Path]:
    found = []
    for p in paths:
        p = Path(p)
        if p.is_file() and p.name == name:
            found.append(p)
        elif p.is_dir():
            found.extend(sorted(p.rglob(name)))
    return found


def cmd_report(args) -> int:
    diags = _find(args.results, "diagnostics.json")
    verdicts = _find(args.results, "verdicts.csv")
    if not diags and not verdicts:
        raise ConfigError("no diagnostics.json or verdicts.csv found under " + ", ".join(args.results))
    out = Path(args.out or "report")
    out.mkdir(parents=True, exist_ok=True)
    # run labels are relative to the common parent so reports do not depend on where results live
    base = Path(os.path.commonpath([str(p.resolve().parent) for p in diags + verdicts]))
    if len(diags) + len(verdicts) == 1:
        base = base.parent

    def label(path: Path) -> str:
        return path.resolve().parent.relative_to(base).as_posix()

    ess_rows, cov_rows = [], []
    for path in diags:
        d = json.loads(path.read_text())
        man = json.loads((path.parent / "manifest.json").read_text()) if (path.parent / "manifest.json").exists() else {}
        c = man.get("config", {})
        scen = c.get("scenario", {})
        key = [label(path), scen.get("stock_frequency", ""), scen.get("flux_mask", ""), c.get("grid", "")]
        for i, ch in enumerate(d["chains"]):
            for s in STOCKS:
                ess_rows.append(key + [i, s, ch["log_ess_precision"][s], LOG_ESS_CUTOFF])
        if "coverage" in d:
            cov = d["coverage"]
            cov_rows.append(key + [cov["stocks"][s] for s in STOCKS] + [cov["precision"][s] for s in STOCKS])
    with (out / "ess_long.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "stock_frequency", "flux_mask", "grid", "chain", "stock", "log_ess", "cutoff"])
        w.writerows(ess_rows)
    with (out / "coverage_table.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "stock_frequency", "flux_mask", "grid", *STOCKS, *(f"phi_{s}" for s in STOCKS)])
        w.writerows(cov_rows)
        if cov_rows:
            arr = np.array([r[4:] for r in cov_rows], dtype=float)
            w.writerow(["mean", "", "", "", *map(repr, map(float, arr.mean(axis=0)))])
    with (out / "verdicts_long.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "parameter", "verdict"])
        for path in verdicts:
            for row in csv.DictReader(path.open()):
                w.writerow([label(path), row["parameter"], row["verdict"]])
    print(f"report written to {out}")
    return 0


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "clone": cmd_clone, "report": cmd_report}


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
