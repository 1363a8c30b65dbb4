"""Command-line entry point: ``turbo-isac {trial,sweep,pilotopt-trace}``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

import numpy as np

from . import io as tio
from .fim import AoaPartition, IdentifiabilityError
from .harness import (ARMS, ScenarioConfig, estimated_partition, format_csv, matched_hmm, metrics_dict,
                      run_experiment, run_trial, trial_seeds)
from .mstep import run_turbo_sbi
from .observation import PilotSet, observe, omnidirectional_pilots
from .pilots import optimize_pilots
from .scene import ConfigurationError, make_cdl_like_scene


# CLI flag -> ScenarioConfig field
_FLAGS = {"m": int, "p1": int, "p2": int, "q": int, "snr_db": float, "k_targets": int,
          "l_paths": int, "trials": int, "seed": int, "detection_threshold": float,
          "power_budget": float, "offgrid_jitter": float, "jobs": int}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON scenario file; flags given explicitly override it")
    common.add_argument("--out", help="output path (default: stdout)")
    for name, typ in _FLAGS.items():
        common.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    common.add_argument("--rho-common", dest="rho_common", type=float, nargs="+", default=None)
    common.add_argument("--arms", nargs="+", choices=ARMS, default=None)
    common.add_argument("--full-scale", action="store_true", help="use M = 64 antennas")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="turbo-isac", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("trial", parents=[common], help="one arm on one scene, metrics as JSON")
    t.add_argument("--arm", choices=ARMS, default="JPOTDCE")
    t.add_argument("--scene-seed", type=int, default=0, help="trial index of the scene")
    t.add_argument("--rho-index", type=int, default=0)
    sub.add_parser("sweep", parents=[common], help="Monte-Carlo sweep over rho_c, CSV table")
    po = sub.add_parser("pilotopt-trace", parents=[common], help="MM convergence trace, CSV rows")
    po.add_argument("--scene-seed", type=int, default=0)
    po.add_argument("--rho-index", type=int, default=0)
    po.add_argument("--genie", action="store_true", help="optimize for the true partition")
    return p


def build_config(args) -> ScenarioConfig:
    base = tio.load(args.config) if args.config else ScenarioConfig()
    if not isinstance(base, ScenarioConfig):
        raise ConfigurationError("--config must hold a scenario document")
    over = {k: getattr(args, k) for k in list(_FLAGS) + ["rho_common", "arms"] if getattr(args, k) is not None}
    if args.full_scale:
        over["m"] = 64
    return replace(base, **over) if over else base


def _emit(text: str, path) -> None:
    if path:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _pilotopt_trace(cfg: ScenarioConfig, trial: int, rho_index: int, genie: bool) -> str:
    rho = cfg.rho_common[rho_index]
    scene_seed, pilot_seed, noise_seed, _ = trial_seeds(cfg, rho_index, trial)
    scene = make_cdl_like_scene(rho, cfg.k_targets, cfg.l_paths, cfg.m, scene_seed, cfg.var_r,
                                cfg.var_c, cfg.offgrid_jitter)
    dp1 = omnidirectional_pilots(cfg.m, cfg.p1, cfg.power_budget, np.random.default_rng(pilot_seed))
    pilots = PilotSet(dp1, np.zeros((0, cfg.m)), np.ones(cfg.q, complex), cfg.power_budget)
    nvr, nvc = cfg.noise_vars()
    if genie:
        part = AoaPartition.from_scene(scene)
    else:
        obs = observe(scene, pilots, 1, nvr, nvc, noise_seed)
        res = run_turbo_sbi(pilots, obs, matched_hmm(cfg, rho), 1, cfg.estep, cfg.mstep)
        part = estimated_partition(res, cfg.m, cfg.detection_threshold)
    design = optimize_pilots(part, pilots, nvr, nvc, replace(cfg.pilot, p2=max(cfg.p2, 1)))
    cols = ["iteration", "lambda", "lmi_margin", "max_trace", "surrogate"]
    lines = [",".join(cols)]
    for row in design.trace:
        lines.append(",".join(str(row[c]) if c == "iteration" else f"{row[c]:.5e}" for c in cols))
    return "\n".join(lines) + "\n"


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = build_config(args)
    except (ConfigurationError, ValueError, TypeError, OSError, json.JSONDecodeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    try:
        if args.command == "trial":
            if not 0 <= args.rho_index < len(cfg.rho_common):
                raise ConfigurationError("rho index out of range")
            met = run_trial(cfg, args.scene_seed, args.arm, args.rho_index)
            _emit(json.dumps(metrics_dict(met), indent=1) + "\n", args.out)
            return 2 if met.failed else 0
        if args.command == "sweep":
            rows = run_experiment(cfg)
            _emit(format_csv(rows), args.out)
            return 0
        if not 0 <= args.rho_index < len(cfg.rho_common):
            raise ConfigurationError("rho index out of range")
        _emit(_pilotopt_trace(cfg, args.scene_seed, args.rho_index, args.genie), args.out)
        return 0
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (IdentifiabilityError, RuntimeError, ArithmeticError, np.linalg.LinAlgError, OSError) as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
