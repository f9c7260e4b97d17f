"""Command-line entry point: ``rflab <subcommand> [--config c.toml] [--out dir]``."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from contextlib import nullcontext
from pathlib import Path

from rflab.curvature import lichnerowicz
from rflab.errors import ConfigError, RFLabError, SectorialityViolation
from rflab.flow import convergence_status, diffeo_flow, evolve, recover_ricci_flow
from rflab.harness import experiments
from rflab.harness.config import EXPERIMENTS, config_from_dict, default_config_dict, dumps_config, load_config
from rflab.spectral import assemble, geometric_radii, sector_scan, top_spectrum

log = logging.getLogger("rflab")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_INVARIANT = 4


class InvariantViolation(RFLabError):
    """A report failed one of its structural invariants."""


def _parser():
    p = argparse.ArgumentParser(prog="rflab", description="Ricci flow laboratory on periodic grids")
    sub = p.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="TOML experiment file (defaults used when omitted)")
        s.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--threads", type=int, help="BLAS/LAPACK thread count")
    d = sub.add_parser("defaults", help="print a fully populated config")
    d.add_argument("experiment", nargs="?", default="flow", choices=EXPERIMENTS)
    d.add_argument("--out", type=Path, help="write defaults.toml here instead of stdout")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _load(args):
    if args.config is not None:
        cfg = load_config(args.config)
        data = cfg.to_dict()
    else:
        data = default_config_dict(args.command)
    data["experiment"] = args.command
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")
        data["seed"] = args.seed
    if args.out is not None:
        data["output_dir"] = str(args.out)
    return config_from_dict(data)


def _write_json(path, payload):
    path.write_text(json.dumps(payload, indent=2, default=experiments._json_default))


def _run_flow(cfg, out):
    g0 = cfg.initial_metric()
    g_ref = g0 if cfg.rhs_kind == "deturck" else None
    traj = evolve(cfg.rhs_kind, g0, g_ref, cfg.control)
    traj.write_csv(out / "trajectory.csv")
    traj.write_snapshots(out / "snapshots")
    status = convergence_status(traj)
    summary = {
        "rhs_kind": cfg.rhs_kind,
        "termination": traj.termination,
        "final_time": traj.final_time,
        "steps": len(traj.step_dts),
        "converged_to_flat": status.converged_to_flat,
        "decay_rate": status.decay_rate if status.rate_defined else None,
    }
    if cfg.rhs_kind == "deturck" and len(traj.metrics) >= 3 and traj.termination != "blowup":
        ricci = recover_ricci_flow(traj, diffeo_flow(traj, g_ref))
        ricci.write_snapshots(out / "recovered")
        summary["max_recovery_residual"] = float(max(ricci.residuals["residual"]))
    _write_json(out / "summary.json", summary)
    if traj.termination == "blowup":
        log.error("flow blew up at t = %g", traj.final_time)
        return EXIT_NUMERICAL
    return EXIT_OK


def _operator(cfg):
    g0 = cfg.initial_metric()
    return assemble(lambda h: lichnerowicz(g0, h), g0.grid, stencil_radius=2, source="lichnerowicz")


def _run_spectrum(cfg, out):
    A = _operator(cfg)
    spec = top_spectrum(A, min(cfg.spectral.n_eigs, A.n_rows))
    spec.write_csv(out / "spectrum.csv")
    if max(v.real for v in spec.values) > cfg.spectral.K:
        raise InvariantViolation(f"an eigenvalue exceeds K = {cfg.spectral.K}")
    return EXIT_OK


def _run_resolvent(cfg, out):
    s = cfg.spectral
    A = _operator(cfg)
    radii = geometric_radii(s.radii_lo_exp, s.radii_hi_exp, s.radii_per_decade)
    report = sector_scan(
        A, s.K, s.rays, radii, s.norm_kind, restrict_half_plane=s.restrict_half_plane, probes=s.probes, seed=cfg.seed
    )
    report.write_json(out / "sector.json")
    if report.violations:
        raise SectorialityViolation(f"{report.violations} sample(s) failed the resolvent solve")
    return EXIT_OK


def _run_depend(cfg, out):
    report = experiments.run_dependence(cfg)
    report.write_json(out / "dependence.json")
    if not any(report.survived.values()):
        log.error("every perturbed flow blew up before tau")
        return EXIT_NUMERICAL
    recorded = [r for series in report.ratios.values() for r in series]
    if not all(math.isfinite(r) for r in recorded) or any(r > report.C_measured for r in recorded):
        raise InvariantViolation("C_measured must be finite and dominate every recorded ratio")
    return EXIT_OK


def _run_stability(cfg, out, workers):
    report = experiments.run_stability(cfg, workers=workers)
    report.write_json(out / "stability.json")
    if not 0.0 <= report.fraction_converged <= 1.0:
        raise InvariantViolation("fraction converged outside [0, 1]")
    return EXIT_OK


def _run_ball(cfg, out):
    report = experiments.run_ball_conditions(cfg)
    report.write_json(out / "ball.json")
    for row in report.directions:
        if not row["r_metric"] >= row["r_elliptic"] >= row["r_perturb"]:
            raise InvariantViolation(f"ball radii out of order in direction {row['index']}")
    return EXIT_OK


def _dispatch(args):
    if args.command == "defaults":
        text = dumps_config(default_config_dict(args.experiment))
        if args.out is None:
            sys.stdout.write(text)
        else:
            args.out.mkdir(parents=True, exist_ok=True)
            (args.out / "defaults.toml").write_text(text)
        return EXIT_OK
    cfg = _load(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(dumps_config(cfg.to_dict()))
    if args.threads is not None and args.threads < 1:
        raise ConfigError("--threads must be positive")
    workers = args.threads or 1
    limiter = nullcontext()
    if args.threads is not None:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=args.threads)
    with limiter:
        if args.command == "flow":
            return _run_flow(cfg, out)
        if args.command == "spectrum":
            return _run_spectrum(cfg, out)
        if args.command == "resolvent":
            return _run_resolvent(cfg, out)
        if args.command == "depend":
            return _run_depend(cfg, out)
        if args.command == "stability":
            return _run_stability(cfg, out, workers)
        return _run_ball(cfg, out)


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="rflab: %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (SectorialityViolation, InvariantViolation) as exc:
        log.error("invariant violated: %s", exc)
        return EXIT_INVARIANT
    except RFLabError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
