"""Command-line entry point: ``benders-mpc <subcommand> ...``.

Exit codes: 0 success, 1 runtime or solver failure, 2 usage or config error.
Set ``BENDERS_MPC_LOG`` (DEBUG, INFO, WARNING, ...) for log verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from benders_mpc.bounds import TemporalDeviation, load_lipschitz_db, save_lipschitz_db
from benders_mpc.models import MODEL_IDS, ParamsError, load_params
from benders_mpc.sim import (
    EpisodeConfig,
    alpha_trace,
    build_lipschitz_db,
    episode_summary,
    monte_carlo,
    run_episode,
    write_alpha_trace,
)
from benders_mpc.verify import run_verify

log = logging.getLogger("benders_mpc")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ConfigError(Exception):
    pass


def _read_json(path, what):
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}:{exc.lineno}:{exc.colno}: invalid JSON in {what} file: {exc.msg}") from None


def _episode_config(args):
    fields = {}
    if args.config:
        data = _read_json(args.config, "episode config")
        known = {f.name for f in dataclasses.fields(EpisodeConfig)} - {"model_id", "params"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"{args.config}: unknown episode config fields {sorted(unknown)}")
        fields.update(data)
    overrides = {"steps": args.steps, "seed": args.seed, "K_feas": args.kfeas, "K_opt": args.kopt,
                 "G_a": args.ga, "N": args.horizon, "I_max": args.imax}
    fields.update({k: v for k, v in overrides.items() if v is not None})
    if getattr(args, "no_disturbance", False):
        fields["disturbance"] = "none"
    params = None
    if args.params:
        _read_json(args.params, "model params")
        try:
            params = load_params(args.model, args.params)
        except (ParamsError, TypeError) as exc:
            raise ConfigError(f"{args.params}: {exc}") from None
    if "x0_init" in fields and fields["x0_init"] is not None:
        fields["x0_init"] = tuple(fields["x0_init"])
    try:
        return EpisodeConfig(model_id=args.model, params=params, **fields)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid episode config: {exc}") from None


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _write_json(path, data):
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1, default=_json_default)


def cmd_run(args):
    cfg = _episode_config(args)
    out = _out_dir(args)
    ep = run_episode(cfg)
    ep.write_csv(out / "episode.csv")
    summary = episode_summary(ep, min(args.cold_start, cfg.steps))
    summary["seed"] = cfg.seed
    _write_json(out / "summary.json", summary)
    line = f"{cfg.model_id}: {ep.steps}/{cfg.steps} steps, median solve {summary['median_solve_us']:.0f} us"
    if "final_abs_theta" in summary:
        line += f", final |theta| {summary['final_abs_theta']:.3g} rad"
    print(line)
    if ep.failed:
        print(f"episode failed: {ep.message}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_monte_carlo(args):
    cfg = _episode_config(args)
    out = _out_dir(args)
    logs, summary = monte_carlo(cfg, args.episodes, jobs=args.jobs, cold_start=args.cold_start,
                                contact_only=args.contact_only)
    summary["per_episode"] = [episode_summary(ep, args.cold_start) for ep in logs]
    _write_json(out / "summary.json", summary)
    for i, ep in enumerate(logs):
        ep.write_csv(out / f"episode_{i:03d}.csv")
    hist = summary["iter_histogram"]
    total = sum(hist.values())
    within5 = sum(v for k, v in hist.items() if int(k) <= 5)
    share = within5 / total if total else math.nan
    print(f"{args.episodes} episodes, success rate {summary['success_rate']:.2f}, "
          f"{within5}/{total} instances within 5 iterations ({share:.1%})")
    return EXIT_OK if summary["success_rate"] == 1.0 else EXIT_FAIL


def cmd_verify(args):
    if args.max_bits > 20:
        raise ConfigError("--max-bits must be at most 20")
    if args.instances == 0:
        print("warning: 0 instances requested; nothing checked", file=sys.stderr)
    records = run_verify(args.instances, args.max_bits, args.seed, inject_fault=args.inject_fault)
    if args.out:
        out = _out_dir(args)
        _write_json(out / "verify.json", records)
    ok = all(r["pass"] for r in records)
    print(f"{'instance':>8} {'model':>9} {'N':>3} {'check':<22} result")
    for r in records:
        print(f"{r['instance']:>8} {r['model']:>9} {r['N']:>3} {r['check']:<22} {'pass' if r['pass'] else 'FAIL'}")
    print(f"{sum(r['pass'] for r in records)}/{len(records)} checks passed")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_estimate_lipschitz(args):
    cfg = _episode_config(args)
    db = build_lipschitz_db(cfg, args.samples, args.perturbations, args.shift, args.stretch, cfg.seed)
    out = Path(args.db)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_lipschitz_db(db, out)
    flagged = sum(e.warning is not None for e in db)
    print(f"wrote {len(db)} entries to {out} ({flagged} with L_delta fallback)")
    return EXIT_OK


def cmd_alpha_trace(args):
    cfg = _episode_config(args)
    dev = TemporalDeviation(args.shift, args.stretch)
    if args.db and Path(args.db).is_file():
        db = load_lipschitz_db(args.db)
    elif args.estimate:
        db = build_lipschitz_db(cfg, args.samples, 5, args.shift, args.stretch, cfg.seed)
        if args.db:
            save_lipschitz_db(db, args.db)
    else:
        raise ConfigError(f"Lipschitz database not found: {args.db}; pass --estimate to build one")
    if not db:
        print("Lipschitz estimation produced no entries", file=sys.stderr)
        return EXIT_FAIL
    out = _out_dir(args)
    ep, rows = alpha_trace(cfg, db, dev)
    write_alpha_trace(rows, out / "alpha_trace.csv")
    print(f"wrote {len(rows)} rows to {out / 'alpha_trace.csv'}")
    if ep.failed:
        print(f"episode failed: {ep.message}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def _episode_flags(p, steps):
    p.add_argument("model", choices=MODEL_IDS)
    p.add_argument("--params", help="model parameter JSON file")
    p.add_argument("--config", help="episode config JSON file")
    p.add_argument("--steps", type=int, default=steps)
    p.add_argument("--seed", type=int)
    p.add_argument("--kfeas", type=int, help="feasibility cut buffer capacity")
    p.add_argument("--kopt", type=int, help="optimality cut buffer capacity")
    p.add_argument("--ga", type=float, help="relative convergence gap")
    p.add_argument("--horizon", type=int, help="MPC horizon N")
    p.add_argument("--imax", type=int, help="GBD iteration cap per solve")
    p.add_argument("--no-disturbance", action="store_true")
    p.add_argument("--out", default="out")


def build_parser():
    parser = argparse.ArgumentParser(prog="benders-mpc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate one closed-loop episode")
    _episode_flags(p, 100)
    p.add_argument("--cold-start", type=int, default=10, help="steps excluded from iteration statistics")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("monte-carlo", help="run independent episodes and aggregate iteration counts")
    _episode_flags(p, 10)
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--cold-start", type=int, default=1)
    p.add_argument("--contact-only", action="store_true", help="count only steps that plan contact")
    p.set_defaults(func=cmd_monte_carlo)

    p = sub.add_parser("verify", help="cross-check GBD against the exact oracles")
    p.add_argument("--max-bits", type=int, default=8)
    p.add_argument("--instances", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", action="store_true", help="flip the sign of generated optimality cuts")
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("estimate-lipschitz", help="build a Lipschitz database from sampled states")
    _episode_flags(p, 1)
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--perturbations", type=int, default=5)
    p.add_argument("--shift", type=int, default=2)
    p.add_argument("--stretch", type=int, default=2)
    p.add_argument("--db", default="lipschitz.json")
    p.set_defaults(func=cmd_estimate_lipschitz)

    p = sub.add_parser("alpha-trace", help="log the gap bound of the chosen sequence along an episode")
    _episode_flags(p, 40)
    p.add_argument("--shift", type=int, default=2)
    p.add_argument("--stretch", type=int, default=2)
    p.add_argument("--db", help="Lipschitz database JSON")
    p.add_argument("--estimate", action="store_true", help="build the database first")
    p.add_argument("--samples", type=int, default=20)
    p.set_defaults(func=cmd_alpha_trace)
    return parser


def main(argv=None):
    level = os.environ.get("BENDERS_MPC_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    if args.command == "alpha-trace":
        # 30 binaries in contact can need well over 100 cold iterations.
        args.horizon = 15 if args.horizon is None else args.horizon
        args.imax = 500 if args.imax is None else args.imax
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # solver or runtime failure
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
