"""Command line entry point: ``rigidmhd run | verify | sweep``."""
from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, resolve_config, shipped_configs


def _values(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rigidmhd", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress per step")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="integrate a configuration and persist the trajectory")
    r.add_argument("--config", required=True, help="config file or shipped name (%s)" % ", ".join(sorted(shipped_configs())))
    r.add_argument("--out", required=True, help="run directory")
    r.add_argument("--restart", type=int, default=None, metavar="K", help="resume from stored step K")

    v = sub.add_parser("verify", help="re-evaluate the ledger and invariants of a stored run")
    v.add_argument("--trajectory", required=True, help="run directory")
    v.add_argument("--tol", type=float, default=1e-8, help="energy margin tolerance (relative)")

    s = sub.add_parser("sweep", help="run one simulation per parameter value")
    s.add_argument("--config", required=True)
    s.add_argument("--axis", required=True, choices=["eta", "dt", "eps", "n", "kappa"])
    s.add_argument("--values", required=True, type=_values, help="comma-separated, ordered toward the limit (eta, dt, eps descending; n, kappa ascending)")
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int, default=1)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    from . import harness

    try:
        if args.command == "run":
            params = resolve_config(args.config)
            traj = harness.run(params, out=args.out, restart_from=args.restart, progress=args.verbose)
            rep = harness.check_inequality(traj.rows[1:] or traj.rows)  # row 0 has margin 0
            print(f"{params.steps} steps in {traj.elapsed:.1f} s; min relative margin "
                  f"{rep.min_rel_margin:.3e} (step {rep.worst_step})")
            return 0
        if args.command == "verify":
            traj = harness.Trajectory.load(args.trajectory)
            report = harness.verify(traj, tol=args.tol)
            print("\n".join(report.lines()))
            return 0 if report.ok else 1
        params = resolve_config(args.config)
        report = harness.sweep(params, args.axis, args.values, out=args.out, workers=args.workers)
        sys.stdout.write(report.table())
        print(f"monitor {report.monitor} strictly decreasing: {report.strictly_decreasing()}")
        for v, e in report.errors.items():
            print(f"value {v!r} failed: {e}", file=sys.stderr)
        return 0
    except (ConfigError, harness.InvalidParams) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except harness.RunError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
