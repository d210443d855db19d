"""Command-line interface: ``ternarych run`` and ``ternarych converge``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .harness import (
    EXIT_CONFIG,
    EXIT_NONCONVERGENCE,
    EXIT_OK,
    convergence_study,
    load_run_config,
    load_study_config,
    run,
    write_convergence_report,
)
from .mesh import ConfigurationError
from .stepper import NonConvergence


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ternarych",
        description=(
            "Mass-lumped finite element simulator for ternary Cahn-Hilliard"
            " dynamics with Flory-Huggins-deGennes energy."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one simulation from a config file")
    p_run.add_argument("--config", required=True, help="flat key=value config file")
    p_run.add_argument("--out", help="output directory (overrides config)")
    p_run.add_argument("--seed", type=int, help="random seed (overrides config)")
    p_run.add_argument("--preset", help="initial condition preset (overrides config)")

    p_conv = sub.add_parser("converge", help="run a convergence ladder study")
    p_conv.add_argument("--mode", required=True, choices=("temporal", "spatial"))
    p_conv.add_argument("--config", required=True)
    p_conv.add_argument("--out", help="output directory (overrides config)")
    p_conv.add_argument("--seed", type=int)
    p_conv.add_argument(
        "--full-scale",
        action="store_true",
        help="temporal mode: use the full 256-nodes-per-side mesh",
    )
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            config = load_run_config(
                args.config,
                overrides={"out": args.out, "seed": args.seed, "preset": args.preset},
            )
            return run(config)

        overrides = {"out": args.out, "seed": args.seed}
        if args.full_scale:
            overrides["n"] = 256
        study = load_study_config(args.config, mode=args.mode, overrides=overrides)
        report = convergence_study(study)
        path = write_convergence_report(report, Path(study.outdir))
        print(f"wrote {path}")
        for c in ("phi1", "phi2", "phi3"):
            print(f"L2 slope {c}: {report.slopes_l2[c]:.4f}")
        return EXIT_OK
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonConvergence as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE


if __name__ == "__main__":
    raise SystemExit(main())
