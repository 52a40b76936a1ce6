"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical failure (a
``diagnostics.json`` is written to the output directory).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .experiment import (
    PRESETS,
    ConfigError,
    load_config,
    preset_config,
    run_experiment,
    run_oracle,
    validate_config,
)
from .sde_core import NumericalError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

# flag -> (section, field) in the config document
_OVERRIDES = {
    "seed": ("solver", "seed"),
    "samples": ("solver", "n_samples"),
    "iters": ("solver", "n_iters"),
    "step_size": ("solver", "step_size"),
    "terminal_sampling": ("solver", "terminal_sampling"),
    "dt": ("grid", "dt"),
    "horizon": ("grid", "horizon"),
    "repeats": (None, "n_repeats"),
    "trajectories": (None, "n_trajectories"),
    "output_dir": (None, "output_dir"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fbsde-reversal",
        description="Solve an LQ stochastic control problem with the time-reversed FBSDE "
        "Monte-Carlo scheme and compare against the Riccati solution.",
    )
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", type=Path, help="JSON experiment config")
    src.add_argument("--preset", choices=sorted(PRESETS), help="built-in experiment (default: mass-spring)")
    p.add_argument("--seed", type=int, help="master seed; repeat r uses seed + r")
    p.add_argument("--samples", type=int, help="number of Monte-Carlo samples N")
    p.add_argument("--iters", type=int, help="number of iterations")
    p.add_argument("--step-size", type=float, help="gradient step size")
    p.add_argument("--dt", type=float, help="time step")
    p.add_argument("--horizon", type=float, help="time horizon T")
    p.add_argument("--repeats", type=int, help="independent repeats (seeds)")
    p.add_argument("--trajectories", type=int, help="samples written to trajectories.csv")
    p.add_argument("--terminal-sampling", choices=["fixed", "fresh", "reuse"])
    p.add_argument("--output-dir", type=str, help="directory for CSV and JSON output")
    p.add_argument("--oracle-only", action="store_true", help="solve the Riccati equation and exit")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args):
    if args.config is not None:
        cfg = load_config(args.config)
    else:
        cfg = preset_config(args.preset or "mass-spring")
    data = cfg.model_dump(mode="json")
    for flag, (section, key) in _OVERRIDES.items():
        value = getattr(args, flag)
        if value is None:
            continue
        (data[section] if section else data)[key] = value
    return validate_config(data)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.print_config:
        print(json.dumps(cfg.model_dump(mode="json"), indent=2))
        return EXIT_OK
    if args.oracle_only:
        print(json.dumps(run_oracle(cfg), indent=2))
        return EXIT_OK

    try:
        artifacts = run_experiment(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        diag = {"error": str(exc), "context": getattr(exc, "context", {}), "config_hash": cfg.digest()}
        (out / "diagnostics.json").write_text(json.dumps(diag, indent=2, default=str) + "\n")
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(json.dumps(artifacts.summary, indent=2))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
