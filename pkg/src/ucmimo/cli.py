"""``simulate`` command line entry point.

Errors are reported on stderr as one JSON object and a nonzero exit code:
2 for configuration problems, 3 for output I/O, 1 for anything else.
"""

import argparse
import json
import os
import sys

from ._validation import ParameterError
from .association import parse_mode
from .simulate import (
    CSI_MODES,
    PRESETS,
    STRATEGIES,
    ConfigError,
    SimulationConfig,
    emit_results,
    run_campaign,
)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="simulate",
        description="Cell-free vs user-centric MIMO Monte Carlo campaign.")
    parser.add_argument("--config", required=True,
                        help=f"TOML/JSON config file or preset name ({', '.join(PRESETS)})")
    parser.add_argument("--drops", type=int, help="number of random drops")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--strategies", help="comma list from " + ",".join(STRATEGIES))
    parser.add_argument("--association", help="cf | topn:N | above_average")
    parser.add_argument("--csi", choices=CSI_MODES + ("both",))
    parser.add_argument("--trace", action="store_true", help="also write solver traces")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--workers", type=int, help="worker processes")
    return parser


def _load_config(args):
    if not os.path.exists(args.config) and args.config in PRESETS:
        config = SimulationConfig.preset(args.config)
    else:
        try:
            config = SimulationConfig.from_file(args.config)
        except FileNotFoundError:
            raise ConfigError(f"config file {args.config!r} not found") from None
    overrides = {}
    if args.drops is not None:
        overrides["run.n_drops"] = args.drops
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    if args.strategies is not None:
        overrides["run.strategies"] = [s.strip() for s in args.strategies.split(",") if s.strip()]
    if args.association is not None:
        parse_mode(args.association)
        overrides["association.mode"] = args.association
    if args.csi is not None:
        overrides["run.csi"] = list(CSI_MODES) if args.csi == "both" else [args.csi]
    if args.trace:
        overrides["run.trace"] = True
    if args.out is not None:
        overrides["run.output_dir"] = args.out
    if args.workers is not None:
        overrides["run.workers"] = args.workers
    return config.updated(overrides) if overrides else config


def _fail(kind, exc, code):
    json.dump({"error": kind, "type": type(exc).__name__, "message": str(exc)}, sys.stderr)
    sys.stderr.write("\n")
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = _load_config(args)
    except (ParameterError, OSError) as exc:
        return _fail("config", exc, 2)
    try:
        report = run_campaign(config)
        paths = emit_results(report, config["run.output_dir"], trace=config["run.trace"])
    except OSError as exc:
        return _fail("io", exc, 3)
    except Exception as exc:
        return _fail("runtime", exc, 1)
    summary = report.summary()
    if not summary["n_drops_successful"]:
        return _fail("runtime", RuntimeError(f"all {summary['n_drops_failed']} drops failed"), 1)
    json.dump({"status": "ok", "outputs": paths,
               "n_drops_successful": summary["n_drops_successful"],
               "n_drops_failed": summary["n_drops_failed"]}, sys.stdout)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
