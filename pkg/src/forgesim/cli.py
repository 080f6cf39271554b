"""Command line entry point: ``forgesim run|preset|inspect``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .config import FederationConfig, load_config
from .errors import ConfigurationError, DivergenceError, ForgeSimError
from .harness import PRESETS, load_checkpoint, run_preset, run_to_directory

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_RUNTIME = 4
EXIT_DIVERGENCE = 5


def _cmd_run(args) -> int:
    cfg = load_config(args.config) if args.config else FederationConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    summary = run_to_directory(cfg, args.out, resume_from=args.resume)
    final = summary["final"]
    if final:
        print(f"{cfg.method}: {summary['rounds_completed']} rounds, "
              f"final global loss {final['global_loss']:.6g}, collapse score {final['collapse_score']:.4f}")
    print(f"output written to {args.out}")
    return EXIT_OK


def _cmd_preset(args) -> int:
    base = load_config(args.config) if args.config else FederationConfig()
    grid = run_preset(args.name, args.out, seeds=range(args.seeds), base=base, jobs=args.jobs)
    for cell in grid["cells"]:
        print(f"{cell['cell']:28s} seed {cell['seed']}  loss {cell['final_global_loss']:.6g}"
              f"  collapse {cell['final_collapse_score']:.4f}")
    print(f"grid summary: {args.out}/{args.name}/grid_summary.json")
    return EXIT_OK


def _cmd_inspect(args) -> int:
    state, header = load_checkpoint(args.checkpoint)
    theta = state.theta
    info = {
        "format": header["format"],
        "version": header["version"],
        "round": state.round,
        "layout": {k: v for k, v in header["layout"].items() if k != "params"},
        "n_params": theta.layout.size,
        "encoder_norm": float(np.linalg.norm(theta.values[theta.layout.encoder])),
        "decoder_norm": float(np.linalg.norm(theta.values[theta.layout.decoder])),
        "bank_shape": list(state.bank.rows.shape),
        "bank_row_norms": [round(float(n), 9) for n in np.linalg.norm(state.bank.rows, axis=1)],
        "method": header["meta"].get("config", {}).get("method"),
    }
    print(json.dumps(info, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="forgesim", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment from a key=value config file")
    run.add_argument("--config", help="config file (defaults apply to omitted keys)")
    run.add_argument("--out", default="runs/latest")
    run.add_argument("--seed", type=int, help="override the master seed")
    run.add_argument("--resume", metavar="CHECKPOINT", help="continue from a checkpoint up to E rounds")
    run.set_defaults(func=_cmd_run)

    preset = sub.add_parser("preset", help="run a named experiment grid")
    preset.add_argument("name", choices=PRESETS)
    preset.add_argument("--out", default="runs")
    preset.add_argument("--config", help="base config for every cell")
    preset.add_argument("--seeds", type=int, default=1, help="run seeds 0..n-1")
    preset.add_argument("--jobs", type=int, default=1, help="cells to run in parallel")
    preset.set_defaults(func=_cmd_preset)

    inspect = sub.add_parser("inspect", help="describe a checkpoint file")
    inspect.add_argument("checkpoint")
    inspect.set_defaults(func=_cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except ForgeSimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
