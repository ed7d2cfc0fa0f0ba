"""Command line entry point.

    python cli.py train       --config configs/moons.json --seed 0 --out runs/moons-train
    python cli.py sweep       --config configs/moons.json --workers 4 --out runs/moons
    python cli.py interpolate --config configs/moons.json --run-dir runs/moons --seed 0
    python cli.py surface     --config configs/moons.json --checkpoint runs/moons/checkpoints/sam_seed0.fltl
    python cli.py report      --run-dir runs/moons --excel

Exit codes: 0 success, 1 other flatlab errors, 2 configuration or input errors,
3 when every training run diverged.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from dotenv import load_dotenv

from config import env_defaults, load_config
from errors import ConfigError, DataFormatError, FlatlabError, LayoutMismatchError, ResultsError
from harness import (
    interpolate_checkpoints,
    interpolate_run,
    report,
    run_experiment,
    surface_checkpoint,
    train_modes,
)
from landscape import NORMALIZATIONS

logger = logging.getLogger("flatlab")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
INPUT_ERRORS = (ConfigError, LayoutMismatchError, DataFormatError, ResultsError)


def _common(parser, defaults):
    parser.add_argument("--config", type=Path, help="experiment config (JSON)")
    parser.add_argument("--seed", type=int, default=None, help="run seed")
    parser.add_argument("--out", type=Path, default=None, help="output directory")
    parser.add_argument("--workers", type=int, default=defaults["workers"],
                        help="parallel workers (default: FLATLAB_WORKERS or 1)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. --set optimizer.lr=0.05")
    parser.add_argument("--log-level", default=defaults["log_level"], help="logging level")
    parser.add_argument("--quiet", action="store_true", help="no progress bars")


def _data_flags(parser):
    parser.add_argument("--data", default=None, help="dataset kind (overrides data.kind)")
    parser.add_argument("--n", type=int, default=None, help="dataset size")
    parser.add_argument("--noise", type=float, default=None, help="generator noise")
    parser.add_argument("--data-seed", type=int, default=None, help="dataset seed")


def build_parser(defaults=None) -> argparse.ArgumentParser:
    defaults = defaults or env_defaults()
    parser = argparse.ArgumentParser(
        prog="flatlab",
        description="Flat-minima optimization lab: SWA, SAM, WASAM and loss-landscape analysis.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="train every configured mode once")
    _common(train, defaults)
    _data_flags(train)

    sweep = commands.add_parser("sweep", help="multi-seed grid search with test reporting")
    _common(sweep, defaults)
    _data_flags(sweep)

    interp = commands.add_parser("interpolate", help="linear interpolation between solutions")
    _common(interp, defaults)
    interp.add_argument("--a", type=Path, help="checkpoint at alpha=0")
    interp.add_argument("--b", type=Path, help="checkpoint at alpha=1")
    interp.add_argument("--run-dir", type=Path, help="sweep directory (standard pairs of --seed)")
    interp.add_argument("--alpha-range", type=float, nargs=2, default=(-1.0, 1.5), metavar=("MIN", "MAX"))
    interp.add_argument("--steps", type=int, default=26)

    surf = commands.add_parser("surface", help="2D loss surface in a random plane")
    _common(surf, defaults)
    surf.add_argument("--checkpoint", type=Path, required=True, help="center of the plane")
    surf.add_argument("--steps", type=int, default=20)
    surf.add_argument("--range", dest="value_range", type=float, nargs=2, default=(-1.0, 1.0),
                      metavar=("MIN", "MAX"))
    surf.add_argument("--normalization", choices=NORMALIZATIONS, default="filter")
    surf.add_argument("--crop", type=float, nargs=4, default=None, metavar=("A0", "A1", "B0", "B1"),
                      help="keep only cells inside [A0, A1] x [B0, B1] in the output")

    rep = commands.add_parser("report", help="re-aggregate a sweep directory")
    _common(rep, defaults)
    rep.add_argument("--run-dir", type=Path, required=True)
    rep.add_argument("--excel", action="store_true", help="also write summary.xlsx")
    return parser


def _overrides(args) -> list:
    overrides = list(args.overrides)
    for flag, key in (("data", "data.kind"), ("n", "data.n"), ("noise", "data.noise"),
                      ("data_seed", "data.seed")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value!r}" if isinstance(value, (int, float)) else f"{key}={value}")
    if args.seed is not None and args.command == "sweep":
        overrides.append(f"seeds=[{args.seed}]")
    return overrides


def _load(args):
    if args.config is None:
        raise ConfigError(f"{args.command} needs --config")
    return load_config(args.config, _overrides(args))


def run(args, defaults) -> int:
    if args.command == "report":
        table = report(args.run_dir, excel=args.excel)
        sys.stdout.write(table.to_text())
        return EXIT_OK

    config = _load(args)
    out = args.out or Path(defaults["output_dir"]) / Path(args.config).stem

    if args.command == "train":
        outcomes = train_modes(config, seed=args.seed, out_dir=out)
        if outcomes and all(result.diverged for result in outcomes.values()):
            logger.error("every training run diverged")
            return EXIT_DIVERGED
        return EXIT_OK

    if args.command == "sweep":
        result = run_experiment(config, out_dir=out, workers=args.workers,
                                progress=not args.quiet and sys.stderr.isatty())
        if result.all_diverged:
            logger.error("every training run diverged")
            return EXIT_DIVERGED
        sys.stdout.write(result.table.to_text())
        return EXIT_OK

    if args.command == "interpolate":
        if args.run_dir is not None:
            seed = config.seed if args.seed is None else args.seed
            interpolate_run(config, args.run_dir, seed, out_dir=args.out,
                            alpha_range=tuple(args.alpha_range), steps=args.steps)
        elif args.a is not None and args.b is not None:
            interpolate_checkpoints(config, args.a, args.b, out, seed=args.seed,
                                    alpha_range=tuple(args.alpha_range), steps=args.steps)
        else:
            raise ConfigError("interpolate needs --a and --b, or --run-dir")
        return EXIT_OK

    crop_ranges = None
    if args.crop is not None:
        a0, a1, b0, b1 = args.crop
        crop_ranges = ((a0, a1), (b0, b1))
    surface_checkpoint(config, args.checkpoint, out, seed=args.seed, steps=args.steps,
                       value_range=tuple(args.value_range), normalization=args.normalization,
                       crop_ranges=crop_ranges, workers=args.workers)
    return EXIT_OK


def main(argv=None) -> int:
    load_dotenv()
    defaults = env_defaults()
    args = build_parser(defaults).parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return run(args, defaults)
    except INPUT_ERRORS as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except FlatlabError as exc:
        logger.error("%s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
