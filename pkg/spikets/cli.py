"""Command-line interface.

    spikets synth    [--preset low|high] [--length N] [--seed S]
    spikets train    [--config run.yaml] [--set section.key=value ...]
    spikets eval     [--checkpoint FILE] [--split test]
    spikets forecast [--checkpoint FILE]
    spikets energy   [--checkpoint FILE]
    spikets inspect  [--checkpoint FILE] --index I [--split test]
    spikets experiment sweep|encoders|temporal|energy [--axis ts] [--values 4,8] [--seeds 0,1,2]

Exit codes: 0 on success, 2 for configuration errors, 3 for any other failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from spikets import experiments, pipeline
from spikets.data import PARTS, SYNTH_PRESETS
from spikets.errors import ConfigError, SpiketsError
from spikets.run_config import load_run_config
from spikets.utils import convert_from_string

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

DEFAULT_SWEEP_VALUES = dict(ts=experiments.TS_VALUES, beta=experiments.BETA_VALUES)


def _common(parser: argparse.ArgumentParser, checkpoint: bool = False):
    parser.add_argument("--config", help="run configuration YAML file")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a configuration key, e.g. --set model.backbone=rnn",
    )
    parser.add_argument("--output-dir", help="output directory (relative paths go below $SPIKETS_OUTPUT_ROOT)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log debug messages")
    if checkpoint:
        parser.add_argument("--checkpoint", help="checkpoint file (default: <output_dir>/checkpoint.npz)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spikets", description="Spiking neural networks for time-series forecasting")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="write a synthetic dataset")
    _common(synth)
    synth.add_argument("--preset", choices=sorted(SYNTH_PRESETS))
    synth.add_argument("--length", type=int)
    synth.add_argument("--seed", type=int)

    train = sub.add_parser("train", help="train a model")
    _common(train)

    evaluate = sub.add_parser("eval", help="compute RSE and R2 of a checkpoint")
    _common(evaluate, checkpoint=True)
    evaluate.add_argument("--split", choices=PARTS, default="test")

    forecast = sub.add_parser("forecast", help="forecast the steps after the end of the series")
    _common(forecast, checkpoint=True)

    energy = sub.add_parser("energy", help="theoretical energy report of a checkpoint")
    _common(energy, checkpoint=True)

    inspect = sub.add_parser("inspect", help="dump encoder spikes and the forecast of one window")
    _common(inspect, checkpoint=True)
    inspect.add_argument("--index", type=int, required=True)
    inspect.add_argument("--split", choices=PARTS, default="test")

    experiment = sub.add_parser("experiment", help="run an analysis experiment")
    _common(experiment)
    experiment.add_argument("kind", choices=("sweep", "encoders", "temporal", "energy"))
    experiment.add_argument("--axis", choices=sorted(experiments.SWEEP_AXES), help="swept axis (sweep only)")
    experiment.add_argument("--values", help="comma-separated axis values (sweep only)")
    experiment.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")

    return parser


def _overrides(args: argparse.Namespace) -> list:
    overrides = list(args.overrides)
    if args.output_dir:
        overrides.append(f"output_dir={args.output_dir}")
    if args.command == "synth":
        for option, key in (("preset", "dataset.preset"), ("length", "dataset.length"), ("seed", "dataset.seed")):
            value = getattr(args, option)
            if value is not None:
                overrides.append(f"{key}={value}")
    return overrides


def _checkpoint(args, cfg) -> Path:
    return Path(args.checkpoint) if args.checkpoint else cfg.output_path() / "checkpoint.npz"


def _experiment(args: argparse.Namespace, cfg):
    seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
    if not seeds:
        raise ConfigError("--seeds needs at least one seed")
    if args.kind == "sweep":
        if not args.axis:
            raise ConfigError("experiment sweep needs --axis")
        if args.values:
            values = tuple(convert_from_string(v) for v in args.values.split(",") if v.strip())
        else:
            values = DEFAULT_SWEEP_VALUES.get(args.axis, ())
        results = experiments.run_sweep(experiments.SweepSpec(args.axis, values, cfg, seeds))
        print(experiments.aggregate(results).to_dataframe().to_string())
    elif args.kind == "encoders":
        print(experiments.run_encoder_comparison(cfg, seeds=seeds).to_dataframe().to_string())
    elif args.kind == "temporal":
        for path in experiments.run_temporal_analysis(cfg, seed=seeds[0]).values():
            print(path.as_posix())
    elif args.kind == "energy":
        print(experiments.run_energy_comparison(cfg, seed=seeds[0]).to_dataframe().to_string())


def run(args: argparse.Namespace):
    cfg, _ = load_run_config(args.config, _overrides(args))

    if args.command == "synth":
        print(pipeline.synth_run(cfg).as_posix())
    elif args.command == "train":
        outputs = pipeline.train_run(cfg)
        report = outputs["report"]
        print(f"valid RSE {report.rse:.6f}  R2 {report.r2:.6f}  ({report.m} windows)")
        print(outputs["checkpoint"].as_posix())
    elif args.command == "eval":
        report = pipeline.evaluate_run(_checkpoint(args, cfg), cfg, args.split)
        print(
            f"{report.split}: backbone {report.backbone}, M={report.m}, T={report.lookback}, L={report.horizon}, "
            f"RSE {report.rse:.6f}, R2 {report.r2:.6f}"
        )
    elif args.command == "forecast":
        print(pipeline.forecast_run(_checkpoint(args, cfg), cfg).as_posix())
    elif args.command == "energy":
        print(pipeline.energy_run(_checkpoint(args, cfg), cfg).format_table())
    elif args.command == "inspect":
        for path in pipeline.inspect_window(_checkpoint(args, cfg), cfg, args.index, args.split).values():
            print(path.as_posix())
    elif args.command == "experiment":
        _experiment(args, cfg)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        run(args)
    except ConfigError as err:
        logger.error("Configuration error: %s", err)
        return EXIT_CONFIG
    except (SpiketsError, FileNotFoundError, IndexError, ValueError, FloatingPointError, OSError) as err:
        logger.error("%s: %s", type(err).__name__, err)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
