"""Command line entry point: extract -> build -> train -> evaluate -> compare, plus synthetic
data generation and feature ranking.

Exit codes: 0 on success, 1 on usage errors, 2 on data or file errors.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import pandas as pd
import yaml

from ozone_bias.dataset import (
    SUMMER_MONTHS,
    Dataset,
    ObservationTable,
    assemble,
    compute_bias,
    grid_observations,
    load_dataset,
    save_dataset,
    temporal_split,
)
from ozone_bias.errors import DataError, DateMismatch, EmptyDataset, UsageError
from ozone_bias.grid import REGIONS
from ozone_bias.io import (
    GRID_STACK_SUFFIX,
    MASKED_FIELD_SUFFIX,
    format_errors,
    read_grid_stack,
    read_masked_field,
    write_grid_stack,
)
from ozone_bias.landuse import LandUseExtractor, class_set_from_codes, read_raster
from ozone_bias.metrics import (
    EvaluationConfig,
    compare_report,
    evaluate_predictions,
    load_report,
    write_report,
)
from ozone_bias.models.random_forest import (
    FOREST_SUFFIX,
    ForestConfig,
    fit_forest,
    load_forest,
    predict_dataset,
    rank_features,
    select_top_channels,
)
from ozone_bias.models.unet_regressor import ModelCheckpoint, UNetConfig, train
from ozone_bias.synthetic import (
    SUMMER_LENGTH,
    SyntheticBiasParams,
    save_synthetic,
    synth_generate,
    synth_raw_inputs,
    write_raw_inputs,
)
from ozone_bias.utils import flatten_dict, resolve_threads

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class ArgumentParser(argparse.ArgumentParser):
    """Raises UsageError instead of exiting, so that main can map it to exit code 1."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


def _common_arguments() -> argparse.ArgumentParser:
    parent = ArgumentParser(add_help=False)
    parent.add_argument("--config", type=Path, default=None, help="YAML file with flag defaults")
    parent.add_argument(
        "--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="log level"
    )
    parent.add_argument(
        "--threads", type=int, default=None, help="worker threads (default: all available cores)"
    )
    parent.add_argument("--seed", type=int, default=0, help="random seed")
    return parent


def _add_split_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--eval-year", type=int, default=None, help="hold out the evaluation months of this year"
    )
    parser.add_argument(
        "--eval-months", type=int, nargs="+", default=list(SUMMER_MONTHS), help="evaluation months"
    )


def _add_forest_arguments(parser: argparse.ArgumentParser) -> None:
    defaults = ForestConfig()
    parser.add_argument("--n-trees", type=int, default=defaults.n_trees, help="number of trees")
    parser.add_argument("--max-depth", type=int, default=defaults.max_depth, help="maximal tree depth")
    parser.add_argument(
        "--min-samples-leaf", type=int, default=defaults.min_samples_leaf, help="minimal leaf size"
    )
    parser.add_argument(
        "--features-per-split",
        type=int,
        default=defaults.features_per_split,
        help="candidate features per node (default: ceil(p / 3))",
    )
    parser.add_argument(
        "--no-bootstrap", action="store_true", help="train every tree on all samples"
    )


def build_parser() -> ArgumentParser:
    parent = _common_arguments()
    formatter = argparse.ArgumentDefaultsHelpFormatter
    parser = ArgumentParser(prog="ozone-bias", description=__doc__, formatter_class=formatter)
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    extract = subparsers.add_parser(
        "extract", parents=[parent], formatter_class=formatter, help="rasters -> land-use stack"
    )
    extract.add_argument("--landcover", type=Path, required=True, help="categorical .rast file")
    extract.add_argument("--population", type=Path, required=True, help="continuous .rast file")
    extract.add_argument("--region", choices=sorted(REGIONS), default="europe", help="grid preset")
    extract.add_argument("--year", type=int, default=2016, help="date tag of the stack (Jan 1)")
    extract.add_argument("--fill-value", type=float, default=0.0, help="value for empty cells")
    extract.add_argument("--classes", type=int, nargs="+", default=None, help="land-cover class codes")
    extract.add_argument("--statistics", action="store_true", help="log channel statistics")
    extract.add_argument("--out", type=Path, required=True, help=f"output {GRID_STACK_SUFFIX} file")

    synth = subparsers.add_parser(
        "synth", parents=[parent], formatter_class=formatter, help="seeded synthetic dataset"
    )
    synth.add_argument("--region", choices=sorted(REGIONS), default="europe", help="grid preset")
    synth.add_argument("--days", type=int, default=80, help="number of summer days")
    synth.add_argument("--stations", type=int, default=40, help="number of stations")
    synth.add_argument("--experiment", type=int, choices=[1, 2], default=1, help="channel set")
    synth.add_argument("--start-year", type=int, default=2014, help="first summer")
    synth.add_argument(
        "--days-per-summer", type=int, default=SUMMER_LENGTH, help="days per summer (from June 1)"
    )
    synth.add_argument(
        "--linear-only", action="store_true", help="noiseless bias linear in a single channel"
    )
    synth.add_argument(
        "--raw", action="store_true", help="write raw pipeline inputs instead of a dataset"
    )
    synth.add_argument("--out", type=Path, required=True, help="output directory")

    build = subparsers.add_parser(
        "build", parents=[parent], formatter_class=formatter, help="stacks + stations -> dataset"
    )
    build.add_argument(
        "--momo", type=Path, required=True, help=f"directory of daily {GRID_STACK_SUFFIX} files"
    )
    build.add_argument(
        "--model-o3", type=Path, required=True, help=f"directory of daily {MASKED_FIELD_SUFFIX} files"
    )
    build.add_argument("--stations", type=Path, required=True, help="station observations CSV")
    build.add_argument("--landuse", type=Path, default=None, help="land-use stack (experiment 2)")
    build.add_argument("--experiment", type=int, choices=[1, 2], default=1, help="channel set")
    build.add_argument("--out", type=Path, required=True, help="output directory")

    train_parser = subparsers.add_parser(
        "train", parents=[parent], formatter_class=formatter, help="fit a U-Net or a random forest"
    )
    train_parser.add_argument("--model", choices=["unet", "rf"], required=True, help="model family")
    train_parser.add_argument("--data", type=Path, required=True, help="dataset directory")
    train_parser.add_argument(
        "--experiment", type=int, choices=[1, 2], default=None, help="expected experiment of the dataset"
    )
    _add_split_arguments(train_parser)
    train_parser.add_argument("--top-channels", type=Path, default=None, help="ranking CSV (see rank)")
    train_parser.add_argument("--top-k", type=int, default=None, help="keep the k best-ranked channels")
    unet_defaults = UNetConfig(in_channels=1)
    train_parser.add_argument("--base-width", type=int, default=unet_defaults.base_width, help="U-Net width")
    train_parser.add_argument("--depth", type=int, default=unet_defaults.depth, help="U-Net levels")
    train_parser.add_argument(
        "--dropout-rate", type=float, default=unet_defaults.dropout_rate, help="U-Net dropout rate"
    )
    train_parser.add_argument("--lr", type=float, default=unet_defaults.lr, help="Adam learning rate")
    train_parser.add_argument(
        "--weight-decay", type=float, default=unet_defaults.weight_decay, help="Adam weight decay"
    )
    train_parser.add_argument("--epochs", type=int, default=unet_defaults.epochs, help="U-Net epochs")
    train_parser.add_argument(
        "--decoupled-weight-decay", action="store_true", help="decoupled instead of L2 weight decay"
    )
    train_parser.add_argument(
        "--lr-backoff",
        type=float,
        default=unet_defaults.lr_backoff,
        help="learning rate factor after an epoch that raised the training loss (1 disables the rollback)",
    )
    _add_forest_arguments(train_parser)
    train_parser.add_argument(
        "--out", type=Path, required=True, help=f"checkpoint file (.ckpt or {FOREST_SUFFIX})"
    )

    evaluate = subparsers.add_parser(
        "evaluate", parents=[parent], formatter_class=formatter, help="checkpoint + eval set -> report"
    )
    evaluate.add_argument("--checkpoint", type=Path, required=True, help=f".ckpt or {FOREST_SUFFIX} file")
    evaluate.add_argument("--data", type=Path, required=True, help="dataset directory")
    _add_split_arguments(evaluate)
    evaluate.add_argument("--label", default=None, help="model label (default: unet or rf)")
    eval_defaults = EvaluationConfig()
    evaluate.add_argument("--bin-width", type=float, default=eval_defaults.bin_width, help="ppb")
    evaluate.add_argument(
        "--hist-range", type=float, nargs=2, default=list(eval_defaults.hist_range), help="[lo, hi) in ppb"
    )
    evaluate.add_argument(
        "--threshold", type=float, default=eval_defaults.extreme_threshold, help="extreme bias in ppb"
    )
    evaluate.add_argument(
        "--heatmap-scale", type=int, default=eval_defaults.heatmap_scale, help="pixels per cell"
    )
    evaluate.add_argument("--out", type=Path, required=True, help="report directory")

    compare = subparsers.add_parser(
        "compare", parents=[parent], formatter_class=formatter, help="two reports -> comparison"
    )
    compare.add_argument("--first", type=Path, required=True, help="first report directory (e.g. rf)")
    compare.add_argument("--second", type=Path, required=True, help="second report directory (e.g. unet)")
    compare.add_argument("--out", type=Path, required=True, help="output directory")

    rank = subparsers.add_parser(
        "rank", parents=[parent], formatter_class=formatter, help="random forest channel ranking"
    )
    rank.add_argument("--data", type=Path, required=True, help="dataset directory")
    _add_split_arguments(rank)
    _add_forest_arguments(rank)
    rank.add_argument("--out", type=Path, required=True, help="output CSV")
    return parser


def _forest_config(args: argparse.Namespace) -> ForestConfig:
    return ForestConfig(
        n_trees=args.n_trees,
        max_depth=args.max_depth,
        min_samples_leaf=args.min_samples_leaf,
        features_per_split=args.features_per_split,
        bootstrap=not args.no_bootstrap,
        seed=args.seed,
    )


def _split(ds: Dataset, args: argparse.Namespace, part: str) -> Dataset:
    if args.eval_year is None:
        return ds
    train_ds, eval_ds = temporal_split(ds, args.eval_year, args.eval_months)
    return train_ds if part == "train" else eval_ds


def _run_extract(args: argparse.Namespace) -> None:
    extractor = LandUseExtractor(
        classes=class_set_from_codes(args.classes),
        fill_value=args.fill_value,
        threads=args.threads,
        collect_statistics=args.statistics,
    )
    stack = extractor(
        read_raster(args.landcover), read_raster(args.population), REGIONS[args.region], year=args.year
    )
    write_grid_stack(stack, args.out)
    logger.info(f"wrote land-use stack with {stack.num_channels} channels to {args.out}")


def _run_synth(args: argparse.Namespace) -> None:
    params = SyntheticBiasParams.linear_only() if args.linear_only else SyntheticBiasParams()
    spec = REGIONS[args.region]
    if args.raw:
        inputs = synth_raw_inputs(
            seed=args.seed,
            spec=spec,
            n_days=args.days,
            n_stations=args.stations,
            params=params,
            start_year=args.start_year,
            days_per_summer=args.days_per_summer,
        )
        write_raw_inputs(inputs, args.out)
        logger.info(f"wrote raw synthetic inputs for {args.days} days to {args.out}")
        return
    dataset, description = synth_generate(
        seed=args.seed,
        spec=spec,
        n_days=args.days,
        n_stations=args.stations,
        experiment=args.experiment,
        params=params,
        start_year=args.start_year,
        days_per_summer=args.days_per_summer,
        threads=args.threads,
    )
    save_synthetic(dataset, description, args.out)
    logger.info(f"wrote synthetic dataset with {len(dataset)} days to {args.out}")


def _run_build(args: argparse.Namespace) -> None:
    observations = ObservationTable.from_csv(args.stations)
    stack_paths = sorted(args.momo.glob(f"*{GRID_STACK_SUFFIX}"))
    if not stack_paths:
        raise DataError(f"no {GRID_STACK_SUFFIX} files in {args.momo}")
    stacks = [read_grid_stack(path) for path in stack_paths]
    bias_fields = []
    for stack in stacks:
        model_path = args.model_o3 / f"{stack.date.isoformat()}{MASKED_FIELD_SUFFIX}"
        if not model_path.exists():
            raise DateMismatch(f"no model ozone field for {stack.date} ({model_path} is missing)")
        model_o3 = read_masked_field(model_path)
        bias_fields.append(compute_bias(model_o3, grid_observations(observations, stack.spec, stack.date)))
    landuse = read_grid_stack(args.landuse) if args.landuse is not None else None
    dataset = assemble(stacks, landuse, bias_fields, experiment=args.experiment)
    save_dataset(dataset, args.out)
    logger.info(f"wrote dataset with {len(dataset)} days to {args.out}")


def _load_training_data(args: argparse.Namespace) -> Dataset:
    dataset = load_dataset(args.data)
    if args.experiment is not None and args.experiment != dataset.experiment:
        raise DataError(
            f"expected an experiment {args.experiment} dataset, but {args.data} is experiment "
            f"{dataset.experiment}"
        )
    if args.top_channels is not None:
        with format_errors(args.top_channels):
            channels = pd.read_csv(args.top_channels)["channel"].tolist()
        dataset = select_top_channels(dataset, channels, k=args.top_k)
    dataset = _split(dataset, args, "train")
    if len(dataset) == 0:
        raise EmptyDataset(f"no training day left in {args.data}")
    return dataset


def _run_train(args: argparse.Namespace) -> None:
    dataset = _load_training_data(args)
    if args.model == "unet":
        config = UNetConfig(
            in_channels=len(dataset.channels),
            base_width=args.base_width,
            depth=args.depth,
            dropout_rate=args.dropout_rate,
            lr=args.lr,
            weight_decay=args.weight_decay,
            epochs=args.epochs,
            seed=args.seed,
            decoupled_weight_decay=args.decoupled_weight_decay,
            lr_backoff=args.lr_backoff,
        )
        checkpoint = train(dataset, config)
        checkpoint.save(args.out)
    else:
        x, y = dataset.to_pixel_samples()
        forest = fit_forest(x, y, _forest_config(args), channels=dataset.channels, threads=args.threads)
        forest.save(args.out)


def _run_evaluate(args: argparse.Namespace) -> None:
    dataset = _split(load_dataset(args.data), args, "eval")
    if args.checkpoint.suffix == FOREST_SUFFIX:
        forest = load_forest(args.checkpoint)
        if forest.channels is not None and forest.channels != dataset.channels:
            dataset = dataset.select_channels(forest.channels)
        predictions = predict_dataset(forest, dataset)
        label = args.label or "rf"
    else:
        checkpoint = ModelCheckpoint.load(args.checkpoint)
        if checkpoint.channels != dataset.channels:
            dataset = dataset.select_channels(checkpoint.channels)
        predictions = checkpoint.predict(dataset)
        label = args.label or "unet"
    config = EvaluationConfig(
        bin_width=args.bin_width,
        hist_range=tuple(args.hist_range),
        extreme_threshold=args.threshold,
        heatmap_scale=args.heatmap_scale,
    )
    result = evaluate_predictions(predictions, dataset, label=label, config=config)
    write_report(result, args.out)


def _run_compare(args: argparse.Namespace) -> None:
    report = compare_report(load_report(args.first), load_report(args.second), directory=args.out)
    summary = flatten_dict({key: report[key] for key in ("overall", "extreme")})
    print(json.dumps(summary, sort_keys=True))


def _run_rank(args: argparse.Namespace) -> None:
    dataset = _split(load_dataset(args.data), args, "train")
    if len(dataset) == 0:
        raise EmptyDataset(f"no training day left in {args.data}")
    x, y = dataset.to_pixel_samples()
    forest = fit_forest(x, y, _forest_config(args), channels=dataset.channels, threads=args.threads)
    ranking = rank_features(forest)
    ranking.to_csv(args.out, index=False)
    logger.info(f"top channels: {ranking['channel'].head(16).tolist()}")


COMMANDS: Dict[str, Callable[[argparse.Namespace], None]] = {
    "extract": _run_extract,
    "synth": _run_synth,
    "build": _run_build,
    "train": _run_train,
    "evaluate": _run_evaluate,
    "compare": _run_compare,
    "rank": _run_rank,
}


def _config_defaults(path: Path, command: str, parser: argparse.ArgumentParser) -> Dict[str, Any]:
    """Reads flag defaults from a YAML file: top-level keys apply to every command, a section
    named after the command overrides them."""
    try:
        content = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise UsageError(f"invalid config file {path}: {e}") from e
    if not isinstance(content, dict):
        raise UsageError(f"config file {path} has to contain a mapping")
    defaults = {key: value for key, value in content.items() if key not in COMMANDS}
    section = content.get(command) or {}
    if not isinstance(section, dict):
        raise UsageError(f"section '{command}' of {path} has to be a mapping")
    defaults.update(section)
    defaults = {key.replace("-", "_"): value for key, value in defaults.items()}
    subparser = _subparser(parser, command)
    known = {action.dest for action in subparser._actions}
    unknown = sorted(set(defaults) - known)
    if unknown:
        logger.warning(f"ignoring unknown keys in {path} for '{command}': {unknown}")
    return {key: value for key, value in defaults.items() if key in known}


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        # flags on the command line win over the config file
        _subparser(parser, args.command).set_defaults(**_config_defaults(args.config, args.command, parser))
        args = parser.parse_args(argv)
    try:
        args.threads = resolve_threads(args.threads)
    except ValueError as e:
        raise UsageError(str(e)) from e
    return args


def dispatch(argv: Sequence[str]) -> int:
    """Runs one command and returns its exit code."""
    try:
        args = parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT, stream=sys.stderr, force=True)
    try:
        COMMANDS[args.command](args)
    except (DataError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    try:
        return dispatch(sys.argv[1:] if argv is None else argv)
    except SystemExit as e:
        # --help
        return int(e.code or 0)


if __name__ == "__main__":
    sys.exit(main())
