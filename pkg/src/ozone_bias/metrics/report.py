"""Evaluation of predicted bias fields against the observed bias and comparison of two
evaluations on the same evaluation set."""
import dataclasses
import datetime
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ozone_bias.dataset import Dataset
from ozone_bias.errors import FormatError, IoError, MismatchedEvalSets
from ozone_bias.grid import GridSpec, MaskedField
from ozone_bias.io import PathLike, format_errors, read_masked_field, write_masked_field
from ozone_bias.utils import flatten_dict

from .extreme_subset import EXTREME_THRESHOLD, ExtremeSubsetMetrics, extreme_subset_metrics
from .heatmap import COLORMAP, render_heatmap
from .histogram import BIN_WIDTH, HISTOGRAM_RANGE, Histogram, bias_histogram, histograms_to_frame
from .station_rmse import check_aligned, rmse_at_stations

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.json"
RMSE_MAP_FIELD = "rmse_map.mfield"
RMSE_MAP_IMAGE = "rmse_map.ppm"
HIST_FULL_FILE = "hist_full.csv"
HIST_EXTREME_FILE = "hist_gt20.csv"
COMPARISON_FILE = "comparison.json"
# RMSE differences up to this are a tie
TIE_TOLERANCE = 1e-12


@dataclasses.dataclass(frozen=True)
class EvaluationConfig:
    bin_width: float = BIN_WIDTH
    hist_range: Tuple[float, float] = HISTOGRAM_RANGE
    extreme_threshold: float = EXTREME_THRESHOLD
    colormap: str = COLORMAP
    heatmap_scale: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hist_range", tuple(self.hist_range))

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EvaluationConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown EvaluationConfig keys: {unknown}")
        return cls(**data)


@dataclasses.dataclass(frozen=True, eq=False)
class EvaluationResult:
    """All evaluation artifacts of one model on one evaluation set.

    The histograms cover the predicted and the target values of all valid pairs (full) and of
    the pairs whose target exceeds the extreme threshold (extreme).
    """

    label: str
    dates: Tuple[datetime.date, ...]
    spec: GridSpec
    num_pairs: int
    overall_rmse: float
    rmse_map: MaskedField
    extreme: ExtremeSubsetMetrics
    hist_full_pred: Histogram
    hist_full_target: Histogram
    hist_extreme_pred: Histogram
    hist_extreme_target: Histogram
    config: EvaluationConfig = EvaluationConfig()

    def metrics(self) -> Dict[str, Any]:
        return {
            "label": self.label,
            "dates": [date.isoformat() for date in self.dates],
            "spec": self.spec.to_dict(),
            "num_pairs": self.num_pairs,
            "overall_rmse": self.overall_rmse,
            "extreme": self.extreme.to_dict(),
            "histogram_totals": {
                "full": self.hist_full_target.total,
                "extreme": self.hist_extreme_target.total,
            },
            "config": self.config.to_dict(),
        }


def evaluate_predictions(
    predictions: Sequence[MaskedField],
    dataset: Dataset,
    label: str,
    config: EvaluationConfig = EvaluationConfig(),
) -> EvaluationResult:
    """Evaluates the predicted bias fields of the days of dataset (in the same order)."""
    targets = [day.target for day in dataset]
    check_aligned(predictions, targets)
    rmse_map, overall = rmse_at_stations(predictions, targets)
    extreme = extreme_subset_metrics(predictions, targets, threshold=config.extreme_threshold)

    pred_values, target_values = [], []
    for prediction, target in zip(predictions, targets):
        valid = prediction.mask & target.mask
        pred_values.append(prediction.values[valid])
        target_values.append(target.values[valid])
    pred_all = np.concatenate(pred_values)
    target_all = np.concatenate(target_values)
    is_extreme = target_all > config.extreme_threshold

    def histogram(values: np.ndarray) -> Histogram:
        return bias_histogram(values, bin_width=config.bin_width, value_range=config.hist_range)

    result = EvaluationResult(
        label=label,
        dates=tuple(day.date for day in dataset),
        spec=dataset.spec,
        num_pairs=len(target_all),
        overall_rmse=overall,
        rmse_map=rmse_map,
        extreme=extreme,
        hist_full_pred=histogram(pred_all),
        hist_full_target=histogram(target_all),
        hist_extreme_pred=histogram(pred_all[is_extreme]),
        hist_extreme_target=histogram(target_all[is_extreme]),
        config=config,
    )
    logger.info(
        f"{label}: overall RMSE {overall:.4f} ppb over {result.num_pairs} pairs, "
        f"{extreme.count} pairs above {config.extreme_threshold} ppb"
    )
    return result


def write_report(result: EvaluationResult, directory: PathLike) -> Path:
    """Writes metrics.json, rmse_map.mfield, rmse_map.ppm, hist_full.csv and hist_gt20.csv."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / METRICS_FILE).write_text(json.dumps(result.metrics(), indent=2, sort_keys=True))
        histograms_to_frame(result.hist_full_pred, result.hist_full_target).to_csv(
            directory / HIST_FULL_FILE, index=False
        )
        histograms_to_frame(result.hist_extreme_pred, result.hist_extreme_target).to_csv(
            directory / HIST_EXTREME_FILE, index=False
        )
    except OSError as e:
        raise IoError(f"could not write the report to {directory}: {e}") from e
    write_masked_field(result.rmse_map, directory / RMSE_MAP_FIELD)
    render_heatmap(
        result.rmse_map,
        directory / RMSE_MAP_IMAGE,
        colormap=result.config.colormap,
        scale=result.config.heatmap_scale,
    )
    logger.info(f"wrote evaluation report of {result.label} to {directory}")
    return directory


def load_report(directory: PathLike) -> EvaluationResult:
    directory = Path(directory)
    try:
        metrics = json.loads((directory / METRICS_FILE).read_text())
        hist_full = pd.read_csv(directory / HIST_FULL_FILE)
        hist_extreme = pd.read_csv(directory / HIST_EXTREME_FILE)
    except OSError as e:
        raise IoError(f"could not read the report in {directory}: {e}") from e
    except (json.JSONDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise FormatError(f"invalid report in {directory}: {e}") from e
    rmse_map = read_masked_field(directory / RMSE_MAP_FIELD)
    with format_errors(directory / METRICS_FILE):
        return EvaluationResult(
            label=metrics["label"],
            dates=tuple(datetime.date.fromisoformat(date) for date in metrics["dates"]),
            spec=GridSpec.from_dict(metrics["spec"]),
            num_pairs=metrics["num_pairs"],
            overall_rmse=metrics["overall_rmse"],
            rmse_map=rmse_map,
            extreme=ExtremeSubsetMetrics.from_dict(metrics["extreme"]),
            hist_full_pred=Histogram.from_frame(hist_full, "predicted"),
            hist_full_target=Histogram.from_frame(hist_full, "target"),
            hist_extreme_pred=Histogram.from_frame(hist_extreme, "predicted"),
            hist_extreme_target=Histogram.from_frame(hist_extreme, "target"),
            config=EvaluationConfig.from_dict(metrics["config"]),
        )


def _winner(first: Tuple[str, Optional[float]], second: Tuple[str, Optional[float]]) -> Dict[str, Any]:
    (first_label, first_rmse), (second_label, second_rmse) = first, second
    if first_rmse is None or second_rmse is None:
        return {"winner": None, "margin": None}
    difference = first_rmse - second_rmse
    if abs(difference) <= TIE_TOLERANCE:
        return {"winner": "tie", "margin": 0.0}
    return {"winner": second_label if difference > 0 else first_label, "margin": abs(difference)}


def _masked_to_lists(field: MaskedField) -> List[List[Optional[float]]]:
    return [
        [float(value) if valid else None for value, valid in zip(row_values, row_mask)]
        for row_values, row_mask in zip(field.values, field.mask)
    ]


def _model_section(result: EvaluationResult) -> Dict[str, Any]:
    return {
        "overall_rmse": result.overall_rmse,
        "num_pairs": result.num_pairs,
        "extreme": result.extreme.to_dict(),
        "rmse_map": _masked_to_lists(result.rmse_map),
        "histograms": {
            "full": {
                "predicted": result.hist_full_pred.to_dict(),
                "target": result.hist_full_target.to_dict(),
            },
            "extreme": {
                "predicted": result.hist_extreme_pred.to_dict(),
                "target": result.hist_extreme_target.to_dict(),
            },
        },
    }


def compare_report(
    first: EvaluationResult, second: EvaluationResult, directory: Optional[PathLike] = None
) -> Dict[str, Any]:
    """Compares two evaluations of the same evaluation set (e.g. random forest vs. U-Net, or
    the model-only vs. the land-use experiment).

    The winner (the label with the lower RMSE, or "tie") and the margin (absolute RMSE
    difference) are reported overall and on the extreme subset. If directory is given, the
    report is written to comparison.json in it.
    """
    if first.label == second.label:
        raise ValueError(f"the compared evaluations need distinct labels, but both are '{first.label}'")
    if first.dates != second.dates:
        raise MismatchedEvalSets(
            f"{first.label} was evaluated on {len(first.dates)} days from {first.dates[:1]}, but "
            f"{second.label} on {len(second.dates)} days from {second.dates[:1]}"
        )
    if first.spec != second.spec:
        raise MismatchedEvalSets(f"{first.label} and {second.label} were evaluated on different grids")
    if first.num_pairs != second.num_pairs or not np.array_equal(first.rmse_map.mask, second.rmse_map.mask):
        raise MismatchedEvalSets(
            f"{first.label} has {first.num_pairs} valid pairs, but {second.label} has {second.num_pairs}"
        )
    report = {
        "labels": [first.label, second.label],
        "dates": [date.isoformat() for date in first.dates],
        "overall": _winner((first.label, first.overall_rmse), (second.label, second.overall_rmse)),
        "extreme": _winner((first.label, first.extreme.rmse), (second.label, second.extreme.rmse)),
        "models": {first.label: _model_section(first), second.label: _model_section(second)},
    }
    summary = {key: report[key] for key in ("overall", "extreme")}
    logger.info(f"comparison of {first.label} and {second.label}: {flatten_dict(summary)}")
    if directory is not None:
        directory = Path(directory)
        try:
            directory.mkdir(parents=True, exist_ok=True)
            (directory / COMPARISON_FILE).write_text(json.dumps(report, indent=2, sort_keys=True))
        except OSError as e:
            raise IoError(f"could not write the comparison to {directory}: {e}") from e
    return report
