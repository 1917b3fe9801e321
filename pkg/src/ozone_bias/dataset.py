"""Bias targets from station observations and assembly of per-day training / evaluation
datasets."""
import dataclasses
import datetime
import json
import logging
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ozone_bias.errors import (
    ChannelCountMismatch,
    ChannelMismatch,
    DataError,
    DateMismatch,
    EmptyEval,
    FormatError,
    IoError,
    OutOfDomain,
    ShapeMismatch,
)
from ozone_bias.grid import MOMO_CHANNELS, GridSpec, GridStack, MaskedField, cell_index, grid_shape
from ozone_bias.io import (
    GRID_STACK_SUFFIX,
    MASKED_FIELD_SUFFIX,
    PathLike,
    format_errors,
    read_grid_stack,
    read_masked_field,
    write_grid_stack,
    write_masked_field,
)
from ozone_bias.landuse import landuse_channel_names

logger = logging.getLogger(__name__)

STATION_COLUMNS = ["station_id", "lat", "lon", "date", "o3_ppb"]
MANIFEST_NAME = "manifest.json"
SUMMER_MONTHS = (6, 7, 8)
EXPERIMENTS = (1, 2)


class ObservationTable:
    """Daily station observations of daytime 8-hour average surface ozone (ppb).

    Wraps a DataFrame with the columns station_id, lat, lon, date and o3_ppb. There is at most
    one record per station and date, and all ozone values are finite and non-negative.
    """

    def __init__(self, frame: pd.DataFrame):
        missing = [column for column in STATION_COLUMNS if column not in frame.columns]
        if missing:
            raise DataError(f"observation table misses the columns {missing}")
        frame = frame[STATION_COLUMNS].copy()
        try:
            frame["station_id"] = frame["station_id"].astype(str)
            for column in ("lat", "lon", "o3_ppb"):
                frame[column] = frame[column].astype(np.float64)
            frame["date"] = [
                value if isinstance(value, datetime.date) else datetime.date.fromisoformat(str(value))
                for value in frame["date"]
            ]
        except (TypeError, ValueError) as e:
            raise DataError(f"observation table holds an invalid value: {e}") from e
        duplicated = frame.duplicated(subset=["station_id", "date"])
        if duplicated.any():
            first = frame[duplicated].iloc[0]
            raise DataError(
                f"found {int(duplicated.sum())} duplicated records, e.g. station "
                f"{first['station_id']} on {first['date']}"
            )
        o3 = frame["o3_ppb"].to_numpy()
        if not np.all(np.isfinite(o3)) or np.any(o3 < 0):
            raise DataError("ozone observations have to be finite and non-negative")
        self.frame = frame.sort_values(["date", "station_id"], kind="mergesort").reset_index(
            drop=True
        )

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def dates(self) -> List[datetime.date]:
        return sorted(set(self.frame["date"]))

    @classmethod
    def from_records(cls, records: Sequence[Mapping[str, Any]]) -> "ObservationTable":
        return cls(pd.DataFrame.from_records(list(records), columns=STATION_COLUMNS))

    @classmethod
    def from_csv(cls, path: PathLike) -> "ObservationTable":
        try:
            frame = pd.read_csv(path, dtype={"station_id": str})
        except OSError as e:
            raise IoError(f"could not read {path}: {e}") from e
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
            raise FormatError(f"{path} is not a valid CSV file: {e}") from e
        if list(frame.columns) != STATION_COLUMNS:
            raise FormatError(
                f"{path}: expected the header {','.join(STATION_COLUMNS)}, but got "
                f"{','.join(map(str, frame.columns))}"
            )
        return cls(frame)

    def to_csv(self, path: PathLike) -> None:
        frame = self.frame.copy()
        frame["date"] = [date.isoformat() for date in frame["date"]]
        frame.to_csv(path, index=False, float_format="%.9g")


def grid_observations(obs: ObservationTable, spec: GridSpec, date: datetime.date) -> MaskedField:
    """Averages all observations of a date per grid cell. The mask is true exactly where at
    least one station reported."""
    shape = grid_shape(spec)
    sums = np.zeros(shape, dtype=np.float64)
    counts = np.zeros(shape, dtype=np.int64)
    records = obs.frame[obs.frame["date"] == date]
    outside = 0
    # records are sorted by station id, so the summation order does not depend on input order
    for lat, lon, o3 in zip(records["lat"], records["lon"], records["o3_ppb"]):
        try:
            row, col = cell_index(spec, lat, lon)
        except OutOfDomain:
            outside += 1
            continue
        sums[row, col] += o3
        counts[row, col] += 1
    if outside:
        logger.warning(f"{outside} stations on {date} are outside of the grid and were skipped")
    mask = counts > 0
    values = np.divide(sums, counts, out=np.zeros(shape), where=mask)
    return MaskedField(spec=spec, values=values, mask=mask, date=date)


def compute_bias(model_o3: MaskedField, obs: MaskedField) -> MaskedField:
    """Model bias, i.e. model minus observation (ppb), at the observed cells."""
    if model_o3.spec != obs.spec or model_o3.values.shape != obs.values.shape:
        raise ShapeMismatch(
            f"model field {model_o3.values.shape} and observation field {obs.values.shape} "
            f"have to be on the same grid"
        )
    if not np.all(model_o3.mask[obs.mask]):
        logger.warning("the model field is masked at observed cells; these cells are dropped")
    mask = obs.mask & model_o3.mask
    values = np.where(mask, model_o3.values - obs.values, 0.0)
    return MaskedField(spec=obs.spec, values=values, mask=mask, date=obs.date or model_o3.date)


@dataclasses.dataclass(frozen=True, eq=False)
class DayExample:
    inputs: GridStack
    target: MaskedField

    @property
    def date(self) -> datetime.date:
        return self.inputs.date


@dataclasses.dataclass(frozen=True, eq=False)
class Dataset:
    """Ordered region-days of input stacks and masked bias targets for one experiment."""

    days: Tuple[DayExample, ...]
    experiment: int

    def __post_init__(self):
        object.__setattr__(self, "days", tuple(self.days))
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"experiment has to be one of {EXPERIMENTS}, but got {self.experiment}")
        if not self.days:
            return
        first = self.days[0].inputs
        for day in self.days:
            if day.inputs.spec != first.spec or day.target.spec != first.spec:
                raise ShapeMismatch(f"day {day.date} is on a different grid than day {first.date}")
            if day.inputs.channels != first.channels:
                raise ChannelMismatch(
                    f"day {day.date} has the channels {day.inputs.channels}, but expected "
                    f"{first.channels}"
                )
            if day.target.num_valid == 0:
                raise DataError(f"the target of day {day.date} has no observed cell")

    def __len__(self) -> int:
        return len(self.days)

    def __iter__(self) -> Iterator[DayExample]:
        return iter(self.days)

    @property
    def spec(self) -> GridSpec:
        return self.days[0].inputs.spec

    @property
    def channels(self) -> Tuple[str, ...]:
        return self.days[0].inputs.channels

    @property
    def dates(self) -> List[datetime.date]:
        return [day.date for day in self.days]

    def filter(self, predicate: Callable[[DayExample], bool]) -> "Dataset":
        return Dataset(days=tuple(day for day in self.days if predicate(day)), experiment=self.experiment)

    def select_channels(self, names: Sequence[str]) -> "Dataset":
        return Dataset(
            days=tuple(
                DayExample(inputs=day.inputs.select_channels(names), target=day.target)
                for day in self.days
            ),
            experiment=self.experiment,
        )

    def to_pixel_samples(self) -> Tuple[np.ndarray, np.ndarray]:
        """Per-pixel feature rows and targets of all observed cells, in day and row-major
        order."""
        features, targets = [], []
        for day in self.days:
            features.append(day.inputs.data[:, day.target.mask].T)
            targets.append(day.target.values[day.target.mask])
        if not features:
            return np.zeros((0, 0)), np.zeros(0)
        return np.concatenate(features).astype(np.float64), np.concatenate(targets)


def assemble(
    momo_stacks: Sequence[GridStack],
    landuse_stack: Optional[GridStack],
    bias_fields: Union[Sequence[MaskedField], Mapping[datetime.date, MaskedField]],
    experiment: int,
    num_momo_channels: int = len(MOMO_CHANNELS),
    num_landuse_channels: int = len(landuse_channel_names()),
) -> Dataset:
    """Pairs the daily model input stacks with the bias targets of the same dates.

    Experiment 1 uses the model channels only, experiment 2 appends the (yearly, static)
    land-use channels to every day. Days without any observed cell are dropped.
    """
    if experiment not in EXPERIMENTS:
        raise ValueError(f"experiment has to be one of {EXPERIMENTS}, but got {experiment}")
    if isinstance(bias_fields, Mapping):
        bias_by_date = dict(bias_fields)
    else:
        bias_by_date = {}
        for field in bias_fields:
            if field.date is None:
                raise DateMismatch("bias fields need a date to be assembled")
            bias_by_date[field.date] = field
    stacks_by_date = {stack.date: stack for stack in momo_stacks}
    if len(stacks_by_date) != len(momo_stacks):
        raise DateMismatch("there are several input stacks for the same date")
    missing_bias = sorted(set(stacks_by_date) - set(bias_by_date))
    missing_stacks = sorted(set(bias_by_date) - set(stacks_by_date))
    if missing_bias or missing_stacks:
        raise DateMismatch(
            f"dates of input stacks and bias fields do not align: no bias field for "
            f"{[d.isoformat() for d in missing_bias]}, no input stack for "
            f"{[d.isoformat() for d in missing_stacks]}"
        )
    for stack in momo_stacks:
        if stack.num_channels != num_momo_channels:
            raise ChannelCountMismatch(
                f"expected {num_momo_channels} model channels, but the stack for {stack.date} "
                f"has {stack.num_channels}"
            )
    if experiment == 2:
        if landuse_stack is None:
            raise ChannelCountMismatch("experiment 2 needs a land-use stack")
        if landuse_stack.num_channels != num_landuse_channels:
            raise ChannelCountMismatch(
                f"expected {num_landuse_channels} land-use channels, but got "
                f"{landuse_stack.num_channels}"
            )

    days = []
    for date in sorted(stacks_by_date):
        inputs = stacks_by_date[date]
        if experiment == 2:
            inputs = inputs.concat(landuse_stack)
        target = bias_by_date[date]
        if target.num_valid == 0:
            logger.warning(f"dropping {date}: no station observed on that day")
            continue
        days.append(DayExample(inputs=inputs, target=target))
    dataset = Dataset(days=tuple(days), experiment=experiment)
    logger.info(
        f"assembled experiment {experiment} dataset with {len(dataset)} days and "
        f"{len(dataset.channels) if days else 0} channels"
    )
    return dataset


def temporal_split(
    ds: Dataset, eval_year: int, eval_months: Sequence[int] = SUMMER_MONTHS
) -> Tuple[Dataset, Dataset]:
    """Holds out the days of eval_months in eval_year. The days of eval_months in all other
    years are for training, days outside eval_months are in neither part."""

    def in_season(day: DayExample) -> bool:
        return day.date.month in eval_months

    eval_ds = ds.filter(lambda day: in_season(day) and day.date.year == eval_year)
    if len(eval_ds) == 0:
        raise EmptyEval(f"the dataset has no day in the months {list(eval_months)} of {eval_year}")
    train_ds = ds.filter(lambda day: in_season(day) and day.date.year != eval_year)
    off_season = len(ds) - len(eval_ds) - len(train_ds)
    if off_season:
        logger.warning(f"dropped {off_season} days outside the months {list(eval_months)}")
    return train_ds, eval_ds


def save_dataset(ds: Dataset, directory: PathLike, extra: Optional[Dict[str, Any]] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    days = []
    for day in ds:
        name = day.date.isoformat()
        write_grid_stack(day.inputs, directory / f"{name}{GRID_STACK_SUFFIX}")
        write_masked_field(day.target, directory / f"{name}{MASKED_FIELD_SUFFIX}")
        days.append(
            {
                "date": name,
                "inputs": f"{name}{GRID_STACK_SUFFIX}",
                "target": f"{name}{MASKED_FIELD_SUFFIX}",
            }
        )
    manifest: Dict[str, Any] = {
        "experiment": ds.experiment,
        "channels": list(ds.channels) if len(ds) else [],
        "spec": ds.spec.to_dict() if len(ds) else None,
        "days": days,
    }
    if extra:
        manifest.update(extra)
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_dataset(directory: PathLike) -> Dataset:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    try:
        manifest = json.loads(manifest_path.read_text())
    except OSError as e:
        raise IoError(f"could not read {manifest_path}: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{manifest_path} is not valid JSON: {e}") from e
    days = []
    with format_errors(manifest_path):
        experiment = int(manifest["experiment"])
        for entry in manifest["days"]:
            inputs = read_grid_stack(directory / entry["inputs"])
            target = read_masked_field(directory / entry["target"])
            if inputs.date.isoformat() != entry["date"]:
                raise DateMismatch(
                    f"{entry['inputs']} is tagged with {inputs.date}, expected {entry['date']}"
                )
            days.append(DayExample(inputs=inputs, target=target))
        return Dataset(days=tuple(days), experiment=experiment)
