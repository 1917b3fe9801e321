"""Grid data model: regular lat/lon grids, multi-channel stacks, masked fields and z-score
normalization.

Row 0 of every grid is the southern edge (``lat_min``) and column 0 the western edge
(``lon_min``). Cells are half-open boxes ``[lat, lat + resolution) x [lon, lon + resolution)``.
"""
import dataclasses
import datetime
import logging
import math
from fractions import Fraction
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from ozone_bias.errors import (
    ChannelMismatch,
    DataError,
    EmptyInput,
    InvalidGridSpec,
    OutOfDomain,
    ShapeMismatch,
)

logger = logging.getLogger(__name__)

NORM_EPSILON = 1e-8

# the 16 MOMO-Chem species / meteorological fields kept after down-selection
MOMO_CHANNELS: Tuple[str, ...] = (
    "nh3",  # ammonia
    "dms",  # dimethyl sulfide
    "hno3",  # nitric acid
    "co",  # carbon monoxide
    "brono2",  # bromine nitrate
    "t",  # temperature
    "no2",  # nitrogen dioxide
    "pan",  # peroxyacetyl nitrate
    "prod_hox",  # chemical production of HOx radicals
    "ps",  # surface pressure
    "ho2",  # hydroperoxyl
    "c5h8",  # 1-pentyne
    "so2",  # sulfur dioxide
    "oh",  # hydroxyl
    "lw_clr_sfc",  # clear-sky longwave flux at surface
    "olr_clr",  # clear-sky outgoing longwave radiation to space
)


def _exact(value: float) -> Fraction:
    # the shortest decimal repr of a float is the number the user wrote down
    return Fraction(repr(float(value)))


@dataclasses.dataclass(frozen=True)
class GridSpec:
    """A regular latitude / longitude grid.

    Args:
        lat_min: Southern edge in degrees.
        lat_max: Northern edge in degrees.
        lon_min: Western edge in degrees.
        lon_max: Eastern edge in degrees.
        resolution: Cell size in degrees (same for both axes).
        shape_override: Optional explicit (rows, cols). If given, it takes precedence over the
            shape derived from the bounds.
    """

    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    resolution: float = 1.0
    shape_override: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if not self.lat_min < self.lat_max:
            raise InvalidGridSpec(
                f"lat_min [{self.lat_min}] has to be smaller than lat_max [{self.lat_max}]"
            )
        if not self.lon_min < self.lon_max:
            raise InvalidGridSpec(
                f"lon_min [{self.lon_min}] has to be smaller than lon_max [{self.lon_max}]"
            )
        if not self.resolution > 0:
            raise InvalidGridSpec(f"resolution has to be positive, but got {self.resolution}")
        if self.shape_override is not None:
            shape = tuple(int(v) for v in self.shape_override)
            if len(shape) != 2 or shape[0] <= 0 or shape[1] <= 0:
                raise InvalidGridSpec(
                    f"shape_override has to be a pair of positive integers, but got "
                    f"{self.shape_override}"
                )
            object.__setattr__(self, "shape_override", shape)
        if min(self.derived_shape) <= 0 and self.shape_override is None:
            raise InvalidGridSpec(
                f"the grid extent is smaller than one cell of resolution {self.resolution}"
            )

    @property
    def derived_shape(self) -> Tuple[int, int]:
        res = _exact(self.resolution)
        rows = math.floor((_exact(self.lat_max) - _exact(self.lat_min)) / res)
        cols = math.floor((_exact(self.lon_max) - _exact(self.lon_min)) / res)
        return rows, cols

    @property
    def shape(self) -> Tuple[int, int]:
        return grid_shape(self)

    def cell_bounds(self, row: int, col: int) -> Tuple[float, float, float, float]:
        """Returns (lat_lo, lat_hi, lon_lo, lon_hi) of a cell."""
        lat_lo = self.lat_min + row * self.resolution
        lon_lo = self.lon_min + col * self.resolution
        return lat_lo, lat_lo + self.resolution, lon_lo, lon_lo + self.resolution

    def cell_center(self, row: int, col: int) -> Tuple[float, float]:
        return (
            self.lat_min + (row + 0.5) * self.resolution,
            self.lon_min + (col + 0.5) * self.resolution,
        )

    def to_dict(self) -> Dict[str, Any]:
        result = dataclasses.asdict(self)
        if self.shape_override is not None:
            result["shape_override"] = list(self.shape_override)
        return result

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GridSpec":
        data = dict(data)
        shape_override = data.pop("shape_override", None)
        return cls(
            **data,
            shape_override=tuple(shape_override) if shape_override is not None else None,
        )


REGIONS: Dict[str, GridSpec] = {
    "north_america": GridSpec(20, 55, -125, -70, 1.0, shape_override=(31, 49)),
    "europe": GridSpec(35, 65, -10, 25, 1.0, shape_override=(27, 31)),
}


def grid_shape(spec: GridSpec) -> Tuple[int, int]:
    if spec.shape_override is not None:
        return spec.shape_override
    return spec.derived_shape


def cell_index(spec: GridSpec, lat: float, lon: float) -> Tuple[int, int]:
    """Maps a point to the (row, col) of the half-open cell that contains it."""
    if not (spec.lat_min <= lat < spec.lat_max and spec.lon_min <= lon < spec.lon_max):
        raise OutOfDomain(
            f"point ({lat}, {lon}) is outside of the grid bounds "
            f"[{spec.lat_min}, {spec.lat_max}) x [{spec.lon_min}, {spec.lon_max})"
        )
    res = _exact(spec.resolution)
    row = math.floor((_exact(lat) - _exact(spec.lat_min)) / res)
    col = math.floor((_exact(lon) - _exact(spec.lon_min)) / res)
    rows, cols = grid_shape(spec)
    if not (0 <= row < rows and 0 <= col < cols):
        raise OutOfDomain(
            f"point ({lat}, {lon}) maps to cell ({row}, {col}) which is outside of the grid "
            f"shape {(rows, cols)}"
        )
    return row, col


@dataclasses.dataclass(frozen=True, eq=False)
class GridStack:
    """A multi-channel field with shape [channels x rows x cols] for a single day."""

    spec: GridSpec
    channels: Tuple[str, ...]
    data: np.ndarray
    date: datetime.date

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        data = np.array(self.data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        object.__setattr__(self, "data", data)
        if data.ndim != 3:
            raise ShapeMismatch(f"stack data has to be 3-dimensional, but has shape {data.shape}")
        if len(set(self.channels)) != len(self.channels):
            raise ChannelMismatch(f"channel names have to be unique, but got {self.channels}")
        if data.shape[0] != len(self.channels):
            raise ChannelMismatch(
                f"number of channels [{len(self.channels)}] does not match the data shape "
                f"{data.shape}"
            )
        if data.shape[1:] != grid_shape(self.spec):
            raise ShapeMismatch(
                f"data shape {data.shape[1:]} does not match the grid shape "
                f"{grid_shape(self.spec)}"
            )
        if not np.all(np.isfinite(data)):
            raise DataError(f"stack for {self.date} contains non-finite values")
        data.flags.writeable = False

    @property
    def num_channels(self) -> int:
        return len(self.channels)

    def select_channels(self, names: Sequence[str]) -> "GridStack":
        missing = [name for name in names if name not in self.channels]
        if missing:
            raise ChannelMismatch(f"channels {missing} are not available in {self.channels}")
        indices = [self.channels.index(name) for name in names]
        return dataclasses.replace(self, channels=tuple(names), data=self.data[indices])

    def concat(self, other: "GridStack") -> "GridStack":
        """Appends the channels of other (which may be tagged with another date, e.g. a
        yearly land-use stack) to this stack."""
        if other.spec != self.spec:
            raise ShapeMismatch(f"cannot concat stacks on different grids: {self.spec} vs {other.spec}")
        return dataclasses.replace(
            self,
            channels=self.channels + other.channels,
            data=np.concatenate([self.data, other.data.astype(self.data.dtype)], axis=0),
        )


@dataclasses.dataclass(frozen=True, eq=False)
class MaskedField:
    """A single-channel field [rows x cols] (in ppb) with a validity mask (True = observed).

    Values at masked (False) cells carry no meaning.
    """

    spec: GridSpec
    values: np.ndarray
    mask: np.ndarray
    date: Optional[datetime.date] = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        mask = np.array(self.mask, dtype=bool)
        if values.shape != mask.shape:
            raise ShapeMismatch(
                f"values shape {values.shape} and mask shape {mask.shape} have to match"
            )
        if values.shape != grid_shape(self.spec):
            raise ShapeMismatch(
                f"field shape {values.shape} does not match the grid shape {grid_shape(self.spec)}"
            )
        values.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @property
    def num_valid(self) -> int:
        return int(self.mask.sum())

    @classmethod
    def full(
        cls, spec: GridSpec, values: np.ndarray, date: Optional[datetime.date] = None
    ) -> "MaskedField":
        values = np.asarray(values, dtype=np.float64)
        return cls(spec=spec, values=values, mask=np.ones(values.shape, dtype=bool), date=date)


@dataclasses.dataclass(frozen=True, eq=False)
class NormStats:
    """Per-channel z-score statistics."""

    channels: Tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    epsilon: float = NORM_EPSILON

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if not (len(self.channels) == len(mean) == len(std)):
            raise ChannelMismatch(
                f"got {len(self.channels)} channels, but {len(mean)} means and {len(std)} stds"
            )
        std = np.where(std < self.epsilon, 1.0, std)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "channels": list(self.channels),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "epsilon": self.epsilon,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NormStats":
        return cls(**data)


def fit_normalizer(train_stacks: Sequence[GridStack], epsilon: float = NORM_EPSILON) -> NormStats:
    """Computes per-channel mean and population standard deviation over all pixels of all
    given stacks. Channels with a standard deviation below epsilon get a std of 1."""
    if len(train_stacks) == 0:
        raise EmptyInput("cannot fit normalization statistics without any stacks")
    channels = train_stacks[0].channels
    for stack in train_stacks[1:]:
        if stack.channels != channels:
            raise ChannelMismatch(
                f"all stacks have to share the channels {channels}, but the stack for "
                f"{stack.date} has {stack.channels}"
            )
    # [N, C, H, W] -> [C, N*H*W]
    values = np.stack([stack.data for stack in train_stacks]).astype(np.float64)
    values = values.transpose(1, 0, 2, 3).reshape(len(channels), -1)
    mean = values.mean(axis=1)
    std = values.std(axis=1)
    degenerate = [name for name, s in zip(channels, std) if s < epsilon]
    if degenerate:
        logger.warning(f"constant channels get a standard deviation of 1: {degenerate}")
    return NormStats(channels=channels, mean=mean, std=std, epsilon=epsilon)


def apply_normalizer(stats: NormStats, stack: GridStack) -> GridStack:
    if stack.channels != stats.channels:
        raise ChannelMismatch(
            f"stack channels {stack.channels} do not match the normalization channels "
            f"{stats.channels}"
        )
    data = (stack.data.astype(np.float64) - stats.mean[:, None, None]) / stats.std[:, None, None]
    return dataclasses.replace(stack, data=data)


