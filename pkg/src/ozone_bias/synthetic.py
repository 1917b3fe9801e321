"""Seeded synthetic stand-ins for model fields, station observations and land-use rasters.

The true bias of a synthetic day is

    b = linear * x1 + multiplicative * x2 * x3 + saturating * sigmoid(x4) + g

where x1..x4 are the standardized latent fields of four model channels and
g = field_mean + field_amplitude * G(noise), G being a Gaussian smoothing (normalized to unit
standard deviation) of the white-noise field that is fed in as the noise channel. The smoothed
term can only be recovered from the neighbourhood of a cell, not from the cell alone.
"""
import dataclasses
import datetime
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import expit, ndtr

from ozone_bias.dataset import (
    Dataset,
    ObservationTable,
    assemble,
    compute_bias,
    grid_observations,
    save_dataset,
)
from ozone_bias.grid import MOMO_CHANNELS, GridSpec, GridStack, MaskedField, grid_shape
from ozone_bias.io import (
    GRID_STACK_SUFFIX,
    MASKED_FIELD_SUFFIX,
    PathLike,
    write_grid_stack,
    write_masked_field,
)
from ozone_bias.landuse import (
    CATEGORICAL,
    CONTINUOUS,
    ClassSet,
    Raster,
    build_landuse_stack,
    write_raster,
)

logger = logging.getLogger(__name__)

SUMMER_START = (6, 1)
SUMMER_LENGTH = 92


@dataclasses.dataclass
class SyntheticBiasParams:
    linear: float = 3.0
    multiplicative: float = 2.0
    saturating: float = -4.0
    field_mean: float = 6.0
    field_amplitude: float = 3.0
    # smoothing length of the correlated term, in grid cells
    field_sigma: float = 2.0
    linear_channel: str = "t"
    product_channels: Tuple[str, str] = ("no2", "co")
    saturating_channel: str = "ps"
    noise_channel: str = "oh"
    # latent fields are sums of this many random plane waves
    num_waves: int = 4
    max_cycles: float = 2.0
    ozone_baseline: float = 80.0
    ozone_amplitude: float = 8.0

    def __post_init__(self):
        self.product_channels = tuple(self.product_channels)
        used = [self.linear_channel, *self.product_channels, self.saturating_channel, self.noise_channel]
        unknown = [name for name in used if name not in MOMO_CHANNELS]
        if unknown:
            raise ValueError(f"unknown model channels {unknown}, available: {MOMO_CHANNELS}")
        if self.noise_channel in used[:-1]:
            raise ValueError("the noise channel cannot be used by another term")

    @classmethod
    def linear_only(cls, **kwargs) -> "SyntheticBiasParams":
        """Noiseless bias that is a linear function of a single channel."""
        zeroed = ("multiplicative", "saturating", "field_mean", "field_amplitude")
        kwargs = {**{name: 0.0 for name in zeroed}, **kwargs}
        return cls(**kwargs)

    def to_dict(self) -> Dict[str, Any]:
        result = dataclasses.asdict(self)
        result["product_channels"] = list(self.product_channels)
        return result

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SyntheticBiasParams":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown SyntheticBiasParams keys: {unknown}")
        return cls(**data)


@dataclasses.dataclass
class SyntheticInputs:
    """Raw pipeline inputs of a synthetic region: model stacks, model ozone, station table,
    land-use rasters and the true bias per day."""

    spec: GridSpec
    momo_stacks: List[GridStack]
    model_o3: List[MaskedField]
    observations: ObservationTable
    landcover: Raster
    population: Raster
    true_bias: List[MaskedField]
    station_cells: List[Tuple[int, int]]
    description: Dict[str, Any]


def smooth_field(
    rng: np.random.Generator, shape: Tuple[int, int], num_waves: int, max_cycles: float
) -> np.ndarray:
    """Sum of random low-frequency plane waves with unit expected variance."""
    rows, cols = shape
    y, x = np.meshgrid(np.arange(rows) / rows, np.arange(cols) / cols, indexing="ij")
    result = np.zeros(shape)
    for _ in range(num_waves):
        amplitude = rng.normal()
        fy, fx = rng.uniform(-max_cycles, max_cycles, size=2)
        phase = rng.uniform(0.0, 2 * np.pi)
        result += amplitude * np.sin(2 * np.pi * (fy * y + fx * x) + phase)
    return result * np.sqrt(2.0 / num_waves)


def correlated_field(noise: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian-smoothed noise, standardized to zero mean and unit standard deviation."""
    smoothed = gaussian_filter(noise, sigma=sigma, mode="reflect")
    std = smoothed.std()
    return (smoothed - smoothed.mean()) / (std if std > 0 else 1.0)


def true_bias_field(latent: Dict[str, np.ndarray], params: SyntheticBiasParams) -> np.ndarray:
    x1 = latent[params.linear_channel]
    x2, x3 = (latent[name] for name in params.product_channels)
    x4 = latent[params.saturating_channel]
    g = params.field_mean
    if params.field_amplitude != 0.0:
        g = g + params.field_amplitude * correlated_field(latent[params.noise_channel], params.field_sigma)
    return params.linear * x1 + params.multiplicative * x2 * x3 + params.saturating * expit(x4) + g


def summer_dates(n_days: int, start_year: int, days_per_summer: int) -> List[datetime.date]:
    if not 1 <= days_per_summer <= SUMMER_LENGTH:
        raise ValueError(f"days_per_summer has to be in [1, {SUMMER_LENGTH}], but got {days_per_summer}")
    dates = []
    for index in range(n_days):
        year = start_year + index // days_per_summer
        first = datetime.date(year, *SUMMER_START)
        dates.append(first + datetime.timedelta(days=index % days_per_summer))
    return dates


def synth_rasters(
    rng: np.random.Generator,
    spec: GridSpec,
    classes: ClassSet,
    pixels_per_cell: int,
    params: SyntheticBiasParams,
) -> Tuple[Raster, Raster]:
    """Patchy land cover (smooth field quantized into the class codes) and a log-normal
    population density, both aligned to the grid."""
    rows, cols = grid_shape(spec)
    shape = (rows * pixels_per_cell, cols * pixels_per_cell)
    bounds = {
        "lat_min": spec.lat_min,
        "lat_max": spec.lat_min + rows * spec.resolution,
        "lon_min": spec.lon_min,
        "lon_max": spec.lon_min + cols * spec.resolution,
    }
    cycles = params.max_cycles * 3
    cover = ndtr(smooth_field(rng, shape, params.num_waves * 2, cycles))
    class_index = np.minimum((cover * len(classes)).astype(int), len(classes) - 1)
    codes = np.asarray(classes.codes, dtype=np.uint8)[class_index]
    density = np.exp(3.0 + 1.5 * smooth_field(rng, shape, params.num_waves * 2, cycles))
    return Raster(kind=CATEGORICAL, data=codes, **bounds), Raster(kind=CONTINUOUS, data=density, **bounds)


def synth_raw_inputs(
    seed: int,
    spec: GridSpec,
    n_days: int,
    n_stations: int,
    params: Optional[SyntheticBiasParams] = None,
    start_year: int = 2014,
    days_per_summer: int = SUMMER_LENGTH,
    classes: ClassSet = ClassSet(),
    pixels_per_cell: int = 4,
) -> SyntheticInputs:
    if n_days < 1 or n_stations < 1:
        raise ValueError(f"need at least one day and one station, but got {n_days} and {n_stations}")
    params = params or SyntheticBiasParams()
    rows, cols = grid_shape(spec)
    if n_stations > rows * cols:
        raise ValueError(f"cannot place {n_stations} stations on a grid with {rows * cols} cells")
    rng = np.random.default_rng(seed)
    num_channels = len(MOMO_CHANNELS)
    offsets = rng.normal(0.0, 10.0, size=num_channels)
    scales = np.exp(rng.uniform(-1.0, 1.0, size=num_channels))

    cells = np.sort(rng.choice(rows * cols, size=n_stations, replace=False))
    station_cells = [(int(cell) // cols, int(cell) % cols) for cell in cells]
    jitter = rng.uniform(-0.45, 0.45, size=(n_stations, 2)) * spec.resolution
    station_coords = [
        (spec.cell_center(row, col)[0] + dlat, spec.cell_center(row, col)[1] + dlon)
        for (row, col), (dlat, dlon) in zip(station_cells, jitter)
    ]
    landcover, population = synth_rasters(rng, spec, classes, pixels_per_cell, params)

    momo_stacks, model_o3, true_bias, records = [], [], [], []
    for date in summer_dates(n_days, start_year, days_per_summer):
        latent = {}
        for name in MOMO_CHANNELS:
            if name == params.noise_channel:
                latent[name] = rng.normal(size=(rows, cols))
            else:
                latent[name] = smooth_field(rng, (rows, cols), params.num_waves, params.max_cycles)
        data = np.stack([offsets[i] + scales[i] * latent[name] for i, name in enumerate(MOMO_CHANNELS)])
        momo_stacks.append(GridStack(spec=spec, channels=MOMO_CHANNELS, data=data, date=date))

        bias = true_bias_field(latent, params)
        ozone = params.ozone_baseline + params.ozone_amplitude * smooth_field(
            rng, (rows, cols), params.num_waves, params.max_cycles
        )
        model_o3.append(MaskedField.full(spec, ozone, date=date))
        true_bias.append(MaskedField.full(spec, bias, date=date))
        for index, ((row, col), (lat, lon)) in enumerate(zip(station_cells, station_coords)):
            observed = ozone[row, col] - bias[row, col]
            if observed < 0:
                logger.warning(f"clipping a negative synthetic observation ({observed:.2f} ppb) to 0")
                observed = 0.0
            records.append(
                {"station_id": f"S{index:04d}", "lat": lat, "lon": lon, "date": date, "o3_ppb": observed}
            )

    description = {
        "seed": seed,
        "formula": "b = linear*x1 + multiplicative*x2*x3 + saturating*sigmoid(x4) + g",
        "params": params.to_dict(),
        "spec": spec.to_dict(),
        "n_days": n_days,
        "n_stations": n_stations,
        "start_year": start_year,
        "days_per_summer": days_per_summer,
        "station_cells": [list(cell) for cell in station_cells],
    }
    return SyntheticInputs(
        spec=spec,
        momo_stacks=momo_stacks,
        model_o3=model_o3,
        observations=ObservationTable.from_records(records),
        landcover=landcover,
        population=population,
        true_bias=true_bias,
        station_cells=station_cells,
        description=description,
    )


def synth_generate(
    seed: int,
    spec: GridSpec,
    n_days: int,
    n_stations: int,
    experiment: int,
    params: Optional[SyntheticBiasParams] = None,
    start_year: int = 2014,
    days_per_summer: int = SUMMER_LENGTH,
    threads: int = 1,
) -> Tuple[Dataset, Dict[str, Any]]:
    """Generates a synthetic dataset by running the synthetic raw inputs through the regular
    gridding, bias and assembly steps.

    Returns the dataset and a description of the generator (seed, parameters, station cells).
    """
    inputs = synth_raw_inputs(
        seed=seed,
        spec=spec,
        n_days=n_days,
        n_stations=n_stations,
        params=params,
        start_year=start_year,
        days_per_summer=days_per_summer,
    )
    landuse_stack = None
    if experiment == 2:
        landuse_stack = build_landuse_stack(
            inputs.landcover, inputs.population, spec, year=start_year, threads=threads
        )
    bias_fields = [
        compute_bias(model, grid_observations(inputs.observations, spec, model.date))
        for model in inputs.model_o3
    ]
    dataset = assemble(inputs.momo_stacks, landuse_stack, bias_fields, experiment=experiment)
    description = dict(inputs.description, experiment=experiment)
    return dataset, description


def write_raw_inputs(inputs: SyntheticInputs, directory: PathLike) -> Path:
    """Writes the raw inputs in the layout the extract and build commands read."""
    directory = Path(directory)
    (directory / "momo").mkdir(parents=True, exist_ok=True)
    (directory / "model_o3").mkdir(parents=True, exist_ok=True)
    for stack, model in zip(inputs.momo_stacks, inputs.model_o3):
        write_grid_stack(stack, directory / "momo" / f"{stack.date.isoformat()}{GRID_STACK_SUFFIX}")
        write_masked_field(model, directory / "model_o3" / f"{model.date.isoformat()}{MASKED_FIELD_SUFFIX}")
    inputs.observations.to_csv(directory / "stations.csv")
    write_raster(inputs.landcover, directory / "landcover.rast")
    write_raster(inputs.population, directory / "population.rast")
    return directory


def save_synthetic(dataset: Dataset, description: Dict[str, Any], directory: PathLike) -> Path:
    return save_dataset(dataset, directory, extra={"generator": description})
