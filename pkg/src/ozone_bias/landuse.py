"""Zonal statistics of high-resolution land-use rasters on a coarse lat/lon grid.

A raster pixel belongs to a grid cell if its center lies in the half-open cell box. Raster
row 0 is the southern edge, as for grids.
"""
import dataclasses
import datetime
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from ozone_bias.errors import EmptyCell, InvalidRaster, IoError
from ozone_bias.grid import GridSpec, GridStack, grid_shape
from ozone_bias.io import PathLike, format_errors, read_array, read_header, write_header_and_payload

logger = logging.getLogger(__name__)

CATEGORICAL = "categorical"
CONTINUOUS = "continuous"
RASTER_DTYPES = {CATEGORICAL: "u8", CONTINUOUS: "f32"}
BOUND_KEYS = ("lat_min", "lat_max", "lon_min", "lon_max")

# MODIS land cover type 1 (IGBP) uses the 17 codes 1..17
DEFAULT_CLASS_CODES: Tuple[int, ...] = tuple(range(1, 18))

LANDCOVER_STAT_CHANNELS = ("landcover_mode", "landcover_variance")
POPULATION_STAT_CHANNELS = ("pop_variance", "pop_max", "pop_min", "pop_mean")

# (lat_lo, lat_hi, lon_lo, lon_hi)
CellBox = Tuple[float, float, float, float]


@dataclasses.dataclass(frozen=True)
class ClassSet:
    """Ordered list of valid land-cover class codes."""

    codes: Tuple[int, ...] = DEFAULT_CLASS_CODES

    def __post_init__(self):
        codes = tuple(int(code) for code in self.codes)
        if len(codes) == 0:
            raise ValueError("a class set needs at least one class code")
        if len(set(codes)) != len(codes):
            raise ValueError(f"class codes have to be unique, but got {codes}")
        if min(codes) < 0 or max(codes) > 255:
            raise ValueError(f"class codes have to fit into 8 bits, but got {codes}")
        object.__setattr__(self, "codes", codes)

    def __len__(self) -> int:
        return len(self.codes)


@dataclasses.dataclass(frozen=True, eq=False)
class Raster:
    """High-resolution source imagery covering a lat/lon box.

    Categorical rasters hold unsigned 8-bit class codes, continuous rasters 32-bit reals.
    """

    kind: str
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    data: np.ndarray

    def __post_init__(self):
        if self.kind not in RASTER_DTYPES:
            raise InvalidRaster(f"unknown raster kind: {self.kind}")
        if not (self.lat_min < self.lat_max and self.lon_min < self.lon_max):
            raise InvalidRaster(
                f"raster bounds are not well-ordered: lat [{self.lat_min}, {self.lat_max}], "
                f"lon [{self.lon_min}, {self.lon_max}]"
            )
        data = np.array(self.data)
        if data.ndim != 2 or data.size == 0:
            raise InvalidRaster(f"raster data has to be a non-empty 2-D array, but has shape {data.shape}")
        if self.kind == CATEGORICAL:
            if np.issubdtype(data.dtype, np.floating) or data.min() < 0 or data.max() > 255:
                raise InvalidRaster("categorical rasters hold unsigned 8-bit class codes")
            data = data.astype(np.uint8)
        else:
            data = data.astype(np.float32)
            if not np.all(np.isfinite(data)):
                raise InvalidRaster("continuous raster contains non-finite values")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def pixel_size(self) -> Tuple[float, float]:
        return (self.lat_max - self.lat_min) / self.rows, (self.lon_max - self.lon_min) / self.cols

    def pixel_centers(self) -> Tuple[np.ndarray, np.ndarray]:
        """Returns the (ascending) latitudes of the pixel rows and longitudes of the pixel
        columns."""
        lat_size, lon_size = self.pixel_size
        lats = self.lat_min + (np.arange(self.rows) + 0.5) * lat_size
        lons = self.lon_min + (np.arange(self.cols) + 0.5) * lon_size
        return lats, lons

    def check_classes(self, classes: ClassSet) -> None:
        if self.kind != CATEGORICAL:
            raise InvalidRaster(f"expected a categorical raster, but got a {self.kind} one")
        unknown = sorted(set(np.unique(self.data).tolist()) - set(classes.codes))
        if unknown:
            raise InvalidRaster(f"raster contains class codes {unknown} that are not in {classes.codes}")

    def cell_pixels(self, cell: CellBox) -> np.ndarray:
        """Returns all pixels whose centers lie inside the half-open cell box, in row-major
        order."""
        lat_lo, lat_hi, lon_lo, lon_hi = cell
        lats, lons = self.pixel_centers()
        # centers are ascending, so the pixels inside [lo, hi) form a contiguous slice
        row_start, row_stop = np.searchsorted(lats, [lat_lo, lat_hi], side="left")
        col_start, col_stop = np.searchsorted(lons, [lon_lo, lon_hi], side="left")
        return self.data[row_start:row_stop, col_start:col_stop].ravel()


class CategoricalStats(NamedTuple):
    mode: int
    variance: float
    coverage: Dict[int, float]


class ContinuousStats(NamedTuple):
    variance: float
    max: float
    min: float
    mean: float


def categorical_cell_stats(raster: Raster, cell: CellBox, classes: ClassSet) -> CategoricalStats:
    """Mode (ties go to the smallest code), population variance of the numeric codes and the
    fraction of pixels per class."""
    if raster.kind != CATEGORICAL:
        raise InvalidRaster(f"expected a categorical raster, but got a {raster.kind} one")
    pixels = raster.cell_pixels(cell)
    if pixels.size == 0:
        raise EmptyCell(f"no pixel center of the categorical raster falls inside the cell {cell}")
    counts = np.bincount(pixels, minlength=256)
    unknown = [code for code in np.nonzero(counts)[0].tolist() if code not in classes.codes]
    if unknown:
        raise InvalidRaster(f"cell {cell} contains class codes {unknown} that are not in {classes.codes}")
    n = pixels.size
    codes = np.arange(256, dtype=np.float64)
    mean = float((codes * counts).sum()) / n
    variance = float((counts * (codes - mean) ** 2).sum()) / n
    coverage = {code: counts[code] / n for code in classes.codes}
    # argmax returns the first, i.e. the smallest, of equally frequent codes
    return CategoricalStats(mode=int(np.argmax(counts)), variance=variance, coverage=coverage)


def continuous_cell_stats(raster: Raster, cell: CellBox) -> ContinuousStats:
    if raster.kind != CONTINUOUS:
        raise InvalidRaster(f"expected a continuous raster, but got a {raster.kind} one")
    pixels = raster.cell_pixels(cell).astype(np.float64)
    if pixels.size == 0:
        raise EmptyCell(f"no pixel center of the continuous raster falls inside the cell {cell}")
    return ContinuousStats(
        variance=float(pixels.var()),
        max=float(pixels.max()),
        min=float(pixels.min()),
        mean=float(pixels.mean()),
    )


def landuse_channel_names(classes: ClassSet = ClassSet()) -> Tuple[str, ...]:
    coverage = tuple(f"coverage_{code}" for code in classes.codes)
    return coverage + LANDCOVER_STAT_CHANNELS + POPULATION_STAT_CHANNELS


@dataclasses.dataclass
class CoverageReport:
    """Cells that had no pixel of one of the rasters (and were filled), plus the number of
    contributing pixels per cell."""

    empty_categorical: List[Tuple[int, int]] = dataclasses.field(default_factory=list)
    empty_continuous: List[Tuple[int, int]] = dataclasses.field(default_factory=list)
    categorical_pixels: Optional[np.ndarray] = None
    continuous_pixels: Optional[np.ndarray] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "empty_categorical": [list(cell) for cell in self.empty_categorical],
            "empty_continuous": [list(cell) for cell in self.empty_continuous],
        }


def _row_features(
    row: int,
    cat: Raster,
    cont: Raster,
    spec: GridSpec,
    classes: ClassSet,
    fill_value: float,
) -> Tuple[np.ndarray, List[int], List[int], List[int], List[int]]:
    num_channels = len(classes) + len(LANDCOVER_STAT_CHANNELS) + len(POPULATION_STAT_CHANNELS)
    _, cols = grid_shape(spec)
    result = np.full((num_channels, cols), fill_value, dtype=np.float64)
    empty_cat, empty_cont, cat_counts, cont_counts = [], [], [], []
    for col in range(cols):
        cell = spec.cell_bounds(row, col)
        cat_counts.append(cat.cell_pixels(cell).size)
        cont_counts.append(cont.cell_pixels(cell).size)
        try:
            stats = categorical_cell_stats(cat, cell, classes)
            result[: len(classes), col] = [stats.coverage[code] for code in classes.codes]
            result[len(classes), col] = stats.mode
            result[len(classes) + 1, col] = stats.variance
        except EmptyCell:
            empty_cat.append(col)
        try:
            pop = continuous_cell_stats(cont, cell)
            result[len(classes) + 2 :, col] = [pop.variance, pop.max, pop.min, pop.mean]
        except EmptyCell:
            empty_cont.append(col)
    return result, empty_cat, empty_cont, cat_counts, cont_counts


def build_landuse_stack(
    cat: Raster,
    cont: Raster,
    spec: GridSpec,
    classes: ClassSet = ClassSet(),
    year: int = 2016,
    fill_value: float = 0.0,
    threads: int = 1,
    report: Optional[CoverageReport] = None,
) -> GridStack:
    """Aggregates a land-cover and a population raster into per-cell features.

    The channels are the coverage fraction of every class, the land-cover mode and variance,
    and the population variance, maximum, minimum and mean (17 + 2 + 4 = 23 channels for the
    default class set). Cells without any pixel of a raster get fill_value for the channels
    of that raster and are recorded in the report (if given). The result is tagged with
    January 1st of year, since land use is a yearly product.
    """
    cat.check_classes(classes)
    if cont.kind != CONTINUOUS:
        raise InvalidRaster(f"expected a continuous population raster, but got a {cont.kind} one")
    rows, cols = grid_shape(spec)

    def compute(row):
        return _row_features(row, cat, cont, spec, classes, fill_value)

    # rows are independent, results are collected in row order
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            row_results = list(executor.map(compute, range(rows)))
    else:
        row_results = [compute(row) for row in range(rows)]

    data = np.stack([result[0] for result in row_results], axis=1)
    empty_cat = [(row, col) for row, result in enumerate(row_results) for col in result[1]]
    empty_cont = [(row, col) for row, result in enumerate(row_results) for col in result[2]]
    if empty_cat or empty_cont:
        logger.warning(
            f"filled {len(empty_cat)} cells without land-cover pixels and {len(empty_cont)} "
            f"cells without population pixels with {fill_value}"
        )
    if report is not None:
        report.empty_categorical.extend(empty_cat)
        report.empty_continuous.extend(empty_cont)
        report.categorical_pixels = np.array([result[3] for result in row_results])
        report.continuous_pixels = np.array([result[4] for result in row_results])
    return GridStack(
        spec=spec,
        channels=landuse_channel_names(classes),
        data=data,
        date=datetime.date(year, 1, 1),
    )


class LandUseExtractor:
    """Builds land-use stacks for a fixed class set and keeps a coverage report of the last
    extraction.

    Args:
        classes: The land-cover class codes.
        fill_value: The value for cells that contain no pixel of a raster.
        threads: Number of worker threads (one grid row per task).
        collect_statistics: If True, log per-channel statistics of each extracted stack.
    """

    def __init__(
        self,
        classes: ClassSet = ClassSet(),
        fill_value: float = 0.0,
        threads: int = 1,
        collect_statistics: bool = False,
    ):
        self.classes = classes
        self.fill_value = fill_value
        self.threads = threads
        self.collect_statistics = collect_statistics
        self.report = CoverageReport()

    @property
    def channels(self) -> Tuple[str, ...]:
        return landuse_channel_names(self.classes)

    def show_statistics(self, stack: GridStack, description: Optional[str] = None) -> None:
        description = description or "Land-use statistics"
        statistics_show = {
            name: {
                "min": float(values.min()),
                "max": float(values.max()),
                "mean": float(values.mean()),
                "stddev": float(values.std()),
            }
            for name, values in zip(stack.channels, stack.data)
        }
        statistics_show["empty_cells"] = self.report.to_dict()
        logger.info(f"{description}: \n{json.dumps(statistics_show, indent=2)}")

    def __call__(self, cat: Raster, cont: Raster, spec: GridSpec, year: int = 2016) -> GridStack:
        self.report = CoverageReport()
        stack = build_landuse_stack(
            cat=cat,
            cont=cont,
            spec=spec,
            classes=self.classes,
            year=year,
            fill_value=self.fill_value,
            threads=self.threads,
            report=self.report,
        )
        if self.collect_statistics:
            self.show_statistics(stack)
        return stack


def write_raster(raster: Raster, path: PathLike) -> None:
    header = {
        "kind": raster.kind,
        "bounds": {key: getattr(raster, key) for key in BOUND_KEYS},
        "rows": raster.rows,
        "cols": raster.cols,
        "dtype": RASTER_DTYPES[raster.kind],
    }
    dtype = "u1" if raster.kind == CATEGORICAL else "<f4"
    write_header_and_payload(path, header, [np.ascontiguousarray(raster.data, dtype=dtype).tobytes()])


def read_raster(path: PathLike) -> Raster:
    try:
        with open(path, "rb") as f:
            header = read_header(f, path)
            with format_errors(path):
                kind = header.get("kind")
                if kind not in RASTER_DTYPES or header.get("dtype") != RASTER_DTYPES[kind]:
                    raise InvalidRaster(
                        f"{path}: unsupported raster kind / dtype {kind!r} / {header.get('dtype')!r}"
                    )
                rows, cols = int(header["rows"]), int(header["cols"])
                bounds = {key: float(header["bounds"][key]) for key in BOUND_KEYS}
            data = read_array(f, header["dtype"], rows * cols, path).reshape(rows, cols)
    except OSError as e:
        raise IoError(f"could not read {path}: {e}") from e
    return Raster(kind=kind, data=data, **bounds)


def class_set_from_codes(codes: Optional[Sequence[int]]) -> ClassSet:
    return ClassSet(tuple(codes)) if codes else ClassSet()
