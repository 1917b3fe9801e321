import datetime
import math

import numpy as np
import pytest

from ozone_bias.errors import (
    ChannelMismatch,
    DataError,
    EmptyInput,
    InvalidGridSpec,
    OutOfDomain,
    ShapeMismatch,
)
from ozone_bias.grid import (
    MOMO_CHANNELS,
    REGIONS,
    GridSpec,
    GridStack,
    MaskedField,
    NormStats,
    apply_normalizer,
    cell_index,
    fit_normalizer,
    grid_shape,
)
from tests.conftest import make_stack

DATE = datetime.date(2016, 7, 1)


def test_grid_shape():
    assert grid_shape(GridSpec(20, 55, -125, -70, 1.0)) == (35, 55)
    assert grid_shape(REGIONS["europe"]) == (27, 31)
    assert grid_shape(REGIONS["north_america"]) == (31, 49)
    assert grid_shape(GridSpec(0, 1, 0, 1, 1.0)) == (1, 1)


def test_grid_shape_non_integral_extent():
    # 0.1 steps are not exact in binary floating point
    assert grid_shape(GridSpec(0.0, 0.3, 0.0, 0.7, 0.1)) == (3, 7)
    assert grid_shape(GridSpec(0.0, 2.5, 0.0, 3.0, 1.0)) == (2, 3)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(lat_min=10, lat_max=10, lon_min=0, lon_max=1),
        dict(lat_min=0, lat_max=1, lon_min=5, lon_max=-5),
        dict(lat_min=0, lat_max=1, lon_min=0, lon_max=1, resolution=0.0),
        dict(lat_min=0, lat_max=1, lon_min=0, lon_max=1, shape_override=(0, 5)),
        dict(lat_min=0, lat_max=0.5, lon_min=0, lon_max=1),
    ],
)
def test_invalid_grid_spec(kwargs):
    with pytest.raises(InvalidGridSpec):
        GridSpec(**kwargs)


def test_grid_spec_dict():
    spec = REGIONS["europe"]
    assert GridSpec.from_dict(spec.to_dict()) == spec
    assert spec.to_dict()["shape_override"] == [27, 31]


def test_cell_index():
    spec = GridSpec(20, 55, -125, -70, 1.0)
    assert cell_index(spec, 20.0, -125.0) == (0, 0)
    assert cell_index(spec, 54.9, -70.1) == (34, 54)
    # cells are half-open, the upper edge belongs to the next cell
    assert cell_index(spec, 21.0, -124.0) == (1, 1)


@pytest.mark.parametrize("point", [(10.0, -100.0), (55.0, -100.0), (30.0, -70.0), (30.0, -130.0)])
def test_cell_index_out_of_domain(point):
    spec = GridSpec(20, 55, -125, -70, 1.0)
    with pytest.raises(OutOfDomain):
        cell_index(spec, *point)


def test_cell_index_outside_of_overridden_shape():
    # inside of the bounds, but beyond the 27 rows of the overridden shape
    with pytest.raises(OutOfDomain):
        cell_index(REGIONS["europe"], 63.0, 0.0)


def test_cell_index_random_points():
    spec = GridSpec(20, 55, -125, -70, 0.5)
    rows, cols = grid_shape(spec)
    rng = np.random.default_rng(42)
    for lat, lon in zip(rng.uniform(20, 55, size=500), rng.uniform(-125, -70, size=500)):
        row, col = cell_index(spec, lat, lon)
        assert 0 <= row < rows and 0 <= col < cols
        lat_lo, lat_hi, lon_lo, lon_hi = spec.cell_bounds(row, col)
        assert lat_lo <= lat < lat_hi
        assert lon_lo <= lon < lon_hi


def test_grid_stack_validation(small_spec):
    data = np.zeros((2,) + small_spec.shape)
    with pytest.raises(ChannelMismatch):
        GridStack(spec=small_spec, channels=("a", "a"), data=data, date=DATE)
    with pytest.raises(ChannelMismatch):
        GridStack(spec=small_spec, channels=("a", "b", "c"), data=data, date=DATE)
    with pytest.raises(ShapeMismatch):
        GridStack(spec=small_spec, channels=("a", "b"), data=data[:, :-1], date=DATE)
    data[1, 2, 3] = np.nan
    with pytest.raises(DataError):
        GridStack(spec=small_spec, channels=("a", "b"), data=data, date=DATE)


def test_grid_stack_select_and_concat(small_spec):
    stack = make_stack(small_spec, DATE)
    selected = stack.select_channels(["co", "nh3"])
    assert selected.channels == ("co", "nh3")
    np.testing.assert_array_equal(selected.data[0], stack.data[MOMO_CHANNELS.index("co")])
    np.testing.assert_array_equal(selected.data[1], stack.data[0])
    with pytest.raises(ChannelMismatch):
        stack.select_channels(["unknown"])

    other = make_stack(small_spec, datetime.date(2016, 1, 1), channels=("x", "y"), seed=1)
    combined = stack.concat(other)
    assert combined.channels == MOMO_CHANNELS + ("x", "y")
    assert combined.date == DATE
    np.testing.assert_array_equal(combined.data[-2:], other.data)


def test_masked_field_shapes(small_spec):
    values = np.zeros(small_spec.shape)
    with pytest.raises(ShapeMismatch):
        MaskedField(spec=small_spec, values=values, mask=np.ones((2, 2), dtype=bool))
    field = MaskedField.full(small_spec, values)
    assert field.num_valid == values.size


def _single_channel_stack(values):
    values = np.asarray(values, dtype=np.float64)
    spec = GridSpec(0, values.shape[0], 0, values.shape[1])
    return GridStack(spec=spec, channels=("x",), data=values[None], date=DATE)


def test_fit_normalizer():
    stats = fit_normalizer([_single_channel_stack([[1.0, 2.0, 3.0]])])
    assert stats.channels == ("x",)
    assert stats.mean[0] == pytest.approx(2.0)
    assert stats.std[0] == pytest.approx(math.sqrt(2.0 / 3.0))

    normalized = apply_normalizer(stats, _single_channel_stack([[3.0, 2.0, 1.0]]))
    assert normalized.data[0, 0, 0] == pytest.approx(1.2247, abs=1e-4)
    assert normalized.data[0, 0, 1] == pytest.approx(0.0)


def test_fit_normalizer_constant_channel():
    stats = fit_normalizer([_single_channel_stack([[7.0, 7.0, 7.0]])])
    assert stats.mean[0] == 7.0
    assert stats.std[0] == 1.0
    normalized = apply_normalizer(stats, _single_channel_stack([[7.0, 8.0, 9.0]]))
    np.testing.assert_allclose(normalized.data[0, 0], [0.0, 1.0, 2.0])


def test_fit_normalizer_pools_all_stacks(small_spec):
    stacks = [make_stack(small_spec, DATE, seed=seed) for seed in range(3)]
    stats = fit_normalizer(stacks)
    pooled = np.stack([stack.data for stack in stacks]).astype(np.float64)
    np.testing.assert_allclose(stats.mean, pooled.mean(axis=(0, 2, 3)), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(stats.std, pooled.std(axis=(0, 2, 3)), rtol=1e-12, atol=1e-12)


def test_normalized_stacks_have_standard_statistics(small_spec):
    rng = np.random.default_rng(0)
    stacks = [
        GridStack(
            spec=small_spec,
            channels=MOMO_CHANNELS,
            data=rng.normal(50.0, 20.0, size=(len(MOMO_CHANNELS),) + small_spec.shape),
            date=DATE,
        )
        for _ in range(4)
    ]
    stats = fit_normalizer(stacks)
    refit = fit_normalizer([apply_normalizer(stats, stack) for stack in stacks])
    np.testing.assert_allclose(refit.mean, 0.0, atol=1e-10)
    np.testing.assert_allclose(refit.std, 1.0, atol=1e-10)


def test_normalizer_errors(small_spec):
    with pytest.raises(EmptyInput):
        fit_normalizer([])
    stack = make_stack(small_spec, DATE)
    with pytest.raises(ChannelMismatch):
        fit_normalizer([stack, stack.select_channels(MOMO_CHANNELS[:3])])
    stats = fit_normalizer([stack])
    with pytest.raises(ChannelMismatch):
        apply_normalizer(stats, stack.select_channels(MOMO_CHANNELS[::-1]))


def test_norm_stats_dict(small_spec):
    stats = fit_normalizer([make_stack(small_spec, DATE)])
    restored = NormStats.from_dict(stats.to_dict())
    assert restored.channels == stats.channels
    np.testing.assert_array_equal(restored.mean, stats.mean)
    np.testing.assert_array_equal(restored.std, stats.std)
