import datetime
import math

import numpy as np
import pytest
import torch

from ozone_bias.errors import DateMismatch, NoValidPairs, ShapeMismatch
from ozone_bias.grid import GridSpec, MaskedField
from ozone_bias.metrics import StationRMSE, rmse_at_stations
from tests.conftest import make_field

SPEC = GridSpec(lat_min=0, lat_max=3, lon_min=0, lon_max=4)
DATES = [datetime.date(2016, 7, day) for day in (1, 2, 3)]


def _random_fields(seed, num_days=3, observed=0.5):
    rng = np.random.default_rng(seed)
    predictions, targets = [], []
    for date in DATES[:num_days]:
        predictions.append(MaskedField.full(SPEC, rng.normal(size=SPEC.shape), date=date))
        targets.append(make_field(SPEC, rng.normal(size=SPEC.shape), rng.random(SPEC.shape) < observed, date))
    return predictions, targets


def test_perfect_predictions():
    _, targets = _random_fields(0)
    predictions = [MaskedField.full(SPEC, target.values, date=target.date) for target in targets]
    rmse_map, overall = rmse_at_stations(predictions, targets)
    assert overall == 0.0
    assert np.all(rmse_map.values[rmse_map.mask] == 0.0)


def test_pooled_rmse():
    mask = np.zeros(SPEC.shape, dtype=bool)
    mask[1, 2] = True
    targets = [make_field(SPEC, np.zeros(SPEC.shape), mask, date) for date in DATES[:2]]
    predictions = [
        MaskedField.full(SPEC, np.full(SPEC.shape, residual), date=date)
        for residual, date in zip((3.0, 4.0), DATES)
    ]
    rmse_map, overall = rmse_at_stations(predictions, targets)
    assert overall == pytest.approx(math.sqrt(12.5))
    assert rmse_map.values[1, 2] == pytest.approx(math.sqrt(12.5))
    np.testing.assert_array_equal(rmse_map.mask, mask)


def test_never_observed_cells_are_masked():
    predictions, targets = _random_fields(1)
    observed = np.logical_or.reduce([target.mask for target in targets])
    rmse_map, _ = rmse_at_stations(predictions, targets)
    np.testing.assert_array_equal(rmse_map.mask, observed)


def test_against_brute_force():
    predictions, targets = _random_fields(2, observed=0.7)
    squared, per_cell = [], {}
    for prediction, target in zip(predictions, targets):
        for row, col in zip(*np.nonzero(target.mask)):
            residual = prediction.values[row, col] - target.values[row, col]
            squared.append(residual**2)
            per_cell.setdefault((row, col), []).append(residual**2)
    rmse_map, overall = rmse_at_stations(predictions, targets)
    assert overall == pytest.approx(math.sqrt(np.mean(squared)), rel=1e-9)
    for (row, col), values in per_cell.items():
        assert rmse_map.values[row, col] == pytest.approx(math.sqrt(np.mean(values)), rel=1e-9)


def test_day_order_does_not_matter():
    predictions, targets = _random_fields(3)
    forward_map, forward = rmse_at_stations(predictions, targets)
    backward_map, backward = rmse_at_stations(predictions[::-1], targets[::-1])
    assert backward == pytest.approx(forward, rel=1e-12)
    np.testing.assert_allclose(backward_map.values, forward_map.values, rtol=1e-12)


def test_masked_predictions_do_not_count():
    target = make_field(SPEC, np.zeros(SPEC.shape), date=DATES[0])
    mask = np.zeros(SPEC.shape, dtype=bool)
    mask[0, 0] = True
    prediction = make_field(SPEC, np.full(SPEC.shape, 2.0), mask, date=DATES[0])
    rmse_map, overall = rmse_at_stations([prediction], [target])
    assert overall == 2.0
    assert rmse_map.num_valid == 1


def test_no_valid_pairs():
    target = make_field(SPEC, np.zeros(SPEC.shape), np.zeros(SPEC.shape, dtype=bool), DATES[0])
    with pytest.raises(NoValidPairs):
        rmse_at_stations([MaskedField.full(SPEC, np.zeros(SPEC.shape), date=DATES[0])], [target])
    with pytest.raises(NoValidPairs):
        rmse_at_stations([], [])


def test_misaligned_inputs():
    predictions, targets = _random_fields(4)
    with pytest.raises(DateMismatch):
        rmse_at_stations(predictions[:2], targets)
    with pytest.raises(DateMismatch):
        rmse_at_stations(predictions[::-1], targets)
    other = GridSpec(lat_min=0, lat_max=3, lon_min=0, lon_max=5)
    with pytest.raises(ShapeMismatch):
        rmse_at_stations([MaskedField.full(other, np.zeros(other.shape), date=DATES[0])], targets[:1])


def test_metric_accumulates_over_updates():
    metric = StationRMSE(shape=(2, 2))
    mask = torch.tensor([[True, False], [False, False]])
    metric.update(torch.full((2, 2), 3.0), torch.zeros(2, 2), mask)
    metric.update(torch.full((2, 2), 4.0), torch.zeros(2, 2), mask)
    result = metric.compute()
    torch.testing.assert_close(result["overall"], torch.tensor(math.sqrt(12.5), dtype=torch.float64))
    assert result["count"].tolist() == [[2, 0], [0, 0]]
    assert torch.isnan(result["per_cell"][1, 1])
    metric.reset()
    with pytest.raises(NoValidPairs):
        metric.compute()
    with pytest.raises(ShapeMismatch):
        metric.update(torch.zeros(3, 3), torch.zeros(3, 3), torch.ones(3, 3, dtype=torch.bool))
