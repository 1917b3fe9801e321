import datetime
import logging

import numpy as np
import pandas as pd
import pytest

from ozone_bias.dataset import (
    STATION_COLUMNS,
    Dataset,
    DayExample,
    ObservationTable,
    assemble,
    compute_bias,
    grid_observations,
    load_dataset,
    save_dataset,
    temporal_split,
)
from ozone_bias.errors import (
    ChannelCountMismatch,
    DataError,
    DateMismatch,
    EmptyEval,
    FormatError,
    IoError,
    ShapeMismatch,
)
from ozone_bias.grid import MOMO_CHANNELS, GridSpec, MaskedField
from ozone_bias.landuse import landuse_channel_names
from tests.conftest import make_field, make_stack

SPEC = GridSpec(lat_min=40, lat_max=46, lon_min=0, lon_max=8)
DATE = datetime.date(2016, 7, 1)


def _record(station_id, lat, lon, o3, date=DATE):
    return {"station_id": station_id, "lat": lat, "lon": lon, "date": date, "o3_ppb": o3}


def test_observation_table_validation():
    with pytest.raises(DataError):
        ObservationTable.from_records([_record("a", 41.5, 1.5, 30.0), _record("a", 42.5, 1.5, 31.0)])
    with pytest.raises(DataError):
        ObservationTable.from_records([_record("a", 41.5, 1.5, -1.0)])
    with pytest.raises(DataError):
        ObservationTable.from_records([_record("a", 41.5, 1.5, np.nan)])
    with pytest.raises(DataError):
        ObservationTable(pd.DataFrame({"station_id": ["a"], "lat": [1.0]}))


def test_observation_table_csv(tmp_path):
    table = ObservationTable.from_records(
        [_record("b", 41.5, 1.5, 30.25), _record("a", 42.5, 2.5, 31.0, date=datetime.date(2016, 7, 2))]
    )
    path = tmp_path / "stations.csv"
    table.to_csv(path)
    assert path.read_text().splitlines()[0] == ",".join(STATION_COLUMNS)
    loaded = ObservationTable.from_csv(path)
    assert len(loaded) == 2
    assert loaded.dates == [DATE, datetime.date(2016, 7, 2)]
    assert list(loaded.frame["o3_ppb"]) == [30.25, 31.0]


def test_observation_table_csv_wrong_header(tmp_path):
    path = tmp_path / "stations.csv"
    path.write_text("id,lat,lon,date,o3\na,41.5,1.5,2016-07-01,30.0\n")
    with pytest.raises(FormatError):
        ObservationTable.from_csv(path)


@pytest.mark.parametrize(
    "row",
    ["a,41.5,1.5,2016-13-40,30.0", "a,north,1.5,2016-07-01,30.0", "a,41.5,1.5,2016-07-01,high"],
)
def test_observation_table_csv_invalid_value(tmp_path, row):
    path = tmp_path / "stations.csv"
    path.write_text(f"station_id,lat,lon,date,o3_ppb\n{row}\n")
    with pytest.raises(DataError):
        ObservationTable.from_csv(path)


def test_observation_table_csv_unreadable(tmp_path):
    path = tmp_path / "stations.csv"
    path.write_text("")
    with pytest.raises(FormatError):
        ObservationTable.from_csv(path)
    with pytest.raises(IoError):
        ObservationTable.from_csv(tmp_path / "missing.csv")


def test_grid_observations_averages_per_cell():
    table = ObservationTable.from_records(
        [_record("a", 41.2, 1.1, 30.0), _record("b", 41.8, 1.9, 34.0), _record("c", 45.5, 7.5, 12.0)]
    )
    field = grid_observations(table, SPEC, DATE)
    assert field.values[1, 1] == 32.0
    assert field.values[5, 7] == 12.0
    assert field.num_valid == 2
    assert field.mask[1, 1] and field.mask[5, 7]


def test_grid_observations_without_stations():
    table = ObservationTable.from_records([_record("a", 41.2, 1.1, 30.0)])
    field = grid_observations(table, SPEC, datetime.date(2016, 7, 2))
    assert field.num_valid == 0


def test_grid_observations_skips_stations_outside(caplog):
    table = ObservationTable.from_records([_record("a", 41.2, 1.1, 30.0), _record("b", 10.0, 1.1, 50.0)])
    field = grid_observations(table, SPEC, DATE)
    assert field.num_valid == 1
    assert "outside of the grid" in caplog.text


def test_grid_observations_does_not_depend_on_record_order():
    rng = np.random.default_rng(0)
    records = [
        _record(f"s{i}", rng.uniform(40, 42), rng.uniform(0, 2), rng.uniform(0, 100)) for i in range(50)
    ]
    forward = grid_observations(ObservationTable.from_records(records), SPEC, DATE)
    backward = grid_observations(ObservationTable.from_records(records[::-1]), SPEC, DATE)
    np.testing.assert_array_equal(forward.values, backward.values)
    np.testing.assert_array_equal(forward.mask, backward.mask)


def test_compute_bias():
    model = MaskedField.full(SPEC, np.full(SPEC.shape, 40.0))
    obs_values = np.zeros(SPEC.shape)
    obs_values[0, 0], obs_values[1, 1] = 32.0, 48.0
    mask = obs_values > 0
    bias = compute_bias(model, make_field(SPEC, obs_values, mask, date=DATE))
    assert bias.values[0, 0] == 8.0
    assert bias.values[1, 1] == -8.0
    np.testing.assert_array_equal(bias.mask, mask)
    assert bias.date == DATE


def test_compute_bias_restores_the_model_value():
    rng = np.random.default_rng(3)
    # quarter steps are exact in binary floating point
    model_values = rng.integers(0, 400, size=SPEC.shape) / 4.0
    obs_values = rng.integers(0, 400, size=SPEC.shape) / 4.0
    mask = rng.random(SPEC.shape) < 0.5
    bias = compute_bias(MaskedField.full(SPEC, model_values), make_field(SPEC, obs_values, mask))
    np.testing.assert_array_equal((bias.values + obs_values)[mask], model_values[mask])


def test_compute_bias_shape_mismatch():
    other = GridSpec(lat_min=40, lat_max=45, lon_min=0, lon_max=8)
    with pytest.raises(ShapeMismatch):
        compute_bias(MaskedField.full(SPEC, np.zeros(SPEC.shape)), MaskedField.full(other, np.zeros(other.shape)))


def _days(n, start=DATE):
    return [start + datetime.timedelta(days=i) for i in range(n)]


def _bias_fields(dates, valid=True):
    mask = np.zeros(SPEC.shape, dtype=bool)
    mask[2, 3] = valid
    return [make_field(SPEC, np.full(SPEC.shape, 1.5), mask, date=date) for date in dates]


def test_assemble_model_only():
    dates = _days(3)
    stacks = [make_stack(SPEC, date, seed=i) for i, date in enumerate(dates)]
    dataset = assemble(stacks[::-1], None, _bias_fields(dates), experiment=1)
    assert len(dataset) == 3
    assert dataset.dates == dates
    assert dataset.channels == MOMO_CHANNELS


def test_assemble_with_landuse():
    dates = _days(2)
    stacks = [make_stack(SPEC, date) for date in dates]
    landuse = make_stack(SPEC, datetime.date(2016, 1, 1), channels=landuse_channel_names())
    dataset = assemble(stacks, landuse, _bias_fields(dates), experiment=2)
    assert len(dataset.channels) == 39
    assert dataset.channels[16:] == landuse_channel_names()
    for day in dataset:
        np.testing.assert_array_equal(day.inputs.data[16:], landuse.data)
        assert day.inputs.date == day.target.date


def test_assemble_date_mismatch():
    stacks = [make_stack(SPEC, date) for date in _days(3)]
    with pytest.raises(DateMismatch):
        assemble(stacks, None, _bias_fields(_days(2)), experiment=1)


def test_assemble_channel_count_mismatch():
    dates = _days(1)
    stacks = [make_stack(SPEC, DATE, channels=MOMO_CHANNELS[:15])]
    with pytest.raises(ChannelCountMismatch):
        assemble(stacks, None, _bias_fields(dates), experiment=1)
    landuse = make_stack(SPEC, datetime.date(2016, 1, 1), channels=landuse_channel_names()[:20])
    with pytest.raises(ChannelCountMismatch):
        assemble([make_stack(SPEC, DATE)], landuse, _bias_fields(dates), experiment=2)
    with pytest.raises(ChannelCountMismatch):
        assemble([make_stack(SPEC, DATE)], None, _bias_fields(dates), experiment=2)


def test_assemble_drops_days_without_observations():
    dates = _days(2)
    stacks = [make_stack(SPEC, date) for date in dates]
    fields = _bias_fields(dates[:1]) + _bias_fields(dates[1:], valid=False)
    dataset = assemble(stacks, None, fields, experiment=1)
    assert dataset.dates == dates[:1]


def test_dataset_rejects_days_without_observations():
    (field,) = _bias_fields([DATE], valid=False)
    with pytest.raises(DataError):
        Dataset(days=(DayExample(inputs=make_stack(SPEC, DATE), target=field),), experiment=1)


def test_to_pixel_samples(synthetic_dataset):
    features, targets = synthetic_dataset.to_pixel_samples()
    num_valid = sum(day.target.num_valid for day in synthetic_dataset)
    assert features.shape == (num_valid, 16)
    assert targets.shape == (num_valid,)
    first = synthetic_dataset.days[0]
    row, col = np.argwhere(first.target.mask)[0]
    np.testing.assert_array_equal(features[0], first.inputs.data[:, row, col])
    assert targets[0] == first.target.values[row, col]


def test_temporal_split(synthetic_dataset):
    train_ds, eval_ds = temporal_split(synthetic_dataset, eval_year=2016)
    assert len(train_ds) == 8
    assert len(eval_ds) == 4
    assert all(date.year == 2016 for date in eval_ds.dates)
    assert not set(train_ds.dates) & set(eval_ds.dates)
    assert sorted(train_ds.dates + eval_ds.dates) == synthetic_dataset.dates


def test_temporal_split_drops_days_outside_the_months(caplog):
    dates = [
        datetime.date(2015, 7, 1),
        datetime.date(2015, 9, 1),
        datetime.date(2016, 7, 1),
        datetime.date(2016, 5, 31),
    ]
    stacks = [make_stack(SPEC, date, seed=i) for i, date in enumerate(dates)]
    dataset = assemble(stacks, None, _bias_fields(dates), experiment=1)
    with caplog.at_level(logging.WARNING):
        train_ds, eval_ds = temporal_split(dataset, eval_year=2016)
    assert train_ds.dates == [datetime.date(2015, 7, 1)]
    assert eval_ds.dates == [datetime.date(2016, 7, 1)]
    assert "dropped 2 days" in caplog.text

    train_ds, eval_ds = temporal_split(dataset, eval_year=2016, eval_months=[5, 7, 9])
    assert train_ds.dates == [datetime.date(2015, 7, 1), datetime.date(2015, 9, 1)]
    assert eval_ds.dates == [datetime.date(2016, 5, 31), datetime.date(2016, 7, 1)]


def test_temporal_split_without_eval_days(synthetic_dataset):
    with pytest.raises(EmptyEval):
        temporal_split(synthetic_dataset, eval_year=2020)
    with pytest.raises(EmptyEval):
        temporal_split(synthetic_dataset, eval_year=2016, eval_months=[9])


def test_dataset_round_trip(tmp_path, synthetic_dataset):
    save_dataset(synthetic_dataset, tmp_path / "data", extra={"note": "test"})
    loaded = load_dataset(tmp_path / "data")
    assert loaded.experiment == 1
    assert loaded.dates == synthetic_dataset.dates
    assert loaded.channels == synthetic_dataset.channels
    for original, restored in zip(synthetic_dataset, loaded):
        np.testing.assert_array_equal(restored.inputs.data, original.inputs.data.astype(np.float32))
        np.testing.assert_array_equal(restored.target.mask, original.target.mask)
        np.testing.assert_allclose(
            restored.target.values[original.target.mask],
            original.target.values[original.target.mask],
            rtol=1e-6,
        )


@pytest.mark.parametrize("manifest", ["[1, 2", "{}", '{"experiment": 1}', '{"experiment": "one", "days": []}'])
def test_load_dataset_malformed_manifest(tmp_path, synthetic_dataset, manifest):
    save_dataset(synthetic_dataset, tmp_path / "data")
    (tmp_path / "data" / "manifest.json").write_text(manifest)
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "data")


def test_load_dataset_without_manifest(tmp_path):
    with pytest.raises(IoError):
        load_dataset(tmp_path)
