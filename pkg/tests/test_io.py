import datetime
import json

import numpy as np
import pytest

from ozone_bias.errors import FormatError, IoError
from ozone_bias.grid import REGIONS, MaskedField
from ozone_bias.io import (
    read_grid_stack,
    read_masked_field,
    split_header_line,
    stack_header_path,
    write_grid_stack,
    write_masked_field,
)
from tests.conftest import make_stack

DATE = datetime.date(2015, 8, 31)


def test_grid_stack_round_trip(tmp_path):
    stack = make_stack(REGIONS["europe"], DATE)
    path = tmp_path / "day.gstack"
    write_grid_stack(stack, path)

    header = json.loads(stack_header_path(path).read_text())
    assert header["dtype"] == "f32"
    assert header["layout"] == "C-row-major"
    assert header["date"] == "2015-08-31"
    assert path.stat().st_size == 16 * 27 * 31 * 4

    loaded = read_grid_stack(path)
    assert loaded.spec == stack.spec
    assert loaded.channels == stack.channels
    assert loaded.date == DATE
    # float32 data survives bit-exactly
    assert loaded.data.tobytes() == stack.data.tobytes()


def test_grid_stack_truncated(tmp_path):
    path = tmp_path / "day.gstack"
    write_grid_stack(make_stack(REGIONS["europe"], DATE), path)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(FormatError):
        read_grid_stack(path)


def test_grid_stack_trailing_bytes(tmp_path):
    path = tmp_path / "day.gstack"
    write_grid_stack(make_stack(REGIONS["europe"], DATE), path)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(FormatError):
        read_grid_stack(path)


def test_masked_field_round_trip(tmp_path):
    spec = REGIONS["north_america"]
    rng = np.random.default_rng(1)
    values = rng.normal(size=spec.shape).astype(np.float32).astype(np.float64)
    mask = rng.random(spec.shape) < 0.2
    field = MaskedField(spec=spec, values=values, mask=mask, date=DATE)
    path = tmp_path / "bias.mfield"
    write_masked_field(field, path)

    header, payload = split_header_line(path)
    assert header["mask_dtype"] == "u8"
    assert len(payload) == 31 * 49 * 5

    loaded = read_masked_field(path)
    assert loaded.date == DATE
    np.testing.assert_array_equal(loaded.mask, mask)
    np.testing.assert_array_equal(loaded.values[mask], values[mask])
    # masked values are stored as 0
    assert np.all(loaded.values[~mask] == 0.0)


def test_masked_field_without_date(tmp_path):
    spec = REGIONS["europe"]
    path = tmp_path / "map.mfield"
    write_masked_field(MaskedField.full(spec, np.ones(spec.shape)), path)
    assert read_masked_field(path).date is None


def test_masked_field_truncated(tmp_path):
    spec = REGIONS["europe"]
    path = tmp_path / "map.mfield"
    write_masked_field(MaskedField.full(spec, np.ones(spec.shape)), path)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(FormatError):
        read_masked_field(path)


def test_missing_header(tmp_path):
    path = tmp_path / "broken.mfield"
    path.write_bytes(b"\x00\x01\x02\n")
    with pytest.raises(FormatError):
        read_masked_field(path)


def test_write_to_missing_directory(tmp_path):
    spec = REGIONS["europe"]
    with pytest.raises(IoError):
        write_masked_field(MaskedField.full(spec, np.ones(spec.shape)), tmp_path / "missing" / "x.mfield")
    with pytest.raises(IoError):
        write_grid_stack(make_stack(spec, DATE), tmp_path / "missing" / "x.gstack")


@pytest.mark.parametrize("key", ["spec", "channels", "date"])
def test_grid_stack_header_missing_key(tmp_path, key):
    path = tmp_path / "day.gstack"
    write_grid_stack(make_stack(REGIONS["europe"], DATE), path)
    header = json.loads(stack_header_path(path).read_text())
    del header[key]
    stack_header_path(path).write_text(json.dumps(header))
    with pytest.raises(FormatError):
        read_grid_stack(path)


def test_grid_stack_header_invalid_date(tmp_path):
    path = tmp_path / "day.gstack"
    write_grid_stack(make_stack(REGIONS["europe"], DATE), path)
    header = json.loads(stack_header_path(path).read_text())
    header["date"] = "2015-13-40"
    stack_header_path(path).write_text(json.dumps(header))
    with pytest.raises(FormatError):
        read_grid_stack(path)


def test_grid_stack_without_header(tmp_path):
    path = tmp_path / "day.gstack"
    write_grid_stack(make_stack(REGIONS["europe"], DATE), path)
    stack_header_path(path).unlink()
    with pytest.raises(IoError):
        read_grid_stack(path)


def test_masked_field_header_without_spec(tmp_path):
    spec = REGIONS["europe"]
    path = tmp_path / "map.mfield"
    write_masked_field(MaskedField.full(spec, np.ones(spec.shape)), path)
    header, payload = split_header_line(path)
    del header["spec"]
    path.write_bytes(json.dumps(header).encode("utf-8") + b"\n" + payload)
    with pytest.raises(FormatError):
        read_masked_field(path)
