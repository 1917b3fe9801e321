"""Portable on-disk formats.

All binary payloads are little-endian. Except for grid stacks, whose JSON header lives in a
sidecar file ``<name>.gstack.json``, every file starts with a single-line JSON header that is
terminated by a newline, followed by the raw payload.
"""
import contextlib
import datetime
import json
import logging
from pathlib import Path
from typing import IO, Any, Dict, Iterator, List, Tuple, Union

import numpy as np

from ozone_bias.errors import DataError, FormatError, IoError
from ozone_bias.grid import GridSpec, GridStack, MaskedField, grid_shape

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

GRID_STACK_SUFFIX = ".gstack"
MASKED_FIELD_SUFFIX = ".mfield"
RASTER_SUFFIX = ".rast"
LAYOUT = "C-row-major"

DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


@contextlib.contextmanager
def format_errors(path: PathLike) -> Iterator[None]:
    """Turns missing or ill-typed fields of a parsed file into a FormatError."""
    try:
        yield
    except DataError:
        raise
    except (AttributeError, IndexError, KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path} is malformed: {type(e).__name__}: {e}") from e


def write_header_and_payload(path: PathLike, header: Dict[str, Any], payloads: List[bytes]) -> None:
    try:
        with open(path, "wb") as f:
            f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            for payload in payloads:
                f.write(payload)
    except OSError as e:
        raise IoError(f"could not write {path}: {e}") from e


def read_header(f: IO[bytes], path: PathLike) -> Dict[str, Any]:
    line = f.readline()
    try:
        return json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path} does not start with a JSON header line") from e


def read_array(f: IO[bytes], dtype: str, count: int, path: PathLike) -> np.ndarray:
    np_dtype = DTYPES[dtype]
    buffer = f.read(count * np_dtype.itemsize)
    if len(buffer) != count * np_dtype.itemsize:
        raise FormatError(
            f"{path} is truncated: expected {count} values of type {dtype}, "
            f"but got {len(buffer) // np_dtype.itemsize}"
        )
    return np.frombuffer(buffer, dtype=np_dtype)


def _check_dtype(header: Dict[str, Any], key: str, expected: str, path: PathLike) -> None:
    if header.get(key) != expected:
        raise FormatError(f"{path}: expected {key}={expected!r}, but got {header.get(key)!r}")


def _parse_date(value: Any) -> Any:
    return datetime.date.fromisoformat(value) if value is not None else None


def stack_header_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_grid_stack(stack: GridStack, path: PathLike) -> None:
    header = {
        "spec": stack.spec.to_dict(),
        "channels": list(stack.channels),
        "date": stack.date.isoformat(),
        "dtype": "f32",
        "layout": LAYOUT,
    }
    try:
        stack_header_path(path).write_text(json.dumps(header, sort_keys=True, indent=2))
        Path(path).write_bytes(np.ascontiguousarray(stack.data, dtype="<f4").tobytes())
    except OSError as e:
        raise IoError(f"could not write {path}: {e}") from e


def read_grid_stack(path: PathLike) -> GridStack:
    header_path = stack_header_path(path)
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{header_path} is not a valid JSON header") from e
    except OSError as e:
        raise IoError(f"could not read {header_path}: {e}") from e
    with format_errors(header_path):
        _check_dtype(header, "dtype", "f32", header_path)
        _check_dtype(header, "layout", LAYOUT, header_path)
        spec = GridSpec.from_dict(header["spec"])
        channels = tuple(header["channels"])
        date = _parse_date(header["date"])
    rows, cols = grid_shape(spec)
    try:
        with open(path, "rb") as f:
            data = read_array(f, "f32", len(channels) * rows * cols, path)
            if f.read(1):
                raise FormatError(f"{path} has trailing bytes after the payload")
    except OSError as e:
        raise IoError(f"could not read {path}: {e}") from e
    return GridStack(
        spec=spec,
        channels=channels,
        data=data.reshape(len(channels), rows, cols),
        date=date,
    )


def write_masked_field(field: MaskedField, path: PathLike) -> None:
    header = {
        "spec": field.spec.to_dict(),
        "date": field.date.isoformat() if field.date is not None else None,
        "dtype": "f32",
        "mask_dtype": "u8",
        "layout": LAYOUT,
    }
    values = np.where(field.mask, field.values, 0.0)
    write_header_and_payload(
        path,
        header,
        [
            np.ascontiguousarray(values, dtype="<f4").tobytes(),
            np.ascontiguousarray(field.mask, dtype="u1").tobytes(),
        ],
    )


def read_masked_field(path: PathLike) -> MaskedField:
    try:
        with open(path, "rb") as f:
            header = read_header(f, path)
            with format_errors(path):
                _check_dtype(header, "dtype", "f32", path)
                _check_dtype(header, "mask_dtype", "u8", path)
                spec = GridSpec.from_dict(header["spec"])
                date = _parse_date(header.get("date"))
            rows, cols = grid_shape(spec)
            values = read_array(f, "f32", rows * cols, path).reshape(rows, cols)
            mask = read_array(f, "u8", rows * cols, path).reshape(rows, cols)
    except OSError as e:
        raise IoError(f"could not read {path}: {e}") from e
    return MaskedField(spec=spec, values=values.astype(np.float64), mask=mask.astype(bool), date=date)


def split_header_line(path: PathLike) -> Tuple[Dict[str, Any], bytes]:
    """Returns the JSON header and the remaining bytes of a header-prefixed file."""
    try:
        with open(path, "rb") as f:
            header = read_header(f, path)
            return header, f.read()
    except OSError as e:
        raise IoError(f"could not read {path}: {e}") from e
