"""Binary portable pixmaps (P6) of masked fields, one pixel block per grid cell, north up."""
import logging
import re
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
from matplotlib import colormaps

from ozone_bias.errors import FormatError, IoError
from ozone_bias.grid import MaskedField
from ozone_bias.io import PathLike

logger = logging.getLogger(__name__)

COLORMAP = "viridis"
MASKED_COLOR = (128, 128, 128)


def field_to_rgb(
    field: MaskedField, colormap: str = COLORMAP, masked_color: Tuple[int, int, int] = MASKED_COLOR
) -> Tuple[np.ndarray, Optional[float], Optional[float]]:
    """Maps the valid values linearly from [min, max] onto the colormap. Returns the RGB image
    [rows x cols x 3] (row 0 = north) and the value range (None for an all-masked field)."""
    rgb = np.empty(field.values.shape + (3,), dtype=np.uint8)
    rgb[...] = masked_color
    if field.num_valid == 0:
        return rgb[::-1], None, None
    valid = field.values[field.mask]
    vmin, vmax = float(valid.min()), float(valid.max())
    if vmax > vmin:
        scaled = (valid - vmin) / (vmax - vmin)
    else:
        scaled = np.full(valid.shape, 0.5)
    colors = colormaps[colormap](scaled)[:, :3]
    rgb[field.mask] = np.round(colors * 255).astype(np.uint8)
    # grid row 0 is the southern edge
    return rgb[::-1], vmin, vmax


def render_heatmap(
    field: MaskedField,
    out_path: PathLike,
    colormap: str = COLORMAP,
    masked_color: Tuple[int, int, int] = MASKED_COLOR,
    scale: int = 1,
) -> Path:
    """Writes the field as a P6 pixmap. The header carries a comment "# min=<v> max=<v>"
    (values "nan" for an all-masked field). Every cell becomes a scale x scale block."""
    if scale < 1:
        raise ValueError(f"scale has to be positive, but got {scale}")
    rgb, vmin, vmax = field_to_rgb(field, colormap=colormap, masked_color=masked_color)
    rgb = np.repeat(np.repeat(rgb, scale, axis=0), scale, axis=1)
    height, width = rgb.shape[:2]
    annotation = " ".join(
        f"{name}={'nan' if value is None else repr(value)}" for name, value in (("min", vmin), ("max", vmax))
    )
    header = f"P6\n# {annotation}\n{width} {height}\n255\n".encode("ascii")
    out_path = Path(out_path)
    try:
        with open(out_path, "wb") as f:
            f.write(header)
            f.write(np.ascontiguousarray(rgb).tobytes())
    except OSError as e:
        raise IoError(f"could not write {out_path}: {e}") from e
    logger.info(f"wrote heatmap ({annotation}) to {out_path}")
    return out_path


def read_ppm(path: PathLike) -> Tuple[np.ndarray, Dict[str, str]]:
    """Reads a P6 pixmap as written by render_heatmap. Returns the RGB image and the
    key=value pairs of its comment lines."""
    try:
        content = Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"could not read {path}: {e}") from e
    tokens = []
    comments: Dict[str, str] = {}
    pos = 0
    while len(tokens) < 4:
        end = content.index(b"\n", pos)
        line = content[pos:end].decode("ascii")
        pos = end + 1
        if line.startswith("#"):
            comments.update(re.findall(r"(\w+)=(\S+)", line))
        else:
            tokens.extend(line.split())
    if tokens[0] != "P6" or tokens[3] != "255":
        raise FormatError(f"{path} is not an 8-bit binary pixmap")
    width, height = int(tokens[1]), int(tokens[2])
    pixels = np.frombuffer(content[pos:], dtype=np.uint8)
    if len(pixels) != width * height * 3:
        raise FormatError(f"{path} has {len(pixels)} color values, but expected {width * height * 3}")
    return pixels.reshape(height, width, 3), comments
