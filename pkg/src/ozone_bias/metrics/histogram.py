import dataclasses
import logging
import math
from typing import Any, Dict, Iterable, Tuple

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

BIN_WIDTH = 2.0
HISTOGRAM_RANGE = (-40.0, 60.0)


@dataclasses.dataclass(frozen=True, eq=False)
class Histogram:
    """Counts over the half-open bins [edges[i], edges[i + 1]) plus the number of values
    below (underflow) and at or above (overflow) the range."""

    edges: np.ndarray
    counts: np.ndarray
    underflow: int = 0
    overflow: int = 0

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.underflow + self.overflow

    def to_dict(self) -> Dict[str, Any]:
        return {
            "edges": self.edges.tolist(),
            "counts": self.counts.tolist(),
            "underflow": self.underflow,
            "overflow": self.overflow,
        }

    def to_frame(self) -> pd.DataFrame:
        """One row per bin framed by an underflow row (-inf, lo) and an overflow row
        [hi, inf), so that the count column sums to the number of values."""
        return pd.DataFrame(
            {
                "bin_lo": np.concatenate([[-math.inf], self.edges]),
                "bin_hi": np.concatenate([self.edges, [math.inf]]),
                "count": np.concatenate([[self.underflow], self.counts, [self.overflow]]),
            }
        )

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, column: str = "count") -> "Histogram":
        counts = frame[column].to_numpy(dtype=np.int64)
        return cls(
            edges=frame["bin_hi"].to_numpy(dtype=np.float64)[:-1],
            counts=counts[1:-1],
            underflow=int(counts[0]),
            overflow=int(counts[-1]),
        )


def bias_histogram(
    values: Iterable[float],
    bin_width: float = BIN_WIDTH,
    value_range: Tuple[float, float] = HISTOGRAM_RANGE,
) -> Histogram:
    """Bins values into [lo + i * bin_width, lo + (i + 1) * bin_width). The last bin ends at
    hi even if the range is not a multiple of bin_width.

    >>> bias_histogram([1, 1, 2], bin_width=1, value_range=(0, 3)).counts.tolist()
    [0, 2, 1]
    """
    if bin_width <= 0:
        raise ValueError(f"bin_width has to be positive, but got {bin_width}")
    lo, hi = value_range
    if not lo < hi:
        raise ValueError(f"expected a range (lo, hi) with lo < hi, but got {value_range}")
    values = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=np.float64)
    values = values.ravel()
    if not np.all(np.isfinite(values)):
        raise ValueError("histogram values have to be finite")
    num_bins = math.ceil((hi - lo) / bin_width)
    edges = np.minimum(lo + bin_width * np.arange(num_bins + 1), hi)
    below = values < lo
    above = values >= hi
    inside = values[~below & ~above]
    # rounding may push values just below hi into a non-existing bin
    bins = np.clip(np.floor((inside - lo) / bin_width).astype(np.int64), 0, num_bins - 1)
    counts = np.bincount(bins, minlength=num_bins)
    return Histogram(edges=edges, counts=counts, underflow=int(below.sum()), overflow=int(above.sum()))


def histograms_to_frame(predicted: Histogram, target: Histogram) -> pd.DataFrame:
    """Predicted and target counts side by side (the histograms have to share their edges)."""
    if not np.array_equal(predicted.edges, target.edges):
        raise ValueError("histograms have different bin edges")
    frame = predicted.to_frame().rename(columns={"count": "predicted"})
    frame["target"] = target.to_frame()["count"]
    return frame
