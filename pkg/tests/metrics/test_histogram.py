import math

import numpy as np
import pytest

from ozone_bias.metrics import Histogram, bias_histogram
from ozone_bias.metrics.histogram import histograms_to_frame


def test_bias_histogram():
    histogram = bias_histogram([1, 1, 2], bin_width=1, value_range=(0, 3))
    assert histogram.counts.tolist() == [0, 2, 1]
    assert histogram.edges.tolist() == [0.0, 1.0, 2.0, 3.0]
    assert histogram.total == 3


def test_empty_input():
    histogram = bias_histogram([], bin_width=2.0, value_range=(-40.0, 60.0))
    assert len(histogram.counts) == 50
    assert histogram.total == 0


def test_out_of_range_values():
    histogram = bias_histogram([-41.0, -40.0, 59.9, 60.0, 75.0])
    assert histogram.underflow == 1
    assert histogram.overflow == 2
    assert histogram.counts[0] == 1
    assert histogram.counts[-1] == 1


def test_range_not_a_multiple_of_the_bin_width():
    histogram = bias_histogram([0.5, 2.9, 2.95], bin_width=1.0, value_range=(0.0, 2.95))
    assert histogram.edges.tolist() == [0.0, 1.0, 2.0, 2.95]
    assert histogram.counts.tolist() == [1, 0, 1]
    assert histogram.overflow == 1


def test_counts_are_conserved():
    values = np.random.default_rng(0).normal(10.0, 30.0, size=1000)
    histogram = bias_histogram(values)
    assert histogram.total == 1000
    assert histogram.to_frame()["count"].sum() == 1000


def test_invalid_arguments():
    with pytest.raises(ValueError):
        bias_histogram([1.0], bin_width=0.0)
    with pytest.raises(ValueError):
        bias_histogram([1.0], value_range=(5.0, 5.0))
    with pytest.raises(ValueError):
        bias_histogram([np.nan])


def test_frame_round_trip():
    histogram = bias_histogram([-50.0, 0.0, 1.0, 3.0, 100.0])
    frame = histogram.to_frame()
    assert frame["bin_lo"].iloc[0] == -math.inf
    assert frame["bin_hi"].iloc[-1] == math.inf
    restored = Histogram.from_frame(frame)
    np.testing.assert_array_equal(restored.edges, histogram.edges)
    np.testing.assert_array_equal(restored.counts, histogram.counts)
    assert (restored.underflow, restored.overflow) == (1, 1)


def test_histograms_to_frame():
    frame = histograms_to_frame(bias_histogram([0.0, 1.0]), bias_histogram([1.0, 5.0, 7.0]))
    assert list(frame.columns) == ["bin_lo", "bin_hi", "predicted", "target"]
    assert frame["predicted"].sum() == 2
    assert frame["target"].sum() == 3
    with pytest.raises(ValueError):
        histograms_to_frame(bias_histogram([0.0]), bias_histogram([0.0], bin_width=1.0))
