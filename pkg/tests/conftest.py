import datetime
from typing import Optional, Sequence

import numpy as np
import pytest

from ozone_bias.grid import MOMO_CHANNELS, GridSpec, GridStack, MaskedField
from ozone_bias.synthetic import SyntheticBiasParams, synth_generate

# 8 x 12 cells
SMALL_SPEC = GridSpec(lat_min=40, lat_max=48, lon_min=0, lon_max=12)


def make_stack(
    spec: GridSpec,
    date: datetime.date,
    channels: Sequence[str] = MOMO_CHANNELS,
    seed: int = 0,
) -> GridStack:
    rng = np.random.default_rng(seed)
    data = rng.normal(size=(len(channels),) + spec.shape).astype(np.float32)
    return GridStack(spec=spec, channels=tuple(channels), data=data, date=date)


def make_field(
    spec: GridSpec,
    values: np.ndarray,
    mask: Optional[np.ndarray] = None,
    date: Optional[datetime.date] = None,
) -> MaskedField:
    values = np.asarray(values, dtype=np.float64)
    if mask is None:
        mask = np.ones(values.shape, dtype=bool)
    return MaskedField(spec=spec, values=values, mask=mask, date=date)


@pytest.fixture
def small_spec():
    return SMALL_SPEC


@pytest.fixture(scope="session")
def synthetic_dataset():
    """12 days in the summers 2014, 2015 and 2016 (4 days each) with 30 stations."""
    dataset, _ = synth_generate(
        seed=3, spec=SMALL_SPEC, n_days=12, n_stations=30, experiment=1, days_per_summer=4
    )
    return dataset


@pytest.fixture(scope="session")
def linear_dataset():
    """5 days of noiseless bias that is linear in a single input channel."""
    dataset, _ = synth_generate(
        seed=11,
        spec=SMALL_SPEC,
        n_days=5,
        n_stations=40,
        experiment=1,
        params=SyntheticBiasParams.linear_only(),
    )
    return dataset
