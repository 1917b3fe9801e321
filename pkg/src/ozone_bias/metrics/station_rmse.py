import logging
from typing import Dict, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor
from torchmetrics import Metric

from ozone_bias.errors import DateMismatch, NoValidPairs, ShapeMismatch
from ozone_bias.grid import MaskedField

logger = logging.getLogger(__name__)


class StationRMSE(Metric):
    """Accumulates squared residuals per grid cell over days.

    compute() returns the per-cell temporal RMSE (NaN where a cell was never observed), the
    RMSE pooled over all valid (cell, day) pairs and the per-cell pair counts.

    Args:
        shape: The grid shape (rows, cols).
    """

    full_state_update = False
    higher_is_better = False

    def __init__(self, shape: Tuple[int, int], **kwargs) -> None:
        super().__init__(**kwargs)
        self.shape = tuple(shape)
        self.add_state(
            "sum_squared_error", default=torch.zeros(self.shape, dtype=torch.float64), dist_reduce_fx="sum"
        )
        self.add_state("count", default=torch.zeros(self.shape, dtype=torch.int64), dist_reduce_fx="sum")

    def update(self, prediction: Tensor, target: Tensor, mask: Tensor) -> None:
        if not (tuple(prediction.shape) == tuple(target.shape) == tuple(mask.shape) == self.shape):
            raise ShapeMismatch(
                f"expected prediction, target and mask of shape {self.shape}, but got "
                f"{tuple(prediction.shape)}, {tuple(target.shape)} and {tuple(mask.shape)}"
            )
        mask = mask.to(torch.bool)
        difference = prediction.to(torch.float64) - target.to(torch.float64)
        residual = torch.where(mask, difference, torch.zeros((), dtype=torch.float64))
        self.sum_squared_error += residual * residual
        self.count += mask.to(torch.int64)

    def compute(self) -> Dict[str, Tensor]:
        total = self.count.sum()
        if int(total) == 0:
            raise NoValidPairs("there is no valid (cell, day) pair to compute an RMSE on")
        observed = self.count > 0
        per_cell = torch.where(
            observed,
            torch.sqrt(self.sum_squared_error / self.count.clamp(min=1)),
            torch.full(self.shape, float("nan"), dtype=torch.float64),
        )
        overall = torch.sqrt(self.sum_squared_error.sum() / total)
        return {"per_cell": per_cell, "overall": overall, "count": self.count}


def check_aligned(predictions: Sequence[MaskedField], targets: Sequence[MaskedField]) -> None:
    if len(predictions) != len(targets):
        raise DateMismatch(f"got {len(predictions)} predicted fields for {len(targets)} target fields")
    for prediction, target in zip(predictions, targets):
        if prediction.spec != target.spec:
            raise ShapeMismatch(f"prediction and target for {target.date} are on different grids")
        if prediction.date is not None and target.date is not None and prediction.date != target.date:
            raise DateMismatch(f"prediction for {prediction.date} is paired with the target of {target.date}")


def rmse_at_stations(
    predictions: Sequence[MaskedField], targets: Sequence[MaskedField]
) -> Tuple[MaskedField, float]:
    """Per-cell RMSE over the days where the cell is observed (masked where it never is) and
    the RMSE pooled over all valid (cell, day) pairs. A pair is valid where both the
    prediction and the target are unmasked."""
    check_aligned(predictions, targets)
    if not targets:
        raise NoValidPairs("cannot compute an RMSE without any day")
    spec = targets[0].spec
    metric = StationRMSE(shape=targets[0].values.shape)
    for prediction, target in zip(predictions, targets):
        metric.update(
            torch.from_numpy(prediction.values),
            torch.from_numpy(target.values),
            torch.from_numpy(prediction.mask & target.mask),
        )
    result = metric.compute()
    per_cell = result["per_cell"].numpy()
    observed = result["count"].numpy() > 0
    rmse_map = MaskedField(spec=spec, values=np.where(observed, per_cell, 0.0), mask=observed)
    return rmse_map, float(result["overall"])
