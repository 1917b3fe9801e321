import dataclasses
import logging
from typing import Any, Dict, Optional, Sequence

import torch
from torch import Tensor
from torchmetrics import Metric

from ozone_bias.errors import ShapeMismatch
from ozone_bias.grid import MaskedField

from .station_rmse import check_aligned

logger = logging.getLogger(__name__)

EXTREME_THRESHOLD = 20.0


@dataclasses.dataclass(frozen=True)
class ExtremeSubsetMetrics:
    """Metrics over the valid pairs whose target exceeds the threshold. The error and mean
    fields are None for an empty subset."""

    threshold: float
    count: int
    rmse: Optional[float] = None
    mean_pred: Optional[float] = None
    mean_target: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExtremeSubsetMetrics":
        return cls(**data)


class ExtremeSubset(Metric):
    """Accumulates residuals and means over the valid pairs with target > threshold."""

    full_state_update = False

    def __init__(self, threshold: float = EXTREME_THRESHOLD, **kwargs) -> None:
        super().__init__(**kwargs)
        self.threshold = threshold
        self.add_state("count", default=torch.tensor(0, dtype=torch.int64), dist_reduce_fx="sum")
        for name in ("sum_squared_error", "sum_pred", "sum_target"):
            self.add_state(name, default=torch.tensor(0.0, dtype=torch.float64), dist_reduce_fx="sum")

    def update(self, prediction: Tensor, target: Tensor, mask: Tensor) -> None:
        if not (prediction.shape == target.shape == mask.shape):
            raise ShapeMismatch(
                f"prediction {tuple(prediction.shape)}, target {tuple(target.shape)} and mask "
                f"{tuple(mask.shape)} have to have the same shape"
            )
        prediction = prediction.to(torch.float64)
        target = target.to(torch.float64)
        # NaN targets at masked cells compare as False
        selected = mask.to(torch.bool) & (target > self.threshold)
        pred_sel = prediction[selected]
        target_sel = target[selected]
        self.count += selected.sum()
        self.sum_squared_error += ((pred_sel - target_sel) ** 2).sum()
        self.sum_pred += pred_sel.sum()
        self.sum_target += target_sel.sum()

    def compute(self) -> Dict[str, Tensor]:
        return {
            "count": self.count,
            "sum_squared_error": self.sum_squared_error,
            "sum_pred": self.sum_pred,
            "sum_target": self.sum_target,
        }


def extreme_subset_metrics(
    predictions: Sequence[MaskedField],
    targets: Sequence[MaskedField],
    threshold: float = EXTREME_THRESHOLD,
) -> ExtremeSubsetMetrics:
    check_aligned(predictions, targets)
    metric = ExtremeSubset(threshold=threshold)
    for prediction, target in zip(predictions, targets):
        metric.update(
            torch.from_numpy(prediction.values),
            torch.from_numpy(target.values),
            torch.from_numpy(prediction.mask & target.mask),
        )
    state = metric.compute()
    count = int(state["count"])
    if count == 0:
        logger.warning(f"no valid pair has a target above {threshold} ppb")
        return ExtremeSubsetMetrics(threshold=threshold, count=0)
    return ExtremeSubsetMetrics(
        threshold=threshold,
        count=count,
        rmse=float(torch.sqrt(state["sum_squared_error"] / count)),
        mean_pred=float(state["sum_pred"] / count),
        mean_target=float(state["sum_target"] / count),
    )
