import copy
import dataclasses
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from pytorch_lightning import LightningModule, Trainer
from pytorch_lightning.utilities.types import OptimizerLRScheduler
from torch import Tensor
from torch.optim import Optimizer
from torch.utils.data import DataLoader
from torch.utils.data import Dataset as TorchDataset

from ozone_bias.dataset import Dataset
from ozone_bias.errors import ChannelMismatch, EmptyDataset, FormatError
from ozone_bias.grid import GridStack, MaskedField, NormStats, apply_normalizer, fit_normalizer
from ozone_bias.io import PathLike, format_errors, split_header_line, write_header_and_payload
from ozone_bias.models.components.layers import masked_mse
from ozone_bias.models.components.unet import UNet
from ozone_bias.optim import Adam
from ozone_bias.utils import torch_threads

logger = logging.getLogger(__name__)

CHECKPOINT_SUFFIX = ".ckpt"
CHECKPOINT_FORMAT = "ozone-bias-unet"

# inputs [C, H, W], target [H, W], mask [H, W]
DayTensors = Tuple[Tensor, Tensor, Tensor]


@dataclasses.dataclass(frozen=True)
class UNetConfig:
    """Hyperparameters of the U-Net bias regressor.

    Args:
        in_channels: Number of input channels (16 for the model fields only, 39 with the
            land-use channels).
        base_width: Number of feature maps of the first encoder level, doubled per level.
        depth: Number of encoder levels.
        dropout_rate: Dropout rate after every convolution of the double conv blocks.
        lr: Initial learning rate of Adam. It stays constant as long as the training loss does
            not rise from one epoch to the next.
        weight_decay: Weight decay factor of Adam.
        epochs: Number of passes over the training days.
        seed: Seeds the weight initialization, the day order and the dropout masks.
        decoupled_weight_decay: Use decoupled instead of classical (L2) weight decay.
        lr_backoff: When the training loss at the end of an epoch is above the one of the
            previous epoch, the parameters and optimizer moments of the previous epoch are
            restored and the learning rate is multiplied by this factor. 1.0 disables the
            rollback.
    """

    in_channels: int
    base_width: int = 32
    depth: int = 2
    dropout_rate: float = 0.1
    lr: float = 1e-2
    weight_decay: float = 1e-3
    epochs: int = 200
    seed: int = 0
    decoupled_weight_decay: bool = False
    lr_backoff: float = 0.5

    def __post_init__(self):
        if self.in_channels < 1:
            raise ValueError(f"in_channels has to be positive, but got {self.in_channels}")
        if self.base_width < 1:
            raise ValueError(f"base_width has to be positive, but got {self.base_width}")
        if self.depth < 1:
            raise ValueError(f"depth has to be at least 1, but got {self.depth}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate has to be in [0, 1), but got {self.dropout_rate}")
        if self.lr <= 0.0:
            raise ValueError(f"lr has to be positive, but got {self.lr}")
        if self.weight_decay < 0.0:
            raise ValueError(f"weight_decay must not be negative, but got {self.weight_decay}")
        if self.epochs < 0:
            raise ValueError(f"epochs must not be negative, but got {self.epochs}")
        if not 0.0 < self.lr_backoff <= 1.0:
            raise ValueError(f"lr_backoff has to be in (0, 1], but got {self.lr_backoff}")

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "UNetConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown UNetConfig keys: {unknown}")
        return cls(**data)


class DayImages(TorchDataset):
    """Normalized region-day images with their masked targets as float32 tensors."""

    def __init__(self, dataset: Dataset, norm_stats: NormStats):
        self.items: List[DayTensors] = []
        for day in dataset:
            inputs = apply_normalizer(norm_stats, day.inputs).data
            mask = day.target.mask
            target = np.where(mask, day.target.values, 0.0)
            self.items.append(
                (
                    torch.from_numpy(inputs.astype(np.float32)),
                    torch.from_numpy(target.astype(np.float32)),
                    torch.from_numpy(mask.copy()),
                )
            )

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, idx: int) -> DayTensors:
        return self.items[idx]


class UNetBiasRegressor(LightningModule):
    """Predicts the model bias field of a region-day from its (normalized) input stack.

    Training minimizes the masked MSE over the observed cells with one optimizer step per
    region-day image. At the end of every epoch, the masked MSE over monitored_days in
    evaluation mode (without dropout) is appended to history. If it is above the previous
    value, the parameters and optimizer moments of the previous epoch are restored and the
    learning rate is multiplied by config.lr_backoff, so history never increases. Without
    monitored days, the mean of the step losses of the epoch is recorded instead.

    Args:
        config: The hyperparameters.
        channels: The input channel names, in stack order.
        norm_stats: The normalization statistics of the training inputs. Required for
            predict_field.
    """

    def __init__(
        self,
        config: UNetConfig,
        channels: Sequence[str],
        norm_stats: Optional[NormStats] = None,
    ):
        super().__init__()
        self.save_hyperparameters(ignore=["norm_stats"])
        if len(channels) != config.in_channels:
            raise ChannelMismatch(
                f"config expects {config.in_channels} input channels, but got {len(channels)}: "
                f"{tuple(channels)}"
            )
        self.config = config
        self.channels = tuple(channels)
        self.norm_stats = norm_stats
        self.history: List[float] = []
        self.initial_loss: Optional[float] = None
        self.monitored_days: Sequence[DayTensors] = ()
        self._epoch_losses: List[float] = []
        self._snapshot: Optional[Dict[str, Any]] = None

        self.unet = UNet(
            in_channels=config.in_channels,
            base_width=config.base_width,
            depth=config.depth,
            dropout_rate=config.dropout_rate,
        )
        # one stream for the initialization and, afterwards, the dropout masks
        self.generator = torch.Generator().manual_seed(config.seed)
        self.unet.reset_parameters(generator=self.generator)

    def forward(self, inputs: Tensor) -> Tensor:
        return self.unet(inputs, generator=self.generator)

    @torch.no_grad()
    def monitored_loss(self) -> float:
        """Mean masked MSE over the monitored days, in evaluation mode."""
        losses = [
            masked_mse(self.unet(inputs, training=False), target, mask).item()
            for inputs, target, mask in self.monitored_days
        ]
        return float(np.mean(losses))

    def _optimizer(self) -> Optimizer:
        return self.trainer.optimizers[0]

    def _take_snapshot(self) -> Dict[str, Any]:
        return {
            "unet": copy.deepcopy(self.unet.state_dict()),
            "optimizer": copy.deepcopy(self._optimizer().state_dict()),
        }

    def training_step(self, batch: DayTensors, batch_idx: int) -> Tensor:
        inputs, target, mask = batch
        prediction = self(inputs)
        loss = masked_mse(prediction, target, mask)
        self.log("loss/train", loss, on_step=True, on_epoch=True, prog_bar=True, batch_size=1)
        self._epoch_losses.append(loss.item())
        return loss

    def on_train_start(self) -> None:
        if self.monitored_days:
            if self.initial_loss is None:
                self.initial_loss = self.monitored_loss()
            self._snapshot = self._take_snapshot()

    def on_train_epoch_end(self) -> None:
        epoch = len(self.history) + 1
        step_loss = float(np.mean(self._epoch_losses))
        self._epoch_losses = []
        if not self.monitored_days:
            self.history.append(step_loss)
            logger.info(f"epoch {epoch}/{self.config.epochs}: mean training loss {step_loss:.6f}")
            return
        loss = self.monitored_loss()
        previous = self.history[-1] if self.history else self.initial_loss
        # not-less-or-equal also catches a NaN loss
        if self.config.lr_backoff < 1.0 and not loss <= previous:
            optimizer = self._optimizer()
            lr = optimizer.param_groups[0]["lr"] * self.config.lr_backoff
            self.unet.load_state_dict(self._snapshot["unet"])
            optimizer.load_state_dict(self._snapshot["optimizer"])
            for group in optimizer.param_groups:
                group["lr"] = lr
            logger.info(
                f"epoch {epoch}: training loss rose from {previous:.6f} to {loss:.6f}, restored "
                f"the previous parameters and reduced the learning rate to {lr:.3g}"
            )
            loss = previous
        self._snapshot = self._take_snapshot()
        self.history.append(loss)
        self.log("loss/epoch", loss, batch_size=1)
        logger.info(
            f"epoch {epoch}/{self.config.epochs}: training loss {loss:.6f} "
            f"(mean step loss {step_loss:.6f})"
        )

    def configure_optimizers(self) -> OptimizerLRScheduler:
        return Adam(
            self.parameters(),
            lr=self.config.lr,
            weight_decay=self.config.weight_decay,
            decoupled_weight_decay=self.config.decoupled_weight_decay,
        )

    def predict_field(self, stack: GridStack) -> MaskedField:
        """Predicts the bias field of a single (unnormalized) input stack in evaluation mode."""
        if self.norm_stats is None:
            raise ValueError("predict_field requires normalization statistics")
        if stack.channels != self.channels:
            raise ChannelMismatch(f"expected the channels {self.channels}, but got {stack.channels}")
        inputs = torch.from_numpy(apply_normalizer(self.norm_stats, stack).data.astype(np.float32))
        was_training = self.training
        self.eval()
        try:
            with torch_threads(1), torch.no_grad():
                prediction = self.unet(inputs, training=False)
        finally:
            self.train(was_training)
        return MaskedField.full(stack.spec, prediction.double().numpy(), date=stack.date)

    def to_checkpoint(self) -> "ModelCheckpoint":
        return ModelCheckpoint(
            config=self.config,
            channels=self.channels,
            norm_stats=self.norm_stats,
            history=tuple(self.history),
            parameters={
                name: param.detach().to(torch.float32).numpy().copy()
                for name, param in self.unet.named_parameters()
            },
            initial_loss=self.initial_loss,
        )


@dataclasses.dataclass(frozen=True, eq=False)
class ModelCheckpoint:
    """Everything needed to rebuild a trained U-Net regressor: the configuration, the input
    channels, the normalization statistics, the per-epoch training loss and all parameters
    (float32, in declaration order). initial_loss is the training loss before the first epoch."""

    config: UNetConfig
    channels: Tuple[str, ...]
    norm_stats: NormStats
    history: Tuple[float, ...]
    parameters: Dict[str, np.ndarray]
    initial_loss: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "history", tuple(float(loss) for loss in self.history))
        if self.initial_loss is not None:
            object.__setattr__(self, "initial_loss", float(self.initial_loss))
        expected = {
            name: tuple(param.shape)
            for name, param in UNet(
                in_channels=self.config.in_channels,
                base_width=self.config.base_width,
                depth=self.config.depth,
                dropout_rate=self.config.dropout_rate,
            ).named_parameters()
        }
        got = {name: tuple(np.shape(values)) for name, values in self.parameters.items()}
        if list(expected.items()) != list(got.items()):
            raise FormatError(
                f"parameters do not match the architecture of the configuration {self.config}"
            )

    @property
    def num_parameters(self) -> int:
        return sum(int(np.prod(values.shape)) for values in self.parameters.values())

    def to_model(self) -> UNetBiasRegressor:
        model = UNetBiasRegressor(config=self.config, channels=self.channels, norm_stats=self.norm_stats)
        state = {
            f"unet.{name}": torch.from_numpy(np.array(values)) for name, values in self.parameters.items()
        }
        model.load_state_dict(state)
        model.history = list(self.history)
        model.initial_loss = self.initial_loss
        return model

    def predict_field(self, stack: GridStack) -> MaskedField:
        return self.to_model().predict_field(stack)

    def predict(self, dataset: Dataset) -> List[MaskedField]:
        model = self.to_model()
        return [model.predict_field(day.inputs) for day in dataset]

    def save(self, path: PathLike) -> Path:
        path = Path(path)
        header = {
            "format": CHECKPOINT_FORMAT,
            "config": self.config.to_dict(),
            "channels": list(self.channels),
            "norm_stats": self.norm_stats.to_dict(),
            "history": list(self.history),
            "initial_loss": self.initial_loss,
            "parameters": [[name, list(values.shape)] for name, values in self.parameters.items()],
            "dtype": "f32",
        }
        payloads = [
            np.ascontiguousarray(values, dtype="<f4").tobytes() for values in self.parameters.values()
        ]
        write_header_and_payload(path, header, payloads)
        logger.info(f"wrote U-Net checkpoint with {self.num_parameters} parameters to {path}")
        return path

    @classmethod
    def load(cls, path: PathLike) -> "ModelCheckpoint":
        header, payload = split_header_line(path)
        if len(payload) % 4:
            raise FormatError(f"{path}: payload is not a whole number of f32 values")
        buffer = np.frombuffer(payload, dtype="<f4")
        parameters: Dict[str, np.ndarray] = {}
        offset = 0
        with format_errors(path):
            if header.get("format") != CHECKPOINT_FORMAT:
                raise FormatError(f"{path} is not a U-Net checkpoint (format: {header.get('format')})")
            for name, shape in header["parameters"]:
                size = int(np.prod(shape))
                if offset + size > len(buffer):
                    raise FormatError(f"{path} is truncated: parameter {name} is incomplete")
                parameters[name] = buffer[offset : offset + size].reshape(shape).astype(np.float32)
                offset += size
            if offset != len(buffer):
                raise FormatError(f"{path} has {len(buffer) - offset} trailing values")
            return cls(
                config=UNetConfig.from_dict(header["config"]),
                channels=tuple(header["channels"]),
                norm_stats=NormStats.from_dict(header["norm_stats"]),
                history=tuple(header["history"]),
                parameters=parameters,
                initial_loss=header.get("initial_loss"),
            )


def train(ds: Dataset, config: UNetConfig) -> ModelCheckpoint:
    """Trains a U-Net bias regressor on all days of ds.

    Normalization statistics are fitted on the inputs of ds. Every epoch visits the days in a
    seeded random order and makes one optimizer step per day, the training loss is monitored
    on all days of ds. Torch runs single-threaded, so the result only depends on the data and
    the configuration.
    """
    if len(ds) == 0:
        raise EmptyDataset("cannot train on a dataset without any day")
    if len(ds.channels) != config.in_channels:
        raise ChannelMismatch(
            f"config expects {config.in_channels} input channels, but the dataset has "
            f"{len(ds.channels)}"
        )
    norm_stats = fit_normalizer([day.inputs for day in ds])
    with torch_threads(1):
        model = UNetBiasRegressor(config=config, channels=ds.channels, norm_stats=norm_stats)
        images = DayImages(ds, norm_stats)
        model.monitored_days = images.items
        model.initial_loss = model.monitored_loss()
        if config.epochs > 0:
            loader = DataLoader(
                images,
                batch_size=1,
                shuffle=True,
                generator=torch.Generator().manual_seed(config.seed),
            )
            trainer = Trainer(
                max_epochs=config.epochs,
                accelerator="cpu",
                devices=1,
                logger=False,
                enable_checkpointing=False,
                enable_progress_bar=False,
                enable_model_summary=False,
                use_distributed_sampler=False,
                deterministic=True,
            )
            logger.info(
                f"training U-Net on {len(ds)} days with {config.in_channels} channels for "
                f"{config.epochs} epochs"
            )
            trainer.fit(model, train_dataloaders=loader)
        else:
            logger.warning("epochs=0: returning the initialized model")
    return model.to_checkpoint()
