import logging
import math
from typing import List, Optional, Sequence

import torch
from torch import Tensor, nn

from .layers import check_channels, conv2d, dropout, maxpool2, reflect_pad, relu, upconv2

logger = logging.getLogger(__name__)


class Conv(nn.Module):
    """Parameters of a stride-1 convolution with zero padding ("same" output size)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.empty(out_channels))

    @property
    def fan_in(self) -> int:
        return self.weight[0].numel()

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias)


class UpConv(nn.Module):
    """Parameters of a 2x2, stride-2 transposed convolution."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(in_channels, out_channels, 2, 2))
        self.bias = nn.Parameter(torch.empty(out_channels))

    @property
    def fan_in(self) -> int:
        # every output pixel sees one kernel tap per input channel
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return upconv2(x, self.weight, self.bias)


def double_conv(
    x: Tensor,
    params: Sequence[Tensor],
    rate: float,
    training: bool,
    generator: Optional[torch.Generator] = None,
) -> Tensor:
    """(conv -> dropout -> relu) twice. params holds (weight1, bias1, weight2, bias2)."""
    weight1, bias1, weight2, bias2 = params
    x = relu(dropout(conv2d(x, weight1, bias1), rate, generator=generator, training=training))
    return relu(dropout(conv2d(x, weight2, bias2), rate, generator=generator, training=training))


class DoubleConv(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, dropout_rate: float = 0.1):
        super().__init__()
        self.conv1 = Conv(in_channels, out_channels)
        self.conv2 = Conv(out_channels, out_channels)
        self.dropout_rate = dropout_rate

    @property
    def out_channels(self) -> int:
        return self.conv2.weight.shape[0]

    def forward(
        self, x: Tensor, generator: Optional[torch.Generator] = None, training: Optional[bool] = None
    ) -> Tensor:
        return double_conv(
            x,
            (self.conv1.weight, self.conv1.bias, self.conv2.weight, self.conv2.bias),
            rate=self.dropout_rate,
            training=self.training if training is None else training,
            generator=generator,
        )


class UNet(nn.Module):
    """A small U-Net that maps a [C x H x W] stack to a single [H x W] field.

    The input is reflect-padded (bottom / right) to a multiple of 2**depth, passed through depth
    encoder levels (double conv + max pool), a bottleneck double conv and depth decoder levels
    (2x2 up-convolution, concatenation with the skip connection, double conv), mapped to one
    channel by a 1x1 convolution and cropped back to H x W. Widths double per level, starting at
    base_width.

    Args:
        in_channels: Number of input channels.
        base_width: Number of feature maps of the first encoder level.
        depth: Number of encoder levels, i.e. max pooling steps.
        dropout_rate: Dropout rate after each convolution of the double conv blocks.
    """

    def __init__(self, in_channels: int, base_width: int = 32, depth: int = 2, dropout_rate: float = 0.1):
        super().__init__()
        if depth < 1:
            raise ValueError(f"depth has to be at least 1, but got {depth}")
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError(f"dropout_rate has to be in [0, 1), but got {dropout_rate}")
        self.in_channels = in_channels
        self.depth = depth
        widths = [base_width * 2**level for level in range(depth + 1)]
        self.encoders = nn.ModuleList(
            [
                DoubleConv(in_channels if level == 0 else widths[level - 1], widths[level], dropout_rate)
                for level in range(depth)
            ]
        )
        self.bottleneck = DoubleConv(widths[depth - 1], widths[depth], dropout_rate)
        # decoder levels are stored from the deepest to the shallowest one
        self.upconvs = nn.ModuleList(
            [UpConv(widths[level + 1], widths[level]) for level in reversed(range(depth))]
        )
        self.decoders = nn.ModuleList(
            [DoubleConv(2 * widths[level], widths[level], dropout_rate) for level in reversed(range(depth))]
        )
        self.output = Conv(widths[0], 1, kernel_size=1)

    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        """Uniform initialization in +-sqrt(1 / fan_in) for weights and biases."""
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, (Conv, UpConv)):
                    bound = math.sqrt(1.0 / module.fan_in)
                    for param in (module.weight, module.bias):
                        values = torch.rand(param.shape, generator=generator, dtype=torch.float64)
                        param.copy_((2.0 * values - 1.0) * bound)

    @property
    def size_multiple(self) -> int:
        return 2**self.depth

    def forward(
        self, x: Tensor, generator: Optional[torch.Generator] = None, training: Optional[bool] = None
    ) -> Tensor:
        """Maps [N x C x H x W] (or [C x H x W]) inputs to [N x H x W] (or [H x W]) outputs."""
        unbatched = x.dim() == 3
        if unbatched:
            x = x.unsqueeze(0)
        check_channels(x, self.in_channels)
        training = self.training if training is None else training
        h, w = x.shape[2:]
        x = reflect_pad(x, (-h) % self.size_multiple, (-w) % self.size_multiple)

        skips: List[Tensor] = []
        for encoder in self.encoders:
            x = encoder(x, generator=generator, training=training)
            skips.append(x)
            x = maxpool2(x)
        x = self.bottleneck(x, generator=generator, training=training)
        for upconv, decoder, skip in zip(self.upconvs, self.decoders, reversed(skips)):
            x = torch.cat([upconv(x), skip], dim=1)
            x = decoder(x, generator=generator, training=training)
        out = self.output(x)[:, 0, :h, :w]
        return out[0] if unbatched else out


def unet_forward(
    x: Tensor, unet: UNet, training: bool = False, generator: Optional[torch.Generator] = None
) -> Tensor:
    return unet(x, generator=generator, training=training)
