"""Layer primitives with hand-written backward passes.

Each primitive is a ``torch.autograd.Function`` whose ``backward`` is implemented explicitly,
so that composing them in a module only relies on autograd for bookkeeping (the chaining of
the explicit backward passes), never for deriving gradients. All functions expect batched
inputs [N x C x H x W].
"""
import logging
from typing import Optional, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor

from ozone_bias.errors import AllMasked, ChannelMismatch, OddSpatialDims, ShapeMismatch

logger = logging.getLogger(__name__)


def _check_4d(x: Tensor, name: str = "input") -> None:
    if x.dim() != 4:
        raise ShapeMismatch(f"{name} has to be of shape [N x C x H x W], but has shape {tuple(x.shape)}")


class Conv2dFunction(torch.autograd.Function):
    """Stride-1 convolution with an odd square kernel and zero padding of kernel_size // 2,
    so that the output has the spatial size of the input."""

    @staticmethod
    def forward(ctx, x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
        n, c_in, h, w = x.shape
        c_out, _, k, _ = weight.shape
        padding = k // 2
        # [N, C_in * k * k, H * W]
        columns = F.unfold(x, kernel_size=k, padding=padding)
        out = weight.reshape(c_out, -1) @ columns + bias.reshape(1, c_out, 1)
        ctx.save_for_backward(columns, weight)
        ctx.input_shape = (h, w)
        return out.reshape(n, c_out, h, w)

    @staticmethod
    def backward(ctx, grad_out: Tensor) -> Tuple[Optional[Tensor], ...]:
        columns, weight = ctx.saved_tensors
        h, w = ctx.input_shape
        n, c_out = grad_out.shape[:2]
        k = weight.shape[-1]
        grad_out = grad_out.reshape(n, c_out, h * w)
        grad_x = grad_weight = grad_bias = None
        if ctx.needs_input_grad[0]:
            grad_columns = weight.reshape(c_out, -1).t() @ grad_out
            grad_x = F.fold(grad_columns, output_size=(h, w), kernel_size=k, padding=k // 2)
        if ctx.needs_input_grad[1]:
            grad_weight = (grad_out @ columns.transpose(1, 2)).sum(dim=0).reshape(weight.shape)
        if ctx.needs_input_grad[2]:
            grad_bias = grad_out.sum(dim=(0, 2))
        return grad_x, grad_weight, grad_bias


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    _check_4d(x)
    if weight.dim() != 4 or weight.shape[2] != weight.shape[3] or weight.shape[2] % 2 == 0:
        raise ShapeMismatch(f"expected a square kernel of odd size, but got {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(
            f"input has {x.shape[1]} channels, but the kernel expects {weight.shape[1]}"
        )
    if bias.shape != (weight.shape[0],):
        raise ShapeMismatch(f"expected a bias of shape ({weight.shape[0]},), but got {tuple(bias.shape)}")
    return Conv2dFunction.apply(x, weight, bias)


class ReLUFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x: Tensor) -> Tensor:
        positive = x > 0
        ctx.save_for_backward(positive)
        return x * positive

    @staticmethod
    def backward(ctx, grad_out: Tensor) -> Tensor:
        (positive,) = ctx.saved_tensors
        # the gradient at exactly 0 is 0
        return grad_out * positive


def relu(x: Tensor) -> Tensor:
    return ReLUFunction.apply(x)


class DropoutFunction(torch.autograd.Function):
    """Inverted dropout with an explicit keep mask (already scaled by 1 / (1 - rate))."""

    @staticmethod
    def forward(ctx, x: Tensor, scaled_mask: Tensor) -> Tensor:
        ctx.save_for_backward(scaled_mask)
        return x * scaled_mask

    @staticmethod
    def backward(ctx, grad_out: Tensor) -> Tuple[Tensor, None]:
        (scaled_mask,) = ctx.saved_tensors
        return grad_out * scaled_mask, None


def dropout(
    x: Tensor, rate: float, generator: Optional[torch.Generator] = None, training: bool = True
) -> Tensor:
    """Zeroes entries with probability rate and scales the kept ones by 1 / (1 - rate) during
    training; the identity otherwise."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate has to be in [0, 1), but got {rate}")
    if not training or rate == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= rate
    return DropoutFunction.apply(x, keep.to(x.dtype) / (1.0 - rate))


class MaxPool2Function(torch.autograd.Function):
    """2x2 max pooling with stride 2. The gradient of a window goes to the first maximal entry
    in row-major window order."""

    @staticmethod
    def forward(ctx, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        windows = (
            x.reshape(n, c, h // 2, 2, w // 2, 2).permute(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        )
        # argmax returns the first maximal index
        argmax = windows.argmax(dim=-1)
        out = windows.gather(-1, argmax.unsqueeze(-1)).squeeze(-1)
        ctx.save_for_backward(argmax)
        ctx.input_shape = (n, c, h, w)
        return out

    @staticmethod
    def backward(ctx, grad_out: Tensor) -> Tensor:
        (argmax,) = ctx.saved_tensors
        n, c, h, w = ctx.input_shape
        grad_windows = torch.zeros(n, c, h // 2, w // 2, 4, dtype=grad_out.dtype, device=grad_out.device)
        grad_windows.scatter_(-1, argmax.unsqueeze(-1), grad_out.unsqueeze(-1))
        return grad_windows.reshape(n, c, h // 2, w // 2, 2, 2).permute(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def maxpool2(x: Tensor) -> Tensor:
    _check_4d(x)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise OddSpatialDims(f"max pooling needs even spatial dimensions, but got {tuple(x.shape[2:])}")
    return MaxPool2Function.apply(x)


class UpConv2Function(torch.autograd.Function):
    """Transposed convolution with a 2x2 kernel and stride 2 (no overlap between the output
    blocks of neighbouring input pixels). The kernel has the shape [C_in x C_out x 2 x 2]."""

    @staticmethod
    def forward(ctx, x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
        n, _, h, w = x.shape
        c_out = weight.shape[1]
        ctx.save_for_backward(x, weight)
        # out[n, o, 2i + a, 2j + b] = sum_c x[n, c, i, j] * weight[c, o, a, b]
        blocks = torch.einsum("ncij,coab->noiajb", x, weight)
        return blocks.reshape(n, c_out, 2 * h, 2 * w) + bias.reshape(1, c_out, 1, 1)

    @staticmethod
    def backward(ctx, grad_out: Tensor) -> Tuple[Optional[Tensor], ...]:
        x, weight = ctx.saved_tensors
        n, _, h, w = x.shape
        c_out = weight.shape[1]
        grad_blocks = grad_out.reshape(n, c_out, h, 2, w, 2)
        grad_x = grad_weight = grad_bias = None
        if ctx.needs_input_grad[0]:
            grad_x = torch.einsum("noiajb,coab->ncij", grad_blocks, weight)
        if ctx.needs_input_grad[1]:
            grad_weight = torch.einsum("ncij,noiajb->coab", x, grad_blocks)
        if ctx.needs_input_grad[2]:
            grad_bias = grad_out.sum(dim=(0, 2, 3))
        return grad_x, grad_weight, grad_bias


def upconv2(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    _check_4d(x)
    if weight.dim() != 4 or weight.shape[2:] != (2, 2) or weight.shape[0] != x.shape[1]:
        raise ShapeMismatch(
            f"expected a kernel of shape [{x.shape[1]} x C_out x 2 x 2], but got {tuple(weight.shape)}"
        )
    if bias is None:
        bias = torch.zeros(weight.shape[1], dtype=x.dtype, device=x.device)
    return UpConv2Function.apply(x, weight, bias)


class ReflectPadFunction(torch.autograd.Function):
    """Reflect padding at the bottom and right edge (without repeating the edge pixel)."""

    @staticmethod
    def forward(ctx, x: Tensor, pad_h: int, pad_w: int) -> Tensor:
        h, w = x.shape[2:]
        rows = torch.cat([torch.arange(h), h - 2 - torch.arange(pad_h)]).to(x.device)
        cols = torch.cat([torch.arange(w), w - 2 - torch.arange(pad_w)]).to(x.device)
        ctx.save_for_backward(rows, cols)
        ctx.input_shape = x.shape
        return x.index_select(2, rows).index_select(3, cols)

    @staticmethod
    def backward(ctx, grad_out: Tensor) -> Tuple[Tensor, None, None]:
        rows, cols = ctx.saved_tensors
        n, c, h, w = ctx.input_shape
        grad_cols = torch.zeros(n, c, grad_out.shape[2], w, dtype=grad_out.dtype, device=grad_out.device)
        grad_cols.index_add_(3, cols, grad_out)
        grad_x = torch.zeros(n, c, h, w, dtype=grad_out.dtype, device=grad_out.device)
        grad_x.index_add_(2, rows, grad_cols)
        return grad_x, None, None


def reflect_pad(x: Tensor, pad_h: int, pad_w: int) -> Tensor:
    _check_4d(x)
    if pad_h == 0 and pad_w == 0:
        return x
    if pad_h >= x.shape[2] or pad_w >= x.shape[3]:
        raise ShapeMismatch(
            f"reflect padding by ({pad_h}, {pad_w}) needs more than that many rows / columns, "
            f"but the input has the spatial shape {tuple(x.shape[2:])}"
        )
    return ReflectPadFunction.apply(x, pad_h, pad_w)


class MaskedMSEFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, pred: Tensor, target: Tensor, mask: Tensor) -> Tensor:
        # targets at masked cells may hold anything (even NaN), they never enter the result
        residual = torch.where(mask, pred - target, torch.zeros_like(pred))
        count = mask.sum()
        ctx.save_for_backward(residual, count)
        return (residual * residual).sum() / count

    @staticmethod
    def backward(ctx, grad_out: Tensor) -> Tuple[Tensor, None, None]:
        residual, count = ctx.saved_tensors
        return grad_out * 2.0 * residual / count, None, None


def masked_mse(pred: Tensor, target: Tensor, mask: Tensor) -> Tensor:
    """Mean squared error over the cells where mask is true."""
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ShapeMismatch(
            f"prediction {tuple(pred.shape)}, target {tuple(target.shape)} and mask "
            f"{tuple(mask.shape)} have to have the same shape"
        )
    mask = mask.to(torch.bool)
    if not bool(mask.any()):
        raise AllMasked("cannot compute a masked loss without any valid cell")
    return MaskedMSEFunction.apply(pred, target.to(pred.dtype), mask)


def check_channels(x: Tensor, expected: int) -> None:
    if x.shape[1] != expected:
        raise ChannelMismatch(f"expected {expected} input channels, but got {x.shape[1]}")
