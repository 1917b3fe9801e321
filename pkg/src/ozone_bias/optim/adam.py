import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import torch
from torch import Tensor
from torch.optim import Optimizer

from ozone_bias.errors import ShapeMismatch

logger = logging.getLogger(__name__)

BETAS = (0.9, 0.999)
EPS = 1e-8


@dataclass
class AdamState:
    """First / second moment accumulators (shaped like the parameters) and the step counter."""

    m: List[Tensor] = field(default_factory=list)
    v: List[Tensor] = field(default_factory=list)
    step: int = 0
    betas: Tuple[float, float] = BETAS
    eps: float = EPS

    @classmethod
    def for_params(
        cls, params: Sequence[Tensor], betas: Tuple[float, float] = BETAS, eps: float = EPS
    ) -> "AdamState":
        return cls(
            m=[torch.zeros_like(p) for p in params],
            v=[torch.zeros_like(p) for p in params],
            betas=betas,
            eps=eps,
        )


def adam_update(
    param: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
    step: int,
    lr: float,
    weight_decay: float,
    betas: Tuple[float, float],
    eps: float,
    decoupled: bool = False,
) -> Tuple[Tensor, Tensor, Tensor]:
    """One Adam update of a single parameter tensor with bias correction.

    Args:
        param: The current parameter value.
        grad: The gradient of the loss w.r.t. param.
        m: The first moment accumulator before this step.
        v: The second moment accumulator before this step.
        step: The (1-based) number of this step.
        lr: The learning rate.
        weight_decay: The weight decay factor. If decoupled is False (default), it is added to
            the gradient as weight_decay * param before the moment updates (classical Adam with
            L2 regularization). Otherwise, the parameter is shrunk by lr * weight_decay * param
            independently of the moments.
        betas: The exponential decay rates of the moments.
        eps: Added to the denominator.
        decoupled: See weight_decay.

    Returns:
        The new parameter value and the new moments.
    """
    beta1, beta2 = betas
    if weight_decay != 0.0 and not decoupled:
        grad = grad + weight_decay * param
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    if weight_decay != 0.0 and decoupled:
        param = param - lr * weight_decay * param
    param = param - lr * m_hat / (torch.sqrt(v_hat) + eps)
    return param, m, v


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[Tensor],
    state: AdamState,
    lr: float,
    weight_decay: float,
    decoupled: bool = False,
) -> Tuple[List[Tensor], AdamState]:
    """Functional Adam step: returns the updated parameters and a new state, the inputs are
    left untouched."""
    if len(params) != len(grads) or len(params) != len(state.m) or len(params) != len(state.v):
        raise ShapeMismatch(
            f"expected the same number of parameters, gradients and moments, but got "
            f"{len(params)}, {len(grads)}, {len(state.m)} and {len(state.v)}"
        )
    for idx, (p, g, m, v) in enumerate(zip(params, grads, state.m, state.v)):
        if not p.shape == g.shape == m.shape == v.shape:
            raise ShapeMismatch(
                f"parameter {idx} has shape {tuple(p.shape)}, but its gradient has shape "
                f"{tuple(g.shape)} and its moments have shapes {tuple(m.shape)} and {tuple(v.shape)}"
            )
    step = state.step + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        p, m, v = adam_update(
            p, g, m, v, step=step, lr=lr, weight_decay=weight_decay, betas=state.betas,
            eps=state.eps, decoupled=decoupled,
        )
        new_params.append(p)
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(m=new_m, v=new_v, step=step, betas=state.betas, eps=state.eps)


class Adam(Optimizer):
    """Adam optimizer that applies adam_update to every parameter with a gradient.

    Args:
        params: The parameters (or parameter groups) to optimize.
        lr: The learning rate.
        betas: The exponential decay rates of the moments.
        eps: Added to the denominator.
        weight_decay: The weight decay factor, see adam_update.
        decoupled_weight_decay: If True, apply the weight decay decoupled from the moments.
    """

    def __init__(
        self,
        params: Iterable,
        lr: float = 1e-3,
        betas: Tuple[float, float] = BETAS,
        eps: float = EPS,
        weight_decay: float = 0.0,
        decoupled_weight_decay: bool = False,
    ):
        if lr <= 0.0:
            raise ValueError(f"learning rate has to be positive, but got {lr}")
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ValueError(f"betas have to be in [0, 1), but got {betas}")
        if weight_decay < 0.0:
            raise ValueError(f"weight_decay must not be negative, but got {weight_decay}")
        defaults = dict(
            lr=lr,
            betas=betas,
            eps=eps,
            weight_decay=weight_decay,
            decoupled_weight_decay=decoupled_weight_decay,
        )
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure: Optional[Callable[[], Tensor]] = None) -> Optional[Tensor]:
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()

        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if len(state) == 0:
                    state["step"] = 0
                    state["m"] = torch.zeros_like(p, memory_format=torch.preserve_format)
                    state["v"] = torch.zeros_like(p, memory_format=torch.preserve_format)
                state["step"] += 1
                new_p, state["m"], state["v"] = adam_update(
                    p,
                    p.grad,
                    state["m"],
                    state["v"],
                    step=state["step"],
                    lr=group["lr"],
                    weight_decay=group["weight_decay"],
                    betas=group["betas"],
                    eps=group["eps"],
                    decoupled=group["decoupled_weight_decay"],
                )
                p.copy_(new_p)
        return loss
