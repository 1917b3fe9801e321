import math

import numpy as np
import pytest
import torch

from ozone_bias.errors import ShapeMismatch
from ozone_bias.optim import Adam, AdamState, adam_step


def _reference_trajectory(p, grads, lr, weight_decay, betas=(0.9, 0.999), eps=1e-8):
    """Straight-line scalar Adam with L2 weight decay added to the gradient."""
    beta1, beta2 = betas
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        g = g + weight_decay * p
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p = p - lr * m_hat / (math.sqrt(v_hat) + eps)
    return p


def _settings(num=20, seed=0):
    rng = np.random.default_rng(seed)
    return [
        dict(
            p0=float(rng.normal()),
            grads=[float(g) for g in rng.normal(scale=10 ** rng.uniform(-3, 1), size=10)],
            lr=float(10 ** rng.uniform(-4, -1)),
            weight_decay=float(rng.choice([0.0, 1e-3, 0.1])),
        )
        for _ in range(num)
    ]


@pytest.mark.parametrize("setting", _settings(), ids=lambda setting: f"lr={setting['lr']:.2e}")
def test_matches_reference_trajectory(setting):
    params = [torch.tensor([setting["p0"]], dtype=torch.float64)]
    state = AdamState.for_params(params)
    for g in setting["grads"]:
        params, state = adam_step(
            params, [torch.tensor([g], dtype=torch.float64)], state, lr=setting["lr"],
            weight_decay=setting["weight_decay"],
        )
    expected = _reference_trajectory(setting["p0"], setting["grads"], setting["lr"], setting["weight_decay"])
    assert state.step == 10
    assert abs(params[0].item() - expected) <= 1e-12


@pytest.mark.parametrize("g", [-5.0, 0.01, 3.0])
def test_first_step_size_is_the_learning_rate(g):
    params = [torch.tensor([1.0], dtype=torch.float64)]
    new_params, _ = adam_step(
        params, [torch.tensor([g], dtype=torch.float64)], AdamState.for_params(params), lr=0.01,
        weight_decay=0.0,
    )
    assert abs(new_params[0].item() - 1.0) == pytest.approx(0.01, rel=1e-5)
    assert math.copysign(1.0, 1.0 - new_params[0].item()) == math.copysign(1.0, g)


def test_zero_gradients_leave_the_parameters_unchanged():
    params = [torch.randn(3, 4, dtype=torch.float64), torch.randn(5, dtype=torch.float64)]
    state = AdamState.for_params(params)
    current = params
    for _ in range(5):
        current, state = adam_step(current, [torch.zeros_like(p) for p in params], state, lr=0.1, weight_decay=0.0)
    for before, after in zip(params, current):
        torch.testing.assert_close(after, before, rtol=0, atol=0)


def test_adam_step_does_not_mutate_its_inputs():
    params = [torch.ones(3, dtype=torch.float64)]
    grads = [torch.full((3,), 2.0, dtype=torch.float64)]
    state = AdamState.for_params(params)
    adam_step(params, grads, state, lr=0.1, weight_decay=0.01)
    assert state.step == 0
    torch.testing.assert_close(params[0], torch.ones(3, dtype=torch.float64))
    torch.testing.assert_close(state.m[0], torch.zeros(3, dtype=torch.float64))


def test_decoupled_weight_decay():
    params = [torch.tensor([2.0], dtype=torch.float64)]
    new_params, _ = adam_step(
        params, [torch.zeros(1, dtype=torch.float64)], AdamState.for_params(params), lr=0.1,
        weight_decay=0.5, decoupled=True,
    )
    assert new_params[0].item() == pytest.approx(2.0 * (1 - 0.1 * 0.5))


def test_shape_mismatch():
    params = [torch.zeros(3)]
    with pytest.raises(ShapeMismatch):
        adam_step(params, [torch.zeros(4)], AdamState.for_params(params), lr=0.1, weight_decay=0.0)
    with pytest.raises(ShapeMismatch):
        adam_step(params, [], AdamState.for_params(params), lr=0.1, weight_decay=0.0)


@pytest.mark.parametrize("decoupled", [False, True])
def test_optimizer_matches_functional_step(decoupled):
    generator = torch.Generator().manual_seed(0)
    weight = torch.nn.Parameter(torch.randn(4, 3, generator=generator, dtype=torch.float64))
    target = torch.randn(4, 3, generator=generator, dtype=torch.float64)
    optimizer = Adam([weight], lr=0.05, weight_decay=0.01, decoupled_weight_decay=decoupled)

    params = [weight.detach().clone()]
    state = AdamState.for_params(params)
    for _ in range(8):
        grads = [2.0 * (params[0] - target)]
        params, state = adam_step(params, grads, state, lr=0.05, weight_decay=0.01, decoupled=decoupled)

        def closure():
            optimizer.zero_grad()
            loss = ((weight - target) ** 2).sum()
            loss.backward()
            return loss

        optimizer.step(closure)
    torch.testing.assert_close(weight.detach(), params[0])


def test_optimizer_validation():
    weight = torch.nn.Parameter(torch.zeros(2))
    with pytest.raises(ValueError):
        Adam([weight], lr=0.0)
    with pytest.raises(ValueError):
        Adam([weight], betas=(1.0, 0.999))
    with pytest.raises(ValueError):
        Adam([weight], weight_decay=-1.0)


def test_optimizer_skips_parameters_without_gradients():
    used = torch.nn.Parameter(torch.ones(2))
    unused = torch.nn.Parameter(torch.ones(2))
    optimizer = Adam([used, unused], lr=0.1)
    (used * 3.0).sum().backward()
    optimizer.step()
    torch.testing.assert_close(unused.detach(), torch.ones(2))
    assert torch.all(used.detach() < 1.0)
