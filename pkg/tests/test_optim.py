import math

import pytest
import torch
from torch import nn

from ivector_gan_pytorch.errors import ConfigError, DivergenceError
from ivector_gan_pytorch.mlp import Gradients, init_mlp
from ivector_gan_pytorch.optim import RMSProp, rmsprop_step, clip_parameters


def scalar_param(value = 0.):
    return nn.Parameter(torch.tensor([value], dtype = torch.float64))


def step_with_grad(param, opt, grad):
    param.grad = torch.tensor([grad], dtype = torch.float64)
    opt.step()
    param.grad = None


def test_first_step_matches_hand_computation():
    param = scalar_param()
    opt = RMSProp([param], lr = 0.1, decay = 0.9, eps = 1e-8)

    step_with_grad(param, opt, 1.)

    assert opt.square_avgs()[0].item() == pytest.approx(0.1)
    assert param.item() == pytest.approx(-0.1 / (math.sqrt(0.1) + 1e-8), rel = 1e-12)
    assert param.item() == pytest.approx(-0.3162, abs = 1e-4)


def test_zero_gradient_does_not_move_parameters():
    param = scalar_param(1.5)
    opt = RMSProp([param], lr = 0.1)

    step_with_grad(param, opt, 0.)
    assert param.item() == 1.5


def test_constant_gradient_steps_shrink():
    param = scalar_param()
    opt = RMSProp([param], lr = 0.1)

    deltas = []

    for _ in range(5):
        before = param.item()
        step_with_grad(param, opt, 1.)
        deltas.append(abs(param.item() - before))

    assert all(later < earlier for earlier, later in zip(deltas, deltas[1:]))


def test_step_direction_opposes_gradient():
    gen = torch.Generator().manual_seed(0)
    param = nn.Parameter(torch.zeros(50, dtype = torch.float64))
    opt = RMSProp([param], lr = 0.01)

    grad = torch.randn(50, generator = gen, dtype = torch.float64)
    param.grad = grad
    opt.step()

    moved = grad != 0
    assert torch.equal(param.detach()[moved].sign(), -grad[moved].sign())


def test_fuzzed_steps_stay_finite():
    gen = torch.Generator().manual_seed(1)
    param = nn.Parameter(torch.zeros(20, dtype = torch.float64))
    opt = RMSProp([param], lr = 1e-3)

    for _ in range(200):
        param.grad = torch.randn(20, generator = gen, dtype = torch.float64) * 10 ** torch.randint(-8, 8, (1,), generator = gen).item()
        opt.step()

    assert torch.isfinite(param).all()


def test_non_finite_gradient_aborts_without_update():
    a, b = scalar_param(1.), scalar_param(2.)
    opt = RMSProp([a, b], lr = 0.1)

    a.grad = torch.tensor([1.], dtype = torch.float64)
    b.grad = torch.tensor([float('nan')], dtype = torch.float64)

    with pytest.raises(DivergenceError):
        opt.step()

    assert a.item() == 1. and b.item() == 2.
    assert opt.square_avgs() == []


def test_invalid_hyperparameters():
    for kwargs in (dict(lr = 0.), dict(decay = 1.), dict(decay = 0.), dict(eps = 0.)):
        with pytest.raises(ConfigError):
            RMSProp([scalar_param()], **kwargs)


def test_rmsprop_step_updates_an_mlp_and_clears_grads():
    net = init_mlp([3, 2], ['linear'])
    before = net.layers[0].weight.detach().clone()

    grads = Gradients(
        (torch.ones(2, 3, dtype = torch.float64),),
        (torch.zeros(2, dtype = torch.float64),),
        None
    )

    opt = RMSProp(net.parameters(), lr = 0.1)
    rmsprop_step(net, grads, opt)

    assert torch.allclose(net.layers[0].weight, before - 0.1 / (math.sqrt(0.1) + 1e-8))
    assert all(param.grad is None for param in net.parameters())


def test_rmsprop_step_overrides_learning_rate():
    net = init_mlp([1, 1], ['linear'])
    with torch.no_grad():
        net.layers[0].weight.zero_()

    grads = Gradients((torch.ones(1, 1, dtype = torch.float64),), (torch.zeros(1, dtype = torch.float64),), None)
    rmsprop_step(net, grads, RMSProp(net.parameters(), lr = 0.1), lr = 0.2)

    assert net.layers[0].weight.item() == pytest.approx(-0.2 / math.sqrt(0.1), rel = 1e-6)


def test_clip_examples():
    net = init_mlp([2, 2], ['linear'])

    with torch.no_grad():
        net.layers[0].weight.copy_(torch.tensor([[0.5, -0.005], [-0.02, 0.01]], dtype = torch.float64))
        net.layers[0].bias.copy_(torch.tensor([-3., 0.], dtype = torch.float64))

    clip_parameters(net, 0.01)

    assert torch.equal(net.layers[0].weight, torch.tensor([[0.01, -0.005], [-0.01, 0.01]], dtype = torch.float64))
    assert torch.equal(net.layers[0].bias, torch.tensor([-0.01, 0.], dtype = torch.float64))


def test_clip_bounds_and_idempotence():
    net = init_mlp([10, 20, 1], ['leaky_relu', 'linear'], seed = 4)
    clip_parameters(net, 0.01)

    assert net.max_abs_parameter() <= 0.01

    once = [p.detach().clone() for p in net.parameters()]
    clip_parameters(net, 0.01)
    assert all(torch.equal(a, b) for a, b in zip(once, net.parameters()))


def test_clip_rejects_non_positive_bound():
    with pytest.raises(ConfigError):
        clip_parameters(init_mlp([2, 2], ['linear']), 0.)
