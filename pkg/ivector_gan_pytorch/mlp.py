import math
import logging
from bisect import bisect_right
from itertools import accumulate
from collections import namedtuple
from contextlib import contextmanager

import torch
from torch import nn

from ivector_gan_pytorch.errors import ConfigError, DataError, DivergenceError
from ivector_gan_pytorch.vecspace import DTYPE

logger = logging.getLogger(__name__)

# constants

LEAKY_RELU_ALPHA = 0.3

ACTIVATIONS = ('leaky_relu', 'tanh', 'softmax', 'linear')

RELATIVE_ERROR_FLOOR = 1e-8

ForwardCache = namedtuple('ForwardCache', ['inputs', 'pre_activations', 'activations'])

Gradients = namedtuple('Gradients', ['weights', 'biases', 'inputs'])

GradCheck = namedtuple('GradCheck', ['max_rel_error', 'checked', 'skipped'])

# leaky relu sign patterns, collected while a recorder is active

_kink_recorders = []

@contextmanager
def record_kink_patterns():
    patterns = []
    _kink_recorders.append(patterns)

    try:
        yield patterns
    finally:
        _kink_recorders.pop()

def same_patterns(a, b):
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))

# activations

def leaky_relu(z, alpha = LEAKY_RELU_ALPHA):
    return torch.where(z >= 0, z, alpha * z)

def softmax(z):
    z = z - z.amax(dim = -1, keepdim = True)
    e = z.exp()
    return e / e.sum(dim = -1, keepdim = True)

def activate(z, activation, alpha = LEAKY_RELU_ALPHA):
    if activation == 'leaky_relu':
        return leaky_relu(z, alpha)
    elif activation == 'tanh':
        return z.tanh()
    elif activation == 'softmax':
        return softmax(z)
    elif activation == 'linear':
        return z

    raise ConfigError(f'unknown activation {activation}')

def activation_backward(z, a, upstream, activation, alpha = LEAKY_RELU_ALPHA):
    if activation == 'leaky_relu':
        # subgradient at exactly 0 is alpha
        slope = torch.where(z > 0, torch.ones_like(z), torch.full_like(z, alpha))
        return upstream * slope
    elif activation == 'tanh':
        return upstream * (1. - a ** 2)
    elif activation == 'softmax':
        return a * (upstream - (upstream * a).sum(dim = -1, keepdim = True))
    elif activation == 'linear':
        return upstream

    raise ConfigError(f'unknown activation {activation}')

# dense feed-forward network with hand-written reverse mode

class Mlp(nn.Module):
    def __init__(
        self,
        layer_sizes,
        activations,
        *,
        alpha = LEAKY_RELU_ALPHA
    ):
        super().__init__()
        layer_sizes, activations = tuple(layer_sizes), tuple(activations)

        if len(layer_sizes) < 2:
            raise ConfigError('a network needs at least one layer (two layer sizes)')

        if len(activations) != len(layer_sizes) - 1:
            raise ConfigError(f'{len(layer_sizes) - 1} layers but {len(activations)} activations given')

        if any(size < 1 for size in layer_sizes):
            raise ConfigError(f'layer sizes must be positive, got {layer_sizes}')

        unknown = set(activations) - set(ACTIVATIONS)

        if unknown:
            raise ConfigError(f'unknown activations {sorted(unknown)}, must be among {ACTIVATIONS}')

        if 'softmax' in activations[:-1]:
            raise ConfigError('softmax may only be the final activation')

        self.layer_sizes = layer_sizes
        self.activations = activations
        self.alpha = alpha

        self.layers = nn.ModuleList([nn.Linear(dim_in, dim_out, dtype = DTYPE) for dim_in, dim_out in zip(layer_sizes[:-1], layer_sizes[1:])])

    @property
    def dim_in(self):
        return self.layer_sizes[0]

    @property
    def dim_out(self):
        return self.layer_sizes[-1]

    def forward_with_cache(self, x):
        if x.ndim != 2 or x.shape[-1] != self.dim_in:
            raise DataError(f'network expects input of width {self.dim_in}, got shape {tuple(x.shape)}')

        pre_activations, activations = [], []
        out = x

        for layer, activation in zip(self.layers, self.activations):
            z = layer(out)
            out = activate(z, activation, self.alpha)

            if not torch.isfinite(out).all():
                raise DivergenceError(f'non-finite activation in a {activation} layer')

            pre_activations.append(z)
            activations.append(out)

            if _kink_recorders and activation == 'leaky_relu':
                _kink_recorders[-1].append(z > 0)

        return ForwardCache(x, tuple(pre_activations), tuple(activations))

    def forward(self, x):
        return self.forward_with_cache(x).activations[-1]

    @torch.no_grad()
    def backward(self, cache, upstream):
        """
        exact gradients of a scalar loss, given d loss / d output (batch, dim_out)
        returns weight and bias gradients per layer, and d loss / d input
        """

        assert len(cache.pre_activations) == len(self.layers), 'forward cache was produced by a different network'
        assert upstream.shape == cache.activations[-1].shape, f'upstream gradient shape {tuple(upstream.shape)} does not match output {tuple(cache.activations[-1].shape)}'

        num_layers = len(self.layers)
        weight_grads, bias_grads = [None] * num_layers, [None] * num_layers

        delta = upstream

        for ind in reversed(range(num_layers)):
            layer = self.layers[ind]
            z, a = cache.pre_activations[ind], cache.activations[ind]
            a_prev = cache.activations[ind - 1] if ind > 0 else cache.inputs

            assert z.shape[-1] == layer.out_features and a_prev.shape[-1] == layer.in_features, 'forward cache was produced by a different network'

            dz = activation_backward(z, a, delta, self.activations[ind], self.alpha)

            weight_grads[ind] = dz.t() @ a_prev
            bias_grads[ind] = dz.sum(dim = 0)
            delta = dz @ layer.weight

        return Gradients(tuple(weight_grads), tuple(bias_grads), delta)

    def named_parameter_grads(self, grads):
        for ind, layer in enumerate(self.layers):
            yield f'layers.{ind}.weight', layer.weight, grads.weights[ind]
            yield f'layers.{ind}.bias', layer.bias, grads.biases[ind]

    def assign_grads(self, grads):
        for _, param, grad in self.named_parameter_grads(grads):
            assert param.shape == grad.shape, 'gradient shapes do not match the network'
            param.grad = grad.detach().clone()

    def max_abs_parameter(self):
        return max(param.detach().abs().max().item() for param in self.parameters())

def init_mlp(layer_sizes, activations, seed = 0, alpha = LEAKY_RELU_ALPHA):
    """ glorot uniform weights, zero biases """

    net = Mlp(layer_sizes, activations, alpha = alpha)
    gen = torch.Generator().manual_seed(seed)

    with torch.no_grad():
        for layer in net.layers:
            bound = math.sqrt(6. / (layer.in_features + layer.out_features))
            weight = torch.rand(layer.weight.shape, generator = gen, dtype = DTYPE) * (2 * bound) - bound
            layer.weight.copy_(weight)
            layer.bias.zero_()

    return net

# finite differences

@torch.no_grad()
def finite_diff_check(
    net,
    loss_fn,
    batch,
    *,
    eps = 1e-5,
    max_full_check = 2000,
    num_samples = 500,
    seed = 0,
    floor = RELATIVE_ERROR_FLOOR,
    return_details = False
):
    """
    loss_fn maps the network output to (loss, d loss / d output)
    relative error is |analytic - numeric| / max(floor, |analytic| + |numeric|)
    compares the analytic parameter gradients against central differences
    a parameter whose perturbation moves any leaky relu pre-activation across zero is skipped
    """

    with record_kink_patterns() as base_patterns:
        cache = net.forward_with_cache(batch)
        loss, output_grad = loss_fn(cache.activations[-1])

    if not math.isfinite(float(loss)):
        raise DivergenceError('loss is not finite')

    grads = net.backward(cache, output_grad)
    params = [(param, grad) for _, param, grad in net.named_parameter_grads(grads)]

    sizes = [param.numel() for param, _ in params]
    total = sum(sizes)

    if total <= max_full_check:
        positions = torch.arange(total)
    else:
        gen = torch.Generator().manual_seed(seed)
        positions = torch.randperm(total, generator = gen)[:max(num_samples, 500)].sort().values

    offsets = list(accumulate(sizes, initial = 0))

    def perturbed_loss(flat, index, value):
        flat[index] = value

        with record_kink_patterns() as patterns:
            perturbed = float(loss_fn(net(batch))[0])

        return perturbed, patterns

    max_rel_error, checked, skipped = 0., 0, 0

    for position in positions.tolist():
        param_index = bisect_right(offsets, position) - 1
        index = position - offsets[param_index]

        param, grad = params[param_index]
        flat = param.data.view(-1)
        original = flat[index].item()

        loss_plus, patterns_plus = perturbed_loss(flat, index, original + eps)
        loss_minus, patterns_minus = perturbed_loss(flat, index, original - eps)
        flat[index] = original

        if not (same_patterns(base_patterns, patterns_plus) and same_patterns(base_patterns, patterns_minus)):
            skipped += 1
            continue

        numeric = (loss_plus - loss_minus) / (2 * eps)
        analytic = grad.reshape(-1)[index].item()

        rel_error = abs(analytic - numeric) / max(floor, abs(analytic) + abs(numeric))
        max_rel_error = max(max_rel_error, rel_error)
        checked += 1

    logger.debug(f'finite difference check: {checked} parameters checked, {skipped} skipped at leaky relu kinks, max relative error {max_rel_error:.3e}')

    if not return_details:
        return max_rel_error

    return GradCheck(max_rel_error, checked, skipped)
