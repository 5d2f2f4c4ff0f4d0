import torch
from torch.optim import Optimizer

from ivector_gan_pytorch.errors import ConfigError, DivergenceError

# rmsprop, eps outside the square root
# square_avg <- decay * square_avg + (1 - decay) * g^2
# theta <- theta - lr * g / (sqrt(square_avg) + eps)

class RMSProp(Optimizer):
    def __init__(
        self,
        params,
        lr = 1e-4,
        decay = 0.9,
        eps = 1e-8
    ):
        if not lr > 0:
            raise ConfigError(f'learning rate must be positive, got {lr}')

        if not 0. < decay < 1.:
            raise ConfigError(f'decay must lie in (0, 1), got {decay}')

        if not eps > 0:
            raise ConfigError(f'eps must be positive, got {eps}')

        defaults = dict(lr = lr, decay = decay, eps = eps)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure = None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()

        params = [p for group in self.param_groups for p in group['params'] if p.grad is not None]

        # the whole step is aborted before any parameter moves

        if any(not torch.isfinite(p.grad).all() for p in params):
            raise DivergenceError('non-finite gradient, optimizer step aborted')

        for group in self.param_groups:
            lr, decay, eps = group['lr'], group['decay'], group['eps']

            for p in group['params']:
                if p.grad is None:
                    continue

                grad = p.grad
                state = self.state[p]

                if len(state) == 0:
                    state['step'] = 0
                    state['square_avg'] = torch.zeros_like(p, memory_format = torch.preserve_format)

                square_avg = state['square_avg']
                state['step'] += 1

                square_avg.mul_(decay).addcmul_(grad, grad, value = 1 - decay)
                avg = square_avg.sqrt().add_(eps)
                p.addcdiv_(grad, avg, value = -lr)

        return loss

    def square_avgs(self):
        return [self.state[p]['square_avg'] for group in self.param_groups for p in group['params'] if 'square_avg' in self.state[p]]

def rmsprop_step(net, grads, opt, lr = None):
    """ applies one update to an Mlp from hand-computed Gradients """

    if lr is not None:
        for group in opt.param_groups:
            group['lr'] = lr

    net.assign_grads(grads)

    try:
        opt.step()
    finally:
        net.zero_grad(set_to_none = True)

    return net

# wasserstein critic constraint

@torch.no_grad()
def clip_parameters(net, c):
    if not c > 0:
        raise ConfigError(f'clipping bound must be positive, got {c}')

    for param in net.parameters():
        param.clamp_(-c, c)

    return net
