import logging
from dataclasses import replace

import torch

from ivector_gan_pytorch.gan import (
    GanConfig,
    build_models,
    sample_noise,
    generator_objective,
    critic_loss_from_scores,
    cross_entropy_from_probs
)

from ivector_gan_pytorch.mlp import RELATIVE_ERROR_FLOOR, finite_diff_check
from ivector_gan_pytorch.vecspace import DTYPE, length_normalize

logger = logging.getLogger(__name__)

# constants

GRADCHECK_TOLERANCE = 1e-4

GENERATOR_OBJECTIVES = dict(
    adversarial = (1., 0., 0.),
    cosine = (0., 1., 0.),
    cross_entropy = (0., 0., 1.),
    combined = (4., 7., 1.)
)

# suite

@torch.no_grad()
def run_gradcheck_suite(
    dim = 8,
    hidden_dim = 16,
    *,
    batch_size = 6,
    num_speakers = 4,
    eps = 1e-5,
    floor = RELATIVE_ERROR_FLOOR,
    seed = 0,
    return_details = False
):
    """
    central differences against the hand-written backward pass, on small networks:
    the generator under each of its objectives and their weighted sum, the speaker head under
    cross entropy, and the critic under the negated wasserstein objective.
    returns name -> max relative error
    """

    config = GanConfig(
        noise_dim = dim,
        hidden_dim = hidden_dim,
        critic_hidden_dim = hidden_dim,
        sup_hidden_dim = hidden_dim,
        num_speakers = num_speakers,
        batch_size = batch_size,
        seed = seed
    )

    models = build_models(dim, config)
    gen = torch.Generator().manual_seed(seed)

    x = length_normalize(torch.randn((batch_size, dim), generator = gen, dtype = DTYPE))
    y = length_normalize(torch.randn((batch_size, dim), generator = gen, dtype = DTYPE))
    labels = torch.randint(0, num_speakers, (batch_size,), generator = gen)
    z = sample_noise(batch_size, config, gen)

    generator_inputs = torch.cat((x, z), dim = -1)
    check = lambda net, loss_fn, batch: finite_diff_check(net, loss_fn, batch, eps = eps, floor = floor, seed = seed, return_details = True)

    results = dict()

    for name, (a, b, c) in GENERATOR_OBJECTIVES.items():
        loss_fn = generator_objective(models, x, y, labels, replace(config, a = a, b = b, c = c))
        results[f'generator/{name}'] = check(models.generator, loss_fn, generator_inputs)

    generated = models.generator(generator_inputs)
    results['speaker_head/cross_entropy'] = check(models.speaker_head, lambda probs: cross_entropy_from_probs(probs, labels), generated)

    critic_inputs = torch.cat((
        torch.cat((x, y), dim = -1),
        torch.cat((x, generated), dim = -1)
    ))

    results['critic/wasserstein'] = check(models.critic, critic_loss_from_scores, critic_inputs)

    for name, result in results.items():
        logger.info(f'{name}: max relative error {result.max_rel_error:.3e} ({result.checked} checked, {result.skipped} skipped)')

    if return_details:
        return results

    return {name: result.max_rel_error for name, result in results.items()}

def gradcheck_passes(results, tolerance = GRADCHECK_TOLERANCE):
    return all(error < tolerance for error in results.values())
