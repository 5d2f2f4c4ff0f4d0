import math
import logging
from collections import namedtuple
from dataclasses import dataclass, field
from typing import Optional

import torch
from torch import nn
from torch.utils.data import TensorDataset, DataLoader

from einops import rearrange, repeat
from tqdm.auto import tqdm

from ivector_gan_pytorch.errors import ConfigError, DataError, DivergenceError
from ivector_gan_pytorch.mlp import init_mlp, Gradients
from ivector_gan_pytorch.optim import RMSProp, rmsprop_step, clip_parameters
from ivector_gan_pytorch.vecspace import DTYPE, check_finite, length_normalize, cosine_distance, row_norms

logger = logging.getLogger(__name__)

# constants

LossAndGrad = namedtuple('LossAndGrad', ['loss', 'grad'])

SpeakerTerm = namedtuple('SpeakerTerm', ['loss', 'grad', 'head_grads'])

GeneratorLosses = namedtuple('GeneratorLosses', ['adversarial', 'cosine', 'cross_entropy', 'combined'])

NOISE_POLICIES = ('zero', 'average')

# helpers functions

def exists(x):
    return x is not None

def default(val, d):
    if exists(val):
        return val
    return d() if callable(d) else d

def cycle(dl):
    while True:
        for data in dl:
            yield data

def log(t, eps = 1e-20):
    return torch.log(t.clamp(min = eps))

def scale_gradients(grads, factor):
    scale = lambda ts: tuple(t * factor for t in ts)
    return Gradients(scale(grads.weights), scale(grads.biases), grads.inputs * factor)

def stack_pairs(pairs):
    if len(pairs) == 0:
        raise DataError('no utterance pairs given')

    short_vecs = torch.stack([torch.as_tensor(p.short_vec, dtype = DTYPE) for p in pairs])
    long_vecs = torch.stack([torch.as_tensor(p.long_vec, dtype = DTYPE) for p in pairs])
    speakers = torch.tensor([int(p.speaker) for p in pairs], dtype = torch.long)

    if short_vecs.shape != long_vecs.shape:
        raise DataError('short and long vectors of a pair must have the same dimension')

    return short_vecs, long_vecs, speakers

# config

@dataclass
class GanConfig:
    noise_dim: int = 50
    noise_sigma: float = 0.5
    batch_size: int = 64
    lr: float = 1e-4
    clip_c: float = 0.01
    a: float = 4.
    b: float = 7.
    c: float = 1.
    n_critic: int = 5
    epochs: int = 20
    num_speakers: int = 80
    hidden_dim: int = 512
    generator_depth: int = 3
    critic_hidden_dim: int = 512
    critic_depth: int = 4
    sup_hidden_dim: Optional[int] = None   # defaults to num_speakers
    rms_decay: float = 0.9
    rms_eps: float = 1e-8
    seed: int = 0

    @property
    def loss_weights(self):
        return (self.a, self.b, self.c)

    @property
    def trains_critic(self):
        return self.a > 0

    def validate(self):
        for name in ('noise_dim', 'batch_size', 'n_critic', 'num_speakers', 'hidden_dim', 'generator_depth', 'critic_hidden_dim', 'critic_depth'):
            if getattr(self, name) < 1:
                raise ConfigError(f'{name} must be a positive integer')

        for name in ('noise_sigma', 'lr', 'clip_c', 'rms_eps'):
            if not getattr(self, name) > 0:
                raise ConfigError(f'{name} must be positive')

        if self.epochs < 0:
            raise ConfigError('epochs must be non-negative')

        if exists(self.sup_hidden_dim) and self.sup_hidden_dim < 1:
            raise ConfigError('sup_hidden_dim must be a positive integer')

        if min(self.loss_weights) < 0 or not max(self.loss_weights) > 0:
            raise ConfigError(f'loss weights must be non-negative with at least one positive, got {self.loss_weights}')

        if not 0. < self.rms_decay < 1.:
            raise ConfigError('rms_decay must lie in (0, 1)')

        return self

# models

class GanModels(nn.Module):
    """
    generator     (dim + noise_dim) -> dim, tanh output
    speaker_head  dim -> num_speakers, softmax output, the supplementary speaker classifier
    critic        2 * dim -> 1, linear output, scores [condition, candidate]
    """

    def __init__(self, generator, speaker_head, critic, *, dim, config):
        super().__init__()
        self.generator = generator
        self.speaker_head = speaker_head
        self.critic = critic
        self.dim = dim
        self.config = config

def build_models(dim, config = None):
    config = default(config, GanConfig).validate()

    if dim < 1:
        raise ConfigError('i-vector dimension must be positive')

    sup_hidden_dim = default(config.sup_hidden_dim, config.num_speakers)

    generator = init_mlp(
        (dim + config.noise_dim, *((config.hidden_dim,) * config.generator_depth), dim),
        (*(('leaky_relu',) * config.generator_depth), 'tanh'),
        seed = config.seed
    )

    speaker_head = init_mlp(
        (dim, sup_hidden_dim, config.num_speakers),
        ('leaky_relu', 'softmax'),
        seed = config.seed + 1
    )

    critic = init_mlp(
        (2 * dim, *((config.critic_hidden_dim,) * config.critic_depth), 1),
        (*(('leaky_relu',) * config.critic_depth), 'linear'),
        seed = config.seed + 2
    )

    return GanModels(generator, speaker_head, critic, dim = dim, config = config)

# noise

def sample_noise(count, config, rng = None):
    if count < 1:
        raise ConfigError('noise sample count must be positive')

    return torch.randn((count, config.noise_dim), generator = rng, dtype = DTYPE) * config.noise_sigma

# generator

def check_width(t, width, name):
    if t.ndim != 2 or t.shape[-1] != width:
        raise DataError(f'{name} must be a (batch, {width}) matrix, got shape {tuple(t.shape)}')

def g_forward(models, x_batch, z_batch):
    check_width(x_batch, models.dim, 'conditioning batch')
    check_width(z_batch, models.config.noise_dim, 'noise batch')

    if x_batch.shape[0] != z_batch.shape[0]:
        raise DataError('conditioning and noise batches differ in size')

    return models.generator(torch.cat((x_batch, z_batch), dim = -1))

# critic

def critic_scores(models, condition, candidate):
    out = models.critic(torch.cat((condition, candidate), dim = -1))
    return rearrange(out, 'b 1 -> b')

def critic_objective(models, x_batch, y_batch, yhat_batch):
    """ mean D(y|x) - mean D(yhat|x), the quantity the critic ascends """

    for t, name in ((x_batch, 'conditioning batch'), (y_batch, 'real batch'), (yhat_batch, 'generated batch')):
        check_width(t, models.dim, name)

    if not (x_batch.shape[0] == y_batch.shape[0] == yhat_batch.shape[0]):
        raise DataError('critic batches differ in size')

    with torch.no_grad():
        real = critic_scores(models, x_batch, y_batch)
        fake = critic_scores(models, x_batch, yhat_batch)

    return (real.mean() - fake.mean()).item()

def critic_loss_from_scores(scores):
    """ scores of [real; generated], (2n, 1). returns the negated objective and its gradient wrt the scores """

    n = scores.shape[0] // 2
    flat = rearrange(scores, 'b 1 -> b')
    loss = -(flat[:n].mean() - flat[n:].mean())

    upstream = torch.cat((
        torch.full((n, 1), -1. / n, dtype = DTYPE),
        torch.full((n, 1), 1. / n, dtype = DTYPE)
    ))

    return loss, upstream

@torch.no_grad()
def critic_loss_and_grads(models, x_batch, y_batch, yhat_batch):
    """ loss is the negated objective; one pass over [real; generated] """

    critic = models.critic

    inputs = torch.cat((
        torch.cat((x_batch, y_batch), dim = -1),
        torch.cat((x_batch, yhat_batch), dim = -1)
    ))

    cache = critic.forward_with_cache(inputs)
    loss, upstream = critic_loss_from_scores(cache.activations[-1])

    return LossAndGrad(loss, critic.backward(cache, upstream))

# generator loss terms, each with its gradient wrt the generated batch

@torch.no_grad()
def adversarial_term(models, x_batch, generated):
    n, dim = generated.shape
    cache = models.critic.forward_with_cache(torch.cat((x_batch, generated), dim = -1))

    loss = -cache.activations[-1].mean()
    upstream = torch.full((n, 1), -1. / n, dtype = DTYPE)

    # gradient flows through the critic, whose own parameter gradients are discarded
    critic_grads = models.critic.backward(cache, upstream)
    return LossAndGrad(loss, critic_grads.inputs[:, dim:])

def g_adversarial_loss(models, x_batch, z_batch, return_grad = False):
    with torch.no_grad():
        generated = g_forward(models, x_batch, z_batch)

    term = adversarial_term(models, x_batch, generated)
    return term if return_grad else term.loss.item()

@torch.no_grad()
def cosine_loss(generated_batch, target_batch, return_grad = False):
    """ mean over the batch of 1 - cos(generated, target) """

    if generated_batch.shape != target_batch.shape:
        raise DataError(f'generated and target batches differ in shape: {tuple(generated_batch.shape)} vs {tuple(target_batch.shape)}')

    n = generated_batch.shape[0]
    gen_norms, target_norms = row_norms(generated_batch), row_norms(target_batch)

    if (target_norms == 0).any():
        raise DataError('cosine loss target has a zero-norm row')

    if (gen_norms == 0).any():
        raise DivergenceError('generator produced a zero-norm vector')

    gen_unit = generated_batch / gen_norms.unsqueeze(-1)
    target_unit = target_batch / target_norms.unsqueeze(-1)

    cos = (gen_unit * target_unit).sum(dim = -1)
    loss = (1. - cos).mean()

    if not return_grad:
        return loss.item()

    grad = -(target_unit - cos.unsqueeze(-1) * gen_unit) / (n * gen_norms.unsqueeze(-1))
    return LossAndGrad(loss, grad)

@torch.no_grad()
def nested_cosine_loss(generated_batch, target_batch, long_index):
    """ inner average over the segments of each long utterance, then the outer average over long utterances """

    distances = cosine_distance(generated_batch, target_batch)
    _, groups = torch.unique(long_index, return_inverse = True)

    sums = torch.bincount(groups, weights = distances)
    counts = torch.bincount(groups).to(DTYPE)
    return (sums / counts).mean().item()

def cross_entropy_from_probs(probs, labels):
    """ mean negative log probability of the true class, and its gradient wrt the probabilities """

    n = probs.shape[0]
    rows = torch.arange(n)
    true_probs = probs[rows, labels]

    loss = -log(true_probs).mean()

    upstream = torch.zeros_like(probs)
    upstream[rows, labels] = -1. / (n * true_probs.clamp(min = 1e-20))
    return loss, upstream

@torch.no_grad()
def speaker_term(models, generated_batch, labels):
    head = models.speaker_head
    n, num_speakers = generated_batch.shape[0], head.dim_out

    labels = torch.as_tensor(labels, dtype = torch.long)

    if labels.shape != (n,):
        raise DataError('need exactly one speaker label per generated vector')

    if labels.numel() > 0 and (labels.min() < 0 or labels.max() >= num_speakers):
        raise DataError(f'speaker labels must lie in [0, {num_speakers})')

    cache = head.forward_with_cache(generated_batch)
    loss, upstream = cross_entropy_from_probs(cache.activations[-1], labels)

    head_grads = head.backward(cache, upstream)
    return SpeakerTerm(loss, head_grads.inputs, head_grads)

def ce_loss(models, generated_batch, labels, return_grad = False):
    term = speaker_term(models, generated_batch, labels)
    return term if return_grad else term.loss.item()

def combined_g_loss(g_adv, cos, ce, config):
    a, b, c = config.loss_weights
    return a * g_adv + (b * cos + c * ce)

@torch.no_grad()
def generator_terms(models, x_batch, generated, y_batch, labels, with_adversarial = True):
    """ all three generator objectives on one generated batch, sharing the same noise draw """

    if with_adversarial:
        adversarial = adversarial_term(models, x_batch, generated)
    else:
        adversarial = LossAndGrad(torch.zeros((), dtype = DTYPE), torch.zeros_like(generated))

    cosine = cosine_loss(generated, y_batch, return_grad = True)
    speaker = speaker_term(models, generated, labels)
    return adversarial, cosine, speaker

def generator_objective(models, x_batch, y_batch, labels, config = None):
    """ returns a loss_fn over the generated batch, (combined loss, gradient), for gradient checking """

    config = default(config, models.config)
    a, b, c = config.loss_weights

    def loss_fn(generated):
        adversarial, cosine, speaker = generator_terms(models, x_batch, generated, y_batch, labels, with_adversarial = a > 0)
        loss = combined_g_loss(adversarial.loss, cosine.loss, speaker.loss, config)
        grad = a * adversarial.grad + (b * cosine.grad + c * speaker.grad)
        return loss, grad

    return loss_fn

# training history

EpochRecord = namedtuple('EpochRecord', [
    'epoch',
    'critic_objective',
    'g_adversarial',
    'cosine',
    'cross_entropy',
    'combined',
    'heldout_cosine_distance'
])

@dataclass
class TrainHistory:
    records: list = field(default_factory = list)

    columns = EpochRecord._fields

    def append(self, record):
        assert all(math.isfinite(value) for value in record[1:]), 'history records must be finite'
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, index):
        return self.records[index]

    def __iter__(self):
        return iter(self.records)

# trainer class

class GanTrainer(object):
    def __init__(
        self,
        models,
        pairs,
        *,
        valid_pairs = None,
        on_step = None,
        show_progress = True
    ):
        super().__init__()
        self.models = models
        self.config = config = models.config
        self.on_step = on_step
        self.show_progress = show_progress

        x, y, labels = stack_pairs(pairs)

        if x.shape[-1] != models.dim:
            raise DataError(f'pairs have dimension {x.shape[-1]}, models expect {models.dim}')

        if len(x) < config.batch_size:
            raise DataError(f'need at least batch_size={config.batch_size} pairs, got {len(x)}')

        if labels.min() < 0 or labels.max() >= config.num_speakers:
            raise DataError(f'speaker labels must lie in [0, {config.num_speakers})')

        missing = config.num_speakers - len(labels.unique())

        if missing > 0:
            logger.warning(f'{missing} of {config.num_speakers} speaker classes have no training pairs')

        # held-out pairs for the per-epoch compensation read-out, training pairs if none given

        valid = stack_pairs(valid_pairs) if exists(valid_pairs) and len(valid_pairs) > 0 else (x, y, labels)
        self.valid_x, self.valid_y, _ = valid

        # dataset and dataloaders, one pass of the generator loader is an epoch

        ds = TensorDataset(x, y, labels)
        seed = config.seed

        self.dl = DataLoader(ds, batch_size = config.batch_size, shuffle = True, drop_last = True, generator = torch.Generator().manual_seed(seed + 3))
        self.critic_dl = cycle(DataLoader(ds, batch_size = config.batch_size, shuffle = True, drop_last = True, generator = torch.Generator().manual_seed(seed + 4)))

        self.noise_gen = torch.Generator().manual_seed(seed + 5)

        # optimizers, one state per network

        rms_kwargs = dict(lr = config.lr, decay = config.rms_decay, eps = config.rms_eps)

        self.opt_g = RMSProp(models.generator.parameters(), **rms_kwargs)
        self.opt_sup = RMSProp(models.speaker_head.parameters(), **rms_kwargs)
        self.opt_d = RMSProp(models.critic.parameters(), **rms_kwargs)

        self.history = TrainHistory()
        self.epoch = 0

    def noise(self, count):
        return sample_noise(count, self.config, self.noise_gen)

    def notify(self, kind):
        if exists(self.on_step):
            self.on_step(kind, self.models)

    @torch.no_grad()
    def critic_step(self, x, y):
        models = self.models

        yhat = g_forward(models, x, self.noise(len(x)))
        loss, grads = critic_loss_and_grads(models, x, y, yhat)

        rmsprop_step(models.critic, grads, self.opt_d)
        clip_parameters(models.critic, self.config.clip_c)

        self.notify('critic')
        return -loss.item()

    @torch.no_grad()
    def generator_step(self, x, y, labels):
        models, config = self.models, self.config
        a, b, c = config.loss_weights

        # fresh noise per mini-batch, shared by all three generator terms

        inputs = torch.cat((x, self.noise(len(x))), dim = -1)
        cache = models.generator.forward_with_cache(inputs)
        generated = cache.activations[-1]

        adversarial, cosine, speaker = generator_terms(models, x, generated, y, labels, with_adversarial = config.trains_critic)

        upstream = a * adversarial.grad + (b * cosine.grad + c * speaker.grad)
        generator_grads = models.generator.backward(cache, upstream)

        # joint update: the speaker head learns from the same generated batch

        rmsprop_step(models.generator, generator_grads, self.opt_g)
        rmsprop_step(models.speaker_head, scale_gradients(speaker.head_grads, c), self.opt_sup)

        self.notify('generator')

        losses = [t.item() for t in (adversarial.loss, cosine.loss, speaker.loss)]
        return GeneratorLosses(*losses, combined_g_loss(*losses, config))

    @torch.no_grad()
    def heldout_distance(self):
        zeros = torch.zeros((len(self.valid_x), self.config.noise_dim), dtype = DTYPE)
        generated = g_forward(self.models, self.valid_x, zeros)
        return cosine_distance(generated, self.valid_y).mean().item()

    def train_epoch(self):
        config = self.config
        critic_values, generator_values = [], []

        for x, y, labels in self.dl:
            if config.trains_critic:
                for _ in range(config.n_critic):
                    critic_x, critic_y, _ = next(self.critic_dl)
                    critic_values.append(self.critic_step(critic_x, critic_y))

            generator_values.append(self.generator_step(x, y, labels))

        mean = lambda values: sum(values) / len(values) if len(values) > 0 else 0.
        losses = [mean(values) for values in zip(*generator_values)]

        return EpochRecord(self.epoch, mean(critic_values), *losses, self.heldout_distance())

    def train(self):
        config = self.config

        with tqdm(initial = self.epoch, total = config.epochs, disable = not self.show_progress) as pbar:

            while self.epoch < config.epochs:
                try:
                    record = self.train_epoch()
                except DivergenceError as err:
                    raise DivergenceError(f'training diverged: {err}', epoch = self.epoch) from err

                if not all(math.isfinite(value) for value in record[1:]):
                    raise DivergenceError('training diverged: non-finite loss', epoch = self.epoch)

                self.history.append(record)
                self.epoch += 1

                pbar.set_description(f'critic: {record.critic_objective:.4f} cos: {record.cosine:.4f} ce: {record.cross_entropy:.4f} held-out: {record.heldout_cosine_distance:.4f}')
                pbar.update(1)

                logger.debug(f'epoch {record.epoch}: {record._asdict()}')

        logger.info(f'gan training complete after {self.epoch} epochs')
        return self.models, self.history

def train_gan(pairs, config = None, *, valid_pairs = None, on_step = None, show_progress = True):
    config = default(config, GanConfig).validate()

    if len(pairs) == 0:
        raise DataError('no utterance pairs given')

    dim = torch.as_tensor(pairs[0].short_vec).shape[-1]
    models = build_models(dim, config)

    if config.epochs == 0:
        return models, TrainHistory()

    trainer = GanTrainer(models, pairs, valid_pairs = valid_pairs, on_step = on_step, show_progress = show_progress)
    return trainer.train()

# test-time transformation

@dataclass
class NoisePolicy:
    kind: str = 'zero'
    num_samples: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_POLICIES:
            raise ConfigError(f'unknown noise policy {self.kind!r}, must be one of {NOISE_POLICIES}')

        if self.num_samples < 1:
            raise ConfigError('num_samples must be positive')

@torch.no_grad()
def sample_transform(models, x, rng = None):
    z = sample_noise(1, models.config, rng)
    generated = g_forward(models, rearrange(x, 'd -> 1 d'), z)
    return length_normalize(rearrange(generated, '1 d -> d'))

@torch.no_grad()
def transform_ivector(models, x, noise_policy = None, rng = None):
    policy = default(noise_policy, NoisePolicy)
    x = torch.as_tensor(x, dtype = DTYPE)

    if x.ndim != 1 or x.shape[-1] != models.dim:
        raise DataError(f'expected an i-vector of dimension {models.dim}, got shape {tuple(x.shape)}')

    check_finite(x)

    if policy.kind == 'zero':
        z = torch.zeros((1, models.config.noise_dim), dtype = DTYPE)
        generated = rearrange(g_forward(models, rearrange(x, 'd -> 1 d'), z), '1 d -> d')
        return length_normalize(generated)

    rng = default(rng, lambda: torch.Generator().manual_seed(policy.seed))
    k = policy.num_samples

    z = sample_noise(k, models.config, rng)
    generated = g_forward(models, repeat(x, 'd -> k d', k = k), z)
    return length_normalize(generated.mean(dim = 0))

@torch.no_grad()
def transform_batch(models, x_batch, noise_policy = None):
    policy = default(noise_policy, NoisePolicy)
    rng = torch.Generator().manual_seed(policy.seed)
    return torch.stack([transform_ivector(models, x, policy, rng = rng) for x in x_batch])

@torch.no_grad()
def compensation_report(models, pair_tensors):
    """ held-out cosine distances to the long targets, before and after the generator """

    x, y, long_index = pair_tensors.short_vecs, pair_tensors.long_vecs, pair_tensors.long_index
    zeros = torch.zeros((len(x), models.config.noise_dim), dtype = DTYPE)
    generated = g_forward(models, x, zeros)

    return dict(
        raw_mean = cosine_distance(x, y).mean().item(),
        raw_nested = nested_cosine_loss(x, y, long_index),
        transformed_mean = cosine_distance(generated, y).mean().item(),
        transformed_nested = nested_cosine_loss(generated, y, long_index)
    )
