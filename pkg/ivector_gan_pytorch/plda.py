import math
import logging
from dataclasses import dataclass

import torch
from torch import nn, einsum
from torch.distributions import MultivariateNormal

from tqdm.auto import tqdm

from ivector_gan_pytorch.errors import ConfigError, DataError
from ivector_gan_pytorch.vecspace import DTYPE, as_batch, check_finite

logger = logging.getLogger(__name__)

# constants

LOG_2PI = math.log(2 * math.pi)

ORACLE_MAX_DIM = 16

# helpers

def exists(val):
    return val is not None

def symmetrize(m):
    return (m + m.t()) / 2

def cholesky_or_raise(m, what):
    factor, info = torch.linalg.cholesky_ex(m)

    if info.item() != 0:
        raise DataError(f'{what} is singular or not positive definite (insufficient data?)')

    return factor

def logdet_pd(m, what = 'covariance'):
    factor = cholesky_or_raise(m, what)
    return 2. * factor.diagonal().log().sum()

# config

@dataclass
class PldaConfig:
    q: int = 10
    iterations: int = 20
    tol: float = 1e-6
    include_shorts: bool = False   # train on the long utterances of the training speakers only
    seed: int = 0

    def validate(self):
        if self.q < 0:
            raise ConfigError('speaker factor dimension q must be non-negative')

        if self.iterations < 1:
            raise ConfigError('plda needs at least one em iteration')

        if not self.tol >= 0:
            raise ConfigError('tol must be non-negative')

        return self

# model

class PldaModel(nn.Module):
    """
    two-covariance plda: w = mean + speaker_subspace @ y + eps
    y ~ N(0, I_q) is shared by all vectors of a speaker, eps ~ N(0, residual_cov) per vector.
    the channel subspace term is absorbed into the full residual covariance.

    the scoring matrices are derived once at construction, the model is immutable afterwards
    """

    def __init__(self, mean, speaker_subspace, residual_cov):
        super().__init__()
        mean, speaker_subspace, residual_cov = map(lambda t: torch.as_tensor(t, dtype = DTYPE), (mean, speaker_subspace, residual_cov))

        dim = mean.shape[-1]

        if mean.ndim != 1 or speaker_subspace.ndim != 2 or speaker_subspace.shape[0] != dim or residual_cov.shape != (dim, dim):
            raise DataError(f'inconsistent plda shapes: mean {tuple(mean.shape)}, subspace {tuple(speaker_subspace.shape)}, residual {tuple(residual_cov.shape)}')

        if speaker_subspace.shape[1] > dim:
            raise ConfigError(f'speaker factor dimension {speaker_subspace.shape[1]} exceeds i-vector dimension {dim}')

        if not torch.allclose(residual_cov, residual_cov.t(), rtol = 0., atol = 1e-10):
            raise DataError('residual covariance is not symmetric')

        residual_cov = symmetrize(residual_cov)
        cholesky_or_raise(residual_cov, 'residual covariance')

        self.register_buffer('mean', mean)
        self.register_buffer('speaker_subspace', speaker_subspace)
        self.register_buffer('residual_cov', residual_cov)

        # scoring matrices
        # between B = V V^T, total T = B + residual
        # A = (T - B T^-1 B)^-1, Q = T^-1 - A, P = T^-1 B A

        between = self.between_cov
        total = between + residual_cov

        total_inv = symmetrize(torch.linalg.inv(total))
        schur = symmetrize(total - between @ torch.linalg.solve(total, between))
        schur_inv = symmetrize(torch.linalg.inv(schur))

        self.register_buffer('score_q', total_inv - schur_inv)
        self.register_buffer('score_p', symmetrize(total_inv @ between @ schur_inv))

        const = 0.5 * (logdet_pd(total, 'total covariance') - logdet_pd(schur, 'conditional covariance'))
        self.register_buffer('score_const', const)

    @property
    def dim(self):
        return self.mean.shape[-1]

    @property
    def q(self):
        return self.speaker_subspace.shape[-1]

    @property
    def between_cov(self):
        v = self.speaker_subspace
        return v @ v.t()

    @property
    def total_cov(self):
        return self.between_cov + self.residual_cov

    def forward(self, enroll, test):
        return plda_llr_batch(self, enroll, test)

# scoring

@torch.no_grad()
def plda_llr_batch(model, enroll, test):
    enroll, test = as_batch(enroll, model.dim), as_batch(test, model.dim)

    if enroll.shape != test.shape:
        raise DataError('enroll and test batches differ in size')

    e, t = enroll - model.mean, test - model.mean
    q, p = model.score_q, model.score_p

    quad = einsum('b i, i j, b j -> b', e, q, e) + einsum('b i, i j, b j -> b', t, q, t)
    cross = einsum('b i, i j, b j -> b', e, p, t)
    return 0.5 * quad + cross + model.score_const

def plda_llr(model, enroll, test):
    """ log p(enroll, test | same speaker) - log p(enroll, test | different speakers) """

    enroll, test = map(lambda t: torch.as_tensor(t, dtype = DTYPE), (enroll, test))

    if enroll.ndim != 1 or test.ndim != 1:
        raise DataError('plda_llr scores a single pair of i-vectors')

    if enroll.shape[-1] != model.dim or test.shape[-1] != model.dim:
        raise DataError(f'plda model has dimension {model.dim}, got {enroll.shape[-1]} and {test.shape[-1]}')

    return plda_llr_batch(model, enroll, test).item()

@torch.no_grad()
def llr_density_oracle(model, enroll, test):
    """ both hypotheses as explicit gaussian densities over the stacked pair """

    dim = model.dim

    if dim > ORACLE_MAX_DIM:
        raise ConfigError(f'density oracle is limited to dimension {ORACLE_MAX_DIM}, model has {dim}')

    enroll, test = map(lambda t: torch.as_tensor(t, dtype = DTYPE), (enroll, test))

    if enroll.shape != (dim,) or test.shape != (dim,):
        raise DataError(f'expected two i-vectors of dimension {dim}')

    for t in (enroll, test):
        check_finite(t)

    between, total = model.between_cov, model.total_cov

    same_cov = torch.cat((
        torch.cat((total, between), dim = -1),
        torch.cat((between, total), dim = -1)
    ))

    stacked = torch.cat((enroll, test)) - torch.cat((model.mean, model.mean))

    try:
        same = MultivariateNormal(torch.zeros(2 * dim, dtype = DTYPE), covariance_matrix = same_cov)
        different = MultivariateNormal(torch.zeros(dim, dtype = DTYPE), covariance_matrix = total)
    except (ValueError, RuntimeError) as err:
        raise DataError(f'joint covariance is not positive definite: {err}') from err

    log_same = same.log_prob(stacked)
    log_different = different.log_prob(enroll - model.mean) + different.log_prob(test - model.mean)
    return (log_same - log_different).item()

# training data bookkeeping

def speaker_statistics(centered, labels):
    """ per speaker vector counts and first order sums """

    speakers, inverse = torch.unique(labels, return_inverse = True)
    counts = torch.bincount(inverse, minlength = len(speakers))

    sums = torch.zeros((len(speakers), centered.shape[-1]), dtype = DTYPE)
    sums.index_add_(0, inverse, centered)
    return counts, sums

def check_training_data(vectors, labels):
    vectors = as_batch(vectors)
    labels = torch.as_tensor(labels, dtype = torch.long)

    if labels.shape != (vectors.shape[0],):
        raise DataError('need exactly one speaker label per vector')

    if not torch.isfinite(vectors).all():
        raise DataError('plda training vectors have non-finite components')

    counts = torch.bincount(torch.unique(labels, return_inverse = True)[1])

    if len(counts) < 2:
        raise DataError('plda training needs at least two speakers')

    if counts.max() < 2:
        raise DataError('every speaker has a single vector, between-speaker variability is unidentifiable')

    return vectors, labels

# likelihood

@torch.no_grad()
def log_likelihood_from_stats(centered, counts, sums, speaker_subspace, residual_cov):
    """ exact log density of all vectors, speakers independent, vectors of a speaker coupled through y """

    n, dim = centered.shape
    q = speaker_subspace.shape[-1]

    residual_inv = symmetrize(torch.linalg.inv(residual_cov))
    logdet_residual = logdet_pd(residual_cov, 'residual covariance')

    quad = einsum('n i, i j, n j ->', centered, residual_inv, centered)
    ll = -0.5 * (n * dim * LOG_2PI + n * logdet_residual + quad)

    if q == 0:
        return ll.item()

    vt_sinv = speaker_subspace.t() @ residual_inv
    vt_sinv_v = symmetrize(vt_sinv @ speaker_subspace)
    eye = torch.eye(q, dtype = DTYPE)

    for count in counts.unique().tolist():
        group = sums[counts == count]
        precision = eye + count * vt_sinv_v
        projected = group @ vt_sinv.t()

        # determinant lemma and woodbury on the stacked vectors of each speaker
        logdet = logdet_pd(precision, 'speaker posterior precision')
        solved = torch.linalg.solve(precision, projected.t()).t()

        ll = ll - 0.5 * (len(group) * logdet - (projected * solved).sum())

    return ll.item()

def plda_log_likelihood(model, vectors, labels):
    vectors, labels = check_training_data(vectors, labels)

    if vectors.shape[-1] != model.dim:
        raise DataError(f'plda model has dimension {model.dim}, vectors have {vectors.shape[-1]}')

    centered = vectors - model.mean
    counts, sums = speaker_statistics(centered, labels)
    return log_likelihood_from_stats(centered, counts, sums, model.speaker_subspace, model.residual_cov)

# em

def initial_subspace(centered, labels, counts, sums, q, seed):
    """ leading eigenvectors of the between-speaker scatter of speaker means """

    dim = centered.shape[-1]
    means = sums / counts.unsqueeze(-1).to(DTYPE)
    between = symmetrize(means.t() @ means / len(means))

    eigvals, eigvecs = torch.linalg.eigh(between)
    eigvals, eigvecs = eigvals.flip(0)[:q], eigvecs.flip(-1)[:, :q]

    subspace = eigvecs * eigvals.clamp(min = 0.).sqrt()

    # directions the speaker means do not span get small random columns
    degenerate = eigvals <= 1e-10

    if degenerate.any():
        gen = torch.Generator().manual_seed(seed)
        fill = torch.randn((dim, int(degenerate.sum())), generator = gen, dtype = DTYPE) * 1e-3
        subspace[:, degenerate] = fill

    return subspace

def initial_residual(centered, labels, counts, sums):
    means = sums / counts.unsqueeze(-1).to(DTYPE)
    _, inverse = torch.unique(labels, return_inverse = True)

    within = centered - means[inverse]
    return symmetrize(within.t() @ within / len(centered))

@torch.no_grad()
def em_step(centered, counts, sums, speaker_subspace, residual_cov):
    n = centered.shape[0]
    q = speaker_subspace.shape[-1]
    eye = torch.eye(q, dtype = DTYPE)

    residual_inv = symmetrize(torch.linalg.inv(residual_cov))
    vt_sinv = speaker_subspace.t() @ residual_inv
    vt_sinv_v = symmetrize(vt_sinv @ speaker_subspace)

    # e-step, speakers grouped by vector count share a posterior covariance

    correlation = torch.zeros((q, q), dtype = DTYPE)
    cross = torch.zeros((centered.shape[-1], q), dtype = DTYPE)

    for count in counts.unique().tolist():
        group = sums[counts == count]
        post_cov = symmetrize(torch.linalg.inv(eye + count * vt_sinv_v))
        post_mean = group @ vt_sinv.t() @ post_cov

        correlation += count * (len(group) * post_cov + post_mean.t() @ post_mean)
        cross += group.t() @ post_mean

    # m-step

    speaker_subspace = torch.linalg.solve(correlation, cross.t()).t()

    scatter = centered.t() @ centered
    residual_cov = symmetrize((scatter - speaker_subspace @ cross.t()) / n)

    return speaker_subspace, residual_cov

def relative_change(new, old):
    denom = old.norm()
    return ((new - old).norm() / denom).item() if denom > 0 else (new - old).norm().item()

def train_plda(
    vectors,
    labels,
    q = 10,
    iterations = 20,
    seed = 0,
    *,
    tol = 1e-6,
    return_history = False,
    show_progress = False
):
    PldaConfig(q = q, iterations = iterations, tol = tol, seed = seed).validate()
    vectors, labels = check_training_data(vectors, labels)

    n, dim = vectors.shape

    if q > dim:
        raise ConfigError(f'speaker factor dimension q={q} exceeds i-vector dimension {dim}')

    mean = vectors.mean(dim = 0)
    centered = vectors - mean
    counts, sums = speaker_statistics(centered, labels)

    subspace = initial_subspace(centered, labels, counts, sums, q, seed)
    residual = initial_residual(centered, labels, counts, sums)
    cholesky_or_raise(residual, 'within-speaker covariance')

    history = [log_likelihood_from_stats(centered, counts, sums, subspace, residual)]

    if q == 0:
        # no speaker factors, the maximum likelihood residual is the total covariance
        residual = symmetrize(centered.t() @ centered / n)
        cholesky_or_raise(residual, 'total covariance')
        history.append(log_likelihood_from_stats(centered, counts, sums, subspace, residual))
        iterations = 0

    with tqdm(total = iterations, disable = not show_progress) as pbar:
        for iteration in range(iterations):
            new_subspace, new_residual = em_step(centered, counts, sums, subspace, residual)
            cholesky_or_raise(new_residual, 'residual covariance')

            change = max(relative_change(new_subspace, subspace), relative_change(new_residual, residual))
            subspace, residual = new_subspace, new_residual

            ll = log_likelihood_from_stats(centered, counts, sums, subspace, residual)
            history.append(ll)

            pbar.set_description(f'log-likelihood: {ll:.4f}')
            pbar.update(1)

            if change < tol:
                logger.info(f'plda em converged after {iteration + 1} iterations')
                break

    model = PldaModel(mean, subspace, residual)
    logger.info(f'trained plda on {n} vectors of {len(counts)} speakers, q={q}, final log-likelihood {history[-1]:.4f}')

    if not return_history:
        return model

    return model, history
