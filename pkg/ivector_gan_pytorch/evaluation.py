import math
import logging
from collections import namedtuple
from dataclasses import dataclass
from typing import Optional

import torch

from ivector_gan_pytorch.errors import ConfigError, DataError
from ivector_gan_pytorch.gan import NoisePolicy, transform_ivector
from ivector_gan_pytorch.plda import plda_llr_batch
from ivector_gan_pytorch.vecspace import DTYPE

logger = logging.getLogger(__name__)

# constants

SCORING_MODES = ('baseline', 'long-short', 'short-short')

DetPoint = namedtuple('DetPoint', ['threshold', 'p_fa', 'p_miss'])

ErrorRates = namedtuple('ErrorRates', ['thresholds', 'p_miss', 'p_fa'])

ConditionResult = namedtuple('ConditionResult', ['scores', 'eer', 'min_dcf'])

# helpers

def exists(val):
    return val is not None

def default(val, d):
    if exists(val):
        return val
    return d() if callable(d) else d

# types

@dataclass
class DcfParams:
    c_miss: float = 10.
    c_fa: float = 1.
    p_target: float = 0.01

    def validate(self):
        if not (self.c_miss > 0 and self.c_fa > 0):
            raise ConfigError('detection costs must be positive')

        if not 0. < self.p_target < 1.:
            raise ConfigError(f'p_target must lie in (0, 1), got {self.p_target}')

        return self

    @property
    def normalizer(self):
        return min(self.c_miss * self.p_target, self.c_fa * (1. - self.p_target))

@dataclass
class ScoredTrialSet:
    scores: torch.Tensor
    is_target: torch.Tensor
    condition: str = ''
    enroll_refs: Optional[list] = None
    test_refs: Optional[list] = None

    def __post_init__(self):
        self.scores = torch.as_tensor(self.scores, dtype = DTYPE).reshape(-1)
        self.is_target = torch.as_tensor(self.is_target, dtype = torch.bool).reshape(-1)

        if self.scores.shape != self.is_target.shape:
            raise DataError('need exactly one target flag per score')

        if not torch.isfinite(self.scores).all():
            raise DataError('scores must be finite')

        if not self.is_target.any() or self.is_target.all():
            raise DataError('a scored trial set needs at least one target and one nontarget trial')

        for refs in (self.enroll_refs, self.test_refs):
            if exists(refs) and len(refs) != len(self.scores):
                raise DataError('trial references do not match the number of scores')

    @classmethod
    def from_entries(cls, entries, condition = ''):
        scores, is_target = zip(*entries)
        return cls(torch.tensor(scores, dtype = DTYPE), torch.tensor(is_target), condition = condition)

    def __len__(self):
        return len(self.scores)

    @property
    def target_scores(self):
        return self.scores[self.is_target]

    @property
    def nontarget_scores(self):
        return self.scores[~self.is_target]

    def entries(self):
        return list(zip(self.scores.tolist(), self.is_target.tolist()))

# threshold sweep

def error_rates(s):
    """
    accept iff score >= threshold. thresholds are the distinct scores ascending, then +inf.
    p_miss counts targets strictly below, p_fa nontargets at or above
    """

    targets = s.target_scores.sort().values
    nontargets = s.nontarget_scores.sort().values

    thresholds = torch.cat((s.scores.unique(sorted = True), torch.tensor([math.inf], dtype = DTYPE)))

    misses = torch.searchsorted(targets, thresholds, side = 'left')
    false_alarms = len(nontargets) - torch.searchsorted(nontargets, thresholds, side = 'left')

    p_miss = misses.to(DTYPE) / len(targets)
    p_fa = false_alarms.to(DTYPE) / len(nontargets)
    return ErrorRates(thresholds, p_miss, p_fa)

def eer_index(rates):
    # argmin returns the first minimizer, the lowest threshold on ties
    gap = (rates.p_miss - rates.p_fa).abs()
    return int(gap.argmin())

def compute_eer(s):
    rates = error_rates(s)
    index = eer_index(rates)
    return ((rates.p_miss[index] + rates.p_fa[index]) / 2).item()

def dcf_curve(rates, p):
    p = default(p, DcfParams).validate()
    cost = p.c_miss * rates.p_miss * p.p_target + p.c_fa * rates.p_fa * (1. - p.p_target)
    return cost / p.normalizer

def compute_min_dcf(s, p = None):
    return dcf_curve(error_rates(s), p).min().item()

def dcf_at_eer(s, p = None):
    rates = error_rates(s)
    return dcf_curve(rates, p)[eer_index(rates)].item()

def det_points(s):
    rates = error_rates(s)
    return [DetPoint(*values) for values in zip(rates.thresholds.tolist(), rates.p_fa.tolist(), rates.p_miss.tolist())]

# fusion

def normalize_scores(scores):
    centered = scores - scores.mean()
    std = centered.pow(2).mean().sqrt()
    return centered / std if std > 0 else centered

def check_aligned(base, other):
    if len(base) != len(other) or not torch.equal(base.is_target, other.is_target):
        raise DataError('score sets to fuse are not aligned: trial counts or target flags differ')

    for name in ('enroll_refs', 'test_refs'):
        a, b = getattr(base, name), getattr(other, name)

        if exists(a) and exists(b) and list(a) != list(b):
            raise DataError(f'score sets to fuse are not aligned: {name} differ')

def fuse_scores(base, other, w_base = 0.7, w_other = 0.3, *, raw = False):
    if w_base < 0 or w_other < 0 or not (w_base + w_other) > 0:
        raise ConfigError(f'fusion weights must be non-negative and not both zero, got ({w_base}, {w_other})')

    check_aligned(base, other)

    total = w_base + w_other
    w_base, w_other = w_base / total, w_other / total

    norm = (lambda t: t) if raw else normalize_scores
    fused = w_base * norm(base.scores) + w_other * norm(other.scores)

    return ScoredTrialSet(
        fused,
        base.is_target.clone(),
        condition = base.condition,
        enroll_refs = default(base.enroll_refs, other.enroll_refs),
        test_refs = default(base.test_refs, other.test_refs)
    )

# trial conditions

def evaluate_condition(
    corpus,
    trials,
    plda,
    models = None,
    mode = 'baseline',
    *,
    noise_policy = None,
    dcf = None
):
    if mode not in SCORING_MODES:
        raise ConfigError(f'unknown scoring mode {mode!r}, must be one of {SCORING_MODES}')

    transforms = mode != 'baseline'

    if transforms and not exists(models):
        raise ConfigError(f'scoring mode {mode!r} needs a trained generator')

    if transforms and trials.mode != mode:
        raise DataError(f'scoring mode {mode!r} does not match {trials.mode!r} trials')

    if corpus.dim != plda.dim or (transforms and models.dim != corpus.dim):
        raise DataError('corpus, plda and generator dimensions are inconsistent')

    policy = default(noise_policy, NoisePolicy)
    rng = torch.Generator().manual_seed(policy.seed)

    transform = lambda vec: transform_ivector(models, vec, policy, rng = rng)

    enroll_vecs, test_vecs = [], []

    for enroll_ref, test_ref, _ in trials.entries():
        enroll, _ = corpus.resolve(enroll_ref)
        test, _ = corpus.resolve(test_ref)

        if mode == 'short-short':
            enroll = transform(enroll)

        if transforms:
            test = transform(test)

        enroll_vecs.append(enroll)
        test_vecs.append(test)

    scores = plda_llr_batch(plda, torch.stack(enroll_vecs), torch.stack(test_vecs))

    scored = ScoredTrialSet(
        scores,
        trials.is_target.clone(),
        condition = trials.mode,
        enroll_refs = list(trials.enroll_refs),
        test_refs = list(trials.test_refs)
    )

    eer, min_dcf = compute_eer(scored), compute_min_dcf(scored, dcf)
    logger.info(f'{trials.mode} trials scored in {mode} mode: eer {eer:.4f}, min dcf {min_dcf:.4f}')

    return ConditionResult(scored, eer, min_dcf)
