import math
import logging
from collections import namedtuple
from dataclasses import dataclass
from typing import Optional

import torch
from einops import repeat

from ivector_gan_pytorch.errors import ConfigError, DataError
from ivector_gan_pytorch.vecspace import DTYPE, length_normalize

logger = logging.getLogger(__name__)

# constants

TRIAL_MODES = ('long-short', 'short-short')

MAX_DEFAULT_EVAL_SPEAKERS = 20

UtterancePair = namedtuple('UtterancePair', ['short_vec', 'long_vec', 'speaker'])

PairTensors = namedtuple('PairTensors', ['short_vecs', 'long_vecs', 'speakers', 'long_index'])

# helpers

def exists(val):
    return val is not None

def speaker_substream(seed, speaker):
    # each speaker owns an independent generator, so output does not depend on generation order
    return torch.Generator().manual_seed((seed * 1_000_003 + speaker + 1) % (2 ** 63))

# config

@dataclass
class CorpusConfig:
    dim: int = 50
    latent_dim: int = 10
    num_speakers: int = 100
    longs_per_speaker: int = 4
    segments_per_long: int = 5
    bias_rank: int = 5
    speaker_scale: float = 0.3
    bias_scale: float = 0.35
    short_noise_scale: float = 0.3
    long_noise_scale: float = 0.05
    eval_speakers: Optional[int] = None   # defaults to a fifth of the speakers, between 2 and 20
    seed: int = 0

    @property
    def num_eval_speakers(self):
        if exists(self.eval_speakers):
            return self.eval_speakers

        return min(self.num_speakers, max(2, min(MAX_DEFAULT_EVAL_SPEAKERS, self.num_speakers // 5)))

    @property
    def num_train_speakers(self):
        return self.num_speakers - self.num_eval_speakers

    def validate(self):
        if not (self.dim >= self.latent_dim >= 1):
            raise ConfigError(f'need dim >= latent_dim >= 1, got dim={self.dim}, latent_dim={self.latent_dim}')

        if self.bias_rank < 0:
            raise ConfigError('bias_rank must be non-negative')

        for name in ('num_speakers', 'longs_per_speaker', 'segments_per_long'):
            if getattr(self, name) < 1:
                raise ConfigError(f'{name} must be at least 1')

        for name in ('speaker_scale', 'short_noise_scale', 'long_noise_scale', 'bias_scale'):
            if not getattr(self, name) > 0:
                raise ConfigError(f'{name} must be positive')

        if not self.short_noise_scale > self.long_noise_scale:
            raise ConfigError('short utterances must be noisier than long ones (short_noise_scale > long_noise_scale)')

        if not (0 <= self.num_eval_speakers <= self.num_speakers):
            raise ConfigError(f'eval_speakers must lie in [0, {self.num_speakers}]')

        return self

# corpus

@dataclass
class Corpus:
    """
    long utterance vectors with their speakers, and the short segment vectors carved from them.
    speakers [0, num_train_speakers) are training material, the rest are held out for trials
    """

    config: CorpusConfig
    long_vecs: torch.Tensor       # (num_longs, dim)
    long_speakers: torch.Tensor   # (num_longs,)
    short_vecs: torch.Tensor      # (num_shorts, dim)
    short_parents: torch.Tensor   # (num_shorts,) index of the long utterance each segment came from

    @property
    def dim(self):
        return self.long_vecs.shape[-1]

    @property
    def num_longs(self):
        return self.long_vecs.shape[0]

    @property
    def num_shorts(self):
        return self.short_vecs.shape[0]

    @property
    def short_speakers(self):
        return self.long_speakers[self.short_parents]

    @property
    def num_train_speakers(self):
        return self.config.num_train_speakers

    def is_eval_speaker(self, speakers):
        return speakers >= self.num_train_speakers

    # pairs

    def pair_tensors(self, split = 'train'):
        assert split in {'train', 'heldout'}

        eval_mask = self.is_eval_speaker(self.short_speakers)
        mask = eval_mask if split == 'heldout' else ~eval_mask
        index = mask.nonzero().squeeze(-1)

        parents = self.short_parents[index]
        return PairTensors(self.short_vecs[index], self.long_vecs[parents], self.long_speakers[parents], parents)

    def pairs(self, split = 'train'):
        tensors = self.pair_tensors(split)
        return [UtterancePair(x, y, int(s)) for x, y, s in zip(tensors.short_vecs, tensors.long_vecs, tensors.speakers)]

    def training_pairs(self):
        return self.pairs('train')

    def heldout_pairs(self):
        return self.pairs('heldout')

    def training_refs(self):
        train_longs = (~self.is_eval_speaker(self.long_speakers)).nonzero().squeeze(-1).tolist()
        train_shorts = (~self.is_eval_speaker(self.short_speakers)).nonzero().squeeze(-1).tolist()
        return {f'L{i}' for i in train_longs} | {f'S{j}' for j in train_shorts}

    def plda_training_data(self, include_shorts = False):
        """ vectors of the training speakers with their labels, long utterances only unless asked """

        train_longs = ~self.is_eval_speaker(self.long_speakers)
        vectors, labels = self.long_vecs[train_longs], self.long_speakers[train_longs]

        if not include_shorts:
            return vectors, labels

        train_shorts = ~self.is_eval_speaker(self.short_speakers)
        return torch.cat((vectors, self.short_vecs[train_shorts])), torch.cat((labels, self.short_speakers[train_shorts]))

    # refs

    def resolve(self, ref):
        """ 'L<i>' is the i-th long vector, 'S<j>' the j-th short vector. returns (vector, speaker) """

        kind, index = ref[:1], ref[1:]

        if kind not in {'L', 'S'} or not index.isdigit():
            raise DataError(f'malformed vector reference {ref!r}')

        index = int(index)
        vecs, speakers = (self.long_vecs, self.long_speakers) if kind == 'L' else (self.short_vecs, self.short_speakers)

        if index >= vecs.shape[0]:
            raise DataError(f'vector reference {ref!r} out of range')

        return vecs[index], int(speakers[index])

    def stack(self, refs):
        return torch.stack([self.resolve(ref)[0] for ref in refs])

# generation

def generate_corpus(config = None):
    config = (config or CorpusConfig()).validate()

    dim, latent_dim, bias_rank = config.dim, config.latent_dim, config.bias_rank
    segments = config.segments_per_long

    # loading matrices are drawn once from the corpus seed

    gen = torch.Generator().manual_seed(config.seed)
    speaker_loadings = torch.randn((dim, latent_dim), generator = gen, dtype = DTYPE) * (config.speaker_scale / math.sqrt(latent_dim))
    bias_loadings = torch.randn((dim, bias_rank), generator = gen, dtype = DTYPE) * (config.bias_scale / math.sqrt(max(bias_rank, 1)))

    long_vecs, long_speakers, short_vecs, short_parents = [], [], [], []

    for speaker in range(config.num_speakers):
        gen = speaker_substream(config.seed, speaker)
        num_longs = config.longs_per_speaker

        h = torch.randn((latent_dim,), generator = gen, dtype = DTYPE)
        y = speaker_loadings @ h + config.long_noise_scale * torch.randn((num_longs, dim), generator = gen, dtype = DTYPE)

        p = torch.randn((num_longs, segments, bias_rank), generator = gen, dtype = DTYPE)
        short_noise = config.short_noise_scale * torch.randn((num_longs, segments, dim), generator = gen, dtype = DTYPE)
        x = repeat(y, 'l d -> l s d', s = segments) + p @ bias_loadings.t() + short_noise

        first_long = speaker * num_longs

        long_vecs.append(y)
        long_speakers.append(torch.full((num_longs,), speaker, dtype = torch.long))
        short_vecs.append(x.reshape(-1, dim))
        short_parents.append(repeat(torch.arange(num_longs) + first_long, 'l -> (l s)', s = segments))

    corpus = Corpus(
        config = config,
        long_vecs = length_normalize(torch.cat(long_vecs)),
        long_speakers = torch.cat(long_speakers),
        short_vecs = length_normalize(torch.cat(short_vecs)),
        short_parents = torch.cat(short_parents)
    )

    logger.info(f'generated corpus: {corpus.num_longs} long and {corpus.num_shorts} short vectors, '
                f'{config.num_train_speakers} training / {config.num_eval_speakers} held-out speakers')
    return corpus

# trials

@dataclass
class TrialList:
    mode: str
    enroll_refs: list
    test_refs: list
    is_target: torch.Tensor

    def __post_init__(self):
        if self.mode not in TRIAL_MODES:
            raise DataError(f'unknown trial mode {self.mode!r}, must be one of {TRIAL_MODES}')

        if not (len(self.enroll_refs) == len(self.test_refs) == len(self.is_target)):
            raise DataError('trial list columns have different lengths')

        self.is_target = torch.as_tensor(self.is_target, dtype = torch.bool)

        if not self.is_target.any() or self.is_target.all():
            raise DataError('a trial list needs at least one target and one nontarget trial')

    def __len__(self):
        return len(self.enroll_refs)

    def entries(self):
        return list(zip(self.enroll_refs, self.test_refs, self.is_target.tolist()))

    def refs(self):
        return set(self.enroll_refs) | set(self.test_refs)

def candidate_trials(corpus, mode):
    short_speakers = corpus.short_speakers
    eval_longs = corpus.is_eval_speaker(corpus.long_speakers).nonzero().squeeze(-1)
    eval_shorts = corpus.is_eval_speaker(short_speakers).nonzero().squeeze(-1)

    if mode == 'long-short':
        grid = torch.cartesian_prod(eval_longs, eval_shorts)
        enroll, test = grid.unbind(dim = -1)
        keep = corpus.short_parents[test] != enroll
        enroll_speakers = corpus.long_speakers[enroll]
    else:
        i, j = torch.triu_indices(len(eval_shorts), len(eval_shorts), offset = 1)
        enroll, test = eval_shorts[i], eval_shorts[j]
        keep = corpus.short_parents[enroll] != corpus.short_parents[test]
        enroll_speakers = short_speakers[enroll]

    enroll, test, enroll_speakers = enroll[keep], test[keep], enroll_speakers[keep]
    is_target = enroll_speakers == short_speakers[test]
    return enroll, test, is_target

def make_trials(corpus, mode, num_target, num_nontarget, seed = 0):
    if mode not in TRIAL_MODES:
        raise ConfigError(f'unknown trial mode {mode!r}, must be one of {TRIAL_MODES}')

    if num_target < 1 or num_nontarget < 1:
        raise ConfigError('a trial list needs at least one target and one nontarget trial')

    if len(corpus.long_speakers[corpus.is_eval_speaker(corpus.long_speakers)].unique()) < 2:
        raise DataError('trials need at least two held-out speakers')

    enroll, test, is_target = candidate_trials(corpus, mode)
    gen = torch.Generator().manual_seed(seed)

    chosen = []

    for want, mask, kind in ((num_target, is_target, 'target'), (num_nontarget, ~is_target, 'nontarget')):
        available = mask.nonzero().squeeze(-1)

        if want > len(available):
            raise DataError(f'requested {want} {kind} trials, but the corpus only supports {len(available)} in {mode} mode')

        chosen.append(available[torch.randperm(len(available), generator = gen)[:want]])

    chosen = torch.cat(chosen)
    chosen = chosen[torch.randperm(len(chosen), generator = gen)]

    enroll_prefix = 'L' if mode == 'long-short' else 'S'

    return TrialList(
        mode = mode,
        enroll_refs = [f'{enroll_prefix}{i}' for i in enroll[chosen].tolist()],
        test_refs = [f'S{j}' for j in test[chosen].tolist()],
        is_target = is_target[chosen]
    )
