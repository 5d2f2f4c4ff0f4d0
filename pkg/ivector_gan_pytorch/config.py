import os
import json
import logging
from pathlib import Path
from dataclasses import dataclass, field, fields, asdict, replace

from ivector_gan_pytorch.errors import ConfigError
from ivector_gan_pytorch.synthcorpus import CorpusConfig, TRIAL_MODES
from ivector_gan_pytorch.gan import GanConfig, NoisePolicy, NOISE_POLICIES
from ivector_gan_pytorch.plda import PldaConfig
from ivector_gan_pytorch.evaluation import DcfParams

logger = logging.getLogger(__name__)

# constants

SEED_ENV_VAR = 'IVR_SEED'

SEED_OFFSETS = dict(
    corpus = 0,
    gan = 1,
    plda = 2,
    trials = 3,
    single_g = 4
)

# helpers

def from_dict(klass, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f'{where} must be a mapping, got {type(d).__name__}')

    names = {f.name for f in fields(klass)}
    unknown = set(d) - names

    if unknown:
        raise ConfigError(f'unknown {where} keys {sorted(unknown)}')

    try:
        return klass(**d)
    except TypeError as err:
        raise ConfigError(f'invalid {where}: {err}') from err

# evaluation settings

@dataclass
class EvalConfig:
    dcf: DcfParams = field(default_factory = DcfParams)
    w_base: float = 0.7
    w_other: float = 0.3
    raw_fusion: bool = False
    num_target: int = 1000
    num_nontarget: int = 10000
    conditions: tuple = TRIAL_MODES
    noise_policy: str = 'zero'
    noise_samples: int = 1

    def validate(self):
        self.dcf.validate()

        if self.w_base < 0 or self.w_other < 0 or not (self.w_base + self.w_other) > 0:
            raise ConfigError('fusion weights must be non-negative and not both zero')

        if self.num_target < 1 or self.num_nontarget < 1:
            raise ConfigError('trial counts must be positive')

        unknown = set(self.conditions) - set(TRIAL_MODES)

        if len(self.conditions) == 0 or unknown:
            raise ConfigError(f'conditions must be a non-empty subset of {TRIAL_MODES}')

        if self.noise_policy not in NOISE_POLICIES:
            raise ConfigError(f'noise_policy must be one of {NOISE_POLICIES}')

        return self

    def policy(self, seed = 0):
        return NoisePolicy(kind = self.noise_policy, num_samples = self.noise_samples, seed = seed)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)

        if 'dcf' in d:
            d['dcf'] = from_dict(DcfParams, d['dcf'], 'eval.dcf')

        if 'conditions' in d:
            d['conditions'] = tuple(d['conditions'])

        return from_dict(cls, d, 'eval')

# experiment

@dataclass
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory = CorpusConfig)
    gan: GanConfig = field(default_factory = GanConfig)
    plda: PldaConfig = field(default_factory = PldaConfig)
    eval: EvalConfig = field(default_factory = EvalConfig)
    workdir: str = 'ivgan-run'
    seed: int = 0

    def validate(self):
        for sub in (self.corpus, self.gan, self.plda, self.eval):
            sub.validate()

        if self.gan.num_speakers != self.corpus.num_train_speakers:
            raise ConfigError(f'gan.num_speakers ({self.gan.num_speakers}) must equal the number of training speakers ({self.corpus.num_train_speakers})')

        if self.plda.q > self.corpus.dim:
            raise ConfigError(f'plda.q ({self.plda.q}) exceeds the i-vector dimension ({self.corpus.dim})')

        workdir = Path(self.workdir)

        if workdir.exists() and not (workdir.is_dir() and os.access(workdir, os.W_OK)):
            raise ConfigError(f'work directory {workdir} is not a writable directory')

        return self

    def derived_seed(self, name):
        return self.seed + SEED_OFFSETS[name]

    def seeded(self):
        """ sub-configs carrying the seeds derived from the global seed """

        return replace(
            self,
            corpus = replace(self.corpus, seed = self.derived_seed('corpus')),
            gan = replace(self.gan, seed = self.derived_seed('gan')),
            plda = replace(self.plda, seed = self.derived_seed('plda'))
        )

    def single_g(self):
        return replace(self.gan, a = 0., seed = self.derived_seed('single_g'))

    def to_dict(self):
        d = asdict(self)
        d['eval']['conditions'] = list(self.eval.conditions)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)

        builders = dict(
            corpus = lambda v: from_dict(CorpusConfig, v, 'corpus'),
            gan = lambda v: from_dict(GanConfig, v, 'gan'),
            plda = lambda v: from_dict(PldaConfig, v, 'plda'),
            eval = EvalConfig.from_dict
        )

        for key, build in builders.items():
            if key in d:
                d[key] = build(d[key])

        return from_dict(cls, d, 'experiment config')

def load_config(path = None):
    """ defaults overridden by the json file, if any """

    config = ExperimentConfig()

    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as err:
            raise ConfigError(f'cannot read config file {path}: {err}') from err
        except json.JSONDecodeError as err:
            raise ConfigError(f'config file {path} is not valid json: {err}') from err

        config = ExperimentConfig.from_dict(data)

    return config

def apply_seed_env(config, env = None):
    env = os.environ if env is None else env
    value = env.get(SEED_ENV_VAR)

    if value is None or value == '':
        return config

    try:
        seed = int(value)
    except ValueError as err:
        raise ConfigError(f'{SEED_ENV_VAR} must be an integer, got {value!r}') from err

    logger.info(f'seed overridden by {SEED_ENV_VAR}={seed}')
    return replace(config, seed = seed)
