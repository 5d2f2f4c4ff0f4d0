from ivector_gan_pytorch.errors import IVectorGanError, ConfigError, DataError, DivergenceError

from ivector_gan_pytorch.vecspace import length_normalize, cosine_distance

from ivector_gan_pytorch.synthcorpus import CorpusConfig, Corpus, TrialList, generate_corpus, make_trials

from ivector_gan_pytorch.mlp import Mlp, init_mlp, finite_diff_check
from ivector_gan_pytorch.optim import RMSProp, rmsprop_step, clip_parameters

from ivector_gan_pytorch.gan import (
    GanConfig,
    GanModels,
    GanTrainer,
    NoisePolicy,
    build_models,
    train_gan,
    transform_ivector
)

from ivector_gan_pytorch.gradcheck import run_gradcheck_suite

from ivector_gan_pytorch.plda import PldaConfig, PldaModel, train_plda, plda_llr, llr_density_oracle

from ivector_gan_pytorch.evaluation import (
    DcfParams,
    ScoredTrialSet,
    compute_eer,
    compute_min_dcf,
    det_points,
    fuse_scores,
    evaluate_condition
)

from ivector_gan_pytorch.config import ExperimentConfig
