import sys
import json
import logging
import argparse
from pathlib import Path
from dataclasses import replace

import torch

from ivector_gan_pytorch.errors import IVectorGanError, ConfigError, DataError
from ivector_gan_pytorch.config import load_config, apply_seed_env
from ivector_gan_pytorch.synthcorpus import generate_corpus, make_trials
from ivector_gan_pytorch.gan import NoisePolicy, NOISE_POLICIES, train_gan, transform_batch, compensation_report
from ivector_gan_pytorch.gradcheck import GRADCHECK_TOLERANCE, run_gradcheck_suite, gradcheck_passes
from ivector_gan_pytorch.plda import train_plda
from ivector_gan_pytorch.evaluation import (
    SCORING_MODES,
    DcfParams,
    evaluate_condition,
    compute_eer,
    compute_min_dcf,
    det_points,
    fuse_scores
)

from ivector_gan_pytorch.container import (
    REPORT_COLUMNS,
    COMPENSATION_COLUMNS,
    read_container,
    save_corpus,
    load_corpus,
    save_plda,
    load_plda,
    save_gan_models,
    load_gan_models,
    load_gan_directory,
    gan_paths,
    save_vectors,
    write_csv,
    write_scores,
    read_scores,
    write_det,
    write_trials,
    read_trials,
    write_history
)

from ivector_gan_pytorch.version import __version__

logger = logging.getLogger(__name__)

# constants

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'

GRADCHECK_FAILED_EXIT_CODE = 1

# command line flags that override config fields, flag dest -> (section, field)

CONFIG_FLAGS = dict(
    dim = ('corpus', 'dim'),
    latent_dim = ('corpus', 'latent_dim'),
    num_speakers = ('corpus', 'num_speakers'),
    eval_speakers = ('corpus', 'eval_speakers'),
    epochs = ('gan', 'epochs'),
    batch_size = ('gan', 'batch_size'),
    lr = ('gan', 'lr'),
    a = ('gan', 'a'),
    b = ('gan', 'b'),
    c = ('gan', 'c'),
    n_critic = ('gan', 'n_critic'),
    q = ('plda', 'q'),
    iterations = ('plda', 'iterations'),
    num_target = ('eval', 'num_target'),
    num_nontarget = ('eval', 'num_nontarget'),
    workdir = (None, 'workdir'),
    seed = (None, 'seed')
)

# helpers

def exists(val):
    return val is not None

def resolve_config(args):
    """ defaults < json config file < command line flags < IVR_SEED """

    config = load_config(getattr(args, 'config', None))

    for dest, (section, name) in CONFIG_FLAGS.items():
        value = getattr(args, dest, None)

        if not exists(value):
            continue

        if section is None:
            config = replace(config, **{name: value})
        else:
            config = replace(config, **{section: replace(getattr(config, section), **{name: value})})

    config = apply_seed_env(config)
    return resolved(config).validate()

def resolved(config):
    """ derived seeds, and speaker head classes tied to the training speakers of the corpus """

    config = config.seeded()
    return replace(config, gan = replace(config.gan, num_speakers = config.corpus.num_train_speakers))

def configure_logging(verbose = False, quiet = False):
    level = logging.DEBUG if verbose else (logging.WARNING if quiet else logging.INFO)
    logging.basicConfig(level = level, format = LOG_FORMAT, stream = sys.stderr)

def set_deterministic():
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)

def trials_path(directory, mode):
    return Path(directory) / f'trials-{mode}.csv'

def noise_policy_from_args(args):
    return NoisePolicy(kind = args.policy, num_samples = args.num_samples, seed = args.noise_seed)

def load_vector_source(path):
    """ a vectors container, or a corpus container whose short vectors are taken """

    header, tensors = read_container(path)

    if header['kind'] == 'vectors':
        return tensors['vectors'], header.get('refs')

    if header['kind'] == 'corpus':
        short_vecs = tensors['short_vecs']
        return short_vecs, [f'S{j}' for j in range(len(short_vecs))]

    raise DataError(f'{path} holds a {header["kind"]!r} container, expected vectors or a corpus')

# commands

def cmd_synth(args):
    config = resolve_config(args)
    out = Path(args.out or config.workdir)

    corpus = generate_corpus(config.corpus)
    save_corpus(out / 'corpus.ivgan', corpus)

    for ind, mode in enumerate(config.eval.conditions):
        trials = make_trials(corpus, mode, config.eval.num_target, config.eval.num_nontarget, seed = config.derived_seed('trials') + ind)
        write_trials(trials_path(out, mode), trials)

    print(f'corpus and trial lists written to {out}')

def cmd_train_gan(args):
    config = resolve_config(args)
    corpus = load_corpus(args.corpus)
    out = Path(args.out)

    gan_config = config.single_g() if args.single_g else config.gan
    gan_config = replace(gan_config, num_speakers = corpus.num_train_speakers)

    models, history = train_gan(
        corpus.training_pairs(),
        gan_config,
        valid_pairs = corpus.heldout_pairs() or None,
        show_progress = not args.quiet
    )

    save_gan_models(out, models, seed = gan_config.seed)
    write_history(out / 'history.csv', history)

    print(f'generator, speaker head and critic written to {out}')

def cmd_train_plda(args):
    config = resolve_config(args)
    corpus = load_corpus(args.corpus)

    vectors, labels = corpus.plda_training_data(include_shorts = config.plda.include_shorts)
    model = train_plda(vectors, labels, q = config.plda.q, iterations = config.plda.iterations, seed = config.plda.seed, tol = config.plda.tol, show_progress = not args.quiet)

    save_plda(args.out, model, seed = config.plda.seed)
    print(f'plda written to {args.out}')

def cmd_transform(args):
    models = load_gan_models(args.generator)
    vectors, refs = load_vector_source(args.vectors)
    policy = noise_policy_from_args(args)

    transformed = transform_batch(models, vectors, policy)
    save_vectors(args.out, transformed, refs, meta = dict(noise_policy = policy.kind, num_samples = policy.num_samples, noise_seed = policy.seed))

    print(f'{len(transformed)} transformed vectors written to {args.out}')

def cmd_score(args):
    plda = load_plda(args.plda)
    trials = read_trials(args.trials)
    corpus = load_corpus(args.corpus)

    models = load_gan_models(args.generator) if exists(args.generator) else None

    result = evaluate_condition(corpus, trials, plda, models, args.mode, noise_policy = noise_policy_from_args(args))
    write_scores(args.out, result.scores)

    print(f'{len(result.scores)} scores written to {args.out}')

def dcf_from_args(args):
    return DcfParams(c_miss = args.c_miss, c_fa = args.c_fa, p_target = args.p_target).validate()

def cmd_eval(args):
    scored = read_scores(args.scores)
    dcf = dcf_from_args(args)

    eer, min_dcf = compute_eer(scored), compute_min_dcf(scored, dcf)

    if exists(args.det_out):
        write_det(args.det_out, det_points(scored))

    print(f'eer: {eer!r}')
    print(f'min_dcf: {min_dcf!r}')
    print(f'c_miss: {dcf.c_miss!r} c_fa: {dcf.c_fa!r} p_target: {dcf.p_target!r}')

def cmd_fuse(args):
    base, other = read_scores(args.base), read_scores(args.other)
    fused = fuse_scores(base, other, args.w_base, args.w_other, raw = args.raw)
    write_scores(args.out, fused)

    print(f'fused scores written to {args.out}')

def cmd_gradcheck(args):
    results = run_gradcheck_suite(dim = args.dim, hidden_dim = args.hidden_dim, seed = args.seed)

    for name, error in results.items():
        status = 'ok' if error < args.tolerance else 'FAILED'
        print(f'{name}: {error:.3e} {status}')

    return 0 if gradcheck_passes(results, args.tolerance) else GRADCHECK_FAILED_EXIT_CODE

def cmd_experiment(args):
    config = resolve_config(args)
    report = Experiment(config, force = args.force, show_progress = not args.quiet).run()

    for row in report:
        eer = '-' if row['eer'] is None else f'{row["eer"]:.4f}'
        min_dcf = '-' if row['min_dcf'] is None else f'{row["min_dcf"]:.4f}'
        print(f'{row["condition"]:>12} {row["system"]}) {row["description"]:<32} eer {eer:>7} min_dcf {min_dcf:>7} {row["status"]}')

# experiment

SYSTEMS = ('baseline', 'single-g', 'd-wcgan')

class Experiment(object):
    """
    synth -> train plda -> baseline scores -> train the generators -> transformed scores -> fusion -> report.
    artifacts already in the work directory are reused unless force is set
    """

    def __init__(self, config, *, force = False, show_progress = True):
        self.config = config
        self.force = force
        self.show_progress = show_progress
        self.workdir = Path(config.workdir)

    def path(self, *parts):
        return self.workdir.joinpath(*parts)

    def reuse(self, path):
        return not self.force and Path(path).exists()

    def prepare_workdir(self):
        config_path = self.path('config.json')
        echo = json.dumps(self.config.to_dict(), indent = 2, sort_keys = True) + '\n'

        if not self.force and config_path.exists() and config_path.read_text() != echo:
            raise ConfigError(f'{self.workdir} holds artifacts of a different configuration, rerun with --force to replace them')

        self.workdir.mkdir(parents = True, exist_ok = True)
        config_path.write_text(echo)

    def corpus(self):
        path = self.path('corpus.ivgan')

        if not self.reuse(path):
            save_corpus(path, generate_corpus(self.config.corpus))

        return load_corpus(path)

    def trials(self, corpus):
        config = self.config
        trial_lists = dict()

        for ind, mode in enumerate(config.eval.conditions):
            path = trials_path(self.workdir, mode)

            if not self.reuse(path):
                trials = make_trials(corpus, mode, config.eval.num_target, config.eval.num_nontarget, seed = config.derived_seed('trials') + ind)
                write_trials(path, trials)

            trial_lists[mode] = read_trials(path)

        return trial_lists

    def plda(self, corpus):
        config = self.config.plda
        path = self.path('plda.ivgan')

        if not self.reuse(path):
            vectors, labels = corpus.plda_training_data(include_shorts = config.include_shorts)
            model = train_plda(vectors, labels, q = config.q, iterations = config.iterations, seed = config.seed, tol = config.tol, show_progress = self.show_progress)
            save_plda(path, model, seed = config.seed)

        return load_plda(path)

    def generator(self, corpus, name, gan_config):
        """ trained models of one generator system, or None when training is disabled """

        if gan_config.epochs == 0:
            return None

        directory = self.path(name)

        if not self.reuse(gan_paths(directory)['generator']):
            models, history = train_gan(
                corpus.training_pairs(),
                gan_config,
                valid_pairs = corpus.heldout_pairs() or None,
                show_progress = self.show_progress
            )

            save_gan_models(directory, models, seed = gan_config.seed)
            write_history(directory / 'history.csv', history)

        return load_gan_directory(directory)

    def score(self, corpus, trials, plda, models, mode, system):
        config = self.config
        result = evaluate_condition(corpus, trials, plda, models, mode, noise_policy = config.eval.policy(config.seed), dcf = config.eval.dcf)
        self.save_scores(trials.mode, system, result.scores)
        return result.scores

    def save_scores(self, condition, system, scored):
        write_scores(self.path(f'scores-{condition}-{system}.csv'), scored)
        write_det(self.path(f'det-{condition}-{system}.csv'), det_points(scored))

    def run(self):
        config = self.config
        self.prepare_workdir()

        corpus = self.corpus()
        trial_lists = self.trials(corpus)
        plda = self.plda(corpus)

        single_g = self.generator(corpus, 'single-g', config.single_g())
        d_wcgan = self.generator(corpus, 'd-wcgan', config.gan)

        report, compensation = [], []
        heldout = corpus.pair_tensors('heldout')

        for name, models in (('single-g', single_g), ('d-wcgan', d_wcgan)):
            if exists(models) and len(heldout.short_vecs) > 0:
                values = compensation_report(models, heldout)
                compensation.append((name, *(values[key] for key in COMPENSATION_COLUMNS[1:])))

        write_csv(self.path('compensation.csv'), COMPENSATION_COLUMNS, compensation)

        dcf = config.eval.dcf
        weights = f'{config.eval.w_base:g}:{config.eval.w_other:g}'
        a, b, c = config.gan.loss_weights

        def row(condition, system, description, scored):
            status = 'ok' if exists(scored) else 'untrained'
            eer = compute_eer(scored) if exists(scored) else None
            min_dcf = compute_min_dcf(scored, dcf) if exists(scored) else None

            return dict(
                condition = condition,
                system = system,
                description = description,
                status = status,
                eer = eer,
                min_dcf = min_dcf,
                c_miss = dcf.c_miss,
                c_fa = dcf.c_fa,
                p_target = dcf.p_target
            )

        fuse = lambda base, other: fuse_scores(base, other, config.eval.w_base, config.eval.w_other, raw = config.eval.raw_fusion) if exists(other) else None

        for condition, trials in trial_lists.items():
            baseline = self.score(corpus, trials, plda, None, 'baseline', 'baseline')

            transformed = {
                name: self.score(corpus, trials, plda, models, condition, name) if exists(models) else None
                for name, models in (('single-g', single_g), ('d-wcgan', d_wcgan))
            }

            fused = {name: fuse(baseline, scored) for name, scored in transformed.items()}

            for name, scored in fused.items():
                if exists(scored):
                    self.save_scores(condition, f'baseline+{name}', scored)

            report.extend([
                row(condition, 'a', 'baseline', baseline),
                row(condition, 'b', f'single G (a=0, b={b:g}, c={c:g})', transformed['single-g']),
                row(condition, 'c', f'a + b fused {weights}', fused['single-g']),
                row(condition, 'd', f'D-WCGAN (a={a:g}, b={b:g}, c={c:g})', transformed['d-wcgan']),
                row(condition, 'e', f'a + d fused {weights}', fused['d-wcgan'])
            ])

        write_csv(self.path('report.csv'), REPORT_COLUMNS, ([r[column] for column in REPORT_COLUMNS] for r in report))
        logger.info(f'experiment report written to {self.path("report.csv")}')
        return report

# argument parsing

def add_config_flags(parser, *sections):
    parser.add_argument('--config', help = 'json experiment config, flags override its fields')
    parser.add_argument('--seed', type = int, help = 'global seed, IVR_SEED overrides it')

    if 'corpus' in sections:
        parser.add_argument('--dim', type = int)
        parser.add_argument('--latent-dim', type = int)
        parser.add_argument('--num-speakers', type = int)
        parser.add_argument('--eval-speakers', type = int)

    if 'gan' in sections:
        parser.add_argument('--epochs', type = int)
        parser.add_argument('--batch-size', type = int)
        parser.add_argument('--lr', type = float)
        parser.add_argument('--a', type = float, help = 'adversarial loss weight')
        parser.add_argument('--b', type = float, help = 'cosine loss weight')
        parser.add_argument('--c', type = float, help = 'speaker cross entropy weight')
        parser.add_argument('--n-critic', type = int)

    if 'plda' in sections:
        parser.add_argument('--q', type = int, help = 'speaker factor dimension')
        parser.add_argument('--iterations', type = int, help = 'em iterations')

    if 'eval' in sections:
        parser.add_argument('--num-target', type = int)
        parser.add_argument('--num-nontarget', type = int)

def add_noise_flags(parser):
    parser.add_argument('--policy', choices = NOISE_POLICIES, default = 'zero', help = 'test-time generator noise')
    parser.add_argument('--num-samples', type = int, default = 1, help = 'noise draws averaged by the average policy')
    parser.add_argument('--noise-seed', type = int, default = 0)

def add_dcf_flags(parser):
    defaults = DcfParams()
    parser.add_argument('--c-miss', type = float, default = defaults.c_miss)
    parser.add_argument('--c-fa', type = float, default = defaults.c_fa)
    parser.add_argument('--p-target', type = float, default = defaults.p_target)

def build_parser():
    parser = argparse.ArgumentParser(prog = 'ivector-gan', description = 'short utterance i-vector compensation with a conditional wasserstein gan')
    parser.add_argument('--version', action = 'version', version = f'%(prog)s {__version__}')
    parser.add_argument('-v', '--verbose', action = 'store_true')
    parser.add_argument('-q', '--quiet', action = 'store_true')
    parser.add_argument('--deterministic', action = 'store_true', help = 'single threaded, deterministic algorithms only')

    commands = parser.add_subparsers(dest = 'command', required = True)

    synth = commands.add_parser('synth', help = 'generate the synthetic corpus and trial lists')
    add_config_flags(synth, 'corpus', 'eval')
    synth.add_argument('--out', help = 'output directory, defaults to the config work directory')
    synth.set_defaults(func = cmd_synth)

    train_gan_cmd = commands.add_parser('train-gan', help = 'train generator, speaker head and critic')
    add_config_flags(train_gan_cmd, 'gan')
    train_gan_cmd.add_argument('--corpus', required = True)
    train_gan_cmd.add_argument('--out', required = True, help = 'output directory')
    train_gan_cmd.add_argument('--single-g', action = 'store_true', help = 'ablation without the critic (a = 0)')
    train_gan_cmd.set_defaults(func = cmd_train_gan)

    train_plda_cmd = commands.add_parser('train-plda', help = 'train the plda back-end on the training speakers')
    add_config_flags(train_plda_cmd, 'plda')
    train_plda_cmd.add_argument('--corpus', required = True)
    train_plda_cmd.add_argument('--out', required = True)
    train_plda_cmd.set_defaults(func = cmd_train_plda)

    transform = commands.add_parser('transform', help = 'map vectors through a trained generator')
    transform.add_argument('--generator', required = True)
    transform.add_argument('--vectors', required = True, help = 'vectors container, or a corpus whose short vectors are transformed')
    transform.add_argument('--out', required = True)
    add_noise_flags(transform)
    transform.set_defaults(func = cmd_transform)

    score = commands.add_parser('score', help = 'plda scores for a trial list')
    score.add_argument('--plda', required = True)
    score.add_argument('--trials', required = True)
    score.add_argument('--corpus', required = True)
    score.add_argument('--generator')
    score.add_argument('--mode', choices = SCORING_MODES, default = 'baseline')
    score.add_argument('--out', required = True)
    add_noise_flags(score)
    score.set_defaults(func = cmd_score)

    evaluate = commands.add_parser('eval', help = 'eer and min dcf of a score file')
    evaluate.add_argument('--scores', required = True)
    evaluate.add_argument('--det-out')
    add_dcf_flags(evaluate)
    evaluate.set_defaults(func = cmd_eval)

    fuse = commands.add_parser('fuse', help = 'weighted fusion of two aligned score files')
    fuse.add_argument('--base', required = True)
    fuse.add_argument('--other', required = True)
    fuse.add_argument('--w-base', type = float, default = 0.7)
    fuse.add_argument('--w-other', type = float, default = 0.3)
    fuse.add_argument('--raw', action = 'store_true', help = 'skip per-system score normalization')
    fuse.add_argument('--out', required = True)
    fuse.set_defaults(func = cmd_fuse)

    gradcheck = commands.add_parser('gradcheck', help = 'finite difference check of every analytic gradient')
    gradcheck.add_argument('--dim', type = int, default = 8)
    gradcheck.add_argument('--hidden-dim', type = int, default = 16)
    gradcheck.add_argument('--seed', type = int, default = 0)
    gradcheck.add_argument('--tolerance', type = float, default = GRADCHECK_TOLERANCE)
    gradcheck.set_defaults(func = cmd_gradcheck)

    experiment = commands.add_parser('experiment', help = 'full pipeline and report')
    add_config_flags(experiment, 'corpus', 'gan', 'plda', 'eval')
    experiment.add_argument('--workdir')
    experiment.add_argument('--force', action = 'store_true', help = 'discard artifacts already in the work directory')
    experiment.set_defaults(func = cmd_experiment)

    return parser

def main(argv = None):
    parser = build_parser()
    args = parser.parse_args(argv)

    configure_logging(args.verbose, args.quiet)

    if args.deterministic:
        set_deterministic()

    try:
        return args.func(args) or 0
    except IVectorGanError as err:
        logger.error(str(err))
        return err.exit_code
    except OSError as err:
        logger.error(str(err))
        return DataError.exit_code

def cli():
    sys.exit(main())

if __name__ == '__main__':
    cli()
