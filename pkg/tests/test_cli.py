import csv
import json

import pytest
import torch

from ivector_gan_pytorch.cli import main
from ivector_gan_pytorch.container import load_corpus, load_vectors, read_scores, read_trials
from ivector_gan_pytorch.config import SEED_ENV_VAR

TINY_CONFIG = dict(
    corpus = dict(dim = 8, latent_dim = 3, num_speakers = 12, longs_per_speaker = 3, segments_per_long = 4, bias_rank = 2, eval_speakers = 4),
    gan = dict(noise_dim = 4, batch_size = 8, epochs = 1, hidden_dim = 16, critic_hidden_dim = 16, n_critic = 1),
    plda = dict(q = 3, iterations = 5),
    eval = dict(num_target = 10, num_nontarget = 20)
)


@pytest.fixture(autouse = True)
def no_seed_override(monkeypatch):
    monkeypatch.delenv(SEED_ENV_VAR, raising = False)


@pytest.fixture
def write_config(tmp_path):
    def _write(workdir = 'run', **sections):
        config = {key: dict(value) for key, value in TINY_CONFIG.items()}

        for key, value in sections.items():
            config[key].update(value)

        config['workdir'] = str(tmp_path / workdir)

        path = tmp_path / f'{workdir}.json'
        path.write_text(json.dumps(config))
        return str(path)

    return _write


@pytest.fixture
def synth_dir(tmp_path, write_config):
    out = tmp_path / 'data'
    assert main(['-q', 'synth', '--config', write_config(), '--out', str(out)]) == 0
    return out


def read_report(path):
    with open(path, newline = '') as f:
        return list(csv.DictReader(f))


# individual commands

def test_gradcheck_command(capsys):
    assert main(['gradcheck']) == 0
    assert 'critic/wasserstein' in capsys.readouterr().out


def test_gradcheck_command_reports_failure():
    assert main(['gradcheck', '--tolerance', '0']) == 1


def test_synth_writes_corpus_and_trials(synth_dir):
    corpus = load_corpus(synth_dir / 'corpus.ivgan')
    assert corpus.dim == 8

    for mode in ('short-short', 'long-short'):
        trials = read_trials(synth_dir / f'trials-{mode}.csv')
        assert trials.mode == mode
        assert len(trials) == 30


def test_train_score_eval_fuse(tmp_path, synth_dir, write_config, capsys):
    config = write_config()
    corpus, plda, gan = str(synth_dir / 'corpus.ivgan'), str(tmp_path / 'plda.ivgan'), tmp_path / 'gan'
    trials = str(synth_dir / 'trials-short-short.csv')

    assert main(['-q', 'train-plda', '--config', config, '--corpus', corpus, '--out', plda]) == 0
    assert main(['-q', 'train-gan', '--config', config, '--corpus', corpus, '--out', str(gan)]) == 0
    assert (gan / 'generator.ivgan').exists() and (gan / 'history.csv').exists()

    baseline, transformed, fused = (str(tmp_path / f'{name}.csv') for name in ('baseline', 'transformed', 'fused'))

    assert main(['-q', 'score', '--plda', plda, '--trials', trials, '--corpus', corpus, '--out', baseline]) == 0
    assert main(['-q', 'score', '--plda', plda, '--trials', trials, '--corpus', corpus, '--generator', str(gan / 'generator.ivgan'), '--mode', 'short-short', '--out', transformed]) == 0
    assert main(['-q', 'fuse', '--base', baseline, '--other', transformed, '--out', fused]) == 0

    assert len(read_scores(fused)) == 30

    capsys.readouterr()
    det = tmp_path / 'det.csv'
    assert main(['-q', 'eval', '--scores', baseline, '--det-out', str(det)]) == 0

    out = capsys.readouterr().out
    assert 'eer:' in out and 'min_dcf:' in out
    assert 'c_miss: 10.0 c_fa: 1.0 p_target: 0.01' in out
    assert det.exists()


def test_transform_command(tmp_path, synth_dir, write_config):
    gan = tmp_path / 'gan'
    corpus_path = synth_dir / 'corpus.ivgan'

    assert main(['-q', 'train-gan', '--config', write_config(), '--corpus', str(corpus_path), '--out', str(gan)]) == 0

    out = tmp_path / 'transformed.ivgan'
    assert main(['-q', 'transform', '--generator', str(gan / 'generator.ivgan'), '--vectors', str(corpus_path), '--out', str(out), '--policy', 'average', '--num-samples', '3']) == 0

    vectors, refs = load_vectors(out)
    corpus = load_corpus(corpus_path)

    assert vectors.shape == corpus.short_vecs.shape
    assert refs[0] == 'S0'
    assert torch.allclose(vectors.norm(dim = -1), torch.ones(len(vectors), dtype = torch.float64), atol = 1e-12)


def test_single_generator_command_skips_the_critic(tmp_path, synth_dir, write_config):
    gan = tmp_path / 'single'
    assert main(['-q', 'train-gan', '--config', write_config(), '--corpus', str(synth_dir / 'corpus.ivgan'), '--out', str(gan), '--single-g']) == 0

    with open(gan / 'history.csv', newline = '') as f:
        rows = list(csv.DictReader(f))

    assert all(float(row['critic_objective']) == 0. for row in rows)


# exit codes

def test_exit_codes(tmp_path, synth_dir, write_config):
    assert main(['-q', 'eval', '--scores', str(tmp_path / 'missing.csv')]) == 3

    bad = tmp_path / 'bad.json'
    bad.write_text(json.dumps(dict(gan = dict(epoch = 3))))
    assert main(['-q', 'synth', '--config', str(bad), '--out', str(tmp_path / 'x')]) == 2

    scores = tmp_path / 'scores.csv'
    scores.write_text('trial_id,enroll_ref,test_ref,is_target,score\n0,S0,S1,1,0.5\n1,S0,S2,0,0.1\n')
    assert main(['-q', 'eval', '--scores', str(scores), '--p-target', '2']) == 2

    plda = str(tmp_path / 'plda.ivgan')
    corpus = str(synth_dir / 'corpus.ivgan')
    assert main(['-q', 'train-plda', '--config', write_config(), '--corpus', corpus, '--out', plda]) == 0

    trials = str(synth_dir / 'trials-short-short.csv')
    assert main(['-q', 'score', '--plda', plda, '--trials', trials, '--corpus', corpus, '--mode', 'short-short', '--out', str(scores)]) == 2

    (tmp_path / 'garbage.ivgan').write_bytes(b'not a container')
    assert main(['-q', 'score', '--plda', str(tmp_path / 'garbage.ivgan'), '--trials', trials, '--corpus', corpus, '--out', str(scores)]) == 3


# experiment

def test_experiment_without_training_flags_untrained_rows(tmp_path, write_config):
    config = write_config(gan = dict(epochs = 0))
    assert main(['-q', 'experiment', '--config', config]) == 0

    report = read_report(tmp_path / 'run' / 'report.csv')
    assert len(report) == 10

    for row in report:
        assert row['status'] == ('ok' if row['system'] == 'a' else 'untrained')
        assert (row['c_miss'], row['c_fa'], row['p_target']) == ('10.0', '1.0', '0.01')


def test_experiment_writes_every_artifact(tmp_path, write_config):
    assert main(['-q', 'experiment', '--config', write_config()]) == 0
    workdir = tmp_path / 'run'

    report = read_report(workdir / 'report.csv')
    assert len(report) == 10
    assert all(row['status'] == 'ok' for row in report)
    assert [row['system'] for row in report[:5]] == ['a', 'b', 'c', 'd', 'e']

    for name in ('config.json', 'corpus.ivgan', 'plda.ivgan', 'compensation.csv', 'single-g/generator.ivgan', 'd-wcgan/history.csv'):
        assert (workdir / name).exists(), name

    for condition in ('short-short', 'long-short'):
        for system in ('baseline', 'single-g', 'd-wcgan', 'baseline+d-wcgan'):
            assert (workdir / f'scores-{condition}-{system}.csv').exists()
            assert (workdir / f'det-{condition}-{system}.csv').exists()


def test_experiment_is_deterministic_and_resumable(tmp_path, write_config):
    first, second = write_config('first'), write_config('second')

    assert main(['-q', 'experiment', '--config', first]) == 0
    assert main(['-q', 'experiment', '--config', second]) == 0

    report = (tmp_path / 'first' / 'report.csv').read_text()
    assert report == (tmp_path / 'second' / 'report.csv').read_text()

    # rerun on existing artifacts
    assert main(['-q', 'experiment', '--config', first]) == 0
    assert (tmp_path / 'first' / 'report.csv').read_text() == report


def test_experiment_refuses_a_foreign_workdir(tmp_path, write_config):
    assert main(['-q', 'experiment', '--config', write_config(gan = dict(epochs = 0))]) == 0

    changed = write_config(gan = dict(epochs = 0), plda = dict(iterations = 3))
    assert main(['-q', 'experiment', '--config', changed]) == 2
    assert main(['-q', 'experiment', '--config', changed, '--force']) == 0


def test_seed_environment_changes_the_corpus(tmp_path, write_config, monkeypatch):
    config = write_config()

    assert main(['-q', 'synth', '--config', config, '--out', str(tmp_path / 'a')]) == 0

    monkeypatch.setenv(SEED_ENV_VAR, '5')
    assert main(['-q', 'synth', '--config', config, '--out', str(tmp_path / 'b')]) == 0

    a, b = load_corpus(tmp_path / 'a' / 'corpus.ivgan'), load_corpus(tmp_path / 'b' / 'corpus.ivgan')
    assert not torch.equal(a.long_vecs, b.long_vecs)
