import pytest
import torch

from ivector_gan_pytorch.errors import ConfigError, DataError
from ivector_gan_pytorch.plda import (
    PldaModel,
    train_plda,
    plda_llr,
    plda_llr_batch,
    llr_density_oracle,
    plda_log_likelihood,
    speaker_statistics,
    em_step,
    relative_change
)

DTYPE = torch.float64


def random_model(dim, q, seed = 0):
    gen = torch.Generator().manual_seed(seed)
    randn = lambda *shape: torch.randn(shape, generator = gen, dtype = DTYPE)

    a = randn(dim, dim)
    residual = a @ a.t() / dim + 0.5 * torch.eye(dim, dtype = DTYPE)
    return PldaModel(randn(dim) * 0.1, randn(dim, q), residual), gen


def sample_speakers(speaker_subspace, residual_cov, num_speakers, per_speaker, gen, mean = None):
    dim, q = speaker_subspace.shape
    mean = mean if mean is not None else torch.zeros(dim, dtype = DTYPE)

    factors = torch.randn((num_speakers, q), generator = gen, dtype = DTYPE)
    chol = torch.linalg.cholesky(residual_cov)
    noise = torch.randn((num_speakers * per_speaker, dim), generator = gen, dtype = DTYPE) @ chol.t()

    labels = torch.arange(num_speakers).repeat_interleave(per_speaker)
    vectors = mean + factors[labels] @ speaker_subspace.t() + noise
    return vectors, labels


# scoring

def test_closed_form_matches_density_oracle():
    for seed in range(100):
        model, gen = random_model(6, 1 + seed % 6, seed = seed)
        enroll, test = torch.randn((2, 6), generator = gen, dtype = DTYPE)

        assert plda_llr(model, enroll, test) == pytest.approx(llr_density_oracle(model, enroll, test), abs = 1e-8)


def test_pair_at_the_mean_matches_oracle():
    model, _ = random_model(5, 2, seed = 11)
    assert plda_llr(model, model.mean, model.mean) == pytest.approx(llr_density_oracle(model, model.mean, model.mean), abs = 1e-10)


def test_no_speaker_variability_gives_zero_scores():
    _, gen = random_model(4, 2)
    a, b = torch.randn((2, 4), generator = gen, dtype = DTYPE)
    residual = torch.eye(4, dtype = DTYPE) * 0.3

    for subspace in (torch.zeros(4, 2, dtype = DTYPE), torch.zeros(4, 0, dtype = DTYPE)):
        model = PldaModel(torch.zeros(4, dtype = DTYPE), subspace, residual)

        assert plda_llr(model, a, b) == pytest.approx(0., abs = 1e-12)
        assert llr_density_oracle(model, a, b) == pytest.approx(0., abs = 1e-10)


def test_scores_are_symmetric():
    model, gen = random_model(8, 3, seed = 2)

    for _ in range(20):
        a, b = torch.randn((2, 8), generator = gen, dtype = DTYPE)
        assert abs(plda_llr(model, a, b) - plda_llr(model, b, a)) <= 1e-10


def test_pulling_a_pair_together_along_the_speaker_subspace_raises_the_score():
    # midpoint held fixed, the score is a downward parabola in the separation
    steps = torch.linspace(1., 0., 11, dtype = DTYPE)

    for seed in range(50):
        model, gen = random_model(6, 1 + seed % 4, seed = seed)
        midpoint = model.mean + torch.randn(6, generator = gen, dtype = DTYPE)
        direction = model.speaker_subspace @ torch.randn(model.q, generator = gen, dtype = DTYPE)

        scores = torch.tensor([plda_llr(model, midpoint + s * direction, midpoint - s * direction) for s in steps], dtype = DTYPE)
        assert (scores.diff() > 0).all(), seed


def test_batch_scores_match_single_scores():
    model, gen = random_model(6, 2, seed = 4)
    enroll, test = torch.randn((5, 6), generator = gen, dtype = DTYPE), torch.randn((5, 6), generator = gen, dtype = DTYPE)

    batch = plda_llr_batch(model, enroll, test)
    single = torch.tensor([plda_llr(model, e, t) for e, t in zip(enroll, test)], dtype = DTYPE)

    assert torch.allclose(batch, single, atol = 1e-12)
    assert torch.allclose(model(enroll, test), batch)


def test_same_speaker_pairs_score_higher():
    model, gen = random_model(6, 3, seed = 5)
    speaker_subspace, residual = model.speaker_subspace, model.residual_cov

    same, different = [], []

    for _ in range(1000):
        vectors, _ = sample_speakers(speaker_subspace, residual, 2, 2, gen, mean = model.mean)
        same.append(plda_llr(model, vectors[0], vectors[1]))
        different.append(plda_llr(model, vectors[0], vectors[2]))

    assert sum(same) / len(same) > sum(different) / len(different)


def test_scoring_errors():
    model, _ = random_model(6, 2)

    with pytest.raises(DataError):
        plda_llr(model, torch.zeros(5, dtype = DTYPE), torch.zeros(6, dtype = DTYPE))

    with pytest.raises(DataError):
        plda_llr(model, torch.zeros(2, 6, dtype = DTYPE), torch.zeros(2, 6, dtype = DTYPE))

    nan = torch.zeros(6, dtype = DTYPE)
    nan[2] = float('nan')

    with pytest.raises(DataError, match = 'non-finite'):
        plda_llr(model, torch.full((6,), float('inf'), dtype = DTYPE), torch.zeros(6, dtype = DTYPE))

    with pytest.raises(DataError, match = 'non-finite'):
        llr_density_oracle(model, torch.zeros(6, dtype = DTYPE), nan)

    big, _ = random_model(17, 2)

    with pytest.raises(ConfigError):
        llr_density_oracle(big, torch.zeros(17, dtype = DTYPE), torch.zeros(17, dtype = DTYPE))


def test_model_invariants():
    eye = torch.eye(3, dtype = DTYPE)

    with pytest.raises(ConfigError):
        PldaModel(torch.zeros(3, dtype = DTYPE), torch.zeros(3, 4, dtype = DTYPE), eye)

    with pytest.raises(DataError):
        PldaModel(torch.zeros(3, dtype = DTYPE), torch.zeros(3, 1, dtype = DTYPE), eye + torch.triu(eye.roll(1, dims = 1)))

    with pytest.raises(DataError):
        PldaModel(torch.zeros(3, dtype = DTYPE), torch.zeros(3, 1, dtype = DTYPE), -eye)

    with pytest.raises(DataError):
        PldaModel(torch.zeros(3, dtype = DTYPE), torch.zeros(2, 1, dtype = DTYPE), eye)


# training

def test_em_log_likelihood_is_non_decreasing(small_corpus):
    model, history = train_plda(small_corpus.long_vecs, small_corpus.long_speakers, q = 3, iterations = 20, tol = 0., return_history = True)

    assert len(history) == 21

    for before, after in zip(history, history[1:]):
        assert after >= before - 1e-8 * max(1., abs(before))

    assert history[-1] == pytest.approx(plda_log_likelihood(model, small_corpus.long_vecs, small_corpus.long_speakers), rel = 1e-10)


def test_em_recovers_the_between_speaker_covariance():
    gen = torch.Generator().manual_seed(0)
    speaker_subspace = torch.randn((6, 2), generator = gen, dtype = DTYPE)
    residual = torch.eye(6, dtype = DTYPE) * 0.2

    vectors, labels = sample_speakers(speaker_subspace, residual, 2000, 10, gen)
    model = train_plda(vectors, labels, q = 2, iterations = 200, tol = 1e-8)

    truth = speaker_subspace @ speaker_subspace.t()
    error = (model.between_cov - truth).norm() / truth.norm()
    assert error < 0.1


def test_em_is_idempotent_after_convergence():
    gen = torch.Generator().manual_seed(1)
    vectors, labels = sample_speakers(torch.randn((5, 2), generator = gen, dtype = DTYPE), torch.eye(5, dtype = DTYPE) * 0.3, 60, 6, gen)

    model, history = train_plda(vectors, labels, q = 2, iterations = 2000, tol = 1e-8, return_history = True)
    assert len(history) < 2001

    centered = vectors - model.mean
    counts, sums = speaker_statistics(centered, labels)
    subspace, residual = em_step(centered, counts, sums, model.speaker_subspace, model.residual_cov)

    assert relative_change(subspace, model.speaker_subspace) < 1e-6
    assert relative_change(residual, model.residual_cov) < 1e-6


def test_training_is_deterministic(small_corpus):
    a = train_plda(small_corpus.long_vecs, small_corpus.long_speakers, q = 3, iterations = 5)
    b = train_plda(small_corpus.long_vecs, small_corpus.long_speakers, q = 3, iterations = 5)

    assert torch.equal(a.speaker_subspace, b.speaker_subspace)
    assert torch.equal(a.residual_cov, b.residual_cov)


def test_zero_speaker_factors_scores_zero(small_corpus):
    model = train_plda(small_corpus.long_vecs, small_corpus.long_speakers, q = 0)
    assert model.q == 0
    assert plda_llr(model, small_corpus.long_vecs[0], small_corpus.long_vecs[1]) == pytest.approx(0., abs = 1e-10)


def test_trained_model_separates_heldout_speakers(small_plda, small_corpus):
    vecs = small_corpus.long_vecs
    heldout = small_corpus.is_eval_speaker(small_corpus.long_speakers).nonzero().flatten()

    # longs of a speaker are adjacent
    first, second, other = heldout[0], heldout[1], heldout[2]

    assert plda_llr(small_plda, vecs[first], vecs[second]) > plda_llr(small_plda, vecs[first], vecs[other])


def test_training_errors():
    vectors = torch.randn((6, 4), generator = torch.Generator().manual_seed(0), dtype = DTYPE)

    with pytest.raises(DataError, match = 'two speakers'):
        train_plda(vectors, torch.zeros(6, dtype = torch.long), q = 1)

    with pytest.raises(DataError, match = 'single vector'):
        train_plda(vectors, torch.arange(6), q = 1)

    with pytest.raises(ConfigError):
        train_plda(vectors, torch.tensor([0, 0, 0, 1, 1, 1]), q = 5)

    with pytest.raises(DataError):
        train_plda(torch.ones(6, 4, dtype = DTYPE), torch.tensor([0, 0, 0, 1, 1, 1]), q = 1)

    with pytest.raises(DataError):
        train_plda(vectors, torch.tensor([0, 1]), q = 1)
