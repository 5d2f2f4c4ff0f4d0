from ivector_gan_pytorch.gradcheck import GRADCHECK_TOLERANCE, GENERATOR_OBJECTIVES, run_gradcheck_suite, gradcheck_passes
from ivector_gan_pytorch.mlp import RELATIVE_ERROR_FLOOR


def test_every_network_and_objective_passes():
    results = run_gradcheck_suite(return_details = True)

    expected = {f'generator/{name}' for name in GENERATOR_OBJECTIVES} | {'speaker_head/cross_entropy', 'critic/wasserstein'}
    assert set(results) == expected

    for name, result in results.items():
        assert result.checked > 0, name
        assert result.max_rel_error < GRADCHECK_TOLERANCE, name


def test_relative_errors_use_a_tight_floor():
    assert RELATIVE_ERROR_FLOOR == 1e-8
    assert run_gradcheck_suite(floor = 1e-8) == run_gradcheck_suite()
    assert gradcheck_passes(run_gradcheck_suite())


def test_suite_is_deterministic():
    assert run_gradcheck_suite(seed = 3) == run_gradcheck_suite(seed = 3)


def test_gradcheck_passes():
    assert gradcheck_passes({'a': 1e-6, 'b': 5e-5})
    assert not gradcheck_passes({'a': 1e-6, 'b': 2e-4})
