import numpy as np
import pytest

from src.gradcheck import (
    check_difftopk,
    check_end_to_end,
    numerical_gradient,
    relative_error,
    run_gradcheck,
)


def test_relative_error():
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert relative_error(np.array([1.0]), np.array([-1.0])) > 1.0


def test_numerical_gradient_of_a_quadratic():
    arrays = {"x": np.array([1.0, -2.0, 0.5])}
    numeric = numerical_gradient(lambda p: float((p["x"] ** 2).sum()), arrays, 1e-5)

    np.testing.assert_allclose(numeric["x"], 2.0 * arrays["x"], rtol=1e-8)
    np.testing.assert_array_equal(arrays["x"], [1.0, -2.0, 0.5])


def test_soft_topk_case_passes():
    case = check_difftopk(seed=1, configs=20, n_range=(4, 16))

    assert case.name == "difftopk" and case.configs == 20
    assert case.passed, case.max_rel_error


def test_end_to_end_case_passes():
    case = check_end_to_end(seed=2)
    assert case.passed, case.max_rel_error


def test_full_run_passes():
    report = run_gradcheck(seed=0, configs=10, n_range=(4, 12))

    assert [case.name for case in report.cases] == ["difftopk", "scorer", "end_to_end"]
    assert report.passed


def test_flipped_backward_is_caught():
    report = run_gradcheck(seed=0, configs=5, n_range=(4, 12), flip_sign=True)

    assert not report.passed
    assert not report.cases[0].passed
    assert report.cases[0].max_rel_error > 0.5


@pytest.mark.parametrize("seed", [3, 4])
def test_flipping_twice_reuses_the_registered_op(seed):
    report = run_gradcheck(seed=seed, configs=2, n_range=(4, 6), flip_sign=True)
    assert not report.passed
