import logging

import numpy as np
import pytest

from src import difftopk
from src.difftopk import (
    DIFF_TOPK_OP,
    budget_to_k,
    diff_topk_backward,
    diff_topk_forward,
    find_threshold,
    hard_topk,
    max_sum_violation,
    soft_hard_gap,
)
from src.errors import BudgetError, InputError
from src.gradcheck import check_difftopk_row
from src.tensor import Tape, Tensor
from src.utils import sigmoid


def scalar_threshold(scores, k, iterations=200):
    """Plain scalar bisection used as an independent reference"""
    low, high = -200.0, 200.0
    for _ in range(iterations):
        mid = 0.5 * (low + high)
        if sigmoid(scores + mid).sum() < k:
            low = mid
        else:
            high = mid
    return 0.5 * (low + high)


def random_rows(rng, count, n_max=64, scale=3.0):
    for _ in range(count):
        n = int(rng.integers(2, n_max + 1))
        yield rng.normal(0.0, scale, size=n), int(rng.integers(1, n))


@pytest.mark.parametrize(
    "valid_len, budget, expected",
    [(100, 0.2, 20), (3, 0.05, 1), (10, 0.25, 3), (48, 0.05, 2), (10, 0.99, 9)],
)
def test_budget_to_k(valid_len, budget, expected):
    assert budget_to_k(valid_len, budget) == expected


def test_budget_to_k_per_row():
    np.testing.assert_array_equal(budget_to_k(np.array([10, 64, 48]), 0.2), [2, 13, 10])


@pytest.mark.parametrize("budget", [0.0, 1.0, -0.1, 1.5])
def test_budget_outside_unit_interval(budget):
    with pytest.raises(BudgetError):
        budget_to_k(10, budget)


def test_budget_needs_two_tokens():
    with pytest.raises(BudgetError):
        budget_to_k(np.array([5, 1]), 0.5)


def test_uniform_scores_give_threshold_zero():
    threshold = find_threshold(np.zeros((1, 4)), 2, 4)
    result = diff_topk_forward(Tensor(np.zeros((1, 4))), 2, 4)

    assert threshold[0] == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(result.soft_mask.data, [[0.5] * 4], atol=1e-12)


def test_uniform_scores_spread_k_evenly():
    result = diff_topk_forward(Tensor(np.full((1, 10), 1.7)), 3, 10)
    np.testing.assert_allclose(result.soft_mask.data, 0.3, atol=1e-9)


def test_threshold_matches_scalar_reference():
    scores = np.array([2.0, -1.0, 0.5])
    expected = scalar_threshold(scores, 1)

    threshold = find_threshold(scores[None, :], 1, 3)[0]
    mask = diff_topk_forward(Tensor(scores[None, :]), 1, 3).soft_mask.data[0]

    assert threshold == pytest.approx(expected, abs=1e-10)
    np.testing.assert_allclose(mask, sigmoid(scores + expected), atol=1e-10)
    assert mask.sum() == pytest.approx(1.0, abs=1e-10)


def test_shift_moves_threshold_only():
    scores = np.array([[2.0, -1.0, 0.5, 0.1, -3.0]])
    base = diff_topk_forward(Tensor(scores), 2, 5)
    shifted = diff_topk_forward(Tensor(scores + 7.3), 2, 5)

    assert shifted.threshold[0] == pytest.approx(base.threshold[0] - 7.3, abs=1e-9)
    assert np.max(np.abs(shifted.soft_mask.data - base.soft_mask.data)) < 1e-9


@pytest.mark.parametrize("shift", [-10.0, -2.5, 0.3, 10.0])
def test_shift_invariance_on_random_rows(shift):
    rng = np.random.default_rng(11)
    scores = rng.normal(size=(20, 32))
    base = diff_topk_forward(Tensor(scores), 6, 32).soft_mask.data
    moved = diff_topk_forward(Tensor(scores + shift), 6, 32).soft_mask.data

    assert np.max(np.abs(base - moved)) < 1e-9


def test_sum_constraint_on_random_rows():
    rng = np.random.default_rng(3)
    worst = 0.0
    for scores, k in random_rows(rng, 1000):
        result = diff_topk_forward(Tensor(scores[None, :]), k, len(scores))
        worst = max(worst, max_sum_violation(result))

    assert worst <= 1e-3


def test_padding_is_excluded():
    scores = np.array([[0.3, -0.2, 1.0, 50.0, -50.0]])
    result = diff_topk_forward(Tensor(scores), 1, 3)
    mask = result.soft_mask.data[0]

    assert mask[3] == 0.0 and mask[4] == 0.0
    assert mask[:3].sum() == pytest.approx(1.0, abs=1e-3)
    assert np.all((mask[:3] > 0.0) & (mask[:3] < 1.0))


def test_large_gaps_saturate():
    scores = np.array([[5.0, 4.0, 3.0, 2.0, 1.0]]) * 10
    mask = diff_topk_forward(Tensor(scores), 2, 5).soft_mask.data
    np.testing.assert_allclose(mask, [[1, 1, 0, 0, 0]], atol=1e-2)


def test_saturation_approaches_hard_topk():
    rng = np.random.default_rng(5)
    checked = 0
    for scores, k in random_rows(rng, 200, n_max=16):
        if np.min(np.diff(np.sort(scores))) < 0.1:
            continue
        soft = diff_topk_forward(
            Tensor(100 * scores[None, :]), k, len(scores)
        ).soft_mask.data
        hard = hard_topk(scores[None, :], k, len(scores)).mask
        assert np.max(np.abs(soft - hard)) < 1e-2
        checked += 1

    assert checked > 0


def test_monotone_in_scores():
    rng = np.random.default_rng(9)
    for scores, k in random_rows(rng, 300, n_max=32, scale=1.0):
        if np.min(np.diff(np.sort(scores))) < 1e-3:
            continue
        result = diff_topk_forward(Tensor(scores[None, :]), k, len(scores))
        mask = result.soft_mask.data[0]
        np.testing.assert_array_equal(np.argsort(mask), np.argsort(scores))


def test_hard_selection_is_top_of_soft_mask():
    rng = np.random.default_rng(13)
    for scores, k in random_rows(rng, 1000, n_max=32, scale=1.0):
        result = diff_topk_forward(Tensor(scores[None, :]), k, len(scores))
        soft = result.soft_mask.data[0]
        hard = hard_topk(scores[None, :], k, len(scores))
        assert set(np.argsort(-soft)[:k]) == set(hard.indices(0))


def test_forward_is_deterministic():
    scores = Tensor(np.random.default_rng(1).normal(size=(4, 20)))
    first = diff_topk_forward(scores, 5, 20).soft_mask.data
    second = diff_topk_forward(scores, 5, 20).soft_mask.data
    assert np.array_equal(first, second)


@pytest.mark.parametrize("k", [0, 4])
def test_threshold_rejects_k_out_of_range(k):
    with pytest.raises(BudgetError):
        find_threshold(np.zeros((1, 4)), k, 4)


def test_threshold_rejects_non_finite_scores():
    with pytest.raises(InputError):
        find_threshold(np.array([[0.0, np.nan, 1.0]]), 1, 3)


def test_non_finite_padding_is_ignored():
    scores = np.array([[0.0, 1.0, np.inf]])
    mask = diff_topk_forward(Tensor(scores), 1, 2).soft_mask.data
    assert mask[0, 2] == 0.0


def test_backward_symmetric_upstream_is_null():
    mask = np.array([[0.5, 0.5]])
    valid = np.ones_like(mask, dtype=bool)
    (grad,) = diff_topk_backward((mask, valid), np.ones((1, 2)))
    np.testing.assert_array_equal(grad, [[0.0, 0.0]])


def test_jacobian_annihilates_ones():
    rng = np.random.default_rng(21)
    scores = rng.normal(size=(50, 24))
    result = diff_topk_forward(Tensor(scores), 7, 24)
    valid = np.ones(scores.shape, dtype=bool)

    (grad,) = diff_topk_backward((result.soft_mask.data, valid), np.ones(scores.shape))
    assert np.max(np.abs(grad)) < 1e-12


def test_backward_zero_on_padding():
    scores = Tensor(np.array([[0.3, -0.2, 1.0, 0.0]]), requires_grad=True)
    with Tape() as tape:
        result = diff_topk_forward(scores, 1, 3)
        tape.backward((result.soft_mask * np.array([[1.0, 2.0, 3.0, 4.0]])).sum())

    assert scores.grad[0, 3] == 0.0
    assert np.all(scores.grad[0, :3] != 0.0)


def test_saturated_row_falls_back_to_zero_gradient(caplog):
    before = difftopk.saturated_rows()
    mask = np.array([[1.0, 0.0, 0.0], [0.6, 0.3, 0.1]])
    upstream = np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])

    with caplog.at_level(logging.WARNING, logger="src.difftopk"):
        (grad,) = diff_topk_backward((mask, np.ones(mask.shape, dtype=bool)), upstream)

    np.testing.assert_array_equal(grad[0], [0.0, 0.0, 0.0])
    assert np.any(grad[1] != 0.0)
    assert difftopk.saturated_rows() == before + 1
    assert "saturated" in caplog.text


@pytest.mark.parametrize("n, k", [(16, 5), (2, 1), (64, 63)])
def test_gradient_matches_finite_differences(n, k):
    rng = np.random.default_rng(n)
    error = check_difftopk_row(rng.normal(size=n), k, n, rng.normal(size=n))
    assert error < 1e-5


@pytest.mark.parametrize(
    "scores, k, expected",
    [
        ([1.0, 1.0, 0.0], 1, [1, 0, 0]),
        ([2.0, -1.0, 0.5], 2, [1, 0, 1]),
        ([0.0, 0.0, 0.0], 3, [1, 1, 1]),
    ],
)
def test_hard_topk(scores, k, expected):
    hard = hard_topk(np.array([scores]), k, 3)
    np.testing.assert_array_equal(hard.mask, [expected])
    assert hard.k[0] == k


def test_hard_topk_ignores_padding():
    hard = hard_topk(np.array([[0.0, 1.0, 9.0, 9.0]]), 2, 2)
    np.testing.assert_array_equal(hard.mask, [[1, 1, 0, 0]])


def test_hard_topk_rejects_k_above_valid_len():
    with pytest.raises(BudgetError):
        hard_topk(np.zeros((1, 4)), 3, 2)


def test_soft_hard_gap():
    hard = hard_topk(np.array([[1.0, 0.0, 5.0]]), 1, 2)
    gap = soft_hard_gap(np.array([[0.75, 0.25, 0.9]]), hard, 2)
    assert gap == pytest.approx(0.25)


def test_only_the_mask_is_recorded(rng):
    scores = Tensor(rng.normal(size=(3, 12)), requires_grad=True)

    with Tape() as tape:
        result = diff_topk_forward(scores, 4, [12, 10, 7])
        hard = hard_topk(scores, 4, [12, 10, 7])

    assert [node.op for node in tape.nodes] == [DIFF_TOPK_OP]
    assert tape.nodes[0].output is result.soft_mask
    assert isinstance(hard.mask, np.ndarray)
