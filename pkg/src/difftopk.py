"""Differentiable Top-K: a sigmoid mask whose threshold is found
by bisection, differentiated implicitly through the sum constraint
"""

# pylint: disable=global-statement

import logging
from typing import Optional

import numpy as np
from attrs import frozen

from settings import (
    BISECTION_ITERATIONS,
    BISECTION_BOUND_PADDING,
    SATURATION_FLOOR,
)
from .errors import BudgetError, InputError
from .tensor import Tensor, apply, register_custom_op
from .utils import sigmoid, valid_mask

logger = logging.getLogger(__name__)

SATURATED_ROWS = 0


@frozen
class SoftMaskResult:
    scores: Tensor
    threshold: np.ndarray
    soft_mask: Tensor
    k: np.ndarray
    valid_len: np.ndarray


@frozen
class HardMask:
    mask: np.ndarray
    k: np.ndarray

    def indices(self, row: int) -> np.ndarray:
        """Selected token positions of one row in ascending order"""
        return np.flatnonzero(self.mask[row])


def _values(scores) -> np.ndarray:
    if isinstance(scores, Tensor):
        return scores.data
    return np.asarray(scores, dtype=np.float64)


def _as_rows(values, batch: int, name: str) -> np.ndarray:
    array = np.asarray(values, dtype=np.int64).reshape(-1)
    if array.size == 1:
        array = np.full(batch, array[0], dtype=np.int64)

    if array.size != batch:
        raise InputError(f"{name} has {array.size} entries for a batch of {batch}")

    return array


def budget_to_k(valid_len, budget: float):
    """Retained count for a budget, k = round(valid_len * b) with halves
    rounded away from zero, clamped to [1, valid_len - 1]

    Args:
        valid_len (int | np.ndarray): the number of valid tokens
        budget (float): the retention fraction in (0, 1)

    Raises:
        BudgetError: when the budget is outside (0, 1) or a row has fewer than 2 tokens

    Returns:
        int | np.ndarray: the retained count, matching the type of valid_len
    """
    if not 0.0 < budget < 1.0:
        raise BudgetError(f"budget {budget} is outside (0, 1)")

    lengths = np.asarray(valid_len, dtype=np.int64)
    if np.any(lengths < 2):
        raise BudgetError(
            f"cannot select from rows with fewer than 2 tokens ({lengths.min()})"
        )

    k = np.floor(lengths * budget + 0.5).astype(np.int64)
    k = np.clip(k, 1, lengths - 1)

    return int(k) if k.ndim == 0 else k


def _prepare(scores: np.ndarray, k, valid_len, upper_slack: int):
    if scores.ndim != 2:
        raise InputError(f"scores must be [B, N], got shape {scores.shape}")

    batch, n = scores.shape
    k = _as_rows(k, batch, "k")
    valid_len = _as_rows(valid_len, batch, "valid_len")

    if np.any(valid_len > n) or np.any(valid_len < 1):
        raise InputError(f"valid lengths {valid_len.tolist()} do not fit N={n}")

    if np.any(k < 1) or np.any(k > valid_len - upper_slack):
        raise BudgetError(
            f"k {k.tolist()} outside [1, valid_len - {upper_slack}] for valid lengths "
            f"{valid_len.tolist()}"
        )

    valid = valid_mask(valid_len, n)
    if not np.all(np.isfinite(scores[valid])):
        raise InputError("scores contain non-finite values")

    return k, valid_len, valid


def find_threshold(scores, k, valid_len) -> np.ndarray:
    """Solves sum(sigmoid(s + t)) = k per row over the valid region.

    Bisection starts from lower = -max(s) - 10 and upper = -min(s) + 10
    and always runs the full iteration count; the midpoint of the last
    bracket is returned.

    Args:
        scores (Tensor | np.ndarray): scores of shape [B, N]
        k: retained count per row, 1 <= k <= valid_len - 1
        valid_len: number of valid positions per row

    Raises:
        BudgetError: when k is out of range
        InputError: when a valid score is not finite

    Returns:
        np.ndarray: the threshold per row, shape [B]
    """
    s = _values(scores)
    k, _, valid = _prepare(s, k, valid_len, upper_slack=1)

    lower = -np.where(valid, s, -np.inf).max(axis=1) - BISECTION_BOUND_PADDING
    upper = -np.where(valid, s, np.inf).min(axis=1) + BISECTION_BOUND_PADDING
    # padded entries may hold sentinels, keep them out of the exponent
    s = np.where(valid, s, 0.0)

    for _ in range(BISECTION_ITERATIONS):
        mid = (lower + upper) / 2
        mask_sum = np.where(valid, sigmoid(s + mid[:, None]), 0.0).sum(axis=1)
        below = mask_sum < k

        lower = np.where(below, mid, lower)
        upper = np.where(below, upper, mid)

    return (lower + upper) / 2


def _soft_mask_forward(s, threshold, valid):
    mask = np.where(valid, sigmoid(np.where(valid, s, 0.0) + threshold[:, None]), 0.0)
    return mask, (mask, valid)


def diff_topk_backward(saved, upstream: np.ndarray) -> tuple[np.ndarray]:
    """Implicit-differentiation vector-Jacobian product.

    With v = M(1 - M) on valid positions the gradient is
    v*g - (sum(v*g) / sum(v)) * v; padded positions receive zero.

    Args:
        saved (tuple): (soft mask, valid mask) from the forward call
        upstream (np.ndarray): dL/dM of shape [B, N]

    Returns:
        tuple[np.ndarray]: dL/ds
    """
    global SATURATED_ROWS
    mask, valid = saved

    v = np.where(valid, mask * (1.0 - mask), 0.0)
    uv = v * upstream
    v_sum = v.sum(axis=1, keepdims=True)
    uv_sum = uv.sum(axis=1, keepdims=True)

    saturated = v_sum[:, 0] < SATURATION_FLOOR
    if np.any(saturated):
        SATURATED_ROWS += int(saturated.sum())
        logger.warning(
            "soft mask saturated in %d row(s), returning zero gradient for them",
            int(saturated.sum()),
        )

    safe_sum = np.where(saturated[:, None], 1.0, v_sum)
    grad = uv - (uv_sum / safe_sum) * v
    grad = np.where(saturated[:, None] | ~valid, 0.0, grad)

    return (grad,)


DIFF_TOPK_OP = register_custom_op("diff_topk", _soft_mask_forward, diff_topk_backward)


def diff_topk_forward(
    scores: Tensor, k, valid_len, op: str = DIFF_TOPK_OP
) -> SoftMaskResult:
    """Soft Top-K mask M = sigmoid(s + t), zero on padded positions.

    The threshold search runs on plain arrays, so the only tape entry
    is the mask itself with the implicit-differentiation backward.

    Args:
        scores (Tensor): the scores [B, N]
        k: retained count per row
        valid_len: valid positions per row
        op (str, optional): the registered op carrying the backward rule

    Returns:
        SoftMaskResult: the scores, threshold, soft mask and per-row counts
    """
    batch, n = scores.shape
    threshold = find_threshold(scores, k, valid_len)
    k = _as_rows(k, batch, "k")
    valid_len = _as_rows(valid_len, batch, "valid_len")

    soft_mask = apply(op, scores, threshold=threshold, valid=valid_mask(valid_len, n))

    return SoftMaskResult(scores, threshold, soft_mask, k, valid_len)


def hard_topk(scores, k, valid_len) -> HardMask:
    """Binary mask over the k largest valid scores of each row,
    ties go to the lowest index

    Args:
        scores (Tensor | np.ndarray): the scores [B, N]
        k: retained count per row, 1 <= k <= valid_len
        valid_len: valid positions per row

    Raises:
        BudgetError: when k is out of range

    Returns:
        HardMask: the selection
    """
    s = _values(scores)
    k, _, valid = _prepare(s, k, valid_len, upper_slack=0)

    ranked = np.where(valid, s, -np.inf)
    order = np.argsort(-ranked, axis=1, kind="stable")

    ranks = np.empty_like(order)
    rows = np.arange(s.shape[0])[:, None]
    ranks[rows, order] = np.arange(s.shape[1])[None, :]

    return HardMask((ranks < k[:, None]).astype(np.float64), k)


def soft_hard_gap(soft_mask, hard: HardMask, valid_len) -> float:
    """Mean |M_soft - M_hard| over the valid positions of a batch"""
    soft = soft_mask.data if isinstance(soft_mask, Tensor) else np.asarray(soft_mask)
    valid = valid_mask(valid_len, soft.shape[1])
    return float(np.abs(soft - hard.mask)[valid].mean())


def saturated_rows() -> int:
    """Rows whose backward fell back to a zero gradient so far"""
    return SATURATED_ROWS


def max_sum_violation(result: SoftMaskResult) -> Optional[float]:
    """Largest |sum(M) - k| over the rows of a soft mask"""
    sums = result.soft_mask.data.sum(axis=1)
    return float(np.max(np.abs(sums - result.k))) if sums.size else None
