"""Central finite-difference checks of the hand-written gradients"""

import logging
from typing import Callable, Optional

import numpy as np
from attrs import frozen

from settings import PADDED_SCORE, SEED
from .difftopk import DIFF_TOPK_OP, diff_topk_backward, diff_topk_forward
from .objective import constraint_loss, task_loss, total_loss
from .pipeline import FrozenBackbone, forward_train, init_backbone
from .scorer import ScorerParams, score
from .synth_data import TaskSpec, TokenBatch, generate
from .tensor import OPS, Tape, Tensor, register_custom_op
from .utils import substream, valid_mask

logger = logging.getLogger(__name__)

FLIPPED_TOPK_OP = "diff_topk_flipped"
TOPK_TOLERANCE = 1e-5
SCORER_TOLERANCE = 1e-5
END_TO_END_TOLERANCE = 1e-4


@frozen
class GradcheckCase:
    name: str
    configs: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


@frozen
class GradcheckReport:
    cases: list[GradcheckCase]

    @property
    def passed(self) -> bool:
        return all(case.passed for case in self.cases)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||, 1e-12)"""
    a, b = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def numerical_gradient(
    fn: Callable[[dict[str, np.ndarray]], float],
    arrays: dict[str, np.ndarray],
    step: float,
) -> dict[str, np.ndarray]:
    """Central differences of a scalar function, one entry at a time"""
    grads = {}
    for name, value in arrays.items():
        grad = np.zeros_like(value)
        for index in np.ndindex(value.shape):
            shifted = {key: array.copy() for key, array in arrays.items()}
            shifted[name][index] += step
            upper = fn(shifted)
            shifted[name][index] -= 2 * step
            lower = fn(shifted)
            grad[index] = (upper - lower) / (2 * step)
        grads[name] = grad
    return grads


def flipped_topk_op() -> str:
    """A copy of the soft Top-K op whose backward has the wrong sign,
    for checking that the checker notices"""
    if FLIPPED_TOPK_OP not in OPS:
        forward = OPS[DIFF_TOPK_OP].forward
        register_custom_op(
            FLIPPED_TOPK_OP,
            forward,
            lambda saved, g: tuple(-grad for grad in diff_topk_backward(saved, g)),
        )
    return FLIPPED_TOPK_OP


def check_difftopk_row(
    scores: np.ndarray,
    k: int,
    valid_len: int,
    weights: np.ndarray,
    op: str = DIFF_TOPK_OP,
    step: float = 1e-6,
) -> float:
    """Relative error of d(sum(w * M))/ds for one row. All 2N perturbed
    rows go through the full forward, bisection included, as one batch."""
    n = scores.shape[0]

    with Tape() as tape:
        leaf = Tensor(scores[None, :], requires_grad=True)
        result = diff_topk_forward(leaf, k, valid_len, op)
        loss = (result.soft_mask * weights[None, :]).sum()
        tape.backward(loss)

    shifted = np.repeat(scores[None, :], 2 * n, axis=0)
    shifted[np.arange(n), np.arange(n)] += step
    shifted[n + np.arange(n), np.arange(n)] -= step

    masks = diff_topk_forward(Tensor(shifted), k, valid_len).soft_mask.data
    values = (masks * weights[None, :]).sum(axis=1)
    numeric = (values[:n] - values[n:]) / (2 * step)

    return relative_error(leaf.grad[0], numeric)


def check_difftopk(
    seed: int = SEED,
    configs: int = 100,
    n_range: tuple[int, int] = (4, 64),
    op: str = DIFF_TOPK_OP,
) -> GradcheckCase:
    """The soft Top-K op alone on random rows; the first config is the
    smallest legal one, N = 2 and k = 1"""
    rng = substream(seed, "gradcheck", 0)
    worst = 0.0

    for index in range(configs):
        if index == 0:
            n, valid_len = 2, 2
        else:
            n = int(rng.integers(n_range[0], n_range[1] + 1))
            valid_len = n if rng.random() < 0.5 else int(rng.integers(2, n + 1))

        k = int(rng.integers(1, valid_len))
        scores = rng.normal(size=n)
        scores[valid_len:] = PADDED_SCORE
        weights = rng.normal(size=n)

        worst = max(worst, check_difftopk_row(scores, k, valid_len, weights, op))

    return GradcheckCase("difftopk", configs, worst, TOPK_TOLERANCE)


def check_scorer(
    seed: int = SEED, shape: tuple[int, int, int, int] = (2, 6, 5, 3)
) -> GradcheckCase:
    """Weighted sum of scores against W_q and W_k. Padded positions carry
    the -1e9 sentinel, so they are weighted by zero"""
    batch, n, dim, proj = shape
    rng = substream(seed, "gradcheck", 1)
    tokens = rng.normal(size=(batch, n, dim))
    valid_len = np.array([n] + [max(n - 2, 1)] * (batch - 1))
    weights = rng.normal(size=(batch, n)) * valid_mask(valid_len, n)
    arrays = {
        "w_q": rng.normal(0, 0.5, (dim, proj)),
        "w_k": rng.normal(0, 0.5, (dim, proj)),
    }

    def value(params: dict[str, np.ndarray]) -> float:
        scores = score(Tensor(tokens), ScorerParams.from_arrays(params), valid_len)
        return float((scores.data * weights).sum())

    with Tape() as tape:
        params = ScorerParams.from_arrays(arrays).trainable()
        loss = (score(Tensor(tokens), params, valid_len) * weights).sum()
        tape.backward(loss)

    numeric = numerical_gradient(value, arrays, 1e-5)
    error = max(
        relative_error(params.w_q.grad, numeric["w_q"]),
        relative_error(params.w_k.grad, numeric["w_k"]),
    )
    return GradcheckCase("scorer", 1, error, SCORER_TOLERANCE)


def _toy_problem(seed: int) -> tuple[TokenBatch, FrozenBackbone, dict[str, np.ndarray]]:
    spec = TaskSpec(
        n_range=(8, 10),
        feature_dim=6,
        num_classes=2,
        signal_tokens=2,
        sink_count=1,
        sink_scale=2.0,
        noise_std=0.5,
        duplicate_frac=0.0,
        seed=seed,
    )
    batch = generate(spec, 4, split_seed=99)

    rng = substream(seed, "gradcheck", 2)
    base = init_backbone(spec.feature_dim, spec.num_classes, 5, seed)
    backbone = FrozenBackbone(
        base.w1, rng.normal(0, 0.1, 5), rng.normal(size=(5, 2)), base.b2
    )
    arrays = {"w_q": rng.normal(0, 0.2, (6, 3)), "w_k": rng.normal(0, 0.2, (6, 3))}

    return batch, backbone, arrays


def check_end_to_end(
    seed: int = SEED, budget: float = 0.3, weight: float = 0.5
) -> GradcheckCase:
    """Task plus constraint loss through scorer, soft Top-K and backbone"""
    batch, backbone, arrays = _toy_problem(seed)

    def loss_of(params: ScorerParams) -> Tensor:
        output = forward_train(batch, params, backbone, budget)
        constraint = constraint_loss(
            output.selection.soft_mask, output.hard, batch.valid_len
        )
        return total_loss(task_loss(output.logits, batch.labels), constraint, weight)

    with Tape() as tape:
        params = ScorerParams.from_arrays(arrays).trainable()
        tape.backward(loss_of(params))

    numeric = numerical_gradient(
        lambda p: loss_of(ScorerParams.from_arrays(p)).item(), arrays, 1e-6
    )
    error = max(
        relative_error(params.w_q.grad, numeric["w_q"]),
        relative_error(params.w_k.grad, numeric["w_k"]),
    )
    return GradcheckCase("end_to_end", 1, error, END_TO_END_TOLERANCE)


def run_gradcheck(
    seed: int = SEED,
    configs: int = 100,
    n_range: tuple[int, int] = (4, 64),
    flip_sign: bool = False,
    op: Optional[str] = None,
) -> GradcheckReport:
    """Runs every case

    Args:
        seed (int, optional): the "gradcheck" stream seed
        configs (int, optional): random rows for the soft Top-K case
        n_range (tuple[int, int], optional): row lengths for that case
        flip_sign (bool, optional): check the op with the negated backward instead
        op (str, optional): any other registered op to check in its place

    Returns:
        GradcheckReport: one entry per case
    """
    op = op or (flipped_topk_op() if flip_sign else DIFF_TOPK_OP)

    cases = [
        check_difftopk(seed, configs, n_range, op),
        check_scorer(seed),
        check_end_to_end(seed),
    ]
    for case in cases:
        log = logger.info if case.passed else logger.error
        log(
            "gradcheck %s: max relative error %.3e (tolerance %.0e)",
            case.name,
            case.max_rel_error,
            case.tolerance,
        )

    return GradcheckReport(cases)

