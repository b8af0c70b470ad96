"""The composite training objective: task cross-entropy plus a
curriculum-weighted BCE pulling the soft mask onto the hard one
"""

import numpy as np
from attrs import frozen, field

from settings import CLAMP_EPS, LAMBDA_START, LAMBDA_END
from .difftopk import HardMask
from .errors import ConfigError, InputError
from .tensor import Tensor, as_tensor
from .utils import valid_mask


def _not_below_start(instance, _attribute, value):
    if value < instance.lambda_start:
        raise ConfigError(
            f"lambda_end {value} is below lambda_start {instance.lambda_start}"
        )


def _positive_steps(_instance, _attribute, value):
    if value < 1:
        raise ConfigError(f"total_steps must be at least 1, got {value}")


@frozen
class AnnealSchedule:
    lambda_start: float = LAMBDA_START
    lambda_end: float = field(default=LAMBDA_END, validator=_not_below_start)
    total_steps: int = field(default=1, validator=_positive_steps)


def lambda_at(schedule: AnnealSchedule, step: int) -> float:
    """Linear ramp from lambda_start to lambda_end over total_steps, flat afterwards"""
    progress = min(step / schedule.total_steps, 1.0)
    start, end = schedule.lambda_start, schedule.lambda_end
    return start + (end - start) * progress


def constraint_loss(soft_mask: Tensor, hard: HardMask, valid_len) -> Tensor:
    """Binary cross-entropy of the soft mask against the hard Top-K mask,
    averaged over valid positions. The hard mask is a constant target.

    Args:
        soft_mask (Tensor): M_soft of shape [B, N]
        hard (HardMask): the detached hard selection
        valid_len: valid positions per row

    Returns:
        Tensor: the scalar loss
    """
    soft_mask = as_tensor(soft_mask)
    target = np.asarray(hard.mask, dtype=np.float64)
    if target.shape != soft_mask.shape:
        raise InputError(
            f"hard mask {target.shape} does not match soft mask {soft_mask.shape}"
        )

    valid = valid_mask(valid_len, soft_mask.shape[1]).astype(np.float64)

    clamped = soft_mask.clip(CLAMP_EPS, 1.0 - CLAMP_EPS)
    per_token = -(clamped.log() * target + (1.0 - clamped).log() * (1.0 - target))

    return (per_token * valid).sum() / valid.sum()


def task_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy through a stable log-sum-exp

    Raises:
        InputError: a label is outside [0, C)
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    classes = logits.shape[-1]

    if labels.shape != logits.shape[:-1] or np.any((labels < 0) | (labels >= classes)):
        raise InputError(f"labels {labels.tolist()} invalid for {classes} classes")

    return (logits.logsumexp(axis=-1) - logits.pick(labels)).mean()


def total_loss(task: Tensor, constraint: Tensor, weight: float) -> Tensor:
    """task + weight * constraint"""
    return as_tensor(task) + as_tensor(constraint).scale(weight)


def polarization(soft_mask) -> float:
    """Mean of min(M, 1 - M); zero once every entry sits on 0 or 1"""
    values = soft_mask.data if isinstance(soft_mask, Tensor) else np.asarray(soft_mask)
    return float(np.minimum(values, 1.0 - values).mean())
