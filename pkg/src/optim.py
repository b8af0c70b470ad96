"""AdamW with decoupled weight decay, on dictionaries of numpy arrays"""

import logging

import numpy as np
from attrs import evolve, field, frozen

from settings import ADAM_BETAS, ADAM_EPS, WEIGHT_DECAY
from .errors import DimensionError

logger = logging.getLogger(__name__)


@frozen
class AdamWHyper:
    beta1: float = ADAM_BETAS[0]
    beta2: float = ADAM_BETAS[1]
    eps: float = ADAM_EPS
    weight_decay: float = WEIGHT_DECAY


@frozen
class AdamWState:
    """First and second moments per parameter name,
    the count of applied steps and of skipped ones"""

    first: dict[str, np.ndarray] = field(factory=dict)
    second: dict[str, np.ndarray] = field(factory=dict)
    step: int = 0
    skipped: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamWState":
        return cls(
            {name: np.zeros_like(value) for name, value in params.items()},
            {name: np.zeros_like(value) for name, value in params.items()},
        )


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    hyper: AdamWHyper = AdamWHyper(),
) -> tuple[dict[str, np.ndarray], AdamWState]:
    """One bias-corrected AdamW update.

    A step whose gradients are not all finite is skipped: parameters and
    moments come back unchanged and the skip counter goes up.

    Args:
        params (dict[str, np.ndarray]): current parameters
        grads (dict[str, np.ndarray]): gradients, same keys and shapes
        state (AdamWState): the moments
        lr (float): the learning rate for this step
        hyper (AdamWHyper, optional): betas, eps and weight decay

    Raises:
        DimensionError: when a gradient shape differs from its parameter

    Returns:
        tuple[dict[str, np.ndarray], AdamWState]: new parameters and state
    """
    for name, value in params.items():
        if grads[name].shape != value.shape:
            raise DimensionError(
                f"gradient for {name} has shape {grads[name].shape}, "
                f"expected {value.shape}"
            )

    if not all(np.all(np.isfinite(grad)) for grad in grads.values()):
        logger.warning(
            "non-finite gradient at optimizer step %d, step skipped", state.step
        )
        return params, evolve(state, skipped=state.skipped + 1)

    step = state.step + 1
    correction1 = 1.0 - hyper.beta1**step
    correction2 = 1.0 - hyper.beta2**step

    new_params, first, second = {}, {}, {}
    for name, value in params.items():
        grad = grads[name]
        first[name] = hyper.beta1 * state.first[name] + (1.0 - hyper.beta1) * grad
        second[name] = (
            hyper.beta2 * state.second[name] + (1.0 - hyper.beta2) * grad * grad
        )

        denominator = np.sqrt(second[name] / correction2) + hyper.eps
        update = (first[name] / correction1) / denominator
        new_params[name] = value * (1.0 - lr * hyper.weight_decay) - lr * update

    return new_params, AdamWState(first, second, step, state.skipped)
