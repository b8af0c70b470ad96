"""Contains the learnable importance scorer"""

import math

import numpy as np
from attrs import frozen, field

from settings import INIT_STD, PADDED_SCORE
from .errors import DimensionError
from .tensor import Tensor, as_tensor
from .utils import substream, valid_mask


def _same_shape(instance, _attribute, w_k):
    if instance.w_q.shape != w_k.shape or instance.w_q.ndim != 2:
        raise DimensionError(
            f"projections must share a [D, d] shape, "
            f"got {instance.w_q.shape} and {w_k.shape}"
        )


@frozen
class ScorerParams:
    """The two projections W_q, W_k of shape [D, d]"""

    w_q: Tensor = field(converter=as_tensor)
    w_k: Tensor = field(converter=as_tensor, validator=_same_shape)

    @property
    def input_dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def proj_dim(self) -> int:
        return self.w_q.shape[1]

    @property
    def parameter_count(self) -> int:
        return 2 * self.input_dim * self.proj_dim

    def trainable(self) -> "ScorerParams":
        """Fresh leaf tensors that collect gradients on the next tape"""
        return ScorerParams(
            Tensor(self.w_q.data, requires_grad=True),
            Tensor(self.w_k.data, requires_grad=True),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {"w_q": self.w_q.numpy(), "w_k": self.w_k.numpy()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ScorerParams":
        return cls(Tensor(arrays["w_q"]), Tensor(arrays["w_k"]))


def init_scorer(
    input_dim: int, proj_dim: int, seed: int, std: float = INIT_STD
) -> ScorerParams:
    """Near-zero initialization, every weight drawn from N(0, std^2)

    Args:
        input_dim (int): D, the token feature size
        proj_dim (int): d, the projection size
        seed (int): the run seed, the "init" sub-stream is used
        std (float, optional): Defaults to 1e-4.

    Raises:
        DimensionError: when a dimension is below 1

    Returns:
        ScorerParams: the parameters
    """
    if input_dim < 1 or proj_dim < 1:
        raise DimensionError(
            f"scorer dimensions must be positive, got D={input_dim} d={proj_dim}"
        )

    rng = substream(seed, "init")
    w_q = rng.normal(0.0, std, size=(input_dim, proj_dim))
    w_k = rng.normal(0.0, std, size=(input_dim, proj_dim))

    return ScorerParams(w_q, w_k)


def score(tokens: Tensor, params: ScorerParams, valid_len) -> Tensor:
    """Importance score of every token: the row mean of
    A = (V W_q)(V W_k)^T / sqrt(d) over valid columns.

    The diagonal of A is part of the mean. Padded positions get a large
    negative score so no selector ever picks them.

    Args:
        tokens (Tensor): V of shape [B, N, D]
        params (ScorerParams): the projections
        valid_len: valid tokens per row

    Raises:
        DimensionError: when D does not match the projections

    Returns:
        Tensor: scores of shape [B, N]
    """
    tokens = as_tensor(tokens)
    if tokens.ndim != 3 or tokens.shape[2] != params.input_dim:
        raise DimensionError(
            f"tokens of shape {tokens.shape} "
            f"do not match projections {params.w_q.shape}"
        )

    n = tokens.shape[1]
    valid = valid_mask(valid_len, n).astype(np.float64)
    if valid.shape[0] != tokens.shape[0]:
        valid = np.broadcast_to(valid, (tokens.shape[0], n))

    queries = tokens @ params.w_q
    keys = tokens @ params.w_k
    interactions = (queries @ keys.transpose()).scale(1.0 / math.sqrt(params.proj_dim))

    counts = valid.sum(axis=1, keepdims=True)
    scores = (interactions * valid[:, None, :]).sum(axis=-1) / counts

    return scores * valid + PADDED_SCORE * (1.0 - valid)


def scorer_flop_count(n: int, input_dim: int, proj_dim: int) -> int:
    """Matmul flops of scoring one sequence of n tokens"""
    return 2 * (2 * n * input_dim * proj_dim) + 2 * n * n * proj_dim
