"""Contains the selection pipeline: score, mask or gather, then
hand the surviving tokens to the frozen backbone
"""

import hashlib
import logging
import math
from typing import Optional

import numpy as np
from attrs import field, frozen

from settings import (
    HIDDEN_DIM,
    PRETRAIN_EPOCHS,
    PRETRAIN_LR,
    PRETRAIN_MIN_ACCURACY,
    BATCH_SIZE,
)
from .difftopk import (
    HardMask,
    SoftMaskResult,
    budget_to_k,
    diff_topk_forward,
    hard_topk,
)
from .errors import ConfigError, PretrainError
from .objective import task_loss
from .optim import AdamWState, adamw_step
from .scorer import ScorerParams, score
from .synth_data import TokenBatch
from .tensor import Tape, Tensor, no_grad
from .utils import substream, valid_mask

logger = logging.getLogger(__name__)

BACKBONE_KEYS = ("w1", "b1", "w2", "b2")


def _readonly(value) -> np.ndarray:
    array = np.array(value, dtype=np.float64)
    array.flags.writeable = False
    return array


@frozen
class FrozenBackbone:
    """Mask-weighted mean pool followed by a tanh MLP, D -> H -> C"""

    w1: np.ndarray = field(converter=_readonly)
    b1: np.ndarray = field(converter=_readonly)
    w2: np.ndarray = field(converter=_readonly)
    b2: np.ndarray = field(converter=_readonly)
    frozen: bool = True

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def num_classes(self) -> int:
        return self.w2.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {key: getattr(self, key) for key in BACKBONE_KEYS}

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        arrays = self.arrays()
        return {key: Tensor(value, requires_grad) for key, value in arrays.items()}

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for key in BACKBONE_KEYS:
            array = np.ascontiguousarray(getattr(self, key), dtype="<f8")
            digest.update(array.tobytes())
        return digest.hexdigest()

    def head(
        self, pooled: Tensor, weights: Optional[dict[str, Tensor]] = None
    ) -> Tensor:
        """Class logits [B, C] from pooled features [B, D]"""
        weights = weights or self.tensors()
        hidden = (pooled @ weights["w1"] + weights["b1"]).tanh()
        return hidden @ weights["w2"] + weights["b2"]


@frozen
class PipelineOutput:
    logits: Tensor
    selection: Optional[SoftMaskResult]
    hard: HardMask


def pool(tokens: Tensor, weights) -> Tensor:
    """Weighted mean over tokens, [B, N, D] x [B, N] -> [B, D]"""
    weights = weights if isinstance(weights, Tensor) else Tensor(weights)
    batch, n, dim = tokens.shape
    normalized = weights / weights.sum(axis=1, keepdims=True)
    return (normalized.reshape(batch, 1, n) @ tokens).reshape(batch, dim)


def forward_train(
    batch: TokenBatch, scorer: ScorerParams, backbone: FrozenBackbone, budget: float
) -> PipelineOutput:
    """Training path: the full sequence is kept and every token is
    scaled by its soft mask value, V_pruned = M_soft * V.

    Raises:
        ConfigError: the backbone is not frozen
        BudgetError: the budget is outside (0, 1)
    """
    if not backbone.frozen:
        raise ConfigError("scorer training needs a frozen backbone")

    tokens = batch.tokens()
    size, n, _ = tokens.shape

    scores = score(tokens, scorer, batch.valid_len)
    k = budget_to_k(batch.valid_len, budget)
    selection = diff_topk_forward(scores, k, batch.valid_len)
    hard = hard_topk(scores, k, batch.valid_len)

    mask = selection.soft_mask
    pruned = tokens * mask.reshape(size, n, 1)
    pooled = pruned.sum(axis=1) / mask.sum(axis=1, keepdims=True)

    return PipelineOutput(backbone.head(pooled), selection, hard)


def infer_from_mask(
    batch: TokenBatch, hard: HardMask, backbone: FrozenBackbone
) -> Tensor:
    """Gathers exactly k tokens per row and runs the backbone on them only.
    Rows are grouped by k so every matmul sees the reduced length.

    Returns:
        Tensor: logits [B, C]
    """
    logits = np.zeros((len(batch), backbone.num_classes))

    with no_grad():
        for k in np.unique(hard.k):
            rows = np.flatnonzero(hard.k == k)
            index = np.nonzero(hard.mask[rows])[1].reshape(len(rows), int(k))

            gathered = Tensor(batch.features[rows]).gather_tokens(index)
            pooled = pool(gathered, np.ones((len(rows), int(k))))
            logits[rows] = backbone.head(pooled).data

    return Tensor(logits)


def forward_infer(
    batch: TokenBatch, scorer: ScorerParams, backbone: FrozenBackbone, budget: float
) -> PipelineOutput:
    """Inference path: hard Top-K on the scores, then only the selected
    tokens reach the backbone. Nothing is recorded on a tape."""
    if not backbone.frozen:
        raise ConfigError("inference needs a frozen backbone")

    with no_grad():
        scores = score(batch.tokens(), scorer, batch.valid_len)
        k = budget_to_k(batch.valid_len, budget)
        hard = hard_topk(scores, k, batch.valid_len)

    return PipelineOutput(infer_from_mask(batch, hard, backbone), None, hard)


def forward_full(
    batch: TokenBatch,
    backbone: FrozenBackbone,
    weights: Optional[dict[str, Tensor]] = None,
) -> Tensor:
    """Full-token path, plain mean over every valid token"""
    tokens = batch.tokens()
    pooled = pool(tokens, valid_mask(batch.valid_len, batch.max_len).astype(np.float64))
    return backbone.head(pooled, weights)


def accuracy(logits, labels) -> float:
    values = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return float(np.mean(np.argmax(values, axis=1) == np.asarray(labels)))


def full_token_accuracy(
    batch: TokenBatch, backbone: FrozenBackbone, batch_size: int = 1024
) -> float:
    correct = 0.0
    with no_grad():
        for part in batch.batches(batch_size):
            correct += accuracy(forward_full(part, backbone), part.labels) * len(part)

    return correct / max(len(batch), 1)


def init_backbone(
    input_dim: int, num_classes: int, hidden_dim: int, seed: int
) -> FrozenBackbone:
    """Gaussian input layer, zero output layer, so an untrained
    backbone predicts one constant class"""
    rng = substream(seed, "init", 1)
    return FrozenBackbone(
        rng.normal(0.0, 1.0 / math.sqrt(input_dim), size=(input_dim, hidden_dim)),
        np.zeros(hidden_dim),
        np.zeros((hidden_dim, num_classes)),
        np.zeros(num_classes),
        frozen=False,
    )


def pretrain_backbone(
    train: TokenBatch,
    clean_val: TokenBatch,
    num_classes: int,
    epochs: int = PRETRAIN_EPOCHS,
    seed: int = 0,
    hidden_dim: int = HIDDEN_DIM,
    lr: float = PRETRAIN_LR,
    batch_size: int = BATCH_SIZE,
    min_accuracy: Optional[float] = PRETRAIN_MIN_ACCURACY,
) -> FrozenBackbone:
    """Trains the stand-in backbone on full token sequences, then freezes it.

    Args:
        train (TokenBatch): the training split
        clean_val (TokenBatch): the noiseless validation split
        num_classes (int): C
        epochs (int, optional): passes over train, 0 leaves it untrained
        seed (int, optional): the run seed
        hidden_dim (int, optional): H
        lr (float, optional): constant AdamW learning rate
        batch_size (int, optional): sequences per step
        min_accuracy (float, optional): required clean accuracy, None skips the check

    Raises:
        PretrainError: the clean accuracy stays below min_accuracy

    Returns:
        FrozenBackbone: the frozen backbone
    """
    backbone = init_backbone(train.feature_dim, num_classes, hidden_dim, seed)
    params = backbone.arrays()
    state = AdamWState.zeros_like(params)

    last_loss = float("nan")
    for epoch in range(epochs):
        order = substream(seed, "shuffle", 1, epoch).permutation(len(train))

        for part in train.batches(batch_size, order):
            with Tape() as tape:
                weights = {
                    key: Tensor(value, requires_grad=True)
                    for key, value in params.items()
                }
                loss = task_loss(forward_full(part, backbone, weights), part.labels)
                tape.backward(loss)

            grads = {key: weights[key].grad for key in BACKBONE_KEYS}
            params, state = adamw_step(params, grads, state, lr)
            last_loss = loss.item()

        logger.info(
            "pretrain epoch %d/%d, last batch loss %.4f", epoch + 1, epochs, last_loss
        )

    backbone = FrozenBackbone(**params, frozen=True)
    clean_accuracy = full_token_accuracy(clean_val, backbone)
    logger.info("backbone clean accuracy %.4f", clean_accuracy)

    if min_accuracy is not None and clean_accuracy < min_accuracy:
        raise PretrainError(clean_accuracy, min_accuracy)

    return backbone
