"""Scorer-only training: frozen backbone, fixed budget, AdamW with
warmup plus cosine learning rate and an annealed constraint weight
"""

import json
import logging
import math
from datetime import datetime, timezone
from typing import Optional

from attrs import asdict, field, frozen, validators

from settings import (
    ADAM_BETAS,
    ADAM_EPS,
    BATCH_SIZE,
    BUDGET,
    EPOCHS,
    EVAL_EVERY,
    LAMBDA_END,
    LAMBDA_START,
    LR_PEAK,
    SEED,
    WARMUP_FRAC,
    WEIGHT_DECAY,
)
from .checkpoint import Checkpoint, save_checkpoint
from .difftopk import soft_hard_gap
from .errors import ConfigError
from .evaluation import evaluate
from .objective import (
    AnnealSchedule,
    constraint_loss,
    lambda_at,
    polarization,
    task_loss,
    total_loss,
)
from .optim import AdamWHyper, AdamWState, adamw_step
from .pipeline import FrozenBackbone, forward_train, full_token_accuracy
from .scorer import ScorerParams, init_scorer
from .synth_data import TokenBatch
from .tensor import Tape
from .utils import Selector, substream

logger = logging.getLogger(__name__)


def _check(condition, message):
    def check(_instance, attribute, value):
        if not condition(value):
            raise ConfigError(f"{attribute.name}={value!r}: {message}")

    return check


_fraction = _check(lambda x: 0.0 < x < 1.0, "must lie in (0, 1)")
_half_open = _check(lambda x: 0.0 <= x < 1.0, "must lie in [0, 1)")
_positive = _check(lambda x: x > 0.0, "must be positive")
_count = _check(lambda x: x >= 1, "must be at least 1")
_non_negative = _check(lambda x: x >= 0, "must be >= 0")


@frozen
class TrainConfig:
    budget: float = field(default=BUDGET, validator=_fraction)
    lr_peak: float = field(default=LR_PEAK, validator=_positive)
    warmup_frac: float = field(default=WARMUP_FRAC, validator=_half_open)
    epochs: int = field(default=EPOCHS, validator=_count)
    batch_size: int = field(default=BATCH_SIZE, validator=_count)
    lambda_start: float = field(default=LAMBDA_START, validator=_non_negative)
    lambda_end: float = field(default=LAMBDA_END, validator=_non_negative)
    beta1: float = field(default=ADAM_BETAS[0], validator=_half_open)
    beta2: float = field(default=ADAM_BETAS[1], validator=_half_open)
    eps: float = field(default=ADAM_EPS, validator=_positive)
    weight_decay: float = field(default=WEIGHT_DECAY, validator=_non_negative)
    seed: int = field(default=SEED, validator=_non_negative)
    eval_every: int = field(default=EVAL_EVERY, validator=_count)
    checkpoint_path: Optional[str] = None
    proj_dim: Optional[int] = field(
        default=None,
        validator=_check(lambda d: d is None or d >= 1, "must be at least 1"),
    )
    # reserved, accumulation is not implemented
    grad_accum_steps: int = field(
        default=1, validator=_check(lambda g: g == 1, "only 1 is supported")
    )

    def __attrs_post_init__(self):
        if self.lambda_end < self.lambda_start:
            raise ConfigError(
                f"lambda_end {self.lambda_end} is below "
                f"lambda_start {self.lambda_start}"
            )

    @property
    def hyper(self) -> AdamWHyper:
        return AdamWHyper(self.beta1, self.beta2, self.eps, self.weight_decay)

    def steps_per_epoch(self, train_size: int) -> int:
        return math.ceil(train_size / self.batch_size)

    def total_steps(self, train_size: int) -> int:
        return self.epochs * self.steps_per_epoch(train_size)


@frozen
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[dict]


def lr_at(config: TrainConfig, t: int, total_steps: int) -> float:
    """Linear warmup from 0 to lr_peak, then cosine decay to 0 at total_steps

    Args:
        config (TrainConfig): supplies lr_peak and warmup_frac
        t (int): the step, t >= 0
        total_steps (int): the length of the run

    Returns:
        float: the learning rate at step t
    """
    warmup = math.floor(config.warmup_frac * total_steps + 0.5)
    if t < warmup:
        return config.lr_peak * t / warmup

    progress = min((t - warmup) / max(total_steps - warmup, 1), 1.0)
    return config.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


class MetricLog:
    """JSON-lines metric writer. Meta lines are the only ones with a timestamp.
    A resumed run appends to the existing file behind a second meta line"""

    def __init__(
        self,
        path=None,
        config: Optional[dict] = None,
        resumed_at: Optional[int] = None,
    ):
        self.__file = None
        if path is not None:
            mode = "w" if resumed_at is None else "a"
            # pylint: disable-next=consider-using-with
            self.__file = open(path, mode, encoding="utf-8")
            meta = {
                "kind": "meta",
                "started": datetime.now(timezone.utc).isoformat(),
                "config": config or {},
            }
            if resumed_at is not None:
                meta["resumed_at"] = resumed_at
            self.__write(meta)

    def __write(self, record: dict):
        self.__file.write(json.dumps(record, sort_keys=True) + "\n")
        self.__file.flush()

    def write(self, record: dict):
        if self.__file is not None:
            self.__write(record)

    def close(self):
        if self.__file is not None:
            self.__file.close()
            self.__file = None

    def __enter__(self) -> "MetricLog":
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def _check_inputs(
    train: TokenBatch, backbone: FrozenBackbone, val: Optional[TokenBatch]
):
    if not backbone.frozen:
        raise ConfigError("scorer training needs a frozen backbone")

    for name, split in (("train", train), ("val", val)):
        if split is None:
            continue

        if split.feature_dim != backbone.input_dim:
            raise ConfigError(
                f"{name} tokens have D={split.feature_dim}, "
                f"the backbone expects {backbone.input_dim}"
            )

        if len(split) and int(split.labels.max()) >= backbone.num_classes:
            raise ConfigError(
                f"{name} labels reach {int(split.labels.max())}, "
                f"the backbone has {backbone.num_classes} classes"
            )

    if len(train) == 0:
        raise ConfigError("the training split is empty")


# settings a resumed run must share with the interrupted one
RESUME_KEYS = (
    "budget",
    "lr_peak",
    "warmup_frac",
    "epochs",
    "batch_size",
    "lambda_start",
    "lambda_end",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "seed",
)


def _check_resume(config: TrainConfig, resume: Checkpoint, backbone: FrozenBackbone):
    if resume.backbone.checksum() != backbone.checksum():
        raise ConfigError(
            "the resumed checkpoint was trained against a different backbone"
        )

    echo = resume.config or {}
    recorded = dict(echo.get("train", echo))
    if "seed" in echo:
        recorded["seed"] = echo["seed"]

    current = asdict(config)
    changed = [
        f"{key} {recorded[key]!r} -> {current[key]!r}"
        for key in RESUME_KEYS
        if key in recorded and recorded[key] != current[key]
    ]
    if config.proj_dim is not None and config.proj_dim != resume.scorer.proj_dim:
        changed.append(f"proj_dim {resume.scorer.proj_dim} -> {config.proj_dim}")

    if changed:
        raise ConfigError(
            f"cannot resume under a different recipe: {', '.join(changed)}"
        )


def train_scorer(
    config: TrainConfig,
    train: TokenBatch,
    backbone: FrozenBackbone,
    val: Optional[TokenBatch] = None,
    resume: Optional[Checkpoint] = None,
    log_path=None,
    stop_after: Optional[int] = None,
    config_echo: Optional[dict] = None,
) -> TrainResult:
    """Trains the scorer on top of a frozen backbone.

    Every epoch walks the training split in an order drawn from the
    ("shuffle", epoch) stream, so a run resumed at any step sees the
    same batches as an uninterrupted one.

    Args:
        config (TrainConfig): the recipe
        train (TokenBatch): the training split
        backbone (FrozenBackbone): the frozen backbone, never updated
        val (TokenBatch, optional): evaluated every eval_every steps and at the end
        resume (Checkpoint, optional): continue from this state
        log_path (optional): JSON-lines metric log destination
        stop_after (int, optional): stop once this global step is reached
        config_echo (dict, optional): stored in checkpoints and the log meta line

    Raises:
        ConfigError: frozen flag unset, dataset and backbone disagree or
            the resumed checkpoint was trained under another recipe

    Returns:
        TrainResult: the final checkpoint and the metric records
    """
    _check_inputs(train, backbone, val)
    echo = config_echo if config_echo is not None else asdict(config)

    total = config.total_steps(len(train))
    per_epoch = config.steps_per_epoch(len(train))
    schedule = AnnealSchedule(config.lambda_start, config.lambda_end, total)
    hyper = config.hyper

    if resume is not None and resume.scorer is not None:
        _check_resume(config, resume, backbone)
        scorer, state, step = resume.scorer, resume.optimizer, resume.step
        state = state or AdamWState.zeros_like(scorer.arrays())
        logger.info("resuming scorer training at step %d/%d", step, total)
    else:
        proj_dim = config.proj_dim or max(train.feature_dim // 2, 1)
        scorer = init_scorer(train.feature_dim, proj_dim, config.seed)
        state = AdamWState.zeros_like(scorer.arrays())
        step = 0

    full_accuracy = full_token_accuracy(val, backbone) if val is not None else None
    end = total if stop_after is None else min(total, stop_after)
    metrics: list[dict] = []

    def snapshot() -> Checkpoint:
        return Checkpoint(backbone, scorer, state, step, echo)

    resumed_at = step if resume is not None and resume.scorer is not None else None
    with MetricLog(log_path, echo, resumed_at) as log:
        epoch, order = -1, None

        while step < end:
            if step // per_epoch != epoch:
                epoch = step // per_epoch
                shuffle = substream(config.seed, "shuffle", 0, epoch)
                order = shuffle.permutation(len(train))

            offset = (step % per_epoch) * config.batch_size
            batch = train.take(order[offset : offset + config.batch_size])

            weight = lambda_at(schedule, step)
            lr = lr_at(config, step, total)

            with Tape() as tape:
                params = scorer.trainable()
                output = forward_train(batch, params, backbone, config.budget)
                task = task_loss(output.logits, batch.labels)
                constraint = constraint_loss(
                    output.selection.soft_mask, output.hard, batch.valid_len
                )
                loss = total_loss(task, constraint, weight)
                tape.backward(loss)

            grads = {"w_q": params.w_q.grad, "w_k": params.w_k.grad}
            arrays, state = adamw_step(scorer.arrays(), grads, state, lr, hyper)
            scorer = ScorerParams.from_arrays(arrays)
            step += 1

            record = {
                "kind": "step",
                "step": step,
                "epoch": epoch,
                "loss": loss.item(),
                "task_loss": task.item(),
                "constraint_loss": constraint.item(),
                "lambda": weight,
                "lr": lr,
                "soft_hard_gap": soft_hard_gap(
                    output.selection.soft_mask, output.hard, batch.valid_len
                ),
                "polarization": polarization(output.selection.soft_mask),
                "skipped": state.skipped,
            }
            log.write(record)
            metrics.append(record)

            if val is not None and (step % config.eval_every == 0 or step == total):
                row = evaluate(
                    Selector.LEARNED,
                    config.budget,
                    val,
                    backbone,
                    scorer,
                    config.seed,
                    full_accuracy,
                )
                record = {
                    "kind": "eval",
                    "step": step,
                    "accuracy": row.accuracy,
                    "retention": row.retention,
                    "signal_recall": row.signal_recall,
                    "signal_precision": row.signal_precision,
                    "soft_hard_gap": row.soft_hard_gap,
                    "logit_gap": row.logit_gap,
                }
                log.write(record)
                metrics.append(record)
                logger.info(
                    "step %d/%d: val accuracy %.4f, retention %.4f, recall %.4f",
                    step,
                    total,
                    row.accuracy,
                    row.retention,
                    row.signal_recall,
                )

                if config.checkpoint_path:
                    save_checkpoint(config.checkpoint_path, snapshot())

    if state.skipped:
        logger.warning(
            "%d optimizer step(s) skipped on non-finite gradients", state.skipped
        )

    checkpoint = snapshot()
    if config.checkpoint_path:
        save_checkpoint(config.checkpoint_path, checkpoint)

    return TrainResult(checkpoint, metrics)
