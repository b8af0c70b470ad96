"""Run configuration: settings.py defaults, overridden by a TOML file,
overridden by command-line flags"""

import logging
from typing import Optional

import toml
from attrs import asdict, evolve, field, fields, frozen

from settings import (
    BATCH_SIZE,
    BENCH_BATCH,
    BENCH_REPEATS,
    BENCH_TOKENS,
    HIDDEN_DIM,
    PRETRAIN_EPOCHS,
    PRETRAIN_LR,
    PRETRAIN_MIN_ACCURACY,
    SEED,
    SWEEP_BUDGETS,
    TRAIN_SIZE,
    VAL_SIZE,
)
from .errors import ConfigError, TokenSelectError
from .synth_data import TaskSpec
from .training import TrainConfig

logger = logging.getLogger(__name__)


def _positive(_instance, attribute, value):
    if value < 1:
        raise ConfigError(f"{attribute.name} must be at least 1, got {value}")


def _budgets(_instance, attribute, value):
    if not value or not all(0.0 < budget < 1.0 for budget in value):
        raise ConfigError(
            f"{attribute.name} must be a non-empty list inside (0, 1), "
            f"got {list(value)}"
        )


@frozen
class PretrainConfig:
    epochs: int = field(default=PRETRAIN_EPOCHS)
    hidden_dim: int = field(default=HIDDEN_DIM, validator=_positive)
    lr: float = PRETRAIN_LR
    batch_size: int = field(default=BATCH_SIZE, validator=_positive)
    min_accuracy: float = PRETRAIN_MIN_ACCURACY

    def __attrs_post_init__(self):
        if self.epochs < 0 or self.lr <= 0:
            raise ConfigError(
                f"pretrain needs epochs >= 0 and lr > 0, "
                f"got {self.epochs} and {self.lr}"
            )


@frozen
class EvalConfig:
    budgets: tuple[float, ...] = field(
        default=SWEEP_BUDGETS, converter=tuple, validator=_budgets
    )
    workers: int = field(default=1, validator=_positive)
    bench_tokens: int = field(default=BENCH_TOKENS, validator=_positive)
    bench_batch: int = field(default=BENCH_BATCH, validator=_positive)
    bench_repeats: int = BENCH_REPEATS
    timing: bool = False


@frozen
class PathsConfig:
    data_dir: str = "data"
    backbone: str = "runs/backbone.dtkc"
    scorer: str = "runs/scorer.dtkc"
    reports: str = "runs"


SECTIONS = {
    "train": TrainConfig,
    "pretrain": PretrainConfig,
    "eval": EvalConfig,
    "paths": PathsConfig,
}
TASK_EXTRA = ("train_size", "val_size")


@frozen
class RunConfig:
    seed: int = SEED
    task: TaskSpec = field(factory=TaskSpec)
    train_size: int = field(default=TRAIN_SIZE, validator=_positive)
    val_size: int = field(default=VAL_SIZE, validator=_positive)
    train: TrainConfig = field(factory=TrainConfig)
    pretrain: PretrainConfig = field(factory=PretrainConfig)
    eval: EvalConfig = field(factory=EvalConfig)
    paths: PathsConfig = field(factory=PathsConfig)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["task"] = self.task.to_dict()
        data["eval"]["budgets"] = list(self.eval.budgets)
        return data

    def with_overrides(
        self,
        seed: Optional[int] = None,
        budget: Optional[float] = None,
        **paths: Optional[str],
    ) -> "RunConfig":
        """Applies command-line flags; None leaves a value untouched

        Raises:
            ConfigError: an override fails validation
        """
        config = self
        try:
            if seed is not None:
                config = evolve(
                    config,
                    seed=seed,
                    task=evolve(config.task, seed=seed),
                    train=evolve(config.train, seed=seed),
                )

            if budget is not None:
                config = evolve(config, train=evolve(config.train, budget=budget))

            changed = {key: value for key, value in paths.items() if value is not None}
            if changed:
                config = evolve(config, paths=evolve(config.paths, **changed))
        except TypeError as error:
            raise ConfigError(str(error)) from error

        return config


def _known(section: str, values: dict, allowed) -> dict:
    unknown = sorted(set(values) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    return values


def from_dict(data: dict) -> RunConfig:
    """Builds and validates a RunConfig from parsed TOML

    Raises:
        ConfigError: unknown sections or keys, wrong types, invalid values
        SpecError: the task section describes an impossible task
    """
    _known("top level", data, ("seed", "task", *SECTIONS))
    seed = data.get("seed", SEED)

    try:
        task_keys = [a.name for a in fields(TaskSpec) if a.name != "seed"]
        task_keys += TASK_EXTRA
        task_values = dict(_known("task", data.get("task", {}), task_keys))
        sizes = {key: task_values.pop(key) for key in TASK_EXTRA if key in task_values}
        task = TaskSpec(**task_values, seed=seed)

        sections = {}
        for name, cls in SECTIONS.items():
            if name == "train":
                allowed = [a.name for a in fields(cls) if a.name != "seed"]
                values = _known(name, data.get(name, {}), allowed)
                sections[name] = cls(**values, seed=seed)
            else:
                allowed = [a.name for a in fields(cls)]
                sections[name] = cls(**_known(name, data.get(name, {}), allowed))

        return RunConfig(seed, task, **sizes, **sections)
    except TokenSelectError:
        raise
    except (TypeError, ValueError) as error:
        raise ConfigError(f"invalid configuration: {error}") from error


def load_config(path=None) -> RunConfig:
    """Reads a TOML config file, or returns the defaults when path is None

    Raises:
        ConfigError: the file is not valid TOML or fails validation
        OSError: the file cannot be read
    """
    if path is None:
        return from_dict({})

    try:
        data = toml.load(path)
    except toml.TomlDecodeError as error:
        raise ConfigError(f"{path} is not valid TOML: {error}") from error

    logger.debug("loaded config from %s", path)
    return from_dict(data)
