"""Deterministic planted-signal token task.

Every sequence holds m signal tokens near its class direction, a few
large-norm class-independent sink tokens and noise distractors, some of
them verbatim duplicates, all in shuffled order.
"""

import json
import logging
import struct
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from attrs import asdict, evolve, field, frozen

from settings import (
    N_RANGE,
    FEATURE_DIM,
    NUM_CLASSES,
    SIGNAL_TOKENS,
    SINK_COUNT,
    SINK_SCALE,
    SINK_NOISE_FACTOR,
    NOISE_STD,
    DUPLICATE_FRAC,
    SEED,
)
from .difftopk import HardMask, budget_to_k, hard_topk
from .errors import IntegrityError, SpecError
from .tensor import Tensor
from .utils import substream

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"DTKS"
DATASET_VERSION = 1


def _at_least(minimum):
    def check(_instance, attribute, value):
        if value < minimum:
            raise SpecError(f"{attribute.name} must be >= {minimum}, got {value}")

    return check


def _fraction(_instance, attribute, value):
    if not 0.0 <= value < 1.0:
        raise SpecError(f"{attribute.name} must lie in [0, 1), got {value}")


@frozen
class TaskSpec:
    n_range: tuple[int, int] = field(
        default=N_RANGE, converter=lambda r: tuple(int(x) for x in r)
    )
    feature_dim: int = field(default=FEATURE_DIM, validator=_at_least(2))
    num_classes: int = field(default=NUM_CLASSES, validator=_at_least(2))
    signal_tokens: int = field(default=SIGNAL_TOKENS, validator=_at_least(1))
    sink_count: int = field(default=SINK_COUNT, validator=_at_least(0))
    sink_scale: float = field(default=SINK_SCALE, validator=_at_least(0.0))
    noise_std: float = field(default=NOISE_STD, validator=_at_least(0.0))
    duplicate_frac: float = field(default=DUPLICATE_FRAC, validator=_fraction)
    seed: int = field(default=SEED, validator=_at_least(0))

    def __attrs_post_init__(self):
        if len(self.n_range) != 2 or not 2 <= self.n_range[0] <= self.n_range[1]:
            raise SpecError(
                f"n_range {self.n_range} must be [min, max] with 2 <= min <= max"
            )

        if self.signal_tokens + self.sink_count > self.n_range[0]:
            raise SpecError(
                f"signal_tokens + sink_count = {self.signal_tokens + self.sink_count} "
                f"exceeds the shortest sequence length {self.n_range[0]}"
            )

        if self.num_classes + 1 > self.feature_dim:
            raise SpecError(
                f"{self.num_classes} class directions plus the sink direction "
                f"do not fit in {self.feature_dim} dimensions"
            )

    @property
    def max_len(self) -> int:
        return self.n_range[1]

    def clean(self) -> "TaskSpec":
        """The noiseless variant used as the clean validation split"""
        return evolve(self, noise_std=0.0, duplicate_frac=0.0)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["n_range"] = list(self.n_range)
        return data


@frozen
class TokenBatch:
    features: np.ndarray
    valid_len: np.ndarray
    labels: np.ndarray
    signal_idx: np.ndarray

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def max_len(self) -> int:
        return self.features.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[2]

    @property
    def signal_mask(self) -> np.ndarray:
        """[B, N] float mask of the planted signal positions"""
        mask = np.zeros(self.features.shape[:2])
        np.put_along_axis(mask, self.signal_idx, 1.0, axis=1)
        return mask

    def tokens(self) -> Tensor:
        return Tensor(self.features)

    def take(self, indices) -> "TokenBatch":
        indices = np.asarray(indices, dtype=np.int64)
        return TokenBatch(
            self.features[indices],
            self.valid_len[indices],
            self.labels[indices],
            self.signal_idx[indices],
        )

    def batches(
        self, batch_size: int, order: Optional[np.ndarray] = None
    ) -> Iterator["TokenBatch"]:
        """Consecutive batches following order (identity by default)"""
        order = np.arange(len(self)) if order is None else order
        for start in range(0, len(self), batch_size):
            yield self.take(order[start : start + batch_size])


def class_basis(spec: TaskSpec) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal class directions [C, D] and the sink direction [D]"""
    rng = substream(spec.seed, "data", 0)
    gaussian = rng.normal(size=(spec.feature_dim, spec.num_classes + 1))
    basis, _ = np.linalg.qr(gaussian)
    return basis[:, : spec.num_classes].T.copy(), basis[:, spec.num_classes].copy()


def _sequence(spec: TaskSpec, rng: np.random.Generator, label: int, means, sink_dir):
    low, high = spec.n_range
    n = int(rng.integers(low, high + 1))
    dim = spec.feature_dim

    signal = means[label] + spec.noise_std * rng.normal(size=(spec.signal_tokens, dim))
    sink_noise = rng.normal(size=(spec.sink_count, dim))
    sinks = spec.sink_scale * sink_dir + SINK_NOISE_FACTOR * spec.noise_std * sink_noise

    n_noise = n - spec.signal_tokens - spec.sink_count
    noise = spec.noise_std * rng.normal(size=(n_noise, dim))

    n_dup = min(int(np.floor(spec.duplicate_frac * n_noise + 0.5)), n_noise - 1)
    if n_dup > 0:
        copies = rng.choice(n_noise, size=n_dup, replace=False)
        originals = np.setdiff1d(np.arange(n_noise), copies)
        noise[copies] = noise[rng.choice(originals, size=n_dup)]

    stacked = np.concatenate([signal, sinks, noise], axis=0)
    perm = rng.permutation(n)

    return stacked[perm], np.flatnonzero(perm < spec.signal_tokens)


def generate(spec: TaskSpec, count: int, split_seed: int) -> TokenBatch:
    """Generates count sequences, reproducible from (spec.seed, split_seed).

    Each sequence draws from its own seed stream, so any index can be
    regenerated alone. Labels are exactly balanced up to count % C.

    Args:
        spec (TaskSpec): the task
        count (int): number of sequences
        split_seed (int): separates train / val / clean splits

    Raises:
        SpecError: count is negative

    Returns:
        TokenBatch: the dataset, features rounded to float32 precision
    """
    if count < 0:
        raise SpecError(f"cannot generate {count} sequences")

    means, sink_dir = class_basis(spec)
    labels = np.arange(count) % spec.num_classes
    labels = substream(spec.seed, "data", 1, split_seed).permutation(labels)

    features = np.zeros((count, spec.max_len, spec.feature_dim))
    valid_len = np.zeros(count, dtype=np.int64)
    signal_idx = np.zeros((count, spec.signal_tokens), dtype=np.int64)

    for index in range(count):
        rng = substream(spec.seed, "data", 2, split_seed, index)
        tokens, signal = _sequence(spec, rng, int(labels[index]), means, sink_dir)
        features[index, : len(tokens)] = tokens
        valid_len[index] = len(tokens)
        signal_idx[index] = signal

    features = features.astype(np.float32).astype(np.float64)
    logger.debug("generated %d sequences for split %d", count, split_seed)

    return TokenBatch(features, valid_len, labels.astype(np.int64), signal_idx)


def oracle_mask(batch: TokenBatch, budget: float) -> HardMask:
    """Selects every signal token first, then the lowest-index other tokens"""
    k = budget_to_k(batch.valid_len, budget)
    return hard_topk(batch.signal_mask, k, batch.valid_len)


def save_dataset(
    path,
    spec: TaskSpec,
    batch: TokenBatch,
    split_seed: int,
    config: Optional[dict] = None,
):
    """Writes the little-endian DTKS file: header with the task settings echo,
    then one record per sequence"""
    header = json.dumps(
        {"spec": spec.to_dict(), "split_seed": split_seed, "config": config or {}},
        sort_keys=True,
    ).encode("utf-8")

    with open(path, "wb") as file:
        file.write(DATASET_MAGIC)
        file.write(struct.pack("<II", DATASET_VERSION, len(header)))
        file.write(header)
        file.write(
            struct.pack(
                "<IIII",
                len(batch),
                batch.max_len,
                batch.feature_dim,
                batch.signal_idx.shape[1],
            )
        )

        for index in range(len(batch)):
            n = int(batch.valid_len[index])
            file.write(struct.pack("<II", n, int(batch.labels[index])))
            file.write(batch.signal_idx[index].astype("<u4").tobytes())
            file.write(batch.features[index, :n].astype("<f4").tobytes())


def load_dataset(path) -> tuple[TaskSpec, TokenBatch, dict]:
    """Reads a DTKS file

    Raises:
        IntegrityError: bad magic, unsupported version or truncated file
        OSError: when the file cannot be read

    Returns:
        tuple[TaskSpec, TokenBatch, dict]: spec, data and the header echo
    """
    raw = Path(path).read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise IntegrityError(f"{path} is not a dataset file (magic {raw[:4]!r})")

    try:
        version, header_len = struct.unpack_from("<II", raw, 4)
        if version != DATASET_VERSION:
            raise IntegrityError(f"{path} has unsupported dataset version {version}")

        offset = 12
        header = json.loads(raw[offset : offset + header_len].decode("utf-8"))
        offset += header_len

        count, max_len, dim, m = struct.unpack_from("<IIII", raw, offset)
        offset += 16

        features = np.zeros((count, max_len, dim))
        valid_len = np.zeros(count, dtype=np.int64)
        labels = np.zeros(count, dtype=np.int64)
        signal_idx = np.zeros((count, m), dtype=np.int64)

        for index in range(count):
            n, label = struct.unpack_from("<II", raw, offset)
            offset += 8
            signal_idx[index] = np.frombuffer(raw, dtype="<u4", count=m, offset=offset)
            offset += 4 * m
            features[index, :n] = np.frombuffer(
                raw, dtype="<f4", count=n * dim, offset=offset
            ).reshape(n, dim)
            offset += 4 * n * dim
            valid_len[index] = n
            labels[index] = label

    except (struct.error, ValueError) as error:
        raise IntegrityError(f"{path} is truncated or malformed: {error}") from error

    if offset != len(raw):
        raise IntegrityError(f"{path} has {len(raw) - offset} trailing bytes")

    spec_data = header["spec"]
    spec = TaskSpec(**spec_data)

    return spec, TokenBatch(features, valid_len, labels, signal_idx), header
