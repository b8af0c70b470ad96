from enum import Enum
import zlib

import numpy as np


class Selector(Enum):
    LEARNED = "learned"
    RANDOM = "random"
    NORM = "norm"
    ORACLE = "oracle"


SEED_STREAMS = ("data", "init", "shuffle", "eval", "bench", "gradcheck")


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Gets a generator for one named sub-stream of the run seed

    Args:
        seed (int): the run seed
        name (str): one of SEED_STREAMS
        *extra (int): further integers mixed into the stream (epoch, index ...)

    Raises:
        KeyError: when the stream name is unknown

    Returns:
        np.random.Generator: the generator
    """
    if name not in SEED_STREAMS:
        raise KeyError(f"unknown seed stream {name!r}")

    entropy = [int(seed), zlib.crc32(name.encode("ascii"))] + [int(x) for x in extra]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Overflow free logistic function, exp is only ever taken of -|x|"""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def valid_mask(valid_len, n: int) -> np.ndarray:
    """Boolean [B, n] mask that is True on positions below each row's valid length"""
    valid_len = np.asarray(valid_len, dtype=np.int64).reshape(-1)
    return np.arange(n)[None, :] < valid_len[:, None]
