"""Checkpoint persistence.

Layout, little-endian throughout:
    b"DTKC" | u32 version | u32 section count
    section table: 16-byte ASCII name | u64 offset | u64 length, per section
    section payloads: JSON "meta", JSON "config", raw f64 arrays
    32-byte SHA-256 of every preceding byte
"""

import hashlib
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np
from attrs import field, frozen

from .errors import IntegrityError
from .optim import AdamWState
from .pipeline import BACKBONE_KEYS, FrozenBackbone
from .scorer import ScorerParams

CHECKPOINT_MAGIC = b"DTKC"
CHECKPOINT_VERSION = 1
NAME_SIZE = 16
ENTRY = struct.Struct("<16sQQ")
DIGEST_SIZE = 32


@frozen
class Checkpoint:
    """Training state; scorer and optimizer are absent for
    a backbone-only checkpoint written after pretraining"""

    backbone: FrozenBackbone
    scorer: Optional[ScorerParams] = None
    optimizer: Optional[AdamWState] = None
    step: int = 0
    config: dict = field(factory=dict)
    version: int = CHECKPOINT_VERSION


def _prefixed(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {
        key[len(prefix) :]: value
        for key, value in arrays.items()
        if key.startswith(prefix)
    }


def _arrays(checkpoint: Checkpoint) -> dict[str, np.ndarray]:
    backbone = checkpoint.backbone.arrays()
    arrays = {f"backbone.{key}": value for key, value in backbone.items()}

    if checkpoint.scorer is not None:
        arrays.update({f"scorer.{k}": v for k, v in checkpoint.scorer.arrays().items()})

    if checkpoint.optimizer is not None:
        state = checkpoint.optimizer
        arrays.update({f"adam.m.{k}": v for k, v in state.first.items()})
        arrays.update({f"adam.v.{k}": v for k, v in state.second.items()})

    return arrays


def save_checkpoint(path, checkpoint: Checkpoint):
    """Writes a checkpoint file

    Args:
        path: destination file
        checkpoint (Checkpoint): the state to persist
    """
    arrays = _arrays(checkpoint)
    optimizer = checkpoint.optimizer
    meta = {
        "version": checkpoint.version,
        "step": checkpoint.step,
        "frozen": checkpoint.backbone.frozen,
        "shapes": {name: list(value.shape) for name, value in arrays.items()},
        "optimizer": None
        if optimizer is None
        else {"step": optimizer.step, "skipped": optimizer.skipped},
    }

    sections = [
        ("meta", json.dumps(meta, sort_keys=True).encode("utf-8")),
        ("config", json.dumps(checkpoint.config, sort_keys=True).encode("utf-8")),
    ]
    sections += [
        (name, np.ascontiguousarray(value, dtype="<f8").tobytes())
        for name, value in arrays.items()
    ]

    header = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(sections))
    offset = len(header) + ENTRY.size * len(sections)

    table = b""
    for name, payload in sections:
        table += ENTRY.pack(name.encode("ascii"), offset, len(payload))
        offset += len(payload)

    body = header + table + b"".join(payload for _, payload in sections)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_checkpoint(path) -> Checkpoint:
    """Reads and verifies a checkpoint file

    Raises:
        IntegrityError: bad magic, version or checksum
        OSError: when the file cannot be read

    Returns:
        Checkpoint: the restored state, bitwise identical to what was saved
    """
    raw = Path(path).read_bytes()
    if len(raw) < 12 + DIGEST_SIZE or raw[:4] != CHECKPOINT_MAGIC:
        raise IntegrityError(f"{path} is not a checkpoint file")

    body, digest = raw[:-DIGEST_SIZE], raw[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path} failed its checksum, the file is corrupted")

    version, count = struct.unpack_from("<II", body, 4)
    if version != CHECKPOINT_VERSION:
        raise IntegrityError(f"{path} has unsupported checkpoint version {version}")

    sections = {}
    for index in range(count):
        name, offset, length = ENTRY.unpack_from(body, 12 + index * ENTRY.size)
        sections[name.rstrip(b"\0").decode("ascii")] = body[offset : offset + length]

    meta = json.loads(sections.pop("meta"))
    config = json.loads(sections.pop("config"))
    arrays = {
        name: np.frombuffer(payload, dtype="<f8")
        .reshape(meta["shapes"][name])
        .astype(np.float64)
        for name, payload in sections.items()
    }

    backbone = FrozenBackbone(
        **{key: arrays[f"backbone.{key}"] for key in BACKBONE_KEYS},
        frozen=meta["frozen"],
    )

    scorer = None
    if "scorer.w_q" in arrays:
        scorer = ScorerParams.from_arrays(
            {"w_q": arrays["scorer.w_q"], "w_k": arrays["scorer.w_k"]}
        )

    optimizer = None
    if meta["optimizer"] is not None:
        optimizer = AdamWState(
            _prefixed(arrays, "adam.m."),
            _prefixed(arrays, "adam.v."),
            meta["optimizer"]["step"],
            meta["optimizer"]["skipped"],
        )

    return Checkpoint(backbone, scorer, optimizer, meta["step"], config, version)
