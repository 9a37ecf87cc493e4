"""Checkpoints: parameters, Adam moments, config snapshot and step, in the tensor container."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import container
from .errors import CheckpointError, DimensionError


@dataclass
class Checkpoint:
    step: int
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0
    config: dict[str, Any] = field(default_factory=dict)
    corpus_fingerprint: str = ""

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v for k, v in self.params.items()}
        out.update({f"adam_m/{k}": v for k, v in self.adam_m.items()})
        out.update({f"adam_v/{k}": v for k, v in self.adam_v.items()})
        return out


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    meta = {
        "kind": "checkpoint",
        "step": ckpt.step,
        "adam_t": ckpt.adam_t,
        "config": ckpt.config,
        "corpus_fingerprint": ckpt.corpus_fingerprint,
    }
    container.save(path, ckpt.tensors(), meta)


def load_checkpoint(
    path: str | os.PathLike, expected_shapes: dict[str, tuple[int, ...]] | None = None, verify: bool = True
) -> Checkpoint:
    """Read a checkpoint; with ``expected_shapes`` every parameter is shape-checked up front."""
    tensors, header = container.load(path, verify=verify)
    if header.get("kind") != "checkpoint":
        raise CheckpointError(f"{path}: container holds {header.get('kind')!r}, not a checkpoint")
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for name, value in tensors.items():
        group, _, key = name.partition("/")
        if group not in groups:
            raise CheckpointError(f"unexpected tensor {name!r}")
        groups[group][key] = value
    ckpt = Checkpoint(
        step=int(header["step"]),
        params=groups["param"],
        adam_m=groups["adam_m"],
        adam_v=groups["adam_v"],
        adam_t=int(header.get("adam_t", 0)),
        config=header.get("config", {}),
        corpus_fingerprint=header.get("corpus_fingerprint", ""),
    )
    if expected_shapes is not None:
        check_shapes(ckpt, expected_shapes)
    return ckpt


def check_shapes(ckpt: Checkpoint, expected: dict[str, tuple[int, ...]]) -> None:
    missing = sorted(set(expected) - set(ckpt.params))
    extra = sorted(set(ckpt.params) - set(expected))
    if missing or extra:
        raise DimensionError(f"checkpoint tensors do not match the model: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, shape in expected.items():
        got = ckpt.params[name].shape
        if tuple(got) != tuple(shape):
            raise DimensionError(f"tensor {name!r}: checkpoint has shape {tuple(got)}, model expects {tuple(shape)}")
        for moments in (ckpt.adam_m, ckpt.adam_v):
            if name in moments and moments[name].shape != tuple(shape):
                raise DimensionError(f"optimizer moment for {name!r} has shape {moments[name].shape}")
