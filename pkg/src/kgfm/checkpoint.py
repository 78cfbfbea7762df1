"""
JSON checkpoint container.

Floats are written with Python's shortest round-trip repr, so
``load(save(x))`` restores every parameter bit for bit.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import numpy as np

from .errors import CheckpointError

log = logging.getLogger("kgfm.checkpoint")

FORMAT_VERSION = 1
KINDS = ("surrogate", "decoder", "selector", "baseline")


@dataclass
class Checkpoint:
    kind: str
    params: Dict[str, np.ndarray]
    config: Dict[str, Any] = field(default_factory=dict)
    vocab_hash: Optional[str] = None
    seed: Optional[int] = None
    normalization: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def require_vocab(self, vocab_hash: str) -> None:
        if self.vocab_hash != vocab_hash:
            raise CheckpointError(
                f"{self.kind} checkpoint was built with vocabulary {str(self.vocab_hash)[:12]}, "
                f"current vocabulary is {vocab_hash[:12]}")


def _pack(arrays: Mapping[str, np.ndarray]) -> Dict[str, Any]:
    return {k: {"shape": list(np.shape(v)), "data": np.asarray(v, dtype=np.float64).reshape(-1).tolist()}
            for k, v in sorted(arrays.items())}


def _unpack(raw: Mapping[str, Any], path: Path) -> Dict[str, np.ndarray]:
    out = {}
    for k, v in raw.items():
        try:
            out[k] = np.array(v["data"], dtype=np.float64).reshape(v["shape"])
        except (KeyError, ValueError, TypeError) as e:
            raise CheckpointError(f"{path}: tensor '{k}' is malformed: {e}") from e
    return out


def save(ckpt: Checkpoint, path: os.PathLike) -> Path:
    if ckpt.kind not in KINDS:
        raise CheckpointError(f"unknown checkpoint kind '{ckpt.kind}'")
    path = Path(path)
    body = {
        "format_version": ckpt.format_version,
        "kind": ckpt.kind,
        "seed": ckpt.seed,
        "vocab_hash": ckpt.vocab_hash,
        "config": ckpt.config,
        "meta": ckpt.meta,
        "normalization": _pack(ckpt.normalization),
        "params": _pack(ckpt.params),
    }
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(body, fh, sort_keys=True)
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    log.debug("Saved %s checkpoint %s (%d tensors)", ckpt.kind, path, len(ckpt.params))
    return path


def load(path: os.PathLike, kind: Optional[str] = None) -> Checkpoint:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            body = json.load(fh)
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path} is not a checkpoint: {e}") from e

    version = body.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format_version {version!r} is not supported (expected {FORMAT_VERSION})")
    if kind is not None and body.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {body.get('kind')!r}")
    return Checkpoint(
        kind=body["kind"],
        params=_unpack(body.get("params", {}), path),
        config=body.get("config", {}),
        vocab_hash=body.get("vocab_hash"),
        seed=body.get("seed"),
        normalization=_unpack(body.get("normalization", {}), path),
        meta=body.get("meta", {}),
        format_version=version,
    )


def summary(ckpt: Checkpoint) -> Dict[str, Any]:
    return {
        "kind": ckpt.kind,
        "format_version": ckpt.format_version,
        "seed": ckpt.seed,
        "vocab_hash": ckpt.vocab_hash,
        "parameters": {k: list(v.shape) for k, v in sorted(ckpt.params.items())},
        "n_parameters": int(sum(v.size for v in ckpt.params.values())),
        "meta": ckpt.meta,
    }


def assign(params: Mapping[str, Any], arrays: Mapping[str, np.ndarray], path: str = "checkpoint") -> None:
    """Copy ``arrays`` into the Tensors of ``params`` in place; names and shapes must match."""
    if set(params) != set(arrays):
        raise CheckpointError(f"{path}: parameter names differ: {sorted(set(params) ^ set(arrays))}")
    for name, t in params.items():
        if t.shape != arrays[name].shape:
            raise CheckpointError(f"{path}: '{name}' has shape {arrays[name].shape}, model expects {t.shape}")
        t.data = arrays[name].copy()
