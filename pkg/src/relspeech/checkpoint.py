"""Checkpoint persistence: self-describing binary files, bit-exact floats.

Layout: 8-byte magic ``RSPKCHK1``, little-endian u32 format version, a
length-prefixed UTF-8 JSON header (model config, vocabulary characters,
step, validation perplexity, Adam hyperparameters), then one record per
array: u32 name length, name bytes, u32 rank, u32 dims, raw float64
little-endian data. Optimizer moments ride along as arrays named
``adam.m.<param>`` / ``adam.v.<param>``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .data import CharVocab
from .model import Model, ModelConfig

MAGIC = b"RSPKCHK1"
VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, corrupt, or incompatible checkpoint file."""


@dataclass
class LoadedCheckpoint:
    model: Model
    vocab: Optional[CharVocab]
    step: Optional[int]
    val_ppl: Optional[float]
    optimizer: Optional["OptimizerState"]  # noqa: F821 (import cycle)


def _write_array(fh, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint file")
    return buf


def _read_array(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
    name = _read_exact(fh, name_len).decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    count = int(np.prod(dims)) if rank else 1
    data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").reshape(dims)
    return name, data.astype(np.float64)


def save_checkpoint(model: Model, path, step: int | None = None,
                    val_ppl: float | None = None,
                    vocab: CharVocab | None = None,
                    optimizer=None) -> None:
    header = {
        "config": asdict(model.cfg),
        "vocab": vocab.chars if vocab is not None else None,
        "step": step,
        "val_ppl": None if val_ppl is None or math.isnan(val_ppl) else val_ppl,
        "adam": None,
    }
    if optimizer is not None:
        header["adam"] = {"beta1": optimizer.beta1, "beta2": optimizer.beta2,
                          "eps": optimizer.eps, "step": optimizer.step}
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        named = list(model.named_parameters())
        count = len(named)
        if optimizer is not None:
            count += 2 * len(optimizer.m)
        fh.write(struct.pack("<I", count))
        for name, p in named:
            _write_array(fh, name, p.data)
        if optimizer is not None:
            for name, arr in optimizer.m.items():
                _write_array(fh, f"adam.m.{name}", arr)
            for name, arr in optimizer.v.items():
                _write_array(fh, f"adam.v.{name}", arr)


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> LoadedCheckpoint:
    """Rebuild a model (and optional optimizer state) from a checkpoint.

    Rejects wrong magic, unknown format versions, truncated files and,
    when ``expected_config`` is given, any architecture mismatch.
    """
    from .training import OptimizerState  # local import, training imports us

    with open(path, "rb") as fh:
        magic = _read_exact(fh, 8)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4))
        header = json.loads(_read_exact(fh, blob_len).decode("utf-8"))
        cfg = ModelConfig(**header["config"])
        if expected_config is not None and cfg != expected_config:
            raise CheckpointError(
                f"{path}: checkpoint config {cfg} does not match expected {expected_config}"
            )
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        arrays = dict(_read_array(fh) for _ in range(count))
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after parameter records")

    model = Model.create(cfg, seed=0)
    expected_names = {name for name, _ in model.named_parameters()}
    model_arrays = {n: a for n, a in arrays.items() if not n.startswith("adam.")}
    if set(model_arrays) != expected_names:
        missing = expected_names - set(model_arrays)
        extra = set(model_arrays) - expected_names
        raise CheckpointError(f"{path}: parameter name mismatch "
                              f"(missing {sorted(missing)}, unexpected {sorted(extra)})")
    for name, p in model.named_parameters():
        arr = model_arrays[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"{path}: {name} has shape {arr.shape}, model expects {p.data.shape}"
            )
        p.data = arr.copy()

    optimizer = None
    if header.get("adam") is not None:
        meta = header["adam"]
        optimizer = OptimizerState(meta["beta1"], meta["beta2"], meta["eps"], meta["step"])
        for name in expected_names:
            optimizer.m[name] = arrays[f"adam.m.{name}"].copy()
            optimizer.v[name] = arrays[f"adam.v.{name}"].copy()

    vocab = CharVocab(header["vocab"]) if header.get("vocab") else None
    val_ppl = header.get("val_ppl")
    return LoadedCheckpoint(model, vocab, header.get("step"), val_ppl, optimizer)
