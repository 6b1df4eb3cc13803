"""``<name>.cadnet`` checkpoints.

Layout: an 8-byte little-endian length, a UTF-8 JSON manifest of that many
bytes, then every tensor as little-endian float32, concatenated in manifest
order. The manifest carries the training config and epoch, so a checkpoint
restores a :class:`Trainer` (parameters and momentum buffers) on its own.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .trainer import TrainConfig, Trainer

FORMAT = "cadnet-checkpoint"
VERSION = 1
SUFFIX = ".cadnet"
_LEN = struct.Struct("<Q")
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def _state(trainer: Trainer) -> list[tuple[str, np.ndarray]]:
    items = [(name, p.data) for name, p in trainer.model.named_parameters()]
    for group, opt in trainer.optimizers.items():
        for name in opt.params:
            if name in opt.buffers:
                items.append((f"momentum.{group}.{name}", opt.buffers[name]))
    return items


def encode(trainer: Trainer) -> bytes:
    tensors, chunks, offset = [], [], 0
    for name, arr in _state(trainer):
        raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "endianness": "little",
        "dtype": "float32",
        "float_bytes": _DTYPE.itemsize,
        "epoch": trainer.epoch,
        "num_identities": trainer.model.num_identities,
        "config": trainer.config.to_dict(),
        "tensors": tensors,
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    return _LEN.pack(len(header)) + header + b"".join(chunks)


def save_checkpoint(trainer: Trainer, path: Path | str) -> Path:
    path = Path(path)
    if path.suffix != SUFFIX:
        path = path.with_name(path.name + SUFFIX)
    path.write_bytes(encode(trainer))
    return path


def decode(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse and validate a checkpoint; returns ``(manifest, arrays)``."""
    if len(data) < _LEN.size:
        raise CheckpointError("checkpoint truncated before the header length")
    (n,) = _LEN.unpack_from(data)
    if _LEN.size + n > len(data):
        raise CheckpointError(f"checkpoint truncated inside the manifest ({len(data)} bytes, header claims {n})")
    try:
        manifest = json.loads(data[_LEN.size : _LEN.size + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint manifest: {exc}") from None
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT:
        raise CheckpointError("not a cadnet checkpoint")
    if "endianness" not in manifest:
        raise CheckpointError("checkpoint manifest has no endianness marker")
    if manifest["endianness"] != "little" or manifest.get("dtype") != "float32":
        raise CheckpointError(
            f"unsupported tensor encoding {manifest['endianness']}/{manifest.get('dtype')}; expected little/float32"
        )
    blob = memoryview(data)[_LEN.size + n :]
    if len(blob) == 0:
        raise CheckpointError("checkpoint has an empty parameter blob")
    arrays = {}
    for t in manifest["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        if t["nbytes"] != count * _DTYPE.itemsize:
            raise CheckpointError(f"tensor {t['name']}: {t['nbytes']} bytes do not fit shape {t['shape']}")
        end = t["offset"] + t["nbytes"]
        if end > len(blob):
            raise CheckpointError(f"checkpoint blob truncated: tensor {t['name']} ends at byte {end}, blob has {len(blob)}")
        arr = np.frombuffer(blob[t["offset"] : end], dtype=_DTYPE).reshape(t["shape"])
        arrays[t["name"]] = arr.astype(np.float32)
    return manifest, arrays


def restore(trainer: Trainer, data: bytes) -> Trainer:
    """Load parameters, momentum buffers and the epoch counter into ``trainer``.

    Every model parameter must be present with a matching shape; the first
    mismatch (in model order) is reported by name.
    """
    manifest, arrays = decode(data)
    for name, p in trainer.model.named_parameters():
        if name not in arrays:
            raise CheckpointError(f"checkpoint lacks parameter {name}")
        if arrays[name].shape != p.data.shape:
            raise CheckpointError(
                f"parameter {name}: checkpoint shape {arrays[name].shape} does not match model shape {p.data.shape}"
            )
    known = {name for name, _ in trainer.model.named_parameters()}
    extra = [n for n in arrays if n not in known and not n.startswith("momentum.")]
    if extra:
        raise CheckpointError(f"checkpoint has parameters the model lacks, first: {extra[0]}")
    for name, p in trainer.model.named_parameters():
        p.data = arrays[name].copy()
        p.grad = None
    for group, opt in trainer.optimizers.items():
        opt.buffers.clear()
        prefix = f"momentum.{group}."
        for key, arr in arrays.items():
            if key.startswith(prefix):
                name = key[len(prefix) :]
                if name not in opt.params or opt.params[name].data.shape != arr.shape:
                    raise CheckpointError(f"momentum buffer {key} does not match the model")
                opt.buffers[name] = arr.copy()
    trainer.epoch = int(manifest["epoch"])
    return trainer


def load_checkpoint(path: Path | str, config: TrainConfig | None = None) -> Trainer:
    """Rebuild a trainer from ``path``.

    ``config`` overrides the stored one (e.g. to train more epochs); its
    architecture must still match the stored tensors.
    """
    data = Path(path).read_bytes()
    manifest, _ = decode(data)
    stored = TrainConfig.from_dict(manifest["config"])
    trainer = Trainer(config or stored, int(manifest["num_identities"]))
    return restore(trainer, data)
