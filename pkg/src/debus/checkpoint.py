"""Binary checkpoint format.

Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON header
(sorted keys, compact), then every tensor as little-endian float32 in header
order. The header lists names, shapes and buffer names, the model config
and its hash, the epoch and any RNG states. Nothing time-dependent is
written, so save -> load -> save reproduces the file byte for byte.
"""
from __future__ import annotations

import json
import struct
import warnings
from collections import OrderedDict

import numpy as np

from .detr import ModelConfig, SVDETR

MAGIC = b"DEBUSCK\x01"
FORMAT_VERSION = 1
_DT = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    """Write named arrays (cast to float32) plus JSON-serialisable metadata."""
    names = list(tensors)
    arrays = [np.ascontiguousarray(np.asarray(tensors[n]), dtype=_DT) for n in names]
    header = dict(meta or {})
    header.update(format_version=FORMAT_VERSION, dtype="float32", names=names,
                  shapes=[list(a.shape) for a in arrays])
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(a.tobytes())


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh)


def _read_header(fh) -> dict:
    if fh.read(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (n,) = struct.unpack("<I", fh.read(4))
    header = json.loads(fh.read(n).decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    return header


def load_checkpoint(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    """Return (name -> float32 array, header). Payload size is checked exactly."""
    with open(path, "rb") as fh:
        header = _read_header(fh)
        payload = fh.read()
    expected = sum(4 * int(np.prod(s, dtype=np.int64)) for s in header["shapes"])
    if len(payload) != expected:
        raise CheckpointError(f"payload is {len(payload)} bytes, header implies {expected}")
    out = OrderedDict()
    offset = 0
    for name, shape in zip(header["names"], header["shapes"]):
        count = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(payload, dtype=_DT, count=count, offset=offset).reshape(shape).copy()
        offset += 4 * count
    return out, header


def parameter_count(header: dict, prefix: str = "model.") -> int:
    """Sum of element counts over the header's trainable tensors under ``prefix``."""
    buffers = set(header.get("buffers", ()))
    return int(sum(np.prod(s, dtype=np.int64) for n, s in zip(header["names"], header["shapes"])
                   if n.startswith(prefix) and n not in buffers))


def _jsonable_rng(state):
    return json.loads(json.dumps(state)) if state is not None else None


def save_model(path, model: SVDETR, epoch: int = 0, rng_state=None, student: SVDETR | None = None,
               extra: dict | None = None) -> None:
    """Save a model (and optionally the SSL student) with its config."""
    tensors = OrderedDict(("model." + k, v) for k, v in model.state_dict().items())
    buffers = ["model." + k for k, _ in model.named_buffers()]
    if student is not None:
        tensors.update(("student." + k, v) for k, v in student.state_dict().items())
        buffers += ["student." + k for k, _ in student.named_buffers()]
    meta = {"buffers": buffers, "config": model.cfg.to_dict(), "config_hash": model.cfg.hash(), "epoch": int(epoch),
            "rng_state": _jsonable_rng(rng_state), "extra": extra or {}}
    save_checkpoint(path, tensors, meta)


def load_model(path, which: str = "model", expect_config: ModelConfig | None = None) -> tuple[SVDETR, dict]:
    """Rebuild an SVDETR from a checkpoint; ``which`` is "model" or "student".

    A config whose hash differs from the stored one triggers a warning and
    the stored config is used.
    """
    tensors, header = load_checkpoint(path)
    cfg = ModelConfig(**header["config"])
    if expect_config is not None and expect_config.hash() != header["config_hash"]:
        warnings.warn(f"config hash mismatch: checkpoint {header['config_hash']} vs requested "
                      f"{expect_config.hash()}; using the checkpoint's config", RuntimeWarning)
    prefix = which + "."
    state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    if not state:
        raise CheckpointError(f"checkpoint has no {which!r} tensors")
    model = SVDETR(cfg, seed=0)
    model.load_state_dict(state)
    return model, header
