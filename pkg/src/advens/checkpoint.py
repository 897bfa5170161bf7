"""Binary checkpoints for models and composites.

Layout (all integers little-endian)::

    b"ADVENSCK"                      magic
    u32 format_version
    u32 header_len, header_len bytes of canonical JSON (kind, architecture,
        train_eps, init_seed, tensor names, ...)
    per tensor: u32 ndim, ndim x u32 dims, prod(dims) x f64 data
    32-byte SHA-256 of everything above

The JSON header is written with sorted keys and no whitespace, so equal
models always serialise to identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointVersionError, CorruptCheckpointError
from .models import Architecture, CompositeModel, ModelParams

MAGIC = b"ADVENSCK"
FORMAT_VERSION = 1
_DIGEST = 32


def _arch_dict(arch: Architecture) -> dict:
    return {"input_dim": arch.input_dim, "hidden_dims": list(arch.hidden_dims), "num_classes": arch.num_classes}


def _model_header(model: ModelParams) -> dict:
    return {
        "architecture": _arch_dict(model.arch),
        "train_eps": model.train_eps,
        "init_seed": model.init_seed,
        "tensors": list(model.named_arrays()),
    }


def _tensor_blob(a: np.ndarray) -> bytes:
    head = struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape)
    return head + np.ascontiguousarray(a, dtype="<f8").tobytes()


def to_bytes(obj: ModelParams | CompositeModel) -> bytes:
    if isinstance(obj, ModelParams):
        header = {"kind": "model", **_model_header(obj)}
        arrays = list(obj.named_arrays().values())
    elif isinstance(obj, CompositeModel):
        header = {
            "kind": "composite",
            "robust": _model_header(obj.robust_backbone),
            "natural": _model_header(obj.natural_backbone),
            "head_seed": obj.head_seed,
            "train_eps": obj.train_eps,
            "backbones_frozen": obj.backbones_frozen,
        }
        arrays = [
            *obj.robust_backbone.named_arrays().values(),
            *obj.natural_backbone.named_arrays().values(),
            obj.head_weight,
            obj.head_bias,
        ]
    else:
        raise TypeError(f"cannot checkpoint {type(obj).__name__}")
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(text)) + text
    body += b"".join(_tensor_blob(a) for a in arrays)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(obj: ModelParams | CompositeModel, path) -> str:
    """Write ``obj`` to ``path``; returns the hex SHA-256 content checksum."""
    raw = to_bytes(obj)
    Path(path).write_bytes(raw)
    return raw[-_DIGEST:].hex()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CorruptCheckpointError("checkpoint is truncated")
        out = self.raw[self.pos: self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        return struct.unpack(f"<{count}I", self.take(4 * count))

    def tensor(self) -> np.ndarray:
        (ndim,) = self.u32()
        shape = self.u32(ndim) if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)


def _model_from(h: dict, reader: _Reader) -> ModelParams:
    a = h["architecture"]
    arch = Architecture(a["input_dim"], tuple(a["hidden_dims"]), a["num_classes"])
    arrays = {name: reader.tensor() for name in h["tensors"]}
    n = len(arch.layer_shapes())
    return ModelParams(
        arch,
        tuple(arrays[f"w{i}"] for i in range(n)),
        tuple(arrays[f"b{i}"] for i in range(n)),
        train_eps=float(h["train_eps"]),
        init_seed=int(h["init_seed"]),
    )


def from_bytes(raw: bytes) -> ModelParams | CompositeModel:
    if len(raw) < len(MAGIC) + 8 + _DIGEST or raw[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError("not a checkpoint file (bad magic or too short)")
    body, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    reader = _Reader(body)
    reader.take(len(MAGIC))
    version, header_len = reader.u32(2)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format {version}, this build reads {FORMAT_VERSION}")
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError("checksum mismatch")
    try:
        header = json.loads(reader.take(header_len).decode("utf-8"))
        if header["kind"] == "model":
            obj = _model_from(header, reader)
        elif header["kind"] == "composite":
            robust = _model_from(header["robust"], reader)
            natural = _model_from(header["natural"], reader)
            obj = CompositeModel(
                robust, natural, reader.tensor(), reader.tensor(),
                head_seed=int(header["head_seed"]), train_eps=float(header["train_eps"]),
            )
        else:
            raise CorruptCheckpointError(f"unknown checkpoint kind {header['kind']!r}")
    except (KeyError, ValueError, TypeError) as exc:
        if isinstance(exc, CorruptCheckpointError):
            raise
        raise CorruptCheckpointError(f"malformed checkpoint payload: {exc}") from exc
    if reader.pos != len(body):
        raise CorruptCheckpointError(f"{len(body) - reader.pos} trailing bytes after tensors")
    return obj


def load_checkpoint(path) -> ModelParams | CompositeModel:
    return from_bytes(Path(path).read_bytes())
