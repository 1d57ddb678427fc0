"""Binary checkpoint container.

Layout: 5-byte magic ``RTAG1``, an 8-byte little-endian header length, a
UTF-8 JSON header (format version, model configuration, a digest of the
training configuration, the vocabulary, and a tensor manifest of name /
dtype / shape / byte_offset / byte_length), then the raw little-endian
tensor payload. Offsets are relative to the payload start; the writer emits
contiguous, strictly increasing regions and the reader rejects anything
overlapping or out of bounds before touching tensor data.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError
from .model import Model, ModelConfig
from .numerics.tensor import Tensor
from .tables import Vocab

MAGIC = b"RTAG1"
FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def config_digest(payload: dict | None) -> str:
    canonical = json.dumps(payload or {}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def save_checkpoint(model: Model, path: str | Path, train_config: dict | None = None) -> None:
    manifest = []
    blobs = []
    offset = 0
    for name in sorted(model.params):
        tensor = model.params[name]
        dtype = "float64" if tensor.data.dtype == np.float64 else "float32"
        blob = np.ascontiguousarray(tensor.data).astype(_DTYPES[dtype], copy=False).tobytes()
        manifest.append(
            {
                "name": name,
                "dtype": dtype,
                "shape": list(tensor.shape),
                "byte_offset": offset,
                "byte_length": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_json(),
        "train_config_digest": config_digest(train_config),
        "vocab": list(model.vocab.id_to_token),
        "manifest": manifest,
    }
    header_bytes = json.dumps(header, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[Model, dict]:
    """Reconstruct a model bitwise; returns (model, header)."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    header_len = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])[0]
    header_start = len(MAGIC) + 8
    if header_start + header_len > len(raw):
        raise CorruptionError(f"{path}: header length {header_len} exceeds file size")
    try:
        header = json.loads(raw[header_start : header_start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable header ({exc})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {header.get('format_version')!r}")

    payload = raw[header_start + header_len :]
    manifest = header.get("manifest", [])
    seen = set()
    cursor = -1
    for entry in sorted(manifest, key=lambda e: e["byte_offset"]):
        if entry["name"] in seen:
            raise CorruptionError(f"{path}: tensor {entry['name']!r} appears twice in the manifest")
        seen.add(entry["name"])
        start, length = entry["byte_offset"], entry["byte_length"]
        if start <= cursor:
            raise CorruptionError(f"{path}: manifest regions overlap at {entry['name']!r}")
        if start + length > len(payload):
            raise CorruptionError(f"{path}: tensor {entry['name']!r} extends past the payload")
        if entry["dtype"] not in _DTYPES:
            raise FormatError(f"{path}: unsupported dtype {entry['dtype']!r}")
        cursor = start + length - 1

    params: dict[str, Tensor] = {}
    for entry in manifest:
        start, length = entry["byte_offset"], entry["byte_length"]
        arr = np.frombuffer(payload[start : start + length], dtype=_DTYPES[entry["dtype"]])
        expected = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        if arr.size != expected:
            raise CorruptionError(f"{path}: tensor {entry['name']!r} has {arr.size} values, expected {expected}")
        data = arr.reshape(entry["shape"]).astype(entry["dtype"], copy=True)
        params[entry["name"]] = Tensor(data, requires_grad=True, dtype=entry["dtype"])
    config = ModelConfig.from_json(header["model_config"])
    vocab = Vocab(list(header["vocab"]))
    return Model(config, params, vocab), header
