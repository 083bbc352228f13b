"""Self-describing single-file checkpoints for stream models.

Layout: an 8-byte magic, a little-endian uint64 header length, a JSON header
(format version, per-stream config + seed + parameter manifest with name,
shape, and byte offset, plus a CRC32 of the payload), then the raw
little-endian float64 parameter data. Loading a saved model reproduces its
outputs bitwise.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Sequence

import numpy as np

from .models import StreamConfig, StreamModel

MAGIC = b"NALNCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Corrupt, truncated, or incompatible checkpoint file."""


def save_checkpoint(path: str | Path, streams: Sequence[StreamModel]) -> None:
    chunks: list[bytes] = []
    offset = 0
    stream_docs = []
    for idx, model in enumerate(streams):
        manifest = []
        for name, tensor in model.params.items():
            raw = np.ascontiguousarray(tensor.data, dtype="<f8").tobytes()
            manifest.append({"name": name, "shape": list(tensor.shape), "offset": offset})
            chunks.append(raw)
            offset += len(raw)
        stream_docs.append({"config": model.config.to_dict(), "seed": model.seed, "params": manifest})
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "streams": stream_docs,
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)


def load_checkpoint(path: str | Path) -> list[StreamModel]:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 8 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (header_len,) = struct.unpack("<Q", blob[len(MAGIC) : len(MAGIC) + 8])
    header_start = len(MAGIC) + 8
    if len(blob) < header_start + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[header_start : header_start + header_len])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header.get('format_version')} != {FORMAT_VERSION}"
        )
    payload = blob[header_start + header_len :]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(
            f"{path}: truncated payload ({len(payload)} bytes, expected {header['payload_bytes']})"
        )
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise CheckpointError(f"{path}: payload CRC mismatch")

    streams: list[StreamModel] = []
    for doc in header["streams"]:
        model = StreamModel(StreamConfig.from_dict(doc["config"]), seed=doc["seed"])
        expected = set(model.params)
        seen = set()
        for entry in doc["params"]:
            name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
            if name not in expected:
                raise CheckpointError(f"{path}: unknown parameter {name!r}")
            count = int(np.prod(shape)) if shape else 1
            raw = payload[offset : offset + count * 8]
            if len(raw) != count * 8:
                raise CheckpointError(f"{path}: parameter {name!r} data out of bounds")
            values = np.frombuffer(raw, dtype="<f8").reshape(shape)
            model.set_param(name, values)
            seen.add(name)
        if seen != expected:
            raise CheckpointError(f"{path}: missing parameters {sorted(expected - seen)}")
        streams.append(model)
    return streams
