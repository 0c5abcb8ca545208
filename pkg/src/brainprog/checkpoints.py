"""Versioned binary checkpoint blobs shared by all trainable modules.

Layout (little-endian):
    bytes 0..7   magic b"BPCKPT01"
    bytes 8..11  u32 header length N
    bytes 12..   N bytes of UTF-8 JSON header
    then         param_count f32 values, concatenated in header tensor order

The JSON header carries: format_version, kind, an architecture descriptor,
tensor names/shapes, param_count, and free-form extra metadata (e.g. the
hash of the base checkpoint a control module was trained against).
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"BPCKPT01"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Raised for malformed or incompatible checkpoint blobs."""


@dataclass
class CheckpointBlob:
    kind: str
    descriptor: dict
    extra: dict
    tensors: dict[str, np.ndarray]  # insertion order == serialized order

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(t.shape)) for t in self.tensors.values())


def _serialize(blob: CheckpointBlob) -> bytes:
    header = {
        "format_version": FORMAT_VERSION,
        "kind": blob.kind,
        "descriptor": blob.descriptor,
        "extra": blob.extra,
        "tensors": [
            {"name": name, "shape": list(t.shape)} for name, t in blob.tensors.items()
        ],
        "param_count": blob.param_count,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(header_bytes)))
    buf.write(header_bytes)
    for t in blob.tensors.values():
        buf.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(blob: CheckpointBlob, path: str | Path) -> str:
    """Write the blob; returns its content hash (sha256 hex)."""
    raw = _serialize(blob)
    Path(path).write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def checkpoint_content_hash(blob: CheckpointBlob) -> str:
    return hashlib.sha256(_serialize(blob)).hexdigest()


def checkpoint_file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_checkpoint(path: str | Path, expect_kind: str | None = None) -> CheckpointBlob:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint blob (bad magic)")
    (header_len,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {header.get('format_version')}"
        )
    if expect_kind is not None and header.get("kind") != expect_kind:
        raise CheckpointError(
            f"{path}: expected kind {expect_kind!r}, found {header.get('kind')!r}"
        )

    tensors: dict[str, np.ndarray] = {}
    offset = 12 + header_len
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        end = offset + 4 * n
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated tensor payload at {spec['name']}")
        tensors[spec["name"]] = (
            np.frombuffer(raw[offset:end], dtype="<f4").reshape(shape).copy()
        )
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")

    return CheckpointBlob(
        kind=header["kind"],
        descriptor=header["descriptor"],
        extra=header["extra"],
        tensors=tensors,
    )


def state_dict_to_tensors(state_dict) -> dict[str, np.ndarray]:
    """Torch state dict -> name-ordered float32 numpy arrays."""
    return {name: p.detach().cpu().numpy().astype(np.float32) for name, p in state_dict.items()}
