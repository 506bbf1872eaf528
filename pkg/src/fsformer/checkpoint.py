"""Binary weight container.

Layout::

    b"FSF1"
    uint32 LE   header length in bytes
    header      UTF-8 text; "meta <json>" line, then one
                "tensor <name> <shape> <count> <offset>" line per tensor
    payload     float32 little-endian, tensors in manifest order
    uint64 LE   checksum: 8-byte BLAKE2b digest of the payload
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"FSF1"


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


def _checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def _shape_str(shape) -> str:
    return "x".join(str(s) for s in shape) if len(shape) else "-"


def _parse_shape(text: str) -> tuple[int, ...]:
    return () if text == "-" else tuple(int(s) for s in text.split("x"))


def save_checkpoint(weights: dict, path, meta: dict | None = None) -> None:
    lines = ["meta " + json.dumps(meta or {}, sort_keys=True)]
    chunks = []
    offset = 0
    for name, t in weights.items():
        if " " in name:
            raise CheckpointError(f"tensor name {name!r} contains whitespace")
        # ascontiguousarray promotes 0-d arrays to 1-d, so restore the shape
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").reshape(tuple(t.shape))
        lines.append(f"tensor {name} {_shape_str(arr.shape)} {arr.size} {offset}")
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = ("\n".join(lines) + "\n").encode("utf-8")
    payload = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)
        fh.write(struct.pack("<Q", _checksum(payload)))


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return (weights, meta). Tensors come back as float32."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: not an FSF1 checkpoint")
    if len(blob) < 8:
        raise TruncatedCheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + hlen:
        raise TruncatedCheckpointError(f"{path}: truncated header")
    header = blob[8 : 8 + hlen].decode("utf-8")
    meta = {}
    manifest = []
    for line in header.splitlines():
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            meta = json.loads(rest)
        elif kind == "tensor":
            name, shape, count, offset = rest.split(" ")
            manifest.append((name, _parse_shape(shape), int(count), int(offset)))
        elif line:
            raise CheckpointError(f"{path}: bad manifest line {line!r}")
    payload_len = sum(count for _, _, count, _ in manifest) * 4
    start = 8 + hlen
    if len(blob) < start + payload_len + 8:
        raise TruncatedCheckpointError(f"{path}: payload shorter than manifest")
    payload = blob[start : start + payload_len]
    (stored,) = struct.unpack("<Q", blob[start + payload_len : start + payload_len + 8])
    if stored != _checksum(payload):
        raise ChecksumError(f"{path}: payload checksum mismatch")
    weights = {}
    for name, shape, count, offset in manifest:
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)
        weights[name] = torch.from_numpy(arr.astype(np.float32))
    return weights, meta


def load_checkpoint(path) -> dict:
    return read_checkpoint(path)[0]
