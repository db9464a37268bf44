"""GLDM binary checkpoints.

Layout: magic "GLDM", u32 format version (=1), u64 header length, UTF-8 JSON
header, then per-tensor records (u32 name length, name bytes, u8 rank,
u64 dims, u8 dtype tag with 0 = float32, raw little-endian data) ordered
lexicographically by name, and a trailing u64 checksum of all preceding
bytes. The checksum is blake2b with an 8-byte digest (pinned here and in the
README); any single-bit flip changes it.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct

import numpy as np

MAGIC = b"GLDM"
VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4")}


class CheckpointError(ValueError):
    pass


def _digest(payload):
    return hashlib.blake2b(payload, digest_size=8).digest()


def write_checkpoint(path, state, header):
    """Serialize a name->array mapping plus a JSON header."""
    buf = io.BytesIO()
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<Q", len(head)))
    buf.write(head)
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name])
        if arr.dtype != np.float32:
            raise CheckpointError(f"{name}: only float32 tensors are stored, got {arr.dtype}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(struct.pack("<B", 0))
        buf.write(arr.astype("<f4").tobytes())
    payload = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(_digest(payload))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what):
        return struct.unpack("<Q", self.take(8, what))[0]

    def u8(self, what):
        return self.take(1, what)[0]


def read_checkpoint(path):
    """Returns (header dict, state dict). Verifies checksum and structure."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 + 4 + 4 + 8:
        raise CheckpointError("file too short to be a checkpoint")
    payload, checksum = blob[:-8], blob[-8:]
    if _digest(payload) != checksum:
        raise CheckpointError("checksum mismatch: checkpoint is corrupt")
    r = _Reader(payload)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic: not a GLDM checkpoint")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    head_len = r.u64("header length")
    header = json.loads(r.take(head_len, "header").decode("utf-8"))
    state = {}
    while r.pos < len(payload):
        name_len = r.u32("tensor name length")
        name = r.take(name_len, "tensor name").decode("utf-8")
        rank = r.u8("rank")
        shape = tuple(r.u64(f"{name} dim {i}") for i in range(rank))
        tag = r.u8("dtype tag")
        if tag not in DTYPE_TAGS:
            raise CheckpointError(f"{name}: unknown dtype tag {tag}")
        count = int(np.prod(shape)) if shape else 1
        raw = r.take(count * 4, f"{name} data")
        state[name] = np.frombuffer(raw, dtype=DTYPE_TAGS[tag]).reshape(shape).copy()
    return header, state


def save_model(path, model, arch, schedule_kind=None, T=None, vocab_hash=None,
               extra=None):
    header = {
        "arch": arch,
        "config": model.config.to_dict(),
        "schedule": {"kind": schedule_kind, "T": T},
        "vocab_hash": vocab_hash,
    }
    if extra:
        header.update(extra)
    write_checkpoint(path, model.state_dict(), header)


def load_into(model, state, allow_missing_prefixes=()):
    """Load state into a model; parameters matching an allowed prefix may be
    absent from the file (they are zero-filled, the inpaint expansion rule).

    Unknown tensor names in the file are an error.
    """
    params = dict(model.named_parameters())
    unknown = sorted(set(state) - set(params))
    if unknown:
        raise CheckpointError(f"unknown tensor names in checkpoint: {unknown}")
    for name, p in params.items():
        if name in state:
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.shape:
                raise CheckpointError(f"{name}: shape {arr.shape} != model {p.shape}")
            p.data = np.ascontiguousarray(arr)
        elif any(name.startswith(pref) for pref in allow_missing_prefixes):
            p.data = np.zeros_like(p.data)
        else:
            raise CheckpointError(f"checkpoint is missing tensor {name}")
    return model


def vocab_fingerprint():
    from ..models.text import VOCAB

    return hashlib.sha256(json.dumps(list(VOCAB)).encode()).hexdigest()[:16]
