"""Embedding snapshots and model checkpoints on disk.

Snapshot layout (all integers little-endian)::

    header   b"LMES" | u16 format version | u32 dim | u64 count | 10-byte version date (ASCII)
    index    per record: u32 key length | key (UTF-8) | u64 payload offset | u32 sample count
    payload  count * dim float32
    trailer  8-byte blake2b digest of every preceding byte

Records are sorted by key, so identical content always gives identical
bytes. Per record the file grows by ``dim * 4 + len(key) + 16`` bytes.

Checkpoint layout::

    b"LMCK" | u16 format version | u32 header length | header (canonical JSON)
    | u64 value count | float64 payload | 8-byte blake2b digest

The JSON header holds the architecture descriptor, parameter names and
shapes (payload order), the training config and free-form metadata.

This module deliberately avoids the autodiff code so the online scorer can
load artifacts without it.
"""
from __future__ import annotations

import bisect
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

SNAPSHOT_MAGIC = b"LMES"
CHECKPOINT_MAGIC = b"LMCK"
FORMAT_VERSION = 1
_SNAP_HEADER = struct.Struct("<4sHIQ10s")
_CKPT_HEADER = struct.Struct("<4sHI")
DIGEST_SIZE = 8
SNAPSHOT_FIXED_BYTES = _SNAP_HEADER.size + DIGEST_SIZE
RECORD_OVERHEAD = 4 + 8 + 4


class StoreError(ValueError):
    """An artifact file that cannot be trusted; ``reason`` says why."""

    def __init__(self, path, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)
        self.reason = reason


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=DIGEST_SIZE).digest()


def atomic_write(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _verified(path, data: bytes, magic: bytes, min_size: int) -> bytes:
    if len(data) < min_size:
        if data[:4] != magic[: len(data[:4])]:
            raise StoreError(path, "bad magic")
        raise StoreError(path, f"truncated ({len(data)} bytes)")
    if data[:4] != magic:
        raise StoreError(path, f"bad magic {data[:4]!r}")
    body, tail = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]
    if _digest(body) != tail:
        raise StoreError(path, "checksum mismatch")
    return body


# ---------------------------------------------------------------- snapshots


@dataclass(frozen=True)
class EmbeddingSnapshot:
    version: str
    dim: int
    keys: tuple[str, ...]
    vectors: np.ndarray
    sample_counts: np.ndarray

    def __post_init__(self):
        if len(self.version.encode("ascii")) != 10:
            raise ValueError(f"version must be YYYY-MM-DD, got {self.version!r}")
        vec = np.ascontiguousarray(self.vectors, dtype=np.float32).reshape(len(self.keys), self.dim)
        counts = np.ascontiguousarray(self.sample_counts, dtype=np.int64).reshape(len(self.keys))
        if any(a >= b for a, b in zip(self.keys, self.keys[1:])):
            raise ValueError("snapshot keys must be unique and sorted")
        if not np.all(np.isfinite(vec)):
            raise ValueError("snapshot vectors must be finite")
        vec.flags.writeable = False
        counts.flags.writeable = False
        object.__setattr__(self, "keys", tuple(self.keys))
        object.__setattr__(self, "vectors", vec)
        object.__setattr__(self, "sample_counts", counts)

    @classmethod
    def from_records(cls, records: Iterable, version: str, dim: int) -> "EmbeddingSnapshot":
        """Build from objects with ``task_key``, ``vector``, ``sample_count_used``."""
        items = sorted(records, key=lambda r: r.task_key)
        vecs = np.array([np.asarray(r.vector, dtype=np.float32) for r in items], dtype=np.float32).reshape(len(items), dim)
        return cls(version, dim, tuple(r.task_key for r in items), vecs, np.array([r.sample_count_used for r in items], dtype=np.int64))

    def __len__(self) -> int:
        return len(self.keys)

    def lookup(self, task_key: str) -> np.ndarray | None:
        """Binary search; None when the key is absent."""
        i = bisect.bisect_left(self.keys, task_key)
        if i < len(self.keys) and self.keys[i] == task_key:
            return self.vectors[i]
        return None

    def mean_vector(self) -> np.ndarray:
        """Element-wise mean of all records (float32); zeros when empty."""
        if len(self) == 0:
            return np.zeros(self.dim, dtype=np.float32)
        return self.vectors.astype(np.float64).mean(axis=0).astype(np.float32)

    def equals(self, other: "EmbeddingSnapshot") -> bool:
        return (
            self.version == other.version
            and self.dim == other.dim
            and self.keys == other.keys
            and np.array_equal(self.vectors, other.vectors)
            and np.array_equal(self.sample_counts, other.sample_counts)
        )


def encode_snapshot(snap: EmbeddingSnapshot) -> bytes:
    parts = [_SNAP_HEADER.pack(SNAPSHOT_MAGIC, FORMAT_VERSION, snap.dim, len(snap), snap.version.encode("ascii"))]
    stride = snap.dim * 4
    for i, (key, count) in enumerate(zip(snap.keys, snap.sample_counts)):
        kb = key.encode("utf-8")
        parts.append(struct.pack("<I", len(kb)) + kb + struct.pack("<QI", i * stride, int(count)))
    parts.append(snap.vectors.astype("<f4").tobytes())
    body = b"".join(parts)
    return body + _digest(body)


def decode_snapshot(data: bytes, path="<bytes>") -> EmbeddingSnapshot:
    body = _verified(path, data, SNAPSHOT_MAGIC, SNAPSHOT_FIXED_BYTES)
    _, fmt, dim, count, version = _SNAP_HEADER.unpack_from(body, 0)
    if fmt != FORMAT_VERSION:
        raise StoreError(path, f"unsupported format version {fmt}")
    pos = _SNAP_HEADER.size
    keys, counts = [], []
    stride = dim * 4
    try:
        for i in range(count):
            (klen,) = struct.unpack_from("<I", body, pos)
            pos += 4
            if pos + klen > len(body):
                raise StoreError(path, "truncated index")
            keys.append(body[pos : pos + klen].decode("utf-8"))
            pos += klen
            offset, n = struct.unpack_from("<QI", body, pos)
            pos += 12
            if offset != i * stride:
                raise StoreError(path, f"record {i} has offset {offset}, expected {i * stride}")
            counts.append(n)
    except struct.error as exc:
        raise StoreError(path, "truncated index") from exc
    if len(body) - pos != count * stride:
        raise StoreError(path, f"payload is {len(body) - pos} bytes, expected {count * stride}")
    vectors = np.frombuffer(body, dtype="<f4", count=count * dim, offset=pos).astype(np.float32).reshape(count, dim)
    try:
        return EmbeddingSnapshot(version.decode("ascii"), dim, tuple(keys), vectors, np.array(counts, dtype=np.int64))
    except ValueError as exc:
        raise StoreError(path, str(exc)) from exc


def write_snapshot(snap: EmbeddingSnapshot, path) -> None:
    atomic_write(path, encode_snapshot(snap))


def read_snapshot(path) -> EmbeddingSnapshot:
    return decode_snapshot(Path(path).read_bytes(), path)


def snapshot_size(dim: int, keys: Sequence[str]) -> int:
    """Exact file size for a snapshot with these keys."""
    return SNAPSHOT_FIXED_BYTES + sum(dim * 4 + len(k.encode("utf-8")) + RECORD_OVERHEAD for k in keys)


def export_tsv(snap: EmbeddingSnapshot) -> str:
    """``task_key<TAB>version<TAB>v0,v1,...`` per record; shortest float32 repr."""
    lines = []
    for key, vec in zip(snap.keys, snap.vectors):
        lines.append(f"{key}\t{snap.version}\t" + ",".join(str(v) for v in vec))
    return "".join(line + "\n" for line in lines)


def parse_tsv(text: str, dim: int | None = None) -> EmbeddingSnapshot:
    """Inverse of :func:`export_tsv` (sample counts are not part of the TSV; set to 0)."""
    keys, vecs, versions = [], [], set()
    for line in text.splitlines():
        if not line:
            continue
        key, version, values = line.split("\t")
        keys.append(key)
        versions.add(version)
        vecs.append(np.array([np.float32(v) for v in values.split(",")] if values else [], dtype=np.float32))
    if len(versions) > 1:
        raise ValueError("TSV mixes versions")
    if dim is None:
        if not vecs:
            raise ValueError("dim is required for an empty TSV")
        dim = len(vecs[0])
    version = versions.pop() if versions else "1970-01-01"
    order = np.argsort(keys, kind="stable")
    return EmbeddingSnapshot(
        version, dim, tuple(keys[i] for i in order),
        np.array([vecs[i] for i in order], dtype=np.float32).reshape(len(keys), dim),
        np.zeros(len(keys), dtype=np.int64),
    )


# -------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    descriptor: dict
    params: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def equals(self, other: "Checkpoint") -> bool:
        return (
            self.descriptor == other.descriptor
            and self.config == other.config
            and self.metadata == other.metadata
            and list(self.params) == list(other.params)
            and all(np.array_equal(self.params[k], other.params[k]) for k in self.params)
            and all(self.params[k].shape == other.params[k].shape for k in self.params)
        )


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    names = sorted(ckpt.params)
    header = {
        "descriptor": ckpt.descriptor,
        "params": [[n, list(np.shape(ckpt.params[n]))] for n in names],
        "config": ckpt.config,
        "metadata": ckpt.metadata,
    }
    hb = _canonical_json(header)
    flat = np.concatenate([np.asarray(ckpt.params[n], dtype=np.float64).ravel() for n in names]) if names else np.zeros(0)
    body = _CKPT_HEADER.pack(CHECKPOINT_MAGIC, FORMAT_VERSION, len(hb)) + hb + struct.pack("<Q", flat.size) + flat.astype("<f8").tobytes()
    return body + _digest(body)


def decode_checkpoint(data: bytes, path="<bytes>") -> Checkpoint:
    body = _verified(path, data, CHECKPOINT_MAGIC, _CKPT_HEADER.size + 8 + DIGEST_SIZE)
    _, fmt, hlen = _CKPT_HEADER.unpack_from(body, 0)
    if fmt != FORMAT_VERSION:
        raise StoreError(path, f"unsupported format version {fmt}")
    pos = _CKPT_HEADER.size
    if pos + hlen + 8 > len(body):
        raise StoreError(path, "truncated header")
    try:
        header = json.loads(body[pos : pos + hlen].decode("utf-8"))
    except ValueError as exc:
        raise StoreError(path, f"unreadable header: {exc}") from exc
    pos += hlen
    (count,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    if len(body) - pos != count * 8:
        raise StoreError(path, f"payload is {len(body) - pos} bytes, expected {count * 8}")
    flat = np.frombuffer(body, dtype="<f8", count=count, offset=pos).astype(np.float64)
    params, at = {}, 0
    for name, shape in header["params"]:
        size = int(np.prod(shape)) if shape else 1
        params[name] = flat[at : at + size].reshape(shape)
        at += size
    if at != count:
        raise StoreError(path, f"parameter shapes cover {at} values, payload has {count}")
    return Checkpoint(header["descriptor"], params, header["config"], header["metadata"])


def write_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write(path, encode_checkpoint(ckpt))


def read_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), path)


def checkpoint_from_model(network, params: Mapping[str, np.ndarray], config: Mapping | None = None, metadata: Mapping | None = None) -> Checkpoint:
    return Checkpoint(network.descriptor(), {k: np.asarray(v) for k, v in params.items()}, dict(config or {}), dict(metadata or {}))


def load_model(ckpt: Checkpoint, network=None):
    """(network, ParamSet) from a checkpoint.

    With ``network`` given, the checkpoint must fit it: a layer whose width
    differs raises ShapeError naming that layer.
    """
    from .networks import network_from_descriptor
    from .numcore import ParamSet

    net = network if network is not None else network_from_descriptor(ckpt.descriptor)
    net.check(ckpt.params)
    extra = sorted(set(ckpt.params) - {n for n, _ in net.param_shapes()})
    if extra:
        from .numcore import ShapeError

        raise ShapeError(f"unexpected parameter(s) {', '.join(extra)}", layer=None)
    return net, ParamSet(ckpt.params)
