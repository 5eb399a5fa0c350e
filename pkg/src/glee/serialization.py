"""GLEE binary formats.

Parameter blocks (kind 1)::

    b"GLEE" | u16 version | u8 kind=1 | u32 n_blocks | u32 meta_len | meta (UTF-8 JSON)
    n_blocks x ( u16 name_len | name | u32 rows | u32 cols | rows*cols f64 )
    u32 crc32 of everything before it

Feature files (kind 0)::

    b"GLEE" | u16 version | u8 kind=0 | u64 n | u32 d | u32 C
    n x u32 class id | n*d f64

All integers and reals are little-endian.
"""

import json
import struct
import zlib

import numpy as np

from .errors import FormatError

MAGIC = b"GLEE"
VERSION = 1
KIND_FEATURES = 0
KIND_PARAMS = 1


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated payload while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))


def _read_header(r, expected_kind):
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not a GLEE file", 0)
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    (kind,) = r.unpack("<B", "kind")
    if kind != expected_kind:
        raise FormatError(f"expected kind {expected_kind}, found {kind}", 6)


def encode_blocks(blocks, meta=None):
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HBII", VERSION, KIND_PARAMS, len(blocks), len(meta_bytes)), meta_bytes]
    for name, arr in blocks.items():
        arr = np.asarray(arr, dtype="<f8")
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2:
            raise ValueError(f"block {name!r} must be 1-D or 2-D")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<II", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_blocks(buf):
    """Returns ``(blocks, meta)``; blocks are 2-D float64 arrays keyed by name."""
    if len(buf) < 4 + 4:
        raise FormatError("file too short", len(buf))
    r = _Reader(buf)
    _read_header(r, KIND_PARAMS)
    n_blocks, meta_len = r.unpack("<II", "block count")
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt metadata: {exc}", r.pos) from None
    blocks = {}
    for _ in range(n_blocks):
        (name_len,) = r.unpack("<H", "block name length")
        name = r.take(name_len, "block name").decode("utf-8", errors="replace")
        rows, cols = r.unpack("<II", f"shape of {name!r}")
        data = r.take(8 * rows * cols, f"data of {name!r}")
        blocks[name] = np.frombuffer(data, dtype="<f8").reshape(rows, cols).astype(np.float64)
    end = r.pos
    (crc,) = r.unpack("<I", "checksum")
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} unexpected trailing bytes", r.pos)
    if crc != zlib.crc32(buf[:end]):
        raise FormatError("checksum mismatch, file is corrupted", end)
    return blocks, meta


def save_blocks(path, blocks, meta=None):
    with open(path, "wb") as f:
        f.write(encode_blocks(blocks, meta))


def load_blocks(path):
    with open(path, "rb") as f:
        return decode_blocks(f.read())


def write_features(path, features, labels, num_classes):
    features = np.asarray(features, dtype="<f8")
    labels = np.asarray(labels)
    n, d = features.shape
    if labels.shape != (n,):
        raise ValueError("labels must have one entry per feature row")
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<HBQII", VERSION, KIND_FEATURES, n, d, num_classes))
        f.write(labels.astype("<u4").tobytes())
        f.write(np.ascontiguousarray(features).tobytes())


def read_features(path):
    """Returns ``(features [n x d], labels [n], num_classes)``."""
    with open(path, "rb") as f:
        buf = f.read()
    r = _Reader(buf)
    _read_header(r, KIND_FEATURES)
    n, d, num_classes = r.unpack("<QII", "header")
    if n == 0:
        raise FormatError("feature file holds no examples", 7)
    expected = r.pos + 4 * n + 8 * n * d
    if len(buf) != expected:
        raise FormatError(
            f"payload is {len(buf) - r.pos} bytes but header (n={n}, d={d}) implies {expected - r.pos}",
            r.pos,
        )
    labels = np.frombuffer(r.take(4 * n, "labels"), dtype="<u4").astype(np.int64)
    if labels.max() >= num_classes:
        raise FormatError(f"class id {labels.max()} >= C={num_classes}", 19)
    feats = np.frombuffer(r.take(8 * n * d, "features"), dtype="<f8").reshape(n, d).astype(np.float64)
    return feats, labels, num_classes
