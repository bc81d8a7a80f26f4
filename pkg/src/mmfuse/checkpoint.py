"""Binary checkpoints of a ModelState.

Layout (all integers little-endian)::

    magic   b"MMFCKPT\\0"
    u32     format version
    u64     header length, then UTF-8 JSON header {config, vocab, variants}
    u32     record count
    records name (u32 length + UTF-8), u32 ndim, ndim x u64 extents,
            float64 values in row-major order
    8 bytes blake2b-64 digest of everything before it
"""
import hashlib
import json
import os
import struct
import tempfile

import numpy as np

from .config import ConfigError, ModelConfig
from .data import VariantTable, Vocab, RESERVED
from .model import ModelState

MAGIC = b"MMFCKPT\0"
VERSION = 1
DIGEST = 8


class CorruptCheckpointError(ValueError):
    pass


class ConfigMismatchError(ConfigError):
    pass


def _digest(payload):
    return hashlib.blake2b(payload, digest_size=DIGEST).digest()


def to_bytes(s: ModelState):
    header = json.dumps({
        "config": s.config.to_dict(),
        "vocab": s.vocab.itos[len(RESERVED):],
        "variants": s.variants.to_dict(),
    }, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(header)), header, struct.pack("<I", len(s.params))]
    for name, t in s.params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    payload = b"".join(parts)
    return payload + _digest(payload)


def save_checkpoint(s: ModelState, path):
    """Write atomically: a failed write never leaves a partial file at ``path``."""
    blob = to_bytes(s)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError("unexpected end of checkpoint data")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(blob, expected_config: ModelConfig = None):
    if len(blob) < len(MAGIC) + DIGEST or blob[:len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError("not a checkpoint (bad magic or too short)")
    payload, digest = blob[:-DIGEST], blob[-DIGEST:]
    if _digest(payload) != digest:
        raise CorruptCheckpointError("checksum mismatch")
    r = _Reader(payload)
    r.take(len(MAGIC))
    version, hlen = r.unpack("<IQ")
    if version != VERSION:
        raise CorruptCheckpointError(f"unsupported format version {version}")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"bad header: {exc}") from None
    if expected_config is not None and expected_config != config:
        mine, theirs = expected_config.to_dict(), config.to_dict()
        diff = sorted(k for k in mine if mine[k] != theirs[k])
        raise ConfigMismatchError(f"checkpoint config differs from the requested one in {diff}")
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q")
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(payload):
        raise CorruptCheckpointError("trailing bytes after the last record")
    return ModelState(config, Vocab(header["vocab"]), VariantTable.from_dict(header["variants"]), params)


def load_checkpoint(path, expected_config: ModelConfig = None):
    with open(path, "rb") as fh:
        return from_bytes(fh.read(), expected_config)


def record_count(path):
    """Number of scalar values stored in a checkpoint file."""
    s = load_checkpoint(path)
    return s.parameter_count()
