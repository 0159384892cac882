"""Binary torus files (KTF).

Layout, little-endian throughout::

    b"KTF1"
    u32 version, n1, n2, l, then one u32 grid size per angle (n + l)
    i64 degree map, n1 rows of n entries
    f64 omega (n), alpha (l)
    u32 parameter count, then per parameter: u32 name length, ASCII name, f64 value
    2n blocks of the half-spectrum coefficients, each complex value as (re, im)
    u64 checksum: sum of every byte between the magic and the checksum, mod 2^64

The half spectrum is the real-to-complex (Hermitian-reduced) layout with the
last axis truncated to ``N // 2 + 1`` entries, stored in row-major order.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import spectral as sp
from .errors import ConfigurationError
from .geometry import TorusEmbedding
from .spectral import FrequencyVector

MAGIC = b"KTF1"
VERSION = 1


def _checksum(payload: bytes) -> int:
    return int(np.frombuffer(payload, dtype=np.uint8).sum(dtype=np.uint64))


def encode(K: TorusEmbedding) -> bytes:
    n, n1, ell = K.n, K.n1, K.ell
    parts = [struct.pack("<4I", VERSION, n1, n - n1, ell),
             struct.pack(f"<{len(K.shape)}I", *K.shape),
             np.asarray(K.degree, dtype="<i8").tobytes(),
             np.asarray(K.freq.omega, dtype="<f8").tobytes(),
             np.asarray(K.freq.alpha, dtype="<f8").tobytes(),
             struct.pack("<I", len(K.params))]
    for name, value in K.params.items():
        raw = name.encode("ascii")
        parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<d", float(value)))
    coeffs = np.ascontiguousarray(K.coeffs, dtype=np.complex128)
    parts.append(coeffs.view("<f8").tobytes())
    payload = b"".join(parts)
    return MAGIC + payload + struct.pack("<Q", _checksum(payload))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.data):
            raise ConfigurationError("torus file is truncated")
        out = self.data[self.pos:self.pos + count]
        self.pos += count
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        item = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(item * count), dtype=dtype).copy()


def decode(data: bytes) -> TorusEmbedding:
    if len(data) < 4 + 16 + 8 or data[:4] != MAGIC:
        raise ConfigurationError("not a KTF1 torus file")
    payload, tail = data[4:-8], data[-8:]
    (stored,) = struct.unpack("<Q", tail)
    if stored != _checksum(payload):
        raise ConfigurationError("torus file checksum mismatch")
    r = _Reader(payload)
    version, n1, n2, ell = r.unpack("<4I")
    if version != VERSION:
        raise ConfigurationError(f"unsupported torus file version {version}")
    n = n1 + n2
    shape = tuple(int(s) for s in r.unpack(f"<{n + ell}I"))
    degree = r.array("<i8", n1 * n).reshape(n1, n).astype(np.int64)
    omega = r.array("<f8", n)
    alpha = r.array("<f8", ell)
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (length,) = r.unpack("<I")
        name = r.take(length).decode("ascii")
        (value,) = r.unpack("<d")
        params[name] = value
    half = sp.half_shape(shape)
    count_complex = 2 * n * int(np.prod(half))
    if len(payload) - r.pos != 16 * count_complex:
        raise ConfigurationError(
            f"declared sizes need {16 * count_complex} coefficient bytes, file holds {len(payload) - r.pos}")
    flat = r.array("<f8", 2 * count_complex)
    coeffs = flat.view(np.complex128).reshape((2 * n,) + half)
    return TorusEmbedding(coeffs, shape, degree, FrequencyVector(omega, alpha), params)


def write_ktf(path, K: TorusEmbedding) -> Path:
    path = Path(path)
    path.write_bytes(encode(K))
    return path


def read_ktf(path) -> TorusEmbedding:
    return decode(Path(path).read_bytes())
