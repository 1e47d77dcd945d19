"""Raster chunks and their canonical wire encoding.

A chunk is one band of one tile: a row-major array of values plus dtype and
an optional NODATA sentinel.  Identity is SHA-256 over the canonical
*uncompressed* encoding below, so at-rest compression never changes a hash.

Wire layout (little-endian throughout):

    magic "ADF1" | dtype code u8 | width u32 | height u32
    | nodata flag u8 | nodata as f64 bit pattern (zeros if absent)
    | values row-major

dtype codes: 1=u8, 2=i16, 3=i32, 4=f32, 5=f64.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .canonical import sha256_hex
from .errors import ArkError, DomainError, UnsupportedFormatError

MAGIC = b"ADF1"

DTYPE_CODES = {"u8": 1, "i16": 2, "i32": 3, "f32": 4, "f64": 5}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}
NUMPY_DTYPES = {
    "u8": np.dtype("<u1"),
    "i16": np.dtype("<i2"),
    "i32": np.dtype("<i4"),
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
}
FLOAT_DTYPES = ("f32", "f64")

_HEADER = struct.Struct("<4sBIIBd")


@dataclass
class Chunk:
    dtype: str
    width: int
    height: int
    nodata: Optional[float]
    values: np.ndarray  # shape (height, width), row-major

    def __post_init__(self):
        if self.dtype not in DTYPE_CODES:
            raise UnsupportedFormatError(f"unknown chunk dtype {self.dtype!r}")
        want = NUMPY_DTYPES[self.dtype]
        if self.values.dtype != want:
            self.values = np.ascontiguousarray(self.values, dtype=want)
        else:
            self.values = np.ascontiguousarray(self.values)
        if self.values.shape != (self.height, self.width):
            raise ArkError(
                f"values shape {self.values.shape} != ({self.height}, {self.width})"
            )
        if self.nodata is not None:
            self.nodata = float(self.nodata)

    def valid_mask(self) -> np.ndarray:
        """True where the cell carries data."""
        if self.nodata is None:
            return np.ones(self.values.shape, dtype=bool)
        return self.values != np.asarray(self.nodata).astype(self.values.dtype)

    def copy_with(self, values: np.ndarray) -> "Chunk":
        return Chunk(self.dtype, self.width, self.height, self.nodata, values)


def canonical_chunk_bytes(chunk: Chunk) -> bytes:
    flag = 0 if chunk.nodata is None else 1
    nd = 0.0 if chunk.nodata is None else chunk.nodata
    header = _HEADER.pack(
        MAGIC, DTYPE_CODES[chunk.dtype], chunk.width, chunk.height, flag, nd
    )
    return header + chunk.values.tobytes(order="C")


def chunk_from_bytes(data: bytes) -> Chunk:
    if len(data) < _HEADER.size or data[:4] != MAGIC:
        raise UnsupportedFormatError("not a chunk object")
    magic, code, width, height, flag, nd = _HEADER.unpack_from(data, 0)
    dtype = CODE_DTYPES.get(code)
    if dtype is None:
        raise UnsupportedFormatError(f"unknown chunk dtype code {code}")
    npdt = NUMPY_DTYPES[dtype]
    expect = _HEADER.size + width * height * npdt.itemsize
    if len(data) != expect:
        raise UnsupportedFormatError(f"chunk payload length {len(data)} != {expect}")
    values = np.frombuffer(data, dtype=npdt, offset=_HEADER.size).reshape(height, width)
    return Chunk(dtype, width, height, nd if flag else None, values.copy())


def chunk_hash(chunk: Chunk) -> str:
    return sha256_hex(canonical_chunk_bytes(chunk))


def looks_like_chunk(data: bytes) -> bool:
    return data[:4] == MAGIC


@dataclass(frozen=True)
class Codebook:
    min_value: float
    step: float
    bits: int


def lossy_quantize(chunk: Chunk, max_abs_error: float) -> tuple[Chunk, Codebook]:
    """Uniform scalar quantization of a float chunk.

    Levels live on a lattice through zero whose step is a hair under
    2*max_abs_error: the step is a whole number of granules, where one
    granule is max_abs_error / 4096 rounded to a power of two.  The shave
    buys the slack that keeps every cell within the bound even after the
    value is rounded into the chunk's storage dtype, and anchoring at zero
    (rather than at the data minimum) makes the lattice independent of the
    data, so re-quantizing already-quantized values reproduces them bit for
    bit.  Cells whose lattice neighbors all miss the bound, or would collide
    with the NODATA sentinel, keep their original value.  NODATA cells pass
    through untouched.
    """
    if chunk.dtype not in FLOAT_DTYPES:
        raise DomainError(f"lossy quantization needs a float dtype, got {chunk.dtype}")
    max_abs_error = float(max_abs_error)
    if not (max_abs_error > 0 and math.isfinite(max_abs_error)):
        raise DomainError("max_abs_error must be a positive finite number")

    npdt = NUMPY_DTYPES[chunk.dtype]
    _, exp = math.frexp(max_abs_error)
    granule = math.ldexp(1.0, exp - 13)
    step = (math.floor(2.0 * max_abs_error / granule) - 1) * granule

    valid = chunk.valid_mask()
    vals = chunk.values.astype(np.float64)
    finite = valid & np.isfinite(vals)
    if not finite.any():
        return chunk.copy_with(chunk.values.copy()), Codebook(0.0, step, 0)

    lo = float(vals[finite].min())
    hi = float(vals[finite].max())
    if hi == lo:
        return chunk.copy_with(chunk.values.copy()), Codebook(lo, step, 0)
    bits = math.ceil(math.log2((hi - lo) / (2.0 * max_abs_error) + 1.0))

    sentinel = None
    if chunk.nodata is not None:
        sentinel = np.asarray(chunk.nodata, dtype=npdt)

    with np.errstate(invalid="ignore", over="ignore"):
        q = np.rint(vals / step)
        best = chunk.values.copy()
        best_err = np.full(vals.shape, np.inf)
        for delta in (-1.0, 0.0, 1.0):
            cand = ((q + delta) * step).astype(npdt)
            err = np.abs(cand.astype(np.float64) - vals)
            ok = (err <= max_abs_error) & (err < best_err)
            if sentinel is not None:
                ok &= cand != sentinel
            best = np.where(ok, cand, best)
            best_err = np.where(ok, err, best_err)

    out = chunk.values.copy()
    out[valid] = best[valid]
    min_value = float(out[finite].astype(np.float64).min())
    return chunk.copy_with(out), Codebook(min_value, step, bits)
