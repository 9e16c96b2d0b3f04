"""Bit-exact file formats.

TensorFile (all integers little-endian)::

    0   6   magic   b"DQTEN\\0"
    6   2   u16     version (1)
    8   1   u8      dtype (0 = f32, 1 = f64)
    9   1   u8      ndim
    10  8n  u64[n]  dims
    ..      payload, row-major, little-endian

QuantFile::

    0   6   magic   b"DQQNT\\0"
    6   2   u16     version (1)
    8   1   u8      bits
    9   4   i32     alpha
    13  4   i32     beta
    17  8   u64     d_in
    25  8   u64     d_out
    33  4   u32     ng
    37      codes   d_out columns, each ceil(d_in*bits/8) bytes
            scales  d_out x ng f32
            zeros   d_out x ng f32

Codes are ``c = w - alpha`` packed LSB-first as a contiguous bit stream per
output column; the last byte of a column is zero-padded.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import FormatError, ValidationError
from .layerwise import QuantizedLayer

TENSOR_MAGIC = b"DQTEN\x00"
QUANT_MAGIC = b"DQQNT\x00"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_QHEADER = struct.Struct("<6sHBiiQQI")
_MAX_BYTES = 1 << 62


def column_nbytes(d_in: int, bits: int) -> int:
    return (d_in * bits + 7) // 8


def pack_codes(w, bits: int, alpha: int) -> bytes:
    w = np.asarray(w, dtype=np.int64).ravel()
    c = w - alpha
    bad = np.flatnonzero((c < 0) | (c >= 1 << bits))
    if bad.size:
        i = int(bad[0])
        raise ValidationError(
            f"value {int(w[i])} at index {i} outside [{alpha}, {alpha + (1 << bits) - 1}]"
        )
    bitplanes = ((c[:, None] >> np.arange(bits)) & 1).astype(np.uint8)
    return np.packbits(bitplanes.ravel(), bitorder="little").tobytes()


def unpack_codes(data: bytes, d_in: int, bits: int, alpha: int, offset: int = 0) -> np.ndarray:
    need = column_nbytes(d_in, bits)
    if len(data) != need:
        raise FormatError(
            f"packed column has {len(data)} bytes, expected {need}", offset=offset
        )
    raw = np.frombuffer(data, dtype=np.uint8)
    flat = np.unpackbits(raw, count=d_in * bits, bitorder="little").reshape(d_in, bits)
    return flat.astype(np.int64) @ (1 << np.arange(bits)) + alpha


def tensor_to_bytes(t, dtype_code: int = 1) -> bytes:
    if dtype_code not in _DTYPES:
        raise ValidationError(f"unsupported dtype code {dtype_code}")
    a = np.asarray(t)
    header = TENSOR_MAGIC + struct.pack("<HBB", VERSION, dtype_code, a.ndim)
    header += struct.pack(f"<{a.ndim}Q", *a.shape)
    return header + np.ascontiguousarray(a, dtype=_DTYPES[dtype_code]).tobytes()


def tensor_from_bytes(data: bytes, with_dtype: bool = False):
    if len(data) < 10:
        raise FormatError("truncated tensor header", offset=len(data))
    if data[:6] != TENSOR_MAGIC:
        raise FormatError(f"bad magic {data[:6]!r}, expected {TENSOR_MAGIC!r}", offset=0)
    version, code, ndim = struct.unpack_from("<HBB", data, 6)
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version}", offset=6)
    if code not in _DTYPES:
        raise FormatError(f"unsupported dtype code {code}", offset=8)
    end = 10 + 8 * ndim
    if len(data) < end:
        raise FormatError("truncated dims", offset=len(data))
    dims = struct.unpack_from(f"<{ndim}Q", data, 10)
    dt = _DTYPES[code]
    n = 1
    for d in dims:
        n *= d
        if n * dt.itemsize > _MAX_BYTES:
            raise FormatError(f"dimension product overflows: dims {dims}", offset=10)
    if len(data) - end != n * dt.itemsize:
        raise FormatError(
            f"payload has {len(data) - end} bytes, expected {n * dt.itemsize}", offset=end
        )
    arr = np.frombuffer(data, dtype=dt, offset=end, count=n).astype(np.float64).reshape(dims)
    return (arr, code) if with_dtype else arr


def write_tensor(path, t, dtype_code: int = 1) -> None:
    _write(path, tensor_to_bytes(t, dtype_code))


def read_tensor(path, with_dtype: bool = False):
    return tensor_from_bytes(_read(path), with_dtype)


def quant_to_bytes(layer: QuantizedLayer) -> bytes:
    d_in, d_out, ng = layer.d_in, layer.d_out, layer.group_count
    out = [_QHEADER.pack(QUANT_MAGIC, VERSION, layer.bits, layer.alpha, layer.beta, d_in, d_out, ng)]
    for j in range(d_out):
        out.append(pack_codes(layer.w[:, j], layer.bits, layer.alpha))
    out.append(np.ascontiguousarray(layer.scales, dtype="<f4").tobytes())
    out.append(np.ascontiguousarray(layer.zeros, dtype="<f4").tobytes())
    return b"".join(out)


def quant_from_bytes(data: bytes) -> QuantizedLayer:
    if len(data) < _QHEADER.size:
        raise FormatError("truncated quant header", offset=len(data))
    magic, version, bits, alpha, beta, d_in, d_out, ng = _QHEADER.unpack_from(data, 0)
    if magic != QUANT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {QUANT_MAGIC!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported quant version {version}", offset=6)
    if bits not in (2, 3, 4) or beta - alpha + 1 != 1 << bits:
        raise FormatError(f"inconsistent grid: bits={bits}, alpha={alpha}, beta={beta}", offset=8)
    if ng == 0 or d_in % ng:
        raise FormatError(f"group count {ng} does not divide d_in={d_in}", offset=33)
    col = column_nbytes(d_in, bits)
    if d_out * (col + 8 * ng) > _MAX_BYTES:
        raise FormatError(f"dimension product overflows: d_in={d_in}, d_out={d_out}", offset=17)
    expected = _QHEADER.size + d_out * col + 2 * 4 * d_out * ng
    if len(data) != expected:
        raise FormatError(f"file has {len(data)} bytes, expected {expected}", offset=0)
    pos = _QHEADER.size
    w = np.empty((d_in, d_out), dtype=np.int64)
    for j in range(d_out):
        w[:, j] = unpack_codes(data[pos : pos + col], d_in, bits, alpha, offset=pos)
        pos += col
    nsz = d_out * ng
    scales = np.frombuffer(data, "<f4", nsz, pos).astype(np.float64).reshape(d_out, ng)
    zeros = np.frombuffer(data, "<f4", nsz, pos + 4 * nsz).astype(np.float64).reshape(d_out, ng)
    return QuantizedLayer(w, scales, zeros, bits, alpha, beta)


def write_quant(path, layer: QuantizedLayer) -> None:
    _write(path, quant_to_bytes(layer))


def read_quant(path) -> QuantizedLayer:
    return quant_from_bytes(_read(path))


def stored_f32(a) -> np.ndarray:
    """Values as they will come back from a QuantFile (rounded through f32)."""
    return np.asarray(a, dtype=np.float64).astype("<f4").astype(np.float64)


def write_json(path, obj) -> None:
    _write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def _write(path, data: bytes) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def _read(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()
