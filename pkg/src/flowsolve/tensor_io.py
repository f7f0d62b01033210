"""Binary tensor and PGM image serialization.

Tensor format: an 8-byte header (4-byte magic ``FS01``, uint16 rows,
uint16 cols, both little-endian) followed by rows*cols little-endian
float64 values in row-major order. Vectors are stored as a single row.

PGM: plain (P2) and raw (P5) grayscale at maxval 65535, with the linear
value mapping [-1, 1] -> [0, 65535]. Raw 16-bit samples are big-endian
per the netpbm convention.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import TensorFormatError

__all__ = [
    "MAGIC",
    "read_tensor",
    "write_tensor",
    "read_pgm",
    "write_pgm",
]

MAGIC = b"FS01"
_HEADER = struct.Struct("<4sHH")
PGM_MAXVAL = 65535


def write_tensor(path, arr) -> None:
    """Write a 1-D or 2-D float array; 1-D arrays are stored as one row."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError(f"expected 1-D or 2-D array, got ndim={arr.ndim}")
    rows, cols = arr.shape
    if rows > 0xFFFF or cols > 0xFFFF:
        raise ValueError(f"shape {arr.shape} exceeds the uint16 header limit")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, rows, cols))
        fh.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    """Read a tensor file back as a 2-D float64 array."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TensorFormatError(path, len(raw), "truncated header")
    magic, rows, cols = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise TensorFormatError(path, 0, f"bad magic {magic!r}, expected {MAGIC!r}")
    expected = _HEADER.size + rows * cols * 8
    if len(raw) != expected:
        raise TensorFormatError(
            path, min(len(raw), expected), f"payload size {len(raw) - _HEADER.size} does not match {rows}x{cols} float64"
        )
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    return data.reshape(rows, cols).astype(np.float64)


def write_pgm(path, arr, ascii_format: bool = False) -> None:
    """Write a 2-D array with values nominally in [-1, 1] as a 16-bit PGM."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"PGM output needs a 2-D array, got ndim={arr.ndim}")
    pixels = np.rint((arr + 1.0) * 0.5 * PGM_MAXVAL)
    pixels = np.clip(pixels, 0, PGM_MAXVAL).astype(np.uint16)
    h, w = arr.shape
    if ascii_format:
        lines = [f"P2\n{w} {h}\n{PGM_MAXVAL}\n"]
        lines.extend(" ".join(str(v) for v in row) + "\n" for row in pixels)
        Path(path).write_text("".join(lines))
    else:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n{PGM_MAXVAL}\n".encode("ascii"))
            fh.write(pixels.astype(">u2").tobytes(order="C"))


def _pgm_tokens(raw: bytes):
    """Yield (offset, token) pairs of the header, skipping '#' comments."""
    i = 0
    n = len(raw)
    while i < n:
        c = raw[i : i + 1]
        if c.isspace():
            i += 1
        elif c == b"#":
            while i < n and raw[i : i + 1] not in (b"\n", b"\r"):
                i += 1
        else:
            start = i
            while i < n and not raw[i : i + 1].isspace() and raw[i : i + 1] != b"#":
                i += 1
            yield start, raw[start:i]


def read_pgm(path) -> np.ndarray:
    """Read a P2/P5 PGM and map sample values linearly onto [-1, 1]."""
    raw = Path(path).read_bytes()
    tokens = _pgm_tokens(raw)
    try:
        off, magic = next(tokens)
    except StopIteration:
        raise TensorFormatError(path, 0, "empty file") from None
    if magic not in (b"P2", b"P5"):
        raise TensorFormatError(path, off, f"bad magic {magic!r}, expected P2 or P5")
    fields = []
    for _ in range(3):
        try:
            off, tok = next(tokens)
        except StopIteration:
            raise TensorFormatError(path, len(raw), "truncated header") from None
        try:
            fields.append(int(tok))
        except ValueError:
            raise TensorFormatError(path, off, f"expected integer, got {tok!r}") from None
    w, h, maxval = fields
    if w <= 0 or h <= 0 or maxval <= 0:
        raise TensorFormatError(path, off, f"invalid dimensions {w}x{h} maxval {maxval}")
    if magic == b"P2":
        values = []
        for off, tok in tokens:
            try:
                values.append(int(tok))
            except ValueError:
                raise TensorFormatError(path, off, f"expected integer sample, got {tok!r}") from None
        if len(values) != w * h:
            raise TensorFormatError(path, len(raw), f"expected {w * h} samples, got {len(values)}")
        pixels = np.array(values, dtype=np.float64).reshape(h, w)
        data_off = len(raw)
    else:
        # One whitespace byte separates the maxval token from the raster.
        data_off = off + len(str(maxval)) + 1
        itemsize = 2 if maxval > 255 else 1
        expected = w * h * itemsize
        if len(raw) - data_off != expected:
            raise TensorFormatError(path, data_off, f"expected {expected} raster bytes, got {len(raw) - data_off}")
        dtype = ">u2" if maxval > 255 else "u1"
        pixels = np.frombuffer(raw, dtype=dtype, offset=data_off).reshape(h, w).astype(np.float64)
    if np.any(pixels > maxval):
        raise TensorFormatError(path, data_off, "sample exceeds maxval")
    return 2.0 * pixels / maxval - 1.0
