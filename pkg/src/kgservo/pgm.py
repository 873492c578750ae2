"""Binary (P5) PGM read/write for 8-bit grayscale images and masks."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PgmError(Exception):
    pass


def write_pgm(path, values: np.ndarray) -> None:
    """Write a float grid in [0, 1] (or uint8 grid) as an 8-bit P5 file."""
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise PgmError(f"expected a 2-D grid, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + arr.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit P5 file into a float grid in [0, 1]."""
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    # header: magic, width, height, maxval, with '#' comments allowed
    while len(fields) < 4:
        if pos >= len(data):
            raise PgmError(f"{path}: truncated header")
        ch = data[pos : pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            pos = data.index(b"\n", pos) + 1
        else:
            end = pos
            while end < len(data) and not data[end : end + 1].isspace():
                end += 1
            fields.append(data[pos:end])
            pos = end
    if fields[0] != b"P5":
        raise PgmError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise PgmError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace after maxval
    raster = data[pos : pos + w * h]
    if len(raster) != w * h:
        raise PgmError(f"{path}: raster has {len(raster)} bytes, need {w * h}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).astype(float) / 255.0
