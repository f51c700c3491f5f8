"""8-bit binary PGM (P5) reading and writing."""
from __future__ import annotations

from pathlib import Path

import numpy as np


class PGMError(ValueError):
    pass


def write_pgm(path, image: np.ndarray) -> None:
    """Write a [H, W] array of values in [0, 1] (or uint8) as P5, maxval 255."""
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise PGMError(f"PGM needs a 2-D image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(np.asarray(arr, np.float64) * 255.0), 0, 255).astype(np.uint8)
    H, W = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    out, pos = [], 2
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PGMError("truncated PGM header")
        out.append(buf[start:pos])
    return out, pos + 1  # single whitespace after maxval


def read_pgm(path) -> np.ndarray:
    """Return a uint8 [H, W] array."""
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise PGMError(f"{path}: not a binary PGM (P5)")
    (w, h, maxval), pos = _tokens(buf, 3)
    W, H, M = int(w), int(h), int(maxval)
    if M != 255:
        raise PGMError(f"{path}: only maxval 255 supported, got {M}")
    data = buf[pos:pos + W * H]
    if len(data) != W * H:
        raise PGMError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(H, W).copy()
