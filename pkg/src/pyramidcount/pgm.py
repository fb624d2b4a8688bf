"""8-bit grayscale PGM (P5/P2) reading and writing."""
from __future__ import annotations

import numpy as np

from .errors import InputError


def _tokens(data, start, count):
    out, i = [], start
    while len(out) < count:
        while i < len(data) and chr(data[i]).isspace():
            i += 1
        if i < len(data) and data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not chr(data[j]).isspace():
            j += 1
        if j == i:
            raise InputError("truncated PGM header")
        out.append(data[i:j])
        i = j
    return out, i


def read_pgm(path):
    """Returns a (h, w) uint8/uint16 array."""
    with open(path, "rb") as f:
        data = f.read()
    magic = data[:2]
    if magic not in (b"P5", b"P2"):
        raise InputError(f"{path}: not a PGM file")
    try:
        (w, h, maxval), pos = _tokens(data, 2, 3)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise InputError(f"{path}: malformed PGM header") from None
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise InputError(f"{path}: invalid PGM dims/maxval {w}x{h}/{maxval}")
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    if magic == b"P5":
        raw = data[pos + 1:]
        n = w * h * np.dtype(dtype).itemsize
        if len(raw) < n:
            raise InputError(f"{path}: truncated pixel data")
        img = np.frombuffer(raw[:n], dtype=dtype).reshape(h, w)
    else:
        vals, _ = _tokens(data, pos, w * h)
        img = np.array([int(v) for v in vals]).reshape(h, w)
    return img.astype(np.uint8 if maxval < 256 else np.uint16)


def write_pgm(path, img):
    img = np.asarray(img)
    if img.ndim != 2:
        raise InputError(f"PGM needs a 2-D array, got shape {img.shape}")
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def write_pgm_normalized(path, grid):
    """Scale a non-negative map so its max is 255 (all-zero maps stay black)."""
    grid = np.asarray(grid, dtype=np.float64)
    m = grid.max() if grid.size else 0.0
    write_pgm(path, grid / m * 255.0 if m > 0 else np.zeros_like(grid))
