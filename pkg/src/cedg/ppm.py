"""Binary PPM (P6) images, 8-bit, maxval 255.

In-memory layout is channel-planar uint8 [3,H,W]; the file stores interleaved
RGB rows as the format requires.
"""
from __future__ import annotations

import numpy as np

from .errors import DataError


def _next_token(f, path) -> bytes:
    tok = b""
    while True:
        ch = f.read(1)
        if not ch:
            raise DataError(f"{path}: truncated PPM header")
        if ch in b" \t\r\n":
            if tok:
                return tok
            continue
        if ch == b"#":  # comment runs to end of line
            while ch and ch != b"\n":
                ch = f.read(1)
            continue
        tok += ch


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        if _next_token(f, path) != b"P6":
            raise DataError(f"{path}: not a binary PPM (P6) file")
        try:
            w = int(_next_token(f, path))
            h = int(_next_token(f, path))
            maxval = int(_next_token(f, path))
        except ValueError:
            raise DataError(f"{path}: malformed PPM header") from None
        if w < 1 or h < 1:
            raise DataError(f"{path}: bad PPM dimensions {w}x{h}")
        if maxval != 255:
            raise DataError(f"{path}: only maxval 255 supported, got {maxval}")
        raw = f.read(w * h * 3)
        if len(raw) != w * h * 3:
            raise DataError(f"{path}: truncated PPM pixel data")
    inter = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return np.ascontiguousarray(inter.transpose(2, 0, 1))


def write_ppm(path, img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[0] != 3:
        raise DataError(f"write_ppm expects [3,H,W] pixels, got {img.shape}")
    if img.dtype != np.uint8:
        raise DataError(f"write_ppm expects uint8 pixels, got {img.dtype}")
    _, h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(img.transpose(1, 2, 0)).tobytes())
