"""Binary PPM (P6, maxval 255) reading and writing.

The only image format the package touches; conversion from other formats is
the user's preprocessing step. Header parsing accepts `#` comments and
arbitrary whitespace between fields, per the netpbm grammar.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .errors import FormatError


def _next_token(f: io.BufferedReader, path) -> bytes:
    tok = b""
    while True:
        ch = f.read(1)
        if ch == b"":
            raise FormatError(f"{path}: truncated PPM header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def read_ppm(path) -> np.ndarray:
    """Decode a P6 file into a uint8 array of shape [H, W, 3]."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic != b"P6":
            raise FormatError(f"{path}: not a binary PPM (magic {magic!r})")
        try:
            width = int(_next_token(f, path))
            height = int(_next_token(f, path))
            maxval = int(_next_token(f, path))
        except ValueError as e:
            raise FormatError(f"{path}: non-numeric PPM header field") from e
        if width < 1 or height < 1:
            raise FormatError(f"{path}: invalid dimensions {width}x{height}")
        if maxval != 255:
            raise FormatError(f"{path}: unsupported maxval {maxval} (need 255)")
        raw = f.read(width * height * 3)
    if len(raw) != width * height * 3:
        raise FormatError(f"{path}: pixel data truncated ({len(raw)} of {width * height * 3} bytes)")
    return np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(path, pixels: np.ndarray) -> None:
    """Encode a [H, W, 3] uint8 array as P6."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise FormatError(f"write_ppm expects [H, W, 3], got {pixels.shape}")
    if pixels.dtype != np.uint8:
        pixels = np.clip(np.rint(pixels), 0, 255).astype(np.uint8)
    h, w = pixels.shape[:2]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def nearest_resize(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resampling of a [H, W, C] array."""
    h, w = pixels.shape[:2]
    rows = (np.arange(out_h) * h) // out_h
    cols = (np.arange(out_w) * w) // out_w
    return pixels[rows][:, cols]


def to_unit_image(pixels: np.ndarray, dtype=np.float32) -> np.ndarray:
    """[H, W, 3] uint8 -> [3, H, W] float in [0, 1]."""
    arr = pixels.astype(dtype) / dtype(255)
    return np.clip(arr, 0.0, 1.0).transpose(2, 0, 1).copy()


def from_unit_image(img: np.ndarray) -> np.ndarray:
    """[3, H, W] float in [0, 1] -> [H, W, 3] uint8."""
    arr = np.clip(img, 0.0, 1.0).transpose(1, 2, 0)
    return np.rint(arr * 255.0).astype(np.uint8)
