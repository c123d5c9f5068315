"""Portable graymap/pixmap raster files.

Writes binary P5 (grayscale) and P6 (color) with maxval 255; reads the
binary and ASCII variants (P2/P3/P5/P6).  Round-trips of uint8 data are
bit-exact.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _u8(array: np.ndarray, name: str) -> np.ndarray:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        if array.min() < 0 or array.max() > 255:
            raise ValueError(f"{name}: values outside [0, 255]")
        array = array.astype(np.uint8)
    return array


def write_pgm(path, gray: np.ndarray):
    gray = _u8(gray, "write_pgm")
    if gray.ndim != 2:
        raise ValueError(f"write_pgm: expected (H, W), got shape {gray.shape}")
    h, w = gray.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def write_ppm(path, rgb: np.ndarray):
    rgb = _u8(rgb, "write_ppm")
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"write_ppm: expected (H, W, 3), got shape {rgb.shape}")
    h, w, _ = rgb.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def _read_header_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    """Parse whitespace/comment-separated integers; return values and offset."""
    values: list[int] = []
    i = 0
    while len(values) < count:
        if i >= len(data):
            raise ValueError("truncated header")
        c = data[i : i + 1]
        if c == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j : j + 1].isspace():
                if data[j : j + 1] == b"#":
                    break
                j += 1
            token = data[i:j]
            if not token.isdigit():
                raise ValueError(f"bad header token {token!r}")
            values.append(int(token))
            i = j
    return values, i


def read_pnm(path) -> np.ndarray:
    """Read a PGM/PPM file; returns uint8 (H, W) or (H, W, 3)."""
    path = Path(path)
    data = path.read_bytes()
    magic = data[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported raster magic {magic!r}")
    channels = 3 if magic in (b"P3", b"P6") else 1
    body = data[2:]
    (w, h, maxval), offset = _read_header_tokens(body, 3)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    count = w * h * channels
    if magic in (b"P5", b"P6"):
        raw = body[offset + 1 : offset + 1 + count]  # one whitespace after maxval
        if len(raw) != count:
            raise ValueError(f"{path}: expected {count} pixel bytes, got {len(raw)}")
        pixels = np.frombuffer(raw, dtype=np.uint8)
    else:
        tokens = body[offset:].split()
        if len(tokens) != count:
            raise ValueError(f"{path}: expected {count} pixel values, got {len(tokens)}")
        pixels = np.array([int(t) for t in tokens], dtype=np.uint8)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return pixels.reshape(shape)


def image_to_u8(img: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8 by round-half-away quantization."""
    img = np.asarray(img, dtype=np.float64)
    if img.min() < 0 or img.max() > 1:
        raise ValueError("image_to_u8: values outside [0, 1]")
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)


def u8_to_image(raw: np.ndarray) -> np.ndarray:
    return np.asarray(raw, dtype=np.float64) / 255.0
