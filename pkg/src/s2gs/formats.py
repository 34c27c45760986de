"""Binary artifact formats: PPM color, 16-bit PGM labels, raw f32 depth."""

from __future__ import annotations

import numpy as np

from .errors import DataError

DEPTH_MAGIC = b"S2DP"


def write_ppm(path, image):
    """[H, W, 3] floats in [0, 1] -> binary P6, maxval 255."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, rest = raw.split(b"\n", 1)
    if magic != b"P6":
        raise DataError(f"{path}: expected P6 image")
    dims, maxval, pixels = rest.split(b"\n", 2)
    w, h = (int(v) for v in dims.split())
    if maxval != b"255":
        raise DataError(f"{path}: unsupported maxval {maxval!r}")
    data = np.frombuffer(pixels, dtype=np.uint8, count=h * w * 3).reshape(h, w, 3)
    return data.astype(np.float32) / 255.0


def write_pgm16(path, labels):
    """[H, W] non-negative integers -> binary P5, maxval 65535, big-endian."""
    arr = np.asarray(labels)
    if arr.max(initial=0) > 65535:
        raise DataError("label value exceeds 16-bit PGM range")
    data = arr.astype(">u2")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm16(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, rest = raw.split(b"\n", 1)
    if magic != b"P5":
        raise DataError(f"{path}: expected P5 image")
    dims, maxval, pixels = rest.split(b"\n", 2)
    w, h = (int(v) for v in dims.split())
    if maxval != b"65535":
        raise DataError(f"{path}: unsupported maxval {maxval!r}")
    return np.frombuffer(pixels, dtype=">u2", count=h * w).reshape(h, w).astype(np.uint32)


def write_depth(path, depth):
    """[H, W] float depth -> one-line text header plus raw little-endian f32."""
    arr = np.asarray(depth, dtype="<f4")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"S2DP {h} {w}\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_depth(path):
    with open(path, "rb") as fh:
        header = fh.readline()
        parts = header.split()
        if len(parts) != 3 or parts[0] != DEPTH_MAGIC:
            raise DataError(f"{path}: bad depth header {header!r}")
        h, w = int(parts[1]), int(parts[2])
        return np.frombuffer(fh.read(4 * h * w), dtype="<f4", count=h * w).reshape(h, w).copy()
