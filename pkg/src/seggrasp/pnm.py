"""Binary PPM (P6) and PGM (P5) images, maxval 255."""

from __future__ import annotations

import re

import numpy as np

_HEADER = re.compile(rb"(P[56])\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s")


def to_uint8(img):
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img
    return np.clip(np.rint(np.asarray(img, np.float64) * 255), 0, 255).astype(np.uint8)


def write_ppm(path, img):
    data = to_uint8(img)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ValueError(f"PPM needs an HxWx3 image, got {data.shape}")
    h, w, _ = data.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(data).tobytes())


def write_pgm(path, img):
    data = to_uint8(img)
    if data.ndim != 2:
        raise ValueError(f"PGM needs an HxW image, got {data.shape}")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(data).tobytes())


def read_pnm(path) -> np.ndarray:
    """Read P5/P6 into uint8 (HxW or HxWx3)."""
    with open(path, "rb") as f:
        raw = f.read()
    m = _HEADER.match(raw)
    if not m:
        raise ValueError(f"{path}: not a binary PPM/PGM file")
    kind, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise ValueError(f"{path}: maxval {maxval} unsupported (need 255)")
    channels = 3 if kind == b"P6" else 1
    body = np.frombuffer(raw, np.uint8, count=w * h * channels, offset=m.end())
    return body.reshape((h, w, 3) if channels == 3 else (h, w)).copy()
