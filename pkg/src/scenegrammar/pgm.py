"""Portable graymap (PGM) read/write, 8-bit and 16-bit.

Binary P5 is written; P2 and P5 are read.  16-bit samples are big-endian
per the netpbm spec.
"""

from __future__ import annotations

import re

import numpy as np


def write_pgm(path, image: np.ndarray, maxval: int = None) -> None:
    """Write a 2D uint array as binary PGM.

    maxval defaults to 255 for uint8 input and 65535 otherwise.  Values
    are clipped into range.
    """
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM images are 2D")
    if maxval is None:
        maxval = 255 if img.dtype == np.uint8 else 65535
    if not (0 < maxval < 65536):
        raise ValueError("maxval must be in [1, 65535]")
    arr = np.clip(np.rint(img), 0, maxval)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii")
    if maxval < 256:
        payload = arr.astype(np.uint8).tobytes()
    else:
        payload = arr.astype(">u2").tobytes()
    with open(path, "wb") as fh:
        fh.write(header + payload)


def read_pgm(path) -> np.ndarray:
    """Read a P2 or P5 graymap; returns uint8 or uint16 (h, w)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] not in (b"P2", b"P5"):
        raise ValueError("not a PGM file (expected P2 or P5)")
    binary = data[:2] == b"P5"
    # strip comments, then split the three header tokens
    pos = 2
    tokens = []
    while len(tokens) < 3:
        m = re.match(rb"\s*(#[^\n]*\n|\S+)", data[pos:])
        if not m:
            raise ValueError("truncated PGM header")
        tok = m.group(1)
        pos += m.end()
        if not tok.startswith(b"#"):
            tokens.append(tok)
    width, height, maxval = (int(t) for t in tokens)
    if binary:
        pos += 1  # single whitespace after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
        count = width * height
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
        out = arr.astype(np.uint16 if maxval > 255 else np.uint8)
    else:
        values = data[pos:].split()
        arr = np.array([int(v) for v in values[: width * height]])
        out = arr.astype(np.uint16 if maxval > 255 else np.uint8)
    return out.reshape(height, width)


def belief_to_pgm(path, belief_grid: np.ndarray, maxval: int = 65535) -> None:
    """Render beliefs in [0, 1]; high probability prints dark."""
    b = np.clip(np.asarray(belief_grid, dtype=np.float64), 0.0, 1.0)
    write_pgm(path, np.rint((1.0 - b) * maxval), maxval=maxval)


def pgm_to_belief(path) -> np.ndarray:
    """Inverse of belief_to_pgm up to quantization."""
    img = read_pgm(path)
    maxval = 255 if img.dtype == np.uint8 else 65535
    return 1.0 - img.astype(np.float64) / maxval


def mask_to_pgm(path, mask: np.ndarray) -> None:
    """Binary map rendering: present pixels print black on white."""
    m = np.asarray(mask).astype(bool)
    write_pgm(path, np.where(m, 0, 255).astype(np.uint8), maxval=255)


def pgm_to_mask(path, threshold: float = 0.5) -> np.ndarray:
    """Binary map from a rendering written by mask_to_pgm."""
    img = read_pgm(path)
    maxval = 255 if img.dtype == np.uint8 else 65535
    return img.astype(np.float64) / maxval < threshold


def image_to_pgm(path, pixels: np.ndarray, maxval: int = 65535) -> None:
    """Store a real-valued image, rounded and clipped into [0, maxval]."""
    write_pgm(path, np.clip(np.rint(pixels), 0, maxval), maxval=maxval)
