"""Binary PGM (P5) and PPM (P6) reading and writing.

Decoded images are float arrays in [0, 1], channels x height x width.
"""

from __future__ import annotations

import os
import re

import numpy as np


class ImageFormatError(ValueError):
    pass


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _header(buf: bytes):
    pos = 0
    tokens = []
    while len(tokens) < 4:
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise ImageFormatError("corrupt header: ran out of tokens")
        tokens.append(m.group(1))
        pos = m.end()
    if pos >= len(buf) or buf[pos : pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise ImageFormatError("corrupt header: missing separator before raster")
    magic = tokens[0]
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageFormatError("corrupt header: non-integer dimension")
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ImageFormatError(f"corrupt header: bad size {width}x{height} or maxval {maxval}")
    return magic, width, height, maxval, pos + 1


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 2 or buf[:2] not in (b"P5", b"P6"):
        raise ImageFormatError(
            "only binary PGM (P5) and PPM (P6) are supported; convert other formats first, "
            "e.g. `convert in.jpg out.ppm` (ImageMagick) or `PIL.Image.open(p).save(q.ppm)`"
        )
    magic, width, height, maxval, start = _header(buf)
    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * channels * dtype.itemsize
    raster = buf[start : start + need]
    if len(raster) < need:
        raise ImageFormatError(f"truncated raster: expected {need} bytes, found {len(raster)}")
    px = np.frombuffer(raster, dtype=dtype).reshape(height, width, channels)
    return (px.astype(np.float64) / maxval).transpose(2, 0, 1)


def read_image(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    try:
        return decode(buf)
    except ImageFormatError as e:
        raise ImageFormatError(f"{path}: {e}") from None


def to_bytes(img: np.ndarray) -> np.ndarray:
    """Quantize a [0, 1] float image to 8 bits (round half to even)."""
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode(img: np.ndarray) -> bytes:
    """Encode a C x H x W (C in {1, 3}) or H x W image as P5/P6 with maxval 255."""
    a = np.asarray(img)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3 or a.shape[0] not in (1, 3):
        raise ImageFormatError(f"can only encode 1- or 3-channel images, got shape {a.shape}")
    px = a if a.dtype == np.uint8 else to_bytes(a)
    c, h, w = px.shape
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(px.transpose(1, 2, 0)).tobytes()


def write_image(img: np.ndarray, path) -> None:
    data = encode(img)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def encode_pgm(img: np.ndarray, path) -> None:
    """Write a single-channel image as P5."""
    a = np.asarray(img)
    if a.ndim == 3:
        if a.shape[0] != 1:
            raise ImageFormatError("encode_pgm needs a single-channel image")
        a = a[0]
    write_image(a, path)
