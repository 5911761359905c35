"""Attention visualisation: heat overlay PPM and raw map PGM."""

from __future__ import annotations

import numpy as np

from .data.netpbm import encode_pgm, write_image

ALPHA = 0.5
HEAT = np.array([1.0, 0.0, 0.0])
OUTLINE = np.array([0.0, 1.0, 0.0])
LUMA = np.array([0.299, 0.587, 0.114])


def grayscale(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.shape[0] == 1:
        return img[0]
    return np.tensordot(LUMA, img[:3], axes=1)


def upsample(amap: np.ndarray, cell: int) -> np.ndarray:
    return np.kron(np.asarray(amap, dtype=np.float64), np.ones((cell, cell)))


def normalized(amap: np.ndarray) -> np.ndarray:
    m = np.asarray(amap, dtype=np.float64)
    top = m.max() if m.size else 0.0
    return m / top if top > 0 else np.zeros_like(m)


def overlay_pixels(image: np.ndarray, amap: np.ndarray, rects=(), cell: int = 14) -> np.ndarray:
    """3 x H x W overlay in [0, 1].

    Each pixel is ``(1 - a*m) * gray + a*m * HEAT`` with ``m`` the
    max-normalized map value of its cell and ``a = ALPHA``; the one-pixel
    border of every (top, left, bottom, right) rect is then set to OUTLINE.
    """
    gray = grayscale(image)
    h, w = gray.shape
    m = upsample(normalized(amap), cell)
    if m.shape != (h, w):
        raise ValueError(f"map covers {m.shape[0]}x{m.shape[1]} pixels, image is {h}x{w}")
    a = ALPHA * m
    out = (1 - a)[None] * gray[None] + a[None] * HEAT[:, None, None]
    for top, left, bottom, right in rects:
        out[:, top, left:right] = OUTLINE[:, None]
        out[:, bottom - 1, left:right] = OUTLINE[:, None]
        out[:, top:bottom, left] = OUTLINE[:, None]
        out[:, top:bottom, right - 1] = OUTLINE[:, None]
    return out


def render_attention_overlay(image: np.ndarray, amap: np.ndarray, patches, out_path, cell: int = 14) -> np.ndarray:
    """Write the overlay as a PPM; ``patches`` is a PatchSet, a rect list or None."""
    rects = [] if patches is None else getattr(patches, "rects", patches)
    out = overlay_pixels(image, amap, rects, cell)
    write_image(out, out_path)
    return out


def write_attention_map(amap: np.ndarray, out_path) -> None:
    """Write the cell-resolution map as a PGM, scaled so its maximum is 255."""
    encode_pgm(normalized(amap), out_path)
