"""Synthetic re-identification corpus with a known discriminative region.

Each identity is a simple body silhouette in one of a few shared clothing
colour combinations, so clothing alone is ambiguous. What makes an identity
unique is a high-contrast 4x4 block glyph printed on the torso. Cameras
differ in background texture, illumination and glyph placement. The glyph
bounding box of every image is written to a ground-truth manifest.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import Dataset, ImageSample
from .netpbm import to_bytes, write_image

HEIGHT, WIDTH = 112, 56
GLYPH_BLOCKS = 4
GLYPH_BLOCK = 8
GLYPH = GLYPH_BLOCKS * GLYPH_BLOCK
MANIFEST = "groundtruth.txt"

SHIRTS = np.array([[0.55, 0.35, 0.30], [0.30, 0.40, 0.55], [0.45, 0.50, 0.35], [0.50, 0.45, 0.50]])
PANTS = np.array([[0.25, 0.25, 0.30], [0.40, 0.35, 0.25], [0.30, 0.35, 0.40]])
SKIN = np.array([[0.85, 0.70, 0.60], [0.65, 0.50, 0.40], [0.45, 0.33, 0.25]])
INKS = np.array(
    [[1.0, 0.1, 0.1], [0.1, 0.9, 0.1], [0.15, 0.3, 1.0], [1.0, 0.95, 0.1], [1.0, 0.2, 1.0], [0.1, 1.0, 1.0], [1.0, 1.0, 1.0]]
)
# camera -> (glyph top offset, background tint, illumination)
CAMERAS = [
    (28, np.array([0.55, 0.60, 0.70]), 1.0),
    (34, np.array([0.55, 0.50, 0.40]), 0.8),
    (31, np.array([0.45, 0.55, 0.45]), 0.9),
    (25, np.array([0.65, 0.65, 0.60]), 1.1),
]


@dataclass
class Identity:
    shirt: np.ndarray
    pants: np.ndarray
    skin: np.ndarray
    code: np.ndarray  # 4 x 4 ink indices, -1 = unlit


@dataclass
class SynthConfig:
    ids: int = 40
    images_per_id: int = 4
    cameras: int = 2
    seed: int = 42
    out_dir: str = ""


def _codes(n: int, rng, min_distance: int = 6) -> list[np.ndarray]:
    codes: list[np.ndarray] = []
    tries = 0
    while len(codes) < n:
        tries += 1
        if tries > 100000:
            raise RuntimeError("could not draw enough distinct glyph codes")
        lit = rng.random((GLYPH_BLOCKS, GLYPH_BLOCKS)) < 0.6
        c = np.where(lit, rng.integers(0, len(INKS), size=lit.shape), -1)
        if lit.sum() < 6:
            continue
        if all(np.sum(c != o) >= min_distance for o in codes):
            codes.append(c)
    return codes


def make_identities(n: int, rng) -> list[Identity]:
    codes = _codes(n, rng)
    out = []
    for code in codes:
        out.append(
            Identity(
                shirt=SHIRTS[rng.integers(len(SHIRTS))],
                pants=PANTS[rng.integers(len(PANTS))],
                skin=SKIN[rng.integers(len(SKIN))],
                code=code,
            )
        )
    return out


def _background(cam: int, rng) -> np.ndarray:
    _, tint, _ = CAMERAS[cam % len(CAMERAS)]
    yy, xx = np.mgrid[0:HEIGHT, 0:WIDTH].astype(np.float64)
    phase = rng.uniform(0, 2 * np.pi)
    if cam % 2 == 0:
        tex = 0.12 * np.sin(yy / 3.0 + phase)
    else:
        tex = 0.12 * np.sin((xx + yy) / 2.5 + phase)
    tex += rng.normal(0.0, 0.04, size=(HEIGHT, WIDTH))
    return np.clip(tint[:, None, None] + tex[None], 0, 1)


def render(person: Identity, cam: int, rng) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    """One C x H x W image in [0, 1] and its glyph box (x, y, w, h)."""
    top, _, light = CAMERAS[cam % len(CAMERAS)]
    img = _background(cam, rng)
    dx, dy = rng.integers(-2, 3, size=2)
    cx = WIDTH // 2 + dx

    yy, xx = np.mgrid[0:HEIGHT, 0:WIDTH]
    head = ((xx - cx) / 7.5) ** 2 + ((yy - (14 + dy)) / 9.5) ** 2 <= 1.0
    img[:, head] = person.skin[:, None]
    ty0, ty1 = 24 + dy, 70 + dy
    img[:, ty0:ty1, cx - 19 : cx + 19] = person.shirt[:, None, None]
    for lx in (cx - 14, cx + 2):
        img[:, ty1 : 106 + dy, lx : lx + 12] = person.pants[:, None, None]

    gx = cx - GLYPH // 2 + int(rng.integers(-1, 2))
    gy = top + dy
    glyph = np.full((3, GLYPH, GLYPH), 0.05)
    for i in range(GLYPH_BLOCKS):
        for j in range(GLYPH_BLOCKS):
            if person.code[i, j] >= 0:
                ink = INKS[person.code[i, j]]
                glyph[:, i * GLYPH_BLOCK : (i + 1) * GLYPH_BLOCK, j * GLYPH_BLOCK : (j + 1) * GLYPH_BLOCK] = ink[:, None, None]
    img[:, gy : gy + GLYPH, gx : gx + GLYPH] = glyph

    img = img * (light * rng.uniform(0.95, 1.05)) + rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0, 1), (int(gx), int(gy), GLYPH, GLYPH)


def generate(config: SynthConfig) -> tuple[Dataset, dict[str, tuple[int, int, int, int]]]:
    """Render the corpus; if ``config.out_dir`` is set, write PPM files and the manifest.

    Returns the dataset (pixels already quantized to 8 bits, exactly as
    written) and a mapping filename -> glyph box (x, y, w, h).
    """
    if config.ids < 2:
        raise ValueError("need at least 2 identities")
    if config.cameras < 1 or config.images_per_id < config.cameras:
        raise ValueError("images_per_id must be at least the number of cameras")
    rng = np.random.default_rng(config.seed)
    people = make_identities(config.ids, rng)
    out = Path(config.out_dir) if config.out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    samples, boxes = [], {}
    for pid, person in enumerate(people):
        counts = [0] * config.cameras
        for n in range(config.images_per_id):
            cam = n % config.cameras
            img, box = render(person, cam, rng)
            px = to_bytes(img)
            name = f"{pid}_{cam}_{counts[cam]}.ppm"
            counts[cam] += 1
            path = str(out / name) if out is not None else name
            if out is not None:
                write_image(px, path)
            samples.append(ImageSample((px / 255.0).astype(np.float32), pid, cam, path))
            boxes[name] = box
    if out is not None:
        write_manifest(boxes, out / MANIFEST)
    return Dataset(samples), boxes


def write_manifest(boxes: dict, path) -> None:
    Path(path).write_text("".join(f"{name} {x} {y} {w} {h}\n" for name, (x, y, w, h) in sorted(boxes.items())))


def read_manifest(path) -> dict[str, tuple[int, int, int, int]]:
    boxes = {}
    for ln in Path(path).read_text().splitlines():
        parts = ln.split()
        if not parts:
            continue
        if len(parts) != 5:
            raise ValueError(f"bad manifest line: {ln!r}")
        boxes[parts[0]] = tuple(int(v) for v in parts[1:])
    return boxes
