"""Dataset ingestion, identity-disjoint splits and training augmentation."""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .netpbm import ImageFormatError, read_image

FILENAME = re.compile(r"^(\d+)_(\d+)_(\d+)\.([A-Za-z0-9]+)$")
IMAGE_EXTS = {"pgm", "ppm", "pnm", "png", "jpg", "jpeg", "bmp", "gif", "tif", "tiff", "webp"}


class DatasetError(ValueError):
    pass


@dataclass
class ImageSample:
    pixels: np.ndarray  # C x H x W in [0, 1]
    identity: int
    camera: int
    path: str = ""

    @property
    def name(self) -> str:
        return Path(self.path).name


@dataclass
class Dataset:
    samples: list[ImageSample]
    query: list[int] = field(default_factory=list)
    gallery: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    @property
    def identity_index(self) -> dict[int, list[int]]:
        index: dict[int, list[int]] = {}
        for i, s in enumerate(self.samples):
            index.setdefault(s.identity, []).append(i)
        return index

    @property
    def identities(self) -> list[int]:
        return sorted(self.identity_index)

    def images(self, idx=None, dtype=np.float32) -> np.ndarray:
        sel = self.samples if idx is None else [self.samples[i] for i in idx]
        return np.stack([s.pixels for s in sel]).astype(dtype)

    def labels(self, idx=None) -> np.ndarray:
        sel = self.samples if idx is None else [self.samples[i] for i in idx]
        return np.array([s.identity for s in sel], dtype=np.int64)

    def cameras(self, idx=None) -> np.ndarray:
        sel = self.samples if idx is None else [self.samples[i] for i in idx]
        return np.array([s.camera for s in sel], dtype=np.int64)

    def class_labels(self) -> tuple[np.ndarray, list[int]]:
        """Dense 0..C-1 class indices and the identity each index stands for."""
        ids = self.identities
        lookup = {pid: c for c, pid in enumerate(ids)}
        return np.array([lookup[s.identity] for s in self.samples], dtype=np.int64), ids


def parse_name(name: str) -> tuple[int, int, int]:
    m = FILENAME.match(name)
    if m is None:
        raise DatasetError(f"cannot parse {name!r}: expected <identity>_<camera>_<index>.<ext>")
    return int(m.group(1)), int(m.group(2)), int(m.group(3))


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a C x H x W image using pixel-centre alignment."""
    c, h, w = img.shape
    if (h, w) == (height, width):
        return img.copy()

    def axis(n_in, n_out):
        x = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        x = np.clip(x, 0, n_in - 1)
        lo = np.floor(x).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, x - lo

    y0, y1, fy = axis(h, height)
    x0, x1, fx = axis(w, width)
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def load_image(path, height: int = 112, width: int = 56, channels: int = 3) -> np.ndarray:
    img = read_image(path)
    if img.shape[0] == 1 and channels == 3:
        img = np.repeat(img, 3, axis=0)
    return np.clip(resize_bilinear(img, height, width), 0.0, 1.0)


def load_dataset(directory, height: int = 112, width: int = 56, protocol: str = "two-camera") -> Dataset:
    """Read every ``<identity>_<camera>_<index>.<ext>`` image under ``directory``.

    Non-image files are ignored. With ``protocol='two-camera'`` every
    identity must appear in at least two cameras.
    """
    d = Path(directory)
    if not d.is_dir():
        raise DatasetError(f"{directory} is not a directory")
    files = sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower().lstrip(".") in IMAGE_EXTS)
    if not files:
        raise DatasetError(f"no images found in {directory}")
    samples = []
    for p in files:
        pid, cam, _ = parse_name(p.name)
        try:
            px = load_image(p, height, width)
        except ImageFormatError as e:
            raise DatasetError(str(e)) from None
        samples.append(ImageSample(px.astype(np.float32), pid, cam, str(p)))
    ds = Dataset(samples)
    if protocol == "two-camera":
        for pid, idx in ds.identity_index.items():
            if len({samples[i].camera for i in idx}) < 2:
                raise DatasetError(f"identity {pid} has images from only one camera (two-camera protocol)")
    elif protocol != "none":
        raise DatasetError(f"unknown protocol {protocol!r}")
    return ds


def split(dataset: Dataset, n_test_ids: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Identity-disjoint train/test split.

    In the test split every identity contributes one random image from its
    first camera as a query and one from another camera as a gallery entry.
    """
    ids = dataset.identities
    if not 0 < n_test_ids < len(ids):
        raise DatasetError(f"n_test_ids must be in [1, {len(ids) - 1}], got {n_test_ids}")
    rng = np.random.default_rng(seed)
    test_ids = set(int(i) for i in rng.choice(ids, size=n_test_ids, replace=False))
    train = Dataset([s for s in dataset.samples if s.identity not in test_ids])
    test = Dataset([s for s in dataset.samples if s.identity in test_ids])
    for pid in sorted(test_ids):
        idx = test.identity_index[pid]
        by_cam: dict[int, list[int]] = {}
        for i in idx:
            by_cam.setdefault(test.samples[i].camera, []).append(i)
        cams = sorted(by_cam)
        if len(cams) < 2:
            raise DatasetError(f"test identity {pid} lacks a second camera")
        test.query.append(int(rng.choice(by_cam[cams[0]])))
        test.gallery.append(int(rng.choice(by_cam[cams[1]])))
    return train, test


SPLIT_ROLES = ("train", "query", "gallery")


def write_split(train: Dataset, test: Dataset, path) -> None:
    """One ``<role> <filename>`` line per image; role is train, query or gallery."""
    lines = [f"train {s.name}\n" for s in train.samples]
    lines += [f"query {test.samples[i].name}\n" for i in test.query]
    lines += [f"gallery {test.samples[i].name}\n" for i in test.gallery]
    Path(path).write_text("".join(lines))


def read_split(path) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {r: [] for r in SPLIT_ROLES}
    for n, ln in enumerate(Path(path).read_text().splitlines(), 1):
        parts = ln.split()
        if not parts:
            continue
        if len(parts) != 2 or parts[0] not in out:
            raise DatasetError(f"{path}:{n}: expected '<train|query|gallery> <filename>'")
        out[parts[0]].append(parts[1])
    return out


def apply_split(dataset: Dataset, roles: dict[str, list[str]]) -> tuple[Dataset, Dataset]:
    """Rebuild the (train, test) pair recorded by :func:`write_split`."""
    train = subset(dataset, select_by_names(dataset, roles["train"]))
    q = select_by_names(dataset, roles["query"])
    g = select_by_names(dataset, roles["gallery"])
    test = Dataset([dataset.samples[i] for i in q + g], list(range(len(q))), list(range(len(q), len(q) + len(g))))
    return train, test


def augment_image(img: np.ndarray, rng, pad: int = 8, p_flip: float = 0.5) -> np.ndarray:
    """Random horizontal flip, then reflect-pad by ``pad`` and crop back to size."""
    c, h, w = img.shape
    out = img[:, :, ::-1] if rng.random() < p_flip else img
    if pad:
        padded = np.pad(out, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
        dy, dx = rng.integers(0, 2 * pad + 1, size=2)
        out = padded[:, dy : dy + h, dx : dx + w]
    return np.ascontiguousarray(out)


def augment(sample: ImageSample, rng, pad: int = 8, p_flip: float = 0.5) -> ImageSample:
    return replace(sample, pixels=augment_image(sample.pixels, rng, pad, p_flip))


def augment_batch(images: np.ndarray, rng, pad: int = 8, p_flip: float = 0.5) -> np.ndarray:
    return np.stack([augment_image(x, rng, pad, p_flip) for x in images])


def select_by_names(dataset: Dataset, names) -> list[int]:
    lookup = {s.name: i for i, s in enumerate(dataset.samples)}
    missing = [n for n in names if n not in lookup]
    if missing:
        raise DatasetError(f"split file names not in dataset: {missing[:3]}")
    return [lookup[n] for n in names]


def subset(dataset: Dataset, idx: Optional[list[int]]) -> Dataset:
    return Dataset([dataset.samples[i] for i in idx])
