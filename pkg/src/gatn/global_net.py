"""Low-resolution global network: identity classifier plus entropy-gradient attention.

The network is two conv blocks followed by a 7x7 max pool, which turns an
H x W image into an (H/14) x (W/14) grid of 24-d cell vectors. A dense layer
is applied to every cell, the resulting logit grid is max-pooled over space
and a softmax gives the class distribution. The attention score of a cell is
the norm of the gradient of the (signed) entropy of that distribution with
respect to the cell vector.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .optim import AdamState, adam_step, decayed_lr
from .tensor import Tape, Tensor, TensorError, backward, resolve_dtype

log = logging.getLogger(__name__)

CELL = 14
CONV1_FILTERS = 12
CONV2_FILTERS = 24


@dataclass
class GlobalParams:
    tensors: dict[str, Tensor]
    stats: dict[str, ops.RunningStats]

    @property
    def num_classes(self) -> int:
        return self.tensors["head.w"].shape[0]

    @property
    def channels(self) -> int:
        return self.tensors["conv2.w"].shape[0]

    @property
    def dtype(self):
        return self.tensors["conv1.w"].dtype

    def trainable(self) -> dict[str, Tensor]:
        return self.tensors

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def astype(self, dtype) -> "GlobalParams":
        dt = resolve_dtype(dtype)
        tensors = {k: Tensor(v.data.astype(dt), requires_grad=v.requires_grad) for k, v in self.tensors.items()}
        stats = {}
        for k, s in self.stats.items():
            ns = ops.RunningStats(len(s.mean), dt)
            ns.mean, ns.var = s.mean.astype(dt), s.var.astype(dt)
            stats[k] = ns
        return GlobalParams(tensors, stats)


def init_global(num_classes: int, in_channels: int = 3, rng=None, dtype="float32") -> GlobalParams:
    """He-initialised parameters for a ``num_classes``-way global network."""
    if num_classes < 1:
        raise ValueError("num_classes must be positive")
    rng = np.random.default_rng(rng)
    dt = resolve_dtype(dtype)

    def he(shape, fan_in):
        return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dt), requires_grad=True)

    def const(n, v):
        return Tensor(np.full(n, v, dtype=dt), requires_grad=True)

    t = {
        "conv1.w": he((CONV1_FILTERS, in_channels, 7, 7), in_channels * 49),
        "conv1.b": const(CONV1_FILTERS, 0.0),
        "bn1.gamma": const(CONV1_FILTERS, 1.0),
        "bn1.beta": const(CONV1_FILTERS, 0.0),
        "conv2.w": he((CONV2_FILTERS, CONV1_FILTERS, 3, 3), CONV1_FILTERS * 9),
        "conv2.b": const(CONV2_FILTERS, 0.0),
        "bn2.gamma": const(CONV2_FILTERS, 1.0),
        "bn2.beta": const(CONV2_FILTERS, 0.0),
        "head.w": Tensor(rng.normal(0.0, np.sqrt(1.0 / CONV2_FILTERS), size=(num_classes, CONV2_FILTERS)).astype(dt), requires_grad=True),
        "head.b": const(num_classes, 0.0),
    }
    stats = {"bn1": ops.RunningStats(CONV1_FILTERS, dt), "bn2": ops.RunningStats(CONV2_FILTERS, dt)}
    return GlobalParams(t, stats)


@dataclass
class FeatureGrid:
    """Cell vectors of one image, laid out rows x cols x channels."""

    cells: np.ndarray
    image_size: tuple[int, int]
    stride: int = CELL

    @property
    def rows(self) -> int:
        return self.cells.shape[0]

    @property
    def cols(self) -> int:
        return self.cells.shape[1]


@dataclass
class PatchSet:
    positions: list[tuple[int, int]]
    patches: np.ndarray  # k x C x cell x cell
    cell: int = CELL

    def __len__(self):
        return len(self.positions)

    @property
    def rects(self) -> list[tuple[int, int, int, int]]:
        """Pixel rectangles as (top, left, bottom, right), bottom/right exclusive."""
        c = self.cell
        return [(i * c, j * c, i * c + c, j * c + c) for i, j in self.positions]


def check_image_dims(shape) -> None:
    h, w = shape[-2], shape[-1]
    if h % CELL or w % CELL:
        raise TensorError(f"image size {h}x{w} is not a multiple of {CELL}; resize at ingestion")


def _as_batch(images) -> Tensor:
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.ndim == 3:
        x = Tensor(x.data[None], requires_grad=x.requires_grad)
    if x.ndim != 4:
        raise TensorError(f"expected an image or a batch of images, got shape {x.shape}")
    return x


def features(images, params: GlobalParams, mode: str = "eval") -> Tensor:
    """Feature grid tensor, batch x D x rows x cols."""
    x = _as_batch(images)
    check_image_dims(x.shape)
    p, s = params.tensors, params.stats
    if x.dtype != params.dtype:
        x = Tensor(x.data.astype(params.dtype))
    h = ops.conv2d(x, p["conv1.w"], p["conv1.b"], stride=2, pad=3)
    h = ops.relu(ops.batchnorm(h, p["bn1.gamma"], p["bn1.beta"], mode, s["bn1"]))
    h = ops.conv2d(h, p["conv2.w"], p["conv2.b"], stride=1, pad=1)
    h = ops.relu(ops.batchnorm(h, p["bn2.gamma"], p["bn2.beta"], mode, s["bn2"]))
    return ops.maxpool2d(h, 7, 7)


def head(grid: Tensor, params: GlobalParams) -> tuple[Tensor, Tensor]:
    """Per-cell dense layer, spatial max over the logit grid, softmax.

    Returns (logits, probs), both batch x C.
    """
    n, d, r, c = grid.shape
    cells = ops.reshape(ops.transpose(grid, (0, 2, 3, 1)), (n * r * c, d))
    logit_grid = ops.reshape(ops.dense(cells, params.tensors["head.w"], params.tensors["head.b"]), (n, r * c, -1))
    logits = ops.max(logit_grid, axis=1)
    return logits, ops.softmax(logits)


def global_forward(images, params: GlobalParams, mode: str = "eval") -> tuple[Tensor, Tensor]:
    """(feature grid batch x D x rows x cols, class distribution batch x C)."""
    grid = features(images, params, mode)
    _, probs = head(grid, params)
    return grid, probs


def feature_grids(images, params: GlobalParams) -> list[FeatureGrid]:
    x = _as_batch(images)
    grid = features(x, params, "eval").data
    return [FeatureGrid(np.ascontiguousarray(g.transpose(1, 2, 0)), x.shape[2:]) for g in grid]


def entropy(probs) -> float:
    """Signed entropy ``sum p log p`` of a single distribution, in [-log C, 0]."""
    p = np.asarray(probs.data if isinstance(probs, Tensor) else probs, dtype=np.float64)
    return float((p * np.log(np.maximum(p, ops.PROB_FLOOR))).sum())


def attention_from_grid(grid: np.ndarray, params: GlobalParams, negate: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Attention maps (batch x rows x cols) and class distributions for a grid batch.

    One backward pass serves the whole batch: in eval mode each image's
    entropy depends only on its own grid, so the gradient of the summed
    entropies splits per image.
    """
    g = Tensor(grid, requires_grad=True)
    with Tape() as tape:
        _, probs = head(g, params)
        h = ops.entropy(probs)
        if negate:
            h = ops.scale(h, -1.0)
        total = ops.sum(h)
    backward(tape, total)
    amap = np.sqrt((g.grad.astype(np.float64) ** 2).sum(axis=1))
    return amap.astype(grid.dtype), probs.data


def attention_map(images, params: GlobalParams, negate: bool = False) -> np.ndarray:
    """Gradient-norm attention for one image (rows x cols) or a batch (N x rows x cols)."""
    single = (images.ndim if isinstance(images, Tensor) else np.ndim(images)) == 3
    grid = features(images, params, "eval").data
    amap, _ = attention_from_grid(grid, params, negate=negate)
    return amap[0] if single else amap


def top_cells(amap: np.ndarray, k: int) -> np.ndarray:
    """Flat indices of the ``k`` largest cells; equal values keep row-major order."""
    flat = np.asarray(amap).reshape(-1)
    if not 1 <= k <= flat.size:
        raise ValueError(f"k must be in [1, {flat.size}], got {k}")
    return np.argsort(-flat, kind="stable")[:k]


def select_patches(amap: np.ndarray, image: np.ndarray, k: int = 8, cell: int = CELL) -> PatchSet:
    rows, cols = amap.shape
    if image.shape[-2] < rows * cell or image.shape[-1] < cols * cell:
        raise ValueError("attention map larger than image grid")
    idx = top_cells(amap, k)
    positions = [(int(i // cols), int(i % cols)) for i in idx]
    patches = np.stack([image[:, i * cell : (i + 1) * cell, j * cell : (j + 1) * cell] for i, j in positions])
    return PatchSet(positions, patches, cell)


def select_patches_batch(amaps: np.ndarray, images: np.ndarray, k: int = 8, cell: int = CELL) -> tuple[np.ndarray, np.ndarray]:
    """Batched :func:`select_patches`: positions N x k x 2 and patches N x k x C x cell x cell."""
    n, rows, cols = amaps.shape
    idx = np.stack([top_cells(a, k) for a in amaps])
    ii, jj = idx // cols, idx % cols
    c = images.shape[1]
    tiles = images.reshape(n, c, rows, cell, cols, cell).transpose(0, 2, 4, 1, 3, 5)
    patches = tiles[np.arange(n)[:, None], ii, jj]
    return np.stack([ii, jj], axis=-1), patches


@dataclass
class GlobalTrainResult:
    params: GlobalParams
    epoch_losses: list[float] = field(default_factory=list)
    train_accuracy: float = 0.0


def predict(images: np.ndarray, params: GlobalParams, batch_size: int = 64) -> np.ndarray:
    out = []
    for s in range(0, len(images), batch_size):
        _, probs = global_forward(images[s : s + batch_size], params, "eval")
        out.append(probs.data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def train_global(
    images: np.ndarray,
    labels: np.ndarray,
    epochs: int = 40,
    batch_size: int = 32,
    lr: float = 0.01,
    decay: float = 0.96,
    seed: int = 0,
    dtype="float32",
    augment=None,
    params: Optional[GlobalParams] = None,
    log_fn=None,
) -> GlobalTrainResult:
    """Fit the global classifier with cross-entropy and Adam.

    ``labels`` must be dense class indices 0..C-1. ``augment`` is an optional
    callable ``(batch, rng) -> batch`` applied to every training batch.
    """
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("train_global: empty dataset")
    num_classes = int(labels.max()) + 1
    if len(np.unique(labels)) < 2:
        raise ValueError("train_global: need at least two identities")
    rng = np.random.default_rng(seed)
    if params is None:
        params = init_global(num_classes, images.shape[1], rng, dtype)
    dt = params.dtype
    state = AdamState(lr=lr)
    result = GlobalTrainResult(params)
    for epoch in range(epochs):
        state.lr = decayed_lr(lr, decay, epoch)
        order = rng.permutation(len(images))
        total, count = 0.0, 0
        for s in range(0, len(order), batch_size):
            idx = order[s : s + batch_size]
            if len(idx) < 2:
                continue
            xb = images[idx]
            if augment is not None:
                xb = augment(xb, rng)
            params.zero_grad()
            with Tape() as tape:
                _, probs = global_forward(Tensor(xb.astype(dt)), params, "train")
                loss = ops.cross_entropy(probs, labels[idx])
            backward(tape, loss)
            adam_step(params.trainable(), state)
            total += loss.item() * len(idx)
            count += len(idx)
        mean_loss = total / max(count, 1)
        result.epoch_losses.append(mean_loss)
        if log_fn is not None:
            log_fn(epoch, mean_loss, state.lr)
    params.zero_grad()
    result.train_accuracy = float((predict(images, params) == labels).mean())
    return result
