"""High-resolution local network that embeds attended patches.

A small stack of 3x3 conv blocks (conv -> batchnorm -> ReLU) with one 2x2 max
pool and terminal global average pooling, so it accepts any input of at least
4x4 pixels. Patches are embedded independently with shared weights; an image
embedding is the L2-normalized mean of its patch features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor, TensorError, resolve_dtype

DEFAULT_CHANNELS = (32, 64, 24)


@dataclass
class LocalParams:
    tensors: dict[str, Tensor]
    stats: dict[str, ops.RunningStats]
    channels: tuple[int, ...] = DEFAULT_CHANNELS
    pool_after: tuple[int, ...] = (0,)

    @property
    def embed_dim(self) -> int:
        return self.channels[-1]

    @property
    def dtype(self):
        return self.tensors["conv0.w"].dtype

    def trainable(self) -> dict[str, Tensor]:
        return self.tensors

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None


def init_local(in_channels: int = 3, channels=DEFAULT_CHANNELS, pool_after=(0,), rng=None, dtype="float32") -> LocalParams:
    rng = np.random.default_rng(rng)
    dt = resolve_dtype(dtype)
    tensors, stats = {}, {}
    prev = in_channels
    for b, ch in enumerate(channels):
        fan_in = prev * 9
        tensors[f"conv{b}.w"] = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), (ch, prev, 3, 3)).astype(dt), requires_grad=True)
        tensors[f"conv{b}.b"] = Tensor(np.zeros(ch, dt), requires_grad=True)
        tensors[f"bn{b}.gamma"] = Tensor(np.ones(ch, dt), requires_grad=True)
        tensors[f"bn{b}.beta"] = Tensor(np.zeros(ch, dt), requires_grad=True)
        stats[f"bn{b}"] = ops.RunningStats(ch, dt)
        prev = ch
    return LocalParams(tensors, stats, tuple(channels), tuple(pool_after))


def local_forward(x, params: LocalParams, mode: str = "eval") -> Tensor:
    """Features (M x D) for a batch of M images or patches."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 4:
        raise TensorError(f"local_forward expects M x C x H x W, got {x.shape}")
    if x.shape[2] < 4 or x.shape[3] < 4:
        raise TensorError(f"local network needs inputs of at least 4x4, got {x.shape[2]}x{x.shape[3]}")
    if x.dtype != params.dtype:
        x = Tensor(x.data.astype(params.dtype), requires_grad=x.requires_grad)
    p, s = params.tensors, params.stats
    h = x
    for b in range(len(params.channels)):
        h = ops.conv2d(h, p[f"conv{b}.w"], p[f"conv{b}.b"], stride=1, pad=1)
        h = ops.relu(ops.batchnorm(h, p[f"bn{b}.gamma"], p[f"bn{b}.beta"], mode, s[f"bn{b}"]))
        if b in params.pool_after:
            h = ops.maxpool2d(h, 2, 2)
    return ops.global_avg_pool(h)


def aggregate(per_patch: Tensor, n: int, k: int) -> Tensor:
    """Mean of each image's k patch features, then L2 normalization: (n*k) x D -> n x D."""
    d = per_patch.shape[-1]
    return ops.l2_normalize(ops.mean(ops.reshape(per_patch, (n, k, d)), axis=1))


def embed_patch_batch(patches: np.ndarray, params: LocalParams, mode: str = "eval") -> tuple[Tensor, Tensor]:
    """Embed N images' patches (N x k x C x h x w).

    Returns (per-patch features N*k x D, image embeddings N x D).
    """
    n, k = patches.shape[:2]
    if k == 0:
        raise ValueError("cannot embed an empty patch set")
    feats = local_forward(Tensor(patches.reshape(n * k, *patches.shape[2:])), params, mode)
    return feats, aggregate(feats, n, k)


def embed_patches(patch_set, params: LocalParams) -> tuple[np.ndarray, np.ndarray]:
    """Per-patch features (k x D, un-normalized) and the unit-norm aggregate embedding.

    ``patch_set`` is a :class:`~gatn.global_net.PatchSet` or a k x C x h x w array.
    """
    patches = np.asarray(getattr(patch_set, "patches", patch_set))
    if patches.ndim != 4 or len(patches) == 0:
        raise ValueError("embed_patches needs a non-empty k x C x h x w patch stack")
    feats, emb = embed_patch_batch(patches[None], params, "eval")
    return feats.data, emb.data[0]


def flops_estimate(params: LocalParams, input_extent, in_channels: int = 3) -> int:
    """Multiply-accumulate count of the conv layers for one input of ``input_extent``.

    ``input_extent`` is (height, width) in pixels. Pooling, normalization and
    activations are not counted.
    """
    h, w = input_extent
    total = 0
    prev = in_channels
    for b, ch in enumerate(params.channels):
        total += ch * prev * 9 * h * w
        prev = ch
        if b in params.pool_after:
            h, w = h // 2, w // 2
    return int(total)
