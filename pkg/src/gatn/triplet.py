"""Triplet margin loss, online hard / semi-hard mining and the local-network training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import global_net, local_net, ops
from .optim import AdamState, adam_step, decayed_lr
from .tensor import Tape, Tensor, TensorError, backward, make_output

log = logging.getLogger(__name__)

MODES = ("hard", "semi-hard", "all")


@dataclass(frozen=True)
class MiningConfig:
    alpha: float = 0.02
    mode: str = "all"
    P: int = 8
    K: int = 4

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("margin alpha must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"mining mode must be one of {MODES}, got {self.mode!r}")
        if self.P < 2 or self.K < 2:
            raise ValueError("need P >= 2 identities and K >= 2 images per identity")


def _as_triplet_array(triplets) -> np.ndarray:
    arr = np.asarray(triplets, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 3), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise TensorError(f"triplets must be an N x 3 index array, got shape {arr.shape}")
    return arr


def triplet_loss(embeddings: Tensor, triplets, alpha: float = 0.02) -> Tensor:
    """Mean over triplets of ``max(|a-p|^2 - |a-n|^2 + alpha, 0)``.

    An empty triplet list gives a zero loss with zero gradients.
    """
    f = embeddings.data
    tri = _as_triplet_array(triplets)
    if tri.size and (tri.min() < 0 or tri.max() >= len(f)):
        raise TensorError(f"triplet index out of range for a batch of {len(f)}")
    n = len(tri)
    if n == 0:
        return make_output("triplet_loss", np.zeros((), f.dtype), (embeddings,), lambda g: (np.zeros_like(f),))
    a, p, q = f[tri[:, 0]], f[tri[:, 1]], f[tri[:, 2]]
    d_ap = ((a - p) ** 2).sum(axis=1)
    d_an = ((a - q) ** 2).sum(axis=1)
    margin = d_ap - d_an + alpha
    active = margin > 0
    loss = np.asarray(np.where(active, margin, 0).sum() / n, dtype=f.dtype)

    def backward_fn(g):
        w = (g * active / n)[:, None] * 2.0
        gf = np.zeros_like(f)
        np.add.at(gf, tri[:, 0], w * (q - p))
        np.add.at(gf, tri[:, 1], w * (p - a))
        np.add.at(gf, tri[:, 2], w * (a - q))
        return (gf,)

    return make_output("triplet_loss", loss, (embeddings,), backward_fn)


def squared_distances(emb: np.ndarray) -> np.ndarray:
    e = np.asarray(emb, dtype=np.float64)
    return ((e[:, None, :] - e[None, :, :]) ** 2).sum(axis=-1)


def qualifies(d_ap, d_an, alpha: float, mode: str):
    """Whether a negative at squared distance ``d_an`` qualifies for a pair at ``d_ap``."""
    if mode == "hard":
        return d_an < d_ap
    if mode == "semi-hard":
        return (d_ap < d_an) & (d_an < d_ap + alpha)
    return d_an < d_ap + alpha


def mine_triplets(embeddings, labels, config: MiningConfig = MiningConfig()) -> np.ndarray:
    """For every (anchor, positive) pair, the closest negative that qualifies under ``config.mode``.

    Pairs with no qualifying negative are skipped. Returns an N x 3 array of
    (anchor, positive, negative) batch indices; a batch with fewer than two
    identities yields an empty array.
    """
    emb = embeddings.data if isinstance(embeddings, Tensor) else np.asarray(embeddings)
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        log.warning("mining on a batch with a single identity: no triplets")
        return np.zeros((0, 3), dtype=np.int64)
    d = squared_distances(emb)
    same = labels[:, None] == labels[None, :]
    out = []
    for a in range(len(labels)):
        neg = np.flatnonzero(~same[a])
        dn = d[a, neg]
        for p in np.flatnonzero(same[a]):
            if p == a:
                continue
            ok = qualifies(d[a, p], dn, config.alpha, config.mode)
            if not ok.any():
                continue
            cand = neg[ok]
            out.append((a, p, cand[np.argmin(d[a, cand])]))
    return np.asarray(out, dtype=np.int64).reshape(-1, 3)


def sample_batch(labels, P: int, K: int, rng) -> np.ndarray:
    """Indices of a P x K batch: P distinct identities, K samples each.

    Identities with fewer than K samples are sampled with replacement.
    """
    labels = np.asarray(labels)
    ids = np.unique(labels)
    if len(ids) < P:
        raise ValueError(f"need at least {P} identities for a batch, dataset has {len(ids)}")
    chosen = rng.choice(ids, size=P, replace=False)
    out = []
    for pid in chosen:
        pool = np.flatnonzero(labels == pid)
        out.append(rng.choice(pool, size=K, replace=len(pool) < K))
    return np.concatenate(out)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    active_fraction: float
    lr: float

    def line(self) -> str:
        return f"epoch={self.epoch} loss={self.loss:.6f} active={self.active_fraction:.4f} lr={self.lr:.6g}"


@dataclass
class TripletTrainResult:
    params: local_net.LocalParams
    history: list[EpochStats] = field(default_factory=list)
    converged_early: bool = False


def attend(images: np.ndarray, gparams: global_net.GlobalParams, k: int, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Selected cell positions (N x k x 2) and patches (N x k x C x 14 x 14) for every image."""
    pos, pats = [], []
    for s in range(0, len(images), batch_size):
        xb = images[s : s + batch_size]
        grid = global_net.features(xb, gparams, "eval").data
        amap, _ = global_net.attention_from_grid(grid, gparams)
        p, x = global_net.select_patches_batch(amap, np.asarray(xb), k)
        pos.append(p)
        pats.append(x)
    return np.concatenate(pos), np.concatenate(pats)


def train_triplet(
    images: np.ndarray,
    labels: np.ndarray,
    gparams: global_net.GlobalParams,
    epochs: int = 30,
    k: int = 8,
    mining: MiningConfig = MiningConfig(),
    lr: float = 0.01,
    decay: float = 0.96,
    seed: int = 0,
    dtype="float32",
    channels=local_net.DEFAULT_CHANNELS,
    augment: Optional[Callable] = None,
    log_fn: Optional[Callable[[EpochStats], None]] = None,
) -> TripletTrainResult:
    """Train the local network on attended patches with the triplet loss.

    The global network only supplies attention and is never updated. An
    epoch is ``ceil(len(images) / (P*K))`` sampled batches.
    """
    images = np.asarray(images)
    labels = np.asarray(labels)
    if len(np.unique(labels)) < mining.P:
        raise ValueError(f"train_triplet: need at least P={mining.P} identities")
    rng = np.random.default_rng(seed)
    params = local_net.init_local(images.shape[1], channels, rng=rng, dtype=dtype)
    state = AdamState(lr=lr)
    result = TripletTrainResult(params)
    cached = None if augment is not None else attend(images, gparams, k)[1]
    batches_per_epoch = int(np.ceil(len(images) / (mining.P * mining.K)))
    for epoch in range(epochs):
        state.lr = decayed_lr(lr, decay, epoch)
        losses, active, pairs = [], 0, 0
        for _ in range(batches_per_epoch):
            idx = sample_batch(labels, mining.P, mining.K, rng)
            if cached is not None:
                patches = cached[idx]
            else:
                _, patches = attend(augment(images[idx], rng), gparams, k)
            params.zero_grad()
            with Tape() as tape:
                _, emb = local_net.embed_patch_batch(patches.astype(params.dtype), params, "train")
                tri = mine_triplets(emb.data, labels[idx], mining)
                loss = triplet_loss(emb, tri, mining.alpha)
            lab = labels[idx]
            pairs += int((lab[:, None] == lab[None, :]).sum() - len(lab))
            active += len(tri)
            if len(tri) == 0:
                continue
            backward(tape, loss)
            adam_step(params.trainable(), state)
            losses.append(loss.item())
        stats = EpochStats(epoch, float(np.mean(losses)) if losses else 0.0, active / max(pairs, 1), state.lr)
        result.history.append(stats)
        if log_fn is not None:
            log_fn(stats)
        if active == 0:
            log.warning("no triplets mined in epoch %d; stopping", epoch)
            result.converged_early = True
            break
    params.zero_grad()
    return result
