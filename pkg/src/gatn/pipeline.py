"""End-to-end driver: describe images, evaluate retrieval, score attention localization."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import global_net, local_net, retrieval
from .data.dataset import Dataset


@dataclass
class Descriptions:
    descriptors: np.ndarray  # N x (rows*cols*D)
    positions: np.ndarray  # N x k x 2
    attention: np.ndarray  # N x rows x cols
    embeddings: Optional[np.ndarray]  # N x D, None when k == 0


def describe(images: np.ndarray, gparams, lparams, k: int = 8, match_norm: bool = False, batch_size: int = 32) -> Descriptions:
    """Fused descriptors for a stack of images; ``k=0`` gives pure global descriptors."""
    descs, positions, maps, embs = [], [], [], []
    for s in range(0, len(images), batch_size):
        xb = np.asarray(images[s : s + batch_size])
        grid = global_net.features(xb, gparams, "eval").data
        amap, _ = global_net.attention_from_grid(grid, gparams)
        cells = grid.transpose(0, 2, 3, 1)
        maps.append(amap)
        if k == 0:
            positions.append(np.zeros((len(xb), 0, 2), dtype=np.int64))
            descs.extend(retrieval.fuse_features(c, [], None) for c in cells)
            continue
        pos, patches = global_net.select_patches_batch(amap, xb, k)
        feats, emb = local_net.embed_patch_batch(patches.astype(lparams.dtype), lparams, "eval")
        feats = feats.data.reshape(len(xb), k, -1)
        positions.append(pos)
        embs.append(emb.data)
        for c, p, f in zip(cells, pos, feats):
            descs.append(retrieval.fuse_features(c, [tuple(x) for x in p], f, match_norm))
    return Descriptions(
        descriptors=np.stack(descs),
        positions=np.concatenate(positions),
        attention=np.concatenate(maps),
        embeddings=np.concatenate(embs) if embs else None,
    )


def evaluate_split(test: Dataset, gparams, lparams, k: int = 8, max_rank: int = 20, same_camera_filter: bool = False, match_norm: bool = False):
    """Query/gallery retrieval report on a test split built by :func:`gatn.data.dataset.split`."""
    q_img = test.images(test.query)
    g_img = test.images(test.gallery)
    qd = describe(q_img, gparams, lparams, k, match_norm)
    gd = describe(g_img, gparams, lparams, k, match_norm)
    ql, gl = test.labels(test.query), test.labels(test.gallery)
    names = [test.samples[i].name for i in test.query]
    if not same_camera_filter:
        return retrieval.evaluate(qd.descriptors, gd.descriptors, ql, gl, names, max_rank), qd, gd
    qc, gc = test.cameras(test.query), test.cameras(test.gallery)
    dist = retrieval.pairwise_distances(qd.descriptors, gd.descriptors)
    # same identity seen by the same camera is junk: push it to the end of the list
    junk = (ql[:, None] == gl[None, :]) & (qc[:, None] == gc[None, :])
    dist = np.where(junk, dist.max() + 1.0, dist)
    ranked = retrieval.rank_gallery(dist)
    aps = retrieval.average_precisions(ranked, ql, gl)
    first = retrieval.first_hit_ranks(ranked, ql, gl)
    rep = retrieval.EvalReport(retrieval.cmc(ranked, ql, gl, max_rank), float(aps.mean()), len(ql), len(gl), first, aps, names)
    return rep, qd, gd


def cells_hitting_box(positions, box, cell: int = global_net.CELL) -> int:
    """How many selected cells overlap the pixel box (x, y, w, h)."""
    x, y, w, h = box
    hits = 0
    for i, j in positions:
        top, left = i * cell, j * cell
        if top < y + h and y < top + cell and left < x + w and x < left + cell:
            hits += 1
    return hits


def localization_rate(positions: np.ndarray, boxes, min_fraction: float = 0.5) -> float:
    """Fraction of images where at least ``min_fraction`` of the selected cells overlap the box."""
    ok = [cells_hitting_box(p, b) >= min_fraction * len(p) for p, b in zip(positions, boxes)]
    return float(np.mean(ok))


@dataclass
class BenchmarkRun:
    seed: int
    train_accuracy: float
    report: retrieval.EvalReport
    global_report: retrieval.EvalReport
    localization: float
    seconds: float
    gparams: global_net.GlobalParams
    lparams: local_net.LocalParams
    test: Dataset


def run_benchmark(data: Dataset, boxes: dict, cfg, log_fn=None) -> BenchmarkRun:
    """Split, train both stages and evaluate, all driven by ``cfg`` (a :class:`gatn.config.Config`).

    ``boxes`` maps image filename to its ground-truth (x, y, w, h) region
    and is used for the localization rate over every test image.
    """
    from . import triplet
    from .data.dataset import split

    t0 = time.perf_counter()
    train, test = split(data, cfg.n_test_ids, cfg.seed)
    y, _ = train.class_labels()
    x = train.images(dtype=cfg.dtype)
    g = global_net.train_global(
        x, y, cfg.global_epochs, cfg.batch_size, cfg.lr, cfg.decay, cfg.seed, cfg.dtype, log_fn=log_fn and (lambda e, loss, lr: log_fn(f"global epoch={e} loss={loss:.6f}"))
    )
    t = triplet.train_triplet(
        x,
        train.labels(),
        g.params,
        epochs=cfg.triplet_epochs,
        k=cfg.k,
        mining=triplet.MiningConfig(cfg.alpha, cfg.mining, cfg.P, cfg.K),
        lr=cfg.lr,
        decay=cfg.decay,
        seed=cfg.seed,
        dtype=cfg.dtype,
        channels=cfg.channels,
        log_fn=log_fn and (lambda st: log_fn("triplet " + st.line())),
    )
    match_norm = cfg.fusion == "norm-matched"
    report, _, _ = evaluate_split(test, g.params, t.params, cfg.k, cfg.max_rank, cfg.same_camera_filter, match_norm)
    global_report, _, _ = evaluate_split(test, g.params, None, 0, cfg.max_rank, cfg.same_camera_filter)
    imgs = test.images(dtype=cfg.dtype)
    pos, _ = triplet.attend(imgs, g.params, cfg.k)
    loc = localization_rate(pos, [boxes[s.name] for s in test.samples])
    return BenchmarkRun(cfg.seed, g.train_accuracy, report, global_report, loc, time.perf_counter() - t0, g.params, t.params, test)
