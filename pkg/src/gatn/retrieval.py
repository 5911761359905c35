"""Test-time feature fusion, Euclidean ranking, CMC and mAP."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class ProtocolError(ValueError):
    """A query has no correct match in the gallery."""


def fuse_features(grid_cells: np.ndarray, positions, patch_feats: Optional[np.ndarray], match_norm: bool = False) -> np.ndarray:
    """Replace the attended cells of a rows x cols x D grid with local features.

    With ``match_norm`` each local feature is rescaled to the norm of the
    global cell it replaces. Returns the flattened (row-major) grid,
    L2-normalized.
    """
    grid = np.array(grid_cells, dtype=np.float64, copy=True)
    rows, cols, d = grid.shape
    positions = [] if positions is None else list(positions)
    if positions:
        feats = np.asarray(patch_feats, dtype=np.float64)
        if feats.shape != (len(positions), d):
            raise ValueError(f"patch features have shape {feats.shape}, expected ({len(positions)}, {d})")
        for (i, j), f in zip(positions, feats):
            if not (0 <= i < rows and 0 <= j < cols):
                raise ValueError(f"position ({i}, {j}) outside the {rows}x{cols} grid")
            if match_norm:
                fn = np.linalg.norm(f)
                f = f * (np.linalg.norm(grid[i, j]) / fn) if fn > 0 else f
            grid[i, j] = f
    flat = grid.reshape(-1)
    norm = np.linalg.norm(flat)
    return flat / norm if norm > 0 else flat


def pairwise_distances(queries, gallery) -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"descriptor lengths differ: {q.shape[1]} vs {g.shape[1]}")
    d2 = (q * q).sum(1)[:, None] + (g * g).sum(1)[None, :] - 2.0 * q @ g.T
    return np.sqrt(np.maximum(d2, 0.0))


@dataclass
class RankedList:
    order: np.ndarray
    distances: np.ndarray


def rank_gallery(distances: np.ndarray) -> list[RankedList]:
    """Ascending distance per query; equal distances keep gallery index order."""
    d = np.asarray(distances)
    if not np.all(np.isfinite(d)):
        raise ValueError("distances must be finite")
    out = []
    for row in d:
        order = np.argsort(row, kind="stable")
        out.append(RankedList(order, row[order]))
    return out


def _matches(ranked: Sequence[RankedList], query_labels, gallery_labels) -> list[np.ndarray]:
    ql = np.asarray(query_labels)
    gl = np.asarray(gallery_labels)
    hits = []
    for qi, r in enumerate(ranked):
        m = gl[r.order] == ql[qi]
        if not m.any():
            raise ProtocolError(f"query {qi} (identity {ql[qi]}) has no match in the gallery")
        hits.append(m)
    return hits


def first_hit_ranks(ranked, query_labels, gallery_labels) -> np.ndarray:
    """1-based rank of the first correct match for every query."""
    return np.array([int(np.argmax(m)) + 1 for m in _matches(ranked, query_labels, gallery_labels)])


def cmc(ranked, query_labels, gallery_labels, max_rank: int = 20) -> np.ndarray:
    """Entry k-1 is the fraction of queries whose first correct match is within the top k."""
    first = first_hit_ranks(ranked, query_labels, gallery_labels)
    ks = np.arange(1, max_rank + 1)
    return (first[None, :] <= ks[:, None]).mean(axis=1)


def average_precisions(ranked, query_labels, gallery_labels) -> np.ndarray:
    aps = []
    for m in _matches(ranked, query_labels, gallery_labels):
        pos = np.flatnonzero(m) + 1
        aps.append(np.mean(np.arange(1, len(pos) + 1) / pos))
    return np.array(aps)


def mean_average_precision(ranked, query_labels, gallery_labels) -> float:
    return float(average_precisions(ranked, query_labels, gallery_labels).mean())


@dataclass
class EvalReport:
    cmc: np.ndarray
    mAP: float
    num_query: int
    num_gallery: int
    first_hits: np.ndarray
    aps: np.ndarray
    query_ids: list[str]

    def rank(self, k: int) -> float:
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def text(self) -> str:
        lines = [f"rank{k} = {self.rank(k):.6f}" for k in (1, 5, 10, 20)]
        lines += [f"mAP = {self.mAP:.6f}", f"queries = {self.num_query}", f"gallery = {self.num_gallery}"]
        return "\n".join(lines) + "\n"

    def csv_rows(self) -> list[tuple[str, int, float]]:
        return [(q, int(r), float(a)) for q, r, a in zip(self.query_ids, self.first_hits, self.aps)]


def evaluate(query_desc, gallery_desc, query_labels, gallery_labels, query_ids=None, max_rank: int = 20) -> EvalReport:
    ranked = rank_gallery(pairwise_distances(query_desc, gallery_desc))
    aps = average_precisions(ranked, query_labels, gallery_labels)
    first = first_hit_ranks(ranked, query_labels, gallery_labels)
    ids = list(query_ids) if query_ids is not None else [str(i) for i in range(len(first))]
    return EvalReport(
        cmc=cmc(ranked, query_labels, gallery_labels, max_rank),
        mAP=float(aps.mean()),
        num_query=len(first),
        num_gallery=len(gallery_desc),
        first_hits=first,
        aps=aps,
        query_ids=ids,
    )
