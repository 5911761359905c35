"""Report figures (matplotlib, file output only)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_cmc(curves: dict[str, np.ndarray], out_path, title: str = "CMC") -> None:
    """One line per label; x is rank 1..len(curve)."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, curve in curves.items():
        ks = np.arange(1, len(curve) + 1)
        ax.plot(ks, curve, marker="o", ms=3, label=f"{label} (r1={curve[0]:.2f})")
    ax.set_xlabel("rank")
    ax.set_ylabel("matching rate")
    ax.set_ylim(0, 1.02)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)


def _show(ax, img, title, edge=None):
    ax.imshow(np.clip(np.asarray(img).transpose(1, 2, 0), 0, 1))
    ax.set_xticks([])
    ax.set_yticks([])
    ax.set_title(title, fontsize=7)
    if edge is not None:
        for s in ax.spines.values():
            s.set_edgecolor(edge)
            s.set_linewidth(3)


def plot_rank_lists(queries, gallery, orders, query_labels, gallery_labels, out_path, top: int = 5) -> None:
    """Grid of query images followed by their top-ranked gallery images.

    Correct matches get a green frame, wrong ones red.
    """
    n = len(queries)
    top = min(top, len(gallery))
    fig, axes = plt.subplots(n, top + 1, figsize=(1.1 * (top + 1), 2.0 * n), squeeze=False)
    for r in range(n):
        _show(axes[r, 0], queries[r], f"query {query_labels[r]}")
        for c in range(top):
            j = orders[r][c]
            ok = gallery_labels[j] == query_labels[r]
            _show(axes[r, c + 1], gallery[j], f"rank{c + 1}", "green" if ok else "red")
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
