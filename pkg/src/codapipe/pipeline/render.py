"""SVG figures drawn with matplotlib.

Output is reproducible: the SVG id salt is fixed and no date is written.
Elements tests may want to count carry ids: ``point-<id>`` for scatter
points, ``leaf-<i>`` for dendrogram leaves and ``arrow-<i>`` for biplot
arrows.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import FancyArrowPatch  # noqa: E402

from ..pca import biplot_coordinates  # noqa: E402

STYLE = {
    "svg.hashsalt": "codapipe",
    "svg.fonttype": "none",
    "font.size": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path):
    with plt.rc_context(STYLE):
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": "codapipe"})
    plt.close(fig)


def _colors(labels):
    cmap = plt.get_cmap("tab10")
    return [cmap((int(g) - 1) % 10) for g in labels]


def render_tsne(embedding, labels, names, path, title="t-SNE map"):
    """Scatter of the embedding coloured by cluster, one text label per entity."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(7, 6))
        Y = embedding.Y
        colors = _colors(labels)
        for i, name in enumerate(names):
            pt = ax.scatter(Y[i, 0], Y[i, 1], color=colors[i], s=30)
            pt.set_gid(f"point-{name}")
            ax.annotate(str(name), Y[i], xytext=(3, 3), textcoords="offset points")
        for g in sorted(set(int(v) for v in labels)):
            ax.scatter([], [], color=_colors([g])[0], label=f"cluster {g}")
        ax.legend(frameon=False)
        ax.set_title(title)
        ax.set_xlabel("t-SNE 1")
        ax.set_ylabel("t-SNE 2")
    _save(fig, path)


def render_dendrogram(tree, path, title="Ward dendrogram", ylabel="height"):
    """Dendrogram with one labelled leaf per tree leaf."""
    n = tree.n_leaves
    order = tree.leaf_order()
    xpos = {leaf: float(k) for k, leaf in enumerate(order)}
    ypos = {leaf: 0.0 for leaf in range(n)}
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(6, 0.5 * n), 5))
        for step, (a, b, h, _) in enumerate(tree.linkage):
            a, b = int(a), int(b)
            xa, xb = xpos[a], xpos[b]
            ax.plot([xa, xa, xb, xb], [ypos[a], h, h, ypos[b]], color="0.2", lw=1)
            xpos[n + step] = 0.5 * (xa + xb)
            ypos[n + step] = h
        for k, leaf in enumerate(order):
            txt = ax.text(k, 0, f" {tree.labels[leaf]}", rotation=90, ha="center", va="top")
            txt.set_gid(f"leaf-{leaf}")
        ax.set_xlim(-0.5, n - 0.5)
        ax.set_xticks([])
        ax.spines["bottom"].set_visible(False)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        fig.subplots_adjust(bottom=0.35)
    _save(fig, path)


def render_biplot(model, path, title="biplot", alpha=0.5):
    """Symmetric biplot: numbered score points and one clr arrow per part."""
    points, arrows = biplot_coordinates(model, alpha=alpha)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.5, 6))
        ax.scatter(points[:, 0], points[:, 1], s=8, color="0.5")
        for i, (x, y) in enumerate(points):
            ax.annotate(str(i + 1), (x, y), fontsize=6, color="0.3")
        reach = np.abs(points).max() if len(points) else 1.0
        scale = 0.8 * reach / max(np.abs(arrows).max(), 1e-12)
        for j, (u, v) in enumerate(arrows):
            arr = FancyArrowPatch((0, 0), (u * scale, v * scale), arrowstyle="->",
                                  mutation_scale=10, color="tab:red")
            arr.set_gid(f"arrow-{j}")
            ax.add_patch(arr)
            ax.text(u * scale * 1.08, v * scale * 1.08, str(model.labels[j]) if model.labels else str(j),
                    color="tab:red", ha="center")
        ax.axhline(0, color="0.85", lw=0.8)
        ax.axvline(0, color="0.85", lw=0.8)
        ratio = model.explained[:2]
        ax.set_xlabel(f"PC1 ({ratio[0]:.1%})")
        ax.set_ylabel(f"PC2 ({ratio[1]:.1%})" if len(ratio) > 1 else "PC2")
        ax.set_title(f"{title} ({model.method})")
    _save(fig, path)
