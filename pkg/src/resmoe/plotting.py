"""Figures written next to sweep reports."""

from __future__ import annotations

from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    # keep files stable across runs
    "svg.hashsalt": "resmoe",
    "path.simplify": False,
}


def _series(rows, key):
    by_method = defaultdict(list)
    for r in rows:
        r = r if isinstance(r, dict) else vars(r)
        by_method[(r["layer_id"], r["method"])].append((r["keep_ratio"], r[key]))
    return {k: sorted(v) for k, v in sorted(by_method.items())}


def plot_sweep(rows, path, title=None):
    """Two panels against keep ratio: normalized epsilon and mean output L2 error."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(7.0, 2.8))
        for ax, key, label in (
            (axes[0], "epsilon_norm", r"$\epsilon / p_I$"),
            (axes[1], "output_l2_error", "mean output L2 error"),
        ):
            for (layer_id, method), pts in _series(rows, key).items():
                xs, ys = zip(*pts)
                ax.plot(xs, ys, marker="o", ms=3, lw=1.2, label=f"{method} (layer {layer_id})")
            ax.set_xlabel("keep ratio s")
            ax.set_ylabel(label)
            ax.grid(alpha=0.3, lw=0.5)
        axes[0].legend(frameon=False)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None} if str(path).endswith(".png") else None)
        plt.close(fig)
    return path
