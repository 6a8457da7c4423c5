"""Static figures (PNG) rendered with the Agg backend."""

from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PathLike = Union[str, Path]


def plot_score_fields(
    xx: np.ndarray,
    yy: np.ndarray,
    fields: Dict[str, np.ndarray],
    inliers: np.ndarray,
    inlier_labels: np.ndarray,
    path: PathLike,
) -> Path:
    """One panel per named anomaly-score field with the inlier points on top."""
    fig, axes = plt.subplots(1, len(fields), figsize=(5 * len(fields), 4.5), squeeze=False)
    for ax, (name, field) in zip(axes[0], fields.items()):
        mesh = ax.contourf(xx, yy, field, levels=30, cmap="viridis")
        ax.scatter(inliers[:, 0], inliers[:, 1], c=inlier_labels, cmap="coolwarm", s=4, alpha=0.6)
        ax.set_title(name)
        ax.set_aspect("equal")
        fig.colorbar(mesh, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_scatter(
    groups: Dict[str, np.ndarray],
    path: PathLike,
    title: str = "",
    extent: Optional[float] = None,
    circles: Sequence[Tuple[float, float, float]] = (),
) -> Path:
    """Overlayed 2-D point clouds; ``circles`` are (x, y, radius) outlines."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for name, points in groups.items():
        if len(points):
            ax.scatter(points[:, 0], points[:, 1], s=4, alpha=0.5, label=f"{name} ({len(points)})")
    for x, y, r in circles:
        ax.add_patch(plt.Circle((x, y), r, fill=False, color="gray", lw=0.8))
    if extent is not None:
        ax.set_xlim(-extent, extent)
        ax.set_ylim(-extent, extent)
    ax.set_aspect("equal")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_histograms(values: Dict[str, np.ndarray], path: PathLike, bins: int = 50, log: bool = True,
                    xlabel: str = "") -> Path:
    """Aligned histograms over a shared bin range."""
    arrays = [np.asarray(v).ravel() for v in values.values() if np.asarray(v).size]
    edges = np.histogram_bin_edges(np.concatenate(arrays), bins=bins) if arrays else bins
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, v in values.items():
        ax.hist(np.asarray(v).ravel(), bins=edges, alpha=0.5, label=name, log=log)
    ax.set_xlabel(xlabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_curves(curves: Dict[str, np.ndarray], path: PathLike, ylim: Optional[float] = None) -> Path:
    """Two-class divergence curves: each entry is an (n, 2) table of (p, value)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, table in curves.items():
        ax.plot(table[:, 0], table[:, 1], label=name)
    ax.axhline(np.log(2.0), color="gray", ls="--", lw=0.8)
    if ylim is not None:
        ax.set_ylim(0, ylim)
    ax.set_xlabel("p")
    ax.set_ylabel("divergence to uniform (nats)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_separation(edges: np.ndarray, counts: Dict[str, np.ndarray], path: PathLike, title: str = "") -> Path:
    """Step histograms sharing ``edges`` (max-logit of known vs unknown pixels)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, c in counts.items():
        ax.stairs(c, edges, label=name)
    ax.set_xlabel("max logit")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
