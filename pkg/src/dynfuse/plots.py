"""Figure rendering: trajectory overlays, error CDFs, latent projections."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

__all__ = ["plot_trajectory_overlay", "plot_error_cdf", "plot_latents_2d"]


def plot_trajectory_overlay(truth: np.ndarray, estimate: np.ndarray,
                            path: str | Path, title: str = "") -> None:
    """Ground truth (blue) with estimated coordinates (red) overlaid."""
    fig, ax = plt.subplots(figsize=(6, 5))
    ax.scatter(truth[:, 0], truth[:, 1], s=4, c="#4878cf", alpha=0.5, label="ground truth")
    ax.scatter(estimate[:, 0], estimate[:, 1], s=4, c="#d65f5f", alpha=0.5, label="estimate")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.set_aspect("equal")
    ax.legend(loc="best")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_error_cdf(errors_by_method: dict[str, np.ndarray], path: str | Path) -> None:
    """Empirical CDF of localization error per method."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, errors in errors_by_method.items():
        errs = np.sort(np.asarray(errors))
        ax.plot(errs, np.arange(1, len(errs) + 1) / len(errs), label=name)
    ax.set_xlabel("localization error (m)")
    ax.set_ylabel("CDF")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_latents_2d(records: list[dict], path: str | Path) -> None:
    """PCA projection of exported latent states, colored by region id."""
    z = np.stack([np.asarray(r["z"]) for r in records])
    regions = np.array([r.get("region", 0) for r in records])
    centered = z - z.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    proj = centered @ vt[:2].T
    fig, ax = plt.subplots(figsize=(6, 5))
    scatter = ax.scatter(proj[:, 0], proj[:, 1], c=regions, s=6, cmap="tab10")
    fig.colorbar(scatter, ax=ax, label="region")
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
