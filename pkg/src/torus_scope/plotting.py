"""Static figures written next to the CSV/JSON outputs (Agg backend, no display)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = [
    "plot_curve",
    "plot_fixed_points",
    "plot_melnikov",
    "plot_section",
    "plot_sweep",
    "plot_trajectory",
]

# fixed metadata keeps PNG bytes stable across runs
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, metadata=_META)
    plt.close(fig)
    return path


def plot_trajectory(rows: np.ndarray, path, labels=("x", "y", "z")) -> Path:
    """Trajectory rows ``(t, x1, ...)``; 3D states get a 3D axes, planar states a phase plot."""
    rows = np.asarray(rows)
    dim = rows.shape[1] - 1
    fig = plt.figure(figsize=(6, 5))
    if dim == 3:
        ax = fig.add_subplot(projection="3d")
        ax.plot(rows[:, 1], rows[:, 2], rows[:, 3], lw=0.2)
        ax.set_zlabel(labels[2])
    else:
        ax = fig.add_subplot()
        ax.plot(rows[:, 1], rows[:, 2], lw=0.4)
    ax.set_xlabel(labels[0])
    ax.set_ylabel(labels[1])
    return _save(fig, path)


def plot_section(hits: np.ndarray, path, curve=None, sigma=None, labels=("x", "z")) -> Path:
    """Section hits ``(N, 2)``, optionally over a fitted invariant curve."""
    hits = np.asarray(hits)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(hits[:, 0], hits[:, 1], ".", ms=1.5, label="hits")
    if curve is not None:
        pts = curve.sample(512)
        ax.plot(*np.vstack([pts, pts[:1]]).T, "r-", lw=0.8, label="invariant curve")
    if sigma is not None:
        ax.plot(sigma[0], sigma[1], "k+", label="fixed point")
    ax.set_xlabel(labels[0])
    ax.set_ylabel(labels[1])
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(loc="best", fontsize=8)
    return _save(fig, path)


def plot_curve(curve, path, images=None) -> Path:
    return plot_section(curve.sample(512) if images is None else images, path, curve=curve,
                        sigma=curve.center, labels=("x1", "x2"))


def plot_melnikov(points: np.ndarray, delta1: np.ndarray, path) -> Path:
    """Quiver of ``Delta1`` over the sampled grid points."""
    points = np.asarray(points)
    delta1 = np.asarray(delta1)
    fig, ax = plt.subplots(figsize=(5, 5))
    norm = np.hypot(delta1[:, 0], delta1[:, 1])
    if np.max(norm) > 0:
        ax.quiver(points[:, 0], points[:, 1], delta1[:, 0], delta1[:, 1], norm, angles="xy")
    else:
        ax.plot(points[:, 0], points[:, 1], "k.", ms=2)
    ax.set_xlabel("x1")
    ax.set_ylabel("x2")
    return _save(fig, path)


def plot_fixed_points(alphas, points, path) -> Path:
    points = np.asarray(points)
    fig, ax = plt.subplots(figsize=(6, 4))
    for k in range(points.shape[1]):
        ax.plot(alphas, points[:, k], "-o", ms=2, label=f"x{k + 1}")
    ax.set_xlabel("alpha")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_sweep(alphas, modulus, beta, path) -> Path:
    """``|lambda|`` of the fixed point along alpha with the critical value marked."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(alphas, modulus, "-o", ms=2)
    ax.axhline(1.0, color="k", lw=0.5)
    if beta is not None and np.isfinite(beta):
        ax.axvline(beta, color="r", lw=0.8, ls="--")
    ax.set_xlabel("alpha")
    ax.set_ylabel("|lambda|")
    return _save(fig, path)
