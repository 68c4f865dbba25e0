"""Figure rendering for the CLI report paths.

All figures are written to files next to the delimited outputs; the CSVs
remain the canonical data. Uses the headless Agg backend.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _positions(trajectory) -> np.ndarray:
    return np.array([pose.t for _, pose in trajectory])


def trajectory_figure(path, gt=None, est=None, landmarks=None, title=""):
    """Top-down view of ground-truth/estimated paths and the landmark cloud."""
    fig, ax = plt.subplots(figsize=(6, 6))
    if landmarks is not None and len(landmarks):
        ax.scatter(landmarks[:, 0], landmarks[:, 1], s=4, c="0.8", label="landmarks")
    if gt is not None:
        p = _positions(gt)
        ax.plot(p[:, 0], p[:, 1], "k-", lw=1.2, label="ground truth")
        ax.plot(p[0, 0], p[0, 1], "ko", ms=5)
    if est is not None:
        p = _positions(est)
        ax.plot(p[:, 0], p[:, 1], "r--", lw=1.2, label="estimate")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal")
    ax.legend(loc="best", fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def error_curve_figure(path, timestamps, errors, ylabel="translation error [m]",
                       title=""):
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.plot(timestamps, errors, lw=1.0)
    ax.set_xlabel("time [s]")
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def cost_trace_figure(path, final_costs, title="per-window final cost"):
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.semilogy(np.maximum(final_costs, 1e-30), lw=0.9)
    ax.set_xlabel("keyframe")
    ax.set_ylabel("cost")
    ax.grid(alpha=0.3)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def time_offset_figure(path, trace, title="estimated time offset"):
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.plot(1e3 * np.asarray(trace), lw=1.0)
    ax.set_xlabel("keyframe")
    ax.set_ylabel("offset [ms]")
    ax.grid(alpha=0.3)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def benchmark_figure(path, rows, title="marginalization runtime"):
    """rows: (mode, K, L, fast_ms, dense_ms, speedup)."""
    labels = [f"{mode}\nK={K} L={L}" for mode, K, L, *_ in rows]
    fast = [row[3] for row in rows]
    dense = [row[4] for row in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(max(5, 1.4 * len(rows)), 4))
    ax.bar(x - 0.2, dense, width=0.4, label="dense oracle")
    ax.bar(x + 0.2, fast, width=0.4, label="fast two-step")
    ax.set_xticks(x, labels, fontsize=8)
    ax.set_ylabel("median time [ms]")
    ax.set_yscale("log")
    for xi, row in zip(x, rows):
        ax.text(xi, max(row[3], row[4]) * 1.1, f"{row[5]:.1f}x", ha="center", fontsize=8)
    ax.legend()
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
