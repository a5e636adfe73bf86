"""Matplotlib renderings written next to the delimited report outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .eval import BenchReport
from .sparse import FlopsLedger


def _group_ledger(ledger: FlopsLedger) -> dict[str, tuple[int, int]]:
    groups: dict[str, tuple[int, int]] = {}
    for r in ledger.records:
        key = r.layer.split(".")[0]
        dense, active = groups.get(key, (0, 0))
        groups[key] = (dense + r.flops_dense, active + r.flops_active)
    return groups


def save_flops_figure(ledger: FlopsLedger, path) -> Path:
    """Horizontal bars of dense vs active GFLOPs per top-level layer group."""
    path = Path(path)
    groups = _group_ledger(ledger)
    names = list(groups)
    dense = np.array([groups[n][0] for n in names]) / 1e9
    active = np.array([groups[n][1] for n in names]) / 1e9
    y = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(7, 0.5 * len(names) + 1.5))
    ax.barh(y + 0.2, dense, height=0.4, label="dense", color="#b0c4de")
    ax.barh(y - 0.2, active, height=0.4, label="active", color="#2f6fb3")
    ax.set_yticks(y, names)
    ax.set_xlabel("GFLOPs")
    ax.set_title(f"per-group FLOPs (total dense {ledger.total_dense() / 1e9:.2f}G, "
                 f"active {ledger.total_active() / 1e9:.2f}G)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_benchmark_figure(reports: list[BenchReport], path) -> Path:
    """PSNR and per-frame FLOPs bars for one or more benchmark reports."""
    path = Path(path)
    labels = [r.mode for r in reports]
    psnrs = [r.psnr_mean for r in reports]
    gflops = [r.flops_active / max(r.n_samples, 1) / 1e9 for r in reports]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    x = np.arange(len(labels))
    ax1.bar(x, psnrs, color="#2f6fb3")
    ax1.set_xticks(x, labels)
    ax1.set_ylabel("PSNR (dB)")
    ax1.set_title("reconstruction quality")
    ax2.bar(x, gflops, color="#c06a3d")
    ax2.set_xticks(x, labels)
    ax2.set_ylabel("GFLOPs / frame")
    ax2.set_title("compute")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_intervals_figure(interval_sums: dict[str, np.ndarray], path) -> Path:
    """Grouped bars of ranked-error sums per quintile, one series per model."""
    path = Path(path)
    names = list(interval_sums)
    n = len(names)
    x = np.arange(5)
    width = 0.8 / max(n, 1)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for i, name in enumerate(names):
        ax.bar(x + (i - (n - 1) / 2) * width, interval_sums[name], width=width,
               label=name)
    ax.set_xticks(x, ["0-20", "20-40", "40-60", "60-80", "80-100"])
    ax.set_xlabel("error rank interval (%)")
    ax.set_ylabel("summed pixel error")
    ax.set_title("ranked reconstruction error by interval")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_density_figure(densities: dict[str, tuple], path) -> Path:
    """Mask density per scale for one or more runs."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 3.2))
    x = np.arange(3)
    n = len(densities)
    width = 0.8 / max(n, 1)
    for i, (name, dens) in enumerate(densities.items()):
        ax.bar(x + (i - (n - 1) / 2) * width, dens, width=width, label=name)
    ax.set_xticks(x, ["P1 (H/2)", "P2 (H/4)", "P3 (H/8)"])
    ax.set_ylabel("active fraction")
    ax.set_ylim(0, 1)
    ax.set_title("pruning-mask density per scale")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
