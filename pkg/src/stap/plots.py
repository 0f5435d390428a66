"""Figures for the report paths. Everything renders off-screen to PNG."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamps or version strings, so reruns produce identical bytes
_META = {"Software": None}
DPI = 120


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=DPI, bbox_inches="tight", metadata=_META)
    plt.close(fig)
    return path


def training_curves(rows, path) -> Path:
    """Loss terms per step; rows follow the training log layout."""
    a = np.asarray(rows, dtype=np.float64)
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    for col, name in ((1, "total"), (2, "reg"), (3, "pref"), (4, "balance")):
        ax.plot(a[:, 0], a[:, col], lw=1, label=name)
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False, fontsize=8)
    if np.isfinite(a[:, 5]).any():
        ax2.plot(a[:, 0], a[:, 5], lw=1, label="entropy")
        ax2.plot(a[:, 0], a[:, 6], lw=1, label="gini")
        ax2.set_ylim(-0.02, 1.02)
        ax2.legend(frameon=False, fontsize=8)
    else:
        ax2.text(0.5, 0.5, "no memory bank", ha="center", va="center", transform=ax2.transAxes)
    ax2.set_xlabel("step")
    return _save(fig, path)


def slot_heatmap(mass, path, title: str = "mean slot activation") -> Path:
    mass = np.asarray(mass)
    fig, ax = plt.subplots(figsize=(1.2 + 0.5 * mass.shape[1], 1.0 + 0.4 * mass.shape[0]))
    im = ax.imshow(mass, cmap="viridis", aspect="auto")
    ax.set_xlabel("cluster")
    ax.set_ylabel("partition")
    ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax)
    return _save(fig, path)


def frame_score_curves(table, path, n_samples: int = 4) -> Path:
    """Score against frame index for the first few samples, planted frames marked."""
    a = np.asarray(table, dtype=np.float64)
    ids = list(dict.fromkeys(a[:, 0].astype(int)))[:n_samples]
    fig, axes = plt.subplots(len(ids), 1, figsize=(7, 1.6 * len(ids)), sharex=True, squeeze=False)
    for ax, sid in zip(axes[:, 0], ids):
        rows = a[a[:, 0] == sid]
        ax.plot(rows[:, 1], rows[:, 2], lw=1, color="0.2")
        hl = rows[rows[:, 3] == 1]
        ax.scatter(hl[:, 1], hl[:, 2], color="tab:red", s=14, zorder=3)
        ax.set_ylabel(f"#{sid}", fontsize=8)
    axes[-1, 0].set_xlabel("frame")
    return _save(fig, path)


def scaling_plot(reports, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    for r in reports:
        ax.loglog(r.sizes, r.medians, "o-", lw=1, ms=4, label=f"{r.kernel} ({r.slope:.2f})")
    ax.set_xlabel("size")
    ax.set_ylabel("median seconds")
    ax.legend(frameon=False, fontsize=7)
    return _save(fig, path)


def grid_heatmap(rows, path, metric: str = "MAE") -> Path:
    col = {"MAE": 3, "nMSE": 4, "SRC": 5}[metric]
    ok = [r for r in rows if r[-1] == "ok"]
    Ps = sorted({int(r[0]) for r in rows})
    Cs = sorted({int(r[1]) for r in rows})
    grid = np.full((len(Ps), len(Cs)), np.nan)
    for r in ok:
        grid[Ps.index(int(r[0])), Cs.index(int(r[1]))] = float(r[col])
    fig, ax = plt.subplots(figsize=(4, 3.4))
    im = ax.imshow(grid, cmap="magma_r" if metric != "SRC" else "magma", aspect="auto")
    ax.set_xticks(range(len(Cs)), [str(c) for c in Cs])
    ax.set_yticks(range(len(Ps)), [str(p) for p in Ps])
    ax.set_xlabel("C")
    ax.set_ylabel("P")
    ax.set_title(metric, fontsize=9)
    fig.colorbar(im, ax=ax)
    return _save(fig, path)


def ablation_bars(results, path) -> Path:
    names = [r.variant for r in results]
    order = list(dict.fromkeys(names))
    mae = [np.mean([r.metrics.MAE for r in results if r.variant == v]) for v in order]
    fig, ax = plt.subplots(figsize=(1.2 + 0.8 * len(order), 3))
    ax.bar(range(len(order)), mae, color="0.45")
    ax.set_xticks(range(len(order)), order, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("test MAE (seed mean)")
    return _save(fig, path)
