"""SVG figures: Voronoi area heat maps, servo trajectories, residuals, benches.

Everything goes through matplotlib's SVG backend, so no display is needed.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("svg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.collections import PolyCollection  # noqa: E402

from .graph import VoronoiResult, voronoi_features  # noqa: E402

plt.rcParams.update({"font.size": 9, "axes.spines.top": False, "axes.spines.right": False,
                     "svg.hashsalt": "tacgraph", "svg.fonttype": "none"})


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def area_heatmap(frame, path, l_scale: float = 1.3, result: VoronoiResult | None = None,
                 title: str | None = None) -> Path:
    """Voronoi cells coloured by standardised area (linear ramp), markers on top."""
    result = result or voronoi_features(frame, l_scale)
    areas = np.array([c.area for c in result.cells])
    std = areas.std()
    z = (areas - areas.mean()) / (std if std > 0 else 1.0)
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    coll = PolyCollection([c.polygon for c in result.cells], array=z, cmap="viridis",
                          edgecolors="white", linewidths=0.3)
    ax.add_collection(coll)
    pts = frame.positions
    ax.plot(pts[:, 0], pts[:, 1], ".", color="k", ms=1.5)
    ax.set_aspect("equal")
    ax.autoscale_view()
    ax.set_xlabel("x (mm)")
    ax.set_ylabel("y (mm)")
    fig.colorbar(coll, ax=ax, label="standardised cell area")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def trajectory_plot(contour, trajectories: dict, path, title: str | None = None) -> Path:
    """Contour outline with one tip path per estimator label."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ring = np.vstack([contour.outline(), contour.outline()[:1]])
    ax.plot(ring[:, 0], ring[:, 1], color="0.4", lw=1.2, label="contour")
    for label, traj in trajectories.items():
        p = traj.positions
        if len(p):
            ax.plot(p[:, 0], p[:, 1], lw=0.9, label=f"{label} ({traj.termination.value})")
            ax.plot(*p[0], "o", ms=3, color="k")
    ax.set_aspect("equal")
    ax.set_xlabel("x (mm)")
    ax.set_ylabel("y (mm)")
    ax.legend(loc="upper right", fontsize=7, frameon=False)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def error_trace(traj, path, y_ref: float = 2.0, theta_ref: float = 0.0) -> Path:
    err = traj.errors(y_ref, theta_ref)
    fig, (a0, a1) = plt.subplots(2, 1, figsize=(5, 3.5), sharex=True)
    a0.plot(err[:, 0], lw=0.8)
    a0.set_ylabel("depth error (mm)")
    a1.plot(err[:, 1], lw=0.8, color="C1")
    a1.set_ylabel("roll error (deg)")
    a1.set_xlabel("step")
    return _save(fig, path)


def residual_scatter(results: dict, labels: dict, path) -> Path:
    """Predicted vs. true pose per model; ``results`` maps name -> EvalResult."""
    fig, axes = plt.subplots(1, 2, figsize=(7, 3.3))
    for name, res in results.items():
        lab = labels[name]
        for j, ax in enumerate(axes):
            ax.plot(lab[:, j], res.predictions[:, j], ".", ms=2, alpha=0.6, label=name)
    for ax, unit in zip(axes, ("depth (mm)", "roll (deg)")):
        lo, hi = ax.get_xlim()
        ax.plot([lo, hi], [lo, hi], color="0.5", lw=0.8)
        ax.set_xlabel(f"true {unit}")
        ax.set_ylabel(f"predicted {unit}")
    axes[0].legend(frameon=False, fontsize=7)
    return _save(fig, path)


def loss_curves(history: list[dict], path, title: str | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ep = [h["epoch"] for h in history]
    ax.semilogy(ep, [h["train_loss"] for h in history], label="train")
    ax.semilogy(ep, [h["val_loss"] for h in history], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE (standardised)")
    ax.legend(frameon=False)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def bench_bars(rows: list[dict], path) -> Path:
    """Mean build time per (layout, kind) row with the 50 ms budget marked."""
    fig, ax = plt.subplots(figsize=(5, 3))
    names = [f"{r['layout']}\n{r['kind']}" for r in rows]
    ax.bar(range(len(rows)), [r["mean_ms"] for r in rows], color="C0")
    ax.axhline(50.0, color="C3", ls="--", lw=0.8, label="50 ms budget")
    ax.set_xticks(range(len(rows)), names, fontsize=7)
    ax.set_ylabel("mean build time (ms)")
    ax.legend(frameon=False)
    return _save(fig, path)


def compare_bars(rows: list[dict], path) -> Path:
    """Test MAE per seed for both models; ``rows`` carry seed, model, mae_y, mae_theta."""
    seeds = sorted({r["seed"] for r in rows})
    models = sorted({r["model"] for r in rows})
    fig, axes = plt.subplots(1, 2, figsize=(7, 3))
    width = 0.8 / max(len(models), 1)
    for m_i, model in enumerate(models):
        vals = {r["seed"]: r for r in rows if r["model"] == model}
        x = np.arange(len(seeds)) + m_i * width
        axes[0].bar(x, [vals[s]["mae_y"] for s in seeds], width, label=model)
        axes[1].bar(x, [vals[s]["mae_theta"] for s in seeds], width, label=model)
    for ax, unit in zip(axes, ("depth MAE (mm)", "roll MAE (deg)")):
        ax.set_xticks(np.arange(len(seeds)) + 0.4 - width / 2, [f"seed {s}" for s in seeds])
        ax.set_ylabel(unit)
    axes[0].legend(frameon=False, fontsize=7)
    return _save(fig, path)
