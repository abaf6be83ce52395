"""Figures: latent violin profiles, prediction strips and recombination grids.

Every figure is written as SVG (byte-stable for fixed inputs) plus a PNG preview.
"""
from __future__ import annotations

import os
import warnings

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy.stats import gaussian_kde  # noqa: E402

FIXED_SHAPE_COLOR = "tab:blue"
FIXED_POSE_COLOR = "tab:orange"

_STYLE = {
    "svg.hashsalt": "shapepose",
    "svg.fonttype": "path",
    "font.family": "DejaVu Sans",
    "font.size": 8,
    "path.simplify": False,
}


def _save(fig, stem):
    paths = []
    with plt.rc_context(_STYLE):
        svg = f"{stem}.svg"
        fig.savefig(svg, format="svg", metadata={"Date": None})
        paths.append(svg)
        png = f"{stem}.png"
        fig.savefig(png, format="png", dpi=100, metadata={"Software": None})
        paths.append(png)
    plt.close(fig)
    return paths


def _kde_outline(values, grid_n=100):
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi - lo < 1e-12:
        # a point mass has no density; draw a thin bar at its value instead
        return np.array([lo - 1e-3, lo + 1e-3]), np.array([1.0, 1.0])
    pad = 0.1 * (hi - lo)
    ys = np.linspace(lo - pad, hi + pad, grid_n)
    dens = gaussian_kde(values, bw_method="scott")(ys)
    return ys, dens / dens.max()


def violin_figure(profile, title="", width=0.4):
    """Per-dimension latent distributions: blue while only the pose varies, orange while only the shape varies."""
    with plt.rc_context(_STYLE):
        dims = profile.per_dim_fixed_shape.shape[1]
        fig, ax = plt.subplots(figsize=(max(6.0, dims * 0.35), 3.0))
        for d in range(dims):
            for values, color, side in ((profile.per_dim_fixed_shape[:, d], FIXED_SHAPE_COLOR, -1),
                                        (profile.per_dim_fixed_pose[:, d], FIXED_POSE_COLOR, 1)):
                ys, dens = _kde_outline(values)
                ax.fill_betweenx(ys, d, d + side * width * dens, color=color, alpha=0.7, linewidth=0)
        if profile.pose_dims < dims:
            ax.axvline(profile.pose_dims - 0.5, color="k", linestyle=":", linewidth=0.8)
        ax.set_xticks(range(dims))
        ax.set_xlabel("latent dimension")
        ax.set_ylabel("value")
        ax.set_title(f"{title}  score={profile.score:.3f}".strip())
        ax.plot([], [], color=FIXED_SHAPE_COLOR, linewidth=6, label="fixed shape (pose varies)")
        ax.plot([], [], color=FIXED_POSE_COLOR, linewidth=6, label="fixed pose (shape varies)")
        ax.legend(loc="upper right", fontsize=6, frameon=False)
        fig.tight_layout()
    return fig


def image_grid_figure(rows, row_labels=(), title="", cell=1.0):
    """rows: list of equally long image lists (H, W, 3) in [0, 1]."""
    n_r, n_c = len(rows), len(rows[0])
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(n_r, n_c, figsize=(n_c * cell, n_r * cell), squeeze=False)
        for i, row in enumerate(rows):
            for j, img in enumerate(row):
                ax = axes[i, j]
                ax.imshow(np.clip(img, 0, 1), interpolation="nearest")
                ax.set_xticks([])
                ax.set_yticks([])
            if i < len(row_labels):
                axes[i, 0].set_ylabel(row_labels[i], fontsize=7)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
    return fig


def reach_figure(planner_mse, random_mse, title=""):
    """Per-trial paired errors; points below the diagonal are trials the planner won."""
    a = np.asarray(planner_mse, dtype=np.float64)
    b = np.asarray(random_mse, dtype=np.float64)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(3.2, 3.2))
        ax.scatter(b, a, s=10, color=FIXED_SHAPE_COLOR)
        hi = max(a.max(), b.max()) * 1.05 if a.size else 1.0
        ax.plot([0, hi], [0, hi], color="k", linestyle=":", linewidth=0.8)
        ax.set_xlim(0, hi)
        ax.set_ylim(0, hi)
        ax.set_xlabel("random action MSE")
        ax.set_ylabel("planner MSE")
        ax.set_title(f"{title}  won {int(np.sum(a < b))}/{a.size}".strip())
        fig.tight_layout()
    return fig


def emit_plots(results, out_dir):
    """Write every figure implied by ``results``; returns the written paths.

    ``results`` keys (all optional):
      profiles: {name: DisentanglementProfile}
      predictions: {name: OneStepResult or dict(input=, prediction=, target=)}
      grids: {name: RecombinationGrid}
      reach: {name: ReachResult or dict(planner=, random=) of per-trial errors}
    """
    results = results or {}
    if not any(results.get(k) for k in ("profiles", "predictions", "grids", "reach")):
        warnings.warn("emit_plots: no results to plot; nothing written")
        return []
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for name, prof in sorted((results.get("profiles") or {}).items()):
        written += _save(violin_figure(prof, name), os.path.join(out_dir, f"violin_{name}"))
    for name, pred in sorted((results.get("predictions") or {}).items()):
        ex = getattr(pred, "examples", pred)
        if ex is None or len(ex["input"]) == 0:
            continue
        rows = [list(ex["input"]), list(ex["prediction"]), list(ex["target"])]
        fig = image_grid_figure(rows, ("input", "predicted", "ground truth"), name)
        written += _save(fig, os.path.join(out_dir, f"predictions_{name}"))
    for name, grid in sorted((results.get("grids") or {}).items()):
        cells = grid.cells
        fig = image_grid_figure([list(r) for r in cells], title=name)
        written += _save(fig, os.path.join(out_dir, f"recombination_{name}"))
    for name, res in sorted((results.get("reach") or {}).items()):
        if isinstance(res, dict):
            pl, rnd = res["planner"], res["random"]
        else:
            pl, rnd = res.planner.per_sample, res.random.per_sample
        written += _save(reach_figure(pl, rnd, name), os.path.join(out_dir, f"reach_{name}"))
    return written
