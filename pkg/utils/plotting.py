"""
SVG figures for solutions and reports. Every figure is written next to a
CSV holding the plotted numbers.
"""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from utils.file_operations import ensure_dir, write_csv  # noqa: E402


def _save(fig, path):
    ensure_dir(os.path.dirname(path))
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)


def point_map(path, coords, values, title, mask=None, cmap="viridis"):
    """Scatter of per-point values; points where mask is true are drawn white"""
    values = np.asarray(values, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 5))
    shown = np.isfinite(values)
    if mask is not None:
        shown &= ~np.asarray(mask)
    art = ax.scatter(coords[shown, 0], coords[shown, 1], c=values[shown], s=12, cmap=cmap, marker="s")
    if mask is not None and np.any(mask):
        ax.scatter(coords[mask, 0], coords[mask, 1], c="white", edgecolors="lightgray", s=12, marker="s")
    fig.colorbar(art, ax=ax)
    ax.set_aspect("equal")
    ax.set_title(title)
    _save(fig, path)
    flag = np.zeros(len(values), dtype=int) if mask is None else np.asarray(mask, dtype=int)
    write_csv(
        os.path.splitext(path)[0] + ".csv",
        ("x", "y", "value", "masked"),
        [(float(x), float(y), float(v), int(m)) for (x, y), v, m in zip(coords, values, flag)],
    )


def sales_scatter(path, products, masses, margins=None, title="Sales"):
    """Products sold, with marker area proportional to customer mass"""
    products = np.asarray(products, dtype=float).reshape(-1, 2)
    masses = np.asarray(masses, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 5))
    if len(masses):
        size = 2000.0 * masses / masses.max()
        color = margins if margins is not None else "tab:blue"
        ax.scatter(products[:, 0], products[:, 1], s=size, c=color, alpha=0.6)
    ax.set_xlabel("q1")
    ax.set_ylabel("q2")
    ax.set_title(title)
    _save(fig, path)
    margins = np.full(len(masses), np.nan) if margins is None else np.asarray(margins, dtype=float)
    write_csv(
        os.path.splitext(path)[0] + ".csv",
        ("q1", "q2", "mass", "margin"),
        [(float(p[0]), float(p[1]), float(m), float(r)) for p, m, r in zip(products, masses, margins)],
    )


def report_figures(out_dir, grid, report, prefix="solution"):
    """Level sets of U, det estimates, sales and margins for an economic report"""
    coords = grid.coords
    point_map(os.path.join(out_dir, f"{prefix}_U.svg"), coords, report.envelope, "U", mask=report.exclusion)
    point_map(
        os.path.join(out_dir, f"{prefix}_det.svg"), coords, report.det_estimates, "det Hessian estimate", mask=report.exclusion
    )
    sales_scatter(os.path.join(out_dir, f"{prefix}_sales.svg"), report.sales, report.sales_mass, title="Product sales")
    sales_scatter(
        os.path.join(out_dir, f"{prefix}_margins.svg"), report.sales, report.sales_mass, report.margins, title="Margins"
    )
