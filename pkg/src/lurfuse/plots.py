"""Optional plot-ready SVG output (no interactive UI).

A wind-rose style panel of mean residuals per direction/speed bin and
per-site boxplots from precomputed statistics.  SVGs are written with a
fixed hash salt and no date metadata so repeated runs stay byte-stable.
"""

from __future__ import annotations

import math
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "lurfuse"

import matplotlib.pyplot as plt
import numpy as np

from .diagnostics import PolarBinTable, SiteSummary


def write_polar_svg(path, table: PolarBinTable) -> None:
    bands = list(zip(table.speed_edges, list(table.speed_edges[1:]) + [math.inf]))
    n_bands = len(bands)
    grid = np.full((table.sectors, n_bands), np.nan)
    for b in table.bins:
        if b.sector_index < 0 or b.n == 0:
            continue
        band = next(i for i, (lo, hi) in enumerate(bands) if (b.speed_lo_ms, b.speed_hi_ms) == (lo, hi))
        grid[b.sector_index, band] = b.mean_residual
    theta = np.linspace(0.0, 2 * math.pi, table.sectors + 1)
    radii = np.arange(n_bands + 1, dtype=float)
    fig, ax = plt.subplots(subplot_kw={"projection": "polar"}, figsize=(5, 5))
    ax.set_theta_zero_location("N")
    ax.set_theta_direction(-1)
    tt, rr = np.meshgrid(theta, radii, indexing="ij")
    limit = np.nanmax(np.abs(grid)) if np.any(~np.isnan(grid)) else 1.0
    mesh = ax.pcolormesh(tt, rr, grid, cmap="RdBu_r", vmin=-limit, vmax=limit)
    ax.set_yticks(radii[:-1] + 0.5)
    ax.set_yticklabels(
        [f"{lo:g}-{hi:g}" if math.isfinite(hi) else f">{lo:g}" for lo, hi in bands],
        fontsize=7,
    )
    ax.set_title(f"mean {table.pollutant.upper()} residual (ppb) by wind bin", fontsize=10)
    fig.colorbar(mesh, ax=ax, shrink=0.7)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def write_boxplot_svg(path, summaries: Sequence[SiteSummary]) -> None:
    summaries = sorted(summaries, key=lambda s: s.site_id)
    stats = [
        {
            "label": s.site_id,
            "med": s.median,
            "q1": s.p25,
            "q3": s.p75,
            "whislo": s.whisker_lo,
            "whishi": s.whisker_hi,
            "fliers": [],
        }
        for s in summaries
    ]
    fig, ax = plt.subplots(figsize=(max(6, 0.3 * len(stats)), 4))
    ax.bxp(stats, showfliers=False)
    ax.set_ylabel(f"{summaries[0].pollutant.upper()} (ppb)")
    ax.set_xlabel("site")
    ax.tick_params(axis="x", rotation=90, labelsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
