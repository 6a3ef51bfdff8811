"""Gridded prediction surfaces.

A regular grid of cell centers covers the requested bbox (centered, so
a resolution wider than the bbox degenerates to its centroid).  Static
predictions run each cell center through the exact site feature
pipeline; hourly surfaces scale the static one by the fusion
coefficient.  Rasters follow the ESRI ASCII convention: north-up,
row-major from the NW corner.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime
from typing import Optional, Sequence

import numpy as np

from .dataio import format_timestamp
from .errors import DomainError
from .features import FeatureSpec, extract_predictors
from .forest import Forest
from .fusion import FusionSeries
from .geo import (
    ElevationGrid,
    GeoPoint,
    PlanarPoint,
    SpatialIndex,
    roads_bbox,
    unproject,
)

DEFAULT_RESOLUTION_M = 500.0
ASC_NODATA = -9999.0


@dataclass
class GridCell:
    row: int
    col: int
    planar: PlanarPoint
    geo: GeoPoint
    static_pred: Optional[float] = None
    hourly_pred: Optional[float] = None
    flags: tuple[str, ...] = ()


@dataclass
class PredictionGrid:
    bbox: tuple[PlanarPoint, PlanarPoint]  # (min corner, max corner) requested
    resolution: float
    n_rows: int
    n_cols: int
    x_min: float  # actual (centered) grid corner
    y_min: float
    cells: list[GridCell] = field(repr=False, default_factory=list)
    hour: Optional[datetime] = None
    a_hat: Optional[float] = None

    def cell(self, row: int, col: int) -> GridCell:
        return self.cells[row * self.n_cols + col]

    def values(self, which: str) -> np.ndarray:
        """(n_rows, n_cols) array of static or hourly predictions, NaN gaps."""
        out = np.full((self.n_rows, self.n_cols), np.nan)
        for c in self.cells:
            v = c.static_pred if which == "static" else c.hourly_pred
            if v is not None:
                out[c.row, c.col] = v
        return out


def make_grid(
    bbox_min: PlanarPoint,
    bbox_max: PlanarPoint,
    resolution: float,
    origin: GeoPoint,
) -> PredictionGrid:
    """Regular grid of cell centers covering the bbox.

    ceil(extent/resolution) cells per axis, centered on the bbox;
    cells are stored row-major starting at the NW corner.
    """
    if resolution <= 0:
        raise DomainError(f"resolution must be > 0, got {resolution}")
    dx = bbox_max.x - bbox_min.x
    dy = bbox_max.y - bbox_min.y
    if dx <= 0 or dy <= 0:
        raise DomainError("degenerate bbox")
    n_cols = math.ceil(dx / resolution)
    n_rows = math.ceil(dy / resolution)
    cx = (bbox_min.x + bbox_max.x) / 2.0
    cy = (bbox_min.y + bbox_max.y) / 2.0
    x_min = cx - n_cols * resolution / 2.0
    y_min = cy - n_rows * resolution / 2.0
    y_max = cy + n_rows * resolution / 2.0
    cells = []
    for row in range(n_rows):
        y = y_max - (row + 0.5) * resolution
        for col in range(n_cols):
            x = x_min + (col + 0.5) * resolution
            planar = PlanarPoint(x, y)
            cells.append(GridCell(row=row, col=col, planar=planar, geo=unproject(planar, origin)))
    return PredictionGrid(
        bbox=(bbox_min, bbox_max),
        resolution=resolution,
        n_rows=n_rows,
        n_cols=n_cols,
        x_min=x_min,
        y_min=y_min,
        cells=cells,
    )


def predict_static_grid(
    grid: PredictionGrid,
    forest: Forest,
    index: SpatialIndex,
    elevation: Optional[ElevationGrid],
    spec: FeatureSpec,
) -> PredictionGrid:
    """Fill static_pred for every cell via the site feature pipeline.

    A cell whose extraction fails is marked nodata and flagged rather
    than aborting the surface.  Cells whose largest buffer pokes beyond
    the road-network extent are flagged 'edge_effect'.
    """
    if spec.names != forest.feature_names:
        raise DomainError("feature spec does not match the forest's training spec")
    net_bbox = roads_bbox(index.segments) if index.segments else None
    max_buffer = spec.max_buffer()
    for cell in grid.cells:
        flags = list(cell.flags)
        try:
            vec = extract_predictors(cell.geo, cell.planar, index, elevation, spec)
        except DomainError as exc:
            cell.static_pred = None
            cell.flags = tuple(flags + [f"extraction_error: {exc}"])
            continue
        flags.extend(vec.flags)
        if net_bbox is not None and max_buffer > 0:
            x, y = cell.planar.x, cell.planar.y
            if (
                x - max_buffer < net_bbox[0]
                or y - max_buffer < net_bbox[1]
                or x + max_buffer > net_bbox[2]
                or y + max_buffer > net_bbox[3]
            ):
                flags.append("edge_effect")
        cell.static_pred = forest.predict_one(list(vec.values.values()))
        cell.flags = tuple(flags)
    return grid


def predict_hourly_grid(
    grid: PredictionGrid, fusion: FusionSeries, hour: datetime
) -> PredictionGrid:
    """hourly_pred = a_hat(hour) * static_pred per cell."""
    fit = fusion.hours.get(hour)
    if fit is None:
        reason = fusion.skipped.get(hour)
        if reason is not None:
            raise DomainError(
                f"hour {format_timestamp(hour)} was skipped by fusion ({reason})"
            )
        raise DomainError(f"hour {format_timestamp(hour)} is not in the fusion window")
    for cell in grid.cells:
        if cell.static_pred is None:
            cell.hourly_pred = None
        else:
            cell.hourly_pred = fit.a_hat * cell.static_pred
    grid.hour = hour
    grid.a_hat = fit.a_hat
    return grid


def grid_to_elevation_layout(grid: PredictionGrid, which: str) -> ElevationGrid:
    """Predictions as a north-up raster for ESRI ASCII output."""
    vals = grid.values(which)
    vals = np.where(np.isnan(vals), ASC_NODATA, vals)
    return ElevationGrid(
        origin=PlanarPoint(grid.x_min, grid.y_min),
        cell_size=grid.resolution,
        values=vals,
        nodata=ASC_NODATA,
    )


def write_grid_csv(path, grid: PredictionGrid) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell_id", "lat", "lon", "static_ppb", "hourly_ppb", "flags"])
        for i, c in enumerate(grid.cells):
            w.writerow(
                [
                    i,
                    repr(c.geo.lat),
                    repr(c.geo.lon),
                    "" if c.static_pred is None else repr(c.static_pred),
                    "" if c.hourly_pred is None else repr(c.hourly_pred),
                    ";".join(c.flags),
                ]
            )


def write_sites_overlay_csv(path, rows: Sequence[tuple[str, float, float, float, float]]) -> None:
    """site_id, lat, lon, observed mean, static prediction (map overlay)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["site_id", "lat", "lon", "observed_mean_ppb", "static_pred_ppb"])
        for sid, lat, lon, obs, pred in rows:
            w.writerow([sid, repr(float(lat)), repr(float(lon)), repr(float(obs)), repr(float(pred))])
