"""Planar geometry over projected coordinates.

Local equirectangular projection, road network with a bulk-loaded
rectangle tree, buffer-clipped road length, nearest-distance queries,
elevation lookup, and the geometry file formats (roads GeoJSON in
WGS84 lon/lat, elevation as an ESRI ASCII grid in projected meters).

All types are immutable after construction; every query is read-only.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DomainError, NoRoadError, ValidationError

EARTH_RADIUS_M = 6371008.8  # mean Earth radius
METERS_PER_DEGREE = EARTH_RADIUS_M * math.pi / 180.0

# Road-class strings mapped to Major by default; everything else is Other.
DEFAULT_MAJOR_CLASSES = frozenset({"motorway", "trunk", "primary", "secondary"})


@dataclass(frozen=True)
class GeoPoint:
    """WGS84 position in degrees."""

    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise DomainError(f"non-finite coordinates ({self.lat}, {self.lon})")
        if not (-90.0 <= self.lat <= 90.0):
            raise DomainError(f"latitude {self.lat} outside [-90, 90]")
        if not (-180.0 <= self.lon <= 180.0):
            raise DomainError(f"longitude {self.lon} outside [-180, 180]")


@dataclass(frozen=True)
class PlanarPoint:
    """Meters east/north of the projection origin."""

    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise DomainError(f"non-finite planar point ({self.x}, {self.y})")


def project(p: GeoPoint, origin: GeoPoint) -> PlanarPoint:
    """Local equirectangular projection about `origin`.

    x = (lon-lon0) * cos(lat0) * R * pi/180,  y = (lat-lat0) * R * pi/180.
    Adequate for study extents up to ~100 km; exactly invertible.
    """
    x = (p.lon - origin.lon) * math.cos(math.radians(origin.lat)) * METERS_PER_DEGREE
    y = (p.lat - origin.lat) * METERS_PER_DEGREE
    return PlanarPoint(x, y)


def unproject(p: PlanarPoint, origin: GeoPoint) -> GeoPoint:
    """Inverse of project()."""
    lat = origin.lat + p.y / METERS_PER_DEGREE
    lon = origin.lon + p.x / (METERS_PER_DEGREE * math.cos(math.radians(origin.lat)))
    return GeoPoint(lat, lon)


class RoadClass(Enum):
    MAJOR = "major"
    OTHER = "other"


@dataclass(frozen=True)
class RoadSegment:
    """A projected road polyline with class and optional traffic counts."""

    id: str
    polyline: tuple[PlanarPoint, ...]
    road_class: RoadClass
    truck_aadt: Optional[float] = None
    veh_aadt: Optional[float] = None
    # cached vertex array, built once in __post_init__
    _xy: np.ndarray = field(init=False, default=None, repr=False, compare=False)

    def __post_init__(self):
        if len(self.polyline) < 2:
            raise DomainError(f"segment {self.id}: polyline needs >= 2 points")
        xy = np.array([(p.x, p.y) for p in self.polyline], dtype=float)
        steps = np.diff(xy, axis=0)
        if np.any(np.all(steps == 0.0, axis=1)):
            raise DomainError(f"segment {self.id}: consecutive duplicate vertices")
        object.__setattr__(self, "_xy", xy)

    @property
    def xy(self) -> np.ndarray:
        """(n, 2) vertex array."""
        return self._xy

    def length(self) -> float:
        steps = np.diff(self._xy, axis=0)
        return float(np.sum(np.hypot(steps[:, 0], steps[:, 1])))

    def bbox(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax)."""
        mn = self._xy.min(axis=0)
        mx = self._xy.max(axis=0)
        return (float(mn[0]), float(mn[1]), float(mx[0]), float(mx[1]))


def clip_length_in_circle(seg: RoadSegment, center: PlanarPoint, radius: float) -> float:
    """Exact length of `seg` inside the closed disk (center, radius).

    Each polyline edge is intersected with the disk analytically: the
    quadratic |a + t*d - c|^2 = r^2 gives the parameter interval inside.
    """
    if radius <= 0:
        raise DomainError(f"radius must be > 0, got {radius}")
    xy = seg.xy
    a = xy[:-1]
    d = xy[1:] - a
    len2 = np.einsum("ij,ij->i", d, d)
    f = a - np.array([center.x, center.y])
    b_half = np.einsum("ij,ij->i", f, d)  # = B/2 of the quadratic
    c = np.einsum("ij,ij->i", f, f) - radius * radius
    disc = b_half * b_half - len2 * c
    total = 0.0
    for i in range(len(a)):
        if disc[i] <= 0.0 or len2[i] == 0.0:
            continue  # edge misses the disk (or touches tangentially)
        sq = math.sqrt(disc[i])
        t_lo = (-b_half[i] - sq) / len2[i]
        t_hi = (-b_half[i] + sq) / len2[i]
        lo = max(t_lo, 0.0)
        hi = min(t_hi, 1.0)
        if hi > lo:
            total += (hi - lo) * math.sqrt(len2[i])
    return total


def point_to_segment_distance(center: PlanarPoint, seg: RoadSegment) -> float:
    """Minimum Euclidean distance from a point to a polyline."""
    xy = seg.xy
    a = xy[:-1]
    d = xy[1:] - a
    p = np.array([center.x, center.y])
    len2 = np.einsum("ij,ij->i", d, d)
    t = np.einsum("ij,ij->i", p - a, d) / np.where(len2 == 0.0, 1.0, len2)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[:, None] * d
    diff = closest - p
    return float(np.sqrt(np.min(np.einsum("ij,ij->i", diff, diff))))


class SpatialIndex:
    """Bulk-loaded rectangle tree (STR packing) over segment bounding boxes.

    query_circle returns a superset of the segments intersecting the
    circle: every segment whose bbox touches the disk, and no segment
    whose bbox misses it.
    """

    _NODE_CAP = 8

    def __init__(self, segments: Sequence[RoadSegment]):
        self.segments = tuple(segments)
        self._item_boxes = np.array(
            [s.bbox() for s in self.segments], dtype=float
        ).reshape(-1, 4)
        # _node_levels[0] groups items; each next level groups the one below
        self._node_levels = []
        boxes = self._item_boxes
        while len(boxes) > self._NODE_CAP:
            boxes, members = _str_group(boxes, self._NODE_CAP)
            self._node_levels.append((boxes, members))

    def query_circle(self, center: PlanarPoint, radius: float) -> list[int]:
        """Indices of segments whose bbox intersects the disk."""
        if radius <= 0:
            raise DomainError(f"radius must be > 0, got {radius}")
        n = len(self.segments)
        if n == 0:
            return []
        cx, cy, r = center.x, center.y, radius
        if not self._node_levels:
            return [
                i for i in range(n) if _box_hits_circle(self._item_boxes[i], cx, cy, r)
            ]
        top_boxes, top_members = self._node_levels[-1]
        ids = [
            m
            for j in range(len(top_boxes))
            if _box_hits_circle(top_boxes[j], cx, cy, r)
            for m in top_members[j]
        ]
        for lvl in range(len(self._node_levels) - 2, -1, -1):
            boxes, members = self._node_levels[lvl]
            ids = [
                m
                for j in ids
                if _box_hits_circle(boxes[j], cx, cy, r)
                for m in members[j]
            ]
        return [i for i in ids if _box_hits_circle(self._item_boxes[i], cx, cy, r)]


def _str_group(boxes: np.ndarray, cap: int):
    """One STR packing pass: group `boxes` into nodes of at most `cap`."""
    n = len(boxes)
    cx = (boxes[:, 0] + boxes[:, 2]) / 2.0
    cy = (boxes[:, 1] + boxes[:, 3]) / 2.0
    n_nodes = math.ceil(n / cap)
    n_slices = math.ceil(math.sqrt(n_nodes))
    slice_size = n_slices * cap
    by_x = np.argsort(cx, kind="stable")
    group_boxes = []
    group_members = []
    for s in range(0, n, slice_size):
        sl = by_x[s : s + slice_size]
        by_y = sl[np.argsort(cy[sl], kind="stable")]
        for g in range(0, len(by_y), cap):
            members = by_y[g : g + cap]
            bb = boxes[members]
            group_boxes.append(
                (bb[:, 0].min(), bb[:, 1].min(), bb[:, 2].max(), bb[:, 3].max())
            )
            group_members.append(members.tolist())
    return np.array(group_boxes, dtype=float), group_members


def _box_hits_circle(box, cx, cy, r) -> bool:
    dx = max(box[0] - cx, 0.0, cx - box[2])
    dy = max(box[1] - cy, 0.0, cy - box[3])
    return dx * dx + dy * dy <= r * r


def total_length_in_buffer(
    index: SpatialIndex,
    center: PlanarPoint,
    radius: float,
    class_filter: Optional[Callable[[RoadSegment], bool]] = None,
) -> float:
    """Sum of clipped segment lengths inside the buffer circle.

    Identical to an indexless full scan: the index only prunes segments
    whose bbox cannot touch the disk.
    """
    total = 0.0
    for i in index.query_circle(center, radius):
        seg = index.segments[i]
        if class_filter is not None and not class_filter(seg):
            continue
        total += clip_length_in_circle(seg, center, radius)
    return total


def nearest_segment(
    center: PlanarPoint,
    segments: Iterable[RoadSegment],
    class_filter: Optional[Callable[[RoadSegment], bool]] = None,
) -> tuple[RoadSegment, float]:
    """Nearest qualifying segment and its distance.

    Raises NoRoadError when nothing passes the filter; the caller decides
    how the predictor handles that.
    """
    best = None
    best_d = math.inf
    for seg in segments:
        if class_filter is not None and not class_filter(seg):
            continue
        d = point_to_segment_distance(center, seg)
        if d < best_d:
            best, best_d = seg, d
    if best is None:
        raise NoRoadError("no road segment passes the class filter")
    return best, best_d


def distance_to_nearest(
    center: PlanarPoint,
    segments: Iterable[RoadSegment],
    class_filter: Optional[Callable[[RoadSegment], bool]] = None,
) -> float:
    """Minimum point-to-polyline distance over qualifying segments."""
    return nearest_segment(center, segments, class_filter)[1]


@dataclass(frozen=True)
class ElevationGrid:
    """North-up raster of elevations in the projected frame.

    `origin` is the lower-left corner; `values[0]` is the northernmost
    row (ESRI ASCII layout).  Cells equal to `nodata` are holes.
    """

    origin: PlanarPoint
    cell_size: float
    values: np.ndarray  # shape (n_rows, n_cols)
    nodata: float = -9999.0

    def __post_init__(self):
        if self.cell_size <= 0:
            raise DomainError(f"cell_size must be > 0, got {self.cell_size}")
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise DomainError("elevation values must be a 2-D array")
        if not np.all(np.isfinite(v) | (v == self.nodata)):
            raise DomainError("elevation values must be finite or nodata")
        object.__setattr__(self, "values", v)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    def extent(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) of the full raster."""
        return (
            self.origin.x,
            self.origin.y,
            self.origin.x + self.n_cols * self.cell_size,
            self.origin.y + self.n_rows * self.cell_size,
        )


def elevation_at(grid: ElevationGrid, p: PlanarPoint) -> tuple[float, bool]:
    """Bilinear elevation at `p`; returns (meters, used_nodata_fallback).

    Interpolates the four surrounding cell centers (clamped at raster
    edges).  If any corner is nodata the value of the nearest valid cell
    is returned instead and the flag is set.
    """
    xmin, ymin, xmax, ymax = grid.extent()
    if not (xmin <= p.x <= xmax and ymin <= p.y <= ymax):
        raise DomainError(f"point ({p.x}, {p.y}) outside elevation grid extent")
    cs = grid.cell_size
    # continuous cell-center coordinates, counted from the bottom-left
    gx = (p.x - grid.origin.x) / cs - 0.5
    gy = (p.y - grid.origin.y) / cs - 0.5
    c0 = min(max(math.floor(gx), 0), grid.n_cols - 1)
    c1 = min(c0 + 1, grid.n_cols - 1)
    rb0 = min(max(math.floor(gy), 0), grid.n_rows - 1)  # row from bottom
    rb1 = min(rb0 + 1, grid.n_rows - 1)
    fx = min(max(gx - c0, 0.0), 1.0)
    fy = min(max(gy - rb0, 0.0), 1.0)
    r0 = grid.n_rows - 1 - rb0
    r1 = grid.n_rows - 1 - rb1
    corners = np.array(
        [
            grid.values[r0, c0],
            grid.values[r0, c1],
            grid.values[r1, c0],
            grid.values[r1, c1],
        ]
    )
    if np.any(corners == grid.nodata):
        return _nearest_valid_value(grid, p), True
    v00, v10, v01, v11 = corners
    value = (
        v00 * (1 - fx) * (1 - fy)
        + v10 * fx * (1 - fy)
        + v01 * (1 - fx) * fy
        + v11 * fx * fy
    )
    return float(value), False


def _nearest_valid_value(grid: ElevationGrid, p: PlanarPoint) -> float:
    valid = grid.values != grid.nodata
    if not np.any(valid):
        raise DomainError("elevation grid contains no valid cells")
    rows, cols = np.nonzero(valid)
    cs = grid.cell_size
    cxs = grid.origin.x + (cols + 0.5) * cs
    cys = grid.origin.y + (grid.n_rows - 1 - rows + 0.5) * cs
    d2 = (cxs - p.x) ** 2 + (cys - p.y) ** 2
    i = int(np.argmin(d2))
    return float(grid.values[rows[i], cols[i]])


# ---------------------------------------------------------------------------
# File formats


def read_esri_ascii(path) -> ElevationGrid:
    """Read an ESRI ASCII grid (planar-meter coordinates)."""
    path = Path(path)
    header = {}
    data_lines = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            key = parts[0].lower()
            if key in {"ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value"} and len(parts) == 2:
                header[key] = float(parts[1])
            else:
                data_lines.append(line)
    for req in ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize"):
        if req not in header:
            raise ValidationError(f"{path}: missing ESRI ASCII header field {req.upper()}")
    n_cols = int(header["ncols"])
    n_rows = int(header["nrows"])
    nodata = header.get("nodata_value", -9999.0)
    tokens = " ".join(data_lines).split()
    try:
        values = np.array(tokens, dtype=float)
    except ValueError as exc:
        raise ValidationError(f"{path}: non-numeric grid value ({exc})")
    if values.size != n_rows * n_cols:
        raise ValidationError(
            f"{path}: expected {n_rows * n_cols} values, found {values.size}"
        )
    return ElevationGrid(
        origin=PlanarPoint(header["xllcorner"], header["yllcorner"]),
        cell_size=header["cellsize"],
        values=values.reshape(n_rows, n_cols),
        nodata=nodata,
    )


def write_esri_ascii(path, grid: ElevationGrid) -> None:
    path = Path(path)
    with open(path, "w") as fh:
        fh.write(f"NCOLS {grid.n_cols}\n")
        fh.write(f"NROWS {grid.n_rows}\n")
        fh.write(f"XLLCORNER {grid.origin.x!r}\n")
        fh.write(f"YLLCORNER {grid.origin.y!r}\n")
        fh.write(f"CELLSIZE {grid.cell_size!r}\n")
        fh.write(f"NODATA_VALUE {grid.nodata!r}\n")
        for row in grid.values:
            fh.write(" ".join(repr(float(v)) for v in row))
            fh.write("\n")


def load_roads(
    path,
    origin: GeoPoint,
    major_classes: Optional[Iterable[str]] = None,
) -> list[RoadSegment]:
    """Read roads.geojson (WGS84 lon/lat LineStrings) into projected segments.

    `properties.road_class` strings named in `major_classes` map to
    Major; everything else (including unmapped strings) is Other.
    """
    majors = frozenset(s.lower() for s in (major_classes or DEFAULT_MAJOR_CLASSES))
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("type") != "FeatureCollection":
        raise ValidationError(f"{path}: expected a GeoJSON FeatureCollection")
    segments = []
    errors = []
    for i, feature in enumerate(doc.get("features", [])):
        geom = feature.get("geometry") or {}
        if geom.get("type") != "LineString":
            errors.append((i, f"feature {i}: geometry must be LineString, got {geom.get('type')}"))
            continue
        coords = geom.get("coordinates", [])
        if len(coords) < 2:
            errors.append((i, f"feature {i}: LineString needs >= 2 coordinates"))
            continue
        props = feature.get("properties") or {}
        cls_str = str(props.get("road_class", "")).lower()
        road_class = RoadClass.MAJOR if cls_str in majors else RoadClass.OTHER
        try:
            polyline = tuple(
                project(GeoPoint(lat=float(lat), lon=float(lon)), origin)
                for lon, lat in coords
            )
            seg = RoadSegment(
                id=str(props.get("id", i)),
                polyline=polyline,
                road_class=road_class,
                truck_aadt=_opt_float(props.get("truck_aadt")),
                veh_aadt=_opt_float(props.get("veh_aadt")),
            )
        except (DomainError, TypeError, ValueError) as exc:
            errors.append((i, f"feature {i}: {exc}"))
            continue
        segments.append(seg)
    if errors:
        raise ValidationError(f"{path}: {len(errors)} invalid road features", errors)
    return segments


def roads_bbox(segments: Sequence[RoadSegment]) -> tuple[float, float, float, float]:
    """(xmin, ymin, xmax, ymax) over all segments."""
    if not segments:
        raise DomainError("empty road network has no bbox")
    boxes = np.array([s.bbox() for s in segments])
    return (
        float(boxes[:, 0].min()),
        float(boxes[:, 1].min()),
        float(boxes[:, 2].max()),
        float(boxes[:, 3].max()),
    )


def _opt_float(v):
    return None if v is None else float(v)
