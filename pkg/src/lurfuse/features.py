"""Predictor table construction and the three predictor-selection approaches.

Features follow the land-use recipe: buffered road lengths (major/all),
inverse distance to the nearest major road, traffic counts of that road,
elevation, and raw site coordinates.  Selection approach 1 uses every
buffer, approach 2 keeps the best-correlated buffer per family, and
approach 3 additionally drops entries whose correlation contradicts the
expected direction of effect.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime
from typing import Mapping, Optional, Sequence

import numpy as np

from .dataio import POLLUTANTS, HourlyRecord, Site
from .errors import DomainError, NoRoadError, PipelineError
from .geo import (
    ElevationGrid,
    GeoPoint,
    PlanarPoint,
    RoadClass,
    SpatialIndex,
    elevation_at,
    nearest_segment,
    total_length_in_buffer,
)

DEFAULT_BUFFERS = (24.0, 50.0, 100.0, 200.0, 300.0, 500.0, 1000.0)
BUFFERED_FAMILIES = ("MAJORROADLENGTH", "ROADLENGTH")

# Direction-of-effect priors used by approach 3 unless the config
# overrides them: traffic/road features raise NO2 and deplete O3;
# elevation and coordinates are unconstrained.
DEFAULT_EXPECTED_SIGNS: dict[str, dict[str, str]] = {
    "Elevation": {"no2": "any", "o3": "any"},
    "Lat": {"no2": "any", "o3": "any"},
    "Long": {"no2": "any", "o3": "any"},
    "MAJORROADLENGTH": {"no2": "+", "o3": "-"},
    "ROADLENGTH": {"no2": "+", "o3": "-"},
    "DISTINVNEAR1": {"no2": "+", "o3": "-"},
    "TRUCK_AADT": {"no2": "+", "o3": "-"},
    "VEH_AADT": {"no2": "+", "o3": "-"},
}

MIN_NEAREST_DISTANCE_M = 1.0  # floor for the inverse-distance predictor


@dataclass(frozen=True)
class FeatureEntry:
    code: str
    buffer_m: Optional[float] = None
    expected_sign: Mapping[str, str] = field(default_factory=dict)

    @property
    def name(self) -> str:
        if self.buffer_m is None:
            return self.code
        return f"{self.code}_{int(self.buffer_m)}"

    def sign_for(self, pollutant: str) -> str:
        return self.expected_sign.get(pollutant, "any")


@dataclass(frozen=True)
class FeatureSpec:
    entries: tuple[FeatureEntry, ...]

    def __post_init__(self):
        keys = [(e.code, e.buffer_m) for e in self.entries]
        if len(set(keys)) != len(keys):
            raise DomainError("duplicate (code, buffer) feature entries")
        for e in self.entries:
            if (e.code in BUFFERED_FAMILIES) != (e.buffer_m is not None):
                raise DomainError(
                    f"{e.code}: buffer required iff the family is buffered"
                )
            if e.buffer_m is not None and e.buffer_m <= 0:
                raise DomainError(f"{e.name}: buffer must be positive")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(e.name for e in self.entries)

    def max_buffer(self) -> float:
        buffers = [e.buffer_m for e in self.entries if e.buffer_m is not None]
        return max(buffers) if buffers else 0.0


def default_spec(
    buffers: Sequence[float] = DEFAULT_BUFFERS,
    expected_signs: Optional[Mapping[str, Mapping[str, str]]] = None,
) -> FeatureSpec:
    """The approach-1 spec: every Table-style predictor at every buffer."""
    signs = {k: dict(v) for k, v in (expected_signs or DEFAULT_EXPECTED_SIGNS).items()}
    entries = [
        FeatureEntry("Elevation", expected_sign=signs.get("Elevation", {})),
        FeatureEntry("Lat", expected_sign=signs.get("Lat", {})),
        FeatureEntry("Long", expected_sign=signs.get("Long", {})),
    ]
    for family in BUFFERED_FAMILIES:
        for b in buffers:
            entries.append(FeatureEntry(family, float(b), expected_sign=signs.get(family, {})))
    entries.append(FeatureEntry("DISTINVNEAR1", expected_sign=signs.get("DISTINVNEAR1", {})))
    entries.append(FeatureEntry("TRUCK_AADT", expected_sign=signs.get("TRUCK_AADT", {})))
    entries.append(FeatureEntry("VEH_AADT", expected_sign=signs.get("VEH_AADT", {})))
    return FeatureSpec(tuple(entries))


@dataclass(frozen=True)
class PredictorVector:
    """Feature name -> value in FeatureSpec order, plus extraction flags."""

    values: dict[str, float]
    flags: tuple[str, ...] = ()


def extract_predictors(
    geo_pt: GeoPoint,
    planar_pt: PlanarPoint,
    index: SpatialIndex,
    elevation: Optional[ElevationGrid],
    spec: FeatureSpec,
) -> PredictorVector:
    """Compute the predictor vector for one site or grid cell.

    Deterministic: identical inputs give bit-identical vectors.  A
    missing major road sets DISTINVNEAR1 and the traffic counts to 0
    and flags the vector instead of failing.
    """
    flags: list[str] = []
    if not index.segments:
        flags.append("empty_road_network")
    codes = {e.code for e in spec.entries}
    nearest_major = None
    nearest_major_dist = None
    if codes & {"DISTINVNEAR1", "TRUCK_AADT", "VEH_AADT"}:
        try:
            nearest_major, nearest_major_dist = nearest_segment(
                planar_pt, index.segments, _is_major
            )
        except NoRoadError:
            flags.append("no_major_road")
    elevation_value = None
    if "Elevation" in codes:
        if elevation is None:
            raise DomainError("spec requires Elevation but no grid was provided")
        elevation_value, fell_back = elevation_at(elevation, planar_pt)
        if fell_back:
            flags.append("elevation_nodata_fallback")

    values: dict[str, float] = {}
    for entry in spec.entries:
        code = entry.code
        if code == "Elevation":
            values[entry.name] = elevation_value
        elif code == "Lat":
            values[entry.name] = geo_pt.lat
        elif code == "Long":
            values[entry.name] = geo_pt.lon
        elif code == "MAJORROADLENGTH":
            values[entry.name] = total_length_in_buffer(
                index, planar_pt, entry.buffer_m, _is_major
            )
        elif code == "ROADLENGTH":
            values[entry.name] = total_length_in_buffer(index, planar_pt, entry.buffer_m)
        elif code == "DISTINVNEAR1":
            if nearest_major is None:
                values[entry.name] = 0.0
            else:
                values[entry.name] = 1.0 / max(nearest_major_dist, MIN_NEAREST_DISTANCE_M)
        elif code in ("TRUCK_AADT", "VEH_AADT"):
            if nearest_major is None:
                values[entry.name] = 0.0
            else:
                aadt = (
                    nearest_major.truck_aadt if code == "TRUCK_AADT" else nearest_major.veh_aadt
                )
                if aadt is None:
                    values[entry.name] = 0.0
                    if "aadt_missing" not in flags:
                        flags.append("aadt_missing")
                else:
                    values[entry.name] = float(aadt)
        else:
            raise DomainError(f"unknown feature code {code!r}")
    return PredictorVector(values=values, flags=tuple(flags))


def _is_major(segment) -> bool:
    return segment.road_class is RoadClass.MAJOR


@dataclass(frozen=True)
class FeatureTable:
    """Predictor vectors for a fixed site list, as an aligned matrix."""

    site_ids: tuple[str, ...]
    names: tuple[str, ...]
    values: np.ndarray  # (n_sites, n_features)
    flags: dict[str, tuple[str, ...]]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def matrix_for(self, spec: FeatureSpec) -> np.ndarray:
        cols = [self.names.index(n) for n in spec.names]
        return self.values[:, cols]

    def rows_for(self, site_ids: Sequence[str]) -> np.ndarray:
        idx = {s: i for i, s in enumerate(self.site_ids)}
        return self.values[[idx[s] for s in site_ids], :]


def build_feature_table(
    sites: Sequence[Site],
    index: SpatialIndex,
    elevation: Optional[ElevationGrid],
    spec: FeatureSpec,
) -> FeatureTable:
    rows = []
    flags = {}
    for site in sites:
        vec = extract_predictors(site.geo, site.planar, index, elevation, spec)
        rows.append([vec.values[n] for n in spec.names])
        flags[site.site_id] = vec.flags
    return FeatureTable(
        site_ids=tuple(s.site_id for s in sites),
        names=spec.names,
        values=np.array(rows, dtype=float).reshape(len(rows), len(spec.names)),
        flags=flags,
    )


@dataclass(frozen=True)
class SiteMeans:
    """Window-mean concentrations per pollutant for qualifying sites."""

    window: tuple[datetime, datetime]
    means: dict[str, dict[str, float]]  # pollutant -> site_id -> ppb
    excluded: tuple[tuple[str, str, float], ...]  # (site_id, pollutant, completeness)


def mean_concentrations(
    records: Sequence[HourlyRecord],
    window: tuple[datetime, datetime],
    completeness_min: float = 0.75,
    pollutants: Sequence[str] = POLLUTANTS,
) -> SiteMeans:
    """Arithmetic mean of hourly values per site per pollutant.

    Sites below `completeness_min` availability over the window are
    excluded and reported.  A pollutant with zero qualifying sites is a
    pipeline error.
    """
    start, end = window
    window_hours = int((end - start).total_seconds() // 3600)
    if window_hours <= 0:
        raise DomainError("window must span at least one hour")
    sums: dict[str, dict[str, float]] = {p: {} for p in pollutants}
    counts: dict[str, dict[str, int]] = {p: {} for p in pollutants}
    for rec in records:
        if not (start <= rec.ts < end):
            continue
        for p in pollutants:
            v = rec.value(p)
            if v is None:
                continue
            sums[p][rec.site_id] = sums[p].get(rec.site_id, 0.0) + v
            counts[p][rec.site_id] = counts[p].get(rec.site_id, 0) + 1
    means: dict[str, dict[str, float]] = {}
    excluded = []
    for p in pollutants:
        means[p] = {}
        for sid in sorted(counts[p]):
            completeness = counts[p][sid] / window_hours
            if completeness < completeness_min:
                excluded.append((sid, p, completeness))
            else:
                means[p][sid] = sums[p][sid] / counts[p][sid]
        if not means[p]:
            raise PipelineError(f"no sites meet completeness for {p}", stage="features")
    return SiteMeans(window=window, means=means, excluded=tuple(excluded))


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson r; NaN when either side has zero variance."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xd = x - x.mean()
    yd = y - y.mean()
    sxx = float(np.dot(xd, xd))
    syy = float(np.dot(yd, yd))
    if sxx == 0.0 or syy == 0.0:
        return float("nan")
    return float(np.dot(xd, yd) / math.sqrt(sxx * syy))


@dataclass(frozen=True)
class BufferOptimization:
    """Approach-2 output: one buffer per family plus the evidence."""

    spec: FeatureSpec
    chosen: dict[str, float]  # family -> buffer
    per_family: dict[str, dict[float, float]]  # family -> buffer -> r
    dropped: tuple[str, ...]  # families with zero variance at every buffer
    correlations: dict[str, float]  # entry name -> r, for the retained spec


def optimize_buffers(
    table: FeatureTable,
    site_means: Mapping[str, float],
    spec: FeatureSpec,
    pollutant: str,
    mode: str = "abs",
) -> BufferOptimization:
    """Keep, per buffered family, the buffer whose feature correlates best
    with the site means (|r| by default, signed r with mode='signed');
    ties go to the smallest buffer.
    """
    if mode not in ("abs", "signed"):
        raise DomainError(f"mode must be 'abs' or 'signed', got {mode!r}")
    common = [s for s in table.site_ids if s in site_means]
    if len(common) < 3:
        raise DomainError(f"buffer optimization needs >= 3 sites, got {len(common)}")
    y = np.array([site_means[s] for s in common], dtype=float)
    rows = table.rows_for(common)
    col_of = {n: i for i, n in enumerate(table.names)}

    per_family: dict[str, dict[float, float]] = {}
    chosen: dict[str, float] = {}
    dropped: list[str] = []
    for family in BUFFERED_FAMILIES:
        buffers = sorted(
            e.buffer_m for e in spec.entries if e.code == family and e.buffer_m is not None
        )
        if not buffers:
            continue
        rs = {}
        for b in buffers:
            name = f"{family}_{int(b)}"
            rs[b] = pearson(rows[:, col_of[name]], y)
        per_family[family] = rs
        scored = [
            (b, rs[b] if mode == "signed" else abs(rs[b]))
            for b in buffers
            if not math.isnan(rs[b])
        ]
        if not scored:
            dropped.append(family)
            continue
        best_score = max(s for _, s in scored)
        chosen[family] = min(b for b, s in scored if s == best_score)

    entries = []
    for e in spec.entries:
        if e.code in BUFFERED_FAMILIES:
            if e.code in chosen and e.buffer_m == chosen[e.code]:
                entries.append(e)
        else:
            entries.append(e)
    new_spec = FeatureSpec(tuple(entries))
    correlations = {
        e.name: pearson(rows[:, col_of[e.name]], y) for e in new_spec.entries
    }
    return BufferOptimization(
        spec=new_spec,
        chosen=chosen,
        per_family=per_family,
        dropped=tuple(dropped),
        correlations=correlations,
    )


@dataclass(frozen=True)
class SignFilterResult:
    """Approach-3 output; infeasible when every entry was removed."""

    feasible: bool
    spec: Optional[FeatureSpec]
    removed: tuple[tuple[str, float, str], ...]  # (name, r, expected sign)


def filter_by_sign(
    spec: FeatureSpec, correlations: Mapping[str, float], pollutant: str
) -> SignFilterResult:
    """Drop entries whose sample correlation contradicts the expected sign.

    Entries with sign 'any' or an undefined correlation are kept.  The
    result is a subset of the input and the operation is idempotent.
    """
    kept = []
    removed = []
    for e in spec.entries:
        expected = e.sign_for(pollutant)
        r = correlations.get(e.name, float("nan"))
        if expected == "any" or math.isnan(r):
            kept.append(e)
        elif expected == "+" and r < 0:
            removed.append((e.name, r, expected))
        elif expected == "-" and r > 0:
            removed.append((e.name, r, expected))
        else:
            kept.append(e)
    if not kept:
        return SignFilterResult(feasible=False, spec=None, removed=tuple(removed))
    return SignFilterResult(
        feasible=True, spec=FeatureSpec(tuple(kept)), removed=tuple(removed)
    )


def correlations_for_spec(
    table: FeatureTable, site_means: Mapping[str, float], spec: FeatureSpec
) -> dict[str, float]:
    """Sample correlation of each spec entry against the site means."""
    common = [s for s in table.site_ids if s in site_means]
    y = np.array([site_means[s] for s in common], dtype=float)
    rows = table.rows_for(common)
    col_of = {n: i for i, n in enumerate(table.names)}
    return {e.name: pearson(rows[:, col_of[e.name]], y) for e in spec.entries}
