"""Run configuration (TOML).

All documented keys appear in the fixture-generated config.toml; missing
optional sections fall back to the defaults below.  Paths are resolved
relative to the config file's directory.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dataio import POLLUTANTS, parse_timestamp
from .errors import ValidationError
from .features import DEFAULT_BUFFERS, DEFAULT_EXPECTED_SIGNS
from .geo import DEFAULT_MAJOR_CLASSES, GeoPoint


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 500
    min_node_size: int = 5
    bootstrap: bool = True
    mtry_grid: tuple[int, ...] = ()  # empty = default grid (1..p capped at 25)
    k_folds: int = 10
    importance_repeats: int = 5


@dataclass(frozen=True)
class FusionConfig:
    min_sites: int = 5
    with_intercept: bool = False


@dataclass(frozen=True)
class DiagnosticsConfig:
    sectors: int = 16
    speed_edges: tuple[float, ...] = (0.5, 2.0, 4.0, 8.0)
    top_sites: int = 4
    reference_wind_site: Optional[str] = None


@dataclass(frozen=True)
class MappingConfig:
    resolution: float = 500.0
    bbox: Optional[tuple[float, float, float, float]] = None  # planar meters
    hour: Optional[datetime] = None


@dataclass(frozen=True)
class RunConfig:
    path: Path
    seed: int
    pollutants: tuple[str, ...]
    approach: int
    utc_offset_hours: int
    sites_path: Path
    observations_path: Path
    roads_path: Path
    elevation_path: Path
    window: tuple[datetime, datetime]
    origin: Optional[GeoPoint]  # None = site-bbox centroid
    major_classes: tuple[str, ...]
    buffers: tuple[float, ...]
    completeness_min: float
    buffer_corr: str
    expected_signs: dict[str, dict[str, str]]
    forest: ForestConfig = field(default_factory=ForestConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)

    def input_paths(self) -> dict[str, Path]:
        return {
            "sites": self.sites_path,
            "observations": self.observations_path,
            "roads": self.roads_path,
            "elevation": self.elevation_path,
        }


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"{path}: invalid TOML: {exc}")
    base = path.parent

    run = doc.get("run", {})
    approach = int(run.get("approach", 1))
    if approach not in (1, 2, 3):
        raise ValidationError(f"{path}: approach must be 1, 2 or 3, got {approach}")
    pollutants = tuple(run.get("pollutants", list(POLLUTANTS)))
    for p in pollutants:
        if p not in POLLUTANTS:
            raise ValidationError(f"{path}: unknown pollutant {p!r}")

    paths = doc.get("paths", {})

    def resolve(key, default):
        return (base / paths.get(key, default)).resolve()

    window_doc = doc.get("window", {})
    try:
        start = parse_timestamp(window_doc["start"])
        end = parse_timestamp(window_doc["end"])
    except KeyError as exc:
        raise ValidationError(f"{path}: [window] missing {exc}")
    except ValueError as exc:
        raise ValidationError(f"{path}: bad window timestamp: {exc}")
    if not start < end:
        raise ValidationError(f"{path}: window start must precede end")

    proj = doc.get("projection", {})
    origin = None
    if "origin_lat" in proj or "origin_lon" in proj:
        try:
            origin = GeoPoint(float(proj["origin_lat"]), float(proj["origin_lon"]))
        except (KeyError, ValueError) as exc:
            raise ValidationError(f"{path}: bad [projection]: {exc}")

    feats = doc.get("features", {})
    signs_doc = feats.get("expected_signs", {})
    signs = {k: dict(v) for k, v in DEFAULT_EXPECTED_SIGNS.items()}
    for family, per_pollutant in signs_doc.items():
        signs.setdefault(family, {})
        for p, s in dict(per_pollutant).items():
            if s not in ("+", "-", "any"):
                raise ValidationError(f"{path}: expected sign must be +, - or any, got {s!r}")
            signs[family][p] = s
    buffer_corr = feats.get("buffer_corr", "abs")
    if buffer_corr not in ("abs", "signed"):
        raise ValidationError(f"{path}: buffer_corr must be 'abs' or 'signed'")

    forest_doc = doc.get("forest", {})
    forest = ForestConfig(
        n_trees=int(forest_doc.get("n_trees", 500)),
        min_node_size=int(forest_doc.get("min_node_size", 5)),
        bootstrap=bool(forest_doc.get("bootstrap", True)),
        mtry_grid=tuple(int(m) for m in forest_doc.get("mtry_grid", [])),
        k_folds=int(forest_doc.get("k_folds", 10)),
        importance_repeats=int(forest_doc.get("importance_repeats", 5)),
    )
    fusion_doc = doc.get("fusion", {})
    fusion = FusionConfig(
        min_sites=int(fusion_doc.get("min_sites", 5)),
        with_intercept=bool(fusion_doc.get("with_intercept", False)),
    )
    diag_doc = doc.get("diagnostics", {})
    diagnostics = DiagnosticsConfig(
        sectors=int(diag_doc.get("sectors", 16)),
        speed_edges=tuple(float(e) for e in diag_doc.get("speed_edges", [0.5, 2.0, 4.0, 8.0])),
        top_sites=int(diag_doc.get("top_sites", 4)),
        reference_wind_site=diag_doc.get("reference_wind_site") or None,
    )
    map_doc = doc.get("mapping", {})
    bbox = map_doc.get("bbox")
    if bbox is not None:
        bbox = tuple(float(v) for v in bbox)
        if len(bbox) != 4:
            raise ValidationError(f"{path}: mapping bbox must be [xmin, ymin, xmax, ymax]")
    hour = map_doc.get("hour")
    if hour is not None:
        try:
            hour = parse_timestamp(hour)
        except ValueError as exc:
            raise ValidationError(f"{path}: bad mapping hour: {exc}")
    mapping = MappingConfig(
        resolution=float(map_doc.get("resolution", 500.0)),
        bbox=bbox,
        hour=hour,
    )

    return RunConfig(
        path=path.resolve(),
        seed=int(run.get("seed", 0)),
        pollutants=pollutants,
        approach=approach,
        utc_offset_hours=int(run.get("utc_offset_hours", 0)),
        sites_path=resolve("sites", "sites.csv"),
        observations_path=resolve("observations", "observations.csv"),
        roads_path=resolve("roads", "roads.geojson"),
        elevation_path=resolve("elevation", "elevation.asc"),
        window=(start, end),
        origin=origin,
        major_classes=tuple(doc.get("roads", {}).get("major_classes", sorted(DEFAULT_MAJOR_CLASSES))),
        buffers=tuple(float(b) for b in feats.get("buffers", DEFAULT_BUFFERS)),
        completeness_min=float(feats.get("completeness_min", 0.75)),
        buffer_corr=buffer_corr,
        expected_signs=signs,
        forest=forest,
        fusion=fusion,
        diagnostics=diagnostics,
        mapping=mapping,
    )
