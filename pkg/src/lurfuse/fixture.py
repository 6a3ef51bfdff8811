"""Synthetic desk-scale dataset generator.

Builds a small study area (major roads + street grid, an elevation ramp
with a hill, 31 monitor sites), site means that follow a known function
of buffered major-road length and elevation, hourly series scaled by a
known diurnal function with near-zero minima, a regional wind record,
and two designated anomaly sites that pick up an extra +10 ppb NO2 when
the wind blows from a configured sector.  Ground-truth parameters are
written alongside so tests can use the generator itself as the oracle.

Everything is drawn from named streams of the run seed, and files are
written with full-precision reprs, so a fixed seed reproduces the
dataset byte for byte.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from .dataio import (
    HourlyRecord,
    Site,
    format_timestamp,
    hour_range,
    write_observations_csv,
    write_sites_csv,
)
from .features import FeatureSpec, default_spec, extract_predictors
from .geo import (
    ElevationGrid,
    GeoPoint,
    PlanarPoint,
    RoadClass,
    RoadSegment,
    SpatialIndex,
    clip_length_in_circle,
    elevation_at,
    project,
    unproject,
    write_esri_ascii,
)
from .rng import DOMAIN_FIXTURE, stream

UTC = timezone.utc

# fixture stream sub-domains
_S_ROADS = 0
_S_SITES = 1
_S_MEANS = 2
_S_SCALES = 3
_S_WIND = 4
_S_OBS = 5
_S_MISSING = 6
_S_SKILL = 7

# local-hour shape of the diurnal cycle (normalized to mean 1 below);
# minima sit close to zero, rush-hour/afternoon peaks where expected
_NO2_PROFILE = np.array(
    [0.25, 0.18, 0.12, 0.08, 0.10, 0.35, 0.90, 1.60, 1.95, 1.50, 1.05, 0.80,
     0.70, 0.65, 0.70, 0.90, 1.25, 1.70, 1.95, 1.60, 1.10, 0.70, 0.45, 0.32]
)
_O3_PROFILE = np.array(
    [0.30, 0.22, 0.15, 0.08, 0.05, 0.04, 0.10, 0.30, 0.60, 0.95, 1.30, 1.60,
     1.85, 2.00, 2.05, 1.95, 1.75, 1.45, 1.15, 0.90, 0.70, 0.55, 0.45, 0.36]
)


@dataclass(frozen=True)
class FixtureParams:
    seed: int = 0
    n_sites: int = 31
    start: datetime = datetime(2018, 4, 1, tzinfo=UTC)
    end: datetime = datetime(2018, 6, 1, tzinfo=UTC)
    origin: GeoPoint = GeoPoint(34.05, -117.25)
    extent_x: float = 12_000.0
    extent_y: float = 8_000.0
    utc_offset_hours: int = -7
    true_buffer: float = 300.0
    mean_noise_frac: float = 0.08  # site-mean noise / sd of the signal
    obs_noise_sd: float = 1.0  # hourly observation noise, ppb
    missing_frac: float = 0.02
    anomaly_ppb: float = 10.0
    anomaly_sector: tuple[float, float] = (0.0, 22.5)
    anomaly_min_speed: float = 0.5
    north_share: float = 0.18  # fraction of days with a northerly regime
    n_anomaly_sites: int = 2


@dataclass
class World:
    """Deterministic geometry for one seed."""

    params: FixtureParams
    sites: list[Site]
    segments: list[RoadSegment]
    index: SpatialIndex
    elevation: ElevationGrid
    roads_geojson: dict


@dataclass
class TruthMeans:
    signal: dict[str, dict[str, float]]  # pollutant -> site -> noiseless mean
    means: dict[str, dict[str, float]]  # pollutant -> site -> mean used
    road_length: dict[str, float]  # site -> major-road length at true buffer
    elevation: dict[str, float]
    coefficients: dict[str, dict[str, float]]


@dataclass
class TruthScales:
    a_hourly: dict[str, list[float]]  # pollutant -> per window hour
    profiles: dict[str, list[float]]
    day_factors: dict[str, list[float]]


def build_world(params: FixtureParams) -> World:
    rng = stream(params.seed, DOMAIN_FIXTURE, _S_ROADS)
    hx = params.extent_x / 2.0
    hy = params.extent_y / 2.0

    def jitter_line(x0, y0, x1, y1, n_vertices=4, amp=60.0):
        t = np.linspace(0.0, 1.0, n_vertices)
        xs = x0 + t * (x1 - x0)
        ys = y0 + t * (y1 - y0)
        xs[1:-1] += rng.uniform(-amp, amp, n_vertices - 2)
        ys[1:-1] += rng.uniform(-amp, amp, n_vertices - 2)
        return list(zip(xs.tolist(), ys.tolist()))

    majors = [
        ("motorway", jitter_line(-hx, -1200.0, hx, -900.0),
         float(rng.uniform(90_000, 140_000)), float(rng.uniform(8_000, 14_000))),
        ("trunk", jitter_line(1500.0, -hy, 1700.0, hy),
         float(rng.uniform(55_000, 90_000)), float(rng.uniform(4_000, 9_000))),
        ("primary", jitter_line(-hx, 2500.0, 0.0, 1800.0),
         float(rng.uniform(25_000, 45_000)), float(rng.uniform(1_500, 4_000))),
        ("secondary", jitter_line(-2800.0, -hy, -2400.0, hy),
         float(rng.uniform(14_000, 26_000)), float(rng.uniform(600, 2_000))),
        ("secondary", jitter_line(-hx, 3200.0, hx, 2800.0),
         float(rng.uniform(14_000, 26_000)), float(rng.uniform(600, 2_000))),
    ]
    features = []
    segments = []
    rid = 0
    for cls, line, veh, truck in majors:
        features.append(_road_feature(rid, cls, line, params.origin, veh, truck))
        segments.append(_road_segment(rid, cls, line, veh, truck))
        rid += 1
    # local street grid with mild jitter, no traffic counts
    for x in np.arange(-hx + 400.0, hx - 200.0, 500.0):
        line = jitter_line(float(x), -hy + 200.0, float(x), hy - 200.0, 3, 40.0)
        features.append(_road_feature(rid, "residential", line, params.origin))
        segments.append(_road_segment(rid, "residential", line))
        rid += 1
    for y in np.arange(-hy + 400.0, hy - 200.0, 500.0):
        line = jitter_line(-hx + 200.0, float(y), hx - 200.0, float(y), 3, 40.0)
        features.append(_road_feature(rid, "residential", line, params.origin))
        segments.append(_road_segment(rid, "residential", line))
        rid += 1
    index = SpatialIndex(segments)

    elevation = _make_elevation(params)
    sites = _make_sites(params, segments)
    roads_geojson = {"type": "FeatureCollection", "features": features}
    return World(
        params=params,
        sites=sites,
        segments=segments,
        index=index,
        elevation=elevation,
        roads_geojson=roads_geojson,
    )


def _road_segment(rid, cls, line, veh=None, truck=None) -> RoadSegment:
    road_class = RoadClass.MAJOR if cls in ("motorway", "trunk", "primary", "secondary") else RoadClass.OTHER
    return RoadSegment(
        id=str(rid),
        polyline=tuple(PlanarPoint(x, y) for x, y in line),
        road_class=road_class,
        truck_aadt=truck,
        veh_aadt=veh,
    )


def _road_feature(rid, cls, line, origin, veh=None, truck=None) -> dict:
    coords = []
    for x, y in line:
        g = unproject(PlanarPoint(x, y), origin)
        coords.append([g.lon, g.lat])
    props = {"id": str(rid), "road_class": cls}
    if veh is not None:
        props["veh_aadt"] = veh
    if truck is not None:
        props["truck_aadt"] = truck
    return {
        "type": "Feature",
        "geometry": {"type": "LineString", "coordinates": coords},
        "properties": props,
    }


def _make_elevation(params: FixtureParams) -> ElevationGrid:
    cell = 90.0
    margin = 1_200.0
    x0 = -params.extent_x / 2.0 - margin
    y0 = -params.extent_y / 2.0 - margin
    n_cols = math.ceil((params.extent_x + 2 * margin) / cell)
    n_rows = math.ceil((params.extent_y + 2 * margin) / cell)
    cols = x0 + (np.arange(n_cols) + 0.5) * cell
    rows_y = y0 + (n_rows - 1 - np.arange(n_rows) + 0.5) * cell  # north-up
    xx, yy = np.meshgrid(cols, rows_y)
    bump = 60.0 * np.exp(-(((xx + 2_500.0) ** 2) + (yy - 3_000.0) ** 2) / (2 * 1_800.0**2))
    z = 240.0 + 0.018 * (yy - y0) + bump
    # a nodata notch in the far corner, outside any site/map query
    z[:2, :2] = -9999.0
    return ElevationGrid(PlanarPoint(x0, y0), cell, z, nodata=-9999.0)


def _make_sites(params: FixtureParams, segments: list[RoadSegment]) -> list[Site]:
    rng = stream(params.seed, DOMAIN_FIXTURE, _S_SITES)
    hx = params.extent_x / 2.0 - 600.0
    hy = params.extent_y / 2.0 - 600.0
    majors = [s for s in segments if s.road_class is RoadClass.MAJOR]
    n_near = params.n_sites // 2 + 1
    positions: list[tuple[float, float]] = []

    def far_enough(x, y, d=250.0):
        return all((x - px) ** 2 + (y - py) ** 2 >= d * d for px, py in positions)

    attempts = 0
    while len(positions) < n_near and attempts < 10_000:
        attempts += 1
        seg = majors[int(rng.integers(len(majors)))]
        xy = seg.xy
        edge = int(rng.integers(len(xy) - 1))
        t = float(rng.uniform(0.1, 0.9))
        px = xy[edge, 0] + t * (xy[edge + 1, 0] - xy[edge, 0])
        py = xy[edge, 1] + t * (xy[edge + 1, 1] - xy[edge, 1])
        # offsets log-spread over 25..700 m so buffer profiles differ by site
        offset = float(np.exp(rng.uniform(np.log(25.0), np.log(700.0))))
        theta = float(rng.uniform(0, 2 * math.pi))
        x = px + offset * math.cos(theta)
        y = py + offset * math.sin(theta)
        if abs(x) < hx and abs(y) < hy and far_enough(x, y):
            positions.append((x, y))
    while len(positions) < params.n_sites and attempts < 20_000:
        attempts += 1
        x = float(rng.uniform(-hx, hx))
        y = float(rng.uniform(-hy, hy))
        if far_enough(x, y):
            positions.append((x, y))
    sites = []
    for i, (x, y) in enumerate(positions):
        planar = PlanarPoint(x, y)
        sites.append(
            Site(site_id=str(101 + i), geo=unproject(planar, params.origin), planar=planar)
        )
    return sites


def true_means(world: World, params: Optional[FixtureParams] = None) -> TruthMeans:
    """Site means as a known function of road length and elevation + noise."""
    params = params or world.params
    rng = stream(params.seed, DOMAIN_FIXTURE, _S_MEANS)
    majors = [s for s in world.segments if s.road_class is RoadClass.MAJOR]
    road_length = {}
    elev = {}
    for site in world.sites:
        road_length[site.site_id] = sum(
            clip_length_in_circle(s, site.planar, params.true_buffer) for s in majors
        )
        elev[site.site_id], _ = elevation_at(world.elevation, site.planar)
    ids = [s.site_id for s in world.sites]
    ml = np.array([road_length[s] for s in ids])
    ev = np.array([elev[s] for s in ids])
    ml_norm = ml / ml.max() if ml.max() > 0 else ml
    ev_norm = (ev - ev.min()) / (ev.max() - ev.min()) if ev.max() > ev.min() else ev * 0
    coef = {
        "no2": {"b0": 6.0, "b_road": 16.0, "b_elev": 11.0},
        "o3": {"b0": 30.0, "b_road": -10.0, "b_elev": 8.0},
    }
    signal = {
        "no2": coef["no2"]["b0"] + coef["no2"]["b_road"] * ml_norm + coef["no2"]["b_elev"] * ev_norm,
        "o3": coef["o3"]["b0"] + coef["o3"]["b_road"] * ml_norm + coef["o3"]["b_elev"] * ev_norm,
    }
    means = {}
    signal_out = {}
    for p in ("no2", "o3"):
        sd = float(np.std(signal[p]))
        noise = rng.normal(0.0, params.mean_noise_frac * sd, size=len(ids))
        vals = np.maximum(signal[p] + noise, 0.5)
        means[p] = {sid: float(v) for sid, v in zip(ids, vals)}
        signal_out[p] = {sid: float(v) for sid, v in zip(ids, signal[p])}
    return TruthMeans(
        signal=signal_out,
        means=means,
        road_length=road_length,
        elevation=elev,
        coefficients={**coef, "mean_noise_frac": {"value": params.mean_noise_frac}},
    )


def hourly_scales(params: FixtureParams) -> TruthScales:
    """The known per-hour scale a(l): diurnal profile x smooth day factor."""
    rng = stream(params.seed, DOMAIN_FIXTURE, _S_SCALES)
    hours = hour_range(params.start, params.end)
    n_days = len(hours) // 24
    profiles = {
        "no2": _NO2_PROFILE / _NO2_PROFILE.mean(),
        "o3": _O3_PROFILE / _O3_PROFILE.mean(),
    }
    a = {}
    dfs = {}
    for p in ("no2", "o3"):
        wobble = rng.normal(0.0, 0.06, size=n_days)
        d = np.arange(n_days)
        df = 1.0 + 0.2 * np.sin(2 * math.pi * d / max(n_days, 1) + (0.4 if p == "o3" else 1.3))
        df = df + wobble
        df = np.maximum(df, 0.25)
        df = df / df.mean()
        dfs[p] = df
        vals = []
        for i, ts in enumerate(hours):
            hod = (ts + timedelta(hours=params.utc_offset_hours)).hour
            vals.append(float(profiles[p][hod] * df[min(i // 24, n_days - 1)]))
        a[p] = vals
    return TruthScales(
        a_hourly=a,
        profiles={p: [float(v) for v in profiles[p]] for p in profiles},
        day_factors={p: [float(v) for v in dfs[p]] for p in dfs},
    )


def make_wind(params: FixtureParams) -> tuple[list[tuple[float, float]], list[int]]:
    """Regional (speed, direction) per window hour, plus the daily regime.

    Regime 1 = northerly (directions inside the anomaly sector)."""
    rng = stream(params.seed, DOMAIN_FIXTURE, _S_WIND)
    hours = hour_range(params.start, params.end)
    n_days = len(hours) // 24 + 1
    regimes = (rng.uniform(size=n_days) < params.north_share).astype(int).tolist()
    lo, hi = params.anomaly_sector
    wind = []
    for i, _ in enumerate(hours):
        day = i // 24
        if regimes[day]:
            direction = float(rng.uniform(lo, hi))
        else:
            direction = float(rng.uniform(170.0, 280.0))
        speed = float(min(rng.gamma(2.2, 1.3), 12.0))
        wind.append((speed, direction))
    return wind, regimes


def anomaly_site_ids(world: World, means: TruthMeans, params: FixtureParams) -> list[str]:
    """Pick sites with modest NO2 means so the injected bias survives the
    hourly refit nearly intact (the scale shift stays well under 1 ppb)."""
    ranked = sorted(world.sites, key=lambda s: means.means["no2"][s.site_id])
    k = max(len(ranked) // 3, params.n_anomaly_sites)
    pool = ranked[:k]
    return sorted(s.site_id for s in pool[-params.n_anomaly_sites :])


def synth_observations(
    world: World,
    means: TruthMeans,
    scales: TruthScales,
    params: FixtureParams,
    anomaly_sites: Optional[list[str]] = None,
) -> list[HourlyRecord]:
    """Hourly records: y = a(l) * mean + anomaly + noise, with wind columns.

    With obs_noise_sd=0, missing_frac=0 and anomaly_ppb=0 the series is
    exactly y = a(l) * mean — the zero-noise oracle case.
    """
    hours = hour_range(params.start, params.end)
    wind, _ = make_wind(params)
    rng_obs = stream(params.seed, DOMAIN_FIXTURE, _S_OBS)
    rng_missing = stream(params.seed, DOMAIN_FIXTURE, _S_MISSING)
    n_h = len(hours)
    n_s = len(world.sites)
    noise = (
        rng_obs.normal(0.0, params.obs_noise_sd, size=(n_s, n_h, 2))
        if params.obs_noise_sd > 0
        else np.zeros((n_s, n_h, 2))
    )
    missing = (
        rng_missing.uniform(size=(n_s, n_h)) < params.missing_frac
        if params.missing_frac > 0
        else np.zeros((n_s, n_h), dtype=bool)
    )
    anomaly_sites = anomaly_sites if anomaly_sites is not None else []
    lo, hi = params.anomaly_sector
    records = []
    for si, site in enumerate(world.sites):
        m_no2 = means.means["no2"][site.site_id]
        m_o3 = means.means["o3"][site.site_id]
        is_anomaly = site.site_id in anomaly_sites
        for hi_idx, ts in enumerate(hours):
            speed, direction = wind[hi_idx]
            if missing[si, hi_idx]:
                records.append(
                    HourlyRecord(site.site_id, ts, wind_speed_ms=speed, wind_dir_deg=direction)
                )
                continue
            y_no2 = scales.a_hourly["no2"][hi_idx] * m_no2 + float(noise[si, hi_idx, 0])
            y_o3 = scales.a_hourly["o3"][hi_idx] * m_o3 + float(noise[si, hi_idx, 1])
            if (
                is_anomaly
                and lo <= direction < hi
                and speed >= params.anomaly_min_speed
            ):
                y_no2 += params.anomaly_ppb
            records.append(
                HourlyRecord(
                    site.site_id,
                    ts,
                    no2_ppb=y_no2,
                    o3_ppb=y_o3,
                    wind_speed_ms=speed,
                    wind_dir_deg=direction,
                )
            )
    return records


def make_skill_fixture(
    seed: int, n_decoys: int = 4, noise_frac: float = 0.15
) -> tuple[np.ndarray, np.ndarray, list[str], list[str]]:
    """Training table for the model-skill check: the two true drivers
    (buffered major-road length, elevation) plus pure-noise decoys;
    the target follows the fixture's NO2 mean function at `noise_frac`."""
    params = FixtureParams(seed=seed, mean_noise_frac=noise_frac)
    world = build_world(params)
    truth = true_means(world, params)
    ids = [s.site_id for s in world.sites]
    ml = np.array([truth.road_length[s] for s in ids])
    ev = np.array([truth.elevation[s] for s in ids])
    y = np.array([truth.means["no2"][s] for s in ids])
    rng = stream(seed, DOMAIN_FIXTURE, _S_SKILL)
    decoys = rng.normal(size=(len(ids), n_decoys))
    X = np.column_stack([ml, ev, decoys])
    names = ["MAJORROADLENGTH_300", "Elevation"] + [f"DECOY_{i}" for i in range(n_decoys)]
    return X, y, names, ["MAJORROADLENGTH_300", "Elevation"]


def generate_fixture(out_dir, params: FixtureParams = FixtureParams()) -> dict:
    """Write the full synthetic dataset + config + ground truth to disk."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = build_world(params)
    truth_means = true_means(world, params)
    scales = hourly_scales(params)
    anomalies = anomaly_site_ids(world, truth_means, params)
    records = synth_observations(world, truth_means, scales, params, anomalies)
    _, regimes = make_wind(params)

    write_sites_csv(
        out / "sites.csv",
        [(s.site_id, s.geo.lat, s.geo.lon) for s in world.sites],
    )
    write_observations_csv(out / "observations.csv", records)
    with open(out / "roads.geojson", "w") as fh:
        json.dump(world.roads_geojson, fh, indent=1)
        fh.write("\n")
    write_esri_ascii(out / "elevation.asc", world.elevation)
    _write_config(out / "config.toml", params)

    truth = {
        "seed": params.seed,
        "n_sites": params.n_sites,
        "window": {"start": format_timestamp(params.start), "end": format_timestamp(params.end)},
        "origin": {"lat": params.origin.lat, "lon": params.origin.lon},
        "utc_offset_hours": params.utc_offset_hours,
        "true_buffer_m": params.true_buffer,
        "drivers": ["MAJORROADLENGTH_300", "Elevation"],
        "mean_model": truth_means.coefficients,
        "site_means_signal": truth_means.signal,
        "site_means": truth_means.means,
        "road_length_true_buffer": truth_means.road_length,
        "site_elevation": truth_means.elevation,
        "a_hourly": scales.a_hourly,
        "diurnal_profiles": scales.profiles,
        "day_factors": scales.day_factors,
        "daily_regimes_northerly": regimes,
        "anomaly": {
            "sites": anomalies,
            "pollutant": "no2",
            "ppb": params.anomaly_ppb,
            "sector_deg": list(params.anomaly_sector),
            "min_speed_ms": params.anomaly_min_speed,
        },
        "obs_noise_sd": params.obs_noise_sd,
        "missing_frac": params.missing_frac,
        "site_planar": {
            s.site_id: {"x": s.planar.x, "y": s.planar.y} for s in world.sites
        },
    }
    with open(out / "truth.json", "w") as fh:
        json.dump(truth, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return {
        "sites": out / "sites.csv",
        "observations": out / "observations.csv",
        "roads": out / "roads.geojson",
        "elevation": out / "elevation.asc",
        "config": out / "config.toml",
        "truth": out / "truth.json",
    }


def _write_config(path, params: FixtureParams) -> None:
    n_days = (params.end - params.start).days
    map_day = min(39, max(n_days - 1, 0))  # 07:00 local on day 40 when the window allows
    map_hour = params.start + timedelta(days=map_day, hours=14)
    text = f"""# generated alongside the synthetic fixture (seed {params.seed})

[run]
seed = {params.seed}
pollutants = ["no2", "o3"]
approach = 1
utc_offset_hours = {params.utc_offset_hours}

[paths]
sites = "sites.csv"
observations = "observations.csv"
roads = "roads.geojson"
elevation = "elevation.asc"

[window]
start = "{format_timestamp(params.start)}"
end = "{format_timestamp(params.end)}"

[projection]
origin_lat = {params.origin.lat!r}
origin_lon = {params.origin.lon!r}

[roads]
major_classes = ["motorway", "trunk", "primary", "secondary"]

[features]
buffers = [24, 50, 100, 200, 300, 500, 1000]
completeness_min = 0.75
buffer_corr = "abs"

[features.expected_signs.MAJORROADLENGTH]
no2 = "+"
o3 = "-"

[features.expected_signs.ROADLENGTH]
no2 = "+"
o3 = "-"

[features.expected_signs.DISTINVNEAR1]
no2 = "+"
o3 = "-"

[features.expected_signs.TRUCK_AADT]
no2 = "+"
o3 = "-"

[features.expected_signs.VEH_AADT]
no2 = "+"
o3 = "-"

[forest]
n_trees = 500
min_node_size = 5
bootstrap = true
mtry_grid = [2, 5, 11, 20]
k_folds = 10
importance_repeats = 5

[fusion]
min_sites = 5
with_intercept = false

[diagnostics]
sectors = 16
speed_edges = [0.5, 2.0, 4.0, 8.0]
top_sites = 4

[mapping]
resolution = 500.0
bbox = [-5000.0, -3000.0, 5000.0, 3000.0]
hour = "{format_timestamp(map_hour)}"
"""
    Path(path).write_text(text)
