"""Tabular input formats: sites.csv and observations.csv.

Validation is itemized: structural problems raise ValidationError with
row numbers; bad observation rows are rejected individually so that
rows-in always equals rows-accepted plus rows-rejected.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Optional, Sequence

from .errors import ValidationError
from .geo import GeoPoint, PlanarPoint, project

POLLUTANTS = ("no2", "o3")

SITES_COLUMNS = ["site_id", "lat", "lon"]
OBS_COLUMNS = [
    "site_id",
    "timestamp_utc",
    "no2_ppb",
    "o3_ppb",
    "wind_speed_ms",
    "wind_dir_deg",
]


@dataclass(frozen=True)
class Site:
    """A fixed monitor location."""

    site_id: str
    geo: GeoPoint
    planar: PlanarPoint
    elevation_m: Optional[float] = None

    def with_elevation(self, elevation_m: float) -> "Site":
        return replace(self, elevation_m=elevation_m)


@dataclass(frozen=True)
class HourlyRecord:
    """One site-hour of pollutant and wind measurements (None = missing)."""

    site_id: str
    ts: datetime
    no2_ppb: Optional[float] = None
    o3_ppb: Optional[float] = None
    wind_speed_ms: Optional[float] = None
    wind_dir_deg: Optional[float] = None

    def value(self, pollutant: str) -> Optional[float]:
        if pollutant == "no2":
            return self.no2_ppb
        if pollutant == "o3":
            return self.o3_ppb
        raise KeyError(f"unknown pollutant {pollutant!r}")


def parse_timestamp(text: str) -> datetime:
    """Parse an ISO8601 hour timestamp; must be UTC and hour-aligned."""
    raw = text.strip()
    if raw.endswith("Z"):
        raw = raw[:-1] + "+00:00"
    dt = datetime.fromisoformat(raw)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    dt = dt.astimezone(timezone.utc)
    if dt.minute or dt.second or dt.microsecond:
        raise ValueError(f"timestamp {text!r} is not hour-aligned")
    return dt


def format_timestamp(dt: datetime) -> str:
    return dt.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def hour_range(start: datetime, end: datetime) -> list[datetime]:
    """All hourly timestamps in [start, end)."""
    n = int((end - start) / timedelta(hours=1))
    return [start + timedelta(hours=i) for i in range(max(n, 0))]


def site_centroid(rows: Sequence[tuple[float, float]]) -> GeoPoint:
    """Bbox centroid of (lat, lon) pairs; the default projection origin."""
    lats = [r[0] for r in rows]
    lons = [r[1] for r in rows]
    return GeoPoint((min(lats) + max(lats)) / 2.0, (min(lons) + max(lons)) / 2.0)


def load_sites(path, origin: Optional[GeoPoint] = None) -> tuple[list[Site], GeoPoint]:
    """Read sites.csv; returns (sites, projection origin).

    When `origin` is None the site-bbox centroid is used. Any invalid
    row aborts with an itemized ValidationError.
    """
    path = Path(path)
    raw = []
    errors = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != SITES_COLUMNS:
            raise ValidationError(
                f"{path}: header must be {','.join(SITES_COLUMNS)}, got {reader.fieldnames}"
            )
        seen = set()
        for row_no, row in enumerate(reader, start=2):
            sid = (row.get("site_id") or "").strip()
            if not sid:
                errors.append((row_no, "empty site_id"))
                continue
            if sid in seen:
                errors.append((row_no, f"duplicate site_id {sid}"))
                continue
            try:
                lat = float(row["lat"])
                lon = float(row["lon"])
                GeoPoint(lat, lon)  # range check
            except (KeyError, TypeError, ValueError) as exc:
                errors.append((row_no, f"bad coordinates: {exc}"))
                continue
            seen.add(sid)
            raw.append((sid, lat, lon))
    if errors:
        raise ValidationError(f"{path}: {len(errors)} invalid site rows", errors)
    if not raw:
        raise ValidationError(f"{path}: no sites")
    if origin is None:
        origin = site_centroid([(lat, lon) for _, lat, lon in raw])
    sites = [
        Site(site_id=sid, geo=GeoPoint(lat, lon), planar=project(GeoPoint(lat, lon), origin))
        for sid, lat, lon in raw
    ]
    return sites, origin


def load_observations(
    path, known_sites: Optional[set[str]] = None
) -> tuple[list[HourlyRecord], list[tuple[int, str]]]:
    """Read observations.csv.

    Returns (accepted records, rejected rows as (row_no, reason)).
    Row-level violations (bad ranges, unknown sites, duplicate
    site-hours) reject the row; a malformed header raises.
    """
    path = Path(path)
    records = []
    rejected = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != OBS_COLUMNS:
            raise ValidationError(
                f"{path}: header must be {','.join(OBS_COLUMNS)}, got {reader.fieldnames}"
            )
        seen = set()
        for row_no, row in enumerate(reader, start=2):
            sid = (row.get("site_id") or "").strip()
            if not sid:
                rejected.append((row_no, "empty site_id"))
                continue
            if known_sites is not None and sid not in known_sites:
                rejected.append((row_no, f"unknown site_id {sid}"))
                continue
            try:
                ts = parse_timestamp(row["timestamp_utc"])
            except (KeyError, TypeError, ValueError) as exc:
                rejected.append((row_no, f"bad timestamp: {exc}"))
                continue
            key = (sid, ts)
            if key in seen:
                rejected.append((row_no, f"duplicate site-hour {sid} {format_timestamp(ts)}"))
                continue
            try:
                no2 = _parse_optional(row, "no2_ppb")
                o3 = _parse_optional(row, "o3_ppb")
                ws = _parse_optional(row, "wind_speed_ms")
                wd = _parse_optional(row, "wind_dir_deg")
            except ValueError as exc:
                rejected.append((row_no, str(exc)))
                continue
            if ws is not None and ws < 0:
                rejected.append((row_no, f"wind_speed_ms {ws} < 0"))
                continue
            if wd is not None and not (0.0 <= wd < 360.0):
                rejected.append((row_no, f"wind_dir_deg {wd} outside [0, 360)"))
                continue
            seen.add(key)
            records.append(
                HourlyRecord(sid, ts, no2_ppb=no2, o3_ppb=o3, wind_speed_ms=ws, wind_dir_deg=wd)
            )
    return records, rejected


def _parse_optional(row, column) -> Optional[float]:
    text = (row.get(column) or "").strip()
    if text == "":
        return None
    try:
        value = float(text)
    except ValueError:
        raise ValueError(f"{column} not numeric: {text!r}")
    if value != value:  # NaN
        raise ValueError(f"{column} is NaN")
    return value


def write_sites_csv(path, rows: Sequence[tuple[str, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SITES_COLUMNS)
        for sid, lat, lon in rows:
            w.writerow([sid, repr(float(lat)), repr(float(lon))])


def write_observations_csv(path, records: Sequence[HourlyRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(OBS_COLUMNS)
        for r in records:
            w.writerow(
                [
                    r.site_id,
                    format_timestamp(r.ts),
                    _fmt_optional(r.no2_ppb),
                    _fmt_optional(r.o3_ppb),
                    _fmt_optional(r.wind_speed_ms),
                    _fmt_optional(r.wind_dir_deg),
                ]
            )


def _fmt_optional(v) -> str:
    return "" if v is None else repr(float(v))
