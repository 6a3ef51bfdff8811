"""Localizing what the static model misses.

Per-site unexplained-variance fractions, wind direction/speed bin means
of the fusion residuals, residual time-series extracts, and per-site
summary statistics (boxplot five-numbers, 1-hour and rolling 8-hour
maxima).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import Mapping, Optional, Sequence

import numpy as np

from .dataio import POLLUTANTS, HourlyRecord, hour_range
from .errors import DomainError
from .fusion import FusionSeries

DEFAULT_SECTORS = 16
DEFAULT_SPEED_EDGES = (0.5, 2.0, 4.0, 8.0)
CALM_THRESHOLD_MS = 0.5


@dataclass(frozen=True)
class SiteVarianceReport:
    """Mean squared residual per site, as a fraction of the network total."""

    pollutant: str
    entries: tuple[tuple[str, float, float], ...]  # (site_id, sse, fraction), desc
    excluded: tuple[str, ...]  # static sites with zero residual hours


def site_variance_fractions(series: FusionSeries) -> SiteVarianceReport:
    """sse = mean over a site's hours of e^2; fraction = sse / sum(sse).

    The mean (not the sum) keeps sites with different completeness
    comparable.  Sites that never appear in the residuals are excluded
    and reported.
    """
    acc: dict[str, list[float]] = {}
    for fit in series.hours.values():
        for sid, e in fit.residuals.items():
            acc.setdefault(sid, []).append(e * e)
    if not acc:
        raise DomainError("fusion series contains no residuals")
    sse = {sid: float(np.mean(v)) for sid, v in acc.items()}
    total = sum(sse.values())
    entries = sorted(
        ((sid, s, s / total if total > 0 else 0.0) for sid, s in sse.items()),
        key=lambda t: (-t[2], t[0]),
    )
    excluded = tuple(sorted(s for s in series.static if s not in acc))
    return SiteVarianceReport(
        pollutant=series.pollutant, entries=tuple(entries), excluded=excluded
    )


@dataclass(frozen=True)
class PolarBin:
    sector_index: int  # -1 for the calm bin
    sector_lo_deg: float
    sector_hi_deg: float
    speed_lo_ms: float
    speed_hi_ms: float  # inf for the open top band
    mean_residual: float  # NaN when empty
    n: int


@dataclass(frozen=True)
class PolarBinTable:
    pollutant: str
    sectors: int
    speed_edges: tuple[float, ...]
    bins: tuple[PolarBin, ...]
    excluded_missing_wind: int
    total_residuals: int


def wind_lookup(records: Sequence[HourlyRecord]) -> dict[tuple[str, datetime], tuple[float, float]]:
    """(site, hour) -> (speed, direction) where both are present."""
    out = {}
    for rec in records:
        if rec.wind_speed_ms is not None and rec.wind_dir_deg is not None:
            out[(rec.site_id, rec.ts)] = (rec.wind_speed_ms, rec.wind_dir_deg)
    return out


def polar_bin_means(
    series: FusionSeries,
    wind: Mapping[tuple[str, datetime], tuple[float, float]],
    sectors: int = DEFAULT_SECTORS,
    speed_edges: Sequence[float] = DEFAULT_SPEED_EDGES,
    site_ids: Optional[Sequence[str]] = None,
    reference_site: Optional[str] = None,
) -> PolarBinTable:
    """Mean residual per (direction sector, speed band) bin.

    Sector assignment is floor(dir / (360/sectors)); hours calmer than
    the first speed edge pool into a dedicated calm bin regardless of
    direction.  Residuals without wind data are excluded and counted.
    Restrict to `site_ids` to study a single site; `reference_site`
    supplies wind for sites without their own anemometer record.
    """
    if sectors < 1:
        raise DomainError(f"sectors must be >= 1, got {sectors}")
    edges = tuple(float(e) for e in speed_edges)
    if list(edges) != sorted(set(edges)) or not edges or edges[0] <= 0:
        raise DomainError(f"speed edges must be positive and increasing, got {edges}")
    calm_top = edges[0]
    bands = list(zip(edges, edges[1:] + (math.inf,)))
    wanted = set(site_ids) if site_ids is not None else None
    width = 360.0 / sectors

    sums = np.zeros((sectors, len(bands)))
    counts = np.zeros((sectors, len(bands)), dtype=int)
    calm_sum = 0.0
    calm_n = 0
    missing = 0
    total = 0
    for hour, fit in series.hours.items():
        for sid, e in fit.residuals.items():
            if wanted is not None and sid not in wanted:
                continue
            total += 1
            w = wind.get((sid, hour))
            if w is None and reference_site is not None:
                w = wind.get((reference_site, hour))
            if w is None:
                missing += 1
                continue
            speed, direction = w
            if speed < calm_top:
                calm_sum += e
                calm_n += 1
                continue
            sector = int(direction // width)
            if sector >= sectors:  # direction == 360 cannot occur; guard anyway
                sector = sectors - 1
            band = len(bands) - 1
            for bi, (lo, hi) in enumerate(bands):
                if lo <= speed < hi:
                    band = bi
                    break
            sums[sector, band] += e
            counts[sector, band] += 1

    bins = [
        PolarBin(
            sector_index=-1,
            sector_lo_deg=0.0,
            sector_hi_deg=360.0,
            speed_lo_ms=0.0,
            speed_hi_ms=calm_top,
            mean_residual=calm_sum / calm_n if calm_n else float("nan"),
            n=calm_n,
        )
    ]
    for s in range(sectors):
        for bi, (lo, hi) in enumerate(bands):
            n = int(counts[s, bi])
            bins.append(
                PolarBin(
                    sector_index=s,
                    sector_lo_deg=s * width,
                    sector_hi_deg=(s + 1) * width,
                    speed_lo_ms=lo,
                    speed_hi_ms=hi,
                    mean_residual=float(sums[s, bi] / n) if n else float("nan"),
                    n=n,
                )
            )
    return PolarBinTable(
        pollutant=series.pollutant,
        sectors=sectors,
        speed_edges=edges,
        bins=tuple(bins),
        excluded_missing_wind=missing,
        total_residuals=total,
    )


@dataclass(frozen=True)
class ResidualPoint:
    ts: datetime
    observed: Optional[float]
    modeled: Optional[float]
    residual: Optional[float]


def residual_timeseries(
    series: FusionSeries,
    site_ids: Sequence[str],
    window: tuple[datetime, datetime],
) -> dict[str, list[ResidualPoint]]:
    """Hourly (observed, modeled, residual) extract per site.

    Every hour of the window appears; hours without a fit or without the
    site produce explicit missing markers.
    """
    unknown = [s for s in site_ids if s not in series.static]
    if unknown:
        raise DomainError(f"unknown site ids: {unknown}")
    out: dict[str, list[ResidualPoint]] = {s: [] for s in site_ids}
    for hour in hour_range(*window):
        fit = series.hours.get(hour)
        for sid in site_ids:
            if fit is None or sid not in fit.residuals:
                out[sid].append(ResidualPoint(hour, None, None, None))
            else:
                modeled = fit.a_hat * series.static[sid] + fit.intercept
                e = fit.residuals[sid]
                out[sid].append(ResidualPoint(hour, modeled + e, modeled, e))
    return out


def quantile(sorted_vals: Sequence[float], q: float) -> float:
    """Type-7 (linear interpolation between order statistics) quantile."""
    n = len(sorted_vals)
    if n == 0:
        raise DomainError("quantile of empty data")
    if n == 1:
        return float(sorted_vals[0])
    pos = q * (n - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, n - 1)
    frac = pos - lo
    return float(sorted_vals[lo] * (1.0 - frac) + sorted_vals[hi] * frac)


@dataclass(frozen=True)
class SiteSummary:
    site_id: str
    pollutant: str
    n: int
    mean: float
    median: float
    p25: float
    p75: float
    whisker_lo: float  # furthest datum within 1.5 IQR below p25
    whisker_hi: float  # furthest datum within 1.5 IQR above p75
    max_1h: float
    max_8h: Optional[float]  # rolling 8-hour mean maximum; None if no full window


def summary_stats(
    records: Sequence[HourlyRecord],
    window: tuple[datetime, datetime],
    pollutants: Sequence[str] = POLLUTANTS,
) -> dict[str, dict[str, SiteSummary]]:
    """Boxplot statistics and maxima per site per pollutant."""
    start, end = window
    by_site: dict[str, dict[str, dict[datetime, float]]] = {}
    for rec in records:
        if not (start <= rec.ts < end):
            continue
        for p in pollutants:
            v = rec.value(p)
            if v is None:
                continue
            by_site.setdefault(p, {}).setdefault(rec.site_id, {})[rec.ts] = v
    out: dict[str, dict[str, SiteSummary]] = {p: {} for p in pollutants}
    for p in pollutants:
        for sid, values in sorted(by_site.get(p, {}).items()):
            vals = sorted(values.values())
            p25 = quantile(vals, 0.25)
            p75 = quantile(vals, 0.75)
            iqr = p75 - p25
            lo_fence = p25 - 1.5 * iqr
            hi_fence = p75 + 1.5 * iqr
            inside = [v for v in vals if lo_fence <= v <= hi_fence]
            out[p][sid] = SiteSummary(
                site_id=sid,
                pollutant=p,
                n=len(vals),
                mean=float(np.mean(vals)),
                median=quantile(vals, 0.5),
                p25=p25,
                p75=p75,
                whisker_lo=min(inside) if inside else p25,
                whisker_hi=max(inside) if inside else p75,
                max_1h=max(vals),
                max_8h=rolling_8h_max(values),
            )
    return out


def rolling_8h_max(values: Mapping[datetime, float]) -> Optional[float]:
    """Maximum over all complete 8-consecutive-hour windows of the mean.

    Returns None when no window has all 8 hours present.
    """
    best = None
    hours = sorted(values)
    for ts in hours:
        window_vals = []
        for k in range(8):
            v = values.get(ts + timedelta(hours=k))
            if v is None:
                break
            window_vals.append(v)
        if len(window_vals) == 8:
            m = float(np.mean(window_vals))
            if best is None or m > best:
                best = m
    return best
