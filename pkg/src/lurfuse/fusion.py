"""Hourly rescaling of the static site predictions to the sensor network.

For each hour, the observed concentrations y_k at the reporting sites
are regressed through the origin on the static model values C_k:
y_k = a*C_k + e_k with a = sum(y*C)/sum(C^2).  The per-site residuals e
feed the diagnostics; the scale a turns the static surface into an
hourly one.  An optional intercept mode (y = a*C + b) is provided for
sensitivity analysis only.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import Mapping, Optional, Sequence

import numpy as np

from .dataio import POLLUTANTS, HourlyRecord, hour_range
from .errors import DomainError, HourSkipped

SKIP_TOO_FEW_SITES = "too_few_sites"
SKIP_SINGULAR = "singular"

DEFAULT_MIN_SITES = 5


@dataclass(frozen=True)
class HourlyFit:
    """One hour's scale, residuals, and bookkeeping."""

    a_hat: float
    intercept: float
    n_sites: int
    residuals: dict[str, float]  # site_id -> e (ppb), sites observed this hour

    @property
    def negative_scale(self) -> bool:
        return self.a_hat < 0.0


def fit_hourly_scale(
    static: Mapping[str, float],
    obs: Mapping[str, float],
    min_sites: int = DEFAULT_MIN_SITES,
    with_intercept: bool = False,
) -> HourlyFit:
    """Least-squares scale of the static predictions for one hour.

    Uses only sites present in both mappings (pairwise deletion).
    Raises HourSkipped with a reason code when fewer than min_sites
    report or the normal equation is singular.
    """
    sites = sorted(s for s in obs if s in static)
    if len(sites) < max(min_sites, 1):
        raise HourSkipped(SKIP_TOO_FEW_SITES)
    y = np.array([obs[s] for s in sites], dtype=float)
    c = np.array([static[s] for s in sites], dtype=float)
    if with_intercept:
        n = len(sites)
        sxx = float(np.sum((c - c.mean()) ** 2))
        if n < 2 or sxx == 0.0:
            raise HourSkipped(SKIP_SINGULAR)
        a = float(np.sum((c - c.mean()) * (y - y.mean())) / sxx)
        b = float(y.mean() - a * c.mean())
    else:
        denom = float(np.dot(c, c))
        if denom == 0.0:
            raise HourSkipped(SKIP_SINGULAR)
        a = float(np.dot(y, c) / denom)
        b = 0.0
    e = y - (a * c + b)
    return HourlyFit(
        a_hat=a,
        intercept=b,
        n_sites=len(sites),
        residuals={s: float(v) for s, v in zip(sites, e)},
    )


@dataclass(frozen=True)
class FusionSeries:
    """Per-hour fits over a window for one pollutant."""

    pollutant: str
    hours: dict[datetime, HourlyFit]
    skipped: dict[datetime, str]  # hour -> reason code
    static: dict[str, float]  # the C values the fits were made against
    with_intercept: bool = False

    def modeled(self, hour: datetime, site_id: str) -> float:
        fit = self.hours[hour]
        return fit.a_hat * self.static[site_id] + fit.intercept

    def skip_fraction(self) -> float:
        total = len(self.hours) + len(self.skipped)
        return len(self.skipped) / total if total else 0.0


def observations_by_hour(
    records: Sequence[HourlyRecord], window: tuple[datetime, datetime], pollutant: str
) -> dict[datetime, dict[str, float]]:
    """Per-hour site -> observed ppb maps for one pollutant."""
    start, end = window
    out: dict[datetime, dict[str, float]] = {}
    for rec in records:
        if not (start <= rec.ts < end):
            continue
        v = rec.value(pollutant)
        if v is None:
            continue
        out.setdefault(rec.ts, {})[rec.site_id] = v
    return out


def fuse_series(
    static: Mapping[str, float],
    records: Sequence[HourlyRecord],
    window: tuple[datetime, datetime],
    pollutant: str,
    min_sites: int = DEFAULT_MIN_SITES,
    with_intercept: bool = False,
) -> FusionSeries:
    """fit_hourly_scale applied independently to every hour in the window."""
    if not static:
        raise DomainError("no static predictions supplied")
    by_hour = observations_by_hour(records, window, pollutant)
    hours: dict[datetime, HourlyFit] = {}
    skipped: dict[datetime, str] = {}
    for hour in hour_range(*window):
        obs = by_hour.get(hour)
        if not obs:
            skipped[hour] = SKIP_TOO_FEW_SITES
            continue
        try:
            hours[hour] = fit_hourly_scale(
                static, obs, min_sites=min_sites, with_intercept=with_intercept
            )
        except HourSkipped as exc:
            skipped[hour] = exc.reason
    return FusionSeries(
        pollutant=pollutant,
        hours=hours,
        skipped=skipped,
        static=dict(static),
        with_intercept=with_intercept,
    )


def diurnal_means(
    records: Sequence[HourlyRecord],
    window: tuple[datetime, datetime],
    pollutants: Sequence[str] = POLLUTANTS,
    utc_offset_hours: int = 0,
) -> dict[str, list[float]]:
    """Mean concentration per local hour of day over all sites and days.

    Hours of day without any data come back as NaN.
    """
    start, end = window
    offset = timedelta(hours=utc_offset_hours)
    sums = {p: np.zeros(24) for p in pollutants}
    counts = {p: np.zeros(24, dtype=int) for p in pollutants}
    for rec in records:
        if not (start <= rec.ts < end):
            continue
        hod = (rec.ts + offset).hour
        for p in pollutants:
            v = rec.value(p)
            if v is None:
                continue
            sums[p][hod] += v
            counts[p][hod] += 1
    out = {}
    for p in pollutants:
        with np.errstate(invalid="ignore"):
            means = np.where(counts[p] > 0, sums[p] / np.maximum(counts[p], 1), np.nan)
        out[p] = [float(v) for v in means]
    return out
