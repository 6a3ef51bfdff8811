"""Pipeline stages and the run manifest.

Every stage is independently invocable: it reads the raw inputs plus the
previous stage's files from the output directory and writes plain
CSV/JSON/ASCII-grid artifacts, so `run` is literally the stages composed
in order.  run_manifest.json carries the config hash, input checksums,
seed and an inventory of output checksums; it is the only output that is
not byte-reproducible (it records wall-clock time).
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import RunConfig
from .dataio import (
    HourlyRecord,
    Site,
    format_timestamp,
    load_observations,
    load_sites,
    parse_timestamp,
)
from .errors import PipelineError, ValidationError
from .features import (
    FeatureEntry,
    FeatureSpec,
    FeatureTable,
    build_feature_table,
    correlations_for_spec,
    default_spec,
    filter_by_sign,
    mean_concentrations,
    optimize_buffers,
)
from .forest import (
    Forest,
    ForestParams,
    cross_validate,
    load_forest,
    save_forest,
    variable_importance,
)
from .fusion import FusionSeries, HourlyFit, fuse_series
from .diagnostics import (
    polar_bin_means,
    residual_timeseries,
    site_variance_fractions,
    summary_stats,
    wind_lookup,
)
from .fusion import diurnal_means
from .geo import ElevationGrid, SpatialIndex, load_roads, read_esri_ascii, write_esri_ascii
from .mapping import (
    PlanarPoint,
    grid_to_elevation_layout,
    make_grid,
    predict_hourly_grid,
    predict_static_grid,
    write_grid_csv,
    write_sites_overlay_csv,
)

log = logging.getLogger("lurfuse")

# output file names
F_VALIDATION = "validation_report.json"
F_PREDICTORS = "predictors.csv"
F_SITE_MEANS = "site_means.csv"
F_FEATURE_SPECS = "feature_specs.json"
F_BUFFER_CORR = "buffer_correlations.csv"
F_CV_FOLDS = "cv_folds.csv"
F_CV_SUMMARY = "cv_summary.csv"
F_MODEL_REPORT = "model_report.json"
F_STATIC_PRED = "static_predictions.csv"
F_FUSION = "fusion.csv"
F_RESIDUALS = "residuals.csv"
F_SKIPPED = "skipped_hours.csv"
F_SITE_VARIANCE = "site_variance.csv"
F_POLAR_BINS = "polar_bins.csv"
F_BOXSTATS = "boxstats.csv"
F_DIURNAL = "diurnal.csv"
F_SITE_MEANS_MAP = "site_means_map.csv"
F_RESIDUAL_TS = "residual_timeseries.csv"
F_MANIFEST = "run_manifest.json"


@dataclass
class Bundle:
    sites: list[Site]
    origin: object
    records: list[HourlyRecord]
    rejected: list[tuple[int, str]]
    index: SpatialIndex
    elevation: ElevationGrid


def ingest_and_validate(config: RunConfig) -> Bundle:
    """Load and validate every input; raises ValidationError on schema
    problems and PipelineError when no usable data remains."""
    missing = [str(p) for p in config.input_paths().values() if not p.exists()]
    if missing:
        raise ValidationError(f"missing input files: {', '.join(missing)}")
    sites, origin = load_sites(config.sites_path, config.origin)
    records, rejected = load_observations(
        config.observations_path, known_sites={s.site_id for s in sites}
    )
    start, end = config.window
    in_window = [r for r in records if start <= r.ts < end]
    if not in_window:
        raise PipelineError("no data in window", stage="ingest")
    segments = load_roads(config.roads_path, origin, config.major_classes)
    elevation = read_esri_ascii(config.elevation_path)
    return Bundle(
        sites=sites,
        origin=origin,
        records=in_window,
        rejected=rejected,
        index=SpatialIndex(segments),
        elevation=elevation,
    )


def stage_ingest(config: RunConfig, out: Path) -> Bundle:
    bundle = ingest_and_validate(config)
    report = {
        "sites": len(bundle.sites),
        "records_accepted": len(bundle.records),
        "rows_rejected": len(bundle.rejected),
        "rejected": [{"row": r, "reason": reason} for r, reason in bundle.rejected],
        "origin": {"lat": bundle.origin.lat, "lon": bundle.origin.lon},
        "window": {
            "start": format_timestamp(config.window[0]),
            "end": format_timestamp(config.window[1]),
        },
    }
    _write_json(out / F_VALIDATION, report)
    log.info(
        "ingest: %d sites, %d records accepted, %d rows rejected",
        len(bundle.sites), len(bundle.records), len(bundle.rejected),
    )
    return bundle


def stage_features(config: RunConfig, out: Path) -> None:
    bundle = ingest_and_validate(config)
    full_spec = default_spec(config.buffers, config.expected_signs)
    table = build_feature_table(bundle.sites, bundle.index, bundle.elevation, full_spec)
    _write_predictors_csv(out / F_PREDICTORS, table)
    means = mean_concentrations(
        bundle.records, config.window, config.completeness_min, config.pollutants
    )
    with open(out / F_SITE_MEANS, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pollutant", "site_id", "mean_ppb"])
        for p in config.pollutants:
            for sid in sorted(means.means[p]):
                w.writerow([p, sid, repr(means.means[p][sid])])

    specs_doc = {
        "approach": config.approach,
        "buffer_corr": config.buffer_corr,
        "excluded_sites": [
            {"site_id": s, "pollutant": p, "completeness": c} for s, p, c in means.excluded
        ],
        "pollutants": {},
    }
    corr_rows = []
    for p in config.pollutants:
        entry = {"feasible": True, "removed_by_sign": [], "chosen_buffers": {},
                 "dropped_families": [], "per_family_correlations": {}}
        opt = optimize_buffers(table, means.means[p], full_spec, p, config.buffer_corr)
        entry["per_family_correlations"] = {
            fam: {str(int(b)): r for b, r in rs.items()} for fam, rs in opt.per_family.items()
        }
        for fam, rs in opt.per_family.items():
            for b, r in sorted(rs.items()):
                corr_rows.append([p, fam, int(b), "" if math.isnan(r) else repr(r)])
        if config.approach == 1:
            spec = full_spec
            correlations = correlations_for_spec(table, means.means[p], full_spec)
        else:
            spec = opt.spec
            correlations = opt.correlations
            entry["chosen_buffers"] = {f: int(b) for f, b in opt.chosen.items()}
            entry["dropped_families"] = list(opt.dropped)
            if config.approach == 3:
                result = filter_by_sign(spec, correlations, p)
                entry["removed_by_sign"] = [
                    {"name": n, "r": r, "expected": s} for n, r, s in result.removed
                ]
                if not result.feasible:
                    entry["feasible"] = False
                    spec = None
                    log.warning("approach 3 infeasible for %s: every entry violates its sign", p)
                else:
                    spec = result.spec
        if spec is not None:
            entry["names"] = list(spec.names)
            entry["entries"] = [
                {"code": e.code, "buffer_m": e.buffer_m} for e in spec.entries
            ]
            entry["correlations"] = {
                n: (None if math.isnan(correlations.get(n, float("nan"))) else correlations[n])
                for n in spec.names
            }
        specs_doc["pollutants"][p] = entry
    _write_json(out / F_FEATURE_SPECS, specs_doc)
    with open(out / F_BUFFER_CORR, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pollutant", "family", "buffer_m", "r"])
        w.writerows(corr_rows)
    log.info("features: table %dx%d written", len(table.site_ids), len(table.names))


def _read_predictors(out: Path) -> FeatureTable:
    with open(out / F_PREDICTORS, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        names = tuple(header[1:-1])  # site_id ... flags
        site_ids = []
        rows = []
        flags = {}
        for row in reader:
            site_ids.append(row[0])
            rows.append([float(v) for v in row[1:-1]])
            flags[row[0]] = tuple(f for f in row[-1].split(";") if f)
    return FeatureTable(
        site_ids=tuple(site_ids),
        names=names,
        values=np.array(rows, dtype=float),
        flags=flags,
    )


def _read_site_means(out: Path) -> dict[str, dict[str, float]]:
    means: dict[str, dict[str, float]] = {}
    with open(out / F_SITE_MEANS, newline="") as fh:
        for row in csv.DictReader(fh):
            means.setdefault(row["pollutant"], {})[row["site_id"]] = float(row["mean_ppb"])
    return means


def _read_feature_specs(out: Path) -> dict:
    with open(out / F_FEATURE_SPECS) as fh:
        return json.load(fh)


def _spec_from_entries(entries: list[dict], signs: dict) -> FeatureSpec:
    return FeatureSpec(
        tuple(
            FeatureEntry(
                e["code"],
                e["buffer_m"],
                expected_sign=signs.get(e["code"], {}),
            )
            for e in entries
        )
    )


def default_mtry_grid(p: int, cap: int = 25) -> list[int]:
    """1..p, thinned to at most `cap` distinct values."""
    if p <= cap:
        return list(range(1, p + 1))
    picks = np.unique(np.round(np.linspace(1, p, cap)).astype(int))
    return [int(v) for v in picks]


def stage_train(config: RunConfig, out: Path) -> None:
    table = _read_predictors(out)
    means = _read_site_means(out)
    specs_doc = _read_feature_specs(out)
    folds_rows = []
    summary_rows = []
    static_rows = []
    model_report = {}
    for p in config.pollutants:
        entry = specs_doc["pollutants"][p]
        if not entry.get("feasible", True):
            log.warning("train: skipping %s (approach %s infeasible)", p, config.approach)
            continue
        spec = _spec_from_entries(entry["entries"], config.expected_signs)
        site_ids = [s for s in table.site_ids if s in means[p]]
        X = table.rows_for(site_ids)[:, [table.names.index(n) for n in spec.names]]
        y = np.array([means[p][s] for s in site_ids])
        n_feat = X.shape[1]
        grid = [m for m in (config.forest.mtry_grid or default_mtry_grid(n_feat)) if 1 <= m <= n_feat]
        if not grid:
            grid = default_mtry_grid(n_feat)
            log.warning("train %s: configured mtry grid out of range, using default", p)
        params = ForestParams(
            n_trees=config.forest.n_trees,
            mtry=grid[0],
            min_node_size=config.forest.min_node_size,
            bootstrap=config.forest.bootstrap,
            seed=config.seed,
        )
        report = cross_validate(
            X, y, grid, k=config.forest.k_folds, params=params, feature_names=spec.names
        )
        for r in report.results:
            for fi, frmse in enumerate(r.fold_rmse):
                folds_rows.append([p, r.mtry, fi, repr(frmse)])
            summary_rows.append(
                [p, r.mtry, repr(r.mean_rmse),
                 "" if math.isnan(r.mean_r2) else repr(r.mean_r2),
                 r.undefined_r2_folds, int(r.mtry == report.chosen_mtry)]
            )
        model_report[p] = {
            "chosen_mtry": report.chosen_mtry,
            "fold_sizes": list(report.fold_sizes),
            "cv_rmse": min(r.mean_rmse for r in report.results),
            "cv_r2": next(r.mean_r2 for r in report.results if r.mtry == report.chosen_mtry),
            "apparent_rmse": report.final_rmse,
            "apparent_r2_pearson": report.final_r2,
            "apparent_r2_sse": report.final_r2_sse,
            "n_sites": len(site_ids),
            "n_features": n_feat,
            "mtry_grid": grid,
        }
        save_forest(out / f"forest_{p}.json", report.final_forest)
        importance = variable_importance(
            report.final_forest, X, y,
            n_repeats=config.forest.importance_repeats, seed=config.seed,
        )
        with open(out / f"importance_{p}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["feature", "raw_importance_ppb", "scaled_importance"])
            for name, raw, scaled in importance.entries:
                w.writerow([name, repr(raw), repr(scaled)])
        preds = report.final_forest.predict_matrix(X)
        for sid, v in zip(site_ids, preds):
            static_rows.append([p, sid, repr(float(v))])
        log.info(
            "train %s: mtry=%d cv_rmse=%.3f apparent_r2=%.3f",
            p, report.chosen_mtry, model_report[p]["cv_rmse"], report.final_r2,
        )
    with open(out / F_CV_FOLDS, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pollutant", "mtry", "fold_index", "rmse_ppb"])
        w.writerows(folds_rows)
    with open(out / F_CV_SUMMARY, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pollutant", "mtry", "mean_rmse_ppb", "mean_r2", "undefined_r2_folds", "chosen"])
        w.writerows(summary_rows)
    _write_json(out / F_MODEL_REPORT, model_report)
    with open(out / F_STATIC_PRED, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pollutant", "site_id", "static_ppb"])
        w.writerows(static_rows)


def _read_static_predictions(out: Path) -> dict[str, dict[str, float]]:
    static: dict[str, dict[str, float]] = {}
    with open(out / F_STATIC_PRED, newline="") as fh:
        for row in csv.DictReader(fh):
            static.setdefault(row["pollutant"], {})[row["site_id"]] = float(row["static_ppb"])
    return static


def stage_fuse(config: RunConfig, out: Path) -> None:
    bundle = ingest_and_validate(config)
    static = _read_static_predictions(out)
    with open(out / F_FUSION, "w", newline="") as f_fus, open(
        out / F_RESIDUALS, "w", newline=""
    ) as f_res, open(out / F_SKIPPED, "w", newline="") as f_skip:
        w_fus = csv.writer(f_fus)
        w_res = csv.writer(f_res)
        w_skip = csv.writer(f_skip)
        w_fus.writerow(["timestamp_utc", "pollutant", "a_hat", "n_sites"])
        w_res.writerow(
            ["timestamp_utc", "pollutant", "site_id", "observed_ppb", "modeled_ppb", "residual_ppb"]
        )
        w_skip.writerow(["timestamp_utc", "pollutant", "reason"])
        for p in config.pollutants:
            if p not in static:
                continue
            series = fuse_series(
                static[p], bundle.records, config.window, p,
                min_sites=config.fusion.min_sites,
                with_intercept=config.fusion.with_intercept,
            )
            for hour in sorted(series.hours):
                fit = series.hours[hour]
                w_fus.writerow([format_timestamp(hour), p, repr(fit.a_hat), fit.n_sites])
                for sid in sorted(fit.residuals):
                    modeled = fit.a_hat * static[p][sid] + fit.intercept
                    e = fit.residuals[sid]
                    w_res.writerow(
                        [format_timestamp(hour), p, sid, repr(modeled + e), repr(modeled), repr(e)]
                    )
            for hour in sorted(series.skipped):
                w_skip.writerow([format_timestamp(hour), p, series.skipped[hour]])
            log.info(
                "fuse %s: %d hours fitted, %d skipped (%.1f%%)",
                p, len(series.hours), len(series.skipped), 100 * series.skip_fraction(),
            )


def rebuild_fusion_series(out: Path, pollutant: str) -> FusionSeries:
    """Reconstruct a FusionSeries from fusion.csv + residuals.csv."""
    static = _read_static_predictions(out).get(pollutant, {})
    hours: dict[datetime, HourlyFit] = {}
    a_hat: dict[datetime, tuple[float, int]] = {}
    with open(out / F_FUSION, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["pollutant"] != pollutant:
                continue
            a_hat[parse_timestamp(row["timestamp_utc"])] = (
                float(row["a_hat"]),
                int(row["n_sites"]),
            )
    residuals: dict[datetime, dict[str, float]] = {}
    with open(out / F_RESIDUALS, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["pollutant"] != pollutant:
                continue
            ts = parse_timestamp(row["timestamp_utc"])
            residuals.setdefault(ts, {})[row["site_id"]] = float(row["residual_ppb"])
    for ts, (a, n) in a_hat.items():
        hours[ts] = HourlyFit(a_hat=a, intercept=0.0, n_sites=n, residuals=residuals.get(ts, {}))
    skipped = {}
    skip_path = out / F_SKIPPED
    if skip_path.exists():
        with open(skip_path, newline="") as fh:
            for row in csv.DictReader(fh):
                if row["pollutant"] == pollutant:
                    skipped[parse_timestamp(row["timestamp_utc"])] = row["reason"]
    return FusionSeries(pollutant=pollutant, hours=hours, skipped=skipped, static=static)


def stage_diagnose(config: RunConfig, out: Path, plots: bool = False) -> None:
    bundle = ingest_and_validate(config)
    wind = wind_lookup(bundle.records)
    sites_by_id = {s.site_id: s for s in bundle.sites}
    stats = summary_stats(bundle.records, config.window, config.pollutants)
    means = _read_site_means(out)

    var_rows = []
    polar_rows = []
    ts_rows = []
    polar_tables = {}
    for p in config.pollutants:
        if p not in _read_static_predictions(out):
            continue
        series = rebuild_fusion_series(out, p)
        if not series.hours:
            log.warning("diagnose: no fused hours for %s", p)
            continue
        report = site_variance_fractions(series)
        for sid, sse, frac in report.entries:
            var_rows.append([p, sid, repr(sse), repr(frac)])
        pooled = polar_bin_means(
            series, wind,
            sectors=config.diagnostics.sectors,
            speed_edges=config.diagnostics.speed_edges,
            reference_site=config.diagnostics.reference_wind_site,
        )
        polar_tables[p] = pooled
        _append_polar_rows(polar_rows, p, "all", pooled)
        top = [sid for sid, _, _ in report.entries[: config.diagnostics.top_sites]]
        for sid in top:
            per_site = polar_bin_means(
                series, wind,
                sectors=config.diagnostics.sectors,
                speed_edges=config.diagnostics.speed_edges,
                site_ids=[sid],
                reference_site=config.diagnostics.reference_wind_site,
            )
            _append_polar_rows(polar_rows, p, f"site:{sid}", per_site)
        extracts = residual_timeseries(series, top, config.window)
        for sid, points in extracts.items():
            for pt in points:
                ts_rows.append(
                    [
                        p, sid, format_timestamp(pt.ts),
                        "" if pt.observed is None else repr(pt.observed),
                        "" if pt.modeled is None else repr(pt.modeled),
                        "" if pt.residual is None else repr(pt.residual),
                    ]
                )
    with open(out / F_SITE_VARIANCE, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pollutant", "site_id", "sse_ppb2", "fraction"])
        w.writerows(var_rows)
    with open(out / F_POLAR_BINS, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["pollutant", "scope", "sector_index", "sector_lo_deg", "sector_hi_deg",
             "speed_lo_ms", "speed_hi_ms", "mean_residual_ppb", "n"]
        )
        w.writerows(polar_rows)
    with open(out / F_RESIDUAL_TS, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pollutant", "site_id", "timestamp_utc", "observed_ppb", "modeled_ppb", "residual_ppb"])
        w.writerows(ts_rows)

    with open(out / F_BOXSTATS, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["pollutant", "site_id", "n", "mean", "median", "p25", "p75",
             "whisker_lo", "whisker_hi", "max_1h", "max_8h"]
        )
        for p in config.pollutants:
            for sid, s in sorted(stats.get(p, {}).items()):
                w.writerow(
                    [p, sid, s.n, repr(s.mean), repr(s.median), repr(s.p25), repr(s.p75),
                     repr(s.whisker_lo), repr(s.whisker_hi), repr(s.max_1h),
                     "" if s.max_8h is None else repr(s.max_8h)]
                )
    diurnal = diurnal_means(
        bundle.records, config.window, config.pollutants, config.utc_offset_hours
    )
    with open(out / F_DIURNAL, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pollutant", "local_hour", "mean_ppb"])
        for p in config.pollutants:
            for hod, v in enumerate(diurnal[p]):
                w.writerow([p, hod, "" if math.isnan(v) else repr(v)])
    with open(out / F_SITE_MEANS_MAP, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pollutant", "site_id", "lat", "lon", "mean_ppb"])
        for p in config.pollutants:
            for sid in sorted(means.get(p, {})):
                site = sites_by_id.get(sid)
                if site is None:
                    continue
                w.writerow([p, sid, repr(site.geo.lat), repr(site.geo.lon), repr(means[p][sid])])
    if plots:
        from .plots import write_boxplot_svg, write_polar_svg

        for p, table in polar_tables.items():
            write_polar_svg(out / f"polar_{p}.svg", table)
        for p in config.pollutants:
            if stats.get(p):
                write_boxplot_svg(out / f"boxplot_{p}.svg", list(stats[p].values()))
    log.info("diagnose: wrote variance/polar/boxstats/diurnal tables")


def _append_polar_rows(rows, pollutant, scope, table):
    for b in table.bins:
        rows.append(
            [
                pollutant, scope, b.sector_index,
                repr(b.sector_lo_deg), repr(b.sector_hi_deg),
                repr(b.speed_lo_ms),
                "inf" if math.isinf(b.speed_hi_ms) else repr(b.speed_hi_ms),
                "" if math.isnan(b.mean_residual) else repr(b.mean_residual),
                b.n,
            ]
        )


def stage_map(config: RunConfig, out: Path) -> None:
    bundle = ingest_and_validate(config)
    specs_doc = _read_feature_specs(out)
    means = _read_site_means(out)
    static = _read_static_predictions(out)
    if config.mapping.bbox is None:
        xs = [s.planar.x for s in bundle.sites]
        ys = [s.planar.y for s in bundle.sites]
        bbox = (min(xs), min(ys), max(xs), max(ys))
    else:
        bbox = config.mapping.bbox
    for p in config.pollutants:
        entry = specs_doc["pollutants"].get(p, {})
        if not entry.get("feasible", True) or p not in static:
            continue
        spec = _spec_from_entries(entry["entries"], config.expected_signs)
        forest = load_forest(out / f"forest_{p}.json")
        grid = make_grid(
            PlanarPoint(bbox[0], bbox[1]),
            PlanarPoint(bbox[2], bbox[3]),
            config.mapping.resolution,
            bundle.origin,
        )
        predict_static_grid(grid, forest, bundle.index, bundle.elevation, spec)
        write_esri_ascii(out / f"grid_{p}_static.asc", grid_to_elevation_layout(grid, "static"))
        if config.mapping.hour is not None:
            series = rebuild_fusion_series(out, p)
            predict_hourly_grid(grid, series, config.mapping.hour)
            stamp = config.mapping.hour.strftime("%Y%m%dT%H%MZ")
            write_esri_ascii(
                out / f"grid_{p}_hourly_{stamp}.asc", grid_to_elevation_layout(grid, "hourly")
            )
        write_grid_csv(out / f"grid_{p}.csv", grid)
        overlay = [
            (sid, sites_geo.lat, sites_geo.lon, means[p][sid], static[p][sid])
            for sid, sites_geo in ((s.site_id, s.geo) for s in bundle.sites)
            if sid in means.get(p, {}) and sid in static[p]
        ]
        write_sites_overlay_csv(out / f"sites_overlay_{p}.csv", overlay)
        n_edge = sum(1 for c in grid.cells if "edge_effect" in c.flags)
        log.info("map %s: %dx%d cells (%d edge-flagged)", p, grid.n_rows, grid.n_cols, n_edge)


STAGES = ("ingest", "features", "train", "fuse", "diagnose", "map")


def run_stage(name: str, config: RunConfig, out: Path, plots: bool = False) -> None:
    """Execute one stage; any failure aborts with the stage name and cause."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    stage_fns = {
        "ingest": stage_ingest,
        "features": stage_features,
        "train": stage_train,
        "fuse": stage_fuse,
        "diagnose": lambda c, o: stage_diagnose(c, o, plots=plots),
        "map": stage_map,
    }
    try:
        stage_fns[name](config, out)
    except (ValidationError, PipelineError):
        raise
    except Exception as exc:
        raise PipelineError(f"stage {name} failed: {exc}", stage=name) from exc


def run_pipeline(config: RunConfig, out: Path, plots: bool = False) -> dict:
    """Execute every stage in order and write the run manifest."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    started_utc = datetime.now(timezone.utc)
    for name in STAGES:
        run_stage(name, config, out, plots=plots)
    manifest = build_manifest(config, out, started_utc, time.time() - started)
    _write_json(out / F_MANIFEST, manifest)
    return manifest


def build_manifest(config: RunConfig, out: Path, started_utc, wall_clock_s: float) -> dict:
    inputs = {
        name: {"path": str(p), "sha256": _sha256_file(p)}
        for name, p in config.input_paths().items()
    }
    outputs = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != F_MANIFEST:
            outputs[str(p.relative_to(out))] = _sha256_file(p)
    return {
        "artifact_version": __version__,
        "config_path": str(config.path),
        "config_sha256": _sha256_file(config.path),
        "seed": config.seed,
        "approach": config.approach,
        "utc_offset_hours": config.utc_offset_hours,
        "inputs": inputs,
        "outputs": outputs,
        "started_utc": started_utc.strftime("%Y-%m-%dT%H:%M:%SZ"),
        "wall_clock_s": wall_clock_s,
    }


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_predictors_csv(path, table: FeatureTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["site_id", *table.names, "flags"])
        for i, sid in enumerate(table.site_ids):
            w.writerow(
                [sid, *(repr(float(v)) for v in table.values[i]), ";".join(table.flags[sid])]
            )


def _write_json(path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
