import math
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from lurfuse.dataio import HourlyRecord
from lurfuse.errors import DomainError, PipelineError
from lurfuse.features import (
    DEFAULT_BUFFERS,
    FeatureEntry,
    FeatureSpec,
    SignFilterResult,
    build_feature_table,
    correlations_for_spec,
    default_spec,
    extract_predictors,
    filter_by_sign,
    mean_concentrations,
    optimize_buffers,
    pearson,
)
from lurfuse.geo import (
    ElevationGrid,
    GeoPoint,
    PlanarPoint,
    RoadClass,
    RoadSegment,
    SpatialIndex,
    clip_length_in_circle,
    point_to_segment_distance,
)

from oracles import two_pass_mean, two_pass_pearson

UTC = timezone.utc


def seg(points, road_class=RoadClass.OTHER, **kw):
    return RoadSegment(
        id=kw.pop("id", "s"),
        polyline=tuple(PlanarPoint(x, y) for x, y in points),
        road_class=road_class,
        **kw,
    )


def flat_grid(value=300.0, cell=100.0, n=60, origin=(-3000.0, -3000.0)):
    return ElevationGrid(PlanarPoint(*origin), cell, np.full((n, n), value))


class TestExtractPredictors:
    def test_single_major_road_by_definition(self):
        # 500 m of major road fully inside the 1 km buffer, 300 m away
        road = seg(
            [(300.0, -250.0), (300.0, 250.0)],
            road_class=RoadClass.MAJOR,
            truck_aadt=1200.0,
            veh_aadt=40000.0,
        )
        index = SpatialIndex([road])
        spec = default_spec(buffers=[1000.0])
        vec = extract_predictors(
            GeoPoint(34.0, -117.3), PlanarPoint(0.0, 0.0), index, flat_grid(), spec
        )
        assert vec.values["MAJORROADLENGTH_1000"] == pytest.approx(500.0)
        assert vec.values["ROADLENGTH_1000"] == pytest.approx(500.0)
        assert vec.values["DISTINVNEAR1"] == pytest.approx(1.0 / 300.0)
        assert vec.values["TRUCK_AADT"] == 1200.0
        assert vec.values["VEH_AADT"] == 40000.0
        assert vec.values["Elevation"] == pytest.approx(300.0)
        assert vec.values["Lat"] == 34.0
        assert vec.values["Long"] == -117.3
        assert vec.flags == ()

    def test_empty_network_zeroes_and_flags(self):
        index = SpatialIndex([])
        spec = default_spec(buffers=[100.0, 1000.0])
        vec = extract_predictors(
            GeoPoint(34.0, -117.3), PlanarPoint(0.0, 0.0), index, flat_grid(), spec
        )
        for name, v in vec.values.items():
            if name.startswith(("MAJORROADLENGTH", "ROADLENGTH")) or name in (
                "DISTINVNEAR1",
                "TRUCK_AADT",
                "VEH_AADT",
            ):
                assert v == 0.0
        assert "empty_road_network" in vec.flags
        assert "no_major_road" in vec.flags

    def test_distinvnear1_floor_on_road(self):
        road = seg([(-50.0, 0.0), (50.0, 0.0)], road_class=RoadClass.MAJOR)
        index = SpatialIndex([road])
        spec = FeatureSpec((FeatureEntry("DISTINVNEAR1"),))
        vec = extract_predictors(
            GeoPoint(0.0, 0.0), PlanarPoint(0.0, 0.0), index, None, spec
        )
        assert vec.values["DISTINVNEAR1"] == 1.0  # 1 / max(0, 1 m floor)

    def test_matches_indexless_oracles_on_synthetic_city(self):
        rng = np.random.default_rng(21)
        segments = []
        for i in range(10):
            x = -1000.0 + i * 220.0
            segments.append(seg([(x, -1200.0), (x + 30.0, 1200.0)], id=f"v{i}"))
        segments.append(
            seg([(-1500.0, 40.0), (1500.0, -60.0)], road_class=RoadClass.MAJOR, id="hwy",
                truck_aadt=900.0, veh_aadt=30000.0)
        )
        segments.append(
            seg([(-900.0, -1500.0), (-800.0, 1500.0)], road_class=RoadClass.MAJOR, id="art",
                truck_aadt=300.0, veh_aadt=12000.0)
        )
        index = SpatialIndex(segments)
        spec = default_spec()
        grid = flat_grid()
        for _ in range(5):
            p = PlanarPoint(*rng.uniform(-800, 800, size=2))
            vec = extract_predictors(GeoPoint(34.0, -117.3), p, index, grid, spec)
            for b in DEFAULT_BUFFERS:
                all_len = sum(clip_length_in_circle(s, p, b) for s in segments)
                major_len = sum(
                    clip_length_in_circle(s, p, b)
                    for s in segments
                    if s.road_class is RoadClass.MAJOR
                )
                assert vec.values[f"ROADLENGTH_{int(b)}"] == pytest.approx(all_len, rel=1e-9)
                assert vec.values[f"MAJORROADLENGTH_{int(b)}"] == pytest.approx(major_len, rel=1e-9)
            majors = [s for s in segments if s.road_class is RoadClass.MAJOR]
            dists = [point_to_segment_distance(p, s) for s in majors]
            d = min(dists)
            assert vec.values["DISTINVNEAR1"] == pytest.approx(1.0 / max(d, 1.0), rel=1e-9)
            best = majors[int(np.argmin(dists))]
            assert vec.values["TRUCK_AADT"] == best.truck_aadt

    def test_extraction_is_deterministic(self):
        road = seg([(120.0, -300.0), (150.0, 400.0)], road_class=RoadClass.MAJOR,
                   truck_aadt=10.0, veh_aadt=100.0)
        index = SpatialIndex([road])
        spec = default_spec()
        args = (GeoPoint(34.01, -117.29), PlanarPoint(3.5, -7.25), index, flat_grid(), spec)
        v1 = extract_predictors(*args)
        v2 = extract_predictors(*args)
        assert v1.values == v2.values  # bit-identical
        assert v1.flags == v2.flags


def rec(sid, t0, hours, no2=None, o3=None, ws=None, wd=None):
    return HourlyRecord(sid, t0 + timedelta(hours=hours), no2_ppb=no2, o3_ppb=o3,
                        wind_speed_ms=ws, wind_dir_deg=wd)


class TestMeanConcentrations:
    T0 = datetime(2018, 4, 1, tzinfo=UTC)

    def test_simple_mean(self):
        window = (self.T0, self.T0 + timedelta(hours=4))
        records = [rec("a", self.T0, h, no2=v, o3=1.0) for h, v in enumerate([10.0, 20.0, 30.0])]
        sm = mean_concentrations(records, window, completeness_min=0.5)
        assert sm.means["no2"]["a"] == pytest.approx(20.0)

    def test_low_completeness_excluded(self):
        window = (self.T0, self.T0 + timedelta(hours=100))
        records = [rec("a", self.T0, h, no2=5.0, o3=30.0) for h in range(100)]
        records += [rec("b", self.T0, h, no2=9.0, o3=31.0) for h in range(10)]
        sm = mean_concentrations(records, window, completeness_min=0.75)
        assert "b" not in sm.means["no2"]
        assert ("b", "no2", 0.10) in [(s, p, round(c, 6)) for s, p, c in sm.excluded]

    def test_no_qualifying_sites_is_pipeline_error(self):
        window = (self.T0, self.T0 + timedelta(hours=100))
        records = [rec("a", self.T0, h, no2=5.0, o3=3.0) for h in range(10)]
        with pytest.raises(PipelineError):
            mean_concentrations(records, window, completeness_min=0.75)

    def test_matches_two_pass_oracle_on_31_sites(self):
        rng = np.random.default_rng(22)
        window = (self.T0, self.T0 + timedelta(hours=50))
        records = []
        expected = {}
        for i in range(31):
            sid = f"s{i:02d}"
            vals = rng.uniform(0, 40, size=50)
            records += [rec(sid, self.T0, h, no2=float(v), o3=float(v) / 2) for h, v in enumerate(vals)]
            expected[sid] = two_pass_mean(vals)
        sm = mean_concentrations(records, window, completeness_min=0.75)
        for sid, m in expected.items():
            assert sm.means["no2"][sid] == pytest.approx(m, rel=1e-12)

    def test_window_is_half_open(self):
        window = (self.T0, self.T0 + timedelta(hours=2))
        records = [
            rec("a", self.T0, 0, no2=10.0, o3=1.0),
            rec("a", self.T0, 1, no2=20.0, o3=1.0),
            rec("a", self.T0, 2, no2=999.0, o3=1.0),  # at end, excluded
        ]
        sm = mean_concentrations(records, window, completeness_min=0.5)
        assert sm.means["no2"]["a"] == pytest.approx(15.0)


def correlated_column(rng, y, r):
    """A column whose sample Pearson correlation with y is exactly r."""
    n = len(y)
    z = rng.normal(size=n)
    yc = (y - y.mean()) / np.linalg.norm(y - y.mean())
    zc = z - z.mean()
    zc -= yc * np.dot(zc, yc)
    zc /= np.linalg.norm(zc)
    return r * yc + math.sqrt(1 - r * r) * zc


def table_from_columns(site_ids, columns):
    from lurfuse.features import FeatureTable

    names = tuple(columns)
    values = np.column_stack([columns[n] for n in names])
    return FeatureTable(site_ids=tuple(site_ids), names=names, values=values,
                        flags={s: () for s in site_ids})


class TestOptimizeBuffers:
    def setup_method(self):
        self.rng = np.random.default_rng(23)
        self.sites = tuple(f"s{i}" for i in range(20))
        self.y = self.rng.normal(10.0, 3.0, size=20)
        self.means = {s: float(v) for s, v in zip(self.sites, self.y)}

    def spec_with_buffers(self, buffers):
        entries = [FeatureEntry("Elevation")]
        entries += [FeatureEntry("MAJORROADLENGTH", float(b)) for b in buffers]
        return FeatureSpec(tuple(entries))

    def test_highest_correlation_buffer_selected(self):
        buffers = [100.0, 300.0, 1000.0]
        target_r = {100.0: 0.2, 300.0: 0.9, 1000.0: 0.5}
        cols = {"Elevation": self.rng.normal(size=20)}
        for b in buffers:
            cols[f"MAJORROADLENGTH_{int(b)}"] = correlated_column(self.rng, self.y, target_r[b])
        table = table_from_columns(self.sites, cols)
        spec = self.spec_with_buffers(buffers)
        opt = optimize_buffers(table, self.means, spec, "no2")
        assert opt.chosen["MAJORROADLENGTH"] == 300.0
        for b in buffers:
            assert opt.per_family["MAJORROADLENGTH"][b] == pytest.approx(target_r[b], abs=1e-9)
        assert "MAJORROADLENGTH_300" in opt.spec.names
        assert "MAJORROADLENGTH_100" not in opt.spec.names

    def test_constant_family_dropped(self):
        buffers = [100.0, 300.0]
        cols = {
            "Elevation": self.rng.normal(size=20),
            "MAJORROADLENGTH_100": np.full(20, 7.0),
            "MAJORROADLENGTH_300": np.full(20, 7.0),
        }
        table = table_from_columns(self.sites, cols)
        opt = optimize_buffers(table, self.means, self.spec_with_buffers(buffers), "no2")
        assert opt.dropped == ("MAJORROADLENGTH",)
        assert all(not n.startswith("MAJORROADLENGTH") for n in opt.spec.names)

    def test_perfect_small_buffer_wins(self):
        buffers = [24.0, 500.0]
        cols = {
            "Elevation": self.rng.normal(size=20),
            "MAJORROADLENGTH_24": self.y.copy(),  # r = 1
            "MAJORROADLENGTH_500": correlated_column(self.rng, self.y, 0.4),
        }
        table = table_from_columns(self.sites, cols)
        opt = optimize_buffers(table, self.means, self.spec_with_buffers(buffers), "no2")
        assert opt.chosen["MAJORROADLENGTH"] == 24.0

    def test_abs_mode_prefers_strong_negative(self):
        buffers = [100.0, 300.0]
        cols = {
            "Elevation": self.rng.normal(size=20),
            "MAJORROADLENGTH_100": correlated_column(self.rng, self.y, 0.3),
            "MAJORROADLENGTH_300": correlated_column(self.rng, self.y, -0.8),
        }
        table = table_from_columns(self.sites, cols)
        opt_abs = optimize_buffers(table, self.means, self.spec_with_buffers(buffers), "o3", mode="abs")
        assert opt_abs.chosen["MAJORROADLENGTH"] == 300.0
        opt_signed = optimize_buffers(table, self.means, self.spec_with_buffers(buffers), "o3", mode="signed")
        assert opt_signed.chosen["MAJORROADLENGTH"] == 100.0

    def test_invariant_to_buffer_ordering(self):
        buffers = [100.0, 300.0, 1000.0]
        cols = {"Elevation": self.rng.normal(size=20)}
        for b, r in zip(buffers, [0.1, 0.7, 0.3]):
            cols[f"MAJORROADLENGTH_{int(b)}"] = correlated_column(self.rng, self.y, r)
        table = table_from_columns(self.sites, cols)
        spec_fwd = self.spec_with_buffers(buffers)
        spec_rev = self.spec_with_buffers(buffers[::-1])
        a = optimize_buffers(table, self.means, spec_fwd, "no2")
        b = optimize_buffers(table, self.means, spec_rev, "no2")
        assert a.chosen == b.chosen
        assert set(a.spec.names) == set(b.spec.names)

    def test_at_most_one_buffer_per_family(self):
        spec = default_spec()
        cols = {}
        rng = self.rng
        for e in spec.entries:
            cols[e.name] = rng.normal(size=20)
        table = table_from_columns(self.sites, cols)
        opt = optimize_buffers(table, self.means, spec, "no2")
        for family in ("MAJORROADLENGTH", "ROADLENGTH"):
            assert sum(1 for n in opt.spec.names if n.startswith(family)) == 1

    def test_too_few_sites(self):
        table = table_from_columns(("a", "b"), {"Elevation": np.array([1.0, 2.0])})
        with pytest.raises(DomainError):
            optimize_buffers(table, {"a": 1.0, "b": 2.0}, FeatureSpec((FeatureEntry("Elevation"),)), "no2")

    def test_pearson_matches_two_pass_textbook(self):
        rng = np.random.default_rng(24)
        for _ in range(20):
            x = rng.normal(size=40)
            y = rng.normal(size=40)
            assert pearson(x, y) == pytest.approx(two_pass_pearson(x, y), abs=1e-12)


class TestFilterBySign:
    def spec(self, signs=None):
        entries = (
            FeatureEntry("Elevation", expected_sign=(signs or {}).get("Elevation", {})),
            FeatureEntry("DISTINVNEAR1", expected_sign=(signs or {}).get("DISTINVNEAR1", {})),
            FeatureEntry("MAJORROADLENGTH", 300.0,
                         expected_sign=(signs or {}).get("MAJORROADLENGTH", {})),
        )
        return FeatureSpec(entries)

    def test_contradicting_sign_removed(self):
        # the inverse-distance predictor observed negative for NO2
        signs = {"DISTINVNEAR1": {"no2": "+"}, "MAJORROADLENGTH": {"no2": "+"}}
        spec = self.spec(signs)
        corr = {"Elevation": 0.5, "DISTINVNEAR1": -0.2, "MAJORROADLENGTH_300": 0.8}
        result = filter_by_sign(spec, corr, "no2")
        assert result.feasible
        assert "DISTINVNEAR1" not in result.spec.names
        assert ("DISTINVNEAR1", -0.2, "+") in result.removed
        assert "MAJORROADLENGTH_300" in result.spec.names

    def test_no_constraints_unchanged(self):
        spec = self.spec()
        corr = {"Elevation": -0.9, "DISTINVNEAR1": -0.9, "MAJORROADLENGTH_300": -0.9}
        result = filter_by_sign(spec, corr, "no2")
        assert result.feasible
        assert result.spec.names == spec.names
        assert result.removed == ()

    def test_all_violating_is_infeasible(self):
        signs = {
            "Elevation": {"o3": "+"},
            "DISTINVNEAR1": {"o3": "+"},
            "MAJORROADLENGTH": {"o3": "+"},
        }
        spec = self.spec(signs)
        corr = {"Elevation": -0.4, "DISTINVNEAR1": -0.2, "MAJORROADLENGTH_300": -0.8}
        result = filter_by_sign(spec, corr, "o3")
        assert not result.feasible
        assert result.spec is None
        assert len(result.removed) == 3

    def test_subset_and_idempotent(self):
        signs = {"DISTINVNEAR1": {"no2": "+"}, "MAJORROADLENGTH": {"no2": "-"}}
        spec = self.spec(signs)
        corr = {"Elevation": 0.1, "DISTINVNEAR1": -0.5, "MAJORROADLENGTH_300": 0.7}
        once = filter_by_sign(spec, corr, "no2")
        assert set(once.spec.names) <= set(spec.names)
        twice = filter_by_sign(once.spec, corr, "no2")
        assert twice.spec.names == once.spec.names


class TestFeatureSpec:
    def test_duplicate_entries_rejected(self):
        with pytest.raises(DomainError):
            FeatureSpec((FeatureEntry("ROADLENGTH", 100.0), FeatureEntry("ROADLENGTH", 100.0)))

    def test_buffer_required_iff_buffered_family(self):
        with pytest.raises(DomainError):
            FeatureSpec((FeatureEntry("ROADLENGTH"),))
        with pytest.raises(DomainError):
            FeatureSpec((FeatureEntry("Elevation", 100.0),))

    def test_default_spec_shape(self):
        spec = default_spec()
        assert len(spec.entries) == 3 + 2 * len(DEFAULT_BUFFERS) + 3  # 20 features
        assert spec.names[0] == "Elevation"
        assert spec.max_buffer() == 1000.0

    def test_build_feature_table_alignment(self):
        road = seg([(100.0, -200.0), (100.0, 200.0)], road_class=RoadClass.MAJOR,
                   veh_aadt=5000.0, truck_aadt=100.0)
        index = SpatialIndex([road])
        from lurfuse.dataio import Site
        from lurfuse.geo import project

        origin = GeoPoint(34.0, -117.3)
        sites = [
            Site("a", GeoPoint(34.0, -117.3), PlanarPoint(0.0, 0.0)),
            Site("b", GeoPoint(34.001, -117.3), PlanarPoint(0.0, 111.19508)),
        ]
        spec = default_spec(buffers=[200.0])
        table = build_feature_table(sites, index, flat_grid(), spec)
        assert table.site_ids == ("a", "b")
        assert table.names == spec.names
        assert table.values.shape == (2, len(spec.names))
        corr = correlations_for_spec(table, {"a": 1.0, "b": 2.0}, spec)
        assert set(corr) == set(spec.names)
