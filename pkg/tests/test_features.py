import math
import statistics
from collections import Counter
from datetime import date, datetime, time, timedelta, timezone

import numpy as np
import pytest

from phenotrace.cohort import (
    ACTIVE_QUESTIONS,
    AppUsage,
    Battery,
    Cohort,
    Location,
    Participant,
    PassiveEvent,
    SensorKind,
    StepDay,
)
from phenotrace.features import ExtractionConfig, apply_norm, build_dataset, default_registry, fit_norm
from phenotrace.features.dataset import correlation_matrix, cumulative_median, participant_rows
from phenotrace.features.extractors import (
    app_usage_features,
    battery_features,
    noise_features,
    self_app_features,
    stat_block,
    step_features,
)
from phenotrace.features.mobility import (
    home_features,
    infer_home,
    location_day_features,
    location_entropy,
    radius_of_gyration,
)
from phenotrace.features.registry import LOCATION_KEYS, FeatureRegistry

R_EARTH = 6_371_008.8
M_PER_DEG = math.pi * R_EARTH / 180.0
CFG = ExtractionConfig()
UTC = timezone.utc


def hav(a, b):
    """Independent scalar haversine (meters)."""
    (la1, lo1), (la2, lo2) = a, b
    p1, p2 = math.radians(la1), math.radians(la2)
    h = math.sin((p2 - p1) / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(math.radians(lo2 - lo1) / 2) ** 2
    return 2 * R_EARTH * math.asin(math.sqrt(min(1.0, h)))


def ts(h, m=0, day=4):
    return datetime(2024, 3, day, h, m, tzinfo=UTC)


# ---------------------------------------------------------------- registry


def test_default_registry_shape_and_names():
    reg = default_registry()
    assert len(reg) == 97
    assert reg.names[:13] == list(ACTIVE_QUESTIONS)
    assert len(set(reg.names)) == 97
    counts = Counter(reg.groups)
    assert counts == {"active": 13, "ambient_light": 8, "app_usage": 30, "noise": 10, "battery": 8,
                      "location": 13, "self_app": 3, "screen_brightness": 8, "steps": 4}
    for name in ("loc_entropy", "loc_radius_of_gyration", "steps_gt5k", "app_pct_social_media", "light_night_mean"):
        assert name in reg.names


def test_registry_round_trip_and_hash():
    reg = default_registry()
    again = FeatureRegistry.from_dict(reg.to_dict())
    assert again == reg and again.hash() == reg.hash()
    assert reg.subset(range(5)).hash() != reg.hash()


def test_extraction_config_validation():
    with pytest.raises(ValueError):
        ExtractionConfig(night_start=time(1), night_end=time(1))
    with pytest.raises(ValueError):
        ExtractionConfig(step_thresholds=(5000, 5000, 10000))
    cfg = ExtractionConfig(home=(51.5, -0.1))
    assert ExtractionConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- extractors


def test_stat_block_examples():
    assert stat_block([2, 4]) == {"total": 6, "mean": 3, "median": 3, "sd": 1, "max": 4, "min": 2}
    assert stat_block([5]) == {"total": 5, "mean": 5, "median": 5, "sd": 0, "max": 5, "min": 5}
    assert all(math.isnan(v) for v in stat_block([]).values())


def test_stat_block_oracle(rng):
    for _ in range(1000):
        xs = rng.normal(50, 20, int(rng.integers(1, 30))).tolist()
        got = stat_block(xs)
        assert got["total"] == pytest.approx(math.fsum(xs), rel=1e-9, abs=1e-9)
        assert got["mean"] == pytest.approx(statistics.fmean(xs), rel=1e-9, abs=1e-9)
        assert got["median"] == statistics.median(xs)
        assert got["sd"] == pytest.approx(statistics.pstdev(xs), rel=1e-9, abs=1e-9)
        assert got["max"] == max(xs) and got["min"] == min(xs)


@pytest.mark.parametrize("t,night", [(time(23), True), (time(12), False), (time(22), True), (time(6), False),
                                     (time(5, 59), True)])
def test_night_window_boundaries(t, night):
    assert CFG.is_night(t) is night


@pytest.mark.parametrize("count,expected", [(7500, (7500, 1, 1, 0)), (0, (0, 0, 0, 0)), (10000, (10000, 1, 1, 0))])
def test_step_features(count, expected):
    out = step_features(count)
    assert (out["count"], out["gt5k"], out["gt7k"], out["gt10k"]) == expected


def test_app_usage_two_sessions():
    s = [AppUsage("com.whatsapp", ts(10), 60.0), AppUsage("com.whatsapp", ts(11), 60.0)]
    out = app_usage_features(s, CFG)
    assert (out["day_count"], out["day_unique"], out["day_total_time"], out["day_mean_time"],
            out["day_median_time"]) == (2, 1, 120, 60, 60)
    assert out["night_count"] == 0


def test_app_usage_single_category_percentage():
    out = app_usage_features([AppUsage("com.instagram.android", ts(12), 30.0)], CFG)
    assert out["pct_social_media"] == 100.0
    assert out["pct_news"] == 0.0


def test_app_usage_recount(rng):
    apps = list(CFG.app_category_map) + ["unknown.app"]
    sessions = [AppUsage(apps[int(rng.integers(len(apps)))], ts(int(rng.integers(0, 24)), int(rng.integers(60))),
                         float(rng.uniform(1, 600))) for _ in range(40)]
    out = app_usage_features(sessions, CFG)
    night = [s for s in sessions if s.start.hour >= 22 or s.start.hour < 6]
    day = [s for s in sessions if s not in night]
    assert out["night_count"] == len(night) and out["day_count"] == len(day)
    assert out["day_unique"] == len({s.app_id for s in day})
    assert out["night_total_time"] == pytest.approx(sum(s.duration_s for s in night))
    cat_time = Counter()
    for s in sessions:
        cat = CFG.app_category_map.get(s.app_id)
        if cat and cat != "other":
            cat_time[cat] += s.duration_s
    mapped = sum(cat_time.values())
    for cat, secs in cat_time.items():
        assert out[f"time_{cat}"] == pytest.approx(secs)
        assert out[f"pct_{cat}"] == pytest.approx(100 * secs / mapped)


def test_battery_discharge_rate():
    readings = [(ts(10), Battery(100, False)), (ts(11), Battery(95, False)), (ts(12), Battery(90, False))]
    out = battery_features(readings, CFG)
    assert out["use_per_hour"] == pytest.approx(5.0)
    assert out["charges"] == 0


def test_battery_constant_and_single():
    flat = battery_features([(ts(h), Battery(70, False)) for h in (8, 9, 10)], CFG)
    assert flat["charges"] == 0 and flat["use_per_hour"] == 0
    one = battery_features([(ts(9), Battery(40, False))], CFG)
    assert one["min_level"] == one["max_level"] == one["mean_level"] == one["median_level"] == 40
    assert math.isnan(one["use_per_hour"])


def test_battery_charge_onsets():
    flags = [False, True, True, False, True]
    out = battery_features([(ts(8 + i), Battery(50, c)) for i, c in enumerate(flags)], CFG)
    assert out["charges"] == 2


def test_noise_single_daytime_reading():
    out = noise_features([(ts(12), 40.0)], CFG)
    assert (out["day_total"], out["day_mean"], out["day_median"], out["day_sd"], out["day_max"]) == (40, 40, 40, 0, 40)
    assert all(math.isnan(out[k]) for k in out if k.startswith("night"))


def test_noise_matches_stat_block(rng):
    readings = [(ts(int(rng.integers(24))), float(rng.normal(50, 8))) for _ in range(50)]
    out = noise_features(readings, CFG)
    day = [v for t, v in readings if CFG.is_night(t.time()) is False]
    ref = stat_block(day)
    for k in ("total", "mean", "median", "sd", "max"):
        assert out[f"day_{k}"] == ref[k]


def test_self_app():
    out = self_app_features([ts(23, 30), ts(8)], CFG)
    assert out == {"first_hour": 8, "last_hour": 23, "night_count": 1}


# ---------------------------------------------------------------- mobility


def test_radius_of_gyration_examples():
    assert radius_of_gyration([(51.5, -0.1)]) == 0
    assert radius_of_gyration([(51.5, -0.1)] * 4) == 0
    dlon = 200.0 / (M_PER_DEG * math.cos(math.radians(10.0)))
    assert radius_of_gyration([(10.0, 0.0), (10.0, dlon)]) == pytest.approx(100.0, abs=0.1)
    assert math.isnan(radius_of_gyration([]))


def test_radius_of_gyration_oracle(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 15))
        pts = np.column_stack([rng.uniform(-60, 60, 1) + rng.normal(0, 0.05, n),
                               rng.uniform(-170, 170, 1) + rng.normal(0, 0.05, n)])
        c = (sum(p[0] for p in pts) / n, sum(p[1] for p in pts) / n)
        ref = math.sqrt(sum(hav(p, c) ** 2 for p in pts) / n)
        assert radius_of_gyration(pts) == pytest.approx(ref, rel=1e-9, abs=1e-9)


def test_location_entropy_examples():
    assert location_entropy([(51.5, -0.1)] * 5) == 0
    pts = [(51.5, -0.1), (51.6, -0.1), (51.5, -0.2), (51.6, -0.2)] * 3
    assert location_entropy(pts) == pytest.approx(math.log(4), abs=1e-12)
    assert math.isnan(location_entropy([]))


def test_location_entropy_oracle(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        pts = np.column_stack([51.5 + rng.integers(0, 4, n) * 0.001 + rng.uniform(-4e-4, 4e-4, n),
                               -0.1 + rng.integers(0, 3, n) * 0.001 + rng.uniform(-4e-4, 4e-4, n)])
        cells = Counter((round(a, 3), round(b, 3)) for a, b in pts)
        ref = -sum(c / n * math.log(c / n) for c in cells.values())
        assert location_entropy(pts) == pytest.approx(ref, rel=1e-9, abs=1e-12)


def test_home_features_examples():
    home = (51.5, -0.1)
    at_home = home_features([home] * 3, [True, False, False], home)
    assert at_home == {"max_home_distance": 0, "mean_home_distance": 0, "median_home_distance": 0,
                       "time_at_home": 1.0, "night_movement": 0}
    far = (51.5 + 500 / M_PER_DEG, -0.1)
    one = home_features([far], [False], home)
    for k in ("max_home_distance", "mean_home_distance", "median_home_distance"):
        assert one[k] == pytest.approx(500, abs=0.5)
    b = (51.5 + 300 / M_PER_DEG, -0.1)
    assert home_features([home, b], [True, True], home)["night_movement"] == pytest.approx(300, abs=0.5)
    assert all(math.isnan(v) for v in home_features([home], [True], None).values())


def test_infer_home_rules():
    a, b = (51.5001, -0.1001), (51.6001, -0.2001)
    assert infer_home([a] * 3, [True] * 3) == pytest.approx(a)
    pts = [a] * 10 + [b] * 2
    assert infer_home(pts, [True] * 12) == pytest.approx(a)
    tie = [b, a, b, a]
    assert infer_home(tie, [True] * 4) == pytest.approx(b)
    # day points ignored when any night point exists
    assert infer_home([a, a, a, b], [False, False, False, True]) == pytest.approx(b)
    # no night points: modal cell over everything
    assert infer_home([a, a, b], [False] * 3) == pytest.approx(a)
    assert infer_home([], None) is None


def test_location_day_features():
    p = (51.5, -0.1)
    out = location_day_features([p], [False], p)
    assert list(out) == list(LOCATION_KEYS)
    assert out["total_distance"] == 0 and out["location_count"] == 1 and out["entropy"] == 0
    d = 0.002
    square = [(51.5, -0.1), (51.5 + d, -0.1), (51.5 + d, -0.1 + d), (51.5, -0.1 + d)]
    ref = sum(hav(square[i], square[i + 1]) for i in range(3))
    assert location_day_features(square, [False] * 4, p)["total_distance"] == pytest.approx(ref, rel=1e-9)
    assert all(math.isnan(v) for v in location_day_features([], [], p).values())


# ---------------------------------------------------------------- aggregation


def test_cumulative_median_examples():
    assert cumulative_median([3, 9, 6]).tolist() == [3, 6, 6]
    assert cumulative_median([5]).tolist() == [5]
    assert cumulative_median([4, np.nan, 10, 2]).tolist() == [4, 4, 7, 4]
    assert np.isnan(cumulative_median([np.nan, 1])[0])


def test_cumulative_median_oracle(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 15))
        x = rng.integers(0, 20, n).astype(float)
        x[rng.random(n) < 0.3] = np.nan
        got = cumulative_median(x)
        for d in range(n):
            seen = [v for v in x[: d + 1] if not math.isnan(v)]
            if seen:
                assert got[d] == statistics.median(seen)
            else:
                assert math.isnan(got[d])


def _participant(pid, sensors):
    return Participant(pid, 16.0, "male", "android", 10, 20, 0, 1.0, frozenset(sensors), date(2024, 3, 4))


def test_identical_days_give_identical_rows():
    part = _participant("p1", [SensorKind.STEPS])
    events = [PassiveEvent("p1", datetime(2024, 3, 4 + d, 20, tzinfo=UTC), StepDay(date(2024, 3, 4 + d), 4000))
              for d in range(14)]
    days, rows = participant_rows(Cohort((part,), (), tuple(events)), part, default_registry(), CFG)
    assert list(days) == list(range(14))
    assert np.array_equal(rows, np.repeat(rows[:1], 14, axis=0), equal_nan=True)


def test_disabled_sensor_features_missing(small_cohort):
    cohort, _ = small_cohort
    reg = default_registry()
    ds = build_dataset(cohort, reg, CFG)
    assert ds.X.shape[1] == len(reg)
    for pid, part in ds.participants.items():
        mask = ds.user_mask(pid)
        for kind, group in ((SensorKind.LOCATION, "location"), (SensorKind.STEPS, "steps"),
                            (SensorKind.BATTERY, "battery")):
            if kind not in part.enabled_sensors:
                assert np.isnan(ds.X[np.ix_(mask, reg.group_indices(group))]).all()


def test_end_to_end_recomputation(small_cohort):
    """Selected cells of three participants recomputed straight from raw events."""
    cohort, _ = small_cohort
    reg = default_registry()
    ds = build_dataset(cohort, reg, CFG)
    checked = 0
    for part in cohort.participants[:3]:
        pid = part.participant_id
        rows = ds.X[ds.user_mask(pid)]
        days = ds.day_index[ds.user_mask(pid)]
        raw = {name: [np.nan] * 14 for name in ("mood", "steps_count", "loc_entropy", "battery_mean_level")}
        for r in cohort.active:
            if r.participant_id == pid and r.question == "mood":
                raw["mood"][(r.date - part.study_start).days] = r.value
        locs, batt = {}, {}
        for e in cohort.passive:
            if e.participant_id != pid:
                continue
            d = (e.local_date - part.study_start).days
            if isinstance(e.payload, StepDay):
                raw["steps_count"][d] = e.payload.count
            elif isinstance(e.payload, Location):
                locs.setdefault(d, []).append((round(e.payload.lat, 3), round(e.payload.lon, 3)))
            elif isinstance(e.payload, Battery):
                batt.setdefault(d, []).append(e.payload.level_pct)
        for d, cells in locs.items():
            n = len(cells)
            raw["loc_entropy"][d] = -sum(c / n * math.log(c / n) for c in Counter(cells).values())
        for d, levels in batt.items():
            raw["battery_mean_level"][d] = statistics.fmean(levels)
        for name, series in raw.items():
            col = rows[:, reg.index(name)]
            for k, d in enumerate(days):
                seen = [v for v in series[: d + 1] if not math.isnan(v)]
                if seen:
                    assert col[k] == pytest.approx(statistics.median(seen), rel=1e-9, abs=1e-12)
                    checked += 1
                else:
                    assert math.isnan(col[k])
    assert checked > 50


# ---------------------------------------------------------------- normalisation


def test_norm_z_score_example():
    X = np.array([[8.0], [12.0], [14.0], [6.0]])  # mean 10, population sd 3.16
    stats = fit_norm(np.array([[8.0], [12.0]]))  # mean 10, sd 2
    assert apply_norm(np.array([[14.0]]), stats)[0, 0] == 2.0
    assert fit_norm(X).sd[0] == pytest.approx(math.sqrt(10))


def test_norm_all_missing_column_imputes_zero():
    X = np.array([[1.0, np.nan], [2.0, np.nan], [3.0, np.nan]])
    Z = apply_norm(X, fit_norm(X))
    assert np.array_equal(Z[:, 1], np.zeros(3))


def test_norm_uses_training_median_for_missing():
    train = np.array([[1.0], [2.0], [10.0]])
    stats = fit_norm(train)
    Z = apply_norm(np.array([[np.nan]]), stats)
    assert Z[0, 0] == pytest.approx((2.0 - stats.mean[0]) / stats.sd[0])


def test_norm_random_matrix(rng):
    X = rng.normal(5, 3, (200, 6))
    Z = apply_norm(X, fit_norm(X))
    assert np.allclose(Z.mean(0), 0, atol=1e-9)
    assert np.allclose(Z.std(0), 1, atol=1e-9)


def test_norm_clip():
    X = np.r_[np.zeros(99), 100.0][:, None]
    stats = fit_norm(X, clip=3.0)
    Z = apply_norm(X, stats)
    assert Z.max() == 3.0
    assert np.abs(apply_norm(X, fit_norm(X))).max() > 9
    with pytest.raises(ValueError):
        fit_norm(X, clip=0)


# ---------------------------------------------------------------- correlation


def test_correlation_examples(rng):
    x = rng.normal(size=50)
    R = correlation_matrix(np.column_stack([x, x, -x]))
    assert R[0, 1] == pytest.approx(1.0) and R[0, 2] == pytest.approx(-1.0)
    assert np.all(np.diag(R) == 1.0)


def test_correlation_oracle(rng):
    for _ in range(1000):
        n = int(rng.integers(3, 25))
        X = rng.normal(size=(n, 3))
        X[:, 1] += 0.5 * X[:, 0]
        X[rng.random((n, 3)) < 0.15] = np.nan
        R = correlation_matrix(X)
        for i in range(3):
            for j in range(i + 1, 3):
                ok = ~np.isnan(X[:, i]) & ~np.isnan(X[:, j])
                a, b = X[ok, i].tolist(), X[ok, j].tolist()
                if len(a) < 2 or statistics.pstdev(a) == 0 or statistics.pstdev(b) == 0:
                    assert math.isnan(R[i, j])
                    continue
                ref = statistics.correlation(a, b)
                assert R[i, j] == pytest.approx(ref, rel=1e-9, abs=1e-12)
                assert R[j, i] == R[i, j]
