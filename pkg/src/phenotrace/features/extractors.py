"""Per-day passive sensor features (everything except location)."""

from __future__ import annotations

from datetime import datetime
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

from .registry import (
    APP_CATEGORIES,
    APP_KEYS,
    BATTERY_KEYS,
    BRIGHTNESS_KEYS,
    LIGHT_KEYS,
    NOISE_KEYS,
    SELF_APP_KEYS,
    ExtractionConfig,
)

T = TypeVar("T")

STAT_KEYS = ("total", "mean", "median", "sd", "max", "min")


def stat_block(samples: Iterable[float]) -> dict[str, float]:
    """Total, mean, median, population SD, max and min of a sample.

    An empty sample gives NaN everywhere.
    """
    x = np.asarray(list(samples) if not isinstance(samples, np.ndarray) else samples, dtype=float)
    if x.size == 0:
        return dict.fromkeys(STAT_KEYS, np.nan)
    return {
        "total": float(x.sum()),
        "mean": float(x.mean()),
        "median": float(np.median(x)),
        "sd": float(x.std()),
        "max": float(x.max()),
        "min": float(x.min()),
    }


def night_partition(
    events: Sequence[T], config: ExtractionConfig, when: Callable[[T], datetime] = lambda e: e.timestamp
) -> tuple[list[T], list[T]]:
    """Split events into (day, night) by local wall-clock time."""
    day, night = [], []
    for e in events:
        (night if config.is_night(when(e).time()) else day).append(e)
    return day, night


def step_features(daily_count: int, config: ExtractionConfig | None = None) -> dict[str, float]:
    thresholds = (config or ExtractionConfig()).step_thresholds
    if daily_count < 0:
        raise ValueError("step count must be non-negative")
    out = {"count": float(daily_count)}
    for key, thr in zip(("gt5k", "gt7k", "gt10k"), thresholds):
        out[key] = float(daily_count > thr)
    return out


def _session_block(durations: list[float], apps: list[str]) -> dict[str, float]:
    if not durations:
        return {"count": 0.0, "unique": 0.0, "total_time": 0.0, "mean_time": np.nan, "median_time": np.nan}
    s = stat_block(durations)
    return {
        "count": float(len(durations)),
        "unique": float(len(set(apps))),
        "total_time": s["total"],
        "mean_time": s["mean"],
        "median_time": s["median"],
    }


def app_usage_features(sessions, config: ExtractionConfig) -> dict[str, float]:
    """Session counts and durations by day/night, plus per-category time.

    ``sessions`` are ``AppUsage`` payloads; the night split uses each session's
    start time. Apps missing from the category map (or mapped to ``other``)
    count toward totals and uniques only.
    """
    sessions = list(sessions)
    if not sessions:
        return dict.fromkeys(APP_KEYS, np.nan)
    day, night = night_partition(sessions, config, when=lambda s: s.start)
    out: dict[str, float] = {}
    for part, items in (("day", day), ("night", night)):
        block = _session_block([s.duration_s for s in items], [s.app_id for s in items])
        out.update({f"{part}_{k}": v for k, v in block.items()})
    per_cat = dict.fromkeys(APP_CATEGORIES, 0.0)
    for s in sessions:
        cat = config.app_category_map.get(s.app_id, "other")
        if cat in per_cat:
            per_cat[cat] += s.duration_s
    mapped = sum(per_cat.values())
    for cat in APP_CATEGORIES:
        out[f"time_{cat}"] = per_cat[cat]
        out[f"pct_{cat}"] = 100.0 * per_cat[cat] / mapped if mapped > 0 else np.nan
    return {k: out[k] for k in APP_KEYS}


def battery_features(readings, config: ExtractionConfig) -> dict[str, float]:
    """Battery level summary, charge onsets and discharge rate for one day.

    ``readings`` are ``(timestamp, Battery)`` pairs in chronological order. A
    charge is counted whenever a reading is charging and the previous one (if
    any) was not. Discharge per hour sums level drops between consecutive
    non-charging readings and divides by the observed span in hours.
    """
    readings = list(readings)
    if not readings:
        return dict.fromkeys(BATTERY_KEYS, np.nan)
    times = [t for t, _ in readings]
    levels = np.array([b.level_pct for _, b in readings], dtype=float)
    charging = [b.charging for _, b in readings]
    charges = sum(1 for i, c in enumerate(charging) if c and (i == 0 or not charging[i - 1]))
    night_count = sum(config.is_night(t.time()) for t in times)
    out = {
        "min_level": float(levels.min()),
        "max_level": float(levels.max()),
        "mean_level": float(levels.mean()),
        "median_level": float(np.median(levels)),
        "charges": float(charges),
        "night_count": float(night_count),
        "use_per_hour": np.nan,
        "minutes_below_20": np.nan,
    }
    if len(readings) > 1:
        hours = (times[-1] - times[0]).total_seconds() / 3600.0
        drop = 0.0
        below = 0.0
        for i in range(1, len(readings)):
            if not charging[i - 1] and not charging[i]:
                drop += max(0.0, levels[i - 1] - levels[i])
            if levels[i - 1] < config.low_battery_pct:
                below += (times[i] - times[i - 1]).total_seconds() / 60.0
        out["use_per_hour"] = drop / hours if hours > 0 else np.nan
        out["minutes_below_20"] = below
    return {k: out[k] for k in BATTERY_KEYS}


def _partitioned_stats(readings, config: ExtractionConfig, keys: Sequence[str]) -> dict[str, float]:
    """``readings`` are ``(timestamp, value)`` pairs."""
    readings = list(readings)
    if not readings:
        return dict.fromkeys(keys, np.nan)
    day, night = night_partition(readings, config, when=lambda r: r[0])
    blocks = {"day": stat_block([v for _, v in day]), "night": stat_block([v for _, v in night])}
    out = {}
    for key in keys:
        part, stat = key.split("_", 1)
        out[key] = blocks[part][stat]
    return out


def ambient_light_features(readings, config: ExtractionConfig) -> dict[str, float]:
    return _partitioned_stats(readings, config, LIGHT_KEYS)


def noise_features(readings, config: ExtractionConfig) -> dict[str, float]:
    return _partitioned_stats(readings, config, NOISE_KEYS)


def brightness_features(readings, config: ExtractionConfig) -> dict[str, float]:
    return _partitioned_stats(readings, config, BRIGHTNESS_KEYS)


def self_app_features(starts: Iterable[datetime], config: ExtractionConfig) -> dict[str, float]:
    """First/last local hour of the app's own sessions and night session count."""
    starts = sorted(starts)
    if not starts:
        return dict.fromkeys(SELF_APP_KEYS, np.nan)
    return {
        "first_hour": float(starts[0].hour),
        "last_hour": float(starts[-1].hour),
        "night_count": float(sum(config.is_night(s.time()) for s in starts)),
    }
