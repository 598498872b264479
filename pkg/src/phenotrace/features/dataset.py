"""Turn a cohort into cumulative-median day rows, plus fold normalisation."""

from __future__ import annotations

import csv
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from ..cohort import (
    STUDY_DAYS,
    AmbientLight,
    AppUsage,
    Battery,
    Cohort,
    Location,
    Noise,
    Participant,
    RiskLabels,
    ScreenBrightness,
    SelfAppUsage,
    StepDay,
)
from . import extractors as ex
from .mobility import infer_home, location_day_features
from .registry import GROUP_KEYS, ExtractionConfig, FeatureRegistry, default_registry


def cumulative_median(series: Sequence[float]) -> np.ndarray:
    """Median of all non-missing values up to and including each position.

    Missing is ``NaN``. Accepts a 1-D series or a (days, features) matrix.
    """
    x = np.asarray(series, dtype=float)
    out = np.full_like(x, np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for d in range(x.shape[0]):
            out[d] = np.nanmedian(x[: d + 1], axis=0)
    return out


@dataclass(frozen=True)
class DayFeatureRow:
    participant_id: str
    day_index: int
    values: np.ndarray


@dataclass
class Dataset:
    """Rows of per-day features for many participants.

    ``X`` holds raw (unnormalised) values with ``NaN`` for missing.
    """

    X: np.ndarray
    participant_ids: np.ndarray
    day_index: np.ndarray
    registry: FeatureRegistry
    participants: dict[str, Participant] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.X)

    def rows(self) -> Iterator[DayFeatureRow]:
        for pid, d, v in zip(self.participant_ids, self.day_index, self.X):
            yield DayFeatureRow(str(pid), int(d), v)

    @property
    def users(self) -> list[str]:
        """Participants with at least one row, in first-appearance order."""
        return list(dict.fromkeys(self.participant_ids.tolist()))

    def labels(self, pid: str) -> RiskLabels:
        return self.participants[pid].labels

    def user_labels(self, outcome: str, users: Sequence[str] | None = None) -> np.ndarray:
        users = self.users if users is None else users
        return np.array([self.participants[u].labels.get(outcome) for u in users], dtype=int)

    def row_labels(self, outcome: str) -> np.ndarray:
        lookup = {u: self.participants[u].labels.get(outcome) for u in self.users}
        return np.array([lookup[p] for p in self.participant_ids], dtype=int)

    def user_scores(self, outcome: str, users: Sequence[str] | None = None) -> np.ndarray:
        users = self.users if users is None else users
        return np.array([self.participants[u].score(outcome) for u in users], dtype=float)

    def select_columns(self, indices: Sequence[int]) -> "Dataset":
        idx = list(indices)
        return Dataset(self.X[:, idx], self.participant_ids, self.day_index, self.registry.subset(idx), self.participants)

    def select_users(self, users: Sequence[str]) -> "Dataset":
        mask = np.isin(self.participant_ids, list(users))
        return Dataset(self.X[mask], self.participant_ids[mask], self.day_index[mask], self.registry, self.participants)

    def user_mask(self, user: str) -> np.ndarray:
        return self.participant_ids == user


def _day_of(part: Participant, local_date) -> int:
    return (local_date - part.study_start).days


def _raw_days(cohort: Cohort, part: Participant, registry: FeatureRegistry, config: ExtractionConfig) -> np.ndarray:
    """(STUDY_DAYS, n_features) matrix of raw, un-aggregated daily values."""
    pid = part.participant_id
    by_day: dict[int, dict[str, list]] = defaultdict(lambda: defaultdict(list))
    locations = []
    for e in sorted(cohort.passive_by_participant[pid], key=lambda e: e.timestamp):
        d = _day_of(part, e.local_date)
        p = e.payload
        if isinstance(p, Location):
            locations.append((d, e.timestamp, p))
        elif isinstance(p, StepDay):
            by_day[d]["steps"].append(p.count)
        elif isinstance(p, Battery):
            by_day[d]["battery"].append((e.timestamp, p))
        elif isinstance(p, AppUsage):
            by_day[d]["app_usage"].append(p)
        elif isinstance(p, AmbientLight):
            by_day[d]["ambient_light"].append((e.timestamp, p.lux))
        elif isinstance(p, Noise):
            by_day[d]["noise"].append((e.timestamp, p.db))
        elif isinstance(p, ScreenBrightness):
            by_day[d]["screen_brightness"].append((e.timestamp, p.level))
        elif isinstance(p, SelfAppUsage):
            by_day[d]["self_app"].append(p.start)

    group_values: list[dict[str, dict[str, float]]] = [{} for _ in range(STUDY_DAYS)]
    for d in range(STUDY_DAYS):
        items = by_day.get(d, {})
        if items.get("steps"):
            group_values[d]["steps"] = ex.step_features(items["steps"][-1], config)
        if items.get("battery"):
            group_values[d]["battery"] = ex.battery_features(items["battery"], config)
        if items.get("app_usage"):
            group_values[d]["app_usage"] = ex.app_usage_features(items["app_usage"], config)
        if items.get("ambient_light"):
            group_values[d]["ambient_light"] = ex.ambient_light_features(items["ambient_light"], config)
        if items.get("noise"):
            group_values[d]["noise"] = ex.noise_features(items["noise"], config)
        if items.get("screen_brightness"):
            group_values[d]["screen_brightness"] = ex.brightness_features(items["screen_brightness"], config)
        if items.get("self_app"):
            group_values[d]["self_app"] = ex.self_app_features(items["self_app"], config)

    if locations:
        # home for day d only sees points up to day d, so rows never use the future
        all_pts = np.array([[p.lat, p.lon] for _, _, p in locations])
        all_night = np.array([config.is_night(t.time()) for _, t, _ in locations])
        days = np.array([d for d, _, _ in locations])
        for d in np.unique(days):
            today = days == d
            if config.home is not None:
                home = config.home
            else:
                upto = days <= d
                home = infer_home(all_pts[upto], all_night[upto], config)
            group_values[d]["location"] = location_day_features(all_pts[today], all_night[today], home, config)

    active = np.full((STUDY_DAYS, len(registry)), np.nan)
    index = {(f.sensor_group, f.extractor_id): i for i, f in enumerate(registry)}
    for r in cohort.active_by_participant[pid]:
        i = index.get(("active", r.question))
        if i is not None:
            active[_day_of(part, r.date), i] = r.value
    raw = active
    for d in range(STUDY_DAYS):
        for group, values in group_values[d].items():
            for key in GROUP_KEYS[group]:
                i = index.get((group, key))
                if i is not None:
                    raw[d, i] = values[key]
    return raw


def participant_rows(cohort: Cohort, part: Participant, registry: FeatureRegistry, config: ExtractionConfig):
    """Cumulative-median rows for one participant: ``(day_indices, matrix)``."""
    raw = _raw_days(cohort, part, registry, config)
    has_data = ~np.all(np.isnan(raw), axis=1)
    agg = cumulative_median(raw)
    days = np.flatnonzero(has_data)
    return days, agg[days]


def build_dataset(
    cohort: Cohort, registry: FeatureRegistry | None = None, config: ExtractionConfig | None = None
) -> Dataset:
    """Extract every participant-day with any data, aggregated by cumulative median."""
    registry = registry or default_registry()
    config = config or ExtractionConfig()
    pids, days, blocks = [], [], []
    for part in sorted(cohort.participants, key=lambda p: p.participant_id):
        d, rows = participant_rows(cohort, part, registry, config)
        pids.extend([part.participant_id] * len(d))
        days.extend(d.tolist())
        blocks.append(rows)
    X = np.vstack(blocks) if blocks else np.empty((0, len(registry)))
    return Dataset(
        X=X,
        participant_ids=np.array(pids, dtype=object),
        day_index=np.array(days, dtype=int),
        registry=registry,
        participants=dict(cohort.by_id),
    )


# --------------------------------------------------------------------------
# normalisation


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    sd: np.ndarray
    median: np.ndarray
    clip: float | None = None

    @property
    def constant(self) -> np.ndarray:
        return self.sd == 0


def fit_norm(X: np.ndarray, clip: float | None = None) -> NormStats:
    """Training-fold statistics: median for imputation, then mean and population SD.

    Columns that are entirely missing impute to 0 and are treated as constant.
    ``clip`` bounds the z-scores produced by ``apply_norm`` to ``[-clip, clip]``;
    sparse sensors otherwise give their few observed users extreme values.
    """
    if clip is not None and not clip > 0:
        raise ValueError("clip must be positive")
    X = np.asarray(X, dtype=float)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        median = np.nanmedian(X, axis=0)
    median = np.where(np.isnan(median), 0.0, median)
    filled = np.where(np.isnan(X), median, X)
    mean = filled.mean(axis=0)
    sd = filled.std(axis=0)
    # exactly-constant columns can pick up rounding noise in std
    sd = np.where(np.ptp(filled, axis=0) == 0, 0.0, sd)
    return NormStats(mean=mean, sd=sd, median=median, clip=clip)


def apply_norm(X: np.ndarray, stats: NormStats) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    filled = np.where(np.isnan(X), stats.median, X)
    safe_sd = np.where(stats.constant, 1.0, stats.sd)
    Z = (filled - stats.mean) / safe_sd
    Z[:, stats.constant] = 0.0
    if stats.clip is not None:
        np.clip(Z, -stats.clip, stats.clip, out=Z)
    return Z


def correlation_matrix(X: np.ndarray) -> np.ndarray:
    """Pearson correlation over pairwise-complete observations; diagonal is 1."""
    X = np.asarray(X, dtype=float)
    if X.shape[0] < 2:
        raise ValueError("need at least two rows")
    k = X.shape[1]
    R = np.eye(k)
    ok = ~np.isnan(X)
    for i in range(k):
        for j in range(i + 1, k):
            both = ok[:, i] & ok[:, j]
            a, b = X[both, i], X[both, j]
            r = np.nan
            if len(a) >= 2:
                a = a - a.mean()
                b = b - b.mean()
                denom = math.sqrt(float(a @ a) * float(b @ b))
                if denom > 0:
                    r = float(a @ b) / denom
            R[i, j] = R[j, i] = r
    return R


# --------------------------------------------------------------------------
# CSV


def _fmt(v: float) -> str:
    return "" if np.isnan(v) else repr(float(v))


def write_features_csv(dataset: Dataset, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["participant_id", "day_index", *dataset.registry.names])
        for pid, d, row in zip(dataset.participant_ids, dataset.day_index, dataset.X):
            w.writerow([pid, int(d), *map(_fmt, row)])
    return path


def read_features_csv(path) -> tuple[np.ndarray, np.ndarray, list[str], np.ndarray]:
    """Returns ``(participant_ids, day_index, names, X)``."""
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        pids, days, rows = [], [], []
        for rec in r:
            pids.append(rec[0])
            days.append(int(rec[1]))
            rows.append([float(v) if v else np.nan for v in rec[2:]])
    X = np.array(rows, dtype=float).reshape(len(rows), len(header) - 2)
    return np.array(pids, dtype=object), np.array(days, dtype=int), header[2:], X
