"""Cohort domain types, line-delimited ingestion, and risk labelling.

A cohort is three files of JSON lines (participants, active responses,
passive events). Every line carries ``"v": 1``. Invalid lines are rejected
and counted, never fatal.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import ClassVar, Iterable, Iterator, Union

import numpy as np

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STUDY_DAYS = 14

SDQ_THRESHOLD = 16
SCI_THRESHOLD = 16
SI_THRESHOLD = 1
ED15_THRESHOLD = 2.69

OUTCOMES = ("sdq", "insomnia", "suicidal", "eating")


class SensorKind(str, Enum):
    LOCATION = "location"
    STEPS = "steps"
    BATTERY = "battery"
    APP_USAGE = "app_usage"
    AMBIENT_LIGHT = "ambient_light"
    NOISE = "noise"
    SCREEN_BRIGHTNESS = "screen_brightness"
    SELF_APP = "self_app"


ANDROID_ONLY = frozenset({SensorKind.AMBIENT_LIGHT, SensorKind.APP_USAGE, SensorKind.NOISE})
IOS_ONLY = frozenset({SensorKind.SCREEN_BRIGHTNESS})

ACTIVE_QUESTIONS = (
    "mood",
    "sleep_quality",
    "loneliness",
    "confidence",
    "motivation",
    "productivity",
    "energy",
    "sociability",
    "self_care",
    "hopefulness",
    "negative_thinking",
    "racing_thoughts",
    "irritability",
)

GENDERS = ("female", "male", "other")
PLATFORMS = ("ios", "android")


def allowed_sensors(platform: str) -> frozenset[SensorKind]:
    """Sensor kinds that a device on ``platform`` can legally report."""
    everything = frozenset(SensorKind)
    if platform == "ios":
        return everything - ANDROID_ONLY
    if platform == "android":
        return everything - IOS_ONLY
    raise ValueError(f"unknown platform {platform!r}")


# --------------------------------------------------------------------------
# labelling


def label_sdq(sdq_total: int) -> bool:
    return sdq_total >= SDQ_THRESHOLD


def label_insomnia(sci_total: int) -> bool:
    # lower SCI means worse sleep; "<= 16" and "< 17" coincide on integers
    return sci_total <= SCI_THRESHOLD


def label_suicidal(si_frequency: int) -> bool:
    return si_frequency >= SI_THRESHOLD


def label_eating(ed15_mean: float, threshold: float = ED15_THRESHOLD, strict: bool = True) -> bool:
    """High eating-disorder risk when the ED-15 mean exceeds ``threshold``.

    ``strict=False`` gives the ``>=`` reading (use with ``threshold=2.7`` to
    match the rounded cut-off some tables print).
    """
    return ed15_mean > threshold if strict else ed15_mean >= threshold


@dataclass(frozen=True)
class RiskLabels:
    sdq_high: bool
    insomnia_high: bool
    si_high: bool
    ed_high: bool

    @classmethod
    def from_scores(cls, sdq_total: int, sci_total: int, si_frequency: int, ed15_mean: float) -> "RiskLabels":
        return cls(
            sdq_high=label_sdq(sdq_total),
            insomnia_high=label_insomnia(sci_total),
            si_high=label_suicidal(si_frequency),
            ed_high=label_eating(ed15_mean),
        )

    def get(self, outcome: str) -> bool:
        return {
            "sdq": self.sdq_high,
            "insomnia": self.insomnia_high,
            "suicidal": self.si_high,
            "eating": self.ed_high,
        }[outcome]


# --------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class Participant:
    participant_id: str
    age_years: float
    gender: str
    platform: str
    sdq_total: int
    sci_total: int
    si_frequency: int
    ed15_mean: float
    enabled_sensors: frozenset[SensorKind]
    study_start: date

    @property
    def labels(self) -> RiskLabels:
        # recomputed on every access so edits to scores can never go stale
        return RiskLabels.from_scores(self.sdq_total, self.sci_total, self.si_frequency, self.ed15_mean)

    def score(self, outcome: str) -> float:
        return {
            "sdq": self.sdq_total,
            "insomnia": self.sci_total,
            "suicidal": self.si_frequency,
            "eating": self.ed15_mean,
        }[outcome]

    def day_index(self, day: date) -> int:
        return (day - self.study_start).days


@dataclass(frozen=True)
class ActiveResponse:
    participant_id: str
    date: date
    question: str
    value: int


@dataclass(frozen=True)
class Location:
    kind: ClassVar[SensorKind] = SensorKind.LOCATION
    lat: float
    lon: float


@dataclass(frozen=True)
class StepDay:
    kind: ClassVar[SensorKind] = SensorKind.STEPS
    date: date
    count: int


@dataclass(frozen=True)
class Battery:
    kind: ClassVar[SensorKind] = SensorKind.BATTERY
    level_pct: float
    charging: bool


@dataclass(frozen=True)
class AppUsage:
    kind: ClassVar[SensorKind] = SensorKind.APP_USAGE
    app_id: str
    start: datetime
    duration_s: float


@dataclass(frozen=True)
class AmbientLight:
    kind: ClassVar[SensorKind] = SensorKind.AMBIENT_LIGHT
    lux: float


@dataclass(frozen=True)
class Noise:
    kind: ClassVar[SensorKind] = SensorKind.NOISE
    db: float


@dataclass(frozen=True)
class ScreenBrightness:
    kind: ClassVar[SensorKind] = SensorKind.SCREEN_BRIGHTNESS
    level: float


@dataclass(frozen=True)
class SelfAppUsage:
    kind: ClassVar[SensorKind] = SensorKind.SELF_APP
    start: datetime


Payload = Union[Location, StepDay, Battery, AppUsage, AmbientLight, Noise, ScreenBrightness, SelfAppUsage]

PAYLOAD_TYPES: dict[SensorKind, type] = {
    cls.kind: cls
    for cls in (Location, StepDay, Battery, AppUsage, AmbientLight, Noise, ScreenBrightness, SelfAppUsage)
}


@dataclass(frozen=True)
class PassiveEvent:
    participant_id: str
    timestamp: datetime  # timezone-aware; wall clock is the participant's local time
    payload: Payload

    @property
    def kind(self) -> SensorKind:
        return self.payload.kind

    @property
    def local_date(self) -> date:
        if isinstance(self.payload, StepDay):
            return self.payload.date
        return self.timestamp.date()


@dataclass(frozen=True)
class Reject:
    source: str
    line_no: int
    reason: str

    def __str__(self) -> str:
        return f"{self.source}:{self.line_no}: {self.reason}"


@dataclass(frozen=True)
class Cohort:
    participants: tuple[Participant, ...]
    active: tuple[ActiveResponse, ...] = ()
    passive: tuple[PassiveEvent, ...] = ()
    rejects: tuple[Reject, ...] = field(default=(), compare=False, repr=False)

    def __post_init__(self) -> None:
        known = {p.participant_id for p in self.participants}
        if len(known) != len(self.participants):
            raise ValueError("duplicate participant_id")
        for rec in (*self.active, *self.passive):
            if rec.participant_id not in known:
                raise ValueError(f"unknown participant_id {rec.participant_id!r}")

    @cached_property
    def by_id(self) -> dict[str, Participant]:
        return {p.participant_id: p for p in self.participants}

    @cached_property
    def active_by_participant(self) -> dict[str, list[ActiveResponse]]:
        out: dict[str, list[ActiveResponse]] = {p.participant_id: [] for p in self.participants}
        for r in self.active:
            out[r.participant_id].append(r)
        return out

    @cached_property
    def passive_by_participant(self) -> dict[str, list[PassiveEvent]]:
        out: dict[str, list[PassiveEvent]] = {p.participant_id: [] for p in self.participants}
        for e in self.passive:
            out[e.participant_id].append(e)
        return out

    def study_window(self, participant_id: str) -> tuple[date, date]:
        """First and last calendar day (inclusive) of a participant's window."""
        start = self.by_id[participant_id].study_start
        return start, start + timedelta(days=STUDY_DAYS - 1)


# --------------------------------------------------------------------------
# serialisation


class RecordError(ValueError):
    """A single input line failed validation."""


def _format_ts(ts: datetime) -> str:
    return ts.isoformat()


def _parse_ts(text: str) -> datetime:
    if not isinstance(text, str):
        raise RecordError("timestamp must be a string")
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    try:
        ts = datetime.fromisoformat(text)
    except ValueError as exc:
        raise RecordError(f"bad timestamp {text!r}") from exc
    if ts.tzinfo is None:
        raise RecordError(f"timestamp {text!r} lacks an offset")
    return ts


def _parse_date(text) -> date:
    try:
        return date.fromisoformat(text)
    except (TypeError, ValueError) as exc:
        raise RecordError(f"bad date {text!r}") from exc


def _req(rec: dict, key: str):
    if key not in rec:
        raise RecordError(f"missing field {key!r}")
    return rec[key]


def _int_in(rec: dict, key: str, lo: int, hi: int) -> int:
    val = _req(rec, key)
    if isinstance(val, bool) or not isinstance(val, int):
        raise RecordError(f"field {key!r} must be an integer, got {val!r}")
    if not lo <= val <= hi:
        raise RecordError(f"field {key!r}={val} outside [{lo}, {hi}]")
    return val


def _num_in(rec: dict, key: str, lo: float = -math.inf, hi: float = math.inf) -> float:
    val = _req(rec, key)
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise RecordError(f"field {key!r} must be a number, got {val!r}")
    val = float(val)
    if not math.isfinite(val) or not lo <= val <= hi:
        raise RecordError(f"field {key!r}={val} outside [{lo}, {hi}]")
    return val


def _str(rec: dict, key: str) -> str:
    val = _req(rec, key)
    if not isinstance(val, str) or not val:
        raise RecordError(f"field {key!r} must be a non-empty string")
    return val


def _choice(rec: dict, key: str, options: Iterable[str]) -> str:
    val = _req(rec, key)
    if val not in options:
        raise RecordError(f"field {key!r}={val!r} not one of {sorted(options)}")
    return val


def participant_from_record(rec: dict) -> Participant:
    platform = _choice(rec, "platform", PLATFORMS)
    raw_sensors = _req(rec, "enabled_sensors")
    if not isinstance(raw_sensors, list):
        raise RecordError("field 'enabled_sensors' must be an array")
    try:
        sensors = frozenset(SensorKind(s) for s in raw_sensors)
    except ValueError as exc:
        raise RecordError(f"unknown sensor kind in {raw_sensors!r}") from exc
    illegal = sensors - allowed_sensors(platform)
    if illegal:
        raise RecordError(f"sensors {sorted(s.value for s in illegal)} not available on {platform}")
    return Participant(
        participant_id=_str(rec, "participant_id"),
        age_years=_num_in(rec, "age_years", 0, 150),
        gender=_choice(rec, "gender", GENDERS),
        platform=platform,
        sdq_total=_int_in(rec, "sdq_total", 0, 40),
        sci_total=_int_in(rec, "sci_total", 0, 32),
        si_frequency=_int_in(rec, "si_frequency", 0, 3),
        ed15_mean=_num_in(rec, "ed15_mean", 0, 6),
        enabled_sensors=sensors,
        study_start=_parse_date(_req(rec, "study_start")),
    )


def participant_to_record(p: Participant) -> dict:
    return {
        "v": SCHEMA_VERSION,
        "participant_id": p.participant_id,
        "age_years": p.age_years,
        "gender": p.gender,
        "platform": p.platform,
        "sdq_total": p.sdq_total,
        "sci_total": p.sci_total,
        "si_frequency": p.si_frequency,
        "ed15_mean": p.ed15_mean,
        "enabled_sensors": sorted(s.value for s in p.enabled_sensors),
        "study_start": p.study_start.isoformat(),
    }


def active_from_record(rec: dict) -> ActiveResponse:
    return ActiveResponse(
        participant_id=_str(rec, "participant_id"),
        date=_parse_date(_req(rec, "date")),
        question=_choice(rec, "question", ACTIVE_QUESTIONS),
        value=_int_in(rec, "value", 1, 7),
    )


def active_to_record(r: ActiveResponse) -> dict:
    return {
        "v": SCHEMA_VERSION,
        "participant_id": r.participant_id,
        "date": r.date.isoformat(),
        "question": r.question,
        "value": r.value,
    }


def passive_from_record(rec: dict) -> PassiveEvent:
    try:
        kind = SensorKind(_req(rec, "kind"))
    except ValueError as exc:
        raise RecordError(f"unknown kind {rec.get('kind')!r}") from exc
    if kind is SensorKind.LOCATION:
        payload: Payload = Location(lat=_num_in(rec, "lat", -90, 90), lon=_num_in(rec, "lon", -180, 180))
    elif kind is SensorKind.STEPS:
        payload = StepDay(date=_parse_date(_req(rec, "date")), count=_int_in(rec, "count", 0, 10**7))
    elif kind is SensorKind.BATTERY:
        charging = _req(rec, "charging")
        if not isinstance(charging, bool):
            raise RecordError("field 'charging' must be a boolean")
        payload = Battery(level_pct=_num_in(rec, "level_pct", 0, 100), charging=charging)
    elif kind is SensorKind.APP_USAGE:
        payload = AppUsage(
            app_id=_str(rec, "app_id"),
            start=_parse_ts(_req(rec, "start")),
            duration_s=_num_in(rec, "duration_s", 0),
        )
    elif kind is SensorKind.AMBIENT_LIGHT:
        payload = AmbientLight(lux=_num_in(rec, "lux", 0))
    elif kind is SensorKind.NOISE:
        payload = Noise(db=_num_in(rec, "db"))
    elif kind is SensorKind.SCREEN_BRIGHTNESS:
        payload = ScreenBrightness(level=_num_in(rec, "level", 0, 1))
    else:
        payload = SelfAppUsage(start=_parse_ts(_req(rec, "start")))
    return PassiveEvent(
        participant_id=_str(rec, "participant_id"),
        timestamp=_parse_ts(_req(rec, "timestamp")),
        payload=payload,
    )


def passive_to_record(e: PassiveEvent) -> dict:
    rec = {
        "v": SCHEMA_VERSION,
        "participant_id": e.participant_id,
        "timestamp": _format_ts(e.timestamp),
        "kind": e.kind.value,
    }
    p = e.payload
    if isinstance(p, Location):
        rec.update(lat=p.lat, lon=p.lon)
    elif isinstance(p, StepDay):
        rec.update(date=p.date.isoformat(), count=p.count)
    elif isinstance(p, Battery):
        rec.update(level_pct=p.level_pct, charging=p.charging)
    elif isinstance(p, AppUsage):
        rec.update(app_id=p.app_id, start=_format_ts(p.start), duration_s=p.duration_s)
    elif isinstance(p, AmbientLight):
        rec.update(lux=p.lux)
    elif isinstance(p, Noise):
        rec.update(db=p.db)
    elif isinstance(p, ScreenBrightness):
        rec.update(level=p.level)
    else:
        rec.update(start=_format_ts(p.start))
    return rec


def _read_lines(path: Path, source: str, rejects: list[Reject]) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                rejects.append(Reject(source, line_no, f"malformed line: {exc.msg}"))
                continue
            if not isinstance(rec, dict):
                rejects.append(Reject(source, line_no, "malformed line: not an object"))
                continue
            if rec.get("v") != SCHEMA_VERSION:
                rejects.append(Reject(source, line_no, f"unsupported schema version {rec.get('v')!r}"))
                continue
            yield line_no, rec


def load_cohort(participants_path, active_path, passive_path) -> Cohort:
    """Read and validate the three cohort files.

    Bad lines are skipped and listed in ``Cohort.rejects``; a missing file
    raises ``FileNotFoundError``.
    """
    paths = [Path(participants_path), Path(active_path), Path(passive_path)]
    for p in paths:
        if not p.exists():
            raise FileNotFoundError(p)
    rejects: list[Reject] = []

    participants: dict[str, Participant] = {}
    for line_no, rec in _read_lines(paths[0], "participants", rejects):
        try:
            part = participant_from_record(rec)
            if part.participant_id in participants:
                raise RecordError(f"duplicate participant_id {part.participant_id!r}")
        except RecordError as exc:
            rejects.append(Reject("participants", line_no, str(exc)))
            continue
        participants[part.participant_id] = part

    def window_check(pid: str, day: date) -> Participant:
        part = participants.get(pid)
        if part is None:
            raise RecordError(f"unknown participant_id {pid!r}")
        idx = part.day_index(day)
        if not 0 <= idx < STUDY_DAYS:
            raise RecordError(f"{day.isoformat()} outside study window of {pid!r}")
        return part

    active: list[ActiveResponse] = []
    seen: set[tuple[str, date, str]] = set()
    for line_no, rec in _read_lines(paths[1], "active", rejects):
        try:
            resp = active_from_record(rec)
            window_check(resp.participant_id, resp.date)
            key = (resp.participant_id, resp.date, resp.question)
            if key in seen:
                raise RecordError(f"duplicate response for {resp.question} on {resp.date.isoformat()}")
        except RecordError as exc:
            rejects.append(Reject("active", line_no, str(exc)))
            continue
        seen.add(key)
        active.append(resp)

    passive: list[PassiveEvent] = []
    for line_no, rec in _read_lines(paths[2], "passive", rejects):
        try:
            event = passive_from_record(rec)
            part = window_check(event.participant_id, event.local_date)
            if event.kind not in part.enabled_sensors:
                raise RecordError(f"sensor {event.kind.value!r} not enabled for {part.participant_id!r}")
        except RecordError as exc:
            rejects.append(Reject("passive", line_no, str(exc)))
            continue
        passive.append(event)

    for r in rejects:
        logger.warning("rejected %s", r)
    if rejects:
        logger.info("%d records rejected", len(rejects))
    return Cohort(tuple(participants.values()), tuple(active), tuple(passive), rejects=tuple(rejects))


def _write_jsonl(path: Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")))
            fh.write("\n")


def write_cohort(cohort: Cohort, out_dir) -> tuple[Path, Path, Path]:
    """Write ``participants.jsonl``, ``active.jsonl`` and ``passive.jsonl``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = (out / "participants.jsonl", out / "active.jsonl", out / "passive.jsonl")
    _write_jsonl(paths[0], map(participant_to_record, cohort.participants))
    _write_jsonl(paths[1], map(active_to_record, cohort.active))
    _write_jsonl(paths[2], map(passive_to_record, cohort.passive))
    return paths


# --------------------------------------------------------------------------
# summary


@dataclass(frozen=True)
class SummaryRow:
    measure: str
    mean: float
    sd: float
    n_high: int
    n_total: int

    @property
    def pct_high(self) -> float:
        return 100.0 * self.n_high / self.n_total

    def count_text(self) -> str:
        return f"{self.n_high} ({self.pct_high:.1f}%)"

    def mean_sd_text(self, digits: int = 1) -> str:
        return f"{self.mean:.{digits}f}±{self.sd:.{digits}f}"


def cohort_summary(cohort: Cohort) -> list[SummaryRow]:
    """Per-outcome score mean, sample SD and high-risk count.

    SD uses ``ddof=1`` and is reported as 0 for a single participant.
    """
    if not cohort.participants:
        raise ValueError("empty cohort")
    rows = []
    n = len(cohort.participants)
    for outcome in OUTCOMES:
        scores = np.array([p.score(outcome) for p in cohort.participants], dtype=float)
        n_high = sum(p.labels.get(outcome) for p in cohort.participants)
        sd = float(scores.std(ddof=1)) if n > 1 else 0.0
        rows.append(SummaryRow(outcome, float(scores.mean()), sd, int(n_high), n))
    return rows
