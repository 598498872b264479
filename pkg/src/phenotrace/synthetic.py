"""Synthetic cohorts with plantable links between risk status and behaviour.

Each user gets a latent severity per outcome, questionnaire scores that sit
on the correct side of every threshold, and a set of stable behavioural
traits. High-risk users have their traits shifted by the configured effect
sizes (in units of the between-user SD). Raw events are then sampled day by
day around those traits, so the whole feature pipeline is exercised.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import date, datetime, timedelta, timezone
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .cohort import (
    ACTIVE_QUESTIONS,
    OUTCOMES,
    AmbientLight,
    ActiveResponse,
    AppUsage,
    Battery,
    Cohort,
    Location,
    Noise,
    Participant,
    PassiveEvent,
    ScreenBrightness,
    SelfAppUsage,
    SensorKind,
    StepDay,
    allowed_sensors,
    write_cohort,
)
from .features.registry import DEFAULT_APP_CATEGORY_MAP
from .nn import derive_seed, make_rng

PASSIVE_TRAITS = (
    "steps",
    "place_diversity",
    "mobility_range",
    "day_light",
    "night_light",
    "day_noise",
    "night_noise",
    "night_phone",
    "phone_use",
    "app_use",
    "social_media",
)
TRAITS = ACTIVE_QUESTIONS + PASSIVE_TRAITS

DEFAULT_PREVALENCE = {"sdq": 0.30, "insomnia": 0.33, "suicidal": 0.37, "eating": 0.37}

DEFAULT_EFFECTS = {
    "sdq": {
        "negative_thinking": 2.0,
        "racing_thoughts": 0.6,
        "self_care": -0.6,
        "place_diversity": 3.75,
        "steps": -2.0,
    },
    "insomnia": {
        "sleep_quality": -2.4,
        "energy": -0.9,
        "night_phone": 3.75,
        "night_light": 1.5,
    },
    "suicidal": {
        "hopefulness": -1.8,
        "mood": -0.6,
        "loneliness": 0.6,
        "mobility_range": -5.0,
        "steps": -3.0,
        "day_light": -2.0,
    },
    "eating": {
        "confidence": -2.4,
        "self_care": -0.9,
        "irritability": 0.9,
        "phone_use": 3.75,
        "social_media": 2.25,
    },
}

DEFAULT_CONSENT = {
    SensorKind.STEPS.value: 0.95,
    SensorKind.BATTERY.value: 0.95,
    SensorKind.SELF_APP.value: 0.9,
    SensorKind.SCREEN_BRIGHTNESS.value: 0.9,
    SensorKind.LOCATION.value: 0.95,
    SensorKind.APP_USAGE.value: 0.8,
    SensorKind.NOISE.value: 0.7,
    SensorKind.AMBIENT_LIGHT.value: 0.7,
}

ACTIVE_BASE = {
    "mood": 4.6,
    "sleep_quality": 4.3,
    "loneliness": 3.2,
    "confidence": 4.3,
    "motivation": 4.2,
    "productivity": 4.1,
    "energy": 4.2,
    "sociability": 4.4,
    "self_care": 4.5,
    "hopefulness": 4.5,
    "negative_thinking": 3.4,
    "racing_thoughts": 3.5,
    "irritability": 3.3,
}
DISTRESS_ITEMS = ("loneliness", "negative_thinking", "racing_thoughts", "irritability")

# (boundary between classes, SD, min, max, integer?, +1 if high risk means a high score)
SCORE_SCALES = {
    "sdq": (15.5, 6.2, 0, 40, True, 1),
    "insomnia": (16.5, 7.8, 0, 32, True, -1),
    "suicidal": (0.5, 0.9, 0, 3, True, 1),
    "eating": (2.695, 1.8, 0.0, 6.0, False, 1),
}

M_PER_DEG_LAT = 111_195.0


@dataclass
class GeneratorConfig:
    n_users: int = 100
    days: int = 14
    seed: int = 0
    prevalence: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_PREVALENCE))
    effects: dict[str, dict[str, float]] = field(default_factory=lambda: {o: dict(e) for o, e in DEFAULT_EFFECTS.items()})
    coupling: str = "step"  # "linear": behaviour scales with distance from the threshold
    ios_fraction: float = 0.76
    no_sensor_prob: float = 0.1
    consent: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_CONSENT))
    active_dropout_hazard: float = 0.1
    passive_dropout_hazard: float = 0.05
    active_daily_prob: float = 0.9
    passive_daily_prob: float = 0.95
    day_noise: float = 1.0
    start_date: str = "2024-03-04"

    def __post_init__(self) -> None:
        if self.n_users < 1 or not 1 <= self.days <= 14:
            raise ValueError("need n_users >= 1 and 1 <= days <= 14")
        probs = [self.ios_fraction, self.no_sensor_prob, self.active_dropout_hazard, self.passive_dropout_hazard,
                 self.active_daily_prob, self.passive_daily_prob, *self.consent.values(), *self.prevalence.values()]
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError("probabilities must lie in [0, 1]")
        for o in OUTCOMES:
            p = self.prevalence.get(o)
            if p is None or not 0.0 < p < 1.0:
                raise ValueError(f"infeasible prevalence for {o}: {p!r} (must be strictly between 0 and 1)")
        for o, eff in self.effects.items():
            if o not in OUTCOMES:
                raise ValueError(f"unknown outcome {o!r}")
            for trait, size in eff.items():
                if trait not in TRAITS:
                    raise ValueError(f"unknown trait {trait!r}")
                if not math.isfinite(size):
                    raise ValueError("effect sizes must be finite")
        if self.coupling not in ("step", "linear"):
            raise ValueError(f"unknown coupling {self.coupling!r}")
        unknown = set(self.consent) - {k.value for k in SensorKind}
        if unknown:
            raise ValueError(f"unknown sensors {sorted(unknown)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown generator options {sorted(unknown)}")
        return cls(**doc)

    def with_effects_scaled(self, factor: float) -> "GeneratorConfig":
        return replace(self, effects={o: {t: v * factor for t, v in e.items()} for o, e in self.effects.items()})


def null_config(**kwargs) -> GeneratorConfig:
    """Default cohort with every planted effect set to zero."""
    return GeneratorConfig(**kwargs).with_effects_scaled(0.0)


def borderline_config(**kwargs) -> GeneratorConfig:
    """Behaviour scales linearly with severity, so near-threshold users look ambiguous."""
    return GeneratorConfig(coupling="linear", **kwargs)


@dataclass
class GroundTruth:
    severity: dict[str, dict[str, float]]
    high_risk: dict[str, dict[str, bool]]
    traits: dict[str, dict[str, float]]
    config: dict

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# scores


def backfill_score(outcome: str, z: float, cutoff: float):
    """Questionnaire score for latent severity ``z`` on the right side of the threshold."""
    boundary, sd, lo, hi, integer, direction = SCORE_SCALES[outcome]
    high = z > cutoff
    raw = boundary + direction * sd * (z - cutoff)
    if integer:
        value = int(math.floor(raw + 0.5))
        lo_hi = (math.ceil(boundary), hi) if direction == 1 else (lo, math.floor(boundary))
        lo_lo = (lo, math.floor(boundary)) if direction == 1 else (math.ceil(boundary), hi)
        a, b = lo_hi if high else lo_lo
        return int(min(max(value, a), b))
    value = round(raw, 2)
    if high:
        return float(min(max(value, 2.70), hi))
    return float(min(max(value, lo), 2.69))


def _coupling_scale(p: float) -> float:
    """Gap between mean severity of high and low groups for prevalence ``p``."""
    q = norm.ppf(1 - p)
    return float(norm.pdf(q) / p + norm.pdf(q) / (1 - p))


# --------------------------------------------------------------------------
# event sampling


def _ts(day: date, hours: float, tz) -> datetime:
    secs = int(round(hours * 3600))
    secs = min(max(secs, 0), 24 * 3600 - 1)
    return datetime(day.year, day.month, day.day, tzinfo=tz) + timedelta(seconds=secs)


def _night_hours(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform over 22:00-24:00 and 00:00-06:00 of the same date."""
    u = rng.random(n) * 8.0
    return np.where(u < 2.0, 22.0 + u, u - 2.0)


class _UserSim:
    def __init__(self, pid: str, traits: dict[str, float], sensors, platform: str, tz, cfg: GeneratorConfig,
                 rng: np.random.Generator):
        self.pid, self.t, self.sensors, self.platform, self.tz = pid, traits, sensors, platform, tz
        self.cfg, self.rng = cfg, rng
        lat0 = 51.5 + rng.normal(0, 0.03)
        lon0 = -0.15 + rng.normal(0, 0.05)
        # snap to grid-cell centres so GPS jitter rarely spills into a neighbouring cell
        self.home = np.round([lat0, lon0], 3)
        n_places = 8
        dist = rng.lognormal(math.log(1500.0) + 0.4 * traits["mobility_range"], 0.6, n_places)
        bearing = rng.uniform(0, 2 * math.pi, n_places)
        self.places = self.home + np.stack(
            [dist * np.cos(bearing) / M_PER_DEG_LAT, dist * np.sin(bearing) / (M_PER_DEG_LAT * math.cos(math.radians(lat0)))],
            axis=1,
        )
        self.places = np.round(self.places, 3)
        self.place_w = rng.dirichlet(np.ones(n_places))
        # diversity changes how many places the time away is split over, not how long it is
        self.visit_rate = 1.0 * math.exp(0.6 * traits["place_diversity"])
        apps = list(DEFAULT_APP_CATEGORY_MAP) + [f"com.example.misc{k}" for k in range(12)]
        n_apps = min(len(apps), 18 + int(rng.poisson(8)))
        self.apps = list(rng.choice(apps, size=n_apps, replace=False))
        w = rng.dirichlet(np.ones(n_apps) * 0.7)
        social = np.array([DEFAULT_APP_CATEGORY_MAP.get(a) == "social_media" for a in self.apps])
        w = w * np.where(social, math.exp(0.7 * traits["social_media"]), 1.0)
        self.app_w = w / w.sum()

    def noise(self, sd: float = 1.0, size=None):
        return self.rng.normal(0.0, sd * self.cfg.day_noise, size)

    def active_day(self, day: date) -> list[ActiveResponse]:
        out = []
        for q in ACTIVE_QUESTIONS:
            if self.rng.random() > 0.95:
                continue
            mu = ACTIVE_BASE[q] + 0.9 * self.t[q]
            value = int(min(7, max(1, round(mu + self.noise(1.0)))))
            out.append(ActiveResponse(self.pid, day, q, value))
        return out

    def passive_day(self, day: date) -> list[PassiveEvent]:
        ev: list[PassiveEvent] = []
        s = self.sensors
        rng, t, tz = self.rng, self.t, self.tz
        if SensorKind.STEPS in s:
            count = int(rng.lognormal(math.log(6000.0) + 0.35 * t["steps"], 0.35 * self.cfg.day_noise))
            ev.append(PassiveEvent(self.pid, _ts(day, 21.0, tz), StepDay(day, count)))
        if SensorKind.LOCATION in s:
            ev.extend(self._locations(day))
        if SensorKind.BATTERY in s:
            ev.extend(self._battery(day))
        if SensorKind.AMBIENT_LIGHT in s:
            for h in range(24):
                night = h >= 22 or h < 6
                mu = math.log(3.0) + 0.7 * t["night_light"] if night else math.log(200.0) + 0.3 * t["day_light"]
                lux = float(rng.lognormal(mu, 0.9 * self.cfg.day_noise))
                ev.append(PassiveEvent(self.pid, _ts(day, h + rng.random() * 0.9, tz), AmbientLight(round(lux, 3))))
        if SensorKind.NOISE in s:
            for h in range(24):
                night = h >= 22 or h < 6
                mu = 40.0 + 4.0 * t["night_noise"] if night else 55.0 + 3.0 * t["day_noise"]
                db = mu + self.noise(5.0 if night else 6.0)
                ev.append(PassiveEvent(self.pid, _ts(day, h + rng.random() * 0.9, tz), Noise(round(float(db), 2))))
        if SensorKind.SCREEN_BRIGHTNESS in s:
            n_day = 10 + int(rng.poisson(6))
            n_night = int(rng.poisson(1.5 * math.exp(0.6 * t["night_phone"])))
            hours = np.sort(np.r_[rng.uniform(6, 22, n_day), _night_hours(rng, n_night)])
            for h in hours:
                night = h >= 22 or h < 6
                level = (0.3 if night else 0.55 + 0.08 * t["day_light"]) + self.noise(0.12)
                level = float(min(1.0, max(0.0, level)))
                ev.append(PassiveEvent(self.pid, _ts(day, h, tz), ScreenBrightness(round(level, 4))))
        if SensorKind.APP_USAGE in s:
            n_day = int(rng.poisson(35 * math.exp(0.3 * t["app_use"])))
            n_night = int(rng.poisson(2 * math.exp(0.6 * t["night_phone"])))
            hours = np.sort(np.r_[rng.uniform(6, 22, n_day), _night_hours(rng, n_night)])
            apps = rng.choice(len(self.apps), size=len(hours), p=self.app_w)
            durations = rng.lognormal(math.log(50.0), 1.0, len(hours))
            for h, a, d in zip(hours, apps, durations):
                start = _ts(day, h, tz)
                ev.append(PassiveEvent(self.pid, start, AppUsage(self.apps[a], start, round(float(d), 1))))
        if SensorKind.SELF_APP in s:
            n = 1 + int(rng.poisson(0.8))
            hours = [min(21.9, max(6.0, rng.normal(8.5, 1.5)))] + list(rng.uniform(9, 22, n - 1))
            if rng.random() < 1 / (1 + math.exp(2.0 - 0.9 * t["night_phone"])):
                hours.append(22.0 + rng.random() * 1.99)
            for h in sorted(hours):
                start = _ts(day, h, tz)
                ev.append(PassiveEvent(self.pid, start, SelfAppUsage(start)))
        return ev

    def _locations(self, day: date) -> list[PassiveEvent]:
        rng = self.rng
        slots = np.full(48, -1)  # half-hour slots; -1 is home
        start = 16 + int(rng.poisson(2))
        away = min(44 - start, 6 + int(rng.poisson(8)))
        visits = min(away, len(self.places), 1 + int(rng.poisson(self.visit_rate)))
        lengths = 1 + rng.multinomial(away - visits, np.ones(visits) / visits)
        where = rng.choice(len(self.places), size=visits, replace=False, p=self.place_w)
        cur = start
        for n, w in zip(lengths, where):
            slots[cur : cur + n] = w
            cur += n
        lat0 = self.home[0]
        out = []
        for k, where in enumerate(slots):
            base = self.home if where < 0 else self.places[where]
            jitter = rng.normal(0, 5.0, 2) / np.array([M_PER_DEG_LAT, M_PER_DEG_LAT * math.cos(math.radians(lat0))])
            lat, lon = base + jitter
            out.append(PassiveEvent(self.pid, _ts(day, k * 0.5 + rng.random() * 0.1, self.tz),
                                    Location(round(float(lat), 6), round(float(lon), 6))))
        return out

    def _battery(self, day: date) -> list[PassiveEvent]:
        rng, t = self.rng, self.t
        out = []
        night_n = int(rng.poisson(1.0 * math.exp(0.6 * t["night_phone"])))
        hours = _night_hours(rng, night_n)
        early, late = hours[hours < 6], hours[hours >= 22]
        for h in sorted(early):
            out.append(PassiveEvent(self.pid, _ts(day, h, self.tz),
                                    Battery(round(float(min(100.0, rng.uniform(85, 100))), 1), True)))
        level = float(rng.uniform(70, 100))
        rate = 5.0 * math.exp(0.25 * t["phone_use"])
        charging_left = 0
        for h in range(7, 22):
            if charging_left:
                level = min(100.0, level + 25.0)
                charging_left -= 1
                charging = True
            else:
                level = max(1.0, level - max(0.0, rate + self.noise(1.0)))
                charging = False
                if level < 20 + rng.uniform(0, 15):
                    charging_left = 1 + int(rng.random() < 0.5)
            out.append(PassiveEvent(self.pid, _ts(day, h + rng.random() * 0.5, self.tz),
                                    Battery(round(level, 1), charging)))
        for h in sorted(late):
            level = max(1.0, level - rate * 0.3)
            out.append(PassiveEvent(self.pid, _ts(day, h, self.tz), Battery(round(level, 1), False)))
        return out


# --------------------------------------------------------------------------
# cohort generation


def _sample_traits(rng: np.random.Generator, shifts: dict[str, float]) -> dict[str, float]:
    wellbeing, distress = rng.multivariate_normal([0, 0], [[1, -0.5], [-0.5, 1]])
    traits = {}
    for q in ACTIVE_QUESTIONS:
        factor = distress if q in DISTRESS_ITEMS else wellbeing
        traits[q] = 0.6 * factor + 0.8 * rng.normal()
    for name in PASSIVE_TRAITS:
        traits[name] = rng.normal()
    for name, shift in shifts.items():
        traits[name] += shift
    return traits


def _sensors(rng: np.random.Generator, platform: str, cfg: GeneratorConfig) -> frozenset[SensorKind]:
    if rng.random() < cfg.no_sensor_prob:
        return frozenset()
    legal = allowed_sensors(platform)
    return frozenset(k for k in SensorKind if k in legal and rng.random() < cfg.consent.get(k.value, 0.0))


def _contributing_days(rng: np.random.Generator, days: int, hazard: float, daily: float) -> list[int]:
    out = [0]
    for d in range(1, days):
        if rng.random() < hazard:
            break
        if rng.random() < daily:
            out.append(d)
    return out


def generate(config: GeneratorConfig | None = None) -> tuple[Cohort, GroundTruth]:
    """Build a cohort and its ground-truth sidecar from ``config``."""
    cfg = config or GeneratorConfig()
    start = date.fromisoformat(cfg.start_date)
    cutoffs = {o: float(norm.ppf(1 - cfg.prevalence[o])) for o in OUTCOMES}
    scale = {o: _coupling_scale(cfg.prevalence[o]) for o in OUTCOMES}
    participants, active, passive = [], [], []
    truth = GroundTruth({}, {}, {}, cfg.to_dict())
    width = max(3, len(str(cfg.n_users)))
    for i in range(cfg.n_users):
        rng = make_rng(derive_seed(cfg.seed, "user", i))
        pid = f"u{i:0{width}d}"
        z = {o: float(rng.normal()) for o in OUTCOMES}
        high = {o: z[o] > cutoffs[o] for o in OUTCOMES}
        shifts: dict[str, float] = {}
        for o, eff in cfg.effects.items():
            r = float(high[o]) if cfg.coupling == "step" else (z[o] - cutoffs[o]) / scale[o]
            for trait, size in eff.items():
                shifts[trait] = shifts.get(trait, 0.0) + size * r
        traits = _sample_traits(rng, shifts)
        platform = "ios" if rng.random() < cfg.ios_fraction else "android"
        sensors = _sensors(rng, platform, cfg)
        study_start = start + timedelta(days=int(rng.integers(0, 7)))
        gender = str(rng.choice(["female", "male", "other"], p=[0.71, 0.25, 0.04]))
        part = Participant(
            participant_id=pid,
            age_years=round(float(min(18.9, max(14.0, rng.normal(16.1, 1.0)))), 1),
            gender=gender,
            platform=platform,
            sdq_total=backfill_score("sdq", z["sdq"], cutoffs["sdq"]),
            sci_total=backfill_score("insomnia", z["insomnia"], cutoffs["insomnia"]),
            si_frequency=backfill_score("suicidal", z["suicidal"], cutoffs["suicidal"]),
            ed15_mean=backfill_score("eating", z["eating"], cutoffs["eating"]),
            enabled_sensors=sensors,
            study_start=study_start,
        )
        participants.append(part)
        tz = timezone(timedelta(hours=int(rng.random() < 0.5)))
        sim = _UserSim(pid, traits, sensors, platform, tz, cfg, rng)
        for d in _contributing_days(rng, cfg.days, cfg.active_dropout_hazard, cfg.active_daily_prob):
            active.extend(sim.active_day(study_start + timedelta(days=d)))
        if sensors:
            for d in _contributing_days(rng, cfg.days, cfg.passive_dropout_hazard, cfg.passive_daily_prob):
                passive.extend(sim.passive_day(study_start + timedelta(days=d)))
        truth.severity[pid] = z
        truth.high_risk[pid] = high
        truth.traits[pid] = traits
    return Cohort(tuple(participants), tuple(active), tuple(passive)), truth


def write_synthetic(config: GeneratorConfig, out_dir) -> dict[str, Path]:
    """Generate and write the three cohort files plus ``truth.json``."""
    cohort, truth = generate(config)
    out = Path(out_dir)
    p, a, s = write_cohort(cohort, out)
    truth_path = out / "truth.json"
    truth_path.write_text(json.dumps(truth.to_dict(), sort_keys=True, indent=1))
    return {"participants": p, "active": a, "passive": s, "truth": truth_path}


def permute_labels(cohort: Cohort, seed: int | None = None, permutation=None) -> Cohort:
    """Shuffle the questionnaire scores across participants; events are untouched.

    Pass an explicit ``permutation`` (indices into ``cohort.participants``) to
    control the mapping; otherwise one is drawn from ``seed``.
    """
    n = len(cohort.participants)
    if permutation is None:
        permutation = make_rng(derive_seed(0 if seed is None else seed, "permute")).permutation(n)
    permutation = np.asarray(permutation)
    if sorted(permutation.tolist()) != list(range(n)):
        raise ValueError("not a permutation")
    donors = [cohort.participants[j] for j in permutation]
    shuffled = tuple(
        replace(p, sdq_total=d.sdq_total, sci_total=d.sci_total, si_frequency=d.si_frequency, ed15_mean=d.ed15_mean)
        for p, d in zip(cohort.participants, donors)
    )
    return Cohort(shuffled, cohort.active, cohort.passive)
