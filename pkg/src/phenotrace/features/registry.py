"""Ordered registry of the named per-day features."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from datetime import time

from ..cohort import ACTIVE_QUESTIONS, SensorKind

REGISTRY_VERSION = 1

SENSOR_GROUPS = (
    "active",
    "ambient_light",
    "app_usage",
    "noise",
    "battery",
    "location",
    "self_app",
    "screen_brightness",
    "steps",
)

APP_CATEGORIES = (
    "camera",
    "communication",
    "entertainment",
    "gaming",
    "physical_health",
    "mental_health",
    "mindcraft",
    "news",
    "productivity",
    "social_media",
)

DEFAULT_APP_CATEGORY_MAP = {
    "com.android.camera": "camera",
    "com.snapchat.android": "social_media",
    "com.instagram.android": "social_media",
    "com.zhiliaoapp.musically": "social_media",
    "com.twitter.android": "social_media",
    "com.facebook.katana": "social_media",
    "com.whatsapp": "communication",
    "com.google.android.gm": "communication",
    "com.discord": "communication",
    "com.android.messaging": "communication",
    "com.netflix.mediaclient": "entertainment",
    "com.spotify.music": "entertainment",
    "com.google.android.youtube": "entertainment",
    "com.supercell.clashroyale": "gaming",
    "com.roblox.client": "gaming",
    "com.mojang.minecraftpe": "gaming",
    "com.nianticlabs.pokemongo": "gaming",
    "com.strava": "physical_health",
    "com.google.android.apps.fitness": "physical_health",
    "com.calm.android": "mental_health",
    "com.getsomeheadspace.android": "mental_health",
    "uk.ac.imperial.mindcraft": "mindcraft",
    "bbc.mobile.news.uk": "news",
    "com.google.android.apps.magazines": "news",
    "com.google.android.apps.docs": "productivity",
    "com.microsoft.teams": "productivity",
    "com.google.android.calendar": "productivity",
}

GROUP_SENSOR = {
    "ambient_light": SensorKind.AMBIENT_LIGHT,
    "app_usage": SensorKind.APP_USAGE,
    "noise": SensorKind.NOISE,
    "battery": SensorKind.BATTERY,
    "location": SensorKind.LOCATION,
    "self_app": SensorKind.SELF_APP,
    "screen_brightness": SensorKind.SCREEN_BRIGHTNESS,
    "steps": SensorKind.STEPS,
}

LOCATION_KEYS = (
    "mean_lat",
    "mean_lon",
    "total_distance",
    "location_count",
    "max_home_distance",
    "mean_home_distance",
    "median_home_distance",
    "night_movement",
    "radius_of_gyration",
    "sd_lat",
    "sd_lon",
    "entropy",
    "time_at_home",
)

BATTERY_KEYS = (
    "min_level",
    "max_level",
    "mean_level",
    "median_level",
    "charges",
    "use_per_hour",
    "minutes_below_20",
    "night_count",
)

STEP_KEYS = ("count", "gt5k", "gt7k", "gt10k")
SELF_APP_KEYS = ("first_hour", "last_hour", "night_count")

_APP_BLOCK = ("count", "unique", "total_time", "mean_time", "median_time")
APP_KEYS = (
    tuple(f"day_{k}" for k in _APP_BLOCK)
    + tuple(f"night_{k}" for k in _APP_BLOCK)
    + tuple(f"time_{c}" for c in APP_CATEGORIES)
    + tuple(f"pct_{c}" for c in APP_CATEGORIES)
)

_STAT4 = ("total", "mean", "median", "sd")
_NOISE_STATS = ("total", "median", "mean", "max", "sd")
LIGHT_KEYS = tuple(f"{part}_{s}" for part in ("day", "night") for s in _STAT4)
BRIGHTNESS_KEYS = LIGHT_KEYS
NOISE_KEYS = tuple(f"{part}_{s}" for part in ("day", "night") for s in _NOISE_STATS)

_PREFIX = {
    "ambient_light": "light",
    "app_usage": "app",
    "noise": "noise",
    "battery": "battery",
    "location": "loc",
    "self_app": "selfapp",
    "screen_brightness": "brightness",
    "steps": "steps",
}

GROUP_KEYS = {
    "ambient_light": LIGHT_KEYS,
    "app_usage": APP_KEYS,
    "noise": NOISE_KEYS,
    "battery": BATTERY_KEYS,
    "location": LOCATION_KEYS,
    "self_app": SELF_APP_KEYS,
    "screen_brightness": BRIGHTNESS_KEYS,
    "steps": STEP_KEYS,
}


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    sensor_group: str
    extractor_id: str

    def __post_init__(self) -> None:
        if self.sensor_group not in SENSOR_GROUPS:
            raise ValueError(f"unknown sensor group {self.sensor_group!r}")
        valid = ACTIVE_QUESTIONS if self.sensor_group == "active" else GROUP_KEYS[self.sensor_group]
        if self.extractor_id not in valid:
            raise ValueError(f"{self.sensor_group} has no extractor {self.extractor_id!r}")


@dataclass(frozen=True)
class FeatureRegistry:
    features: tuple[FeatureSpec, ...]

    def __post_init__(self) -> None:
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ValueError("feature names must be unique")

    def __len__(self) -> int:
        return len(self.features)

    def __iter__(self):
        return iter(self.features)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    @property
    def groups(self) -> list[str]:
        return [f.sensor_group for f in self.features]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def group_indices(self, group: str) -> list[int]:
        return [i for i, f in enumerate(self.features) if f.sensor_group == group]

    def subset(self, indices) -> "FeatureRegistry":
        return FeatureRegistry(tuple(self.features[i] for i in indices))

    def to_dict(self) -> dict:
        return {"v": REGISTRY_VERSION, "features": [asdict(f) for f in self.features]}

    @classmethod
    def from_dict(cls, doc: dict) -> "FeatureRegistry":
        if doc.get("v") != REGISTRY_VERSION:
            raise ValueError(f"unsupported registry version {doc.get('v')!r}")
        return cls(tuple(FeatureSpec(**f) for f in doc["features"]))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def default_registry() -> FeatureRegistry:
    """13 active measures followed by the 84 enumerated passive features."""
    specs = [FeatureSpec(q, "active", q) for q in ACTIVE_QUESTIONS]
    for group in SENSOR_GROUPS[1:]:
        prefix = _PREFIX[group]
        specs.extend(FeatureSpec(f"{prefix}_{key}", group, key) for key in GROUP_KEYS[group])
    return FeatureRegistry(tuple(specs))


@dataclass
class ExtractionConfig:
    night_start: time = time(22, 0)
    night_end: time = time(6, 0)
    home: tuple[float, float] | None = None  # None: infer from night points
    grid_precision_deg: int = 3
    home_radius_m: float = 200.0
    app_category_map: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_APP_CATEGORY_MAP))
    step_thresholds: tuple[int, ...] = (5000, 7000, 10000)
    low_battery_pct: float = 20.0

    def __post_init__(self) -> None:
        if self.night_start == self.night_end:
            raise ValueError("night window is empty")
        if len(self.step_thresholds) != 3 or list(self.step_thresholds) != sorted(set(self.step_thresholds)):
            raise ValueError("need three strictly increasing step thresholds")
        bad = set(self.app_category_map.values()) - set(APP_CATEGORIES) - {"other"}
        if bad:
            raise ValueError(f"unknown app categories {sorted(bad)}")

    def is_night(self, t: time) -> bool:
        """Inclusive start, exclusive end; handles windows that wrap midnight."""
        t = t.replace(tzinfo=None)
        if self.night_start < self.night_end:
            return self.night_start <= t < self.night_end
        return t >= self.night_start or t < self.night_end

    def to_dict(self) -> dict:
        return {
            "v": REGISTRY_VERSION,
            "night_start": self.night_start.isoformat(timespec="minutes"),
            "night_end": self.night_end.isoformat(timespec="minutes"),
            "home": list(self.home) if self.home else None,
            "grid_precision_deg": self.grid_precision_deg,
            "home_radius_m": self.home_radius_m,
            "app_category_map": dict(sorted(self.app_category_map.items())),
            "step_thresholds": list(self.step_thresholds),
            "low_battery_pct": self.low_battery_pct,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ExtractionConfig":
        doc = dict(doc)
        if doc.pop("v", REGISTRY_VERSION) != REGISTRY_VERSION:
            raise ValueError("unsupported extraction config version")
        kwargs = {}
        for key in ("night_start", "night_end"):
            if key in doc:
                kwargs[key] = time.fromisoformat(doc.pop(key))
        if doc.get("home") is not None:
            kwargs["home"] = tuple(doc.pop("home"))
        else:
            doc.pop("home", None)
        if "step_thresholds" in doc:
            kwargs["step_thresholds"] = tuple(doc.pop("step_thresholds"))
        kwargs.update(doc)
        return cls(**kwargs)
