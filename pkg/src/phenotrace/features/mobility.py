"""Location features: haversine distances, gyration, entropy and home."""

from __future__ import annotations

from collections import Counter
from typing import Sequence

import numpy as np

from .registry import LOCATION_KEYS, ExtractionConfig

EARTH_RADIUS_M = 6_371_008.8


def haversine(lat1, lon1, lat2, lon2):
    """Great-circle distance in meters; broadcasts over numpy arrays."""
    phi1, phi2 = np.radians(lat1), np.radians(lat2)
    dphi = phi2 - phi1
    dlam = np.radians(np.asarray(lon2) - np.asarray(lon1))
    a = np.sin(dphi / 2) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlam / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def _as_array(points) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.size == 0:
        return arr.reshape(0, 2)
    return arr.reshape(-1, 2)


def radius_of_gyration(points) -> float:
    """RMS haversine distance of ``(lat, lon)`` points from their lat/lon centroid."""
    pts = _as_array(points)
    if len(pts) == 0:
        return np.nan
    lat_c, lon_c = pts.mean(axis=0)
    d = haversine(pts[:, 0], pts[:, 1], lat_c, lon_c)
    return float(np.sqrt(np.mean(d**2)))


def grid_cells(points, precision: int) -> list[tuple[float, float]]:
    pts = np.round(_as_array(points), precision)
    return [(float(a), float(b)) for a, b in pts]


def location_entropy(points, config: ExtractionConfig | None = None) -> float:
    """Shannon entropy (nats) of the share of points per rounded grid cell."""
    precision = (config or ExtractionConfig()).grid_precision_deg
    cells = grid_cells(points, precision)
    if not cells:
        return np.nan
    counts = np.array(list(Counter(cells).values()), dtype=float)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def path_length(points) -> float:
    pts = _as_array(points)
    if len(pts) < 2:
        return 0.0
    return float(haversine(pts[:-1, 0], pts[:-1, 1], pts[1:, 0], pts[1:, 1]).sum())


def infer_home(points, night_mask: Sequence[bool] | None, config: ExtractionConfig | None = None):
    """Centroid of the grid cell holding the most night points.

    ``points`` must be chronological; ties go to the cell seen first. Falls
    back to all points when there are no night points. Returns ``None`` when
    there are no points at all.
    """
    config = config or ExtractionConfig()
    pts = _as_array(points)
    if len(pts) == 0:
        return None
    if night_mask is not None and np.any(night_mask):
        pts = pts[np.asarray(night_mask, dtype=bool)]
    cells = grid_cells(pts, config.grid_precision_deg)
    counts = Counter(cells)
    first_seen: dict[tuple[float, float], int] = {}
    for i, c in enumerate(cells):
        first_seen.setdefault(c, i)
    best = min(counts, key=lambda c: (-counts[c], first_seen[c]))
    members = pts[[c == best for c in cells]]
    lat, lon = members.mean(axis=0)
    return float(lat), float(lon)


def home_features(points, night_mask, home, config: ExtractionConfig | None = None) -> dict[str, float]:
    """Distances from home, share of points near home, and night path length."""
    config = config or ExtractionConfig()
    keys = ("max_home_distance", "mean_home_distance", "median_home_distance", "time_at_home", "night_movement")
    pts = _as_array(points)
    if home is None or len(pts) == 0:
        return dict.fromkeys(keys, np.nan)
    d = haversine(pts[:, 0], pts[:, 1], home[0], home[1])
    night = pts[np.asarray(night_mask, dtype=bool)] if night_mask is not None else pts[:0]
    return {
        "max_home_distance": float(d.max()),
        "mean_home_distance": float(d.mean()),
        "median_home_distance": float(np.median(d)),
        "time_at_home": float(np.mean(d <= config.home_radius_m)),
        "night_movement": path_length(night),
    }


def location_day_features(points, night_mask, home, config: ExtractionConfig | None = None) -> dict[str, float]:
    """The 13 location features for one day of chronological points."""
    config = config or ExtractionConfig()
    pts = _as_array(points)
    if len(pts) == 0:
        return dict.fromkeys(LOCATION_KEYS, np.nan)
    out = {
        "mean_lat": float(pts[:, 0].mean()),
        "mean_lon": float(pts[:, 1].mean()),
        "total_distance": path_length(pts),
        "location_count": float(len(set(grid_cells(pts, config.grid_precision_deg)))),
        "radius_of_gyration": radius_of_gyration(pts),
        "sd_lat": float(pts[:, 0].std()),
        "sd_lon": float(pts[:, 1].std()),
        "entropy": location_entropy(pts, config),
    }
    out.update(home_features(pts, night_mask, home, config))
    return {k: out[k] for k in LOCATION_KEYS}
