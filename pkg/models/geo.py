"""
Geodesy Engine
==============
Coordinate types, great-circle distance and the Error Distance Score (EDS).

Conventions:
  - WGS84 degrees, spherical Earth with mean radius 6371.0 km
  - Longitude is normalised to [-180, 180) on construction
  - Latitude outside [-90, 90] is rejected, never clamped
  - Haversine closed form: d = 2R * atan2(sqrt(a), sqrt(1 - a))
"""

import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple

import numpy as np

from models.errors import InvalidCoordinateError


EARTH_RADIUS_KM = 6371.0


# ═══════════════════════════════════════════════════════════════════════
# DOMAIN TYPES
# ═══════════════════════════════════════════════════════════════════════

def normalize_lon(lon: float) -> float:
    """Wrap a longitude into [-180, 180)."""
    if -180.0 <= lon < 180.0:
        return float(lon)
    return float((lon + 180.0) % 360.0 - 180.0)


@dataclass(frozen=True)
class Coordinate:
    """A WGS84 point in degrees."""
    lat: float
    lon: float

    def __post_init__(self):
        lat, lon = float(self.lat), float(self.lon)
        if not (math.isfinite(lat) and math.isfinite(lon)):
            raise InvalidCoordinateError(f"non-finite coordinate ({self.lat}, {self.lon})")
        if not -90.0 <= lat <= 90.0:
            raise InvalidCoordinateError(f"latitude {lat} outside [-90, 90]")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", normalize_lon(lon))

    def as_tuple(self) -> Tuple[float, float]:
        return (self.lat, self.lon)


@dataclass(frozen=True)
class SpatioTemporalPoint:
    """A timestamp (UTC epoch seconds) attached to a coordinate."""
    t: float
    loc: Coordinate

    def __post_init__(self):
        t = float(self.t)
        if not math.isfinite(t):
            raise InvalidCoordinateError(f"non-finite timestamp {self.t}")
        object.__setattr__(self, "t", t)


# ═══════════════════════════════════════════════════════════════════════
# DISTANCES
# ═══════════════════════════════════════════════════════════════════════

def haversine_km(a: Coordinate, b: Coordinate) -> float:
    """Great-circle distance in kilometres."""
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dphi = phi2 - phi1
    dlmb = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlmb / 2) ** 2
    h = min(1.0, max(0.0, h))
    return 2.0 * EARTH_RADIUS_KM * math.atan2(math.sqrt(h), math.sqrt(1.0 - h))


def haversine_km_array(lat1, lon1, lat2, lon2) -> np.ndarray:
    """Vectorised haversine; inputs broadcast like numpy arrays (degrees)."""
    phi1 = np.radians(lat1)
    phi2 = np.radians(lat2)
    dphi = phi2 - phi1
    dlmb = np.radians(np.asarray(lon2) - np.asarray(lon1))
    h = np.sin(dphi / 2) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlmb / 2) ** 2
    h = np.clip(h, 0.0, 1.0)
    return 2.0 * EARTH_RADIUS_KM * np.arctan2(np.sqrt(h), np.sqrt(1.0 - h))


def pairwise_haversine_km(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Distance matrix (n_points x n_centers) for (lat, lon) rows in degrees."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    return haversine_km_array(
        points[:, 0:1], points[:, 1:2], centers[None, :, 0], centers[None, :, 1]
    )


# ═══════════════════════════════════════════════════════════════════════
# ERROR DISTANCE SCORE
# ═══════════════════════════════════════════════════════════════════════

def eds_km(predicted: Coordinate, actual: Coordinate) -> float:
    """Error Distance Score: haversine distance between prediction and truth."""
    return haversine_km(predicted, actual)


def eds_km_many(pairs: Iterable[Tuple[Coordinate, Coordinate]]) -> np.ndarray:
    return np.array([eds_km(p, a) for p, a in pairs], dtype=np.float64)


def mean_eds_km(pairs: Sequence[Tuple[Coordinate, Coordinate]]) -> float:
    """Arithmetic mean EDS; an empty sequence is an error."""
    scores = eds_km_many(pairs)
    if scores.size == 0:
        raise ValueError("mean_eds_km needs at least one (predicted, actual) pair")
    return float(np.mean(scores))


def median_eds_km(pairs: Sequence[Tuple[Coordinate, Coordinate]]) -> float:
    scores = eds_km_many(pairs)
    if scores.size == 0:
        raise ValueError("median_eds_km needs at least one (predicted, actual) pair")
    return float(np.median(scores))
