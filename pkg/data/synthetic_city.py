"""
Synthetic city generator.

A seeded stand-in for the city datasets with learnable structure:
  - n_clusters activity zones scattered around a city centre
  - every zone has a preferred next zone (a fixed derangement) taken with
    probability p_transition; otherwise the driver heads to their home
    zone (p_home) or to a uniformly random zone
  - the next pick-up happens near the previous drop-off, 20-60 minutes later;
    shifts of several trips are separated by an overnight break
  - GPS traces are straight-line interpolations at the sampling interval
  - POIs: each zone has a dominant macro-category
"""

import json
import logging
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
import pandas as pd

from data.ingest import MACRO_CATEGORIES, Poi, TripRecord
from models.geo import Coordinate, haversine_km_array

logger = logging.getLogger(__name__)

KM_PER_DEG_LAT = 111.195


@dataclass
class SyntheticCityParams:
    """Parameters of the generated city."""
    n_clusters: int = 12
    n_drivers: int = 40
    trips_per_driver: int = 75
    trips_per_shift: Tuple[int, int] = (5, 9)

    # Geography (default centre: Porto)
    center_lat: float = 41.1579
    center_lon: float = -8.6291
    city_radius_km: float = 6.0
    min_zone_separation_km: float = 2.0
    zone_spread_km: float = 0.25

    # Habits
    p_transition: float = 0.80
    p_home: float = 0.15

    # Timing
    start_time: float = 1_420_070_400.0          # 2015-01-01 00:00 UTC
    gps_interval_s: float = 15.0
    speed_kmh: float = 25.0
    gap_minutes: Tuple[float, float] = (20.0, 60.0)
    shift_break_hours: Tuple[float, float] = (8.0, 14.0)

    pois_per_zone: int = 8
    n_holidays: int = 2
    seed: int = 0


@dataclass
class SyntheticCity:
    params: SyntheticCityParams
    zone_centers: np.ndarray                      # (n_clusters, 2)
    next_zone: np.ndarray                         # (n_clusters,) derangement
    home_zone: Dict[str, int]
    trips: List[TripRecord] = field(default_factory=list)
    pois: List[Poi] = field(default_factory=list)
    holidays: List[date] = field(default_factory=list)

    def mean_pairwise_zone_km(self) -> float:
        c = self.zone_centers
        d = haversine_km_array(c[:, None, 0], c[:, None, 1], c[None, :, 0], c[None, :, 1])
        n = c.shape[0]
        return float(d.sum() / (n * (n - 1)))


def _offset(rng: np.random.Generator, lat: float, lon: float, sigma_km: float) -> Tuple[float, float]:
    dy, dx = rng.normal(0.0, sigma_km, size=2)
    return (lat + dy / KM_PER_DEG_LAT,
            lon + dx / (KM_PER_DEG_LAT * np.cos(np.radians(lat))))


def _zone_centers(p: SyntheticCityParams, rng: np.random.Generator) -> np.ndarray:
    centers: List[Tuple[float, float]] = []
    attempts = 0
    while len(centers) < p.n_clusters:
        attempts += 1
        if attempts > 10_000:
            raise ValueError("cannot place zones; lower min_zone_separation_km or raise city_radius_km")
        r = p.city_radius_km * np.sqrt(rng.random())
        theta = rng.uniform(0.0, 2.0 * np.pi)
        lat = p.center_lat + r * np.sin(theta) / KM_PER_DEG_LAT
        lon = p.center_lon + r * np.cos(theta) / (KM_PER_DEG_LAT * np.cos(np.radians(p.center_lat)))
        if centers:
            arr = np.array(centers)
            if haversine_km_array(arr[:, 0], arr[:, 1], lat, lon).min() < p.min_zone_separation_km:
                continue
        centers.append((lat, lon))
    return np.array(centers)


def _derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def _polyline(a: Tuple[float, float], b: Tuple[float, float], n_points: int) -> Tuple[Coordinate, ...]:
    lats = np.round(np.linspace(a[0], b[0], n_points), 6)
    lons = np.round(np.linspace(a[1], b[1], n_points), 6)
    return tuple(Coordinate(float(la), float(lo)) for la, lo in zip(lats, lons))


def generate_city(params: SyntheticCityParams = None) -> SyntheticCity:
    p = params or SyntheticCityParams()
    if p.n_clusters < 2:
        raise ValueError("a synthetic city needs at least two zones")
    rng = np.random.default_rng(p.seed)
    centers = _zone_centers(p, rng)
    next_zone = _derangement(p.n_clusters, rng)
    drivers = [f"D{i:03d}" for i in range(p.n_drivers)]
    home = {d: int(rng.integers(p.n_clusters)) for d in drivers}
    city = SyntheticCity(p, centers, next_zone, home)

    for driver in drivers:
        t = p.start_time + rng.uniform(5.0, 10.0) * 3600.0
        zone = home[driver]
        left_in_shift = int(rng.integers(p.trips_per_shift[0], p.trips_per_shift[1] + 1))
        for _ in range(p.trips_per_driver):
            u = rng.random()
            if u < p.p_transition:
                dest = int(next_zone[zone])
            elif u < p.p_transition + p.p_home:
                dest = home[driver]
            else:
                dest = int(rng.integers(p.n_clusters))

            a = _offset(rng, centers[zone, 0], centers[zone, 1], p.zone_spread_km)
            b = _offset(rng, centers[dest, 0], centers[dest, 1], p.zone_spread_km)
            dist = float(haversine_km_array(a[0], a[1], b[0], b[1]))
            duration = max(dist / p.speed_kmh * 3600.0, p.gps_interval_s)
            n_points = int(np.ceil(duration / p.gps_interval_s)) + 1
            poly = _polyline(a, b, n_points)
            start = float(round(t))
            end = start + p.gps_interval_s * (n_points - 1)
            city.trips.append(TripRecord(driver, start, poly[0], poly[-1], end, raw_polyline=poly))

            left_in_shift -= 1
            if left_in_shift == 0:
                t = end + rng.uniform(*p.shift_break_hours) * 3600.0
                left_in_shift = int(rng.integers(p.trips_per_shift[0], p.trips_per_shift[1] + 1))
            else:
                t = end + rng.uniform(*p.gap_minutes) * 60.0
            zone = dest

    for z in range(p.n_clusters):
        dominant = MACRO_CATEGORIES[z % len(MACRO_CATEGORIES)]
        for j in range(p.pois_per_zone):
            category = dominant if rng.random() < 0.7 else MACRO_CATEGORIES[int(rng.integers(len(MACRO_CATEGORIES)))]
            lat, lon = _offset(rng, centers[z, 0], centers[z, 1], p.zone_spread_km)
            city.pois.append(Poi(Coordinate(round(lat, 6), round(lon, 6)), category,
                                 f"poi-{z}-{j}", (category, f"{category} Venue")))

    first_day = datetime.fromtimestamp(p.start_time, tz=timezone.utc).date()
    city.holidays = [first_day + timedelta(days=10 + 7 * i + 2) for i in range(p.n_holidays)]
    logger.info("Synthetic city: %d zones, %d drivers, %d trips, %d POIs",
                p.n_clusters, p.n_drivers, len(city.trips), len(city.pois))
    return city


def write_city(city: SyntheticCity, out_dir) -> Dict[str, Path]:
    """Write trips.csv (polyline_csv), pois.csv and holidays.txt; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"trips": out / "trips.csv", "pois": out / "pois.csv", "holidays": out / "holidays.txt"}

    trips = pd.DataFrame({
        "driver_id": [t.driver_id for t in city.trips],
        "start_time": [int(t.start_time) for t in city.trips],
        "polyline": [json.dumps([[c.lon, c.lat] for c in t.raw_polyline], separators=(",", ":"))
                     for t in city.trips],
    })
    trips.to_csv(paths["trips"], index=False, lineterminator="\n")

    pois = pd.DataFrame({
        "lat": [p.loc.lat for p in city.pois],
        "lon": [p.loc.lon for p in city.pois],
        "name": [p.name for p in city.pois],
        "category_path": [" → ".join(p.category_path) for p in city.pois],
    })
    pois.to_csv(paths["pois"], index=False, encoding="utf-8", lineterminator="\n")

    paths["holidays"].write_text("".join(f"{d.isoformat()}\n" for d in city.holidays), encoding="utf-8")
    logger.info("Synthetic city written to %s", out)
    return paths
