import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from data.ingest import TripRecord, build_sequences, parse_pois
from data.synthetic_city import SyntheticCityParams, generate_city
from models.clustering_engine import fit_destination_clusters
from models.geo import Coordinate

FIXTURES = Path(__file__).resolve().parent / "fixtures"

# Monday 2015-01-05 10:00 UTC
MONDAY_10AM = 1_420_452_000.0


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def trips_path() -> Path:
    return FIXTURES / "trips_polyline.csv"


@pytest.fixture
def pois_path() -> Path:
    return FIXTURES / "pois.csv"


@pytest.fixture
def holidays_path() -> Path:
    return FIXTURES / "holidays.txt"


def make_trip(driver: str, start: float, pickup=(41.15, -8.61), dropoff=(41.16, -8.60),
              duration_s: float = 600.0, **metadata) -> TripRecord:
    return TripRecord(driver, float(start), Coordinate(*pickup), Coordinate(*dropoff),
                      float(start) + duration_s, metadata=metadata)


@pytest.fixture(scope="session")
def small_city():
    """Four zones, six drivers; enough structure for fast model tests."""
    return generate_city(SyntheticCityParams(n_clusters=4, n_drivers=6, trips_per_driver=24,
                                             min_zone_separation_km=1.5, seed=3))


@pytest.fixture(scope="session")
def small_sequences(small_city):
    return build_sequences(small_city.trips, timezone="UTC")


@pytest.fixture(scope="session")
def small_pois(small_city):
    return list(small_city.pois)


@pytest.fixture(scope="session")
def small_clusters(small_sequences):
    return fit_destination_clusters(small_sequences, 4, seed=0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
