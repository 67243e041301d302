"""
Trip & POI Ingestion
====================
Turns raw taxi records into driver sequences ready for featurisation.

Supported inputs:
  - polyline_csv: driver_id, start_time (epoch s), polyline ([[lon, lat], ...]),
    optional day_type / call_type. The public Porto file is accepted as-is
    (TAXI_ID, TIMESTAMP, POLYLINE, DAY_TYPE, CALL_TYPE).
  - od_csv: driver_id, start_time, pickup_lat, pickup_lon, dropoff_lat,
    dropoff_lon, optional dropoff_time.
  - POI csv: lat, lon, name, category_path ("Food → Asian Restaurant → ...").
  - Holiday calendar: one ISO-8601 date per line.

Sequence construction:
  - Trips grouped by driver, sorted by start time (ties keep input order)
  - Each trip reduced to its pick-up and drop-off point
  - A gap above max_gap_hours starts a new shift; histories never cross it
  - One sample per trip with >= 1 earlier trip in its shift; the history holds
    up to k/2 previous (pick-up, drop-off) pairs
"""

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, Iterator, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from models.errors import InvalidCoordinateError, SchemaError, TripFileError
from models.geo import Coordinate, SpatioTemporalPoint

logger = logging.getLogger(__name__)


POLYLINE_CSV = "polyline_csv"
OD_CSV = "od_csv"
TRIP_FORMATS = (POLYLINE_CSV, OD_CSV)

DEFAULT_K = 8
DEFAULT_MAX_GAP_HOURS = 3.0
DEFAULT_POLYLINE_INTERVAL_S = 15.0        # Porto GPS sampling period

MACRO_CATEGORIES = (
    "Arts and Entertainment",
    "College and University",
    "Event",
    "Food",
    "Nightlife Spot",
    "Outdoors and Recreation",
    "Professional and Other Places",
    "Residence",
    "Shop and Service",
    "Travel and Transport",
)

# Porto DAY_TYPE letters: A = normal day, B = holiday, C = day before a holiday
PORTO_DAY_TYPES = {"A": 0, "C": 1, "B": 2}

COLUMN_ALIASES = {
    "taxi_id": "driver_id",
    "timestamp": "start_time",
    "pickup_time": "start_time",
}

REQUIRED_COLUMNS = {
    POLYLINE_CSV: ("driver_id", "start_time", "polyline"),
    OD_CSV: ("driver_id", "start_time", "pickup_lat", "pickup_lon", "dropoff_lat", "dropoff_lon"),
}

POI_COLUMNS = ("lat", "lon", "name", "category_path")


# ═══════════════════════════════════════════════════════════════════════
# RECORD TYPES
# ═══════════════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class TripRecord:
    """One taxi ride reduced to what the sequence builder needs."""
    driver_id: str
    start_time: float
    pickup: Coordinate
    dropoff: Coordinate
    end_time: float                                     # drop-off time (== start_time when unknown)
    raw_polyline: Optional[Tuple[Coordinate, ...]] = None
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.start_time) or not math.isfinite(self.end_time):
            raise ValueError("trip timestamps must be finite")
        if self.end_time < self.start_time:
            raise ValueError(f"drop-off time {self.end_time} precedes start {self.start_time}")
        if self.raw_polyline is not None:
            if len(self.raw_polyline) < 2:
                raise ValueError(f"polyline has {len(self.raw_polyline)} points; need at least 2")
            if self.raw_polyline[0] != self.pickup or self.raw_polyline[-1] != self.dropoff:
                raise ValueError("polyline endpoints must equal pick-up and drop-off")


class TemporalMeta(NamedTuple):
    hour: int           # 0..23, dataset-local time
    weekday: int        # 0 = Monday .. 6 = Sunday
    day_type: int       # 0 workday, 1 pre-holiday, 2 holiday/weekend


@dataclass(frozen=True)
class DriverSequence:
    """One training/evaluation sample: history ⊕ current pick-up -> target drop-off."""
    sample_id: str
    driver_id: str
    shift_id: str
    history: Tuple[SpatioTemporalPoint, ...]            # P, D, P, D, ... (even length <= k)
    current_pickup: SpatioTemporalPoint
    target: Optional[Coordinate]                        # absent at inference time
    temporal_meta: TemporalMeta                         # meta of the current pick-up
    step_meta: Tuple[TemporalMeta, ...]                 # aligned with history ⊕ current_pickup
    previous_polyline: Optional[Tuple[Coordinate, ...]] = None

    @property
    def points(self) -> Tuple[SpatioTemporalPoint, ...]:
        return self.history + (self.current_pickup,)

    @property
    def n_prior_trips(self) -> int:
        return len(self.history) // 2


@dataclass(frozen=True)
class Poi:
    loc: Coordinate
    macro_category: str
    name: str
    category_path: Tuple[str, ...]


class RowReject(NamedTuple):
    row: int            # 1-based data row (header excluded)
    reason: str


@dataclass
class ParsedTrips:
    records: List[TripRecord]
    rejects: List[RowReject]

    @property
    def reject_count(self) -> int:
        return len(self.rejects)

    def __iter__(self) -> Iterator[TripRecord]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class ParsedPois:
    pois: List[Poi]
    rejects: List[RowReject]

    @property
    def reject_count(self) -> int:
        return len(self.rejects)

    def category_histogram(self) -> Dict[str, int]:
        counts = Counter(p.macro_category for p in self.pois)
        return {c: counts.get(c, 0) for c in MACRO_CATEGORIES}


# ═══════════════════════════════════════════════════════════════════════
# TRIP FILES
# ═══════════════════════════════════════════════════════════════════════

def _canonical_column(name: str) -> str:
    key = name.strip().lower()
    return COLUMN_ALIASES.get(key, key)


def _read_table(path, required: Sequence[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise TripFileError(f"input file not found: {path}")
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise SchemaError(f"{path}: file is empty (no header row)")
    except (OSError, UnicodeDecodeError, pd.errors.ParserError) as exc:
        raise TripFileError(f"cannot read {path}: {exc}") from exc
    df.columns = [_canonical_column(c) for c in df.columns]
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}; found {list(df.columns)}")
    return df


def _parse_polyline(text: str) -> Tuple[Coordinate, ...]:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"polyline is not a JSON array: {exc.msg}") from exc
    if not isinstance(raw, list):
        raise ValueError("polyline is not a JSON array")
    points = []
    for pair in raw:
        if not isinstance(pair, list) or len(pair) != 2:
            raise ValueError(f"polyline point {pair!r} is not a [lon, lat] pair")
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in pair):
            raise ValueError(f"polyline point {pair!r} has a non-numeric coordinate")
        lon, lat = float(pair[0]), float(pair[1])
        points.append(Coordinate(lat, lon))
    if len(points) < 2:
        raise ValueError(f"polyline has {len(points)} points; need at least 2")
    return tuple(points)


def _metadata(row: Mapping[str, str]) -> Dict[str, str]:
    return {key: row[key].strip() for key in ("day_type", "call_type") if row.get(key, "").strip()}


def _polyline_row(row: Mapping[str, str], interval_s: float) -> TripRecord:
    polyline = _parse_polyline(row["polyline"])
    start = float(row["start_time"])
    return TripRecord(
        driver_id=row["driver_id"].strip(),
        start_time=start,
        pickup=polyline[0],
        dropoff=polyline[-1],
        end_time=start + interval_s * (len(polyline) - 1),
        raw_polyline=polyline,
        metadata=_metadata(row),
    )


def _od_row(row: Mapping[str, str]) -> TripRecord:
    start = float(row["start_time"])
    end_text = row.get("dropoff_time", "").strip()
    return TripRecord(
        driver_id=row["driver_id"].strip(),
        start_time=start,
        pickup=Coordinate(float(row["pickup_lat"]), float(row["pickup_lon"])),
        dropoff=Coordinate(float(row["dropoff_lat"]), float(row["dropoff_lon"])),
        end_time=float(end_text) if end_text else start,
        metadata=_metadata(row),
    )


def parse_trips(path, fmt: str, polyline_interval_s: float = DEFAULT_POLYLINE_INTERVAL_S) -> ParsedTrips:
    """Parse a trip file; malformed rows are returned as RowRejects, not raised."""
    if fmt not in TRIP_FORMATS:
        raise SchemaError(f"unknown trip format '{fmt}'; expected one of {TRIP_FORMATS}")
    df = _read_table(path, REQUIRED_COLUMNS[fmt])

    records, rejects = [], []
    for row_no, row in enumerate(df.to_dict("records"), start=1):
        try:
            if not row["driver_id"].strip():
                raise ValueError("empty driver_id")
            if fmt == POLYLINE_CSV:
                record = _polyline_row(row, polyline_interval_s)
            else:
                record = _od_row(row)
        except (ValueError, InvalidCoordinateError) as exc:
            logger.debug("%s row %d rejected: %s", path, row_no, exc)
            rejects.append(RowReject(row_no, str(exc)))
            continue
        records.append(record)

    if rejects:
        logger.warning("%s: %d of %d rows rejected", path, len(rejects), len(df))
    logger.info("Parsed %d trips from %s (%s)", len(records), path, fmt)
    return ParsedTrips(records, rejects)


def select_top_drivers(trips: Iterable[TripRecord], n: int) -> List[TripRecord]:
    """Keep the n drivers with most trips (ties broken by driver_id)."""
    trips = list(trips)
    counts = Counter(t.driver_id for t in trips)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = {driver for driver, _ in ranked[:n]}
    return [t for t in trips if t.driver_id in keep]


# ═══════════════════════════════════════════════════════════════════════
# POI FILES
# ═══════════════════════════════════════════════════════════════════════

def _category_key(name: str) -> str:
    return " ".join(name.replace("&", " and ").lower().split())


_CATEGORY_LOOKUP = {_category_key(c): c for c in MACRO_CATEGORIES}


def split_category_path(text: str) -> Tuple[str, ...]:
    parts = text.replace("->", "→").split("→")
    return tuple(p.strip() for p in parts if p.strip())


def parse_pois(path) -> ParsedPois:
    """Parse a POI csv; only the macro-category (path root) is kept for features."""
    path = Path(path)
    if not path.is_file():
        raise TripFileError(f"POI file not found: {path}")
    if path.stat().st_size == 0:
        return ParsedPois([], [])
    df = _read_table(path, POI_COLUMNS)

    pois, rejects = [], []
    for row_no, row in enumerate(df.to_dict("records"), start=1):
        try:
            loc = Coordinate(float(row["lat"]), float(row["lon"]))
            path_parts = split_category_path(row["category_path"])
            if not path_parts:
                raise ValueError("empty category path")
            macro = _CATEGORY_LOOKUP.get(_category_key(path_parts[0]))
            if macro is None:
                raise ValueError(f"unknown macro-category '{path_parts[0]}'")
        except (ValueError, InvalidCoordinateError) as exc:
            logger.debug("%s row %d rejected: %s", path, row_no, exc)
            rejects.append(RowReject(row_no, str(exc)))
            continue
        pois.append(Poi(loc, macro, row["name"].strip(), path_parts))

    if rejects:
        logger.warning("%s: %d POIs rejected", path, len(rejects))
    logger.info("Parsed %d POIs from %s", len(pois), path)
    return ParsedPois(pois, rejects)


# ═══════════════════════════════════════════════════════════════════════
# TEMPORAL METADATA
# ═══════════════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class HolidayCalendar:
    """Weekends are always holiday-type; extra dates come from a calendar file."""
    holidays: FrozenSet[date] = frozenset()

    def is_holiday_type(self, day: date) -> bool:
        return day.weekday() >= 5 or day in self.holidays

    def day_type(self, day: date) -> int:
        if self.is_holiday_type(day):
            return 2
        if self.is_holiday_type(day + timedelta(days=1)):
            return 1
        return 0


def load_holiday_calendar(path) -> HolidayCalendar:
    path = Path(path)
    if not path.is_file():
        raise TripFileError(f"holiday calendar not found: {path}")
    days = set()
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        try:
            days.add(date.fromisoformat(text))
        except ValueError as exc:
            raise SchemaError(f"{path}:{line_no}: not an ISO-8601 date: {text!r}") from exc
    return HolidayCalendar(frozenset(days))


def _temporal_meta_many(
    times: Sequence[float],
    calendar: HolidayCalendar,
    timezone: str,
) -> List[TemporalMeta]:
    if len(times) == 0:
        return []
    local = pd.to_datetime(np.asarray(times, dtype=np.float64), unit="s", utc=True).tz_convert(timezone)
    day_types: Dict[date, int] = {}
    metas = []
    for hour, weekday, day in zip(local.hour, local.dayofweek, local.date):
        if day not in day_types:
            day_types[day] = calendar.day_type(day)
        metas.append(TemporalMeta(int(hour), int(weekday), day_types[day]))
    return metas


def derive_temporal_meta(
    t: float,
    holiday_calendar: Optional[HolidayCalendar] = None,
    timezone: str = "UTC",
    native_day_type: Optional[int] = None,
) -> TemporalMeta:
    """(hour, weekday, day_type) of an epoch timestamp in the dataset's timezone."""
    meta = _temporal_meta_many([t], holiday_calendar or HolidayCalendar(), timezone)[0]
    if native_day_type is not None:
        meta = meta._replace(day_type=int(native_day_type))
    return meta


def _native_day_type(trip: TripRecord) -> Optional[int]:
    code = trip.metadata.get("day_type", "").strip().upper()
    if code in PORTO_DAY_TYPES:
        return PORTO_DAY_TYPES[code]
    if code.isdigit() and int(code) in (0, 1, 2):
        return int(code)
    return None


# ═══════════════════════════════════════════════════════════════════════
# SEQUENCE CONSTRUCTION
# ═══════════════════════════════════════════════════════════════════════

class _TripPoints(NamedTuple):
    trip: TripRecord
    pickup: SpatioTemporalPoint
    dropoff: SpatioTemporalPoint
    pickup_meta: TemporalMeta
    dropoff_meta: TemporalMeta


def _driver_points(trips: List[TripRecord], calendar: HolidayCalendar, timezone: str) -> List[_TripPoints]:
    # drop-off time never runs past the next pick-up, keeping the point stream ordered
    dropoff_times = []
    for i, trip in enumerate(trips):
        end = trip.end_time
        if i + 1 < len(trips):
            end = max(trip.start_time, min(end, trips[i + 1].start_time))
        dropoff_times.append(end)

    pickup_metas = _temporal_meta_many([t.start_time for t in trips], calendar, timezone)
    dropoff_metas = _temporal_meta_many(dropoff_times, calendar, timezone)

    out = []
    for trip, end, p_meta, d_meta in zip(trips, dropoff_times, pickup_metas, dropoff_metas):
        native = _native_day_type(trip)
        if native is not None:
            p_meta = p_meta._replace(day_type=native)
            d_meta = d_meta._replace(day_type=native)
        out.append(_TripPoints(
            trip,
            SpatioTemporalPoint(trip.start_time, trip.pickup),
            SpatioTemporalPoint(end, trip.dropoff),
            p_meta,
            d_meta,
        ))
    return out


def _breaks_shift(prev: _TripPoints, cur: _TripPoints, max_gap_s: float) -> bool:
    if cur.pickup.t - prev.dropoff.t > max_gap_s:
        return True
    # a ride longer than the gap limit cannot sit inside a history
    return prev.dropoff.t - prev.pickup.t > max_gap_s


def build_sequences(
    trips: Iterable[TripRecord],
    k: int = DEFAULT_K,
    max_gap_hours: float = DEFAULT_MAX_GAP_HOURS,
    calendar: Optional[HolidayCalendar] = None,
    timezone: str = "UTC",
) -> List[DriverSequence]:
    """Build one DriverSequence per trip that has an earlier trip in its shift."""
    if k < 2 or k % 2 != 0:
        raise ValueError(f"k must be an even integer >= 2, got {k}")
    calendar = calendar or HolidayCalendar()
    max_gap_s = max_gap_hours * 3600.0
    max_pairs = k // 2

    by_driver: Dict[str, List[TripRecord]] = {}
    for trip in trips:
        by_driver.setdefault(trip.driver_id, []).append(trip)

    sequences: List[DriverSequence] = []
    for driver_id in sorted(by_driver):
        ordered = sorted(by_driver[driver_id], key=lambda tr: tr.start_time)
        points = _driver_points(ordered, calendar, timezone)

        shift_no, shift_start = 0, 0
        for j, cur in enumerate(points):
            if j > 0 and _breaks_shift(points[j - 1], cur, max_gap_s):
                shift_no += 1
                shift_start = j
            if j == shift_start:
                continue

            history, metas = [], []
            for prev in points[max(shift_start, j - max_pairs):j]:
                history.extend((prev.pickup, prev.dropoff))
                metas.extend((prev.pickup_meta, prev.dropoff_meta))
            metas.append(cur.pickup_meta)

            polyline = points[j - 1].trip.raw_polyline
            sequences.append(DriverSequence(
                sample_id=f"{driver_id}:{j}",
                driver_id=driver_id,
                shift_id=f"{driver_id}:{shift_no}",
                history=tuple(history),
                current_pickup=cur.pickup,
                target=cur.trip.dropoff,
                temporal_meta=cur.pickup_meta,
                step_meta=tuple(metas),
                previous_polyline=polyline,
            ))

    logger.info("Built %d sequences from %d drivers (k=%d, max gap %.1fh)",
                len(sequences), len(by_driver), k, max_gap_hours)
    return sequences


def check_sequence_invariants(
    seq: DriverSequence,
    k: int = DEFAULT_K,
    max_gap_hours: float = DEFAULT_MAX_GAP_HOURS,
) -> List[str]:
    """Return the list of violated DriverSequence invariants (empty when valid)."""
    problems = []
    n = len(seq.history)
    if n % 2 != 0:
        problems.append(f"history length {n} is odd")
    if n > k:
        problems.append(f"history length {n} exceeds k={k}")
    if len(seq.step_meta) != n + 1:
        problems.append("step_meta not aligned with history + pick-up")
    points = seq.points
    for a, b in zip(points, points[1:]):
        if b.t < a.t:
            problems.append(f"points out of order ({a.t} > {b.t})")
        if b.t - a.t > max_gap_hours * 3600.0:
            problems.append(f"gap of {(b.t - a.t) / 3600.0:.2f}h exceeds {max_gap_hours}h")
    for meta in seq.step_meta:
        if not (0 <= meta.hour <= 23 and 0 <= meta.weekday <= 6 and 0 <= meta.day_type <= 2):
            problems.append(f"temporal meta out of range: {meta}")
    return problems


# ═══════════════════════════════════════════════════════════════════════
# SEQUENCE FILES (JSON lines, exact float round-trip)
# ═══════════════════════════════════════════════════════════════════════

def _point_row(p: SpatioTemporalPoint) -> List[float]:
    return [p.t, p.loc.lat, p.loc.lon]


def _row_point(row: Sequence[float]) -> SpatioTemporalPoint:
    return SpatioTemporalPoint(row[0], Coordinate(row[1], row[2]))


def sequence_to_dict(seq: DriverSequence) -> dict:
    return {
        "sample_id": seq.sample_id,
        "driver_id": seq.driver_id,
        "shift_id": seq.shift_id,
        "history": [_point_row(p) for p in seq.history],
        "current_pickup": _point_row(seq.current_pickup),
        "target": None if seq.target is None else [seq.target.lat, seq.target.lon],
        "temporal_meta": list(seq.temporal_meta),
        "step_meta": [list(m) for m in seq.step_meta],
        "previous_polyline": None if seq.previous_polyline is None
        else [[c.lat, c.lon] for c in seq.previous_polyline],
    }


def sequence_from_dict(row: dict) -> DriverSequence:
    return DriverSequence(
        sample_id=row["sample_id"],
        driver_id=row["driver_id"],
        shift_id=row["shift_id"],
        history=tuple(_row_point(p) for p in row["history"]),
        current_pickup=_row_point(row["current_pickup"]),
        target=None if row["target"] is None else Coordinate(*row["target"]),
        temporal_meta=TemporalMeta(*row["temporal_meta"]),
        step_meta=tuple(TemporalMeta(*m) for m in row["step_meta"]),
        previous_polyline=None if row["previous_polyline"] is None
        else tuple(Coordinate(lat, lon) for lat, lon in row["previous_polyline"]),
    )


def save_sequences(path, sequences: Iterable[DriverSequence]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for seq in sequences:
            fh.write(json.dumps(sequence_to_dict(seq), sort_keys=True, separators=(",", ":")))
            fh.write("\n")
            n += 1
    logger.info("Wrote %d sequences to %s", n, path)
    return n


def load_sequences(path) -> List[DriverSequence]:
    path = Path(path)
    if not path.is_file():
        raise TripFileError(f"sequence file not found: {path}")
    sequences = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                sequences.append(sequence_from_dict(json.loads(line)))
            except (KeyError, TypeError, ValueError) as exc:
                raise SchemaError(f"{path}:{line_no}: malformed sequence record: {exc}") from exc
    return sequences
