"""
Destination Clustering Engine
=============================
K-means over training drop-off points under the haversine metric.

Methodology:
  - k-means++ seeding from the run seed
  - Lloyd iterations: haversine assignment (ties -> lowest id), centroid update
    as the 3-D unit-vector mean re-projected to the sphere
  - A centroid update is kept only if it does not raise that cluster's squared
    error, so inertia is non-increasing every iteration
  - Empty clusters are re-seeded from the point farthest from its centroid
  - Stops when no centroid moves more than tol_km, or after max_iters
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from models.errors import ClusteringError, SchemaError, TripFileError
from models.geo import Coordinate, haversine_km_array, pairwise_haversine_km

logger = logging.getLogger(__name__)

CLUSTER_FILE_VERSION = 1
ASSIGN_CHUNK = 4096

PointsLike = Union[Sequence[Coordinate], np.ndarray]


# ═══════════════════════════════════════════════════════════════════════
# MODEL TYPES
# ═══════════════════════════════════════════════════════════════════════

@dataclass
class ClusterModel:
    """Fitted centroids; immutable by convention once returned by fit_kmeans."""
    centroids: np.ndarray                   # (m, 2) lat, lon degrees
    k_param: int
    inertia: float                          # sum of squared haversine distances, km^2
    rng_seed: int
    n_iter: int = 0
    inertia_history: List[float] = field(default_factory=list)

    @property
    def m(self) -> int:
        return int(self.centroids.shape[0])

    def centroid(self, i: int) -> Coordinate:
        return Coordinate(float(self.centroids[i, 0]), float(self.centroids[i, 1]))

    def assign(self, p: Coordinate) -> int:
        return assign(self, p)

    def assign_many(self, points: PointsLike) -> np.ndarray:
        return assign_many(self, points)


@dataclass(frozen=True)
class ClusterTrace:
    ids: Tuple[int, ...]

    def __len__(self) -> int:
        return len(self.ids)


# ═══════════════════════════════════════════════════════════════════════
# GEOMETRY HELPERS
# ═══════════════════════════════════════════════════════════════════════

def as_latlon_array(points: PointsLike) -> np.ndarray:
    if isinstance(points, np.ndarray):
        arr = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    else:
        arr = np.array([[p.lat, p.lon] for p in points], dtype=np.float64).reshape(-1, 2)
    return arr


def _to_unit(latlon: np.ndarray) -> np.ndarray:
    lat = np.radians(latlon[:, 0])
    lon = np.radians(latlon[:, 1])
    return np.stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], axis=1)


def _from_unit(xyz: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(xyz, axis=1, keepdims=True)
    xyz = xyz / norm
    lat = np.degrees(np.arcsin(np.clip(xyz[:, 2], -1.0, 1.0)))
    lon = np.degrees(np.arctan2(xyz[:, 1], xyz[:, 0]))
    lon = np.where(lon >= 180.0, lon - 360.0, lon)
    return np.stack([lat, lon], axis=1)


def count_distinct_locations(points: PointsLike) -> int:
    """Distinct positions on the sphere; lat/lon aliases (poles, lon ±180) count once."""
    arr = as_latlon_array(points)
    if arr.shape[0] == 0:
        return 0
    return int(np.unique(np.round(_to_unit(arr), 12) + 0.0, axis=0).shape[0])


def spherical_mean(points: PointsLike) -> np.ndarray:
    """Unit-vector mean of (lat, lon) rows projected back to the sphere."""
    arr = as_latlon_array(points)
    return _from_unit(_to_unit(arr).sum(axis=0, keepdims=True))[0]


def _nearest(points: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    labels = np.empty(points.shape[0], dtype=np.int64)
    dists = np.empty(points.shape[0], dtype=np.float64)
    for start in range(0, points.shape[0], ASSIGN_CHUNK):
        block = pairwise_haversine_km(points[start:start + ASSIGN_CHUNK], centroids)
        idx = np.argmin(block, axis=1)              # first minimum -> lowest id on ties
        labels[start:start + ASSIGN_CHUNK] = idx
        dists[start:start + ASSIGN_CHUNK] = block[np.arange(block.shape[0]), idx]
    return labels, dists


# ═══════════════════════════════════════════════════════════════════════
# FITTING
# ═══════════════════════════════════════════════════════════════════════

def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = haversine_km_array(points[:, 0], points[:, 1], points[chosen[0], 0], points[chosen[0], 1]) ** 2
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            raise ClusteringError(f"only {len(chosen)} distinct seeds available for k={k}")
        idx = int(rng.choice(n, p=d2 / total))
        chosen.append(idx)
        d_new = haversine_km_array(points[:, 0], points[:, 1], points[idx, 0], points[idx, 1]) ** 2
        d2 = np.minimum(d2, d_new)
    return points[chosen].copy()


def _reseed_empty(points, centroids, labels, dists, empty: np.ndarray):
    for cid in empty:
        far = int(np.argmax(dists))
        logger.warning("Cluster %d empty; re-seeding from point %d (%.3f km away)", cid, far, dists[far])
        centroids[cid] = points[far]
        labels[far] = cid
        dists[far] = 0.0


def _lloyd(points: np.ndarray, k: int, rng: np.random.Generator, max_iters: int, tol_km: float):
    centroids = _kmeans_pp(points, k, rng)
    labels, dists = _nearest(points, centroids)
    history = [float(np.sum(dists ** 2))]

    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        counts = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            _reseed_empty(points, centroids, labels, dists, empty)

        # guarded spherical-mean update, per cluster
        sums = np.zeros((k, 3))
        np.add.at(sums, labels, _to_unit(points))
        candidate = centroids.copy()
        nonzero = np.linalg.norm(sums, axis=1) > 0
        candidate[nonzero] = _from_unit(sums[nonzero])
        new_d = haversine_km_array(points[:, 0], points[:, 1], candidate[labels, 0], candidate[labels, 1])
        sse_old = np.bincount(labels, weights=dists ** 2, minlength=k)
        sse_new = np.bincount(labels, weights=new_d ** 2, minlength=k)
        accept = nonzero & (sse_new <= sse_old)
        moved = np.zeros(k)
        moved[accept] = haversine_km_array(
            centroids[accept, 0], centroids[accept, 1], candidate[accept, 0], candidate[accept, 1]
        )
        centroids[accept] = candidate[accept]

        labels, dists = _nearest(points, centroids)
        inertia = float(np.sum(dists ** 2))
        if inertia > history[-1] * (1 + 1e-12) + 1e-12:
            raise ClusteringError(f"inertia increased at iteration {n_iter}: {history[-1]} -> {inertia}")
        history.append(inertia)
        if moved.max(initial=0.0) <= tol_km and not empty.size:
            break
    return centroids, history, n_iter


def fit_kmeans(
    points: PointsLike,
    k: int,
    seed: int = 0,
    max_iters: int = 100,
    tol_km: float = 1e-4,
    n_init: int = 1,
) -> ClusterModel:
    """Fit haversine K-means; the best of n_init seeded restarts is returned."""
    arr = as_latlon_array(points)
    if arr.shape[0] == 0:
        raise ClusteringError("cannot cluster an empty point set")
    if k < 1:
        raise ClusteringError(f"k must be >= 1, got {k}")
    n_distinct = count_distinct_locations(arr)
    if k > n_distinct:
        raise ClusteringError(f"k={k} exceeds the {n_distinct} distinct points")

    rng = np.random.default_rng(seed)
    best = None
    for run in range(max(1, n_init)):
        centroids, history, n_iter = _lloyd(arr, k, rng, max_iters, tol_km)
        logger.debug("K-means run %d: inertia %.6f after %d iterations", run, history[-1], n_iter)
        if best is None or history[-1] < best[1][-1]:
            best = (centroids, history, n_iter)

    centroids, history, n_iter = best
    logger.info("K-means k=%d on %d points: inertia %.4f km^2 (%d iterations)",
                k, arr.shape[0], history[-1], n_iter)
    return ClusterModel(
        centroids=centroids,
        k_param=k,
        inertia=history[-1],
        rng_seed=seed,
        n_iter=n_iter,
        inertia_history=history,
    )


# ═══════════════════════════════════════════════════════════════════════
# ASSIGNMENT
# ═══════════════════════════════════════════════════════════════════════

def assign(model: ClusterModel, p: Coordinate) -> int:
    """Index of the haversine-nearest centroid; ties go to the lowest id."""
    d = haversine_km_array(p.lat, p.lon, model.centroids[:, 0], model.centroids[:, 1])
    return int(np.argmin(d))


def assign_many(model: ClusterModel, points: PointsLike) -> np.ndarray:
    arr = as_latlon_array(points)
    if arr.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    labels, _ = _nearest(arr, model.centroids)
    return labels


def map_trace(model: ClusterModel, seq) -> ClusterTrace:
    """Cluster ids of history ⊕ current pick-up."""
    ids = assign_many(model, [p.loc for p in seq.points])
    return ClusterTrace(tuple(int(i) for i in ids))


def training_dropoffs(samples) -> np.ndarray:
    """Target drop-offs of the training samples, (n, 2) lat/lon."""
    rows = [(s.target.lat, s.target.lon) for s in samples if s.target is not None]
    return np.array(rows, dtype=np.float64).reshape(-1, 2)


def fit_destination_clusters(samples, k: int, seed: int = 0, **kwargs) -> ClusterModel:
    """K-means over the drop-offs of the training split only."""
    return fit_kmeans(training_dropoffs(samples), k, seed=seed, **kwargs)


# ═══════════════════════════════════════════════════════════════════════
# PERSISTENCE
# ═══════════════════════════════════════════════════════════════════════

def save_clusters(path, model: ClusterModel) -> None:
    """Versioned flat file: one header line, then m rows of lat,lon."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = (f"# clusters v{CLUSTER_FILE_VERSION} k={model.k_param} seed={model.rng_seed} "
              f"m={model.m} inertia={model.inertia!r} n_iter={model.n_iter}\n")
    frame = pd.DataFrame(model.centroids, columns=["lat", "lon"])
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(header)
        frame.to_csv(fh, index=False, float_format="%.17g")


def load_clusters(path) -> ClusterModel:
    path = Path(path)
    if not path.is_file():
        raise TripFileError(f"cluster file not found: {path}")
    with path.open("r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("# clusters v"):
            raise SchemaError(f"{path}: not a cluster file")
        fields = dict(tok.split("=", 1) for tok in header.split()[2:] if "=" in tok)
        version = int(header.split()[2][1:]) if header.split()[2].startswith("v") else None
        if version is not None and version != CLUSTER_FILE_VERSION:
            raise SchemaError(f"{path}: unsupported cluster file version {version}")
        frame = pd.read_csv(fh, float_precision="round_trip")
    centroids = frame[["lat", "lon"]].to_numpy(dtype=np.float64)
    if centroids.shape[0] != int(fields["m"]):
        raise SchemaError(f"{path}: header says m={fields['m']} but {centroids.shape[0]} rows found")
    return ClusterModel(
        centroids=centroids,
        k_param=int(fields["k"]),
        inertia=float(fields["inertia"]),
        rng_seed=int(fields["seed"]),
        n_iter=int(fields.get("n_iter", 0)),
    )
