"""Haversine K-means, assignment and cluster traces."""

import numpy as np
import pytest

from models.clustering_engine import (
    ClusterModel,
    assign,
    assign_many,
    count_distinct_locations,
    fit_destination_clusters,
    fit_kmeans,
    load_clusters,
    map_trace,
    save_clusters,
    spherical_mean,
    training_dropoffs,
)
from models.errors import ClusteringError, SchemaError
from models.geo import Coordinate, haversine_km, haversine_km_array


def _blob(rng, lat, lon, n, sigma_deg=0.005):
    return np.column_stack([rng.normal(lat, sigma_deg, n), rng.normal(lon, sigma_deg, n)])


def _inertia(points, centroids):
    d = haversine_km_array(points[:, None, 0], points[:, None, 1], centroids[None, :, 0], centroids[None, :, 1])
    return float(np.sum(d.min(axis=1) ** 2))


def _brute_force_lloyd(points, k, restarts, seed):
    """Plain Lloyd from random distinct starts; best inertia over the restarts."""
    rng = np.random.default_rng(seed)
    best = np.inf
    for _ in range(restarts):
        centroids = points[rng.choice(len(points), size=k, replace=False)].copy()
        for _ in range(200):
            d = haversine_km_array(points[:, None, 0], points[:, None, 1],
                                   centroids[None, :, 0], centroids[None, :, 1])
            labels = np.argmin(d, axis=1)
            new = centroids.copy()
            for c in range(k):
                if np.any(labels == c):
                    new[c] = spherical_mean(points[labels == c])
            if np.allclose(new, centroids, atol=1e-12):
                break
            centroids = new
        best = min(best, _inertia(points, centroids))
    return best


class TestFitKmeans:
    def test_k_equals_n_recovers_points(self):
        pts = np.array([[41.10, -8.60], [41.20, -8.50], [41.15, -8.70]])
        model = fit_kmeans(pts, 3, seed=0)
        assert model.inertia == pytest.approx(0.0, abs=1e-12)
        got = sorted(map(tuple, np.round(model.centroids, 9)))
        assert got == sorted(map(tuple, np.round(pts, 9)))

    def test_k_one_is_spherical_mean(self, rng):
        pts = _blob(rng, 41.15, -8.61, 50)
        model = fit_kmeans(pts, 1, seed=0)
        np.testing.assert_allclose(model.centroids[0], spherical_mean(pts), atol=1e-9)

    def test_two_groups(self, rng):
        a = _blob(rng, 41.15, -8.61, 40)
        b = _blob(rng, 42.05, -8.61, 40)  # ~100 km north
        model = fit_kmeans(np.vstack([a, b]), 2, seed=0)
        for group in (a, b):
            mean = spherical_mean(group)
            nearest = min(haversine_km(Coordinate(*mean), model.centroid(i)) for i in range(2))
            assert nearest < 1.0

    def test_inertia_non_increasing(self, rng):
        pts = np.vstack([_blob(rng, 41.15 + 0.02 * i, -8.61, 30, 0.01) for i in range(6)])
        model = fit_kmeans(pts, 6, seed=4)
        hist = np.array(model.inertia_history)
        assert np.all(np.diff(hist) <= 1e-9 * hist[:-1] + 1e-12)
        assert model.inertia == hist[-1]

    @pytest.mark.parametrize("seed", range(5))
    def test_small_instance_matches_brute_force(self, seed):
        rng = np.random.default_rng(100 + seed)
        n, k = int(rng.integers(6, 13)), int(rng.integers(1, 4))
        pts = np.column_stack([rng.uniform(41.0, 41.3, n), rng.uniform(-8.7, -8.4, n)])
        model = fit_kmeans(pts, k, seed=seed, n_init=50)
        oracle = _brute_force_lloyd(pts, k, restarts=50, seed=seed)
        assert model.inertia <= oracle + 1e-9

    def test_k_too_large(self):
        pts = np.array([[41.1, -8.6], [41.1, -8.6], [41.2, -8.5]])
        with pytest.raises(ClusteringError):
            fit_kmeans(pts, 3)

    def test_aliased_coordinates_count_once(self):
        # both poles at two longitudes, and the antimeridian written both ways
        pts = np.array([[90.0, 0.0], [90.0, 45.0], [-90.0, 10.0], [-90.0, -120.0],
                        [0.0, 180.0], [0.0, -180.0]])
        assert count_distinct_locations(pts) == 3
        with pytest.raises(ClusteringError):
            fit_kmeans(pts, 4)

    def test_aliased_coordinates_fit_up_to_distinct(self):
        pts = np.array([[90.0, 0.0], [90.0, 45.0], [-90.0, 10.0], [0.0, 180.0], [0.0, -180.0]])
        model = fit_kmeans(pts, 3, seed=0)
        assert model.m == 3
        assert model.inertia == pytest.approx(0.0, abs=1e-9)

    def test_empty(self):
        with pytest.raises(ClusteringError):
            fit_kmeans(np.empty((0, 2)), 1)

    def test_seeded(self, rng):
        pts = _blob(rng, 41.15, -8.61, 80, 0.05)
        a, b = fit_kmeans(pts, 5, seed=9), fit_kmeans(pts, 5, seed=9)
        np.testing.assert_array_equal(a.centroids, b.centroids)


class TestAssign:
    def test_centroid_maps_to_itself(self):
        model = ClusterModel(np.array([[41.0 + i * 0.1, -8.6] for i in range(10)]), 10, 0.0, 0)
        assert assign(model, model.centroid(7)) == 7

    def test_tie_goes_to_lower_id(self):
        model = ClusterModel(np.array([[0.0, 1.0], [0.0, -1.0]]), 2, 0.0, 0)
        assert assign(model, Coordinate(0.0, 0.0)) == 0

    def test_matches_linear_scan(self, rng):
        centroids = np.column_stack([rng.uniform(41.0, 41.3, 25), rng.uniform(-8.7, -8.4, 25)])
        model = ClusterModel(centroids, 25, 0.0, 0)
        pts = np.column_stack([rng.uniform(41.0, 41.3, 500), rng.uniform(-8.7, -8.4, 500)])
        expected = []
        for lat, lon in pts:
            best, best_d = 0, np.inf
            for i, (clat, clon) in enumerate(centroids):
                d = haversine_km(Coordinate(lat, lon), Coordinate(clat, clon))
                if d < best_d:
                    best, best_d = i, d
            expected.append(best)
        np.testing.assert_array_equal(assign_many(model, pts), expected)
        assert [assign(model, Coordinate(*p)) for p in pts[:20]] == expected[:20]


class TestTraces:
    def test_trace_mirrors_points(self, small_sequences, small_clusters):
        seq = small_sequences[-1]
        trace = map_trace(small_clusters, seq)
        assert len(trace.ids) == len(seq.points)
        assert all(0 <= i < small_clusters.m for i in trace.ids)
        assert trace.ids[-1] == assign(small_clusters, seq.current_pickup.loc)

    def test_destination_clusters_use_targets_only(self, small_sequences):
        drops = training_dropoffs(small_sequences)
        assert drops.shape == (len(small_sequences), 2)
        model = fit_destination_clusters(small_sequences, 4, seed=0)
        np.testing.assert_array_equal(model.centroids, fit_kmeans(drops, 4, seed=0).centroids)


class TestPersistence:
    def test_round_trip_exact(self, tmp_path, small_clusters):
        path = tmp_path / "clusters.txt"
        save_clusters(path, small_clusters)
        loaded = load_clusters(path)
        np.testing.assert_array_equal(loaded.centroids, small_clusters.centroids)
        assert loaded.k_param == small_clusters.k_param
        assert loaded.inertia == small_clusters.inertia

    def test_not_a_cluster_file(self, tmp_path):
        path = tmp_path / "clusters.txt"
        path.write_text("lat,lon\n1,2\n", encoding="utf-8")
        with pytest.raises(SchemaError):
            load_clusters(path)
