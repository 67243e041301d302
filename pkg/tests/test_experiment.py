"""Split, end-to-end runs, determinism, leakage and reporting."""

import dataclasses
import zipfile

import numpy as np
import pandas as pd
import pytest

from data.ingest import save_sequences
from data.synthetic_city import SyntheticCityParams, generate_city, write_city
from models.clustering_engine import assign, load_clusters
from models.errors import ConfigError, SplitError
from models.experiment_engine import (
    RESULT_COLUMNS,
    ExperimentSpec,
    ModelRun,
    ResultRow,
    eds_histogram,
    load_config,
    prepare_sequences,
    read_results,
    regression_vs_classification,
    report,
    run,
    spec_from_config,
    split,
    split_sizes,
    write_results,
)
from models.geo import Coordinate, haversine_km


@pytest.fixture(scope="module")
def city_files(small_city, tmp_path_factory):
    return write_city(small_city, tmp_path_factory.mktemp("city"))


def _spec(out, city_files, **overrides):
    values = dict(
        trips_path=str(city_files["trips"]),
        pois_path=str(city_files["pois"]),
        city="porto",
        timezone="UTC",
        k_clusters=4,
        models=("nn",),
        max_epochs=2,
        patience=2,
        lstm_hidden=8,
        batch_size=16,
        dropout_p=0.0,
        mmlp_hidden=16,
        mmlp_batch_size=20,
        mmlp_max_epochs=2,
        cbow_epochs=1,
        output_dir=str(out),
        record_wall_time=False,
    )
    values.update(overrides)
    return ExperimentSpec(**values)


class TestSplit:
    @pytest.mark.parametrize("n, sizes", [(100, (65, 15, 20)), (999, (649, 150, 200)), (7, (5, 1, 1))])
    def test_sizes(self, n, sizes):
        assert split_sizes(n) == sizes

    def test_partition(self, small_sequences):
        train, val, test = split(small_sequences, seed=4)
        ids = [s.sample_id for s in train + val + test]
        assert sorted(ids) == sorted(s.sample_id for s in small_sequences)
        assert len(set(ids)) == len(ids)

    def test_seeded(self, small_sequences):
        a, b = split(small_sequences, seed=4), split(small_sequences, seed=4)
        assert [[s.sample_id for s in part] for part in a] == [[s.sample_id for s in part] for part in b]
        c = split(small_sequences, seed=5)
        assert [s.sample_id for s in a[2]] != [s.sample_id for s in c[2]]

    def test_too_few_samples(self, small_sequences):
        with pytest.raises(SplitError):
            split(small_sequences[:2])

    def test_bad_fractions(self, small_sequences):
        with pytest.raises(SplitError):
            split(small_sequences, fractions=(0.5, 0.3, 0.3))


class TestSpec:
    def test_model_labels(self):
        assert ModelRun.parse("lstm_boc:classification").label == "lstm_boc[classification]"
        assert ModelRun.parse(" nn ").label == "nn"
        with pytest.raises(ConfigError):
            ModelRun.parse("nn:classification")
        with pytest.raises(ConfigError):
            ModelRun.parse("transformer")

    def test_requires_input(self):
        with pytest.raises(ConfigError):
            ExperimentSpec()

    def test_unknown_city_needs_explicit_settings(self):
        with pytest.raises(ConfigError):
            ExperimentSpec(trips_path="t.csv", city="lyon")
        spec = ExperimentSpec(trips_path="t.csv", city="lyon", k_clusters=50, timezone="Europe/Paris")
        assert spec.resolved_k_clusters() == 50

    def test_preset_fallbacks(self):
        spec = ExperimentSpec(trips_path="t.csv", city="manhattan")
        assert spec.resolved_timezone() == "America/New_York"
        assert spec.predictor_config().lstm_hidden == 256
        assert spec.predictor_config("classification").mode == "classification"

    def test_config_file(self, tmp_path):
        path = tmp_path / "experiment.cfg"
        path.write_text(
            "# Porto run\n"
            "trips_path = data/train.csv\n"
            "models = nn, lstm_boc_w2v, lstm:classification   # compared models\n"
            "k_clusters = 100\n"
            "fractions = 0.7, 0.1, 0.2\n"
            "record_wall_time = no\n"
            "top_drivers = none\n",
            encoding="utf-8",
        )
        spec = spec_from_config(load_config(path), seed=9)
        assert spec.models == ("nn", "lstm_boc_w2v", "lstm:classification")
        assert spec.k_clusters == 100
        assert spec.fractions == (0.7, 0.1, 0.2)
        assert spec.record_wall_time is False
        assert spec.top_drivers is None
        assert spec.seed == 9

    def test_config_errors(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("trips_path = x.csv\nepochs = 3\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            spec_from_config(load_config(path))
        path.write_text("trips_path = x.csv\nseed = many\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            spec_from_config(load_config(path))
        with pytest.raises(ConfigError):
            load_config(tmp_path / "missing.cfg")


class TestRun:
    def test_nn_matches_hand_computation(self, tmp_path, city_files):
        spec = _spec(tmp_path, city_files)
        result = run(spec)
        _, _, test = split(prepare_sequences(spec), spec.fractions, spec.seed)
        clusters = load_clusters(tmp_path / "clusters.txt")

        errors = []
        for s in test:
            pred = clusters.centroid(assign(clusters, s.current_pickup.loc))
            errors.append(haversine_km(pred, s.target))
        row = result.row("nn")
        assert row.n_test == len(test)
        assert row.mean_eds_km == pytest.approx(float(np.mean(errors)), rel=1e-12)
        assert row.median_eds_km == pytest.approx(float(np.median(errors)), rel=1e-12)
        assert row.wall_s == 0.0

        dump = pd.read_csv(tmp_path / "nn" / "predictions.csv")
        assert dump["sample_id"].tolist() == [s.sample_id for s in test]
        frame = read_results(tmp_path / "results.csv")
        assert list(frame.columns) == RESULT_COLUMNS

        split_frame = pd.read_csv(tmp_path / "split.csv")
        assert split_frame["split"].value_counts().to_dict()["test"] == len(test)

    def test_outputs_byte_identical(self, tmp_path, city_files):
        models = ("nn", "mmlp_seq", "lstm", "lstm_boc_w2v")
        run(_spec(tmp_path / "a", city_files, models=models))
        run(_spec(tmp_path / "b", city_files, models=models))
        files = ["results.csv", "checkpoints.csv", "split.csv", "clusters.txt",
                 "lstm/predictions.csv", "lstm_boc_w2v/predictions.csv", "mmlp_seq/predictions.csv"]
        for name in files:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name

    def test_test_targets_do_not_leak(self, tmp_path, city_files):
        spec = _spec(tmp_path / "base", city_files)
        sequences = prepare_sequences(spec)
        _, _, test = split(sequences, spec.fractions, spec.seed)
        test_ids = {s.sample_id for s in test}
        perturbed = [dataclasses.replace(s, target=Coordinate(s.target.lat + 0.05, s.target.lon - 0.05))
                     if s.sample_id in test_ids else s for s in sequences]
        save_sequences(tmp_path / "original.jsonl", sequences)
        save_sequences(tmp_path / "perturbed.jsonl", perturbed)

        models = ("mmlp_seq", "lstm_boc_w2v")
        a = run(_spec(tmp_path / "a", city_files, trips_path=None, models=models,
                      sequences_path=str(tmp_path / "original.jsonl")))
        b = run(_spec(tmp_path / "b", city_files, trips_path=None, models=models,
                      sequences_path=str(tmp_path / "perturbed.jsonl")))
        assert a.digests == b.digests
        assert (tmp_path / "a" / "clusters.txt").read_bytes() == (tmp_path / "b" / "clusters.txt").read_bytes()
        assert a.row("lstm_boc_w2v").mean_eds_km != b.row("lstm_boc_w2v").mean_eds_km

    def test_failed_model_is_recorded(self, tmp_path, city_files):
        result = run(_spec(tmp_path, city_files, pois_path=None, models=("lstm_boc", "nn")))
        assert [r.model for r in result.rows] == ["nn"]
        failures = pd.read_csv(tmp_path / "failures.csv")
        assert failures["model"].tolist() == ["lstm_boc"]
        assert failures["error"].tolist() == ["ConfigError"]

    def test_degenerate_embedding_corpus_is_recorded(self, tmp_path, city_files):
        # one cluster leaves the CBOW corpus with a single distinct token
        result = run(_spec(tmp_path, city_files, k_clusters=1, models=("lstm_boc_w2v", "nn")))
        assert [r.model for r in result.rows] == ["nn"]
        failures = pd.read_csv(tmp_path / "failures.csv")
        assert failures["model"].tolist() == ["lstm_boc_w2v"]
        assert failures["error"].tolist() == ["ShapeError"]

    def test_odd_history_length_is_a_config_error(self, tmp_path, city_files):
        with pytest.raises(ConfigError):
            _spec(tmp_path, city_files, k=3)

    def test_classification_variant(self, tmp_path, city_files):
        result = run(_spec(tmp_path, city_files, models=("lstm", "lstm:classification")))
        assert [r.model for r in result.rows] == ["lstm", "lstm[classification]"]
        assert (tmp_path / "lstm[classification]" / "checkpoint.npz").is_file()

    @pytest.mark.slow
    def test_lstm_beats_nearest_centroid(self, tmp_path):
        city = generate_city(SyntheticCityParams(n_clusters=8, n_drivers=20, trips_per_driver=60, seed=1))
        files = write_city(city, tmp_path / "city")
        spec = ExperimentSpec(
            trips_path=str(files["trips"]), pois_path=str(files["pois"]), holidays_path=str(files["holidays"]),
            city="porto", timezone="UTC", k_clusters=8, models=("nn", "lstm_boc_w2v"),
            lstm_hidden=32, batch_size=32, max_epochs=40, patience=5, dropout_p=0.1,
            output_dir=str(tmp_path / "out"), record_wall_time=False,
        )
        result = run(spec)
        lstm, nn = result.row("lstm_boc_w2v"), result.row("nn")
        assert lstm.mean_eds_km < nn.mean_eds_km
        assert lstm.mean_eds_km < 0.5 * city.mean_pairwise_zone_km()


class TestReport:
    @staticmethod
    def _results(directory, city, rows):
        write_results(directory / "results.csv",
                      [ResultRow(model, city, mean, mean, 10, 0, 0.0) for model, mean in rows])
        for model, mean in rows:
            (directory / model).mkdir(parents=True, exist_ok=True)
            pd.DataFrame({"sample_id": ["s1", "s2"], "pred_lat": [0.0, 0.0], "pred_lon": [0.0, 0.0],
                          "true_lat": [0.0, 0.0], "true_lon": [0.0, 0.0], "eds_km": [mean - 0.2, mean + 0.2]}
                         ).to_csv(directory / model / "predictions.csv", index=False)
        return directory / "results.csv"

    def test_merge_sorted_by_city_then_model(self, tmp_path):
        a = self._results(tmp_path / "porto", "porto",
                          [("nn", 3.0), ("lstm_boc_w2v", 1.5), ("lstm_boc_w2v[classification]", 1.8)])
        b = self._results(tmp_path / "manhattan", "manhattan", [("nn", 2.0), ("lstm", 1.2)])
        merged = report([a, b], tmp_path / "report")
        assert list(zip(merged.city, merged.model)) == [
            ("manhattan", "lstm"), ("manhattan", "nn"),
            ("porto", "lstm_boc_w2v"), ("porto", "lstm_boc_w2v[classification]"), ("porto", "nn"),
        ]
        comparison = pd.read_csv(tmp_path / "report" / "regression_vs_classification.csv")
        assert comparison["model"].tolist() == ["lstm_boc_w2v"]
        assert comparison["delta_km"].iloc[0] == pytest.approx(0.3)
        hist = pd.read_csv(tmp_path / "report" / "eds_histograms.csv")
        assert hist.groupby(["city", "model"])["count"].sum().eq(2).all()

    def test_excel_workbook(self, tmp_path):
        a = self._results(tmp_path / "porto", "porto", [("nn", 3.0), ("lstm", 1.0), ("lstm[classification]", 1.1)])
        report([a], tmp_path / "report", excel=True)
        with zipfile.ZipFile(tmp_path / "report" / "report.xlsx") as book:
            names = book.namelist()
            workbook_xml = book.read("xl/workbook.xml").decode("utf-8")
        assert "xl/worksheets/sheet1.xml" in names
        for sheet in ("Results", "Reg_vs_Class", "EDS_Histogram", "Method"):
            assert f'name="{sheet}"' in workbook_xml

    def test_no_inputs(self, tmp_path):
        with pytest.raises(ConfigError):
            report([], tmp_path)

    def test_histogram_bins(self):
        hist = eds_histogram(np.array([0.1, 0.4, 0.6, 1.2]))
        assert hist["bin_start_km"].tolist() == [0.0, 0.5, 1.0]
        assert hist["count"].tolist() == [2, 1, 1]
        assert hist["count"].sum() == 4

    def test_comparison_without_pairs(self):
        merged = pd.DataFrame({"city": ["porto"], "model": ["nn"], "mean_eds_km": [2.0]})
        assert regression_vs_classification(merged).empty
