"""Attention LSTM destination predictor: head, training loop, early stopping and checkpoints."""

import dataclasses

import numpy as np
import pytest

from models.errors import ConfigError, SchemaError
from models.destination_engine import (
    CITY_PRESETS,
    DestinationPredictor,
    EarlyStopping,
    PredictorCheckpoint,
    PredictorConfig,
    build_predictor,
    config_for_city,
    evaluate_loss,
    forward,
    predict_in_chunks,
    softmax_centroid_head,
    train,
)
from models.feature_engine import fit_feature_pipeline
from models.geo import Coordinate
from models.tensor_nn import Tensor, grad_check, softmax


@pytest.fixture(scope="module")
def pipeline(small_sequences, small_clusters, small_pois):
    return fit_feature_pipeline(small_sequences, small_clusters, small_pois, use_cbow=False)


@pytest.fixture(scope="module")
def batch(pipeline, small_sequences):
    return pipeline.transform(small_sequences)


def _tiny_config(**overrides):
    values = dict(lstm_hidden=4, embed_dim=2, zone_dim=3, dropout_p=0.0, lstm_activation="tanh",
                  max_epochs=3, patience=2, batch_size=16, k_clusters=4)
    values.update(overrides)
    return PredictorConfig(**values)


def _mirrored(sequences):
    """Reflect every target through the mean drop-off."""
    lat = np.mean([s.target.lat for s in sequences])
    lon = np.mean([s.target.lon for s in sequences])
    return [dataclasses.replace(s, target=Coordinate(2 * lat - s.target.lat, 2 * lon - s.target.lon))
            for s in sequences]


class TestSoftmaxCentroidHead:
    def test_matches_weighted_sum(self, rng):
        centroids = rng.normal(size=(6, 2))
        for _ in range(100):
            P = softmax(Tensor(rng.normal(0, 3, size=(1, 6)))).data
            out = softmax_centroid_head(Tensor(P), Tensor(centroids)).data[0]
            expected = sum(P[0, i] * centroids[i] for i in range(6))
            np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_uniform_logits_give_mean(self, rng):
        centroids = rng.normal(size=(5, 2))
        out = softmax_centroid_head(softmax(Tensor(np.zeros((1, 5)))), Tensor(centroids)).data[0]
        np.testing.assert_allclose(out, centroids.mean(axis=0), atol=1e-12)

    def test_one_hot_logits_give_centroid(self, rng):
        centroids = rng.normal(size=(5, 2))
        logits = np.zeros((1, 5))
        logits[0, 3] = 1000.0
        out = softmax_centroid_head(softmax(Tensor(logits)), Tensor(centroids)).data[0]
        np.testing.assert_allclose(out, centroids[3], atol=1e-12)


class TestPredictor:
    def test_output_starts_at_standardised_centroids(self, pipeline):
        model = build_predictor(_tiny_config(), pipeline, np.random.default_rng(0))
        np.testing.assert_array_equal(model.output.data, pipeline.standardizer.transform(pipeline.clusters.centroids))
        assert model.output.trainable

    def test_modes_share_backbone_shapes(self, pipeline):
        shapes = {}
        for mode in ("regression", "classification"):
            model = build_predictor(_tiny_config(mode=mode), pipeline, np.random.default_rng(0))
            shapes[mode] = {name: p.data.shape for name, p in model.named_parameters()}
        reg, cls = shapes["regression"], shapes["classification"]
        assert set(reg) - set(cls) == {"output"}
        assert reg.pop("output") == (pipeline.clusters.m, 2)
        assert reg == cls

    def test_zone_table_frozen_when_given(self, pipeline, rng):
        zone = rng.normal(size=(pipeline.clusters.m, 3))
        model = DestinationPredictor(_tiny_config(), pipeline.clusters.centroids, pipeline.standardizer,
                                     pipeline.drivers.size, rng, zone_weights=zone)
        assert not model.zone.weight.trainable
        assert all(p is not model.zone.weight for p in model.trainable_parameters())

    def test_attention_weights_sum_to_one(self, pipeline, batch):
        model = build_predictor(_tiny_config(), pipeline, np.random.default_rng(0))
        w = model.attention_weights(batch.subset(np.arange(10)))
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(w[~batch.mask[:10]] == 0.0)

    def test_single_sample_forward(self, pipeline, batch):
        model = build_predictor(_tiny_config(), pipeline, np.random.default_rng(0))
        coord = forward(model, batch.feature_tensor(0))
        assert isinstance(coord, Coordinate)
        np.testing.assert_allclose([coord.lat, coord.lon], model.predict(batch.subset([0]))[0], atol=1e-12)

    def test_classification_predicts_inside_centroid_hull(self, pipeline, batch):
        model = build_predictor(_tiny_config(mode="classification"), pipeline, np.random.default_rng(0))
        P = forward(model, batch.feature_tensor(0))
        assert P.shape == (pipeline.clusters.m,)
        assert P.sum() == pytest.approx(1.0, abs=1e-12)
        preds = predict_in_chunks(model, batch)
        c = pipeline.clusters.centroids
        assert np.all(preds >= c.min(axis=0) - 1e-9) and np.all(preds <= c.max(axis=0) + 1e-9)

    def test_end_to_end_gradients(self, pipeline, batch):
        model = build_predictor(_tiny_config(), pipeline, np.random.default_rng(2))
        sub = batch.subset([0, 5, 9])
        assert grad_check(lambda: model.loss(sub), model.trainable_parameters()) < 1e-3

    def test_classification_gradients(self, pipeline, batch):
        model = build_predictor(_tiny_config(mode="classification"), pipeline, np.random.default_rng(2))
        sub = batch.subset([1, 2])
        assert grad_check(lambda: model.loss(sub), model.trainable_parameters()) < 1e-3


class TestEarlyStopping:
    def test_scripted_curve(self):
        stopper = EarlyStopping(patience=3)
        curve = [1.0, 0.8, 0.9, 0.8, 0.7, 0.75, 0.71, 0.72, 0.6]
        stopped = None
        for epoch, loss in enumerate(curve):
            stopper.update(epoch, loss)
            if stopper.should_stop(epoch):
                stopped = epoch
                break
        # equal loss at epoch 3 is not an improvement
        assert (stopper.best_epoch, stopper.best_loss, stopped) == (4, 0.7, 7)

    def test_patience_validated(self):
        with pytest.raises(ConfigError):
            PredictorConfig(patience=0)


class TestTraining:
    def test_adversarial_validation_stops_early(self, small_clusters, small_pois, small_sequences):
        train_seqs = small_sequences[:40]
        pipe = fit_feature_pipeline(train_seqs, small_clusters, small_pois, use_cbow=False)
        train_batch = pipe.transform(train_seqs)
        val_batch = pipe.transform(_mirrored(train_seqs))
        config = _tiny_config(lstm_hidden=8, max_epochs=60, patience=3, learning_rate=5e-3)
        ckpt = train(config, train_batch, val_batch, pipe)

        val_losses = [e.val_loss for e in ckpt.training_log]
        assert ckpt.training_log[0].epoch == 0
        assert ckpt.stopped_epoch == ckpt.best_epoch + config.patience
        assert ckpt.best_val_loss == min(val_losses)
        assert evaluate_loss(ckpt.to_model(), val_batch) == pytest.approx(ckpt.best_val_loss, abs=1e-12)

    def test_seeded_training_is_reproducible(self, pipeline, batch):
        config = _tiny_config(max_epochs=2)
        a = train(config, batch.subset(np.arange(30)), batch.subset(np.arange(30, 40)), pipeline)
        b = train(config, batch.subset(np.arange(30)), batch.subset(np.arange(30, 40)), pipeline)
        assert a.digest() == b.digest()

    @pytest.mark.slow
    def test_overfits_small_set(self, small_sequences, small_clusters, small_pois):
        seqs = small_sequences[:50]
        pipe = fit_feature_pipeline(seqs, small_clusters, small_pois, use_cbow=False)
        data = pipe.transform(seqs)
        config = PredictorConfig(lstm_hidden=32, learning_rate=5e-3, batch_size=10, dropout_p=0.0,
                                 max_epochs=200, patience=200, k_clusters=small_clusters.m)
        ckpt = train(config, data, data, pipe)
        losses = [e.train_loss for e in ckpt.training_log]
        assert min(losses[1:]) < 0.1 * losses[0]


class TestCheckpoint:
    def test_round_trip(self, tmp_path, pipeline, batch):
        ckpt = train(_tiny_config(max_epochs=1), batch.subset(np.arange(20)), batch.subset(np.arange(20, 30)),
                     pipeline)
        path = tmp_path / "checkpoint.npz"
        ckpt.save(path)
        loaded = PredictorCheckpoint.load(path)
        assert loaded.digest() == ckpt.digest()
        assert loaded.training_log == ckpt.training_log
        np.testing.assert_array_equal(loaded.to_model().predict(batch), ckpt.to_model().predict(batch))
        assert loaded.pipeline().digest() == ckpt.pipeline().digest()

    def test_save_twice_same_digest(self, tmp_path, pipeline, batch):
        ckpt = train(_tiny_config(max_epochs=1), batch.subset(np.arange(20)), batch.subset(np.arange(20, 30)),
                     pipeline)
        ckpt.save(tmp_path / "a.npz")
        ckpt.save(tmp_path / "b.npz")
        assert PredictorCheckpoint.load(tmp_path / "a.npz").digest() == \
            PredictorCheckpoint.load(tmp_path / "b.npz").digest()

    def test_wrong_kind_rejected(self, tmp_path):
        path = tmp_path / "x.npz"
        np.savez(path, values=np.zeros(3))
        with pytest.raises(SchemaError):
            PredictorCheckpoint.load(path)


class TestConfig:
    def test_city_presets(self):
        assert set(CITY_PRESETS) == {"porto", "san_francisco", "manhattan"}
        assert config_for_city("manhattan").lstm_hidden == 256
        assert config_for_city("porto", patience=4).patience == 4

    def test_unknown_city(self):
        with pytest.raises(ConfigError):
            config_for_city("atlantis")

    @pytest.mark.parametrize("bad", [dict(dropout_p=1.0), dict(mode="ranking"), dict(lstm_activation="gelu"),
                                     dict(lstm_hidden=0), dict(learning_rate=0.0)])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            PredictorConfig(**bad)

    def test_from_dict_rejects_unknown(self):
        with pytest.raises(ConfigError):
            PredictorConfig.from_dict({"hidden_units": 3})
