"""
Destination Engine
==================
Next drop-off prediction from a driver's recent trips.

Architecture (per sample, steps left-padded to 9):
  - Embeddings: zone (20), hour / weekday / day-type / driver (10 each),
    concatenated with the log-scaled BOC block -> 70 per step
  - Attention: one learned score per step, softmax over valid steps,
    each step re-weighted before the recurrent layer
  - LSTM (tanh or relu), last hidden state, dropout
  - Softmax over the m destination clusters
  - Regression head: two output units whose weight matrix starts at the
    (standardised) centroid matrix and stays trainable, ŷ = Σ P_i c_i
  - Classification mode: no head; coordinates are Σ P_i c_i with the
    centroids held fixed

Training: Adam, MSE (regression) or cross-entropy (classification),
gradient-norm clipping, best-on-validation snapshot, early stopping.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from models.clustering_engine import ClusterModel
from models.errors import ConfigError, NonFiniteError, SchemaError, ShapeError, TrainingDivergedError, TripFileError
from models.feature_engine import (
    EMBED_DIM,
    N_CATEGORIES,
    N_DAY_TYPES,
    N_HOURS,
    N_WEEKDAYS,
    ZONE_DIM,
    BocTable,
    CategoricalTables,
    CoordinateStandardizer,
    DriverVocabulary,
    EmbeddingTable,
    FeatureBatch,
    FeaturePipeline,
    ZoneEmbedding,
)
from models.geo import Coordinate
from models.tensor_nn import (
    LSTM,
    LSTM_ACTIVATIONS,
    Adam,
    Attention,
    Dense,
    Embedding,
    Module,
    Parameter,
    Tensor,
    clip_grad_norm,
    concat,
    cross_entropy,
    dropout,
    matmul,
    mse_loss,
    softmax,
)

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
MODES = ("regression", "classification")
EVAL_CHUNK = 512


# ═══════════════════════════════════════════════════════════════════════
# CONFIGURATION
# ═══════════════════════════════════════════════════════════════════════

@dataclass
class PredictorConfig:
    """Training parameters; defaults follow the Porto / San Francisco setting."""
    lstm_hidden: int = 128
    learning_rate: float = 1e-3
    batch_size: int = 64
    dropout_p: float = 0.5
    k_clusters: int = 2000
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    mode: str = "regression"
    lstm_activation: str = "relu"

    # Embedding sizes
    embed_dim: int = EMBED_DIM
    zone_dim: int = ZONE_DIM

    # Divergence guard
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.lstm_activation not in LSTM_ACTIVATIONS:
            raise ConfigError(f"lstm_activation must be one of {LSTM_ACTIVATIONS}, got '{self.lstm_activation}'")
        for name in ("lstm_hidden", "batch_size", "k_clusters", "max_epochs", "embed_dim", "zone_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict) -> "PredictorConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown predictor config keys: {unknown}")
        return cls(**values)


CITY_PRESETS: Dict[str, Dict] = {
    "porto": {
        "lstm_hidden": 128,
        "learning_rate": 1e-3,
        "batch_size": 64,
        "k_clusters": 3392,
        "timezone": "Europe/Lisbon",
        "trip_format": "polyline_csv",
    },
    "san_francisco": {
        "lstm_hidden": 128,
        "learning_rate": 1e-3,
        "batch_size": 64,
        "k_clusters": 2000,
        "timezone": "America/Los_Angeles",
        "trip_format": "polyline_csv",
    },
    "manhattan": {
        "lstm_hidden": 256,
        "learning_rate": 1e-3,
        "batch_size": 64,
        "k_clusters": 2000,
        "timezone": "America/New_York",
        "trip_format": "od_csv",
    },
}


def config_for_city(city: str, **overrides) -> PredictorConfig:
    preset = CITY_PRESETS.get(city)
    if preset is None:
        raise ConfigError(f"unknown city preset '{city}'; known: {sorted(CITY_PRESETS)}")
    values = {k: v for k, v in preset.items() if k in {f.name for f in fields(PredictorConfig)}}
    values.update(overrides)
    return PredictorConfig(**values)


# ═══════════════════════════════════════════════════════════════════════
# MODEL
# ═══════════════════════════════════════════════════════════════════════

def softmax_centroid_head(probabilities: Tensor, weights: Tensor) -> Tensor:
    """ŷ = Σ_i P_i · w_i for every row of P; weights is (m, 2)."""
    return matmul(probabilities, weights)


def _inputs(x) -> Tuple[np.ndarray, ...]:
    arrays = [np.asarray(getattr(x, name)) for name in
              ("zone_ids", "boc", "hour_ids", "weekday_ids", "daytype_ids", "driver_ids", "mask")]
    if arrays[0].ndim == 1:
        arrays = [a[None, ...] for a in arrays]
    return tuple(arrays)


class DestinationPredictor(Module):
    def __init__(
        self,
        config: PredictorConfig,
        centroids: np.ndarray,
        standardizer: CoordinateStandardizer,
        n_driver_rows: int,
        rng: np.random.Generator,
        zone_weights: Optional[np.ndarray] = None,
    ):
        super().__init__()
        centroids = np.asarray(centroids, dtype=np.float64)
        if centroids.ndim != 2 or centroids.shape[1] != 2 or centroids.shape[0] < 1:
            raise ShapeError(f"centroids must be (m, 2), got {centroids.shape}")
        self.config = config
        self.centroids = centroids
        self.standardizer = standardizer
        self.n_clusters = centroids.shape[0]
        self.width = config.zone_dim + N_CATEGORIES + 4 * config.embed_dim

        if zone_weights is not None and np.shape(zone_weights) != (self.n_clusters, config.zone_dim):
            raise ShapeError(f"zone table {np.shape(zone_weights)} does not match "
                             f"({self.n_clusters}, {config.zone_dim})")
        self.zone = Embedding(self.n_clusters, config.zone_dim, rng,
                              weights=zone_weights, trainable=zone_weights is None)
        self.hour = Embedding(N_HOURS, config.embed_dim, rng)
        self.weekday = Embedding(N_WEEKDAYS, config.embed_dim, rng)
        self.day_type = Embedding(N_DAY_TYPES, config.embed_dim, rng)
        self.driver = Embedding(n_driver_rows, config.embed_dim, rng)
        self.attention = Attention(self.width, rng)
        self.lstm = LSTM(self.width, config.lstm_hidden, rng, activation_name=config.lstm_activation)
        self.softmax_layer = Dense(config.lstm_hidden, self.n_clusters, rng)
        if config.mode == "regression":
            self.output = Parameter(standardizer.transform(centroids))

    @property
    def is_regression(self) -> bool:
        return self.config.mode == "regression"

    def categorical_tables(self) -> CategoricalTables:
        def table(emb: Embedding) -> EmbeddingTable:
            w = emb.weight.data
            return EmbeddingTable(w.shape[0], w.shape[1], w.copy(), emb.weight.trainable)
        return CategoricalTables(table(self.hour), table(self.weekday), table(self.day_type), table(self.driver))

    def step_features(self, x) -> Tensor:
        zone, boc, hour, weekday, daytype, driver, mask = _inputs(x)
        feats = concat([
            self.zone(zone),
            Tensor(boc),
            self.hour(hour),
            self.weekday(weekday),
            self.day_type(daytype),
            self.driver(driver),
        ], axis=-1)
        return feats * Tensor(mask[..., None].astype(np.float64))

    def logits(self, x, rng: Optional[np.random.Generator] = None) -> Tensor:
        mask = _inputs(x)[-1].astype(bool)
        weighted, _ = self.attention(self.step_features(x), mask)
        h = self.lstm(weighted, mask)
        h = dropout(h, self.config.dropout_p, self.training, rng)
        return self.softmax_layer(h)

    def attention_weights(self, x) -> np.ndarray:
        mask = _inputs(x)[-1].astype(bool)
        _, weights = self.attention(self.step_features(x), mask)
        return weights.data

    def probabilities(self, x, rng: Optional[np.random.Generator] = None) -> Tensor:
        return softmax(self.logits(x, rng), axis=-1)

    def forward(self, x, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Standardised (lat, lon) in regression mode, cluster probabilities otherwise."""
        P = self.probabilities(x, rng)
        if self.is_regression:
            return softmax_centroid_head(P, self.output)
        return P

    def loss(self, batch: FeatureBatch, rng: Optional[np.random.Generator] = None) -> Tensor:
        if self.is_regression:
            return mse_loss(self.forward(batch, rng), batch.targets_std)
        return cross_entropy(self.logits(batch, rng), batch.target_class)

    def predict(self, x) -> np.ndarray:
        """(B, 2) predicted lat/lon in degrees; runs in eval mode."""
        was_training = self.training
        self.eval()
        try:
            if self.is_regression:
                return self.standardizer.inverse(self.forward(x).data)
            return self.probabilities(x).data @ self.centroids
        finally:
            self.train(was_training)


def forward(model, sample):
    """Single-sample inference: a Coordinate in regression mode, P over clusters otherwise."""
    if isinstance(model, PredictorCheckpoint):
        model = model.to_model()
    if model.is_regression:
        lat, lon = model.predict(sample)[0]
        return Coordinate(float(lat), float(lon))
    was_training = model.training
    model.eval()
    try:
        return model.probabilities(sample).data[0]
    finally:
        model.train(was_training)


def build_predictor(config: PredictorConfig, pipeline: FeaturePipeline,
                    rng: np.random.Generator) -> DestinationPredictor:
    zone_weights = pipeline.zone.weights if pipeline.zone is not None else None
    return DestinationPredictor(
        config,
        pipeline.clusters.centroids,
        pipeline.standardizer,
        pipeline.drivers.size,
        rng,
        zone_weights=zone_weights,
    )


def predict_in_chunks(model: DestinationPredictor, batch: FeatureBatch) -> np.ndarray:
    parts = [model.predict(batch.subset(np.arange(s, min(s + EVAL_CHUNK, len(batch)))))
             for s in range(0, len(batch), EVAL_CHUNK)]
    return np.concatenate(parts, axis=0)


def evaluate_loss(model: DestinationPredictor, batch: FeatureBatch) -> float:
    """Mean training-objective loss over a split, evaluated in eval mode."""
    was_training = model.training
    model.eval()
    try:
        total = 0.0
        for s in range(0, len(batch), EVAL_CHUNK):
            chunk = batch.subset(np.arange(s, min(s + EVAL_CHUNK, len(batch))))
            total += float(model.loss(chunk).data) * len(chunk)
        return total / len(batch)
    finally:
        model.train(was_training)


# ═══════════════════════════════════════════════════════════════════════
# TRAINING
# ═══════════════════════════════════════════════════════════════════════

@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class EarlyStopping:
    """Strict improvement resets the counter; stop once patience epochs pass without one."""
    patience: int
    best_loss: float = float("inf")
    best_epoch: int = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            return True
        return False

    def should_stop(self, epoch: int) -> bool:
        return epoch - self.best_epoch >= self.patience


def _snapshot(model: DestinationPredictor, config: PredictorConfig, pipeline: FeaturePipeline,
              state: Dict[str, np.ndarray], log: List[EpochLog], best_epoch: int,
              stopped_epoch: int) -> "PredictorCheckpoint":
    return PredictorCheckpoint(
        config=config,
        state={k: v.copy() for k, v in state.items()},
        centroids=pipeline.clusters.centroids.copy(),
        cluster_k=pipeline.clusters.k_param,
        cluster_seed=pipeline.clusters.rng_seed,
        standardizer=pipeline.standardizer,
        drivers=pipeline.drivers.drivers,
        boc_counts=pipeline.boc.counts.copy(),
        use_boc=pipeline.use_boc,
        zone_frozen=not model.zone.weight.trainable,
        zone_seen=None if pipeline.zone is None else pipeline.zone.seen.copy(),
        training_log=list(log),
        best_epoch=best_epoch,
        stopped_epoch=stopped_epoch,
    )


def train(
    config: PredictorConfig,
    train_set: FeatureBatch,
    val_set: FeatureBatch,
    pipeline: FeaturePipeline,
) -> "PredictorCheckpoint":
    """
    Fit a DestinationPredictor and return the checkpoint of its best
    validation epoch. Epoch 0 is the untrained model.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ShapeError("training and validation splits must be non-empty")
    if config.mode == "classification" and not (train_set.has_targets and val_set.has_targets):
        raise ShapeError("classification training needs a target class for every sample")

    rng = np.random.default_rng(config.seed)
    model = build_predictor(config, pipeline, rng)
    params = model.trainable_parameters()
    optimizer = Adam(params, lr=config.learning_rate)
    stopper = EarlyStopping(config.patience)

    log = [EpochLog(0, evaluate_loss(model, train_set), evaluate_loss(model, val_set))]
    stopper.update(0, log[0].val_loss)
    best_state = model.state_dict()
    logger.info("Training %s/%s: %d train, %d val samples, %d clusters, epoch 0 val %.6f",
                config.mode, config.lstm_activation, len(train_set), len(val_set), model.n_clusters,
                log[0].val_loss)

    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        model.train()
        order = rng.permutation(len(train_set))
        try:
            for start in range(0, len(order), config.batch_size):
                batch = train_set.subset(order[start:start + config.batch_size])
                optimizer.zero_grad()
                loss = model.loss(batch, rng)
                loss.backward()
                clip_grad_norm(params, config.clip_norm)
                optimizer.step()
            train_loss = evaluate_loss(model, train_set)
            val_loss = evaluate_loss(model, val_set)
        except NonFiniteError as exc:
            snapshot = _snapshot(model, config, pipeline, best_state, log, stopper.best_epoch, epoch)
            logger.error("Training diverged at epoch %d: %s", epoch, exc)
            raise TrainingDivergedError(f"training diverged at epoch {epoch}: {exc}", checkpoint=snapshot) from exc

        log.append(EpochLog(epoch, train_loss, val_loss))
        if stopper.update(epoch, val_loss):
            best_state = model.state_dict()
        logger.info("Epoch %d: train %.6f  val %.6f  (best %.6f @ %d)",
                    epoch, train_loss, val_loss, stopper.best_loss, stopper.best_epoch)
        if stopper.should_stop(epoch):
            logger.info("Early stop at epoch %d; best epoch %d", epoch, stopper.best_epoch)
            break

    model.load_state_dict(best_state)
    return _snapshot(model, config, pipeline, best_state, log, stopper.best_epoch, epoch)


# ═══════════════════════════════════════════════════════════════════════
# CHECKPOINT
# ═══════════════════════════════════════════════════════════════════════

def content_digest(meta: Dict, arrays: Dict[str, np.ndarray]) -> str:
    """sha256 over metadata and tensors; independent of file timestamps."""
    h = hashlib.sha256()
    h.update(json.dumps(meta, sort_keys=True).encode("utf-8"))
    for name, value in sorted(arrays.items()):
        value = np.ascontiguousarray(value)
        h.update(f"{name}|{value.dtype.str}|{value.shape}".encode("utf-8"))
        h.update(value.tobytes())
    return h.hexdigest()


def write_npz(path, meta: Dict, arrays: Dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def read_npz(path, kind: str) -> Tuple[Dict, Dict[str, np.ndarray]]:
    """Metadata and arrays of a checkpoint written by write_npz (no pickle)."""
    path = Path(path)
    if not path.is_file():
        raise TripFileError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as npz:
        if "meta" not in npz.files:
            raise SchemaError(f"{path}: not a {kind} checkpoint")
        meta = json.loads(str(npz["meta"]))
        arrays = {name: npz[name] for name in npz.files if name != "meta"}
    if meta.get("kind", kind) != kind:
        raise SchemaError(f"{path}: holds a {meta.get('kind')} checkpoint, expected {kind}")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise SchemaError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    return meta, arrays


@dataclass
class PredictorCheckpoint:
    """Everything needed to rebuild the predictor and its feature pipeline."""
    config: PredictorConfig
    state: Dict[str, np.ndarray]
    centroids: np.ndarray
    cluster_k: int
    cluster_seed: int
    standardizer: CoordinateStandardizer
    drivers: Tuple[str, ...]
    boc_counts: np.ndarray
    use_boc: bool
    zone_frozen: bool
    zone_seen: Optional[np.ndarray] = None
    training_log: List[EpochLog] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    version: int = CHECKPOINT_VERSION

    @property
    def best_val_loss(self) -> float:
        return self.training_log[self.best_epoch].val_loss

    def to_model(self) -> DestinationPredictor:
        zone_weights = self.state["zone.weight"] if self.zone_frozen else None
        model = DestinationPredictor(
            self.config,
            self.centroids,
            self.standardizer,
            len(self.drivers) + 1,
            np.random.default_rng(self.config.seed),
            zone_weights=zone_weights,
        )
        model.load_state_dict(self.state)
        model.eval()
        return model

    def pipeline(self) -> FeaturePipeline:
        clusters = ClusterModel(self.centroids.copy(), self.cluster_k, float("nan"), self.cluster_seed)
        zone = None
        if self.zone_frozen:
            w = self.state["zone.weight"]
            seen = self.zone_seen if self.zone_seen is not None else np.ones(w.shape[0], dtype=bool)
            zone = ZoneEmbedding(EmbeddingTable(w.shape[0], w.shape[1], w.copy(), trainable=False), seen)
        return FeaturePipeline(
            clusters=clusters,
            boc=BocTable(self.boc_counts),
            drivers=DriverVocabulary(tuple(self.drivers)),
            standardizer=self.standardizer,
            zone=zone,
            use_boc=self.use_boc,
        )

    def _metadata(self) -> Dict:
        return {
            "kind": "lstm",
            "version": self.version,
            "config": self.config.to_dict(),
            "cluster_k": self.cluster_k,
            "cluster_seed": self.cluster_seed,
            "standardizer": {"mean": list(self.standardizer.mean), "std": list(self.standardizer.std)},
            "drivers": list(self.drivers),
            "use_boc": self.use_boc,
            "zone_frozen": self.zone_frozen,
            "training_log": [asdict(e) for e in self.training_log],
            "best_epoch": self.best_epoch,
            "stopped_epoch": self.stopped_epoch,
        }

    def _arrays(self) -> Dict[str, np.ndarray]:
        arrays = {f"param/{name}": value for name, value in self.state.items()}
        arrays["centroids"] = self.centroids
        arrays["boc_counts"] = self.boc_counts
        if self.zone_seen is not None:
            arrays["zone_seen"] = self.zone_seen
        return arrays

    def digest(self) -> str:
        return content_digest(self._metadata(), self._arrays())

    def save(self, path) -> None:
        write_npz(path, self._metadata(), self._arrays())
        logger.info("Checkpoint written to %s (digest %s)", path, self.digest()[:12])

    @classmethod
    def load(cls, path) -> "PredictorCheckpoint":
        meta, arrays = read_npz(path, "lstm")
        state = {name[len("param/"):]: v for name, v in arrays.items() if name.startswith("param/")}
        centroids = arrays["centroids"]
        boc_counts = arrays["boc_counts"]
        zone_seen = arrays.get("zone_seen")
        std = meta["standardizer"]
        return cls(
            config=PredictorConfig.from_dict(meta["config"]),
            state=state,
            centroids=centroids,
            cluster_k=meta["cluster_k"],
            cluster_seed=meta["cluster_seed"],
            standardizer=CoordinateStandardizer(tuple(std["mean"]), tuple(std["std"])),
            drivers=tuple(meta["drivers"]),
            boc_counts=boc_counts,
            use_boc=meta["use_boc"],
            zone_frozen=meta["zone_frozen"],
            zone_seen=zone_seen,
            training_log=[EpochLog(**e) for e in meta["training_log"]],
            best_epoch=meta["best_epoch"],
            stopped_epoch=meta["stopped_epoch"],
        )
