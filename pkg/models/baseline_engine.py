"""
Baseline Engine
===============
Reference predictors the LSTM is compared against.

  - NN: the centroid nearest to the current pick-up
  - MMLP: multi-layer perceptron over the first 5 and last 5 GPS points of
    the observed stream (previous ride's trace, then the current pick-up)
    plus the categorical embeddings of the current pick-up
  - MMLP-SEQ: same network over the ≤ 9 points of the trip sequence,
    zero-padded

Both MLPs: one hidden layer of 500 ReLUs, softmax over the m destination
clusters, cross-entropy against the nearest-centroid class, SGD with
momentum; the predicted point is Σ P_i c_i with the centroids held fixed.
"""

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from data.ingest import DriverSequence
from models.clustering_engine import ClusterModel, assign
from models.errors import ConfigError, NonFiniteError, ShapeError, TrainingDivergedError
from models.feature_engine import (
    EMBED_DIM,
    MAX_STEPS,
    N_DAY_TYPES,
    N_HOURS,
    N_WEEKDAYS,
    CoordinateStandardizer,
    FeatureBatch,
    FeaturePipeline,
)
from models.destination_engine import (
    CHECKPOINT_VERSION,
    EVAL_CHUNK,
    EarlyStopping,
    EpochLog,
    content_digest,
    read_npz,
    write_npz,
)
from models.geo import Coordinate
from models.tensor_nn import SGD, Dense, Embedding, Module, Tensor, concat, cross_entropy, relu, softmax

logger = logging.getLogger(__name__)

MMLP_VARIANTS = ("mmlp", "mmlp_seq")


# ═══════════════════════════════════════════════════════════════════════
# NEAREST-CENTROID BASELINE
# ═══════════════════════════════════════════════════════════════════════

def predict_nn_baseline(model: ClusterModel, pickup: Coordinate) -> Coordinate:
    """Coordinates of the centroid closest to the pick-up."""
    return model.centroid(assign(model, pickup))


def predict_nn_many(model: ClusterModel, pickups: np.ndarray) -> np.ndarray:
    return model.centroids[model.assign_many(pickups)]


# ═══════════════════════════════════════════════════════════════════════
# MMLP INPUTS
# ═══════════════════════════════════════════════════════════════════════

@dataclass
class MmlpConfig:
    hidden: int = 500
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 200
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    embed_dim: int = EMBED_DIM
    window: int = 5                       # GPS points taken from each end of the stream

    def __post_init__(self):
        for name in ("hidden", "batch_size", "max_epochs", "patience", "embed_dim", "window"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.learning_rate <= 0 or not 0.0 <= self.momentum < 1.0:
            raise ConfigError("learning_rate must be positive and momentum in [0, 1)")

    @classmethod
    def from_dict(cls, values: Dict) -> "MmlpConfig":
        unknown = sorted(set(values) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown mmlp config keys: {unknown}")
        return cls(**values)


def observed_stream(seq: DriverSequence) -> Tuple[Coordinate, ...]:
    if seq.previous_polyline is None:
        raise ShapeError(
            f"{seq.sample_id}: no GPS trace for the previous ride; the mmlp baseline needs "
            "polyline data (use mmlp_seq for origin-destination datasets)"
        )
    return tuple(seq.previous_polyline) + (seq.current_pickup.loc,)


def polyline_window(points: Sequence[Coordinate], n: int = 5) -> np.ndarray:
    """
    First n ⊕ last n points as a (2n, 2) lat/lon array. A stream shorter
    than n repeats its last point to fill the head and its first point to
    fill the tail.
    """
    if len(points) == 0:
        raise ShapeError("cannot window an empty point stream")
    arr = np.array([[p.lat, p.lon] for p in points], dtype=np.float64)
    head = arr[:n]
    if head.shape[0] < n:
        head = np.vstack([head, np.repeat(head[-1:], n - head.shape[0], axis=0)])
    tail = arr[-n:]
    if tail.shape[0] < n:
        tail = np.vstack([np.repeat(tail[:1], n - tail.shape[0], axis=0), tail])
    return np.vstack([head, tail])


def sequence_points(seq: DriverSequence, max_steps: int = MAX_STEPS) -> Tuple[np.ndarray, np.ndarray]:
    """(max_steps, 2) left-padded coordinates of history ⊕ pick-up, and the validity mask."""
    pts = seq.points
    if len(pts) > max_steps:
        raise ShapeError(f"{seq.sample_id}: {len(pts)} points exceed {max_steps}")
    coords = np.zeros((max_steps, 2))
    mask = np.zeros(max_steps, dtype=bool)
    pad = max_steps - len(pts)
    coords[pad:] = [[p.loc.lat, p.loc.lon] for p in pts]
    mask[pad:] = True
    return coords, mask


def mmlp_inputs(batch: FeatureBatch, variant: str, standardizer: CoordinateStandardizer,
                window: int = 5) -> Tuple[np.ndarray, np.ndarray]:
    """Flattened standardised coordinates (B, W) and categorical ids (B, 4) of the pick-up."""
    if variant not in MMLP_VARIANTS:
        raise ConfigError(f"unknown mmlp variant '{variant}'; expected one of {MMLP_VARIANTS}")
    rows = []
    for seq in batch.sequences:
        if variant == "mmlp":
            rows.append(standardizer.transform(polyline_window(observed_stream(seq), window)).reshape(-1))
        else:
            coords, mask = sequence_points(seq, batch.mask.shape[1])
            scaled = standardizer.transform(coords)
            scaled[~mask] = 0.0
            rows.append(scaled.reshape(-1))
    cats = np.stack([batch.hour_ids[:, -1], batch.weekday_ids[:, -1],
                     batch.daytype_ids[:, -1], batch.driver_ids[:, -1]], axis=1)
    return np.array(rows), cats


# ═══════════════════════════════════════════════════════════════════════
# NETWORK
# ═══════════════════════════════════════════════════════════════════════

class MmlpNetwork(Module):
    def __init__(self, coord_width: int, n_clusters: int, n_driver_rows: int,
                 rng: np.random.Generator, hidden: int = 500, embed_dim: int = EMBED_DIM):
        super().__init__()
        self.coord_width = coord_width
        self.n_clusters = n_clusters
        self.hour = Embedding(N_HOURS, embed_dim, rng)
        self.weekday = Embedding(N_WEEKDAYS, embed_dim, rng)
        self.day_type = Embedding(N_DAY_TYPES, embed_dim, rng)
        self.driver = Embedding(n_driver_rows, embed_dim, rng)
        self.hidden = Dense(coord_width + 4 * embed_dim, hidden, rng)
        self.softmax_layer = Dense(hidden, n_clusters, rng)

    def logits(self, coords: np.ndarray, cats: np.ndarray) -> Tensor:
        if coords.shape[1] != self.coord_width:
            raise ShapeError(f"coordinate block width {coords.shape[1]} != {self.coord_width}")
        x = concat([
            Tensor(coords),
            self.hour(cats[:, 0]),
            self.weekday(cats[:, 1]),
            self.day_type(cats[:, 2]),
            self.driver(cats[:, 3]),
        ], axis=-1)
        return self.softmax_layer(relu(self.hidden(x)))

    def forward(self, coords: np.ndarray, cats: np.ndarray) -> Tensor:
        return softmax(self.logits(coords, cats), axis=-1)


def _coord_width(variant: str, window: int, max_steps: int) -> int:
    return 4 * window if variant == "mmlp" else 2 * max_steps


# ═══════════════════════════════════════════════════════════════════════
# CHECKPOINT
# ═══════════════════════════════════════════════════════════════════════

@dataclass
class MmlpCheckpoint:
    config: MmlpConfig
    variant: str
    state: Dict[str, np.ndarray]
    centroids: np.ndarray
    standardizer: CoordinateStandardizer
    n_driver_rows: int
    max_steps: int = MAX_STEPS
    training_log: List[EpochLog] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    version: int = CHECKPOINT_VERSION

    def to_network(self) -> MmlpNetwork:
        net = MmlpNetwork(_coord_width(self.variant, self.config.window, self.max_steps),
                          self.centroids.shape[0], self.n_driver_rows,
                          np.random.default_rng(self.config.seed), self.config.hidden, self.config.embed_dim)
        net.load_state_dict(self.state)
        return net.eval()

    def _metadata(self) -> Dict:
        return {
            "kind": "mmlp",
            "version": self.version,
            "variant": self.variant,
            "config": asdict(self.config),
            "standardizer": {"mean": list(self.standardizer.mean), "std": list(self.standardizer.std)},
            "n_driver_rows": self.n_driver_rows,
            "max_steps": self.max_steps,
            "training_log": [asdict(e) for e in self.training_log],
            "best_epoch": self.best_epoch,
            "stopped_epoch": self.stopped_epoch,
        }

    def _arrays(self) -> Dict[str, np.ndarray]:
        arrays = {f"param/{name}": value for name, value in self.state.items()}
        arrays["centroids"] = self.centroids
        return arrays

    def digest(self) -> str:
        return content_digest(self._metadata(), self._arrays())

    def save(self, path) -> None:
        write_npz(path, self._metadata(), self._arrays())

    @classmethod
    def load(cls, path) -> "MmlpCheckpoint":
        meta, arrays = read_npz(path, "mmlp")
        std = meta["standardizer"]
        return cls(
            config=MmlpConfig.from_dict(meta["config"]),
            variant=meta["variant"],
            state={k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")},
            centroids=arrays["centroids"],
            standardizer=CoordinateStandardizer(tuple(std["mean"]), tuple(std["std"])),
            n_driver_rows=meta["n_driver_rows"],
            max_steps=meta["max_steps"],
            training_log=[EpochLog(**e) for e in meta["training_log"]],
            best_epoch=meta["best_epoch"],
            stopped_epoch=meta["stopped_epoch"],
        )


# ═══════════════════════════════════════════════════════════════════════
# TRAINING & PREDICTION
# ═══════════════════════════════════════════════════════════════════════

def _mean_ce(net: MmlpNetwork, coords: np.ndarray, cats: np.ndarray, targets: np.ndarray) -> float:
    total = 0.0
    for s in range(0, len(targets), EVAL_CHUNK):
        sl = slice(s, s + EVAL_CHUNK)
        total += float(cross_entropy(net.logits(coords[sl], cats[sl]), targets[sl]).data) * len(targets[sl])
    return total / len(targets)


def train_mmlp(
    config: MmlpConfig,
    train_set: FeatureBatch,
    val_set: FeatureBatch,
    pipeline: FeaturePipeline,
    variant: str = "mmlp",
) -> MmlpCheckpoint:
    """Train an MMLP / MMLP-SEQ classifier over the destination clusters."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise ShapeError("training and validation splits must be non-empty")
    if not (train_set.has_targets and val_set.has_targets):
        raise ShapeError("mmlp training needs a target for every sample")
    std = pipeline.standardizer
    x_train, c_train = mmlp_inputs(train_set, variant, std, config.window)
    x_val, c_val = mmlp_inputs(val_set, variant, std, config.window)
    y_train, y_val = train_set.target_class, val_set.target_class

    rng = np.random.default_rng(config.seed)
    net = MmlpNetwork(x_train.shape[1], pipeline.clusters.m, pipeline.drivers.size, rng,
                      config.hidden, config.embed_dim)
    optimizer = SGD(net.trainable_parameters(), lr=config.learning_rate, momentum=config.momentum)
    stopper = EarlyStopping(config.patience)

    log = [EpochLog(0, _mean_ce(net, x_train, c_train, y_train), _mean_ce(net, x_val, c_val, y_val))]
    stopper.update(0, log[0].val_loss)
    best_state = net.state_dict()
    logger.info("Training %s: %d train, %d val samples, input width %d, epoch 0 val CE %.5f",
                variant, len(y_train), len(y_val), x_train.shape[1], log[0].val_loss)

    def checkpoint(state, stopped):
        return MmlpCheckpoint(config, variant, {k: v.copy() for k, v in state.items()},
                              pipeline.clusters.centroids.copy(), std, pipeline.drivers.size,
                              train_set.mask.shape[1], list(log), stopper.best_epoch, stopped)

    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(y_train))
        try:
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                optimizer.zero_grad()
                loss = cross_entropy(net.logits(x_train[idx], c_train[idx]), y_train[idx])
                loss.backward()
                optimizer.step()
            train_loss = _mean_ce(net, x_train, c_train, y_train)
            val_loss = _mean_ce(net, x_val, c_val, y_val)
        except NonFiniteError as exc:
            raise TrainingDivergedError(f"{variant} diverged at epoch {epoch}: {exc}",
                                        checkpoint=checkpoint(best_state, epoch)) from exc

        log.append(EpochLog(epoch, train_loss, val_loss))
        if stopper.update(epoch, val_loss):
            best_state = net.state_dict()
        logger.debug("%s epoch %d: train CE %.5f  val CE %.5f", variant, epoch, train_loss, val_loss)
        if stopper.should_stop(epoch):
            break

    logger.info("%s: best epoch %d (val CE %.5f), stopped at %d", variant, stopper.best_epoch,
                stopper.best_loss, epoch)
    return checkpoint(best_state, epoch)


def predict_mmlp(checkpoint: MmlpCheckpoint, batch: FeatureBatch,
                 net: Optional[MmlpNetwork] = None) -> np.ndarray:
    """(B, 2) predicted lat/lon: softmax-weighted centroid mean."""
    net = net or checkpoint.to_network()
    coords, cats = mmlp_inputs(batch, checkpoint.variant, checkpoint.standardizer, checkpoint.config.window)
    parts = [net.forward(coords[s:s + EVAL_CHUNK], cats[s:s + EVAL_CHUNK]).data @ checkpoint.centroids
             for s in range(0, len(coords), EVAL_CHUNK)]
    return np.concatenate(parts, axis=0)
