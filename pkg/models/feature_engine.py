"""
Feature Engine
==============
Per-step input features for the recurrent destination model.

Per step (history ⊕ current pick-up, left-padded to 9 steps):
  zone embedding (20) ⊕ log(1 + BOC counts) (10) ⊕ hour (10) ⊕ weekday (10)
  ⊕ day-type (10) ⊕ driver (10)  ->  70 values, masked steps all-zero

Components:
  - Bag-of-Concepts: POI macro-category counts per destination cluster
  - Zone embeddings: CBOW with negative sampling over per-shift cluster traces
  - Driver vocabulary (row 0 = unknown driver) and target standardisation
  - FeaturePipeline: everything above fitted on the training split, then
    applied to any split as a FeatureBatch
"""

import hashlib
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import special

from data.ingest import MACRO_CATEGORIES, DriverSequence, Poi
from models.clustering_engine import ClusterModel, ClusterTrace, as_latlon_array, assign_many
from models.errors import SchemaError, ShapeError, TripFileError

logger = logging.getLogger(__name__)


N_CATEGORIES = len(MACRO_CATEGORIES)
ZONE_DIM = 20
EMBED_DIM = 10
MAX_STEPS = 9
N_HOURS = 24
N_WEEKDAYS = 7
N_DAY_TYPES = 3
FEATURE_WIDTH = ZONE_DIM + N_CATEGORIES + 4 * EMBED_DIM      # 70

UNKNOWN_DRIVER = 0


# ═══════════════════════════════════════════════════════════════════════
# BAG OF CONCEPTS
# ═══════════════════════════════════════════════════════════════════════

@dataclass
class BocTable:
    """POI macro-category counts per cluster, columns in MACRO_CATEGORIES order."""
    counts: np.ndarray                       # (m, 10) int64

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[1] != N_CATEGORIES:
            raise ShapeError(f"BOC table must be (m, {N_CATEGORIES}), got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise ShapeError("BOC counts must be non-negative")

    @property
    def m(self) -> int:
        return int(self.counts.shape[0])

    def __getitem__(self, cluster_id: int) -> np.ndarray:
        return self.counts[cluster_id]

    def as_dict(self) -> Dict[int, np.ndarray]:
        return {cid: self.counts[cid].copy() for cid in range(self.m)}

    def log_scaled(self) -> np.ndarray:
        return np.log1p(self.counts.astype(np.float64))

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.counts, columns=list(MACRO_CATEGORIES))
        frame.insert(0, "cluster_id", np.arange(self.m))
        return frame

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, lineterminator="\n")


def build_boc(model: ClusterModel, pois: Iterable[Poi]) -> BocTable:
    """Assign each POI to its nearest cluster and count macro-categories."""
    pois = list(pois)
    counts = np.zeros((model.m, N_CATEGORIES), dtype=np.int64)
    if pois:
        labels = assign_many(model, [p.loc for p in pois])
        cats = np.array([MACRO_CATEGORIES.index(p.macro_category) for p in pois], dtype=np.int64)
        np.add.at(counts, (labels, cats), 1)
    logger.info("BOC: %d POIs over %d clusters (%d clusters without POIs)",
                len(pois), model.m, int(np.sum(counts.sum(axis=1) == 0)))
    return BocTable(counts)


def load_boc(path) -> BocTable:
    path = Path(path)
    if not path.is_file():
        raise TripFileError(f"BOC file not found: {path}")
    frame = pd.read_csv(path)
    missing = [c for c in ("cluster_id",) + MACRO_CATEGORIES if c not in frame.columns]
    if missing:
        raise SchemaError(f"{path}: missing BOC columns {missing}")
    frame = frame.sort_values("cluster_id")
    return BocTable(frame[list(MACRO_CATEGORIES)].to_numpy(dtype=np.int64))


# ═══════════════════════════════════════════════════════════════════════
# EMBEDDING TABLES
# ═══════════════════════════════════════════════════════════════════════

@dataclass
class EmbeddingTable:
    vocab_size: int
    dim: int
    weights: np.ndarray
    trainable: bool = True

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (self.vocab_size, self.dim):
            raise ShapeError(f"weights {self.weights.shape} != ({self.vocab_size}, {self.dim})")
        if not np.all(np.isfinite(self.weights)):
            raise ShapeError("embedding weights must be finite")

    @classmethod
    def zeros(cls, vocab_size: int, dim: int, trainable: bool = True) -> "EmbeddingTable":
        return cls(vocab_size, dim, np.zeros((vocab_size, dim)), trainable)

    def lookup(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ShapeError(f"embedding ids outside [0, {self.vocab_size})")
        return self.weights[ids]


@dataclass
class ZoneEmbedding:
    """CBOW vectors per cluster id; ids absent from the corpus map to zero."""
    table: EmbeddingTable
    seen: np.ndarray                                # (vocab,) bool
    loss_history: List[float] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.table.dim

    @property
    def weights(self) -> np.ndarray:
        return self.table.weights

    def vector(self, cluster_id: int) -> np.ndarray:
        if 0 <= cluster_id < self.table.vocab_size and self.seen[cluster_id]:
            return self.table.weights[cluster_id].copy()
        return np.zeros(self.dim)

    def lookup(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        inside = (ids >= 0) & (ids < self.table.vocab_size)
        out = np.zeros(ids.shape + (self.dim,))
        out[inside] = self.table.weights[ids[inside]]
        return out


def save_zone_embedding(path, zone: ZoneEmbedding) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        np.savez(fh, weights=zone.weights, seen=zone.seen,
                 loss_history=np.asarray(zone.loss_history, dtype=np.float64))


def load_zone_embedding(path) -> ZoneEmbedding:
    path = Path(path)
    if not path.is_file():
        raise TripFileError(f"zone embedding file not found: {path}")
    with np.load(path, allow_pickle=False) as npz:
        weights = npz["weights"]
        table = EmbeddingTable(weights.shape[0], weights.shape[1], weights, trainable=False)
        return ZoneEmbedding(table, npz["seen"].astype(bool), [float(x) for x in npz["loss_history"]])


# ═══════════════════════════════════════════════════════════════════════
# CBOW ZONE EMBEDDINGS
# ═══════════════════════════════════════════════════════════════════════

def shift_sentences(samples: Iterable[DriverSequence], model: ClusterModel) -> List[List[int]]:
    """
    One sentence per shift: the cluster ids of its trips' pick-ups and
    drop-offs in time order, each trip counted once however many samples
    contain it.
    """
    shifts: "OrderedDict[str, Dict[float, Tuple]]" = OrderedDict()
    for seq in samples:
        trips = shifts.setdefault(seq.shift_id, {})
        hist = seq.history
        for p, d in zip(hist[0::2], hist[1::2]):
            trips.setdefault(p.t, (p.loc, d.loc))
        if seq.target is not None:
            trips.setdefault(seq.current_pickup.t, (seq.current_pickup.loc, seq.target))

    flat = []
    for trips in shifts.values():
        for t in sorted(trips):
            flat.extend(trips[t])
    labels = assign_many(model, flat) if flat else np.empty(0, dtype=np.int64)

    sentences, pos = [], 0
    for trips in shifts.values():
        n = 2 * len(trips)
        sentences.append([int(x) for x in labels[pos:pos + n]])
        pos += n
    return sentences


def _as_ids(trace) -> np.ndarray:
    ids = trace.ids if isinstance(trace, ClusterTrace) else trace
    return np.asarray(ids, dtype=np.int64)


def train_cbow(
    traces: Iterable[Union[ClusterTrace, Sequence[int]]],
    vocab_size: Optional[int] = None,
    dim: int = ZONE_DIM,
    window: int = 5,
    epochs: int = 5,
    seed: int = 0,
    negative: int = 5,
    learning_rate: float = 0.025,
    min_learning_rate: float = 1e-4,
) -> ZoneEmbedding:
    """
    Continuous bag-of-words with negative sampling over cluster-id tokens.

    Context vectors are averaged; negatives are drawn from the unigram
    distribution raised to 0.75; the learning rate decays linearly over all
    epochs; every token is kept (no frequency cutoff). Deterministic for a
    given seed.
    """
    sentences = [s for s in (_as_ids(t) for t in traces) if s.size]
    if not sentences:
        raise ShapeError("CBOW corpus is empty")
    corpus = np.concatenate(sentences)
    if corpus.min() < 0:
        raise ShapeError("CBOW tokens must be non-negative cluster ids")
    vocab_size = int(corpus.max()) + 1 if vocab_size is None else int(vocab_size)
    if corpus.max() >= vocab_size:
        raise ShapeError(f"token {corpus.max()} outside vocabulary of size {vocab_size}")
    counts = np.bincount(corpus, minlength=vocab_size)
    if np.count_nonzero(counts) < 2:
        raise ShapeError("CBOW corpus has a single distinct token; no negatives can be drawn")

    rng = np.random.default_rng(seed)
    noise = counts.astype(np.float64) ** 0.75
    noise /= noise.sum()
    w_in = (rng.random((vocab_size, dim)) - 0.5) / dim
    w_out = np.zeros((vocab_size, dim))

    total = corpus.size * epochs
    processed = 0
    history = []
    for epoch in range(1, epochs + 1):
        epoch_loss, n_pred = 0.0, 0
        for sent in sentences:
            negs_all = rng.choice(vocab_size, size=(sent.size, negative), p=noise)
            shrink = rng.integers(0, window, size=sent.size)
            for pos, target in enumerate(sent):
                lr = max(min_learning_rate, learning_rate * (1.0 - processed / total))
                processed += 1
                span = window - shrink[pos]
                ctx = np.concatenate([sent[max(0, pos - span):pos], sent[pos + 1:pos + 1 + span]])
                if ctx.size == 0:
                    continue
                h = w_in[ctx].mean(axis=0)
                negs = negs_all[pos][negs_all[pos] != target]
                words = np.concatenate([[target], negs])
                labels = np.zeros(words.size)
                labels[0] = 1.0

                scores = w_out[words] @ h
                g = (labels - special.expit(scores)) * lr
                epoch_loss += float(np.logaddexp(0.0, -scores[0]) + np.sum(np.logaddexp(0.0, scores[1:])))
                n_pred += 1

                grad_h = g @ w_out[words]
                np.add.at(w_out, words, np.outer(g, h))
                np.add.at(w_in, ctx, grad_h)
        mean_loss = epoch_loss / max(n_pred, 1)
        history.append(mean_loss)
        logger.debug("CBOW epoch %d/%d: loss %.5f", epoch, epochs, mean_loss)

    seen = counts > 0
    w_in[~seen] = 0.0
    logger.info("CBOW: %d sentences, %d tokens, %d distinct ids, final loss %.4f",
                len(sentences), corpus.size, int(seen.sum()), history[-1])
    table = EmbeddingTable(vocab_size, dim, w_in, trainable=False)
    return ZoneEmbedding(table, seen, history)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


# ═══════════════════════════════════════════════════════════════════════
# DRIVERS & COORDINATES
# ═══════════════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class DriverVocabulary:
    """Training-split drivers in sorted order, numbered from 1; 0 = unknown."""
    drivers: Tuple[str, ...]
    _index: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "drivers", tuple(self.drivers))
        object.__setattr__(self, "_index", {d: i + 1 for i, d in enumerate(self.drivers)})

    @classmethod
    def fit(cls, driver_ids: Iterable[str]) -> "DriverVocabulary":
        return cls(tuple(sorted(set(driver_ids))))

    @property
    def size(self) -> int:
        return len(self.drivers) + 1

    def lookup(self, driver_id: str) -> int:
        return self._index.get(driver_id, UNKNOWN_DRIVER)


@dataclass(frozen=True)
class CoordinateStandardizer:
    """Zero-mean, unit-variance lat/lon, fitted on training targets."""
    mean: Tuple[float, float]
    std: Tuple[float, float]

    @classmethod
    def fit(cls, coords) -> "CoordinateStandardizer":
        arr = as_latlon_array(coords)
        if arr.shape[0] == 0:
            raise ShapeError("cannot fit a standardizer on zero coordinates")
        mean = arr.mean(axis=0)
        std = arr.std(axis=0)
        std = np.where(std > 0.0, std, 1.0)
        return cls((float(mean[0]), float(mean[1])), (float(std[0]), float(std[1])))

    def transform(self, coords) -> np.ndarray:
        return (np.asarray(coords, dtype=np.float64) - np.asarray(self.mean)) / np.asarray(self.std)

    def inverse(self, coords) -> np.ndarray:
        return np.asarray(coords, dtype=np.float64) * np.asarray(self.std) + np.asarray(self.mean)


# ═══════════════════════════════════════════════════════════════════════
# FEATURE ASSEMBLY
# ═══════════════════════════════════════════════════════════════════════

@dataclass
class CategoricalTables:
    hour: EmbeddingTable
    weekday: EmbeddingTable
    day_type: EmbeddingTable
    driver: EmbeddingTable

    @classmethod
    def zeros(cls, n_driver_rows: int, dim: int = EMBED_DIM) -> "CategoricalTables":
        return cls(
            EmbeddingTable.zeros(N_HOURS, dim),
            EmbeddingTable.zeros(N_WEEKDAYS, dim),
            EmbeddingTable.zeros(N_DAY_TYPES, dim),
            EmbeddingTable.zeros(n_driver_rows, dim),
        )


@dataclass(frozen=True)
class FeatureTensor:
    """
    One sample's steps, left-padded to max_steps. Integer ids feed trainable
    lookups inside the model; `values` is the concatenated 70-wide view when
    tables were supplied.
    """
    zone_ids: np.ndarray                 # (T,) int
    boc: np.ndarray                      # (T, 10) log(1 + counts)
    hour_ids: np.ndarray
    weekday_ids: np.ndarray
    daytype_ids: np.ndarray
    driver_ids: np.ndarray
    mask: np.ndarray                     # (T,) bool, True = real step
    values: Optional[np.ndarray] = None  # (T, 70)

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())


def _step_arrays(
    seq: DriverSequence,
    trace: ClusterTrace,
    boc_scaled: Optional[np.ndarray],
    driver_row: int,
    max_steps: int,
) -> Tuple[np.ndarray, ...]:
    n = len(seq.points)
    if len(trace) != n:
        raise ShapeError(f"{seq.sample_id}: trace length {len(trace)} != sequence length {n}")
    if n > max_steps:
        raise ShapeError(f"{seq.sample_id}: {n} steps exceed the {max_steps}-step window")
    if len(seq.step_meta) != n:
        raise ShapeError(f"{seq.sample_id}: {len(seq.step_meta)} step metas for {n} steps")
    pad = max_steps - n

    zone = np.zeros(max_steps, dtype=np.int64)
    hour = np.zeros(max_steps, dtype=np.int64)
    weekday = np.zeros(max_steps, dtype=np.int64)
    daytype = np.zeros(max_steps, dtype=np.int64)
    driver = np.zeros(max_steps, dtype=np.int64)
    boc = np.zeros((max_steps, N_CATEGORIES))
    mask = np.zeros(max_steps, dtype=bool)

    zone[pad:] = trace.ids
    hour[pad:] = [m.hour for m in seq.step_meta]
    weekday[pad:] = [m.weekday for m in seq.step_meta]
    daytype[pad:] = [m.day_type for m in seq.step_meta]
    driver[pad:] = driver_row
    if boc_scaled is not None:
        boc[pad:] = boc_scaled[list(trace.ids)]
    mask[pad:] = True
    return zone, boc, hour, weekday, daytype, driver, mask


def assemble(
    seq: DriverSequence,
    trace: ClusterTrace,
    zone,
    boc_map: Optional[BocTable],
    tables: Optional[CategoricalTables],
    drivers: Optional[DriverVocabulary] = None,
    max_steps: int = MAX_STEPS,
) -> FeatureTensor:
    """Build one sample's FeatureTensor; boc_map=None zeroes the BOC block."""
    driver_row = drivers.lookup(seq.driver_id) if drivers is not None else UNKNOWN_DRIVER
    boc_scaled = boc_map.log_scaled() if boc_map is not None else None
    zone_ids, boc, hour, weekday, daytype, driver, mask = _step_arrays(
        seq, trace, boc_scaled, driver_row, max_steps
    )

    values = None
    if tables is not None:
        zone_block = zone.lookup(zone_ids) if zone is not None else np.zeros((max_steps, ZONE_DIM))
        values = np.concatenate([
            zone_block,
            boc,
            tables.hour.lookup(hour),
            tables.weekday.lookup(weekday),
            tables.day_type.lookup(daytype),
            tables.driver.lookup(driver),
        ], axis=1)
        if values.shape[1] != FEATURE_WIDTH:
            raise ShapeError(f"assembled width {values.shape[1]} != {FEATURE_WIDTH}")
        values[~mask] = 0.0
    return FeatureTensor(zone_ids, boc, hour, weekday, daytype, driver, mask, values)


@dataclass
class FeatureBatch:
    """Stacked FeatureTensors of a split plus regression/classification targets."""
    sequences: List[DriverSequence]
    zone_ids: np.ndarray                 # (B, T)
    boc: np.ndarray                      # (B, T, 10)
    hour_ids: np.ndarray
    weekday_ids: np.ndarray
    daytype_ids: np.ndarray
    driver_ids: np.ndarray
    mask: np.ndarray                     # (B, T)
    targets: np.ndarray                  # (B, 2) degrees, NaN where absent
    targets_std: np.ndarray              # (B, 2) standardised
    target_class: np.ndarray             # (B,) nearest centroid, -1 where absent
    pickups: np.ndarray                  # (B, 2) degrees

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def sample_ids(self) -> List[str]:
        return [s.sample_id for s in self.sequences]

    @property
    def has_targets(self) -> bool:
        return bool(np.all(self.target_class >= 0))

    def subset(self, idx) -> "FeatureBatch":
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureBatch(
            sequences=[self.sequences[i] for i in idx],
            zone_ids=self.zone_ids[idx],
            boc=self.boc[idx],
            hour_ids=self.hour_ids[idx],
            weekday_ids=self.weekday_ids[idx],
            daytype_ids=self.daytype_ids[idx],
            driver_ids=self.driver_ids[idx],
            mask=self.mask[idx],
            targets=self.targets[idx],
            targets_std=self.targets_std[idx],
            target_class=self.target_class[idx],
            pickups=self.pickups[idx],
        )

    def feature_tensor(self, i: int) -> FeatureTensor:
        return FeatureTensor(self.zone_ids[i], self.boc[i], self.hour_ids[i], self.weekday_ids[i],
                             self.daytype_ids[i], self.driver_ids[i], self.mask[i])


# ═══════════════════════════════════════════════════════════════════════
# PIPELINE
# ═══════════════════════════════════════════════════════════════════════

@dataclass
class FeaturePipeline:
    """Every statistic fitted on the training split; transform() applies them to any split."""
    clusters: ClusterModel
    boc: BocTable
    drivers: DriverVocabulary
    standardizer: CoordinateStandardizer
    zone: Optional[ZoneEmbedding] = None
    use_boc: bool = True
    max_steps: int = MAX_STEPS

    def traces(self, samples: Sequence[DriverSequence]) -> List[ClusterTrace]:
        flat = [p.loc for s in samples for p in s.points]
        labels = assign_many(self.clusters, flat) if flat else np.empty(0, dtype=np.int64)
        out, pos = [], 0
        for s in samples:
            n = len(s.points)
            out.append(ClusterTrace(tuple(int(x) for x in labels[pos:pos + n])))
            pos += n
        return out

    def transform(self, samples: Sequence[DriverSequence]) -> FeatureBatch:
        samples = list(samples)
        if not samples:
            raise ShapeError("cannot transform an empty sample list")
        boc_scaled = self.boc.log_scaled() if self.use_boc else None
        traces = self.traces(samples)
        rows = [
            _step_arrays(s, tr, boc_scaled, self.drivers.lookup(s.driver_id), self.max_steps)
            for s, tr in zip(samples, traces)
        ]
        zone, boc, hour, weekday, daytype, driver, mask = (np.stack(col) for col in zip(*rows))

        targets = np.array(
            [[s.target.lat, s.target.lon] if s.target is not None else [np.nan, np.nan] for s in samples]
        )
        present = ~np.isnan(targets[:, 0])
        target_class = np.full(len(samples), -1, dtype=np.int64)
        if present.any():
            target_class[present] = assign_many(self.clusters, targets[present])
        pickups = np.array([[s.current_pickup.loc.lat, s.current_pickup.loc.lon] for s in samples])

        return FeatureBatch(
            sequences=samples,
            zone_ids=zone,
            boc=boc,
            hour_ids=hour,
            weekday_ids=weekday,
            daytype_ids=daytype,
            driver_ids=driver,
            mask=mask,
            targets=targets,
            targets_std=self.standardizer.transform(np.nan_to_num(targets)),
            target_class=target_class,
            pickups=pickups,
        )

    def digest(self) -> str:
        """sha256 over every fitted artifact; equal digests mean equal pipelines."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.clusters.centroids).tobytes())
        h.update(np.ascontiguousarray(self.boc.counts).tobytes())
        h.update("\n".join(self.drivers.drivers).encode("utf-8"))
        h.update(np.asarray(self.standardizer.mean + self.standardizer.std).tobytes())
        if self.zone is not None:
            h.update(np.ascontiguousarray(self.zone.weights).tobytes())
        h.update(repr((self.use_boc, self.max_steps)).encode("utf-8"))
        return h.hexdigest()


def fit_feature_pipeline(
    train: Sequence[DriverSequence],
    clusters: ClusterModel,
    pois: Iterable[Poi] = (),
    use_boc: bool = True,
    use_cbow: bool = True,
    zone_dim: int = ZONE_DIM,
    cbow_window: int = 5,
    cbow_epochs: int = 5,
    seed: int = 0,
    zone: Optional[ZoneEmbedding] = None,
) -> FeaturePipeline:
    """Fit BOC, CBOW, driver vocabulary and target scaling on the training split."""
    train = list(train)
    if not train:
        raise ShapeError("feature pipeline needs a non-empty training split")
    boc = build_boc(clusters, pois) if use_boc else BocTable(np.zeros((clusters.m, N_CATEGORIES)))
    if use_cbow and zone is None:
        zone = train_cbow(shift_sentences(train, clusters), vocab_size=clusters.m, dim=zone_dim,
                          window=cbow_window, epochs=cbow_epochs, seed=seed)
    elif not use_cbow:
        zone = None
    if zone is not None and zone.table.vocab_size != clusters.m:
        raise ShapeError(f"zone embedding covers {zone.table.vocab_size} ids; clusters have {clusters.m}")

    targets = np.array([[s.target.lat, s.target.lon] for s in train if s.target is not None])
    return FeaturePipeline(
        clusters=clusters,
        boc=boc,
        drivers=DriverVocabulary.fit(s.driver_id for s in train),
        standardizer=CoordinateStandardizer.fit(targets),
        zone=zone,
        use_boc=use_boc,
    )
