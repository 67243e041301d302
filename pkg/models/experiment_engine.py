"""
Experiment Engine
=================
Split, train, evaluate and report the destination models on one city.

Model menu (each optionally suffixed ":classification"):
  nn            nearest centroid to the current pick-up
  mmlp          MLP over the first/last GPS points of the observed stream
  mmlp_seq      MLP over the flattened trip sequence
  lstm          attention LSTM, trainable random zone embedding, no BOC
  lstm_boc      + Bag-of-Concepts
  lstm_boc_w2v  + frozen CBOW zone embedding

Every fitted statistic (centroids, BOC, CBOW, driver vocabulary, target
scaling) comes from the training split alone.
"""

import configparser
import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from data.ingest import (
    DEFAULT_POLYLINE_INTERVAL_S,
    DriverSequence,
    HolidayCalendar,
    build_sequences,
    load_holiday_calendar,
    load_sequences,
    parse_pois,
    parse_trips,
    select_top_drivers,
)
from exports.build_report_excel import build_report_workbook
from models.baseline_engine import MmlpConfig, predict_mmlp, predict_nn_many, train_mmlp
from models.clustering_engine import ClusterModel, fit_destination_clusters, save_clusters
from models.destination_engine import CITY_PRESETS, PredictorConfig, predict_in_chunks, train
from models.errors import ConfigError, DestinationError, SchemaError, SplitError, TripFileError
from models.feature_engine import FeaturePipeline, fit_feature_pipeline
from models.geo import haversine_km_array

logger = logging.getLogger(__name__)


MODEL_NAMES = ("nn", "mmlp", "mmlp_seq", "lstm", "lstm_boc", "lstm_boc_w2v")
LSTM_TIERS = {
    # name: (use_boc, use_cbow)
    "lstm": (False, False),
    "lstm_boc": (True, False),
    "lstm_boc_w2v": (True, True),
}
DEFAULT_FRACTIONS = (0.65, 0.15, 0.20)

RESULT_COLUMNS = ["model", "city", "mean_eds_km", "median_eds_km", "n_test", "seed", "wall_s"]
DUMP_COLUMNS = ["sample_id", "pred_lat", "pred_lon", "true_lat", "true_lon", "eds_km"]
FAILURE_COLUMNS = ["model", "error", "message"]

HISTOGRAM_BIN_KM = 0.5


# ═══════════════════════════════════════════════════════════════════════
# EXPERIMENT SPEC
# ═══════════════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class ModelRun:
    name: str
    mode: str = "regression"

    @classmethod
    def parse(cls, text: str) -> "ModelRun":
        name, _, mode = text.strip().partition(":")
        name, mode = name.strip(), (mode.strip() or "regression")
        if name not in MODEL_NAMES:
            raise ConfigError(f"unknown model '{name}'; expected one of {MODEL_NAMES}")
        if mode not in ("regression", "classification"):
            raise ConfigError(f"unknown mode '{mode}' for model '{name}'")
        if mode == "classification" and name not in LSTM_TIERS:
            raise ConfigError(f"'{name}' has no classification variant")
        return cls(name, mode)

    @property
    def label(self) -> str:
        return self.name if self.mode == "regression" else f"{self.name}[classification]"


@dataclass
class ExperimentSpec:
    """One city, one split, a list of models."""
    # Inputs
    trips_path: Optional[str] = None
    trip_format: str = "polyline_csv"
    sequences_path: Optional[str] = None          # pre-built sequences instead of trips
    pois_path: Optional[str] = None
    holidays_path: Optional[str] = None
    city: str = "porto"
    timezone: Optional[str] = None                # None -> city preset
    top_drivers: Optional[int] = None
    polyline_interval_s: float = DEFAULT_POLYLINE_INTERVAL_S

    # Sequences & split
    k: int = 8
    max_gap_hours: float = 3.0
    fractions: Tuple[float, float, float] = DEFAULT_FRACTIONS
    seed: int = 0

    # Models
    models: Tuple[str, ...] = ("nn", "lstm_boc_w2v")
    k_clusters: Optional[int] = None              # None -> city preset
    kmeans_max_iters: int = 100
    kmeans_n_init: int = 1
    cbow_epochs: int = 5
    cbow_window: int = 5

    # LSTM (None -> city preset / PredictorConfig default)
    lstm_hidden: Optional[int] = None
    learning_rate: Optional[float] = None
    batch_size: Optional[int] = None
    dropout_p: float = 0.5
    max_epochs: int = 100
    patience: int = 10
    lstm_activation: str = "relu"

    # MMLP
    mmlp_hidden: int = 500
    mmlp_batch_size: int = 200
    mmlp_learning_rate: float = 1e-3
    mmlp_max_epochs: int = 100

    # Output
    output_dir: str = "results"
    record_wall_time: bool = True
    excel: bool = False

    def __post_init__(self):
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        if len(self.fractions) != 3 or any(f <= 0 for f in self.fractions):
            raise SplitError(f"split fractions must be three positive numbers, got {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise SplitError(f"split fractions must sum to 1, got {sum(self.fractions)}")
        object.__setattr__(self, "models", tuple(self.models))
        if not self.models:
            raise ConfigError("no models requested")
        for m in self.models:
            ModelRun.parse(m)
        if self.k < 2 or self.k % 2 != 0:
            raise ConfigError(f"k must be an even integer >= 2, got {self.k}")
        if self.city not in CITY_PRESETS and (self.k_clusters is None or self.timezone is None):
            raise ConfigError(f"city '{self.city}' has no preset; set k_clusters and timezone explicitly")
        if self.trips_path is None and self.sequences_path is None:
            raise ConfigError("either trips_path or sequences_path is required")

    @property
    def preset(self) -> Dict:
        return CITY_PRESETS.get(self.city, {})

    def resolved_timezone(self) -> str:
        return self.timezone or self.preset["timezone"]

    def resolved_k_clusters(self) -> int:
        return int(self.k_clusters or self.preset["k_clusters"])

    def predictor_config(self, mode: str = "regression") -> PredictorConfig:
        return PredictorConfig(
            lstm_hidden=self.lstm_hidden or self.preset.get("lstm_hidden", 128),
            learning_rate=self.learning_rate or self.preset.get("learning_rate", 1e-3),
            batch_size=self.batch_size or self.preset.get("batch_size", 64),
            dropout_p=self.dropout_p,
            k_clusters=self.resolved_k_clusters(),
            max_epochs=self.max_epochs,
            patience=self.patience,
            seed=self.seed,
            mode=mode,
            lstm_activation=self.lstm_activation,
        )

    def mmlp_config(self) -> MmlpConfig:
        return MmlpConfig(
            hidden=self.mmlp_hidden,
            learning_rate=self.mmlp_learning_rate,
            batch_size=self.mmlp_batch_size,
            max_epochs=self.mmlp_max_epochs,
            patience=self.patience,
            seed=self.seed,
        )


# ─── config files ───────────────────────────────────────────────────

def _to_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _to_list(text: str) -> Tuple[str, ...]:
    return tuple(p.strip() for p in text.replace(";", ",").split(",") if p.strip())


def _optional(conv):
    def parse(text: str):
        return None if text.strip().lower() in ("", "none") else conv(text)
    return parse


_CONVERTERS = {
    "trips_path": _optional(str), "sequences_path": _optional(str), "pois_path": _optional(str),
    "holidays_path": _optional(str), "timezone": _optional(str), "top_drivers": _optional(int),
    "k_clusters": _optional(int), "lstm_hidden": _optional(int), "learning_rate": _optional(float),
    "batch_size": _optional(int),
    "trip_format": str, "city": str, "output_dir": str, "lstm_activation": str,
    "k": int, "seed": int, "kmeans_max_iters": int, "kmeans_n_init": int, "cbow_epochs": int,
    "cbow_window": int, "max_epochs": int, "patience": int, "mmlp_hidden": int,
    "mmlp_batch_size": int, "mmlp_max_epochs": int,
    "max_gap_hours": float, "dropout_p": float, "mmlp_learning_rate": float, "polyline_interval_s": float,
    "record_wall_time": _to_bool, "excel": _to_bool,
    "models": _to_list,
    "fractions": lambda text: tuple(float(x) for x in _to_list(text)),
}


def load_config(path) -> Dict[str, str]:
    """`key = value` lines with `#` comments; returns raw strings."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(comment_prefixes=("#",), inline_comment_prefixes=("#",),
                                       interpolation=None)
    try:
        parser.read_string("[experiment]\n" + path.read_text(encoding="utf-8"), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return dict(parser["experiment"])


def spec_from_config(values: Dict[str, str], **overrides) -> ExperimentSpec:
    """Build an ExperimentSpec from config strings; overrides (already typed) win."""
    known = {f.name for f in fields(ExperimentSpec)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    kwargs = {}
    for key, text in values.items():
        try:
            kwargs[key] = _CONVERTERS[key](text)
        except ValueError as exc:
            raise ConfigError(f"bad value for '{key}': {exc}") from exc
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    bad = sorted(set(kwargs) - known)
    if bad:
        raise ConfigError(f"unknown spec fields: {bad}")
    return ExperimentSpec(**kwargs)


# ═══════════════════════════════════════════════════════════════════════
# DATA & SPLIT
# ═══════════════════════════════════════════════════════════════════════

def split_sizes(n: int, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> Tuple[int, int, int]:
    """Validation and test sizes are n·fraction rounded; training takes the remainder."""
    n_val = int(round(n * fractions[1]))
    n_test = int(round(n * fractions[2]))
    return n - n_val - n_test, n_val, n_test


def split(
    sequences: Sequence[DriverSequence],
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    seed: int = 0,
) -> Tuple[List[DriverSequence], List[DriverSequence], List[DriverSequence]]:
    """Seeded uniform permutation, then contiguous train / val / test slices."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"invalid split fractions {fractions}")
    sequences = list(sequences)
    n_train, n_val, n_test = split_sizes(len(sequences), fractions)
    if min(n_train, n_val, n_test) <= 0:
        raise SplitError(f"{len(sequences)} samples give an empty split ({n_train}/{n_val}/{n_test})")
    order = np.random.default_rng(seed).permutation(len(sequences))
    train_idx = order[:n_train]
    val_idx = order[n_train:n_train + n_val]
    test_idx = order[n_train + n_val:]
    return ([sequences[i] for i in train_idx],
            [sequences[i] for i in val_idx],
            [sequences[i] for i in test_idx])


def prepare_sequences(spec: ExperimentSpec) -> List[DriverSequence]:
    if spec.sequences_path is not None:
        return load_sequences(spec.sequences_path)
    parsed = parse_trips(spec.trips_path, spec.trip_format, spec.polyline_interval_s)
    trips = parsed.records
    if spec.top_drivers is not None:
        trips = select_top_drivers(trips, spec.top_drivers)
    calendar = load_holiday_calendar(spec.holidays_path) if spec.holidays_path else HolidayCalendar()
    return build_sequences(trips, k=spec.k, max_gap_hours=spec.max_gap_hours,
                           calendar=calendar, timezone=spec.resolved_timezone())


# ═══════════════════════════════════════════════════════════════════════
# RESULTS
# ═══════════════════════════════════════════════════════════════════════

@dataclass
class ResultRow:
    model: str
    city: str
    mean_eds_km: float
    median_eds_km: float
    n_test: int
    seed: int
    wall_s: float

    def __post_init__(self):
        if self.mean_eds_km < 0 or self.median_eds_km < 0:
            raise ValueError("EDS cannot be negative")


@dataclass
class ExperimentResult:
    rows: List[ResultRow]
    failures: List[Tuple[str, str, str]] = field(default_factory=list)
    output_dir: Optional[Path] = None
    digests: Dict[str, str] = field(default_factory=dict)

    def row(self, model: str) -> ResultRow:
        for r in self.rows:
            if r.model == model:
                return r
        raise KeyError(model)


def results_frame(rows: Sequence[ResultRow]) -> pd.DataFrame:
    return pd.DataFrame([[getattr(r, c) for c in RESULT_COLUMNS] for r in rows], columns=RESULT_COLUMNS)


def write_results(path, rows: Sequence[ResultRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    results_frame(rows).to_csv(path, index=False, float_format="%.6f", lineterminator="\n")


def read_results(path) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise TripFileError(f"results file not found: {path}")
    frame = pd.read_csv(path)
    if list(frame.columns) != RESULT_COLUMNS:
        raise SchemaError(f"{path}: header {list(frame.columns)} != {RESULT_COLUMNS}")
    return frame


def per_sample_frame(sequences: Sequence[DriverSequence], preds: np.ndarray) -> pd.DataFrame:
    truth = np.array([[s.target.lat, s.target.lon] for s in sequences])
    eds = haversine_km_array(preds[:, 0], preds[:, 1], truth[:, 0], truth[:, 1])
    return pd.DataFrame({
        "sample_id": [s.sample_id for s in sequences],
        "pred_lat": preds[:, 0],
        "pred_lon": preds[:, 1],
        "true_lat": truth[:, 0],
        "true_lon": truth[:, 1],
        "eds_km": eds,
    }, columns=DUMP_COLUMNS)


# ═══════════════════════════════════════════════════════════════════════
# RUN
# ═══════════════════════════════════════════════════════════════════════

class _Workbench:
    """Split-level artifacts shared by every model of a run, fitted lazily."""

    def __init__(self, spec: ExperimentSpec, train_seqs, val_seqs, test_seqs, clusters: ClusterModel, pois):
        self.spec = spec
        self.train_seqs, self.val_seqs, self.test_seqs = train_seqs, val_seqs, test_seqs
        self.clusters = clusters
        self.pois = pois
        self._pipelines: Dict[Tuple[bool, bool], FeaturePipeline] = {}
        self._batches: Dict[Tuple[bool, bool], Tuple] = {}

    def pipeline(self, use_boc: bool, use_cbow: bool) -> FeaturePipeline:
        key = (use_boc, use_cbow)
        if key not in self._pipelines:
            if use_boc and self.pois is None:
                raise ConfigError("BOC features need a POI file (pois_path)")
            zone = None
            cbow_key = next((k for k in self._pipelines if k[1] and use_cbow), None)
            if cbow_key is not None:
                zone = self._pipelines[cbow_key].zone
            self._pipelines[key] = fit_feature_pipeline(
                self.train_seqs, self.clusters, self.pois or (), use_boc=use_boc, use_cbow=use_cbow,
                cbow_window=self.spec.cbow_window, cbow_epochs=self.spec.cbow_epochs,
                seed=self.spec.seed, zone=zone,
            )
        return self._pipelines[key]

    def batches(self, use_boc: bool, use_cbow: bool):
        key = (use_boc, use_cbow)
        if key not in self._batches:
            p = self.pipeline(use_boc, use_cbow)
            self._batches[key] = (p.transform(self.train_seqs), p.transform(self.val_seqs),
                                  p.transform(self.test_seqs))
        return self._batches[key]


def _run_model(run: ModelRun, bench: _Workbench, model_dir: Path) -> Tuple[np.ndarray, Optional[str]]:
    spec = bench.spec
    if run.name == "nn":
        pickups = np.array([[s.current_pickup.loc.lat, s.current_pickup.loc.lon] for s in bench.test_seqs])
        return predict_nn_many(bench.clusters, pickups), None

    if run.name in ("mmlp", "mmlp_seq"):
        pipeline = bench.pipeline(False, False)
        train_b, val_b, test_b = bench.batches(False, False)
        ckpt = train_mmlp(spec.mmlp_config(), train_b, val_b, pipeline, variant=run.name)
        ckpt.save(model_dir / "checkpoint.npz")
        return predict_mmlp(ckpt, test_b), ckpt.digest()

    use_boc, use_cbow = LSTM_TIERS[run.name]
    pipeline = bench.pipeline(use_boc, use_cbow)
    train_b, val_b, test_b = bench.batches(use_boc, use_cbow)
    ckpt = train(spec.predictor_config(run.mode), train_b, val_b, pipeline)
    ckpt.save(model_dir / "checkpoint.npz")
    return predict_in_chunks(ckpt.to_model(), test_b), ckpt.digest()


def run(spec: ExperimentSpec) -> ExperimentResult:
    """Train and evaluate every requested model on one shared split."""
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    sequences = prepare_sequences(spec)
    train_seqs, val_seqs, test_seqs = split(sequences, spec.fractions, spec.seed)
    logger.info("Split %d samples: %d train / %d val / %d test",
                len(sequences), len(train_seqs), len(val_seqs), len(test_seqs))
    pd.DataFrame({
        "sample_id": [s.sample_id for s in train_seqs + val_seqs + test_seqs],
        "split": ["train"] * len(train_seqs) + ["val"] * len(val_seqs) + ["test"] * len(test_seqs),
    }).to_csv(out / "split.csv", index=False, lineterminator="\n")

    clusters = fit_destination_clusters(train_seqs, spec.resolved_k_clusters(), seed=spec.seed,
                                        max_iters=spec.kmeans_max_iters, n_init=spec.kmeans_n_init)
    save_clusters(out / "clusters.txt", clusters)
    pois = parse_pois(spec.pois_path).pois if spec.pois_path else None
    bench = _Workbench(spec, train_seqs, val_seqs, test_seqs, clusters, pois)

    result = ExperimentResult(rows=[], output_dir=out)
    for name in spec.models:
        model_run = ModelRun.parse(name)
        label = model_run.label
        model_dir = out / label
        model_dir.mkdir(parents=True, exist_ok=True)
        started = time.perf_counter()
        try:
            preds, digest = _run_model(model_run, bench, model_dir)
        except DestinationError as exc:
            logger.warning("Model %s failed: %s: %s", label, type(exc).__name__, exc)
            result.failures.append((label, type(exc).__name__, str(exc)))
            continue
        wall = time.perf_counter() - started if spec.record_wall_time else 0.0

        dump = per_sample_frame(test_seqs, preds)
        dump.to_csv(model_dir / "predictions.csv", index=False, float_format="%.9f", lineterminator="\n")
        row = ResultRow(
            model=label,
            city=spec.city,
            mean_eds_km=float(dump["eds_km"].mean()),
            median_eds_km=float(dump["eds_km"].median()),
            n_test=len(test_seqs),
            seed=spec.seed,
            wall_s=wall,
        )
        result.rows.append(row)
        if digest is not None:
            result.digests[label] = digest
        logger.info("%s on %s: mean EDS %.4f km, median %.4f km (%d test samples)",
                    label, spec.city, row.mean_eds_km, row.median_eds_km, row.n_test)

    write_results(out / "results.csv", result.rows)
    pd.DataFrame(result.failures, columns=FAILURE_COLUMNS).to_csv(out / "failures.csv", index=False,
                                                                  lineterminator="\n")
    pd.DataFrame(sorted(result.digests.items()), columns=["model", "digest"]).to_csv(
        out / "checkpoints.csv", index=False, lineterminator="\n")
    if spec.excel:
        report([out / "results.csv"], out / "report", excel=True)
    return result


# ═══════════════════════════════════════════════════════════════════════
# REPORT
# ═══════════════════════════════════════════════════════════════════════

def eds_histogram(eds: np.ndarray, bin_km: float = HISTOGRAM_BIN_KM) -> pd.DataFrame:
    eds = np.asarray(eds, dtype=np.float64)
    top = max(bin_km, float(np.ceil(eds.max() / bin_km) * bin_km)) if eds.size else bin_km
    edges = np.arange(0.0, top + bin_km / 2, bin_km)
    if edges.size < 2:
        edges = np.array([0.0, bin_km])
    counts, edges = np.histogram(eds, bins=edges)
    return pd.DataFrame({"bin_start_km": edges[:-1], "bin_end_km": edges[1:], "count": counts})


def regression_vs_classification(merged: pd.DataFrame) -> pd.DataFrame:
    rows = []
    by_key = merged.drop_duplicates(["city", "model"]).set_index(["city", "model"])["mean_eds_km"]
    for (city, model), reg_eds in by_key.items():
        cls_key = (city, f"{model}[classification]")
        if cls_key in by_key.index:
            rows.append({
                "city": city,
                "model": model,
                "regression_mean_eds_km": reg_eds,
                "classification_mean_eds_km": by_key[cls_key],
                "delta_km": by_key[cls_key] - reg_eds,
            })
    return pd.DataFrame(rows, columns=["city", "model", "regression_mean_eds_km",
                                       "classification_mean_eds_km", "delta_km"])


def report(result_paths: Sequence, output_dir, excel: bool = False) -> pd.DataFrame:
    """
    Merge ResultRow files into one table sorted by city then model, and
    write plot-ready CSVs: per-model EDS histograms (from the per-sample
    dumps next to each results file) and the regression-vs-classification
    comparison.
    """
    if not result_paths:
        raise ConfigError("report needs at least one results file")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)

    frames, histograms = [], []
    for path in result_paths:
        frame = read_results(path)
        frames.append(frame)
        for _, row in frame.iterrows():
            dump = Path(path).parent / row["model"] / "predictions.csv"
            if not dump.is_file():
                logger.warning("No per-sample dump for %s at %s", row["model"], dump)
                continue
            hist = eds_histogram(pd.read_csv(dump)["eds_km"].to_numpy())
            hist.insert(0, "model", row["model"])
            hist.insert(0, "city", row["city"])
            histograms.append(hist)

    merged = pd.concat(frames, ignore_index=True)
    merged = merged.sort_values(["city", "model"], kind="mergesort").reset_index(drop=True)
    merged.to_csv(out / "summary.csv", index=False, float_format="%.6f", lineterminator="\n")

    hist_frame = (pd.concat(histograms, ignore_index=True) if histograms
                  else pd.DataFrame(columns=["city", "model", "bin_start_km", "bin_end_km", "count"]))
    hist_frame.to_csv(out / "eds_histograms.csv", index=False, lineterminator="\n")

    comparison = regression_vs_classification(merged)
    comparison.to_csv(out / "regression_vs_classification.csv", index=False, float_format="%.6f",
                      lineterminator="\n")

    if excel:
        build_report_workbook(out / "report.xlsx", merged, comparison, hist_frame)

    logger.info("Report: %d rows from %d files -> %s", len(merged), len(result_paths), out)
    return merged
