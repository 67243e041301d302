"""
Destination Pipeline CLI
========================
Stage-by-stage command line over one working directory:

  prepare   trips (+ holidays)        -> sequences.jsonl
  cluster   sequences                 -> clusters.txt         (train split only)
  embed     sequences + clusters      -> zone_embedding.npz (+ boc.csv with POIs)
  train     sequences + clusters (+ zone embedding for *_w2v) -> <model>/checkpoint.npz
  evaluate  checkpoint + sequences    -> <model>/predictions.csv, results_<model>.csv
  report    results files             -> summary.csv, eds_histograms.csv, ...
  synth     -                         -> synthetic trips.csv, pois.csv, holidays.txt
  run       config                    -> the whole experiment in one go

Every stage recomputes the split from (sequences, fractions, seed), so the
train / val / test partition is the same wherever it is needed.

Exit codes: 0 ok, 1 pipeline error, 2 usage error or missing input stage.
"""

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Dict, Optional, Sequence

# Engines are imported as top-level packages from the repository root.
sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

import numpy as np

from data.ingest import parse_pois, save_sequences
from data.synthetic_city import SyntheticCityParams, generate_city, write_city
from models.baseline_engine import MmlpCheckpoint, predict_mmlp, predict_nn_many, train_mmlp
from models.clustering_engine import ClusterModel, fit_destination_clusters, load_clusters, save_clusters
from models.destination_engine import PredictorCheckpoint, predict_in_chunks, train
from models.errors import ConfigError, DestinationError, StageMissingError
from models.experiment_engine import (
    LSTM_TIERS,
    ExperimentSpec,
    ModelRun,
    ResultRow,
    load_config,
    per_sample_frame,
    prepare_sequences,
    report,
    run,
    spec_from_config,
    split,
    write_results,
)
from models.feature_engine import (
    build_boc,
    fit_feature_pipeline,
    load_zone_embedding,
    save_zone_embedding,
    shift_sentences,
    train_cbow,
)

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"

SEQUENCES_FILE = "sequences.jsonl"
CLUSTERS_FILE = "clusters.txt"
ZONE_FILE = "zone_embedding.npz"
BOC_FILE = "boc.csv"
CHECKPOINT_FILE = "checkpoint.npz"


# ═══════════════════════════════════════════════════════════════════════
# SPEC RESOLUTION
# ═══════════════════════════════════════════════════════════════════════

# argparse dest -> ExperimentSpec field
_FLAG_FIELDS = {
    "trips": "trips_path",
    "trip_format": "trip_format",
    "sequences": "sequences_path",
    "pois": "pois_path",
    "holidays": "holidays_path",
    "city": "city",
    "timezone": "timezone",
    "top_drivers": "top_drivers",
    "k_clusters": "k_clusters",
    "seed": "seed",
    "max_epochs": "max_epochs",
    "patience": "patience",
    "lstm_hidden": "lstm_hidden",
    "models": "models",
}


def _output_dir(args, values: Dict[str, str]) -> Path:
    return Path(args.output_dir or values.get("output_dir") or "results")


def _resolve_spec(args, after_prepare: bool) -> ExperimentSpec:
    """Config file keys, overridden by CLI flags. Later stages read the prepared sequences."""
    values = load_config(args.config) if args.config else {}
    out = _output_dir(args, values)
    overrides = {field: getattr(args, dest, None) for dest, field in _FLAG_FIELDS.items()}
    if overrides["models"] is not None:
        overrides["models"] = tuple(overrides["models"])
    overrides["output_dir"] = str(out)
    if after_prepare and overrides["sequences_path"] is None and "sequences_path" not in values:
        prepared = out / SEQUENCES_FILE
        if not prepared.is_file():
            raise StageMissingError("prepare", f"{prepared} does not exist; run `prepare` first")
        overrides["sequences_path"] = str(prepared)
    return spec_from_config(values, **overrides)


def _require(path: Path, stage: str) -> Path:
    if not path.is_file():
        raise StageMissingError(stage, f"{path} does not exist; run `{stage}` first")
    return path


def _splits(spec: ExperimentSpec):
    return split(prepare_sequences(spec), spec.fractions, spec.seed)


def _clusters(out: Path) -> ClusterModel:
    return load_clusters(_require(out / CLUSTERS_FILE, "cluster"))


def _lstm_pipeline(spec: ExperimentSpec, run_: ModelRun, train_seqs, out: Path):
    use_boc, use_cbow = LSTM_TIERS[run_.name]
    clusters = _clusters(out)
    zone = load_zone_embedding(_require(out / ZONE_FILE, "embed")) if use_cbow else None
    if use_boc and spec.pois_path is None:
        raise ConfigError(f"{run_.name} needs a POI file (--pois)")
    pois = parse_pois(spec.pois_path).pois if use_boc else ()
    return fit_feature_pipeline(train_seqs, clusters, pois, use_boc=use_boc, use_cbow=use_cbow,
                                cbow_window=spec.cbow_window, cbow_epochs=spec.cbow_epochs,
                                seed=spec.seed, zone=zone)


def _single_model(spec: ExperimentSpec) -> ModelRun:
    if len(spec.models) != 1:
        raise ConfigError(f"this stage takes exactly one --model, got {list(spec.models)}")
    return ModelRun.parse(spec.models[0])


# ═══════════════════════════════════════════════════════════════════════
# STAGES
# ═══════════════════════════════════════════════════════════════════════

def cmd_prepare(args) -> int:
    spec = _resolve_spec(args, after_prepare=False)
    if spec.trips_path is None:
        raise ConfigError("prepare needs a trip file (--trips or trips_path)")
    sequences = prepare_sequences(spec)
    path = Path(spec.output_dir) / SEQUENCES_FILE
    n = save_sequences(path, sequences)
    print(f"{n} sequences -> {path}")
    return 0


def cmd_cluster(args) -> int:
    spec = _resolve_spec(args, after_prepare=True)
    train_seqs, _, _ = _splits(spec)
    model = fit_destination_clusters(train_seqs, spec.resolved_k_clusters(), seed=spec.seed,
                                     max_iters=spec.kmeans_max_iters, n_init=spec.kmeans_n_init)
    path = Path(spec.output_dir) / CLUSTERS_FILE
    save_clusters(path, model)
    print(f"{model.m} clusters (inertia {model.inertia:.3f} km²) -> {path}")
    return 0


def cmd_embed(args) -> int:
    spec = _resolve_spec(args, after_prepare=True)
    out = Path(spec.output_dir)
    clusters = _clusters(out)
    train_seqs, _, _ = _splits(spec)
    zone = train_cbow(shift_sentences(train_seqs, clusters), vocab_size=clusters.m,
                      window=spec.cbow_window, epochs=spec.cbow_epochs, seed=spec.seed)
    save_zone_embedding(out / ZONE_FILE, zone)
    print(f"zone embedding {zone.weights.shape} -> {out / ZONE_FILE}")
    if spec.pois_path is not None:
        build_boc(clusters, parse_pois(spec.pois_path).pois).to_csv(out / BOC_FILE)
        print(f"bag of concepts -> {out / BOC_FILE}")
    return 0


def cmd_train(args) -> int:
    spec = _resolve_spec(args, after_prepare=True)
    out = Path(spec.output_dir)
    model_run = _single_model(spec)
    if model_run.name == "nn":
        raise ConfigError("nn has nothing to train; run `evaluate --model nn` directly")
    train_seqs, val_seqs, _ = _splits(spec)
    model_dir = out / model_run.label
    model_dir.mkdir(parents=True, exist_ok=True)

    if model_run.name in LSTM_TIERS:
        pipeline = _lstm_pipeline(spec, model_run, train_seqs, out)
        ckpt = train(spec.predictor_config(model_run.mode), pipeline.transform(train_seqs),
                     pipeline.transform(val_seqs), pipeline)
    else:
        pipeline = fit_feature_pipeline(train_seqs, _clusters(out), use_boc=False, use_cbow=False,
                                        seed=spec.seed)
        ckpt = train_mmlp(spec.mmlp_config(), pipeline.transform(train_seqs), pipeline.transform(val_seqs),
                          pipeline, variant=model_run.name)
    ckpt.save(model_dir / CHECKPOINT_FILE)
    print(f"{model_run.label}: best epoch {ckpt.best_epoch}, digest {ckpt.digest()[:12]} "
          f"-> {model_dir / CHECKPOINT_FILE}")
    return 0


def cmd_evaluate(args) -> int:
    spec = _resolve_spec(args, after_prepare=True)
    out = Path(spec.output_dir)
    model_run = _single_model(spec)
    model_dir = out / model_run.label
    train_seqs, _, test_seqs = _splits(spec)

    if model_run.name == "nn":
        pickups = [[s.current_pickup.loc.lat, s.current_pickup.loc.lon] for s in test_seqs]
        preds = predict_nn_many(_clusters(out), np.array(pickups))
    elif model_run.name in LSTM_TIERS:
        ckpt = PredictorCheckpoint.load(_require(model_dir / CHECKPOINT_FILE, "train"))
        preds = predict_in_chunks(ckpt.to_model(), ckpt.pipeline().transform(test_seqs))
    else:
        ckpt = MmlpCheckpoint.load(_require(model_dir / CHECKPOINT_FILE, "train"))
        pipeline = fit_feature_pipeline(train_seqs, _clusters(out), use_boc=False, use_cbow=False,
                                        seed=spec.seed)
        preds = predict_mmlp(ckpt, pipeline.transform(test_seqs))

    model_dir.mkdir(parents=True, exist_ok=True)
    dump = per_sample_frame(test_seqs, preds)
    dump.to_csv(model_dir / "predictions.csv", index=False, float_format="%.9f", lineterminator="\n")
    row = ResultRow(model_run.label, spec.city, float(dump["eds_km"].mean()),
                    float(dump["eds_km"].median()), len(test_seqs), spec.seed, 0.0)
    path = out / f"results_{model_run.label}.csv"
    write_results(path, [row])
    print(f"{row.model} on {row.city}: mean EDS {row.mean_eds_km:.4f} km, "
          f"median {row.median_eds_km:.4f} km ({row.n_test} samples) -> {path}")
    return 0


def cmd_report(args) -> int:
    merged = report(args.results, args.output_dir or "report", excel=args.excel)
    print(merged.to_string(index=False))
    return 0


def cmd_synth(args) -> int:
    params = SyntheticCityParams(n_clusters=args.clusters, n_drivers=args.drivers,
                                 trips_per_driver=args.trips_per_driver, seed=args.seed)
    paths = write_city(generate_city(params), args.output_dir or "synthetic_city")
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def cmd_run(args) -> int:
    spec = _resolve_spec(args, after_prepare=False)
    if args.excel:
        spec = dataclasses.replace(spec, excel=True)
    result = run(spec)
    for r in result.rows:
        print(f"{r.model:<30} mean {r.mean_eds_km:8.4f} km   median {r.median_eds_km:8.4f} km")
    for label, error, message in result.failures:
        print(f"{label:<30} FAILED {error}: {message}", file=sys.stderr)
    return 1 if result.failures and not result.rows else 0


# ═══════════════════════════════════════════════════════════════════════
# PARSER
# ═══════════════════════════════════════════════════════════════════════

def _add_spec_flags(p: argparse.ArgumentParser, model_flag: str = None) -> None:
    p.add_argument("--config", help="key = value experiment config file")
    p.add_argument("--output-dir", dest="output_dir", help="working directory (default: results)")
    p.add_argument("--trips", help="raw trip file")
    p.add_argument("--format", dest="trip_format", choices=("polyline_csv", "od_csv"), help="trip file format")
    p.add_argument("--sequences", help="prepared sequence file (default: <output-dir>/sequences.jsonl)")
    p.add_argument("--pois", help="POI file (lat, lon, name, category_path)")
    p.add_argument("--holidays", help="one ISO date per line")
    p.add_argument("--city", help="porto, san_francisco or manhattan")
    p.add_argument("--timezone", help="IANA timezone for temporal features")
    p.add_argument("--top-drivers", dest="top_drivers", type=int, help="keep the N drivers with most trips")
    p.add_argument("--k-clusters", dest="k_clusters", type=int, help="number of destination clusters")
    p.add_argument("--seed", type=int, help="split / initialisation seed")
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--lstm-hidden", dest="lstm_hidden", type=int)
    if model_flag == "one":
        p.add_argument("--model", dest="models", action="append",
                       help="model[:classification], e.g. lstm_boc_w2v or lstm:classification")
    elif model_flag == "many":
        p.add_argument("--models", nargs="+", help="models to run (default from config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="destination", description="Next taxi destination prediction pipeline")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build driver sequences from a trip file")
    _add_spec_flags(p)
    p.set_defaults(handler=cmd_prepare)

    p = sub.add_parser("cluster", help="K-means over training drop-offs")
    _add_spec_flags(p)
    p.set_defaults(handler=cmd_cluster)

    p = sub.add_parser("embed", help="CBOW zone embedding (and BOC table) on the training split")
    _add_spec_flags(p)
    p.set_defaults(handler=cmd_embed)

    p = sub.add_parser("train", help="train one model and write its checkpoint")
    _add_spec_flags(p, model_flag="one")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("evaluate", help="score one model on the test split")
    _add_spec_flags(p, model_flag="one")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("report", help="merge results files into summary CSVs")
    p.add_argument("results", nargs="+", help="results CSV files")
    p.add_argument("--output-dir", dest="output_dir", help="report directory (default: report)")
    p.add_argument("--excel", action="store_true", help="also write report.xlsx")
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("synth", help="write a synthetic city dataset")
    p.add_argument("--output-dir", dest="output_dir", help="target directory (default: synthetic_city)")
    p.add_argument("--clusters", type=int, default=SyntheticCityParams.n_clusters)
    p.add_argument("--drivers", type=int, default=SyntheticCityParams.n_drivers)
    p.add_argument("--trips-per-driver", dest="trips_per_driver", type=int,
                   default=SyntheticCityParams.trips_per_driver)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("run", help="split, train, evaluate and report every configured model")
    _add_spec_flags(p, model_flag="many")
    p.add_argument("--excel", action="store_true", help="also write report.xlsx")
    p.set_defaults(handler=cmd_run)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    logging.basicConfig(level=logging.INFO, format=LOG_FORMAT, datefmt="%Y-%m-%d %H:%M:%S")
    logging.getLogger().setLevel(logging.DEBUG if args.verbose else logging.INFO)

    try:
        return args.handler(args)
    except StageMissingError as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DestinationError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
