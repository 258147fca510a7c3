"""
Command-line pipeline for DEFE models.

    python cli.py train --data training.csv --out model/
    python cli.py evaluate --model model/ --data test.csv --out report.txt
    python cli.py extract --model model/ --data test.csv --out features.tsv
    python cli.py histograms --model model/ --data test.csv --out hist/ --sample-fraction 0.2
    python cli.py compare --data training.csv --out compare.tsv --seeds 0,1,2,3,4

Every command accepts `--config` and `--seed`. Exit codes: 0 ok, 2 config
error, 3 data error, 4 numeric failure.
"""
import argparse
import io
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import pandas as pd
from dotenv import load_dotenv

import nn_core
from config import load_config, validate_config
from data_model import (
    Dataset,
    apply_normalization,
    fit_normalization,
    normalize_weights,
    parse_events,
    split,
)
from efe_ensemble import diversity_report, predict, train_baseline, train_defe
from errors import DataError, DefeError, SchemaError
from histograms import feature_histograms, write_histograms
from metrics import evaluate_scores, write_report, write_roc_tsv
from model_store import LOG_NAME, load_model, save_model
from partition import derive_seed

logger = logging.getLogger(__name__)

TRAINING_LOGGER = "defe.training"
DEFAULT_SEEDS = "0,1,2,3,4"


# --- Helpers ---

@contextmanager
def capture_training_log(echo: bool = False):
    """Collects the `defe.training` stream in memory, one message per line and no timestamps."""
    buffer = io.StringIO()
    handler = logging.StreamHandler(buffer)
    handler.setFormatter(logging.Formatter("%(message)s"))
    training_log = logging.getLogger(TRAINING_LOGGER)
    previous_level, previous_propagate = training_log.level, training_log.propagate
    training_log.addHandler(handler)
    training_log.setLevel(logging.INFO)
    training_log.propagate = echo
    try:
        yield buffer
    finally:
        training_log.removeHandler(handler)
        training_log.setLevel(previous_level)
        training_log.propagate = previous_propagate


def _read_events(path: str, require_labels: bool = True) -> Dataset:
    if not os.path.exists(path):
        raise DataError(f"Data file '{path}' was not found.", source="cli")
    print(f"Loading events from '{path}'...")
    dataset = parse_events(path, require_labels=require_labels)
    print(f"Loaded {len(dataset)} events.")
    return dataset


def _weighted(dataset: Dataset, config) -> Dataset:
    if dataset.is_labeled and config.normalize_weights:
        return normalize_weights(dataset, config.n_s_expected, config.n_b_expected)
    return dataset


def _check_schema(dataset: Dataset, model):
    if tuple(dataset.schema.names) != tuple(model.stats.names):
        raise SchemaError("The data file's features do not match the model bundle.", source="cli")


def _sibling(path: str, suffix: str) -> str:
    root, _ = os.path.splitext(path)
    return f"{root}{suffix}.tsv"


def _prepare_output(path: str):
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    except OSError as e:
        raise DataError(f"Cannot create the output directory for '{path}': {e}", source="cli") from e


def _write_tsv(frame: pd.DataFrame, path: str):
    try:
        frame.to_csv(path, sep="\t", index=False, lineterminator="\n")
    except OSError as e:
        raise DataError(f"Cannot write '{path}': {e}", source="cli") from e


def _feature_table(ids, matrix, prefix: str) -> pd.DataFrame:
    frame = pd.DataFrame(matrix, columns=[f"{prefix}{j:03d}" for j in range(matrix.shape[1])])
    frame.insert(0, "EventId", ids)
    return frame


# --- Commands ---

def cmd_train(args) -> int:
    print("--- Training DEFE model ---")
    config = load_config(args.config, args.seed)
    dataset = _weighted(_read_events(args.data), config)
    train, validation = split(dataset, 1.0 - config.validation_fraction, config.seed)
    print(f"Training on {len(train)} events, validating on {len(validation)}.")

    with capture_training_log(echo=args.verbose) as log:
        model = train_defe(train, validation, config)
    save_model(model, args.out, extra_files={LOG_NAME: log.getvalue()})
    pca = f"PCA {model.pca.mean.shape[0]}->{model.pca.k}" if model.pca is not None else "PCA off"
    print(f"\n✅ Training complete: {len(model.learners)} feature learners, {pca}. Bundle written to '{args.out}'.")
    return 0


def cmd_evaluate(args) -> int:
    print("--- Evaluating DEFE model ---")
    model = load_model(args.model)
    dataset = _read_events(args.data)
    _check_schema(dataset, model)
    dataset = _weighted(dataset, model.config)

    scores = predict(model, dataset.features)
    report, curve = evaluate_scores(scores, dataset.labels, dataset.weights, model.config.b_regular)
    diversity = diversity_report(model.learners, apply_normalization(dataset, model.stats).features)
    extra = {
        "diversity_between_learners": diversity.between_learners,
        "diversity_within_learner": diversity.within_learner,
        "events": len(dataset),
    }
    _prepare_output(args.out)
    json_path = write_report(report, args.out, extra)
    roc_path = _sibling(args.out, "_roc")
    write_roc_tsv(curve, roc_path)
    for line in report.to_lines():
        print(f"  {line}")
    print(f"\n✅ Evaluation complete. Report: '{args.out}', '{json_path}'; ROC: '{roc_path}'.")
    return 0


def cmd_extract(args) -> int:
    print("--- Extracting extreme features ---")
    model = load_model(args.model)
    dataset = _read_events(args.data, require_labels=False)
    _check_schema(dataset, model)

    normalized = apply_normalization(dataset, model.stats).features
    extreme = model.extreme_features(normalized)
    _prepare_output(args.out)
    _write_tsv(_feature_table(dataset.ids, extreme, "f"), args.out)
    print(f"Wrote {extreme.shape[1]} extreme features per event to '{args.out}'.")
    if model.pca is not None:
        reduced = model.classifier_inputs(normalized)
        pca_path = _sibling(args.out, "_pca")
        _write_tsv(_feature_table(dataset.ids, reduced, "pc"), pca_path)
        print(f"Wrote {reduced.shape[1]} PCA features per event to '{pca_path}'.")
    print("\n✅ Extraction complete.")
    return 0


def cmd_histograms(args) -> int:
    print("--- Exporting feature histograms ---")
    model = load_model(args.model)
    config = model.config if args.seed is None else replace(model.config, seed=args.seed)
    dataset = _read_events(args.data)
    _check_schema(dataset, model)
    dataset = _weighted(dataset, config)

    extreme = model.extreme_features(apply_normalization(dataset, model.stats).features)
    exports = feature_histograms(
        extreme, dataset.labels, dataset.weights,
        bins=config.histogram_bins, fraction=args.sample_fraction, seed=config.seed,
    )
    paths = write_histograms(exports, args.out)
    print(f"\n✅ Wrote {len(paths)} histogram files to '{args.out}'.")
    return 0


def _holdout_metrics(scores, dataset: Dataset, config) -> tuple:
    report, _ = evaluate_scores(scores, dataset.labels, dataset.weights, config.b_regular)
    return report.auc, report.discovery_significance_z


def compare_models(dataset: Dataset, config, seeds, train_size: int, test_size: int) -> pd.DataFrame:
    """Holdout AUC and Z of DEFE, the plain DNN and primitive-only DEFE on seeded draws."""
    if train_size + test_size > len(dataset):
        raise DataError(
            f"Need {train_size + test_size} events for the comparison, the file has {len(dataset)}.", source="cli"
        )
    primitive_columns = dataset.schema.indices("momentum")
    rows = []
    for seed in seeds:
        run = validate_config(replace(config, seed=seed))
        order = np.random.default_rng(derive_seed(seed, 0)).permutation(len(dataset))
        pool = dataset.subset(np.sort(order[:train_size]))
        test = _weighted(dataset.subset(np.sort(order[train_size:train_size + test_size])), run)
        pool = _weighted(pool, run)
        train, validation = split(pool, 1.0 - run.validation_fraction, seed)
        print(f"Seed {seed}: {len(train)} train / {len(validation)} validation / {len(test)} test events.")

        model = train_defe(train, validation, replace(run, feature_set="all"))
        rows.append(("defe", seed, *_holdout_metrics(predict(model, test.features), test, run)))

        stats = fit_normalization(train)
        baseline = train_baseline(apply_normalization(train, stats), apply_normalization(validation, stats), run)
        scores = nn_core.predict_scores(baseline, apply_normalization(test, stats).features)
        rows.append(("dnn", seed, *_holdout_metrics(scores, test, run)))

        primitive = replace(run, feature_set="primitive")
        model = train_defe(train.columns(primitive_columns), validation.columns(primitive_columns), primitive)
        scores = predict(model, test.columns(primitive_columns).features)
        rows.append(("defe_primitive", seed, *_holdout_metrics(scores, test, run)))
    return pd.DataFrame(rows, columns=["model", "seed", "auc", "z"])


def cmd_compare(args) -> int:
    print("--- Comparing DEFE, DNN and primitive-only DEFE ---")
    config = load_config(args.config, args.seed)
    dataset = _read_events(args.data)
    try:
        seeds = [int(part) for part in args.seeds.split(",") if part.strip()]
    except ValueError:
        raise DataError(f"--seeds must be a comma-separated list of integers, got '{args.seeds}'.", source="cli") from None

    with capture_training_log(echo=args.verbose):
        table = compare_models(dataset, config, seeds, args.train_size, args.test_size)
    _prepare_output(args.out)
    _write_tsv(table, args.out)
    print(table.groupby("model")[["auc", "z"]].mean().to_string())
    print(f"\n✅ Comparison complete. Results written to '{args.out}'.")
    return 0


# --- Entry point ---

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="defe", description="Deep extreme feature extraction pipeline.")
    subparsers = parser.add_subparsers(dest="command", required=True)

    def command(name: str, handler, help_text: str, needs_model: bool = True) -> argparse.ArgumentParser:
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("--config", default=None, help="Flat key = value config file.")
        sub.add_argument("--seed", type=int, default=None, help="Overrides the config seed.")
        sub.add_argument("--out", required=True, help="Output path.")
        sub.add_argument("--data", required=True, help="Challenge-format CSV file.")
        sub.add_argument("--verbose", action="store_true", help="Echo the training log to stderr.")
        if needs_model:
            sub.add_argument("--model", required=True, help="Model bundle directory.")
        sub.set_defaults(handler=handler)
        return sub

    command("train", cmd_train, "Train a DEFE model bundle.", needs_model=False)
    command("evaluate", cmd_evaluate, "Score a labeled file and write the metrics report and ROC.")
    command("extract", cmd_extract, "Write extreme features (and their PCA projection) per event.")
    histograms = command("histograms", cmd_histograms, "Write per-feature signal/background histograms.")
    histograms.add_argument("--sample-fraction", type=float, default=1.0, help="Export a seeded random share of the features.")
    compare = command("compare", cmd_compare, "Compare DEFE against the baselines over several seeds.", needs_model=False)
    compare.add_argument("--seeds", default=DEFAULT_SEEDS)
    compare.add_argument("--train-size", type=int, default=10000)
    compare.add_argument("--test-size", type=int, default=5000)
    return parser


def main(argv=None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except DefeError as e:
        print(f"error [{e.source}]: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
