"""Downstream classification harness: weighted cross entropy, video-level K-fold CV.

Per fold the augmentation jobs run on train-role images only, every configuration
of the grid is trained and scored on the validation videos, and the selected one is
evaluated on the test videos. The positive class for sensitivity, specificity,
precision and F1 is ``neoplastic``.
"""

import csv
import dataclasses
import itertools
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from sklearn.metrics import accuracy_score, confusion_matrix, f1_score

from latentaug.augmentation import fold_sets, merge_manifests, run_job
from latentaug.checkpoint import Checkpoint, load_module_state, module_state
from latentaug.config import to_dict
from latentaug.data_model import POSITIVE_LABEL, filter_manifest, make_splits
from latentaug.exception import ClassifierError, ConfigError, CrossValidationError
from latentaug.networks import ResidualClassifier
from latentaug.process import LatentAugPool, worker_log
from latentaug.utils.seeding import derive_seed
from latentaug.utils.training import (
    encode_targets,
    fit_classifier,
    inverse_frequency_weights,
    load_images,
    predict_proba,
    seeded,
)

logger = logging.getLogger(__name__)

CLASSIFIER_KIND = "classifier"

LEARNING_RATES = (1e-4, 1e-5)
L2_PENALTIES = (1e-2, 1e-3, 1e-4)
DROPOUT_PROBABILITIES = (0.0, 0.5)

METRIC_NAMES = ("accuracy", "f1", "sensitivity", "specificity", "precision")
COUNT_NAMES = ("tp", "fp", "tn", "fn")
HYPERPARAMETER_NAMES = ("learning_rate", "l2_penalty", "dropout_probability")
REPORT_COLUMNS = ("fold",) + METRIC_NAMES + COUNT_NAMES + HYPERPARAMETER_NAMES


@dataclass(frozen=True)
class ClassifierConfig:

    learning_rate: float = 1e-4
    l2_penalty: float = 1e-3
    dropout_probability: float = 0.0
    epochs: int = 30
    batch_size: int = 32
    patience: int = 5
    input_size: int = 64
    width: int = 16
    class_weights: Optional[Tuple[float, ...]] = None
    selection: str = "f1"
    positive_label: str = POSITIVE_LABEL
    seed: int = 0
    device: str = "cpu"

    def __post_init__(self):

        if self.selection not in ("f1", "accuracy"):
            raise ConfigError(f"selection must be 'f1' or 'accuracy', got {self.selection!r}")
        if not 0.0 <= self.dropout_probability < 1.0:
            raise ConfigError("dropout_probability must be in [0, 1)")
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("epochs must be >= 1 and batch_size >= 2")

    def hyperparameters(self):
        return {name: getattr(self, name) for name in HYPERPARAMETER_NAMES}


def default_grid(base=ClassifierConfig()):
    """The 2 x 3 x 2 learning-rate / L2 / dropout grid around ``base``."""

    return [
        dataclasses.replace(base, learning_rate=lr, l2_penalty=l2, dropout_probability=p)
        for lr, l2, p in itertools.product(LEARNING_RATES, L2_PENALTIES, DROPOUT_PROBABILITIES)
    ]


def _ratio(num, den):
    return num / den if den else 0.0


@dataclass(frozen=True)
class MetricsReport:
    """Binary metrics with the confusion counts they were computed from.

    A mean report (``fold == "mean"``) holds the arithmetic mean of its fold
    metrics, the summed counts, and the fold reports in ``folds``.
    """

    accuracy: float
    f1: float
    sensitivity: float
    specificity: float
    precision: float
    tp: int
    fp: int
    tn: int
    fn: int
    fold: Optional[object] = None
    hyperparameters: Tuple[Tuple[str, float], ...] = ()
    folds: Tuple["MetricsReport", ...] = ()

    @classmethod
    def from_counts(cls, tp, fp, tn, fn, fold=None, hyperparameters=None):

        sensitivity = _ratio(tp, tp + fn)
        precision = _ratio(tp, tp + fp)

        return cls(
            accuracy=_ratio(tp + tn, tp + fp + tn + fn),
            f1=_ratio(2 * precision * sensitivity, precision + sensitivity),
            sensitivity=sensitivity,
            specificity=_ratio(tn, tn + fp),
            precision=precision,
            tp=int(tp),
            fp=int(fp),
            tn=int(tn),
            fn=int(fn),
            fold=fold,
            hyperparameters=tuple(sorted((hyperparameters or {}).items())),
        )

    @classmethod
    def from_predictions(cls, y_true, y_pred, positive_label=POSITIVE_LABEL, **kwargs):

        truth = np.asarray(y_true) == positive_label
        pred = np.asarray(y_pred) == positive_label
        tn, fp, fn, tp = confusion_matrix(truth, pred, labels=[False, True]).ravel()
        return cls.from_counts(tp, fp, tn, fn, **kwargs)

    @classmethod
    def mean_of(cls, reports):

        reports = sorted(reports, key=lambda r: r.fold)
        if not reports:
            raise ClassifierError("no fold reports to average")

        means = {name: float(np.mean([getattr(r, name) for r in reports])) for name in METRIC_NAMES}
        counts = {name: int(sum(getattr(r, name) for r in reports)) for name in COUNT_NAMES}
        return cls(**means, **counts, fold="mean", folds=tuple(reports))

    def row(self):

        hp = dict(self.hyperparameters)
        return [self.fold] + [getattr(self, n) for n in METRIC_NAMES + COUNT_NAMES] + [hp.get(n, "") for n in HYPERPARAMETER_NAMES]


def _classes(manifest):
    return tuple(sorted(manifest.vocabulary.labels))


def _score_fn(config, classes):

    if config.selection == "accuracy":
        return accuracy_score

    if len(classes) == 2 and config.positive_label in classes:
        pos = classes.index(config.positive_label)
        return lambda y_true, y_pred: f1_score(y_true, y_pred, pos_label=pos, zero_division=0)

    return lambda y_true, y_pred: f1_score(y_true, y_pred, average="macro", zero_division=0)


def _class_weights(config, targets, classes):

    if config.class_weights is None:
        return inverse_frequency_weights(targets, len(classes))
    if len(config.class_weights) != len(classes):
        raise ConfigError(f"class_weights needs {len(classes)} values for {', '.join(classes)}")
    return np.asarray(config.class_weights, dtype=np.float64)


def train_classifier(train, val, config=ClassifierConfig()):
    """Train the residual classifier with weighted cross entropy; keep the best validation epoch.

    Raises
    ------
    ClassifierError
        fewer than two labels in ``train``
    DivergenceError
        non-finite loss
    """

    present = sorted({r.label for r in train.records})
    if len(present) < 2:
        raise ClassifierError(f"training needs at least two labels, got {present}")

    classes = _classes(train)
    train_y = encode_targets([r.label for r in train.records], classes)
    val_y = encode_targets([r.label for r in val.records], classes)
    weights = _class_weights(config, train_y, classes)

    with seeded(config.seed, "init", "classifier"):
        network = ResidualClassifier(len(classes), config.width, dropout=config.dropout_probability)

    _, score, history = fit_classifier(
        network,
        load_images(train, config.input_size),
        train_y,
        load_images(val, config.input_size),
        val_y,
        _score_fn(config, classes),
        class_weights=weights,
        learning_rate=config.learning_rate,
        weight_decay=config.l2_penalty,
        epochs=config.epochs,
        batch_size=config.batch_size,
        patience=config.patience,
        seed=config.seed,
        device=config.device,
        log_prefix="Classifier",
    )

    return Checkpoint(
        kind=CLASSIFIER_KIND,
        config=to_dict(config),
        state=module_state(network),
        seed=config.seed,
        meta={
            "classes": list(classes),
            "class_weights": [float(w) for w in weights],
            "val_score": float(score),
            "epochs_run": len(history),
            "train_manifest": train.content_hash(),
        },
    )


def load_classifier(checkpoint, device="cpu"):

    if not isinstance(checkpoint, Checkpoint):
        checkpoint = Checkpoint.load(checkpoint, kind=CLASSIFIER_KIND)

    cfg = checkpoint.config
    network = ResidualClassifier(len(checkpoint.meta["classes"]), cfg["width"], dropout=cfg["dropout_probability"])
    load_module_state(network, checkpoint.state)
    return network.to(device).eval()


def evaluate(checkpoint, test, fold=None):
    """Confusion-count metrics of ``checkpoint`` on every record of ``test``.

    Raises
    ------
    ClassifierError
        empty test set, or a test label the classifier was not trained on
    """

    if len(test) == 0:
        raise ClassifierError("cannot evaluate on an empty test set")

    classes = tuple(checkpoint.meta["classes"])
    unknown = sorted({r.label for r in test.records} - set(classes))
    if unknown:
        raise ClassifierError(f"test labels {unknown} were not seen in training ({', '.join(classes)})")

    cfg = checkpoint.config
    network = load_classifier(checkpoint, cfg["device"])
    proba = predict_proba(network, load_images(test, cfg["input_size"]), device=cfg["device"])
    predicted = [classes[i] for i in proba.argmax(axis=1)]

    hyperparameters = {name: cfg[name] for name in HYPERPARAMETER_NAMES}
    return MetricsReport.from_predictions(
        [r.label for r in test.records], predicted, cfg["positive_label"], fold=fold, hyperparameters=hyperparameters
    )


def _fold_worker(item):

    fold, manifest, split, augment_jobs, grid, train_modalities, test_modalities, seed, out_dir = item

    try:

        augmented = []
        for i, job in enumerate(augment_jobs):
            job_dir = Path(out_dir) / f"fold{fold}" / f"augment{i}" if out_dir else Path(job.out_dir) / f"fold{fold}"
            augmented.append(run_job(job, manifest, split, job_dir, command=f"classify cv fold {fold}"))

        sets = fold_sets(merge_manifests(manifest, augmented) if augmented else manifest, split)
        train = filter_manifest(sets.train, modality=train_modalities)
        val = filter_manifest(sets.val, modality=test_modalities)
        test = filter_manifest(sets.test, modality=test_modalities)

        worker_log(
            "info",
            f"CV: fold {fold}: {len(train)} train ({sum(r.is_augmented for r in train.records)} augmented), "
            f"{len(val)} val, {len(test)} test, {len(sets.excluded)} excluded",
        )

        best, best_score = None, -np.inf
        for config in grid:
            config = dataclasses.replace(config, seed=derive_seed(seed, "classifier", fold))
            checkpoint = train_classifier(train, val, config)
            score = checkpoint.meta["val_score"]
            worker_log("debug", f"CV: fold {fold} {config.hyperparameters()} val {score:.4f}")
            rank = score if np.isfinite(score) else -np.inf
            if best is None or rank > best_score:
                best, best_score = checkpoint, rank

        report = evaluate(best, test, fold=fold)
        worker_log("info", f"CV: fold {fold} selected {dict(report.hyperparameters)}, test accuracy {report.accuracy:.3f}")
        return report

    except CrossValidationError:
        raise
    except Exception as e:
        raise CrossValidationError(fold, f"{type(e).__name__}: {e}") from e


def cross_validate(
    manifest,
    augment_jobs=(),
    config_grid=None,
    k=5,
    seed=0,
    ratios=(0.6, 0.2, 0.2),
    train_modalities=None,
    test_modalities=None,
    jobs=1,
    out_dir=None,
    log_queue=None,
):
    """Video-level K-fold evaluation; returns the mean :class:`MetricsReport` with fold reports.

    ``train_modalities`` / ``test_modalities`` restrict the training and the
    validation/test records (e.g. train on NBI plus translated NBI, test on NBI); the
    split itself is computed once on the whole manifest.

    Raises
    ------
    CrossValidationError
        a fold failed (carries the fold index)
    """

    grid = list(config_grid) if config_grid is not None else default_grid()
    if not grid:
        raise ConfigError("config grid is empty")

    splits = make_splits(manifest, k=k, ratios=ratios, seed=seed)
    logger.info(
        f"CV: {k} folds, {len(grid)} configs, {len(augment_jobs)} augmentation jobs, "
        f"{len(manifest.video_ids())} videos"
    )

    pool = LatentAugPool(jobs=jobs, log_queue=log_queue)
    reports = pool.map(
        _fold_worker,
        [
            (split.fold_index, manifest, split, tuple(augment_jobs), grid, train_modalities, test_modalities, seed,
             None if out_dir is None else Path(out_dir).as_posix())
            for split in splits
        ],
    )

    mean = MetricsReport.mean_of(reports)
    logger.info(f"CV: mean accuracy {mean.accuracy:.3f}, F1 {mean.f1:.3f}")
    return mean


def _fmt(value):

    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def write_report(report, out_dir):
    """``report.csv`` (one row per fold plus the mean row) and an aligned ``report.txt``."""

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = [r.row() for r in report.folds] + [report.row()] if report.folds else [report.row()]

    with open(out_dir / "report.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        writer.writerows(rows)

    cells = [list(REPORT_COLUMNS)] + [[_fmt(v) for v in row] for row in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(REPORT_COLUMNS))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]

    with open(out_dir / "report.txt", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

    return out_dir / "report.csv"
