"""
Alternating two-optimizer training, evaluation and figure-data exports.

Every epoch runs one full-batch SGD step of the feature extractor on the
DeepCSP loss, refits the filter bank on fresh latents, then makes one pass
of minibatch SGD over the classifier on the head features.
"""
import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from deepcsp_config import env_float, env_int, get_config_value

from .connectivity import ESTIMATORS, ConnectivityGraph, connectivity_matrix, graph_normalize
from .csp import (
    DEFAULT_SHRINKAGE,
    SpatialFilterBank,
    class_covariances,
    csp_features,
    csp_fit,
    DeepCspLossState,
    deepcsp_backward,
    deepcsp_loss,
)
from .data import EpochSet, split
from .models import (
    CLASSIFIER_GROUP,
    FEATURE_GROUP,
    ModelConfig,
    ModelParams,
    classifier,
    classifier_logits,
    deepcsp_head,
    extract_latents,
    init_params,
    latent_node,
    predict_proba,
    tape_parameters,
)
from .numcore import NonFiniteError, Tape
from .signal import DEFAULT_BAND_HIGH, DEFAULT_BAND_LOW, fir_bandpass

logger = logging.getLogger(__name__)

DEFAULT_LR_FEATURE = float(get_config_value("train.lr_feature", env_float("DEEPCSP_LR_FEATURE", 0.01)))
DEFAULT_LR_CLASSIFIER = float(get_config_value("train.lr_classifier", env_float("DEEPCSP_LR_CLASSIFIER", 0.1)))
DEFAULT_BATCH_SIZE = int(get_config_value("train.batch_size", env_int("DEEPCSP_BATCH_SIZE", 64)))
DEFAULT_EPOCHS = int(get_config_value("train.epochs", env_int("DEEPCSP_EPOCHS", 200)))
DEFAULT_PATIENCE = int(get_config_value("train.patience", env_int("DEEPCSP_PATIENCE", 20)))
FEATURE_CHUNK = int(get_config_value("train.chunk", env_int("DEEPCSP_CHUNK", 32)))


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    variant: str = "shallow-deepcsp"
    lr_feature: float = DEFAULT_LR_FEATURE
    lr_classifier: float = DEFAULT_LR_CLASSIFIER
    n_components: int = 4
    batch_size: int = DEFAULT_BATCH_SIZE
    epochs: int = DEFAULT_EPOCHS
    seed: int = 42
    early_stop_patience: int = DEFAULT_PATIENCE
    validation_fraction: float = 0.2
    shrinkage: float = DEFAULT_SHRINKAGE
    band: Tuple[float, float] = (DEFAULT_BAND_LOW, DEFAULT_BAND_HIGH)
    estimator: str = "plv"
    threshold: float = 0.0
    self_loops: bool = False
    preprocess_band: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.lr_feature < 0 or self.lr_classifier < 0:
            raise ValueError("learning rates must not be negative")
        if self.n_components < 1:
            raise ValueError(f"n_components must be >= 1, got {self.n_components}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError(f"validation_fraction must be in [0, 1), got {self.validation_fraction}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}")
        self.band = (float(self.band[0]), float(self.band[1]))
        if self.preprocess_band is not None:
            self.preprocess_band = (float(self.preprocess_band[0]), float(self.preprocess_band[1]))


@dataclass
class Metrics:
    accuracy: float
    per_class_accuracy: Tuple[float, float]
    cross_entropy: float
    epoch: Optional[int] = None
    deepcsp_loss: Optional[float] = None
    eigenvalues: List[float] = field(default_factory=list)
    val_accuracy: Optional[float] = None
    val_cross_entropy: Optional[float] = None


@dataclass
class TrainResult:
    params: ModelParams
    bank: SpatialFilterBank
    history: List[Metrics]
    best_epoch: int
    graph: Optional[ConnectivityGraph] = None
    issues: List[Dict[str, str]] = field(default_factory=list)
    stopped_early: bool = False
    interrupted: bool = False


# -----------------------------
# Helpers
# -----------------------------

def _score(probs: np.ndarray, labels: np.ndarray) -> Tuple[float, Tuple[float, float], float]:
    labels = np.asarray(labels, dtype=np.int64)
    predicted = np.argmax(probs, axis=1)
    correct = predicted == labels
    per_class = tuple(
        float(np.mean(correct[labels == label])) if np.any(labels == label) else float("nan")
        for label in (0, 1)
    )
    picked = np.clip(probs[np.arange(labels.size), labels], 1e-300, None)
    return float(np.mean(correct)), per_class, float(-np.mean(np.log(picked)))


def sgd_step(params: ModelParams, grads: Dict[str, np.ndarray], names: Sequence[str], lr: float):
    """Plain SGD; results are rounded back to the parameter storage dtype."""
    for name in names:
        stored = params.tensors[name]
        params.tensors[name] = (stored.astype(np.float64) - lr * grads[name]).astype(stored.dtype)


def _check_two_classes(epochs: EpochSet, what: str):
    counts = epochs.class_counts()
    if min(counts) == 0:
        raise ValueError(f"{what} needs both classes, got counts {counts}")


def preprocess(epochs: EpochSet, band: Optional[Tuple[float, float]]) -> EpochSet:
    if band is None:
        return epochs
    return EpochSet(fir_bandpass(epochs.trials, epochs.fs, band[0], band[1]), epochs.labels,
                    epochs.fs, list(epochs.channel_names), epochs.channel_positions)


def _validation_split(epochs: EpochSet, config: TrainConfig,
                      issues: List[Dict[str, str]]) -> Tuple[EpochSet, Optional[EpochSet]]:
    if config.validation_fraction <= 0.0:
        return epochs, None
    try:
        return split(epochs, 1.0 - config.validation_fraction, seed=config.seed, stratified=True)
    except ValueError as exc:
        message = f"no validation split ({exc}); early stopping watches training loss"
        logger.warning(message)
        issues.append({"severity": "warning", "component": "training", "message": message})
        return epochs, None


def _classifier_pass(params: ModelParams, features: np.ndarray, labels: np.ndarray,
                     rng: np.random.Generator, config: TrainConfig):
    order = rng.permutation(labels.size)
    names = params.names(CLASSIFIER_GROUP)
    for start in range(0, labels.size, config.batch_size):
        batch = order[start:start + config.batch_size]
        tape = Tape()
        nodes = tape_parameters(tape, params, names)
        loss = tape.softmax_cross_entropy(classifier_logits(tape, features[batch], nodes), labels[batch])
        if not np.isfinite(loss.value):
            raise TrainingError(f"non-finite classifier loss on batch starting at {start}")
        sgd_step(params, tape.backward(loss), names, config.lr_classifier)


def _feature_step(params: ModelParams, fit: EpochSet, config: TrainConfig, epoch: int,
                  latents: np.ndarray, state: DeepCspLossState):
    """
    One full-batch step on the DeepCSP loss in two passes: the loss and its
    latent gradient come from the already extracted latents, then every chunk
    is re-run on its own tape seeded with its slice of that gradient.
    """
    names = params.names(FEATURE_GROUP)
    if not names:
        return
    if not np.isfinite(state.loss):
        raise TrainingError(f"non-finite DeepCSP loss at epoch {epoch}")
    upstream = deepcsp_backward(state, latents)

    grads = {name: np.zeros(params.tensors[name].shape) for name in names}
    for start in range(0, fit.n_trials, FEATURE_CHUNK):
        rows = slice(start, start + FEATURE_CHUNK)
        tape = Tape()
        nodes = tape_parameters(tape, params, names)
        chunk = latent_node(tape, fit.trials[rows], nodes, params)
        for name, grad in tape.backward(tape.sum(tape.mul(chunk, upstream[rows]))).items():
            grads[name] += grad
        logger.debug("feature step epoch=%s chunk=%s", epoch, start // FEATURE_CHUNK)
    bad = [name for name in names if not np.all(np.isfinite(grads[name]))]
    if bad:
        raise TrainingError(f"non-finite gradient at epoch {epoch} for {', '.join(bad)}")
    sgd_step(params, grads, names, config.lr_feature)


def _measure(params: ModelParams, bank: SpatialFilterBank, features: np.ndarray, labels: np.ndarray,
             val: Optional[EpochSet], epoch: int, state=None) -> Metrics:
    accuracy, per_class, entropy = _score(classifier(features, params), labels)
    metrics = Metrics(accuracy=accuracy, per_class_accuracy=per_class, cross_entropy=entropy, epoch=epoch)
    if state is not None:
        metrics.deepcsp_loss = state.loss
        metrics.eigenvalues = [float(value) for value in state.eigenvalues]
    elif bank.spectrum is not None:
        metrics.eigenvalues = [float(value) for value in bank.spectrum]
    if val is not None:
        metrics.val_accuracy, _, metrics.val_cross_entropy = _score(
            classifier(deepcsp_head(extract_latents(params, val.trials), bank), params), val.labels
        )
    return metrics


def _fit_bank(params: ModelParams, fit: EpochSet, config: TrainConfig):
    try:
        latents = extract_latents(params, fit.trials, chunk=FEATURE_CHUNK)
    except NonFiniteError as exc:
        raise TrainingError(str(exc)) from exc
    if params.config.variant == "csp":
        c1, c2 = class_covariances(fit, config.shrinkage)
        return csp_fit(c1, c2, config.n_components, fit.channel_names), latents, None
    state = deepcsp_loss(latents, fit.labels, config.n_components, config.shrinkage)
    return state.filter_bank(), latents, state


# -----------------------------
# Training
# -----------------------------

def train(train_set: EpochSet, config: TrainConfig, model_config: Optional[ModelConfig] = None,
          on_epoch: Optional[Callable[[Metrics], None]] = None,
          stop_requested: Optional[Callable[[], bool]] = None) -> TrainResult:
    """Runs the alternating protocol and returns the best-by-validation state."""
    _check_two_classes(train_set, "training")
    issues: List[Dict[str, str]] = []
    epochs = preprocess(train_set, config.preprocess_band)
    fit, val = _validation_split(epochs, config, issues)

    if model_config is None:
        model_config = ModelConfig(variant=config.variant, n_channels=epochs.n_channels, fs=epochs.fs,
                                   n_components=config.n_components, seed=config.seed)

    graph = None
    adjacency = None
    if model_config.variant == "shallow-gcn":
        graph = connectivity_matrix(fit, config.estimator, config.band)
        adjacency = graph_normalize(graph, self_loops=config.self_loops, threshold=config.threshold)
        issues.extend(graph.issues)

    params = init_params(model_config, adjacency)
    rng = np.random.default_rng(config.seed)

    degenerate_epochs: List[int] = []
    bank, latents, state = _fit_bank(params, fit, config)
    features = csp_features(bank.filters, latents)
    history = [_measure(params, bank, features, fit.labels, val, 0, state)]
    if state is not None and state.degenerate:
        degenerate_epochs.append(0)
    if on_epoch:
        on_epoch(history[-1])

    def monitored(metrics: Metrics) -> float:
        return metrics.val_cross_entropy if metrics.val_cross_entropy is not None else metrics.cross_entropy

    best = (monitored(history[0]), 0, params.copy(), bank)
    waited = 0
    stopped_early = interrupted = False

    for epoch in range(1, config.epochs + 1):
        if stop_requested and stop_requested():
            interrupted = True
            message = f"training interrupted before epoch {epoch}"
            logger.warning(message)
            issues.append({"severity": "warning", "component": "training", "message": message})
            break

        _feature_step(params, fit, config, epoch, latents, state)
        bank, latents, state = _fit_bank(params, fit, config)
        if state is not None and state.degenerate:
            degenerate_epochs.append(epoch)
        features = csp_features(bank.filters, latents)
        _classifier_pass(params, features, fit.labels, rng, config)

        metrics = _measure(params, bank, features, fit.labels, val, epoch, state)
        history.append(metrics)
        if on_epoch:
            on_epoch(metrics)
        logger.info(
            "epoch=%s accuracy=%.4f cross_entropy=%.4f deepcsp_loss=%s val_accuracy=%s",
            epoch, metrics.accuracy, metrics.cross_entropy,
            "n/a" if metrics.deepcsp_loss is None else f"{metrics.deepcsp_loss:.5f}",
            "n/a" if metrics.val_accuracy is None else f"{metrics.val_accuracy:.4f}",
        )

        score = monitored(metrics)
        if score < best[0]:
            best = (score, epoch, params.copy(), bank)
            waited = 0
        else:
            waited += 1
            if 0 < config.early_stop_patience <= waited:
                stopped_early = True
                logger.info("early stop at epoch=%s best_epoch=%s", epoch, best[1])
                break

    if degenerate_epochs:
        issues.append({
            "severity": "warning",
            "component": "training",
            "message": (f"degenerate generalized spectrum near the selected components at "
                        f"{len(degenerate_epochs)} epoch(s), first at epoch {degenerate_epochs[0]}"),
        })

    _, best_epoch, best_params, best_bank = best
    return TrainResult(
        params=best_params,
        bank=best_bank,
        history=history,
        best_epoch=best_epoch,
        graph=graph,
        issues=issues,
        stopped_early=stopped_early,
        interrupted=interrupted,
    )


def train_csp_baseline(train_set: EpochSet, config: TrainConfig,
                       on_epoch: Optional[Callable[[Metrics], None]] = None,
                       stop_requested: Optional[Callable[[], bool]] = None) -> TrainResult:
    """Classical CSP on the raw channels with the same two-layer classifier."""
    model_config = ModelConfig(variant="csp", n_channels=train_set.n_channels, fs=train_set.fs,
                               n_components=config.n_components, seed=config.seed)
    return train(train_set, config, model_config, on_epoch=on_epoch, stop_requested=stop_requested)


def evaluate(params: ModelParams, bank: SpatialFilterBank, test_set: EpochSet,
             preprocess_band: Optional[Tuple[float, float]] = None) -> Metrics:
    if test_set.n_trials == 0:
        raise ValueError("cannot evaluate on an empty test set")
    epochs = preprocess(test_set, preprocess_band)
    accuracy, per_class, entropy = _score(predict_proba(params, bank, epochs.trials), epochs.labels)
    return Metrics(accuracy=accuracy, per_class_accuracy=per_class, cross_entropy=entropy)


# -----------------------------
# Exports
# -----------------------------

def export_scatter(latents, labels, bank: SpatialFilterBank, n: int = 2) -> List[List[float]]:
    """
    Log-variance features of ⌈n/2⌉ top and ⌊n/2⌋ bottom filters, one row per
    trial followed by its label.
    """
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim == 2:
        latents = latents[None]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape != (latents.shape[0],):
        raise ValueError(f"{labels.size} labels for {latents.shape[0]} trials")
    if n < 1 or n > 2 * bank.n_components:
        raise ValueError(f"n must be in [1, {2 * bank.n_components}], got {n}")
    columns = list(range((n + 1) // 2)) + list(range(bank.n_components, bank.n_components + n // 2))
    features = deepcsp_head(latents, SpatialFilterBank(bank.filters[:, columns], bank.eigenvalues[columns], 1))
    return [[float(value) for value in row] + [int(label)] for row, label in zip(features, labels)]


def write_scatter_csv(path: str, rows: Sequence[Sequence[float]]):
    n = len(rows[0]) - 1 if rows else 0
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow([f"component_{idx}" for idx in range(n)] + ["label"])
        writer.writerows(rows)


def export_topomap(filters, channel_names: Sequence[str],
                   positions: Dict[str, Sequence[float]],
                   eigenvalues: Optional[Sequence[float]] = None) -> List[Dict[str, object]]:
    """One record set per filter column: {channel, x, y, weight} for every electrode."""
    filters = np.asarray(filters, dtype=np.float64)
    if filters.ndim != 2 or filters.shape[0] != len(channel_names):
        raise ValueError(f"filters {filters.shape} do not match {len(channel_names)} channels")
    missing = [name for name in channel_names if name not in positions]
    if missing:
        raise ValueError(f"missing position for channel(s): {', '.join(missing)}")

    components: List[Dict[str, object]] = []
    for column in range(filters.shape[1]):
        records = [
            {"channel": name, "x": float(positions[name][0]), "y": float(positions[name][1]),
             "weight": float(filters[row, column])}
            for row, name in enumerate(channel_names)
        ]
        entry: Dict[str, object] = {"component": column, "records": records}
        if eigenvalues is not None:
            entry["eigenvalue"] = float(eigenvalues[column])
        components.append(entry)
    return components
