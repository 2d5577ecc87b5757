"""
Classical common spatial patterns and the DeepCSP loss.

Class 0 plays the role of C̄₁ and class 1 of C̄₂ throughout: the top filters
of a bank are the class-0 dominant directions.
"""
import hashlib
import json
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from deepcsp_config import env_float, get_config_value

from .numcore import (
    DEGENERATE_GAP,
    Node,
    ShapeError,
    Tape,
    check_finite,
    generalized_eig_spd,
)

logger = logging.getLogger(__name__)

DEFAULT_SHRINKAGE = float(get_config_value("csp.shrinkage", env_float("DEEPCSP_SHRINKAGE", 1e-4)))
LOG_FLOOR = 1e-12


class CovarianceError(ValueError):
    pass


class StaleStateError(RuntimeError):
    pass


# -----------------------------
# Covariances
# -----------------------------

@dataclass
class TrialCovariance:
    matrix: np.ndarray
    trace_norm: float


def normalized_covariance(x) -> TrialCovariance:
    """XXᵀ / trace(XXᵀ) for one D x T trial."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"trial must be D x T, got shape {x.shape}")
    check_finite(x, "trial")
    if x.shape[1] < x.shape[0]:
        logger.warning("trial has fewer samples (%s) than channels (%s)", x.shape[1], x.shape[0])
    gram = x @ x.T
    trace_norm = float(np.trace(gram))
    if trace_norm <= 0.0:
        raise CovarianceError("all-zero trial has no normalized covariance")
    return TrialCovariance(matrix=gram / trace_norm, trace_norm=trace_norm)


def _normalized_covariances(trials: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    gram = np.einsum("ndt,net->nde", trials, trials)
    traces = np.einsum("ndd->n", gram)
    if np.any(traces <= 0.0):
        raise CovarianceError(f"{int(np.sum(traces <= 0.0))} all-zero trial(s)")
    return gram / traces[:, None, None], traces


def latent_class_covariances(trials, labels, shrinkage: float = DEFAULT_SHRINKAGE) -> Tuple[np.ndarray, np.ndarray]:
    """
    Mean trace-normalized covariance per class plus ε·I with
    ε = shrinkage · trace(C̄) / D.
    """
    trials = np.asarray(trials, dtype=np.float64)
    labels = np.asarray(labels)
    if trials.ndim != 3 or labels.shape != (trials.shape[0],):
        raise ShapeError(f"trials {trials.shape} and labels {labels.shape} do not match")
    check_finite(trials, "trials")

    covs, _ = _normalized_covariances(trials)
    n_channels = trials.shape[1]
    means: List[np.ndarray] = []
    for label in (0, 1):
        members = covs[labels == label]
        if members.shape[0] == 0:
            raise CovarianceError(f"class {label} has no trials")
        mean = members.mean(axis=0)
        mean = 0.5 * (mean + mean.T)
        eps = shrinkage * np.trace(mean) / n_channels
        means.append(mean + eps * np.eye(n_channels))
    return means[0], means[1]


def class_covariances(epochs, shrinkage: float = DEFAULT_SHRINKAGE) -> Tuple[np.ndarray, np.ndarray]:
    return latent_class_covariances(epochs.trials, epochs.labels, shrinkage)


# -----------------------------
# Filter bank
# -----------------------------

@dataclass
class SpatialFilterBank:
    filters: np.ndarray
    eigenvalues: np.ndarray
    n_components: int
    channel_names: Optional[List[str]] = None
    spectrum: Optional[np.ndarray] = None

    @property
    def n_channels(self) -> int:
        return self.filters.shape[0]

    @property
    def top(self) -> np.ndarray:
        return self.filters[:, :self.n_components]

    @property
    def bottom(self) -> np.ndarray:
        return self.filters[:, self.n_components:]

    def names(self) -> List[str]:
        if self.channel_names:
            return list(self.channel_names)
        return [f"L{idx}" for idx in range(self.n_channels)]

    def checksum(self) -> str:
        digest = hashlib.sha1()
        digest.update(np.ascontiguousarray(self.filters).tobytes())
        digest.update(np.ascontiguousarray(self.eigenvalues).tobytes())
        return digest.hexdigest()


def _selection(n_channels: int, n: int) -> np.ndarray:
    # top n by descending λ, then bottom n starting from the smallest λ
    if n < 1 or 2 * n > n_channels:
        raise ValueError(f"need 1 <= n and 2n <= {n_channels}, got n={n}")
    return np.concatenate([np.arange(n), np.arange(n_channels - 1, n_channels - 1 - n, -1)])


def csp_fit(c1, c2, n: int, channel_names: Optional[Sequence[str]] = None) -> SpatialFilterBank:
    """Solves C̄₁w = λ(C̄₁+C̄₂)w and keeps the n largest then the n smallest λ."""
    c1 = np.asarray(c1, dtype=np.float64)
    c2 = np.asarray(c2, dtype=np.float64)
    if c1.shape != c2.shape:
        raise ShapeError(f"class covariances differ in shape: {c1.shape} vs {c2.shape}")
    selected = _selection(c1.shape[0], n)
    values, vectors = generalized_eig_spd(c1, c1 + c2)
    return SpatialFilterBank(
        filters=vectors[:, selected],
        eigenvalues=values[selected],
        n_components=n,
        channel_names=list(channel_names) if channel_names is not None else None,
        spectrum=values,
    )


def spatial_patterns(bank: SpatialFilterBank, c1, c2) -> np.ndarray:
    """Forward-model patterns A = (C̄₁ + C̄₂) W matching each filter column."""
    return (np.asarray(c1) + np.asarray(c2)) @ bank.filters


def csp_features(filters, x) -> np.ndarray:
    """
    Log-variance of the projected channels: log(diag(Wᵀ X Xᵀ W) / T).

    Accepts one D x T trial or an N x D x T stack.
    """
    filters = np.asarray(filters, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    stack = x[None] if single else x
    if stack.ndim != 3 or stack.shape[1] != filters.shape[0]:
        raise ShapeError(f"filters {filters.shape} do not fit trials {x.shape}")
    projected = np.einsum("dk,ndt->nkt", filters, stack)
    variances = np.mean(projected ** 2, axis=-1)
    floored = variances <= LOG_FLOOR
    if np.any(floored):
        logger.warning("zero projected variance in %s feature(s); flooring at log(%g)", int(floored.sum()), LOG_FLOOR)
        variances = np.where(floored, LOG_FLOOR, variances)
    features = np.log(variances)
    return features[0] if single else features


def csp_features_batch(filters, trials) -> np.ndarray:
    trials = np.asarray(trials, dtype=np.float64)
    if trials.ndim != 3:
        raise ShapeError(f"trials must be N x D x T, got {trials.shape}")
    return csp_features(filters, trials)


def filter_trace_ratio(w_sel, c1, c2) -> float:
    """trace(WᵀC̄₁W) / trace(Wᵀ(C̄₁+C̄₂)W)."""
    w_sel = np.asarray(w_sel, dtype=np.float64)
    c1 = np.asarray(c1, dtype=np.float64)
    c2 = np.asarray(c2, dtype=np.float64)
    if w_sel.ndim == 1:
        w_sel = w_sel[:, None]
    if c1.shape != c2.shape or c1.shape[0] != w_sel.shape[0]:
        raise ShapeError(f"filters {w_sel.shape} vs covariances {c1.shape}/{c2.shape}")
    numerator = np.trace(w_sel.T @ c1 @ w_sel)
    return float(numerator / np.trace(w_sel.T @ (c1 + c2) @ w_sel))


# -----------------------------
# DeepCSP loss
# -----------------------------

@dataclass
class DeepCspLossState:
    loss: float
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    selected: np.ndarray
    grads_c1: np.ndarray
    grads_c2: np.ndarray
    n_components: int
    labels: np.ndarray
    degenerate: bool
    latent_shape: Tuple[int, ...]
    latent_digest: str

    def filter_bank(self, channel_names: Optional[Sequence[str]] = None) -> SpatialFilterBank:
        return SpatialFilterBank(
            filters=self.eigenvectors[:, self.selected],
            eigenvalues=self.eigenvalues[self.selected],
            n_components=self.n_components,
            channel_names=list(channel_names) if channel_names is not None else None,
            spectrum=self.eigenvalues,
        )


def _digest(latents: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(latents).tobytes()).hexdigest()


def _selection_degenerate(values: np.ndarray, selected: np.ndarray, tol: float = DEGENERATE_GAP) -> bool:
    gaps = np.abs(np.diff(values))
    chosen = np.zeros(values.size, dtype=bool)
    chosen[selected] = True
    touching = chosen[:-1] | chosen[1:]
    return bool(np.any(gaps[touching] < tol))


def deepcsp_loss(latents, labels, n: int, shrinkage: float = DEFAULT_SHRINKAGE) -> DeepCspLossState:
    """
    L = -(1/2n) [Σ_top λ + Σ_bottom (1 - λ)] over the generalized eigenvalues
    of (C̄₁, C̄₁ + C̄₂) built from the latent trials.

    Gradients with respect to C̄₁ and C̄₂ use ∂λ/∂C̄₁ = (1-λ)vvᵀ and
    ∂λ/∂C̄₂ = -λvvᵀ with vᵀ(C̄₁+C̄₂)v = 1; eigenvectors are held fixed.
    """
    latents = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if latents.ndim != 3:
        raise ShapeError(f"latents must be N x F x T, got {latents.shape}")
    n_features = latents.shape[1]
    selected = _selection(n_features, n)

    c1, c2 = latent_class_covariances(latents, labels, shrinkage)
    values, vectors = generalized_eig_spd(c1, c1 + c2)

    top, bottom = selected[:n], selected[n:]
    scale = 1.0 / (2 * n)
    loss = -scale * (values[top].sum() + (1.0 - values[bottom]).sum())

    outer = np.einsum("dk,ek->kde", vectors, vectors)
    weights_c1 = np.zeros(n_features)
    weights_c2 = np.zeros(n_features)
    weights_c1[top] = 1.0 - values[top]
    weights_c1[bottom] = -(1.0 - values[bottom])
    weights_c2[top] = -values[top]
    weights_c2[bottom] = values[bottom]
    grads_c1 = -scale * np.einsum("k,kde->de", weights_c1, outer)
    grads_c2 = -scale * np.einsum("k,kde->de", weights_c2, outer)

    degenerate = _selection_degenerate(values, selected)
    if degenerate:
        logger.warning("degenerate generalized spectrum near the selected components; gradient is a subgradient")

    return DeepCspLossState(
        loss=float(loss),
        eigenvalues=values,
        eigenvectors=vectors,
        selected=selected,
        grads_c1=0.5 * (grads_c1 + grads_c1.T),
        grads_c2=0.5 * (grads_c2 + grads_c2.T),
        n_components=n,
        labels=labels,
        degenerate=degenerate,
        latent_shape=latents.shape,
        latent_digest=_digest(latents),
    )


def deepcsp_backward(state: DeepCspLossState, latents) -> np.ndarray:
    """
    Chains ∂L/∂C̄ₖ through the trace-normalized covariance of every trial:
    ∂L/∂X = (2/t) (G - trace(GA)/t · I) X with A = XXᵀ, t = trace(A),
    G = ∂L/∂C̄ₖ / |class k|.
    """
    latents = np.asarray(latents, dtype=np.float64)
    if latents.shape != state.latent_shape or _digest(latents) != state.latent_digest:
        raise StaleStateError("loss state was computed from different latents")

    grads = np.zeros_like(latents)
    for label, grad_class in ((0, state.grads_c1), (1, state.grads_c2)):
        members = np.flatnonzero(state.labels == label)
        x = latents[members]
        g = grad_class / members.size
        traces = np.einsum("ndt,ndt->n", x, x)
        gx = np.einsum("de,net->ndt", g, x)
        tr_ga = np.einsum("ndt,ndt->n", x, gx)
        grads[members] = (2.0 / traces)[:, None, None] * (gx - (tr_ga / traces)[:, None, None] * x)
    return grads


def deepcsp_loss_node(tape: Tape, latents: Node, labels, n: int,
                      shrinkage: float = DEFAULT_SHRINKAGE) -> Tuple[Node, DeepCspLossState]:
    """Records the DeepCSP loss on the tape with its analytic backward rule."""
    state = deepcsp_loss(latents.value, labels, n, shrinkage)
    value = latents.value

    def vjp(g):
        return (g * deepcsp_backward(state, value),)

    return tape.custom([latents], state.loss, vjp, op="deepcsp_loss"), state


# -----------------------------
# Serialization
# -----------------------------

def bank_to_json(bank: SpatialFilterBank) -> Dict[str, object]:
    return {
        "n_components": int(bank.n_components),
        "channel_names": bank.names(),
        "eigenvalues": [float(value) for value in bank.eigenvalues],
        "filters": [float(value) for value in np.ravel(bank.filters, order="C")],
    }


def bank_from_json(doc: Dict[str, object]) -> SpatialFilterBank:
    n = int(doc["n_components"])
    flat = np.asarray(doc["filters"], dtype=np.float64)
    if n < 1 or flat.size % (2 * n) != 0:
        raise ShapeError(f"filter payload of {flat.size} values does not fit n_components={n}")
    names = list(doc.get("channel_names") or [])
    filters = flat.reshape(-1, 2 * n)
    if names and len(names) != filters.shape[0]:
        raise ShapeError(f"{len(names)} channel names for {filters.shape[0]} filter rows")
    return SpatialFilterBank(
        filters=filters,
        eigenvalues=np.asarray(doc["eigenvalues"], dtype=np.float64),
        n_components=n,
        channel_names=names or None,
    )


def save_bank(path: str, bank: SpatialFilterBank):
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(bank_to_json(bank), handle, indent=2)


def load_bank(path: str) -> SpatialFilterBank:
    with open(path, "r", encoding="utf-8") as handle:
        return bank_from_json(json.load(handle))
