"""
Channel-pair connectivity estimators (coherence and the phase-synchrony
family) and construction of the electrode graph used by the GCN variant.
"""
import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .numcore import ShapeError
from .signal import (
    DEFAULT_BAND_HIGH,
    DEFAULT_BAND_LOW,
    DEFAULT_OVERLAP,
    analytic_signal,
    check_band,
    cross_spectral_matrix,
    edge_trim,
    fir_bandpass,
)

logger = logging.getLogger(__name__)

PHASE_METHODS = ("plv", "iplv", "pli", "dpli", "wpli", "dwpli")
ESTIMATORS = ("coh",) + PHASE_METHODS
_DIAGONAL = {"coh": 1.0, "plv": 1.0, "dpli": 0.5}


class ConnectivityError(ValueError):
    pass


@dataclass
class ConnectivityGraph:
    adjacency: np.ndarray
    estimator: str
    band: Tuple[float, float]
    directed: bool = False
    trials_used: int = 0
    clamped: int = 0
    issues: List[Dict[str, str]] = field(default_factory=list)

    def checksum(self) -> str:
        return hashlib.sha1(np.ascontiguousarray(self.adjacency).tobytes()).hexdigest()


def _check_method(method: str):
    if method not in ESTIMATORS:
        raise ConnectivityError(f"unknown estimator {method!r}; expected one of {', '.join(ESTIMATORS)}")


def _assemble(full: np.ndarray, method: str) -> np.ndarray:
    # upper triangle is authoritative; the lower one mirrors (or complements for dpli)
    n = full.shape[0]
    upper = np.triu_indices(n, 1)
    out = np.zeros_like(full)
    out[upper] = full[upper]
    out[upper[1], upper[0]] = 1.0 - full[upper] if method == "dpli" else full[upper]
    np.fill_diagonal(out, _DIAGONAL.get(method, 0.0))
    return out


# -----------------------------
# Coherence
# -----------------------------

def coherence_matrix(trial, fs: float, band: Tuple[float, float] = (DEFAULT_BAND_LOW, DEFAULT_BAND_HIGH),
                     seg_len: Optional[int] = None, overlap: float = DEFAULT_OVERLAP) -> np.ndarray:
    """Mean in-band magnitude-squared coherence |Gxy|² / (Gxx Gyy) for every channel pair."""
    trial = np.asarray(trial, dtype=np.float64)
    seg = int(seg_len or round(fs))
    if trial.shape[-1] < 2 * seg:
        raise ShapeError(f"coherence needs at least {2 * seg} samples, got {trial.shape[-1]}")
    freqs, g = cross_spectral_matrix(trial, fs, seg, overlap)
    mask = (freqs >= band[0]) & (freqs <= band[1])
    if not np.any(mask):
        raise ConnectivityError(f"no frequency bins inside band {band} at resolution {fs / seg:.3f} Hz")
    g = g[..., mask]
    power = np.real(np.diagonal(g, axis1=0, axis2=1)).T
    denom = power[:, None, :] * power[None, :, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        coh = np.where(denom > 0, np.abs(g) ** 2 / denom, 0.0)
    return _assemble(np.clip(coh, 0.0, 1.0).mean(axis=-1), "coh")


def coherence(x, y, fs: float, band: Tuple[float, float] = (DEFAULT_BAND_LOW, DEFAULT_BAND_HIGH),
              seg_len: Optional[int] = None, overlap: float = DEFAULT_OVERLAP) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"coherence needs equal lengths, got {x.shape} and {y.shape}")
    return float(coherence_matrix(np.stack([x, y]), fs, band, seg_len, overlap)[0, 1])


# -----------------------------
# Phase synchrony
# -----------------------------

def phase_matrix(trial, fs: float, band: Tuple[float, float] = (DEFAULT_BAND_LOW, DEFAULT_BAND_HIGH),
                 method: str = "plv", taps: Optional[int] = None) -> Tuple[np.ndarray, int]:
    """
    Phase-based estimator for every channel pair of a D x T trial.

    Signals are band-passed, turned into analytic signals and trimmed by
    ⌈fs/4⌉ samples at both ends. With Δφ = φ_i - φ_j wrapped to
    [-π, π) and Im S = |z_i||z_j|·sin Δφ, a positive Δφ means channel i
    leads. Returns the matrix and the number of dwPLI entries clamped up to
    zero.
    """
    if method not in PHASE_METHODS:
        raise ConnectivityError(f"unknown phase method {method!r}")
    trial = np.asarray(trial, dtype=np.float64)
    if trial.ndim != 2:
        raise ShapeError(f"trial must be D x T, got {trial.shape}")
    check_band(fs, band[0], band[1])

    cut = edge_trim(fs)
    if trial.shape[-1] <= 2 * cut + 1:
        raise ShapeError(f"{trial.shape[-1]} samples leave nothing after trimming {cut} at each edge")
    z = analytic_signal(fir_bandpass(trial, fs, band[0], band[1], taps), band).values[:, cut:-cut]
    if np.any(np.max(np.abs(z), axis=-1) == 0.0):
        raise ConnectivityError(f"a channel has no energy in band {band}")

    # angle differences from per-channel phases vanish exactly for identical channels
    phase = np.angle(z)
    amplitude = np.abs(z)
    dphi = np.mod(phase[:, None, :] - phase[None, :, :] + np.pi, 2.0 * np.pi) - np.pi
    clamped = 0

    if method in ("plv", "iplv"):
        locked = np.exp(1j * dphi).mean(axis=-1)
        full = np.abs(locked) if method == "plv" else np.abs(locked.imag)
    elif method == "pli":
        full = np.abs(np.mean(np.sign(dphi), axis=-1))
    elif method == "dpli":
        full = np.mean(np.heaviside(dphi, 0.5), axis=-1)
    elif method == "wpli":
        im = amplitude[:, None, :] * amplitude[None, :, :] * np.sin(dphi)
        num = np.abs(im.mean(axis=-1))
        den = np.abs(im).mean(axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            full = np.where(den > 0, num / den, 0.0)
    else:
        im = amplitude[:, None, :] * amplitude[None, :, :] * np.sin(dphi)
        sum_sq = np.sum(im ** 2, axis=-1)
        num = np.sum(im, axis=-1) ** 2 - sum_sq
        den = np.sum(np.abs(im), axis=-1) ** 2 - sum_sq
        with np.errstate(divide="ignore", invalid="ignore"):
            full = np.where(den > 0, num / den, 0.0)
        off_diagonal = ~np.eye(full.shape[0], dtype=bool)
        clamped = int(np.sum((full < 0) & off_diagonal) // 2)
        full = np.clip(full, 0.0, 1.0)

    return _assemble(full, method), clamped


def phase_metric(x, y, fs: float, band: Tuple[float, float] = (DEFAULT_BAND_LOW, DEFAULT_BAND_HIGH),
                 method: str = "plv", taps: Optional[int] = None) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"phase_metric needs equal lengths, got {x.shape} and {y.shape}")
    matrix, _ = phase_matrix(np.stack([x, y]), fs, band, method, taps)
    return float(matrix[0, 1])


# -----------------------------
# Graph construction
# -----------------------------

def connectivity_matrix(epochs, method: str = "plv",
                        band: Tuple[float, float] = (DEFAULT_BAND_LOW, DEFAULT_BAND_HIGH),
                        seg_len: Optional[int] = None, overlap: float = DEFAULT_OVERLAP,
                        taps: Optional[int] = None) -> ConnectivityGraph:
    """Pairwise estimator averaged over every trial of ``epochs`` (both classes)."""
    _check_method(method)
    if epochs.n_trials < 1:
        raise ConnectivityError("connectivity needs at least one trial")
    if epochs.n_channels < 2:
        raise ConnectivityError("connectivity needs at least two channels")

    total = np.zeros((epochs.n_channels, epochs.n_channels))
    clamped = 0
    for trial in epochs.trials:
        if method == "coh":
            total += coherence_matrix(trial, epochs.fs, band, seg_len, overlap)
        else:
            matrix, trial_clamped = phase_matrix(trial, epochs.fs, band, method, taps)
            total += matrix
            clamped += trial_clamped
    adjacency = _assemble(total / epochs.n_trials, method)

    issues: List[Dict[str, str]] = []
    if clamped:
        message = f"dwpli clamped {clamped} negative pair estimate(s) to 0"
        logger.warning(message)
        issues.append({"severity": "warning", "component": "connectivity", "message": message})

    logger.info("connectivity estimator=%s band=%s trials=%s", method, band, epochs.n_trials)
    return ConnectivityGraph(
        adjacency=adjacency,
        estimator=method,
        band=(float(band[0]), float(band[1])),
        directed=method == "dpli",
        trials_used=epochs.n_trials,
        clamped=clamped,
        issues=issues,
    )


def graph_normalize(graph: ConnectivityGraph, self_loops: bool = False, threshold: float = 0.0) -> np.ndarray:
    """
    Row-stochastic neighbour weights. dPLI is folded to |A - 0.5|·2 first,
    entries below ``threshold`` are dropped, and rows left without neighbours
    stay all-zero so the node aggregates only itself; those are recorded as a
    warning in ``graph.issues``.
    """
    adjacency = np.array(graph.adjacency, dtype=np.float64)
    if adjacency.ndim != 2 or adjacency.shape[0] != adjacency.shape[1]:
        raise ShapeError(f"adjacency must be square, got {adjacency.shape}")
    if graph.directed:
        adjacency = np.abs(adjacency - 0.5) * 2.0
    np.fill_diagonal(adjacency, 1.0 if self_loops else 0.0)
    adjacency[adjacency < threshold] = 0.0

    sums = adjacency.sum(axis=1)
    isolated = sums <= 0.0
    if np.any(isolated):
        message = (f"{int(isolated.sum())} isolated node(s) after thresholding at {threshold}; "
                   "using self-only aggregation")
        logger.warning(message)
        issue = {"severity": "warning", "component": "connectivity", "message": message}
        if issue not in graph.issues:
            graph.issues.append(issue)
    safe = np.where(isolated, 1.0, sums)
    return adjacency / safe[:, None]


# -----------------------------
# Files
# -----------------------------

def write_graph_csv(path: str, adjacency: np.ndarray, channel_names: Sequence[str]):
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(list(channel_names))
        for row in np.asarray(adjacency):
            writer.writerow([repr(float(value)) for value in row])


def read_graph_csv(path: str) -> Tuple[List[str], np.ndarray]:
    with open(path, "r", encoding="utf-8", newline="") as handle:
        rows = list(csv.reader(handle))
    if not rows:
        raise ConnectivityError(f"{path}: empty graph file")
    names, values = rows[0], np.array([[float(v) for v in row] for row in rows[1:]])
    if values.shape != (len(names), len(names)):
        raise ConnectivityError(f"{path}: {values.shape} matrix for {len(names)} channels")
    return names, values


def write_graph_sidecar(path: str, graph: ConnectivityGraph):
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(
            {"estimator": graph.estimator, "band": list(graph.band), "trials_used": graph.trials_used},
            handle,
            indent=2,
        )
