"""
Spectral and analytic-signal helpers used by connectivity estimation and
preprocessing: FFT, Hilbert analytic signal, Welch cross-spectral density and
zero-phase FIR band-pass filtering.
"""
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.signal

from deepcsp_config import env_float, get_config_value

from .numcore import NonFiniteError, ShapeError, check_finite

# -----------------------------
# Defaults
# -----------------------------

DEFAULT_BAND_LOW = float(get_config_value("signal.band_low", env_float("DEEPCSP_BAND_LOW", 8.0)))
DEFAULT_BAND_HIGH = float(get_config_value("signal.band_high", env_float("DEEPCSP_BAND_HIGH", 30.0)))
DEFAULT_OVERLAP = float(get_config_value("signal.overlap", env_float("DEEPCSP_WELCH_OVERLAP", 0.5)))
MIN_TAPS = 129


class BandError(ValueError):
    pass


@dataclass
class AnalyticSignal:
    values: np.ndarray
    source_band: Optional[Tuple[float, float]] = None

    @property
    def phase(self) -> np.ndarray:
        return np.angle(self.values)

    @property
    def amplitude(self) -> np.ndarray:
        return np.abs(self.values)


def fft(x) -> np.ndarray:
    """Mixed-radix FFT of any length (no zero padding)."""
    x = np.asarray(x)
    if x.size < 1:
        raise ShapeError("fft needs at least one sample")
    check_finite(x, "fft input")
    return np.fft.fft(x, axis=-1)


def ifft(spectrum) -> np.ndarray:
    spectrum = np.asarray(spectrum)
    check_finite(spectrum, "ifft input")
    return np.fft.ifft(spectrum, axis=-1)


def analytic_multiplier(n_samples: int) -> np.ndarray:
    # keep DC (and Nyquist for even lengths), double positive bins, zero negative bins
    h = np.zeros(n_samples)
    h[0] = 1.0
    if n_samples % 2 == 0:
        h[n_samples // 2] = 1.0
        h[1:n_samples // 2] = 2.0
    else:
        h[1:(n_samples + 1) // 2] = 2.0
    return h


def analytic_signal(x, band: Optional[Tuple[float, float]] = None) -> AnalyticSignal:
    """Hilbert analytic signal along the last axis; the real part reproduces x."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 8:
        raise ShapeError(f"analytic_signal needs at least 8 samples, got {x.shape[-1]}")
    check_finite(x, "analytic_signal input")
    spectrum = np.fft.fft(x, axis=-1) * analytic_multiplier(x.shape[-1])
    return AnalyticSignal(values=np.fft.ifft(spectrum, axis=-1), source_band=band)


def instantaneous_phase(x) -> np.ndarray:
    return np.angle(analytic_signal(x).values)


def edge_trim(fs: float) -> int:
    """Samples dropped at both ends of an analytic signal before phase statistics."""
    return int(math.ceil(fs / 4.0))


def _welch_params(n_samples: int, fs: float, seg_len: Optional[int], overlap: float) -> Tuple[int, int]:
    seg_len = int(seg_len or round(fs))
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    if seg_len < 1 or seg_len > n_samples:
        raise ShapeError(f"need at least one full segment of {seg_len} samples, got {n_samples}")
    return seg_len, int(seg_len * overlap)


def welch_csd(x, y, fs: float, seg_len: Optional[int] = None,
              overlap: float = DEFAULT_OVERLAP) -> Tuple[np.ndarray, np.ndarray]:
    """
    Welch cross-spectral density Gxy = <X · conj(Y)> with a Hann window.

    A delay of y behind x shows up as a positive phase of Gxy.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"welch_csd needs equal lengths, got {x.shape} and {y.shape}")
    check_finite(x, "welch_csd x")
    check_finite(y, "welch_csd y")
    nperseg, noverlap = _welch_params(x.shape[-1], fs, seg_len, overlap)
    # one canonical argument order so that swapping x and y conjugates exactly
    swapped = x.tobytes() > y.tobytes()
    first, second = (x, y) if swapped else (y, x)
    # scipy conjugates its first argument
    freqs, gxy = scipy.signal.csd(
        first, second, fs=fs, window="hann", nperseg=nperseg, noverlap=noverlap, axis=-1,
    )
    gxy = np.asarray(gxy, dtype=np.complex128)
    return freqs, np.conj(gxy) if swapped else gxy


def cross_spectral_matrix(trial, fs: float, seg_len: Optional[int] = None,
                          overlap: float = DEFAULT_OVERLAP) -> Tuple[np.ndarray, np.ndarray]:
    """All channel pairs of a (D, T) trial at once: G[i, j] = Welch <X_i · conj(X_j)>."""
    trial = np.asarray(trial, dtype=np.float64)
    if trial.ndim != 2:
        raise ShapeError(f"cross_spectral_matrix expects (D, T), got {trial.shape}")
    check_finite(trial, "cross_spectral_matrix input")
    nperseg, noverlap = _welch_params(trial.shape[-1], fs, seg_len, overlap)
    freqs, g = scipy.signal.csd(
        trial[None, :, :], trial[:, None, :], fs=fs, window="hann",
        nperseg=nperseg, noverlap=noverlap, axis=-1,
    )
    g = np.asarray(g, dtype=np.complex128)
    # lower triangle mirrors the upper one; the diagonal is real
    rows, cols = np.triu_indices(trial.shape[0], 1)
    g[cols, rows] = np.conj(g[rows, cols])
    diagonal = np.arange(trial.shape[0])
    g[diagonal, diagonal] = g[diagonal, diagonal].real
    return freqs, g


def default_taps(fs: float, low: float) -> int:
    taps = max(MIN_TAPS, int(math.ceil(3.3 * fs / low)))
    return taps if taps % 2 == 1 else taps + 1


def check_band(fs: float, low: float, high: float):
    if not (0.0 < low < high < fs / 2.0):
        raise BandError(f"invalid band ({low}, {high}) Hz for fs={fs} Hz")


def fir_bandpass(x, fs: float, low: float, high: float, taps: Optional[int] = None) -> np.ndarray:
    """Hamming-window FIR band-pass applied forward and backward (zero phase)."""
    check_band(fs, low, high)
    taps = int(taps or default_taps(fs, low))
    if taps % 2 == 0:
        raise BandError(f"tap count must be odd, got {taps}")
    x = np.asarray(x, dtype=np.float64)
    check_finite(x, "fir_bandpass input")

    coeffs = scipy.signal.firwin(taps, [low, high], pass_zero=False, fs=fs)
    padlen = min(3 * taps, x.shape[-1] - 1)
    return scipy.signal.filtfilt(coeffs, [1.0], x, axis=-1, padlen=padlen)


__all__ = [
    "AnalyticSignal", "BandError", "NonFiniteError", "analytic_signal", "cross_spectral_matrix",
    "edge_trim", "fft", "fir_bandpass", "ifft", "instantaneous_phase", "welch_csd",
]
