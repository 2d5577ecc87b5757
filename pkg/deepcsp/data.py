"""
Epoch container, the "EEGE" epoch file format, train/test splitting and the
synthetic two-class EEG generator used as ground truth by the test-suite.

EEGE layout (little endian):
    magic "EEGE" | version u16 | flags u16 | N u32 | D u16 | T u32 | fs f32
    | labels N x u8 | channel names (u16 length + UTF-8 bytes) x D
    | positions D x 2 f32 (only when flags bit 0 is set)
    | data f32, trial-major, then channel-major, then time
"""
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .signal import fir_bandpass

logger = logging.getLogger(__name__)

MAGIC = b"EEGE"
FORMAT_VERSION = 1
FLAG_POSITIONS = 0x0001
_HEADER = struct.Struct("<4sHHIHIf")


class EpochFormatError(ValueError):
    pass


class BadMagicError(EpochFormatError):
    pass


class VersionMismatchError(EpochFormatError):
    pass


class TruncatedPayloadError(EpochFormatError):
    pass


class InconsistentEpochsError(EpochFormatError):
    pass


# -----------------------------
# Container
# -----------------------------

@dataclass
class EpochSet:
    trials: np.ndarray
    labels: np.ndarray
    fs: float
    channel_names: List[str]
    channel_positions: Optional[np.ndarray] = None

    def __post_init__(self):
        self.trials = np.asarray(self.trials, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.channel_names = [str(name) for name in self.channel_names]
        self.fs = float(self.fs)

        if self.trials.ndim != 3:
            raise InconsistentEpochsError(f"trials must be N x D x T, got shape {self.trials.shape}")
        n_trials, n_channels, n_samples = self.trials.shape
        if n_channels == 0 or n_samples == 0:
            raise InconsistentEpochsError(f"empty trial geometry D={n_channels} T={n_samples}")
        if self.labels.shape != (n_trials,):
            raise InconsistentEpochsError(f"{self.labels.size} labels for {n_trials} trials")
        if not np.all(np.isin(self.labels, (0, 1))):
            raise InconsistentEpochsError("labels must be 0 or 1")
        if not (np.isfinite(self.fs) and self.fs > 0):
            raise InconsistentEpochsError(f"sampling rate must be positive, got {self.fs}")
        if len(self.channel_names) != n_channels:
            raise InconsistentEpochsError(f"{len(self.channel_names)} channel names for {n_channels} channels")
        if self.channel_positions is not None:
            self.channel_positions = np.asarray(self.channel_positions, dtype=np.float64)
            if self.channel_positions.shape != (n_channels, 2):
                raise InconsistentEpochsError(
                    f"channel positions must be {n_channels} x 2, got {self.channel_positions.shape}"
                )

    @property
    def n_trials(self) -> int:
        return self.trials.shape[0]

    @property
    def n_channels(self) -> int:
        return self.trials.shape[1]

    @property
    def n_samples(self) -> int:
        return self.trials.shape[2]

    def class_counts(self) -> Tuple[int, int]:
        return int(np.sum(self.labels == 0)), int(np.sum(self.labels == 1))

    def subset(self, indices: Sequence[int]) -> "EpochSet":
        indices = np.asarray(indices, dtype=np.int64)
        return EpochSet(
            trials=self.trials[indices],
            labels=self.labels[indices],
            fs=self.fs,
            channel_names=list(self.channel_names),
            channel_positions=self.channel_positions,
        )

    def flip_labels(self) -> "EpochSet":
        return EpochSet(self.trials, 1 - self.labels, self.fs, list(self.channel_names), self.channel_positions)

    def with_positions(self, positions: Dict[str, Sequence[float]]) -> "EpochSet":
        missing = [name for name in self.channel_names if name not in positions]
        if missing:
            raise InconsistentEpochsError(f"missing positions for channels: {', '.join(missing)}")
        coords = np.array([positions[name][:2] for name in self.channel_names], dtype=np.float64)
        return EpochSet(self.trials, self.labels, self.fs, list(self.channel_names), coords)


# -----------------------------
# Montage
# -----------------------------

_LAPLACIAN_CENTRES = {"C3": (-0.5, 0.0), "Cz": (0.0, 0.0), "C4": (0.5, 0.0)}
_LAPLACIAN_OFFSETS = {"": (0.0, 0.0), "a": (0.0, 0.1), "p": (0.0, -0.1), "l": (-0.1, 0.0), "r": (0.1, 0.0)}


def standard_montage(n_channels: int) -> Tuple[List[str], np.ndarray]:
    """
    Names and 2-D scalp coordinates. Fifteen channels give three Laplacian
    groups around C3, Cz and C4; other counts fall back to a circle.
    """
    if n_channels == 15:
        names: List[str] = []
        coords: List[Tuple[float, float]] = []
        for centre, (cx, cy) in _LAPLACIAN_CENTRES.items():
            for suffix, (dx, dy) in _LAPLACIAN_OFFSETS.items():
                names.append(centre + suffix)
                coords.append((cx + dx, cy + dy))
        return names, np.array(coords)

    angles = 2.0 * np.pi * np.arange(n_channels) / max(n_channels, 1)
    names = [f"Ch{idx + 1}" for idx in range(n_channels)]
    return names, np.stack([np.cos(angles), np.sin(angles)], axis=1) * 0.5


def standard_positions(names: Sequence[str]) -> Dict[str, List[float]]:
    """Known C3/Cz/C4 Laplacian names get their table coordinates; others sit on a circle."""
    known: Dict[str, Tuple[float, float]] = {}
    for centre, (cx, cy) in _LAPLACIAN_CENTRES.items():
        for suffix, (dx, dy) in _LAPLACIAN_OFFSETS.items():
            known[centre + suffix] = (cx + dx, cy + dy)

    _, fallback = standard_montage(len(names))
    return {
        name: list(known[name]) if name in known else [float(fallback[idx, 0]), float(fallback[idx, 1])]
        for idx, name in enumerate(names)
    }


def read_channel_positions(path: str) -> Dict[str, List[float]]:
    with open(path, "r", encoding="utf-8") as handle:
        raw = json.load(handle)
    if not isinstance(raw, dict):
        raise InconsistentEpochsError(f"{path}: positions sidecar must map channel name to [x, y]")
    positions: Dict[str, List[float]] = {}
    for name, coords in raw.items():
        if not isinstance(coords, (list, tuple)) or len(coords) < 2:
            raise InconsistentEpochsError(f"{path}: bad coordinates for channel {name!r}")
        positions[str(name)] = [float(coords[0]), float(coords[1])]
    return positions


# -----------------------------
# EEGE file format
# -----------------------------

def encode_epochs(epochs: EpochSet) -> bytes:
    flags = FLAG_POSITIONS if epochs.channel_positions is not None else 0
    parts = [
        _HEADER.pack(MAGIC, FORMAT_VERSION, flags, epochs.n_trials, epochs.n_channels,
                     epochs.n_samples, epochs.fs),
        epochs.labels.astype(np.uint8).tobytes(),
    ]
    for name in epochs.channel_names:
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
    if epochs.channel_positions is not None:
        parts.append(epochs.channel_positions.astype("<f4").tobytes())
    parts.append(epochs.trials.astype("<f4").tobytes())
    return b"".join(parts)


def write_epochs(path: str, epochs: EpochSet):
    payload = encode_epochs(epochs)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as handle:
        handle.write(payload)
    os.replace(tmp_path, path)
    logger.info("wrote epochs path=%s trials=%s channels=%s samples=%s",
                path, epochs.n_trials, epochs.n_channels, epochs.n_samples)


class _Cursor:
    def __init__(self, payload: bytes, source: str):
        self.payload = payload
        self.source = source
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if size < 0 or self.offset + size > len(self.payload):
            raise TruncatedPayloadError(f"{self.source}: truncated payload while reading {what}")
        chunk = self.payload[self.offset:self.offset + size]
        self.offset += size
        return chunk

    @property
    def remaining(self) -> int:
        return len(self.payload) - self.offset


def decode_epochs(payload: bytes, source: str = "<bytes>") -> EpochSet:
    cursor = _Cursor(payload, source)
    magic = cursor.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"{source}: bad magic {magic!r}")
    rest = cursor.take(_HEADER.size - 4, "header")
    _, version, flags, n_trials, n_channels, n_samples, fs = _HEADER.unpack(magic + rest)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{source}: version {version}, expected {FORMAT_VERSION}")
    if flags & ~FLAG_POSITIONS:
        raise InconsistentEpochsError(f"{source}: unknown flags 0x{flags:04x}")
    if n_channels == 0 or n_samples == 0:
        raise InconsistentEpochsError(f"{source}: empty geometry D={n_channels} T={n_samples}")
    if not (np.isfinite(fs) and fs > 0):
        raise InconsistentEpochsError(f"{source}: bad sampling rate {fs}")

    labels = np.frombuffer(cursor.take(n_trials, "labels"), dtype=np.uint8)
    if np.any(labels > 1):
        raise InconsistentEpochsError(f"{source}: labels must be 0 or 1")

    names: List[str] = []
    for idx in range(n_channels):
        (length,) = struct.unpack("<H", cursor.take(2, f"channel name {idx} length"))
        try:
            names.append(cursor.take(length, f"channel name {idx}").decode("utf-8"))
        except UnicodeDecodeError:
            raise InconsistentEpochsError(f"{source}: channel name {idx} is not valid UTF-8")

    positions = None
    if flags & FLAG_POSITIONS:
        raw = cursor.take(n_channels * 2 * 4, "channel positions")
        positions = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(n_channels, 2)

    expected = n_trials * n_channels * n_samples * 4
    if cursor.remaining < expected:
        raise TruncatedPayloadError(
            f"{source}: truncated payload, {cursor.remaining} data bytes for {expected} expected"
        )
    if cursor.remaining > expected:
        raise InconsistentEpochsError(
            f"{source}: {cursor.remaining - expected} trailing bytes after N={n_trials} D={n_channels} T={n_samples}"
        )
    data = np.frombuffer(cursor.take(expected, "data"), dtype="<f4").astype(np.float64)

    return EpochSet(
        trials=data.reshape(n_trials, n_channels, n_samples),
        labels=labels.astype(np.int64),
        fs=float(fs),
        channel_names=names,
        channel_positions=positions,
    )


def read_epochs(path: str) -> EpochSet:
    with open(path, "rb") as handle:
        payload = handle.read()
    return decode_epochs(payload, source=path)


# -----------------------------
# Splitting
# -----------------------------

def split(epochs: EpochSet, fraction: float, seed: int = 42,
          stratified: bool = True) -> Tuple[EpochSet, EpochSet]:
    """
    Disjoint, exhaustive split; ``fraction`` of the trials (per class when
    stratified) go to the first part. Both parts keep the original order.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"split fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)

    if stratified:
        first: List[int] = []
        for label in (0, 1):
            members = np.flatnonzero(epochs.labels == label)
            take = int(round(fraction * members.size))
            if take == 0 or take == members.size:
                raise ValueError(
                    f"stratified split leaves class {label} empty on one side "
                    f"({members.size} trials, fraction {fraction})"
                )
            first.extend(rng.permutation(members)[:take].tolist())
        first_idx = np.sort(np.asarray(first, dtype=np.int64))
    else:
        take = int(round(fraction * epochs.n_trials))
        first_idx = np.sort(rng.permutation(epochs.n_trials)[:take])

    second_idx = np.setdiff1d(np.arange(epochs.n_trials), first_idx)
    return epochs.subset(first_idx), epochs.subset(second_idx)


# -----------------------------
# Synthetic generator
# -----------------------------

def default_profiles(n_sources: int) -> np.ndarray:
    profiles = np.ones((2, n_sources))
    profiles[0, 0], profiles[1, 0] = 4.0, 1.0
    if n_sources > 1:
        profiles[0, 1], profiles[1, 1] = 1.0, 4.0
    return profiles


@dataclass
class SynthSpec:
    n_channels: int = 15
    n_samples: int = 512
    fs: float = 128.0
    trials_per_class: int = 50
    mixing: Optional[np.ndarray] = None
    mixing_kind: str = "orthonormal"
    profiles: Optional[np.ndarray] = None
    noise: float = 0.1
    band: Tuple[float, float] = (8.0, 30.0)
    seed: int = 42


@dataclass
class SynthTruth:
    mixing: np.ndarray
    profiles: np.ndarray
    issues: List[Dict[str, str]] = field(default_factory=list)

    @property
    def unmixing(self) -> np.ndarray:
        return np.linalg.inv(self.mixing)


def _planted_mixing(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.mixing is not None:
        mixing = np.asarray(spec.mixing, dtype=np.float64)
        if mixing.shape != (spec.n_channels, spec.n_channels):
            raise ValueError(f"mixing must be {spec.n_channels} x {spec.n_channels}, got {mixing.shape}")
        return mixing
    if spec.mixing_kind == "identity":
        return np.eye(spec.n_channels)
    if spec.mixing_kind != "orthonormal":
        raise ValueError(f"unknown mixing kind {spec.mixing_kind!r}")
    q, r = np.linalg.qr(rng.standard_normal((spec.n_channels, spec.n_channels)))
    return q * np.sign(np.diag(r))


def synth_generate(spec: SynthSpec) -> Tuple[EpochSet, SynthTruth]:
    """
    trial = M · S + σ · noise, where source i is band-limited noise rescaled to
    the variance its class prescribes.
    """
    if spec.trials_per_class < 1 or spec.n_channels < 2:
        raise ValueError("synthetic set needs at least 1 trial per class and 2 channels")
    rng = np.random.default_rng(spec.seed)
    mixing = _planted_mixing(spec, rng)

    profiles = default_profiles(spec.n_channels) if spec.profiles is None else np.asarray(spec.profiles, float)
    if profiles.shape != (2, spec.n_channels):
        raise ValueError(f"profiles must be 2 x {spec.n_channels}, got {profiles.shape}")
    if np.any(profiles <= 0):
        raise ValueError("source variance profiles must be positive")

    issues: List[Dict[str, str]] = []
    differing = int(np.sum(~np.isclose(profiles[0], profiles[1])))
    if differing < 2:
        message = f"variance profiles differ in {differing} source(s); CSP has little signal to find"
        logger.warning(message)
        issues.append({"severity": "warning", "component": "synth", "message": message})

    labels = rng.permutation(np.repeat([0, 1], spec.trials_per_class))
    n_trials = labels.size
    raw = rng.standard_normal((n_trials, spec.n_channels, spec.n_samples))
    sources = fir_bandpass(raw, spec.fs, spec.band[0], spec.band[1])
    sources /= sources.std(axis=-1, keepdims=True)
    sources *= np.sqrt(profiles[labels])[:, :, None]

    trials = np.einsum("ij,njt->nit", mixing, sources)
    trials += spec.noise * rng.standard_normal(trials.shape)

    names, positions = standard_montage(spec.n_channels)
    epochs = EpochSet(trials=trials, labels=labels, fs=spec.fs, channel_names=names,
                      channel_positions=positions)
    logger.info("synthetic set trials=%s channels=%s samples=%s fs=%s seed=%s",
                n_trials, spec.n_channels, spec.n_samples, spec.fs, spec.seed)
    return epochs, SynthTruth(mixing=mixing, profiles=profiles, issues=issues)
