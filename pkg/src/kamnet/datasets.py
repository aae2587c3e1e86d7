"""Epoch-level EEG data: containers, epoching, splits, synthetic data, files.

Labels are encoded {0: positive, 1: neutral, 2: negative} everywhere.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import SEED_ELECTRODES, FormatError, read_header_and_blob, write_header_and_blob

LABEL_NAMES = ("positive", "neutral", "negative")
EPOCH_MAGIC = "KAM-EPOCHS"
EPOCH_VERSION = 1

# synthetic generator: class -> (frequency in Hz, electrode names carrying it)
SYNTH_FREQS = (6.0, 10.0, 22.0)
SYNTH_SITES = (
    ("FP1", "FPZ", "FP2", "AF3", "AF4", "F7", "F5", "F3", "F1", "FZ", "F2", "F4", "F6", "F8"),
    ("FC3", "FC1", "FCZ", "FC2", "FC4", "C5", "C3", "C1", "CZ", "C2", "C4", "C6"),
    ("PO7", "PO5", "PO3", "POZ", "PO4", "PO6", "PO8", "CB1", "O1", "OZ", "O2", "CB2"),
)


@dataclass
class EpochSet:
    data: np.ndarray                 # (N, C, T) float32
    labels: np.ndarray               # (N,) int64 in {0, 1, 2}
    fs: int
    subject: str = "S00"
    electrodes: tuple[str, ...] = field(default=SEED_ELECTRODES)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.electrodes = tuple(self.electrodes)
        if self.data.ndim != 3:
            raise ValueError(f"epoch data must be (N, C, T), got {self.data.shape}")
        N, C, T = self.data.shape
        if len(self.labels) != N:
            raise ValueError(f"{len(self.labels)} labels for {N} epochs")
        if len(self.electrodes) != C:
            raise ValueError(f"{len(self.electrodes)} electrode names for {C} channels")
        if N and not np.isin(self.labels, (0, 1, 2)).all():
            raise ValueError("labels must lie in {0, 1, 2}")
        if T != self.fs:
            raise ValueError(f"epochs must last one second: T={T} but fs={self.fs}")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "EpochSet":
        idx = np.asarray(idx, dtype=np.int64)
        return EpochSet(self.data[idx], self.labels[idx], self.fs, self.subject, self.electrodes)


def epoch_signal(continuous: np.ndarray, fs: int) -> np.ndarray:
    """Cut a (C, L) recording into floor(L / fs) non-overlapping 1 s epochs."""
    continuous = np.asarray(continuous)
    C, L = continuous.shape
    if L < fs:
        raise ValueError(f"recording of {L} samples is shorter than one epoch ({fs})")
    n = L // fs
    return continuous[:, :n * fs].reshape(C, n, fs).transpose(1, 0, 2).copy()


def zscore(data: np.ndarray) -> np.ndarray:
    """Per-epoch, per-channel standardisation of (N, C, T) data."""
    x = np.asarray(data, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    sd = x.std(axis=-1, keepdims=True)
    sd[sd == 0] = 1.0
    return ((x - mu) / sd).astype(np.float32)


def normalized(epochs: EpochSet) -> EpochSet:
    return EpochSet(zscore(epochs.data), epochs.labels, epochs.fs, epochs.subject, epochs.electrodes)


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitPlan:
    validation: np.ndarray
    folds: tuple[np.ndarray, ...]
    seed: int

    def test_indices(self, k: int) -> np.ndarray:
        return self.folds[k]

    def train_indices(self, k: int) -> np.ndarray:
        return np.sort(np.concatenate([f for i, f in enumerate(self.folds) if i != k]))


def _largest_remainder(counts: np.ndarray, total: int) -> np.ndarray:
    share = counts * total / counts.sum()
    base = np.floor(share).astype(np.int64)
    left = total - base.sum()
    order = np.lexsort((np.arange(len(counts)), -(share - base)))
    base[order[:left]] += 1
    return base


def make_split(epochs: EpochSet | np.ndarray, seed: int, n_folds: int = 5, val_fraction: float = 1 / 6) -> SplitPlan:
    """Stratified held-out validation set (round(N/6)) + stratified 5-fold partition of the rest."""
    labels = epochs.labels if isinstance(epochs, EpochSet) else np.asarray(epochs)
    N = len(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if (counts < n_folds + 1).any():
        bad = classes[counts < n_folds + 1].tolist()
        raise ValueError(f"classes {bad} have fewer than {n_folds + 1} samples")
    if N < 30:
        raise ValueError(f"need at least 30 epochs to split, got {N}")
    rng = np.random.default_rng(seed)
    n_val = _largest_remainder(counts, int(round(N * val_fraction)))
    val, folds = [], [[] for _ in range(n_folds)]
    offset = 0
    for c, nv in zip(classes, n_val):
        idx = rng.permutation(np.flatnonzero(labels == c))
        val.append(idx[:nv])
        for i, j in enumerate(idx[nv:]):
            folds[(offset + i) % n_folds].append(j)
        offset = (offset + len(idx) - nv) % n_folds
    return SplitPlan(np.sort(np.concatenate(val)), tuple(np.sort(np.asarray(f, dtype=np.int64)) for f in folds), seed)


# ---------------------------------------------------------------------------
# synthetic data


def _pink_noise(rng: np.random.Generator, shape, fs: int) -> np.ndarray:
    T = shape[-1]
    spectrum = rng.standard_normal(shape[:-1] + (T // 2 + 1,)) + 1j * rng.standard_normal(shape[:-1] + (T // 2 + 1,))
    f = np.fft.rfftfreq(T, d=1 / fs)
    f[0] = f[1]
    x = np.fft.irfft(spectrum / np.sqrt(f), n=T)
    return x / x.std(axis=-1, keepdims=True)


def synth_generate(n_per_class: int, fs: int = 200, seed: int = 0, snr: float = 4.0,
                   subject: str = "SYN", electrodes=SEED_ELECTRODES) -> EpochSet:
    """Three-class synthetic EEG.

    Class c adds a sinusoid at ``SYNTH_FREQS[c]`` (random phase per epoch and
    channel) on the electrodes ``SYNTH_SITES[c]`` over unit-RMS 1/f noise.
    ``snr`` is the sinusoid RMS over the noise RMS on those electrodes.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be at least 1")
    rng = np.random.default_rng(seed)
    electrodes = tuple(electrodes)
    C, T, N = len(electrodes), fs, 3 * n_per_class
    labels = np.repeat(np.arange(3), n_per_class)
    labels = labels[rng.permutation(N)]
    data = _pink_noise(rng, (N, C, T), fs)
    t = np.arange(T) / fs
    phases = rng.uniform(0, 2 * np.pi, size=(N, C))
    amp = np.sqrt(2.0) * snr
    for c, (freq, sites) in enumerate(zip(SYNTH_FREQS, SYNTH_SITES)):
        ch = [electrodes.index(s) for s in sites if s in electrodes]
        rows = np.flatnonzero(labels == c)
        sig = amp * np.sin(2 * np.pi * freq * t[None, None, :] + phases[rows][:, ch, None])
        data[np.ix_(rows, ch)] += sig
    return EpochSet(data.astype(np.float32), labels, fs, subject, electrodes)


def bandpower_features(epochs: EpochSet) -> np.ndarray:
    """Mean spectral power at each class frequency over its electrode set, (N, 3)."""
    power = np.abs(np.fft.rfft(epochs.data.astype(np.float64), axis=-1)) ** 2
    freqs = np.fft.rfftfreq(epochs.data.shape[-1], d=1 / epochs.fs)
    feats = []
    for freq, sites in zip(SYNTH_FREQS, SYNTH_SITES):
        ch = [epochs.electrodes.index(s) for s in sites if s in epochs.electrodes]
        b = int(np.argmin(np.abs(freqs - freq)))
        feats.append(power[:, ch, b].mean(axis=1))
    return np.log(np.stack(feats, axis=1))


# ---------------------------------------------------------------------------
# epoch file: JSON header line padded to ``blob_offset`` + N*C*T <f4 blob


def save_epochs(epochs: EpochSet, path) -> None:
    N, C, T = epochs.data.shape
    header = {
        "magic": EPOCH_MAGIC,
        "version": EPOCH_VERSION,
        "N": N, "C": C, "T": T,
        "fs": int(epochs.fs),
        "subject": epochs.subject,
        "electrodes": list(epochs.electrodes),
        "labels": [int(v) for v in epochs.labels],
        "dtype": "<f4",
    }
    write_header_and_blob(path, header, np.ascontiguousarray(epochs.data, dtype="<f4").tobytes())


def load_epochs(path) -> EpochSet:
    header, blob = read_header_and_blob(path, EPOCH_MAGIC)
    try:
        N, C, T = int(header["N"]), int(header["C"]), int(header["T"])
        fs, labels, electrodes = int(header["fs"]), header["labels"], header["electrodes"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: incomplete header ({exc})") from None
    if len(blob) != N * C * T * 4:
        raise FormatError(f"{path}: blob holds {len(blob)} bytes but header declares N={N}, C={C}, T={T}")
    if len(labels) != N or len(electrodes) != C:
        raise FormatError(f"{path}: header label/electrode lists disagree with N={N}, C={C}")
    data = np.frombuffer(blob, dtype="<f4").reshape(N, C, T).astype(np.float32)
    try:
        return EpochSet(data, np.asarray(labels, dtype=np.int64), fs, str(header.get("subject", "")), electrodes)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
