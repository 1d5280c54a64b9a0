"""Dataset ingestion and partitioning.

Sources: Speech-Commands-style WAV directories (16-bit PCM mono 16 kHz),
cached feature files in the SFLF format, and a seeded synthetic generator
with an easy (linearly separable) and a hard (convolution-favoring)
preset. Labels are the seven keyword classes one..five, silence, unknown.

SFLF feature files: magic "SFLF", u32 sample count, then per sample a u8
label followed by 650 little-endian float32 feature values (the flattened
[50, 13] map).
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mfcc import MfccConfig, mfcc_extract

CLASS_NAMES = ("one", "two", "three", "four", "five", "silence", "unknown")
UNKNOWN_LABEL = 6
CLIP_SAMPLES = 16000
FEATURE_SHAPE = (50, 13)
FEATURE_LEN = FEATURE_SHAPE[0] * FEATURE_SHAPE[1]

SFLF_MAGIC = b"SFLF"

# fixed prototype streams per difficulty; the user seed only drives the draws
_EASY_PROTO_SEED = 91101
_HARD_PROTO_SEED = 91102
_DRAW_STREAM = 5
_PARTITION_STREAM = 4
_VAL_SPLIT_STREAM = 3


class DataError(Exception):
    """Unreadable or malformed dataset input."""


@dataclass(frozen=True)
class Sample:
    features: np.ndarray  # [50, 13] float32
    label: int

    def __post_init__(self):
        if self.features.shape != FEATURE_SHAPE:
            raise ValueError(f"features must have shape {FEATURE_SHAPE}, got {self.features.shape}")
        if not 0 <= self.label < len(CLASS_NAMES):
            raise ValueError(f"label {self.label} out of range")


@dataclass
class Dataset:
    samples: list
    class_names: tuple = CLASS_NAMES
    provenance: str = "unknown"

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    def subset(self, indices) -> "Dataset":
        return Dataset(
            samples=[self.samples[i] for i in indices],
            class_names=self.class_names,
            provenance=self.provenance,
        )


def read_wav(path) -> np.ndarray:
    """Read a 16-bit PCM mono 16 kHz WAV file as int16 samples."""
    try:
        with wave.open(str(path), "rb") as wav:
            channels = wav.getnchannels()
            width = wav.getsampwidth()
            rate = wav.getframerate()
            frames = wav.readframes(wav.getnframes())
    except (wave.Error, EOFError, OSError) as exc:
        raise DataError(f"{path}: not a readable WAV file ({exc})") from exc
    if channels != 1:
        raise DataError(f"{path}: expected mono audio, got {channels} channels")
    if width != 2:
        raise DataError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    if rate != 16000:
        raise DataError(f"{path}: expected 16 kHz sample rate, got {rate}")
    return np.frombuffer(frames, dtype="<i2")


def fit_clip(audio: np.ndarray, length: int = CLIP_SAMPLES) -> np.ndarray:
    """Zero-pad at the end or truncate to exactly `length` samples."""
    if audio.size >= length:
        return audio[:length]
    out = np.zeros(length, dtype=audio.dtype)
    out[: audio.size] = audio
    return out


def label_for_folder(folder: str) -> int:
    try:
        return CLASS_NAMES.index(folder)
    except ValueError:
        return UNKNOWN_LABEL


def load_wav_corpus(root_dir, cfg: MfccConfig = MfccConfig()) -> Dataset:
    """Load root/<class>/*.wav into a feature dataset.

    Folders named after the seven classes map directly; any other folder
    feeds "unknown". Files are visited in lexicographic order so the same
    directory always yields the same dataset.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    samples = []
    for folder in sorted(p for p in root.iterdir() if p.is_dir()):
        label = label_for_folder(folder.name)
        for wav_path in sorted(folder.glob("*.wav")):
            audio = fit_clip(read_wav(wav_path))
            samples.append(Sample(features=mfcc_extract(audio, cfg), label=label))
    if not samples:
        raise DataError(f"{root}: no WAV files found under class folders")
    return Dataset(samples=samples, provenance="wav_corpus")


# ---------------------------------------------------------------------------
# synthetic stand-in for the private recording set


def _easy_prototypes() -> np.ndarray:
    rng = np.random.default_rng(_EASY_PROTO_SEED)
    return rng.normal(0.0, 1.0, size=(len(CLASS_NAMES),) + FEATURE_SHAPE)


def _hard_prototypes() -> np.ndarray:
    """Three unit-RMS 5x5 motifs per class.

    Hard classes share identical global statistics and differ only in
    which local patterns appear; the motifs are stamped at random
    positions per sample, so only a translation-tolerant model can
    exploit them and a linear readout stays near chance. 7 * 3 = 21
    motifs is more texture than a 16-channel first conv layer can cover
    while a 30-channel one can.
    """
    rng = np.random.default_rng(_HARD_PROTO_SEED)
    motifs = rng.normal(0.0, 1.0, size=(len(CLASS_NAMES), 3, 5, 5))
    return motifs / np.sqrt((motifs**2).mean(axis=(2, 3), keepdims=True))


def synth_dataset(seed: int, samples_per_class: int, difficulty: str) -> Dataset:
    """Deterministic synthetic feature dataset.

    Prototypes are fixed per difficulty preset; `seed` only controls the
    per-sample draws, so two seeds give fresh draws of the same classes.
    """
    if samples_per_class < 1:
        raise ValueError("samples_per_class must be >= 1")
    if difficulty == "easy":
        protos = _easy_prototypes()
        rng = np.random.default_rng([int(seed), _EASY_PROTO_SEED, _DRAW_STREAM])
        samples = []
        for label in range(len(CLASS_NAMES)):
            for _ in range(samples_per_class):
                feat = protos[label] + rng.normal(0.0, 0.35, size=FEATURE_SHAPE)
                samples.append(Sample(features=feat.astype(np.float32), label=label))
    elif difficulty == "hard":
        motifs = _hard_prototypes()
        rng = np.random.default_rng([int(seed), _HARD_PROTO_SEED, _DRAW_STREAM])
        h, w = FEATURE_SHAPE
        mh, mw = motifs.shape[2:]
        samples = []
        for label in range(len(CLASS_NAMES)):
            for _ in range(samples_per_class):
                feat = rng.normal(0.0, 0.7, size=FEATURE_SHAPE)
                for m in range(motifs.shape[1]):
                    r = int(rng.integers(0, h - mh + 1))
                    c = int(rng.integers(0, w - mw + 1))
                    feat[r : r + mh, c : c + mw] += 3.0 * motifs[label, m]
                samples.append(Sample(features=feat.astype(np.float32), label=label))
    else:
        raise ValueError(f"unknown difficulty {difficulty!r}; expected 'easy' or 'hard'")
    return Dataset(samples=samples, provenance="synthetic")


# ---------------------------------------------------------------------------
# splitting and partitioning


def split_train_val(ds: Dataset, seed: int, val_fraction: float = 0.1):
    """Stratified train/validation split.

    Per class, indices are shuffled with a seeded generator and the last
    floor(n * val_fraction) go to validation; classes too small to
    contribute keep all samples in training.
    """
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError("val_fraction must be in [0, 1)")
    rng = np.random.default_rng([int(seed), _VAL_SPLIT_STREAM])
    train_idx, val_idx = [], []
    for label in range(len(ds.class_names)):
        idx = [i for i, s in enumerate(ds.samples) if s.label == label]
        if not idx:
            continue
        order = rng.permutation(len(idx))
        idx = [idx[j] for j in order]
        n_val = int(len(idx) * val_fraction)
        train_idx.extend(idx[: len(idx) - n_val])
        val_idx.extend(idx[len(idx) - n_val :])
    return ds.subset(train_idx), ds.subset(val_idx)


def partition(ds: Dataset, num_clients: int, seed: int) -> list:
    """Seeded shuffle into `num_clients` near-equal IID shards.

    Shards are disjoint, cover the input, and differ in size by at most one.
    """
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    if num_clients > len(ds):
        raise ValueError(f"cannot split {len(ds)} samples across {num_clients} clients")
    rng = np.random.default_rng([int(seed), _PARTITION_STREAM])
    order = rng.permutation(len(ds))
    return [ds.subset(chunk) for chunk in np.array_split(order, num_clients)]


# ---------------------------------------------------------------------------
# SFLF feature files


def save_features(path, ds: Dataset):
    with open(path, "wb") as fh:
        fh.write(SFLF_MAGIC)
        fh.write(struct.pack("<I", len(ds)))
        for sample in ds:
            fh.write(struct.pack("<B", sample.label))
            fh.write(np.ascontiguousarray(sample.features, dtype="<f4").tobytes())


def load_features(path) -> Dataset:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if len(blob) < 8 or blob[:4] != SFLF_MAGIC:
        raise DataError(f"{path}: not an SFLF feature file")
    (count,) = struct.unpack_from("<I", blob, 4)
    record = 1 + 4 * FEATURE_LEN
    expected = 8 + count * record
    if len(blob) != expected:
        raise DataError(f"{path}: expected {expected} bytes for {count} samples, got {len(blob)}")
    samples = []
    offset = 8
    for i in range(count):
        label = blob[offset]
        feats = np.frombuffer(blob, dtype="<f4", count=FEATURE_LEN, offset=offset + 1)
        try:
            samples.append(Sample(features=feats.reshape(FEATURE_SHAPE).copy(), label=label))
        except ValueError as exc:
            raise DataError(f"{path}: sample {i}: {exc}") from exc
        offset += record
    return Dataset(samples=samples, provenance="feature_file")


def class_counts(ds: Dataset) -> list:
    counts = [0] * len(ds.class_names)
    for s in ds:
        counts[s.label] += 1
    return counts


def nearest_centroid_accuracy(train: Dataset, test: Dataset) -> float:
    """Independent sanity classifier: per-class mean feature map, nearest
    centroid by Euclidean distance."""
    centroids = {}
    for label in range(len(CLASS_NAMES)):
        feats = [s.features for s in train if s.label == label]
        if feats:
            centroids[label] = np.mean(feats, axis=0)
    hits = 0
    for s in test:
        best = min(centroids, key=lambda c: float(np.sum((s.features - centroids[c]) ** 2)))
        hits += int(best == s.label)
    return hits / len(test.samples)
