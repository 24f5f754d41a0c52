"""Annotation and feature ingestion, vocabulary, frame sampling and command encoding.

File formats (all little-endian):

* annotations: UTF-8 TSV, ``clip_id, feature_path, action, command`` per line,
  ``#`` starts a comment line.
* features: ``b"V2CF"``, uint32 T, uint32 d, then T*d float32 values, frames outer.
* mean frame: ``b"V2CM"``, uint32 d, then d float32 values.
"""
from __future__ import annotations

import os
import struct
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FEATURE_MAGIC = b"V2CF"
MEAN_MAGIC = b"V2CM"
EOC = "EOC"
EMPTY = "EMPTY"
MAX_WORDS = 30


class DataError(ValueError):
    pass


class AnnotationError(DataError):
    pass


class FeatureFileError(DataError):
    pass


class BadMagicError(FeatureFileError):
    pass


class TruncatedFileError(FeatureFileError):
    pass


class DimensionMismatchError(FeatureFileError):
    pass


class EmptySequenceError(FeatureFileError):
    pass


class VocabularyError(DataError):
    pass


# ---------------------------------------------------------------------------
# annotations


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    feature_path: str
    action: str
    command: str

    @property
    def words(self) -> list[str]:
        return self.command.split()


def extract_action(command: str) -> str:
    """The verb of a ``hand verb object ...`` command, i.e. token 1; ``""`` if absent."""
    tokens = command.split()
    return tokens[1] if len(tokens) >= 2 else ""


def load_annotations(path: str | os.PathLike) -> list[ClipRecord]:
    records: list[ClipRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise AnnotationError(
                    f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            clip_id, feature_path, action, command = (p.strip() for p in parts)
            if not clip_id or not command.split():
                raise AnnotationError(f"{path}:{lineno}: empty clip id or command")
            if clip_id in seen:
                raise AnnotationError(f"{path}:{lineno}: duplicate clip id {clip_id!r}")
            seen.add(clip_id)
            command = " ".join(command.split())
            verb = extract_action(command)
            if verb != action:
                warnings.warn(f"{path}:{lineno}: action {action!r} differs from command verb "
                              f"{verb!r}; keeping {action!r}", stacklevel=2)
            records.append(ClipRecord(clip_id, feature_path, action, command))
    return records


def write_annotations(records: Iterable[ClipRecord], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(f"{r.clip_id}\t{r.feature_path}\t{r.action}\t{r.command}\n")


# ---------------------------------------------------------------------------
# binary feature files


def write_features(path: str | os.PathLike, frames: np.ndarray) -> None:
    """Store a (T, d) array as float32. Values not representable in float32 are rounded."""
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise DimensionMismatchError(f"features must be 2-d (T, d), got shape {frames.shape}")
    T, d = frames.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<II", T, d))
        fh.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def load_features(path: str | os.PathLike, expected_dim: int | None = None) -> np.ndarray:
    """Read a feature file into a float64 (T, d) array."""
    blob = Path(path).read_bytes()
    if blob[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: not a feature file (bad magic {blob[:4]!r})")
    if len(blob) < 12:
        raise TruncatedFileError(f"{path}: header truncated")
    T, d = struct.unpack_from("<II", blob, 4)
    if T == 0:
        raise EmptySequenceError(f"{path}: feature sequence has no frames")
    if expected_dim is not None and d != expected_dim:
        raise DimensionMismatchError(f"{path}: feature dim {d}, expected {expected_dim}")
    need = 12 + 4 * T * d
    if len(blob) < need:
        raise TruncatedFileError(f"{path}: payload has {len(blob) - 12} bytes, header implies {need - 12}")
    if len(blob) > need:
        raise DimensionMismatchError(
            f"{path}: payload has {len(blob) - 12} bytes, header declares {T}x{d}")
    values = np.frombuffer(blob, dtype="<f4", count=T * d, offset=12).astype(np.float64)
    if not np.isfinite(values).all():
        raise FeatureFileError(f"{path}: non-finite feature values")
    return values.reshape(T, d)


def write_mean_frame(path: str | os.PathLike, frame: np.ndarray) -> None:
    frame = np.asarray(frame).reshape(-1)
    with open(path, "wb") as fh:
        fh.write(MEAN_MAGIC + struct.pack("<I", frame.size))
        fh.write(np.ascontiguousarray(frame, dtype="<f4").tobytes())


def load_mean_frame(path: str | os.PathLike) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != MEAN_MAGIC:
        raise BadMagicError(f"{path}: not a mean-frame file (bad magic {blob[:4]!r})")
    if len(blob) < 8:
        raise TruncatedFileError(f"{path}: header truncated")
    (d,) = struct.unpack_from("<I", blob, 4)
    if len(blob) != 8 + 4 * d:
        raise TruncatedFileError(f"{path}: expected {d} values")
    return np.frombuffer(blob, dtype="<f4", count=d, offset=8).astype(np.float64)


# ---------------------------------------------------------------------------
# frames


def sample_frames(T: int, n: int) -> list[int]:
    """Indices of ``n`` evenly spaced frames, or all ``T`` frames when T < n."""
    if T < 1 or n < 1:
        raise ValueError("sample_frames: T and n must be >= 1")
    if T < n:
        return list(range(T))
    if n == 1:
        return [0]
    return [int(round(j * (T - 1) / (n - 1))) for j in range(n)]


def pad_features(frames: np.ndarray, n: int, mean_frame: np.ndarray) -> np.ndarray:
    """Sample ``n`` frames and append copies of ``mean_frame`` if the clip is short."""
    frames = np.asarray(frames, dtype=np.float64)
    mean_frame = np.asarray(mean_frame, dtype=np.float64).reshape(-1)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise EmptySequenceError("pad_features: need a non-empty (T, d) array")
    if mean_frame.size != frames.shape[1]:
        raise DimensionMismatchError(
            f"pad_features: mean frame has {mean_frame.size} dims, features have {frames.shape[1]}")
    picked = frames[sample_frames(frames.shape[0], n)]
    if picked.shape[0] == n:
        return picked
    pad = np.broadcast_to(mean_frame, (n - picked.shape[0], mean_frame.size))
    return np.concatenate([picked, pad], axis=0)


# ---------------------------------------------------------------------------
# vocabulary and commands


@dataclass
class Vocabulary:
    words: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise VocabularyError("vocabulary has duplicate words")
        for token in (EOC, EMPTY):
            if token not in self.index:
                raise VocabularyError(f"vocabulary is missing the reserved token {token}")

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    @property
    def eoc_index(self) -> int:
        return self.index[EOC]

    @property
    def empty_index(self) -> int:
        return self.index[EMPTY]


def build_vocab(commands: Iterable[str]) -> Vocabulary:
    """Words by descending frequency, ties in lexicographic order, then EOC and EMPTY."""
    counts = Counter()
    n_commands = 0
    for command in commands:
        n_commands += 1
        counts.update(command.split())
    if n_commands == 0:
        raise VocabularyError("cannot build a vocabulary from an empty corpus")
    clash = {EOC, EMPTY} & counts.keys()
    if clash:
        raise VocabularyError(f"reserved token(s) {sorted(clash)} used as command words")
    ordered = sorted(counts, key=lambda w: (-counts[w], w))
    return Vocabulary(ordered + [EOC, EMPTY])


def one_hot(index: int, size: int) -> np.ndarray:
    if not 0 <= index < size:
        raise ValueError(f"one_hot: index {index} outside [0, {size})")
    v = np.zeros(size)
    v[index] = 1.0
    return v


@dataclass(frozen=True)
class WordSequence:
    """Fixed-length word indices; ``mask`` marks the real words including EOC."""

    indices: np.ndarray
    mask: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


def encode_command(command: str, vocab: Vocabulary, n: int = MAX_WORDS) -> WordSequence:
    words = command.split()
    if not words:
        raise VocabularyError("cannot encode an empty command")
    if len(words) + 1 > n:
        raise VocabularyError(f"command has {len(words)} words; at most {n - 1} fit with EOC")
    for w in words:
        if w not in vocab:
            raise VocabularyError(f"word {w!r} is not in the vocabulary")
    ids = [vocab.index[w] for w in words] + [vocab.eoc_index]
    mask = np.zeros(n, dtype=bool)
    mask[:len(ids)] = True
    ids += [vocab.empty_index] * (n - len(ids))
    return WordSequence(np.array(ids, dtype=np.int64), mask)


def decode_indices(indices: Sequence[int], vocab: Vocabulary) -> list[str]:
    return [vocab.words[int(i)] for i in indices]


# ---------------------------------------------------------------------------
# splitting and corpora


def train_test_split(records: Sequence, ratio: float = 0.7, seed: int = 0):
    if not 0 < ratio < 1:
        raise ValueError("train_test_split: ratio must be in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(records))
    cut = int(np.floor(ratio * len(records)))
    return [records[i] for i in order[:cut]], [records[i] for i in order[cut:]]


@dataclass
class Corpus:
    """Annotated clips with their raw (unpadded) feature arrays."""

    records: list[ClipRecord]
    features: list[np.ndarray]
    mean_frame: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def feature_dim(self) -> int:
        return self.features[0].shape[1]

    def subset(self, ids: Iterable[str]) -> "Corpus":
        keep = set(ids)
        pairs = [(r, f) for r, f in zip(self.records, self.features) if r.clip_id in keep]
        return Corpus([r for r, _ in pairs], [f for _, f in pairs], self.mean_frame)

    def split(self, ratio: float = 0.7, seed: int = 0) -> tuple["Corpus", "Corpus"]:
        train, test = train_test_split(self.records, ratio, seed)
        return (self.subset(r.clip_id for r in train),
                self.subset(r.clip_id for r in test))


def resolve_feature_path(annotation_path: str | os.PathLike, feature_path: str) -> Path:
    p = Path(feature_path)
    return p if p.is_absolute() else Path(annotation_path).parent / p


def load_corpus(annotation_path: str | os.PathLike,
                mean_frame_path: str | os.PathLike | None = None) -> Corpus:
    records = load_annotations(annotation_path)
    features = []
    dim = None
    for r in records:
        path = resolve_feature_path(annotation_path, r.feature_path)
        try:
            f = load_features(path, expected_dim=dim)
        except FileNotFoundError as exc:
            raise FeatureFileError(f"clip {r.clip_id}: feature file {path} not found") from exc
        dim = f.shape[1]
        features.append(f)
    mean = load_mean_frame(mean_frame_path) if mean_frame_path is not None else None
    if mean is not None and dim is not None and mean.size != dim:
        raise DimensionMismatchError(f"mean frame has {mean.size} dims, features have {dim}")
    return Corpus(records, features, mean)


def mean_feature(features: Sequence[np.ndarray]) -> np.ndarray:
    """Mean over every frame of every clip."""
    return np.concatenate(list(features), axis=0).mean(axis=0)
