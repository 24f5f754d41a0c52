"""Synthetic fine-grained demonstration clips.

Each clip is ``hand action object``. A frame is the sum of orthonormal
embeddings for the hand and the object, the action embedding scaled by a
temporal envelope, and Gaussian noise. The default envelope is an asymmetric
ramp-hold-ramp. A look-alike action reuses its partner's embedding with the
time-reversed envelope, so both produce the same set of frames and only their
order tells them apart.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    ClipRecord,
    Corpus,
    mean_feature,
    train_test_split,
    write_annotations,
    write_features,
    write_mean_frame,
)

HANDS = ("righthand", "lefthand", "bothhand")
ACTIONS = ("cut", "pour", "stir", "shake", "carry", "take", "place", "reach",
           "transfer", "crack", "hold", "open", "close", "spread", "wipe", "squeeze")
OBJECTS = ("apple", "milk", "bowl", "egg", "spatula", "kettle", "cup", "pan",
           "butter", "teabag", "fruit", "salt", "powder", "sugar", "knife", "plate")

ENVELOPE_FLOOR = 0.2
RISE_END = 0.2
HOLD_END = 0.5

ANNOTATION_FILE = "annotations.tsv"
TRAIN_FILE = "train.tsv"
TEST_FILE = "test.tsv"
MEAN_FRAME_FILE = "mean_frame.v2cm"
FEATURE_DIR = "features"


@dataclass
class SynthSpec:
    num_clips: int = 64
    hands: int = 3
    actions: int = 8
    objects: int = 6
    d: int = 32
    T_range: tuple[int, int] = (24, 40)
    noise_sigma: float = 0.05
    confusion: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        if self.num_clips < 1:
            raise ValueError("num_clips must be >= 1")
        if not 1 <= self.hands <= len(HANDS):
            raise ValueError(f"hands must be in [1, {len(HANDS)}]")
        if not 1 <= self.actions <= len(ACTIONS):
            raise ValueError(f"actions must be in [1, {len(ACTIONS)}]")
        if not 1 <= self.objects <= len(OBJECTS):
            raise ValueError(f"objects must be in [1, {len(OBJECTS)}]")
        if self.d < self.hands + self.actions + self.objects:
            raise ValueError("d must be at least hands + actions + objects")
        lo, hi = self.T_range
        if not 1 <= lo <= hi:
            raise ValueError("T_range must satisfy 1 <= low <= high")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        for a, b in self.confusion.items():
            if a == b:
                raise ValueError(f"action {a!r} cannot be its own look-alike")
            for v in (a, b):
                if v not in ACTIONS:
                    raise ValueError(f"unknown action {v!r}")
        partners = list(self.confusion) + list(self.confusion.values())
        if len(set(partners)) != len(partners):
            raise ValueError("each action may appear in at most one look-alike pair")

    def action_names(self) -> list[str]:
        """Verbs named in look-alike pairs first, then the default list in order."""
        names = []
        for a, b in self.confusion.items():
            names += [a, b]
        for a in ACTIONS:
            if len(names) >= self.actions:
                break
            if a not in names:
                names.append(a)
        if len(names) > self.actions:
            raise ValueError(f"look-alike pairs name {len(names)} actions but only {self.actions} requested")
        return names


def envelope(T: int, reverse: bool = False) -> np.ndarray:
    """Ramp-hold-ramp over T frames with values in [ENVELOPE_FLOOR, 1]."""
    u = np.linspace(0.0, 1.0, T) if T > 1 else np.zeros(1)
    if reverse:
        u = 1.0 - u
    shape = np.where(u < RISE_END, u / RISE_END,
                     np.where(u <= HOLD_END, 1.0, (1.0 - u) / (1.0 - HOLD_END)))
    return ENVELOPE_FLOOR + (1.0 - ENVELOPE_FLOOR) * shape


@dataclass
class SynthClip:
    record: ClipRecord
    frames: np.ndarray


def generate(spec: SynthSpec, seed: int) -> list[SynthClip]:
    """Generate clips in memory. Frames are rounded to float32 like the on-disk copy."""
    spec.validate()
    rng = np.random.default_rng(seed)
    actions = spec.action_names()
    hands = list(HANDS[:spec.hands])
    objects = list(OBJECTS[:spec.objects])
    n_emb = spec.hands + spec.actions + spec.objects
    basis, _ = np.linalg.qr(rng.standard_normal((spec.d, n_emb)))
    hand_emb = {h: basis[:, i] for i, h in enumerate(hands)}
    action_emb = {a: basis[:, spec.hands + i] for i, a in enumerate(actions)}
    object_emb = {o: basis[:, spec.hands + spec.actions + i] for i, o in enumerate(objects)}
    reversed_of = {}
    for base, look_alike in spec.confusion.items():
        action_emb[look_alike] = action_emb[base]
        reversed_of[look_alike] = True

    clips = []
    width = len(str(spec.num_clips - 1))
    lo, hi = spec.T_range
    for k in range(spec.num_clips):
        hand = hands[rng.integers(len(hands))]
        action = actions[rng.integers(len(actions))]
        obj = objects[rng.integers(len(objects))]
        T = int(rng.integers(lo, hi + 1))
        env = envelope(T, reverse=reversed_of.get(action, False))
        frames = (hand_emb[hand] + object_emb[obj])[None, :] + env[:, None] * action_emb[action][None, :]
        frames = frames + spec.noise_sigma * rng.standard_normal((T, spec.d))
        clip_id = f"clip{k:0{width}d}"
        record = ClipRecord(clip_id, f"{FEATURE_DIR}/{clip_id}.v2cf", action, f"{hand} {action} {obj}")
        clips.append(SynthClip(record, frames.astype(np.float32).astype(np.float64)))
    return clips


def to_corpus(clips: list[SynthClip], with_mean: bool = True) -> Corpus:
    feats = [c.frames for c in clips]
    mean = mean_feature(feats).astype(np.float32).astype(np.float64) if with_mean else None
    return Corpus([c.record for c in clips], feats, mean)


def synth_generate(spec: SynthSpec, seed: int, out_dir: str | os.PathLike,
                   split: float | None = None) -> Path:
    """Write annotations, per-clip feature files and the mean frame. Returns the annotation path.

    With ``split`` the clips are also divided into train.tsv and test.tsv
    (same seed) and the mean frame is taken over the training clips only.
    """
    out = Path(out_dir)
    clips = generate(spec, seed)
    (out / FEATURE_DIR).mkdir(parents=True, exist_ok=True)
    for c in clips:
        write_features(out / c.record.feature_path, c.frames)
    mean_clips = clips
    if split is not None:
        train, test = train_test_split(clips, split, seed)
        write_annotations([c.record for c in train], out / TRAIN_FILE)
        write_annotations([c.record for c in test], out / TEST_FILE)
        mean_clips = train
    write_mean_frame(out / MEAN_FRAME_FILE, mean_feature([c.frames for c in mean_clips]))
    path = out / ANNOTATION_FILE
    write_annotations([c.record for c in clips], path)
    return path
