"""Synthetic corpora, delta features, batching, and the feature-file format.

The synthetic task is frame classification with temporal structure: each
class is a Gaussian bump in feature space, labels follow a sticky Markov
chain, and every speaker observes the features through their own linear
warp. That warp is what speaker adaptation later has to undo, and the
Markov stickiness is what gives temporal context its value.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (ConfigError, DataError, FileFormatError,
                     TruncatedFileError)
from .masking import SequenceMask
from .rng import keyed

FEATURE_MAGIC = b"UCFD"
FEATURE_VERSION = 1


@dataclass
class UtteranceRecord:
    utt_id: str
    speaker: str
    feats: np.ndarray   # static features [F, T], float32
    labels: np.ndarray  # [T] int64 in [0, n_classes)

    def __post_init__(self):
        self.feats = np.asarray(self.feats, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.feats.ndim != 2 or self.labels.ndim != 1 \
                or self.feats.shape[1] != self.labels.shape[0]:
            raise DataError(
                f"utterance '{self.utt_id}': features [F, T] must align with "
                f"labels [T], got {self.feats.shape} and {self.labels.shape}")
        if not np.isfinite(self.feats).all():
            raise DataError(f"utterance '{self.utt_id}': non-finite features")

    @property
    def length(self) -> int:
        return self.feats.shape[1]


@dataclass
class Corpus:
    utts: list
    feat_dim: int
    n_classes: int
    class_means: np.ndarray | None = None  # [K, F]; synthetic corpora only
    warps: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.utts)

    def speakers(self) -> list[str]:
        return sorted({u.speaker for u in self.utts})

    def for_speaker(self, speaker: str) -> "Corpus":
        return Corpus(utts=[u for u in self.utts if u.speaker == speaker],
                      feat_dim=self.feat_dim, n_classes=self.n_classes,
                      class_means=self.class_means, warps=self.warps)


def synth_corpus(seed: int, n_speakers: int, n_classes: int, n_utts: int,
                 feat_dim: int, t_range: tuple[int, int] = (20, 40),
                 separation: float = 4.0, warp_strength: float = 0.1,
                 self_loop: float = 0.9, speaker_offset: int = 0,
                 utt_offset: int = 0) -> Corpus:
    """Deterministic synthetic corpus.

    Class means are rescaled so the closest pair sits ``separation`` apart
    (unit noise), which pins the Bayes frame error of a context-free
    classifier. ``speaker_offset`` shifts the speaker-warp key space and
    ``utt_offset`` the utterance key space, so a second corpus can share
    class structure while drawing unseen warps and fresh recordings.
    """
    for name, v in (("n_speakers", n_speakers), ("n_classes", n_classes),
                    ("n_utts", n_utts), ("feat_dim", feat_dim)):
        if v < 1:
            raise ConfigError(f"{name} must be >= 1, got {v}")
    t_min, t_max = t_range
    if not 1 <= t_min <= t_max:
        raise ConfigError(f"bad length range {t_range}")
    if not 0.0 < self_loop < 1.0:
        raise ConfigError(f"self-loop probability must be in (0, 1), "
                          f"got {self_loop}")

    means = keyed(seed, "means").standard_normal((n_classes, feat_dim))
    if n_classes > 1:
        d2 = ((means[:, None] - means[None]) ** 2).sum(-1)
        d2[np.diag_indices(n_classes)] = np.inf
        means *= separation / np.sqrt(d2.min())
    means = means.astype(np.float32)

    warps = {}
    for s in range(n_speakers):
        g = keyed(seed, "warp", speaker_offset + s).standard_normal(
            (feat_dim, feat_dim))
        warps[f"spk{speaker_offset + s}"] = (
            np.eye(feat_dim) + warp_strength * g / np.sqrt(feat_dim)
        ).astype(np.float32)

    utts = []
    for i in range(n_utts):
        r = keyed(seed, "utt", utt_offset + i)
        speaker = f"spk{speaker_offset + i % n_speakers}"
        t = int(r.integers(t_min, t_max + 1))
        labels = np.empty(t, dtype=np.int64)
        labels[0] = r.integers(n_classes)
        for j in range(1, t):
            if r.random() < self_loop or n_classes == 1:
                labels[j] = labels[j - 1]
            else:
                step = 1 + r.integers(n_classes - 1)
                labels[j] = (labels[j - 1] + step) % n_classes
        clean = means[labels].T + r.standard_normal((feat_dim, t))
        feats = warps[speaker] @ clean.astype(np.float32)
        utts.append(UtteranceRecord(utt_id=f"utt{utt_offset + i:05d}",
                                    speaker=speaker, feats=feats,
                                    labels=labels))
    return Corpus(utts=utts, feat_dim=feat_dim, n_classes=n_classes,
                  class_means=means, warps=warps)


# ---------------------------------------------------------------------------
# feature processing


def mean_normalize(static: np.ndarray) -> np.ndarray:
    """Subtract the per-utterance mean of each feature dimension."""
    return static - static.mean(axis=1, keepdims=True)


def compute_deltas(static: np.ndarray) -> np.ndarray:
    """[F, T] static features to [3, F, T] static/delta/delta-delta planes.

    Regression window of +-2 frames with edge replication:
    d_t = sum_n n*(x_{t+n} - x_{t-n}) / (2 * sum_n n^2), n in {1, 2}.
    """
    static = np.asarray(static)
    if static.ndim != 2 or static.shape[1] < 1:
        raise DataError(f"expected [F, T] with T >= 1, got {static.shape}")
    t = static.shape[1]

    def regress(x):
        xp = np.pad(x, ((0, 0), (2, 2)), mode="edge")
        return ((xp[:, 3:3 + t] - xp[:, 1:1 + t])
                + 2.0 * (xp[:, 4:4 + t] - xp[:, 0:t])) / 10.0

    d = regress(static)
    return np.stack([static, d, regress(d)]).astype(static.dtype)


def utterance_planes(utt: UtteranceRecord,
                     lin: np.ndarray | None = None) -> np.ndarray:
    """Model input planes [3, F, T]: mean-normalize, warp by LIN, deltas."""
    x = mean_normalize(utt.feats)
    if lin is not None:
        x = (lin @ x).astype(np.float32)
    return compute_deltas(x)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    feats: np.ndarray    # [B, 3, F, T_max], zeros beyond each length
    labels: np.ndarray   # [B, T_max], zeros beyond each length
    lengths: np.ndarray  # [B]
    utt_ids: list
    speakers: list

    @property
    def mask(self) -> SequenceMask:
        return SequenceMask.from_lengths(self.lengths)


def batch_pad(utts, batch_size: int = 4,
              lin: np.ndarray | None = None):
    """Group consecutive utterances into zero-padded batches.

    The final batch may be short. Shuffling is the caller's concern so the
    same function serves training (shuffled copy) and evaluation (as-is).
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    for start in range(0, len(utts), batch_size):
        group = utts[start:start + batch_size]
        lengths = np.array([u.length for u in group], dtype=np.int64)
        t_max = int(lengths.max())
        f = group[0].feats.shape[0]
        feats = np.zeros((len(group), 3, f, t_max), dtype=np.float32)
        labels = np.zeros((len(group), t_max), dtype=np.int64)
        for i, u in enumerate(group):
            feats[i, :, :, :u.length] = utterance_planes(u, lin)
            labels[i, :u.length] = u.labels
        yield Batch(feats=feats, labels=labels, lengths=lengths,
                    utt_ids=[u.utt_id for u in group],
                    speakers=[u.speaker for u in group])


def unbatch(batch: Batch):
    """Trim padding back off; inverse of batch_pad up to plane expansion."""
    out = []
    for i, n in enumerate(batch.lengths):
        out.append((batch.feats[i, :, :, :n].copy(),
                    batch.labels[i, :n].copy()))
    return out


# ---------------------------------------------------------------------------
# feature file format


def _read_exact(f, n: int, what: str) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise TruncatedFileError(f"feature file ends inside {what}")
    return b


def write_features(path, corpus: Corpus) -> None:
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<IIII", FEATURE_VERSION, corpus.feat_dim,
                            corpus.n_classes, len(corpus.utts)))
        for u in corpus.utts:
            for s in (u.utt_id, u.speaker):
                sb = s.encode()
                f.write(struct.pack("<I", len(sb)))
                f.write(sb)
            f.write(struct.pack("<I", u.length))
            f.write(np.ascontiguousarray(u.feats, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(u.labels, dtype="<u4").tobytes())


def read_features(path) -> Corpus:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != FEATURE_MAGIC:
            raise FileFormatError(
                f"bad magic {magic!r}; expected {FEATURE_MAGIC!r}")
        version, feat_dim, n_classes, count = struct.unpack(
            "<IIII", _read_exact(f, 16, "header"))
        if version != FEATURE_VERSION:
            raise FileFormatError(f"unsupported feature-file version "
                                  f"{version}")
        utts = []
        for _ in range(count):
            names = []
            for what in ("utterance id", "speaker id"):
                (n,) = struct.unpack("<I", _read_exact(f, 4, what))
                names.append(_read_exact(f, n, what).decode())
            (t,) = struct.unpack("<I", _read_exact(f, 4, "frame count"))
            raw = _read_exact(f, 4 * feat_dim * t, "features")
            feats = np.frombuffer(raw, dtype="<f4").reshape(feat_dim, t)
            if not np.isfinite(feats).all():
                raise DataError(
                    f"utterance '{names[0]}': non-finite features in file")
            raw = _read_exact(f, 4 * t, "labels")
            labels = np.frombuffer(raw, dtype="<u4").astype(np.int64)
            if labels.size and labels.max() >= n_classes:
                raise DataError(
                    f"utterance '{names[0]}': label {labels.max()} out of "
                    f"range [0, {n_classes})")
            utts.append(UtteranceRecord(utt_id=names[0], speaker=names[1],
                                        feats=feats.astype(np.float32),
                                        labels=labels))
        return Corpus(utts=utts, feat_dim=feat_dim, n_classes=n_classes)
