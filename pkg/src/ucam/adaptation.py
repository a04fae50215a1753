"""Test-time speaker adaptation through a linear input network.

A LIN is a single trainable [F, F] matrix on a speaker's static features,
initialized to identity so the unadapted model is the exact starting
point. Adaptation is unsupervised: the model pseudo-labels the speaker's
utterances with its own argmax decisions, then only the LIN is trained to
fit those labels while every model weight stays frozen. Re-labeling and
retraining from a fresh identity repeats for a few iterations.
"""

from __future__ import annotations

import numpy as np

from . import serial
from . import tensor as tc
from .data import batch_pad, utterance_planes
from .errors import ConfigError, StructureError
from .masking import SequenceMask
from .model import ModelParams, model_forward
from .rng import keyed
from .training import AdamState, masked_cross_entropy


class LinTransform:
    """Square input transform for one speaker."""

    def __init__(self, feat_dim: int, speaker: str = ""):
        if feat_dim < 1:
            raise ConfigError(f"feat_dim must be >= 1, got {feat_dim}")
        self.speaker = speaker
        self.w = tc.parameter(np.eye(feat_dim, dtype=np.float32))

    @property
    def feat_dim(self) -> int:
        return self.w.shape[0]

    def matrix(self) -> np.ndarray:
        return self.w.data

    def is_identity(self) -> bool:
        return bool((self.w.data == np.eye(self.feat_dim,
                                           dtype=np.float32)).all())


def lin_batch(utts, lin: LinTransform):
    """Differentiable padded batch [B, 3, F, T_max] through the LIN.

    The delta regression is linear in the frames, so transforming the
    precomputed planes equals transforming the statics before the deltas;
    this keeps the graph a single matmul per plane.
    """
    planes = []
    lengths = []
    for u in utts:
        d = utterance_planes(u)
        rows = [tc.matmul(lin.w, tc.tensor(d[i])) for i in range(3)]
        planes.append(tc.stack(rows))
        lengths.append(u.length)
    t_max = max(lengths)
    batch = tc.stack([tc.pad_last(p, t_max) for p in planes])
    labels = np.zeros((len(utts), t_max), dtype=np.int64)
    for i, u in enumerate(utts):
        labels[i, :u.length] = u.labels
    return batch, labels, SequenceMask.from_lengths(np.array(lengths))


def pseudo_label(params: ModelParams, utts, lin: LinTransform,
                 batch_size: int = 4) -> list:
    """Frame-level argmax decisions under the current LIN, one [T] per utt."""
    out = []
    with tc.no_grad():
        for batch in batch_pad(utts, batch_size=batch_size,
                               lin=lin.matrix()):
            post = model_forward(tc.tensor(batch.feats), batch.mask, params)
            pred = post.data.argmax(-1)
            for i, n in enumerate(batch.lengths):
                out.append(pred[i, :n].astype(np.int64))
    return out


def frame_error(params: ModelParams, utts, lin: LinTransform,
                batch_size: int = 4) -> float:
    """Fraction of valid frames whose argmax differs from the true label."""
    wrong = 0
    total = 0
    with tc.no_grad():
        for batch in batch_pad(utts, batch_size=batch_size,
                               lin=lin.matrix()):
            post = model_forward(tc.tensor(batch.feats), batch.mask, params)
            pred = post.data.argmax(-1)
            ind = batch.mask.indicator(np.bool_)
            wrong += int((pred[ind] != batch.labels[ind]).sum())
            total += int(ind.sum())
    return wrong / total


def adapt_speaker(params: ModelParams, utts, heldout=None,
                  iterations: int = 3, epochs: int = 10, lr: float = 1e-4,
                  batch_size: int = 4, seed: int = 0):
    """Iterative unsupervised LIN adaptation for one speaker.

    ``utts`` are the adaptation recordings; ``heldout`` (default: every
    fourth utterance, removed from the adaptation set) is only used to
    report frame error per iteration. Returns (LinTransform, report).
    Model parameters are frozen throughout and restored bit-identical.
    """
    utts = list(utts)
    if not utts:
        raise ConfigError("adapt_speaker requires at least one utterance")
    if iterations < 0 or epochs < 1:
        # zero iterations is allowed: the report then reduces to a plain
        # evaluation of the unadapted model
        raise ConfigError("iterations must be >= 0 and epochs >= 1")
    if heldout is None:
        heldout = utts[3::4] or utts
        utts = [u for i, u in enumerate(utts) if i % 4 != 3] or utts
    heldout = list(heldout)
    speakers = {u.speaker for u in utts} | {u.speaker for u in heldout}
    if len(speakers) != 1:
        raise ConfigError(f"adaptation is per speaker; got {sorted(speakers)}")
    speaker = utts[0].speaker
    feat_dim = utts[0].feats.shape[0]

    lin = LinTransform(feat_dim, speaker)
    report = {"speaker": speaker,
              "initial_error": frame_error(params, heldout, lin,
                                           batch_size),
              "iterations": []}

    params.set_requires_grad(False)
    try:
        for it in range(1, iterations + 1):
            targets = pseudo_label(params, utts, lin, batch_size)
            lin = LinTransform(feat_dim, speaker)  # fresh identity
            entry = {"iteration": it,
                     "w_start_identity": lin.is_identity()}
            adam = AdamState([("lin.w", lin.w)])
            for ep in range(epochs):
                order = keyed(seed, f"adapt-{speaker}-{it}",
                              ep).permutation(len(utts))
                for start in range(0, len(utts), batch_size):
                    idx = order[start:start + batch_size]
                    group = [utts[i] for i in idx]
                    x, _, mask = lin_batch(group, lin)
                    labels = np.zeros((len(group), x.shape[-1]),
                                      dtype=np.int64)
                    for j, i in enumerate(idx):
                        labels[j, :utts[i].length] = targets[i]
                    out = model_forward(x, mask, params)
                    loss = masked_cross_entropy(out, labels, mask)
                    tc.backward(loss)
                    adam.apply(lr)
                    tc.zero_grad([lin.w])
            entry["error"] = frame_error(params, heldout, lin, batch_size)
            report["iterations"].append(entry)
    finally:
        params.set_requires_grad(True)
    return lin, report


# ---------------------------------------------------------------------------
# persistence


def save_lin(lin: LinTransform, path) -> None:
    header = {"kind": "lin", "speaker": lin.speaker,
              "feat_dim": lin.feat_dim}
    serial.write_container(path, header,
                           [(f"lin.{lin.speaker}", lin.w.data)])


def load_lin(path) -> LinTransform:
    header, tensors = serial.read_container(path)
    if header.get("kind") != "lin":
        raise StructureError(f"not a LIN file (kind={header.get('kind')!r})")
    speaker = header["speaker"]
    name = f"lin.{speaker}"
    if name not in tensors:
        raise StructureError(f"LIN file is missing tensor '{name}'")
    arr = tensors[name]
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise StructureError(f"LIN tensor must be square, got {arr.shape}")
    lin = LinTransform(arr.shape[0], speaker)
    lin.w.data = arr
    return lin
