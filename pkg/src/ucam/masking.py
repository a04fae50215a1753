"""Sequence masks, utterance-wise LayerNorm/BatchNorm and masked softmax.

Batches of utterances are padded with zeros up to the longest utterance.
Those padded frames are semantically meaningless, so nothing here may let
them leak into an output value, a normalization statistic, or a parameter
gradient. Concretely:

* :func:`apply_mask` zeroes padded frames and blocks their gradients;
* :func:`utterance_layernorm` and :func:`utterance_batchnorm` collect
  statistics from valid frames of each utterance only, treating the batch
  as an independent dimension, and accumulate gamma/beta gradients from
  valid frames only;
* :func:`masked_softmax` gives padded key positions exactly zero attention
  weight.

BatchNorm here keeps no running statistics: train and eval both normalize
with per-utterance statistics, so results do not depend on how a batch was
assembled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass
class SequenceMask:
    """Valid-frame indicator for a padded batch: frame t of utterance b is
    valid iff t < lengths[b]."""

    lengths: np.ndarray
    max_len: int

    def __post_init__(self):
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        if self.lengths.ndim != 1:
            raise ShapeError(f"lengths must be 1-D, got shape {self.lengths.shape}")
        if self.max_len < 1:
            raise ConfigError(f"max_len must be >= 1, got {self.max_len}")
        if (self.lengths < 1).any() or (self.lengths > self.max_len).any():
            raise ConfigError(
                f"lengths must lie in [1, {self.max_len}], got {self.lengths.tolist()}")

    @classmethod
    def from_lengths(cls, lengths, max_len: int | None = None) -> "SequenceMask":
        lengths = np.asarray(lengths, dtype=np.int64)
        if max_len is None:
            max_len = int(lengths.max())
        return cls(lengths, max_len)

    @property
    def batch(self) -> int:
        return int(self.lengths.shape[0])

    def indicator(self, dtype=np.float32) -> np.ndarray:
        """0/1 array of shape [B, T]."""
        t = np.arange(self.max_len)
        return (t[None, :] < self.lengths[:, None]).astype(dtype)

    def valid_frames(self) -> int:
        return int(self.lengths.sum())


def _expand_indicator(x: Tensor, mask: SequenceMask, time_axis: int) -> np.ndarray:
    """Indicator broadcastable against x, with time on the given axis."""
    if time_axis not in (1, -1):
        raise ConfigError(f"time_axis must be 1 or -1, got {time_axis}")
    b = x.shape[0]
    t = x.shape[1] if time_axis == 1 else x.shape[-1]
    if b != mask.batch or t != mask.max_len:
        raise ShapeError(
            f"mask for B={mask.batch}, T={mask.max_len} does not match input "
            f"shape {x.shape} with time_axis={time_axis}")
    m = mask.indicator(x.data.dtype)
    if time_axis == 1:
        return m.reshape(b, t, *([1] * (x.ndim - 2)))
    return m.reshape(b, *([1] * (x.ndim - 2)), t)


def apply_mask(x: Tensor, mask: SequenceMask, time_axis: int = 1) -> Tensor:
    """Zero every padded frame; gradients through padding are exactly zero.

    ``time_axis=1`` handles [B, T, ...] layouts, ``time_axis=-1`` the
    convolutional [B, C, T] / [B, C, F, T] layouts.
    """
    m = _expand_indicator(x, mask, time_axis)
    return tc.mul_const(x, m, op="apply_mask")


@dataclass
class NormParams:
    """Learnable affine transform (scale and shift) plus stability epsilon."""

    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5

    def __post_init__(self):
        if self.eps <= 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")
        if self.gamma.ndim != 1 or self.gamma.shape != self.beta.shape:
            raise ShapeError(
                f"gamma/beta must be equal-length vectors, got "
                f"{self.gamma.shape} and {self.beta.shape}")

    @classmethod
    def create(cls, dim: int, eps: float = 1e-5, dtype=np.float32) -> "NormParams":
        return cls(gamma=tc.parameter(np.ones(dim), dtype=dtype),
                   beta=tc.parameter(np.zeros(dim), dtype=dtype),
                   eps=eps)

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]

    def named_parameters(self, prefix: str):
        return [(f"{prefix}.gamma", self.gamma), (f"{prefix}.beta", self.beta)]


def utterance_layernorm(x: Tensor, mask: SequenceMask, p: NormParams,
                        scope: str = "frame") -> Tensor:
    """LayerNorm over [B, T, D] that never reads or writes padded frames.

    ``scope="frame"`` normalizes each frame over its D features (the usual
    LayerNorm axis); ``scope="utterance"`` pools statistics over all valid
    frames and features of the utterance. Either way the output is zero at
    padded frames and gamma/beta gradients accumulate from valid frames only.
    """
    if x.ndim != 3:
        raise ShapeError(f"utterance_layernorm expects [B, T, D], got {x.shape}")
    if x.shape[-1] != p.dim:
        raise ShapeError(f"feature dim {x.shape[-1]} does not match "
                         f"gamma/beta dim {p.dim}")
    if scope not in ("frame", "utterance"):
        raise ConfigError(f"unknown layernorm scope '{scope}'")
    m3 = _expand_indicator(x, mask, time_axis=1)  # [B, T, 1]
    xd = x.data
    dt = xd.dtype

    if scope == "frame":
        mu = xd.mean(axis=-1, keepdims=True)
        var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
        group_axes = (-1,)
        denom = xd.shape[-1]
    else:
        denom = (mask.lengths * xd.shape[-1]).reshape(-1, 1, 1).astype(dt)
        mu = (xd * m3).sum(axis=(1, 2), keepdims=True) / denom
        var = (((xd - mu) ** 2) * m3).sum(axis=(1, 2), keepdims=True) / denom
        group_axes = (1, 2)

    inv = 1.0 / np.sqrt(var + np.asarray(p.eps, dtype=dt))
    xhat = (xd - mu) * inv
    gamma, beta = p.gamma, p.beta
    y = (xhat * gamma.data + beta.data) * m3

    def bwd(g):
        gm = g * m3
        dgamma = (gm * xhat).sum(axis=(0, 1))
        dbeta = gm.sum(axis=(0, 1))
        ghat = gm * gamma.data
        if scope == "frame":
            mean_g = ghat.mean(axis=group_axes, keepdims=True)
            mean_gx = (ghat * xhat).mean(axis=group_axes, keepdims=True)
        else:
            mean_g = ghat.sum(axis=group_axes, keepdims=True) / denom
            mean_gx = (ghat * xhat).sum(axis=group_axes, keepdims=True) / denom
        dx = inv * (ghat - mean_g - xhat * mean_gx) * m3
        return dx, dgamma, dbeta

    return tc.from_op(y, (x, gamma, beta), bwd, "utterance_layernorm")


def utterance_batchnorm(x: Tensor, mask: SequenceMask, p: NormParams) -> Tensor:
    """Per-utterance BatchNorm for [B, C, T] or [B, C, F, T] (time last).

    Statistics over the valid time frames (and F, when present) normalize
    each channel of each utterance independently; no statistic crosses the
    batch dimension and none is carried between calls. An utterance of
    length 1 is valid: its zero variance is handled by the eps floor.
    """
    if x.ndim not in (3, 4):
        raise ShapeError(f"utterance_batchnorm expects [B, C, T] or "
                         f"[B, C, F, T], got {x.shape}")
    if x.shape[1] != p.dim:
        raise ShapeError(f"channel dim {x.shape[1]} does not match "
                         f"gamma/beta dim {p.dim}")
    m = _expand_indicator(x, mask, time_axis=-1)  # [B,1,T] or [B,1,1,T]
    xd = x.data
    dt = xd.dtype
    spatial = tuple(range(2, x.ndim))  # (2,) or (2, 3)
    n_spatial = int(np.prod([xd.shape[a] for a in spatial[:-1]], initial=1))
    counts = (mask.lengths.astype(dt) * n_spatial).reshape(
        -1, *([1] * (x.ndim - 1)))

    mu = (xd * m).sum(axis=spatial, keepdims=True) / counts
    var = (((xd - mu) ** 2) * m).sum(axis=spatial, keepdims=True) / counts
    inv = 1.0 / np.sqrt(var + np.asarray(p.eps, dtype=dt))
    xhat = (xd - mu) * inv
    gamma, beta = p.gamma, p.beta
    cshape = (1, p.dim) + (1,) * (x.ndim - 2)
    y = (xhat * gamma.data.reshape(cshape) + beta.data.reshape(cshape)) * m

    def bwd(g):
        gm = g * m
        sum_axes = (0,) + spatial
        dgamma = (gm * xhat).sum(axis=sum_axes)
        dbeta = gm.sum(axis=sum_axes)
        ghat = gm * gamma.data.reshape(cshape)
        mean_g = ghat.sum(axis=spatial, keepdims=True) / counts
        mean_gx = (ghat * xhat).sum(axis=spatial, keepdims=True) / counts
        dx = inv * (ghat - mean_g - xhat * mean_gx) * m
        return dx, dgamma, dbeta

    return tc.from_op(y, (x, gamma, beta), bwd, "utterance_batchnorm")


def masked_softmax(scores: Tensor, mask: SequenceMask) -> Tensor:
    """Softmax over the key axis of [B, H, Tq, Tk] attention scores.

    Padded keys get exactly zero weight; valid query rows sum to one over
    the valid keys; padded query rows come out all-zero (downstream masking
    makes them irrelevant, and zeros keep their gradients clean).
    """
    if scores.ndim != 4 or scores.shape[-1] != scores.shape[-2]:
        raise ShapeError(f"masked_softmax expects square [B, H, T, T] scores, "
                         f"got {scores.shape}")
    b, _, t, _ = scores.shape
    if b != mask.batch or t != mask.max_len:
        raise ShapeError(f"mask for B={mask.batch}, T={mask.max_len} does not "
                         f"match scores shape {scores.shape}")
    dt = scores.data.dtype
    m = mask.indicator(dt)
    mk = m[:, None, None, :]  # over keys
    mq = m[:, None, :, None]  # over queries

    # Push masked keys far below the valid scores before the max-shift, then
    # zero them exactly after exponentiation.
    z = scores.data - (1.0 - mk) * np.asarray(1e9, dtype=dt)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z) * mk
    y = e / e.sum(axis=-1, keepdims=True)
    y = y * mq

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return tc.from_op(y, (scores,), bwd, "masked_softmax")
