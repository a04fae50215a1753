"""Conformer encoder block.

Each block runs, in order: a half-step feed-forward module, scaled sinusoidal
position information, multi-head self-attention, a time-depthwise convolution
module, a second half-step feed-forward module, and (optionally) a closing
LayerNorm. Every sub-module is pre-norm with utterance-wise statistics, adds
its input back as a residual, and keeps padded frames at exactly zero inside
the branch so padding never contaminates valid frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .errors import ConfigError, ShapeError
from .masking import (NormParams, SequenceMask, apply_mask, masked_softmax,
                      utterance_batchnorm, utterance_layernorm)
from .tensor import Tensor

FFN_EXPANSION = 4


def glorot(rng: np.random.Generator, rows: int, cols: int,
           dtype=np.float32) -> Tensor:
    limit = np.sqrt(6.0 / (rows + cols))
    return tc.parameter(rng.uniform(-limit, limit, size=(rows, cols)),
                        dtype=dtype)


def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Apply ``w`` (stored [out, in]) to the last axis of ``x``."""
    y = tc.matmul(x, tc.transpose(w, (1, 0)))
    return tc.add(y, b) if b is not None else y


# ---------------------------------------------------------------------------
# feed-forward module


@dataclass
class FFNParams:
    """Pre-norm two-layer feed-forward net with a fixed 4x inner expansion."""

    norm: NormParams
    w1: Tensor  # [d_ff, d_attn]
    b1: Tensor  # [d_ff]
    w2: Tensor  # [d_attn, d_ff]
    b2: Tensor  # [d_attn]

    def __post_init__(self):
        d_ff, d = self.w1.shape
        if d_ff != FFN_EXPANSION * d:
            raise ConfigError(
                f"feed-forward inner dim must be {FFN_EXPANSION}x the model "
                f"dim, got {d_ff} for model dim {d}")
        if self.w2.shape != (d, d_ff) or self.b1.shape != (d_ff,) \
                or self.b2.shape != (d,):
            raise ShapeError("inconsistent feed-forward parameter shapes")

    @property
    def d_attn(self) -> int:
        return self.w1.shape[1]

    @classmethod
    def create(cls, d_attn: int, rng: np.random.Generator,
               dtype=np.float32) -> "FFNParams":
        d_ff = FFN_EXPANSION * d_attn
        return cls(norm=NormParams.create(d_attn, dtype=dtype),
                   w1=glorot(rng, d_ff, d_attn, dtype),
                   b1=tc.parameter(np.zeros(d_ff), dtype=dtype),
                   w2=glorot(rng, d_attn, d_ff, dtype),
                   b2=tc.parameter(np.zeros(d_attn), dtype=dtype))

    def named_parameters(self, prefix: str):
        return self.norm.named_parameters(f"{prefix}.norm") + [
            (f"{prefix}.w1", self.w1), (f"{prefix}.b1", self.b1),
            (f"{prefix}.w2", self.w2), (f"{prefix}.b2", self.b2)]


def ffn_forward(x: Tensor, p: FFNParams, mask: SequenceMask,
                dropout_p: float = 0.0,
                rng: np.random.Generator | None = None) -> Tensor:
    """x + half of the dropped-out feed-forward branch."""
    h = utterance_layernorm(x, mask, p.norm)
    h = apply_mask(_linear(h, p.w1, p.b1), mask)
    h = tc.dropout(tc.swish(h), dropout_p, rng)
    h = apply_mask(_linear(h, p.w2, p.b2), mask)
    h = tc.dropout(h, dropout_p, rng)
    return tc.add(x, tc.scale(h, 0.5))


# ---------------------------------------------------------------------------
# position information


def positional_encoding(t: int, d_attn: int, dtype=np.float32) -> Tensor:
    """Sinusoidal position table [t, d_attn]: sin on even columns, cos odd."""
    if d_attn % 2 != 0:
        raise ConfigError(
            f"positional encoding needs an even dimension, got {d_attn}")
    pos = np.arange(t, dtype=np.float64)[:, None]
    i = np.arange(0, d_attn, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, i / d_attn)
    pe = np.empty((t, d_attn))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return tc.tensor(pe.astype(dtype))


def add_position(x: Tensor, mask: SequenceMask) -> Tensor:
    """x + PE/sqrt(d): the table is scaled down rather than the input up.

    Keeping the input at its own magnitude and dividing the table preserves
    the utterance-normalized scale of the features; padded frames are
    re-masked so the table never leaks into padding.
    """
    if x.ndim != 3:
        raise ShapeError(f"add_position expects [B, T, D], got {x.shape}")
    _, t, d = x.shape
    pe = positional_encoding(t, d, dtype=x.data.dtype).data
    scaled = (pe / np.sqrt(d)).astype(x.data.dtype, copy=False)
    return apply_mask(tc.add_const(x, scaled[None, :, :], op="add_position"),
                      mask)


# ---------------------------------------------------------------------------
# multi-head self-attention


@dataclass
class MHSAParams:
    """Biasless projections; each weight holds all heads stacked on axis 0."""

    norm: NormParams
    wq: Tensor  # [d_attn, d_attn]
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int

    def __post_init__(self):
        d = self.wq.shape[1]
        for name, w in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv),
                        ("wo", self.wo)):
            if w.shape != (d, d):
                raise ShapeError(f"attention weight {name} must be square "
                                 f"[{d}, {d}], got {w.shape}")
        if self.heads < 1 or d % self.heads != 0:
            raise ConfigError(
                f"head count {self.heads} must divide the model dim {d}")

    @property
    def d_attn(self) -> int:
        return self.wq.shape[1]

    @classmethod
    def create(cls, d_attn: int, heads: int, rng: np.random.Generator,
               dtype=np.float32) -> "MHSAParams":
        return cls(norm=NormParams.create(d_attn, dtype=dtype),
                   wq=glorot(rng, d_attn, d_attn, dtype),
                   wk=glorot(rng, d_attn, d_attn, dtype),
                   wv=glorot(rng, d_attn, d_attn, dtype),
                   wo=glorot(rng, d_attn, d_attn, dtype),
                   heads=heads)

    def named_parameters(self, prefix: str):
        return self.norm.named_parameters(f"{prefix}.norm") + [
            (f"{prefix}.wq", self.wq), (f"{prefix}.wk", self.wk),
            (f"{prefix}.wv", self.wv), (f"{prefix}.wo", self.wo)]


def mhsa_forward(x: Tensor, p: MHSAParams, mask: SequenceMask,
                 dropout_p: float = 0.0,
                 rng: np.random.Generator | None = None) -> Tensor:
    """x + Dropout(attention branch).

    Attention scores are scaled by 1/sqrt(d_attn), the full model dimension,
    not by the per-head dimension. Padded queries and keys are excluded by
    the masked softmax; because the projections are biasless and the pre-norm
    zeroes padding, padded frames contribute exact zeros throughout.
    """
    if x.ndim != 3:
        raise ShapeError(f"attention expects [B, T, D], got {x.shape}")
    b, t, d = x.shape
    if d != p.d_attn:
        raise ShapeError(f"input dim {d} does not match weights for {p.d_attn}")
    n_heads, dh = p.heads, d // p.heads

    xn = utterance_layernorm(x, mask, p.norm)

    def project(w):
        y = _linear(xn, w)
        return tc.transpose(tc.reshape(y, (b, t, n_heads, dh)), (0, 2, 1, 3))

    q = project(p.wq)
    k = project(p.wk)
    v = project(p.wv)
    scores = tc.scale(tc.matmul(q, tc.transpose(k, (0, 1, 3, 2))),
                      1.0 / np.sqrt(d))
    attn = masked_softmax(scores, mask)
    attn = tc.dropout(attn, dropout_p, rng)
    ctx = tc.matmul(attn, v)  # [B, H, T, dh]
    ctx = tc.reshape(tc.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
    out = tc.dropout(_linear(ctx, p.wo), dropout_p, rng)
    return tc.add(x, out)


# ---------------------------------------------------------------------------
# convolution module


def depthwise_conv1d(x: Tensor, w: Tensor) -> Tensor:
    """Per-channel 1-D convolution over time for [B, C, T] input.

    ``w`` is [C, K]. Zero padding of (K-1)//2 left and the remainder right
    preserves T for any K; for even K the split is left-heavy.
    """
    if x.ndim != 3 or w.ndim != 2:
        raise ShapeError(f"depthwise conv expects [B, C, T] and [C, K], "
                         f"got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"channel counts disagree: input {x.shape[1]}, "
                         f"kernel {w.shape[0]}")
    if x.data.dtype != w.data.dtype:
        raise ShapeError(f"depthwise conv: mixed dtypes {x.data.dtype} "
                         f"and {w.data.dtype}")
    t = x.shape[-1]
    kk = w.shape[1]
    pl = (kk - 1) // 2
    pr = kk - 1 - pl
    xp = np.pad(x.data, ((0, 0), (0, 0), (pl, pr)))
    wd = w.data
    out = np.zeros_like(x.data)
    for j in range(kk):
        out += wd[:, j][None, :, None] * xp[:, :, j:j + t]

    def bwd(g):
        dw = np.empty_like(wd)
        dxp = np.zeros_like(xp)
        for j in range(kk):
            dw[:, j] = (g * xp[:, :, j:j + t]).sum(axis=(0, 2))
            dxp[:, :, j:j + t] += g * wd[:, j][None, :, None]
        return dxp[:, :, pl:pl + t], dw

    return tc.from_op(out, (x, w), bwd, "depthwise_conv1d")


@dataclass
class ConvModuleParams:
    """Pointwise-in, gated, depthwise-over-time, normalized, pointwise-out."""

    norm: NormParams
    pw1_w: Tensor  # [2*d_attn, d_attn]
    pw1_b: Tensor  # [2*d_attn]
    dw_w: Tensor   # [d_attn, kernel]
    bn: NormParams
    pw2_w: Tensor  # [d_attn, d_attn]
    pw2_b: Tensor  # [d_attn]

    def __post_init__(self):
        d = self.pw2_w.shape[0]
        if self.dw_w.ndim != 2 or self.dw_w.shape[1] < 1:
            raise ConfigError("depthwise kernel size must be at least 1")
        if self.pw1_w.shape != (2 * d, d) or self.dw_w.shape[0] != d \
                or self.pw2_w.shape != (d, d):
            raise ShapeError("inconsistent convolution module shapes")

    @property
    def d_attn(self) -> int:
        return self.pw2_w.shape[0]

    @property
    def kernel(self) -> int:
        return self.dw_w.shape[1]

    @classmethod
    def create(cls, d_attn: int, kernel: int, rng: np.random.Generator,
               dtype=np.float32) -> "ConvModuleParams":
        if kernel < 1:
            raise ConfigError(f"depthwise kernel size must be at least 1, "
                              f"got {kernel}")
        bound = 1.0 / np.sqrt(kernel)
        return cls(norm=NormParams.create(d_attn, dtype=dtype),
                   pw1_w=glorot(rng, 2 * d_attn, d_attn, dtype),
                   pw1_b=tc.parameter(np.zeros(2 * d_attn), dtype=dtype),
                   dw_w=tc.parameter(
                       rng.uniform(-bound, bound, size=(d_attn, kernel)),
                       dtype=dtype),
                   bn=NormParams.create(d_attn, dtype=dtype),
                   pw2_w=glorot(rng, d_attn, d_attn, dtype),
                   pw2_b=tc.parameter(np.zeros(d_attn), dtype=dtype))

    def named_parameters(self, prefix: str):
        return (self.norm.named_parameters(f"{prefix}.norm")
                + [(f"{prefix}.pw1_w", self.pw1_w),
                   (f"{prefix}.pw1_b", self.pw1_b),
                   (f"{prefix}.dw_w", self.dw_w)]
                + self.bn.named_parameters(f"{prefix}.bn")
                + [(f"{prefix}.pw2_w", self.pw2_w),
                   (f"{prefix}.pw2_b", self.pw2_b)])


def conv_module_forward(x: Tensor, p: ConvModuleParams, mask: SequenceMask,
                        dropout_p: float = 0.0,
                        rng: np.random.Generator | None = None) -> Tensor:
    """x + Dropout(conv branch).

    The branch expands to 2d channels, gates down to d with a GLU (first half
    value, second half gate), convolves each channel over time, normalizes
    per utterance, applies Swish and projects back. Masking after every conv
    keeps the depthwise window from ever reading nonzero padding.
    """
    h = utterance_layernorm(x, mask, p.norm)
    h = apply_mask(_linear(h, p.pw1_w, p.pw1_b), mask)
    h = tc.glu(h, axis=-1)
    h = tc.transpose(h, (0, 2, 1))  # [B, d, T] for the time convolution
    h = apply_mask(depthwise_conv1d(h, p.dw_w), mask, time_axis=-1)
    h = tc.swish(utterance_batchnorm(h, mask, p.bn))
    h = tc.transpose(h, (0, 2, 1))
    h = apply_mask(_linear(h, p.pw2_w, p.pw2_b), mask)
    h = tc.dropout(h, dropout_p, rng)
    return tc.add(x, h)


# ---------------------------------------------------------------------------
# full block


@dataclass
class ConformerBlockParams:
    ffn1: FFNParams
    mhsa: MHSAParams
    conv: ConvModuleParams
    ffn2: FFNParams
    final_norm: NormParams | None

    def __post_init__(self):
        d = self.ffn1.d_attn
        if not (self.mhsa.d_attn == self.conv.d_attn == self.ffn2.d_attn == d):
            raise ConfigError("all block sub-modules must share one model dim")
        if self.final_norm is not None and self.final_norm.dim != d:
            raise ConfigError("final norm dim must match the model dim")

    @property
    def d_attn(self) -> int:
        return self.ffn1.d_attn

    @classmethod
    def create(cls, d_attn: int, rng: np.random.Generator, heads: int = 4,
               kernel: int = 16, final_norm: bool = True,
               dtype=np.float32) -> "ConformerBlockParams":
        return cls(ffn1=FFNParams.create(d_attn, rng, dtype),
                   mhsa=MHSAParams.create(d_attn, heads, rng, dtype),
                   conv=ConvModuleParams.create(d_attn, kernel, rng, dtype),
                   ffn2=FFNParams.create(d_attn, rng, dtype),
                   final_norm=(NormParams.create(d_attn, dtype=dtype)
                               if final_norm else None))

    def named_parameters(self, prefix: str):
        named = (self.ffn1.named_parameters(f"{prefix}.ffn1")
                 + self.mhsa.named_parameters(f"{prefix}.mhsa")
                 + self.conv.named_parameters(f"{prefix}.conv")
                 + self.ffn2.named_parameters(f"{prefix}.ffn2"))
        if self.final_norm is not None:
            named += self.final_norm.named_parameters(f"{prefix}.final_norm")
        return named


def conformer_block_forward(x: Tensor, p: ConformerBlockParams,
                            mask: SequenceMask, dropout_p: float = 0.0,
                            rng: np.random.Generator | None = None,
                            add_pe: bool = True) -> Tensor:
    """One full block; ``add_pe`` injects position right before attention.

    Encoders that add position once at their input pass ``add_pe=False``.
    """
    h = ffn_forward(x, p.ffn1, mask, dropout_p, rng)
    if add_pe:
        h = add_position(h, mask)
    h = mhsa_forward(h, p.mhsa, mask, dropout_p, rng)
    h = conv_module_forward(h, p.conv, mask, dropout_p, rng)
    h = ffn_forward(h, p.ffn2, mask, dropout_p, rng)
    if p.final_norm is not None:
        return utterance_layernorm(h, mask, p.final_norm)
    return apply_mask(h, mask)
