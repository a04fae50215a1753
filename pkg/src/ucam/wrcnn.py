"""Wide residual convolutional frontend.

A stem convolution, three pre-activation residual blocks that shrink the
frequency axis while always preserving time, then an utterance-wise
BatchNorm, a flatten of channels x frequency per frame, and a linear + ELU
projection. Frame-level targets require the time axis to survive untouched,
so every stride applies to frequency only, and masking between layers keeps
time-axis kernels from reading anything but zeros in the padding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .errors import ConfigError, ShapeError
from .masking import NormParams, SequenceMask, apply_mask, utterance_batchnorm
from .tensor import Tensor

N_BLOCKS = 3


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def conv2d(x: Tensor, w: Tensor, stride_f: int = 1) -> Tensor:
    """Biasless 2-D convolution on [B, C, F, T] with kernel [O, C, kf, kt].

    Frequency uses ceil-mode same padding: the output extent is
    ceil(F / stride_f) for every F, with the leftover pad split small-side
    first. Time is never strided and keeps its extent exactly.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects [B, C, F, T] and [O, C, kf, kt], "
                         f"got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"channel counts disagree: input {x.shape[1]}, "
                         f"kernel {w.shape[1]}")
    if x.data.dtype != w.data.dtype:
        raise ShapeError(f"conv2d: mixed dtypes {x.data.dtype} and "
                         f"{w.data.dtype}")
    if stride_f < 1:
        raise ConfigError(f"frequency stride must be >= 1, got {stride_f}")
    bsz, c, f, t = x.shape
    o, _, kf, kt = w.shape
    out_f = ceil_div(f, stride_f)
    pad_f = max((out_f - 1) * stride_f + kf - f, 0)
    pf0, pf1 = pad_f // 2, pad_f - pad_f // 2
    pt0, pt1 = (kt - 1) // 2, kt - 1 - (kt - 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pf0, pf1), (pt0, pt1)))

    col = np.empty((bsz, c, kf, kt, out_f, t), dtype=x.data.dtype)
    for i in range(kf):
        for j in range(kt):
            col[:, :, i, j] = xp[:, :, i:i + stride_f * out_f:stride_f,
                                 j:j + t]
    cols = col.reshape(bsz, c * kf * kt, out_f * t)
    w2 = w.data.reshape(o, -1)
    out = np.matmul(w2, cols).reshape(bsz, o, out_f, t)

    def bwd(g):
        g2 = g.reshape(bsz, o, -1)
        dw = np.einsum("bon,bkn->ok", g2, cols).reshape(w.shape)
        dcol = np.matmul(w2.T, g2).reshape(col.shape)
        dxp = np.zeros_like(xp)
        for i in range(kf):
            for j in range(kt):
                dxp[:, :, i:i + stride_f * out_f:stride_f,
                    j:j + t] += dcol[:, :, i, j]
        return dxp[:, :, pf0:pf0 + f, pt0:pt0 + t], dw

    return tc.from_op(out, (x, w), bwd, "conv2d")


def he_conv(rng: np.random.Generator, out_c: int, in_c: int, kf: int, kt: int,
            dtype=np.float32) -> Tensor:
    std = np.sqrt(2.0 / (in_c * kf * kt))
    return tc.parameter(rng.normal(0.0, std, size=(out_c, in_c, kf, kt)),
                        dtype=dtype)


@dataclass(frozen=True)
class WRCNNConfig:
    """Shape plan for the frontend.

    The default is a desk-scale profile (narrow channels) chosen so the whole
    model trains in seconds on a CPU; widths are free parameters because none
    of the correctness properties depend on them.
    """

    in_channels: int = 3          # static, delta, delta-delta planes
    in_freq: int = 80
    base_channels: int = 16
    multipliers: tuple = (1, 2, 4)
    strides: tuple = (1, 2, 2)
    kernel: int = 3
    out_dim: int = 256

    def __post_init__(self):
        if len(self.multipliers) != N_BLOCKS or len(self.strides) != N_BLOCKS:
            raise ConfigError(
                f"exactly {N_BLOCKS} residual blocks are required, got "
                f"{len(self.multipliers)} multipliers and "
                f"{len(self.strides)} strides")
        if self.kernel < 1 or self.in_channels < 1 or self.base_channels < 1:
            raise ConfigError("channel counts and kernel size must be >= 1")
        if any(s < 1 for s in self.strides):
            raise ConfigError("strides must be >= 1")

    @property
    def block_channels(self) -> list[int]:
        return [self.base_channels * m for m in self.multipliers]

    @property
    def out_freq(self) -> int:
        f = self.in_freq
        for s in self.strides:
            f = ceil_div(f, s)
        return f

    @property
    def flat_dim(self) -> int:
        return self.block_channels[-1] * self.out_freq


@dataclass
class ResidualBlockParams:
    """Pre-activation block: norm and ReLU come before each convolution.

    The skip path is the raw input when shape is preserved; when channels or
    stride change, a 1x1 convolution applied to the pre-activated input
    brings it into shape.
    """

    bn1: NormParams
    conv1: Tensor  # [out_c, in_c, k, k], carries the frequency stride
    bn2: NormParams
    conv2: Tensor  # [out_c, out_c, k, k]
    proj: Tensor | None  # [out_c, in_c, 1, 1]
    stride_f: int = 1

    def __post_init__(self):
        out_c, in_c = self.conv1.shape[:2]
        needs_proj = in_c != out_c or self.stride_f != 1
        if needs_proj and self.proj is None:
            raise ConfigError("skip projection required when channels or "
                              "stride change")
        if self.conv2.shape[:2] != (out_c, out_c):
            raise ShapeError("second conv must preserve the block's channels")

    @classmethod
    def create(cls, in_c: int, out_c: int, stride_f: int, kernel: int,
               rng: np.random.Generator, dtype=np.float32):
        needs_proj = in_c != out_c or stride_f != 1
        return cls(bn1=NormParams.create(in_c, dtype=dtype),
                   conv1=he_conv(rng, out_c, in_c, kernel, kernel, dtype),
                   bn2=NormParams.create(out_c, dtype=dtype),
                   conv2=he_conv(rng, out_c, out_c, kernel, kernel, dtype),
                   proj=(he_conv(rng, out_c, in_c, 1, 1, dtype)
                         if needs_proj else None),
                   stride_f=stride_f)

    def named_parameters(self, prefix: str):
        named = (self.bn1.named_parameters(f"{prefix}.bn1")
                 + [(f"{prefix}.conv1", self.conv1)]
                 + self.bn2.named_parameters(f"{prefix}.bn2")
                 + [(f"{prefix}.conv2", self.conv2)])
        if self.proj is not None:
            named.append((f"{prefix}.proj", self.proj))
        return named


def residual_block_forward(x: Tensor, p: ResidualBlockParams,
                           mask: SequenceMask) -> Tensor:
    o = tc.relu(utterance_batchnorm(x, mask, p.bn1))
    h = apply_mask(conv2d(o, p.conv1, stride_f=p.stride_f), mask,
                   time_axis=-1)
    h = tc.relu(utterance_batchnorm(h, mask, p.bn2))
    h = apply_mask(conv2d(h, p.conv2), mask, time_axis=-1)
    if p.proj is None:
        return tc.add(x, h)
    skip = apply_mask(conv2d(o, p.proj, stride_f=p.stride_f), mask,
                      time_axis=-1)
    return tc.add(skip, h)


@dataclass
class WRCNNParams:
    cfg: WRCNNConfig
    stem: Tensor  # [base_channels, in_channels, k, k]
    blocks: list
    bn: NormParams
    w_out: Tensor  # [out_dim, flat_dim]
    b_out: Tensor

    @classmethod
    def create(cls, cfg: WRCNNConfig, rng: np.random.Generator,
               dtype=np.float32) -> "WRCNNParams":
        chans = cfg.block_channels
        blocks = []
        in_c = cfg.base_channels
        for out_c, s in zip(chans, cfg.strides):
            blocks.append(ResidualBlockParams.create(
                in_c, out_c, s, cfg.kernel, rng, dtype))
            in_c = out_c
        limit = np.sqrt(6.0 / (cfg.flat_dim + cfg.out_dim))
        return cls(cfg=cfg,
                   stem=he_conv(rng, cfg.base_channels, cfg.in_channels,
                                cfg.kernel, cfg.kernel, dtype),
                   blocks=blocks,
                   bn=NormParams.create(chans[-1], dtype=dtype),
                   w_out=tc.parameter(
                       rng.uniform(-limit, limit,
                                   size=(cfg.out_dim, cfg.flat_dim)),
                       dtype=dtype),
                   b_out=tc.parameter(np.zeros(cfg.out_dim), dtype=dtype))

    def named_parameters(self, prefix: str):
        named = [(f"{prefix}.stem", self.stem)]
        for i, blk in enumerate(self.blocks):
            named += blk.named_parameters(f"{prefix}.block{i}")
        named += self.bn.named_parameters(f"{prefix}.bn")
        named += [(f"{prefix}.w_out", self.w_out),
                  (f"{prefix}.b_out", self.b_out)]
        return named


def wrcnn_forward(x: Tensor, p: WRCNNParams, mask: SequenceMask) -> Tensor:
    """[B, 3, F, T] feature planes to [B, T, out_dim] frame vectors."""
    cfg = p.cfg
    if x.ndim != 4:
        raise ShapeError(f"frontend expects [B, C, F, T], got {x.shape}")
    if x.shape[1] != cfg.in_channels or x.shape[2] != cfg.in_freq:
        raise ShapeError(
            f"input planes {x.shape[1]} x {x.shape[2]} do not match the "
            f"configured {cfg.in_channels} x {cfg.in_freq}")
    b, _, _, t = x.shape
    # mask first: the stem's time window must see zeros, not raw padding
    h = apply_mask(x, mask, time_axis=-1)
    h = apply_mask(conv2d(h, p.stem), mask, time_axis=-1)
    for blk in p.blocks:
        h = residual_block_forward(h, blk, mask)
    h = utterance_batchnorm(h, mask, p.bn)
    h = tc.transpose(h, (0, 3, 1, 2))  # [B, T, C, F']
    h = tc.reshape(h, (b, t, cfg.flat_dim))
    h = apply_mask(tc.add(tc.matmul(h, tc.transpose(p.w_out, (1, 0))),
                          p.b_out), mask)
    return tc.elu(h)
