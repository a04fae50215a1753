"""Full acoustic model.

The pipeline per frame: convolutional frontend over the feature planes, a
linear projection into the encoder width, a stack of Conformer blocks, then
a two-layer classification head emitting per-frame log-posteriors over
senone classes. Checkpoints store the config and every named tensor in a
binary container and round-trip bit-exactly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import serial
from . import tensor as tc
from .conformer import (ConformerBlockParams, add_position,
                        conformer_block_forward, glorot)
from .errors import ConfigError, StructureError
from .masking import SequenceMask, apply_mask
from .rng import keyed
from .tensor import Tensor
from .wrcnn import WRCNNConfig, WRCNNParams, wrcnn_forward

PE_PLACEMENTS = ("per_block", "encoder_input")


@dataclass(frozen=True)
class AcousticModelConfig:
    feat_dim: int = 80
    delta_channels: int = 3
    d_attn: int = 256
    n_blocks: int = 2
    conv_kernel: int = 16
    heads: int = 4
    head_hidden: int = 1024
    n_senones: int = 2042
    dropout: float = 0.15
    pe_placement: str = "per_block"
    final_block_norm: bool = True
    wrcnn: WRCNNConfig = field(default_factory=WRCNNConfig)

    def __post_init__(self):
        positives = {"feat_dim": self.feat_dim,
                     "delta_channels": self.delta_channels,
                     "d_attn": self.d_attn, "conv_kernel": self.conv_kernel,
                     "heads": self.heads, "head_hidden": self.head_hidden,
                     "n_senones": self.n_senones}
        for name, v in positives.items():
            if v < 1:
                raise ConfigError(f"{name} must be positive, got {v}")
        if self.n_blocks < 0:
            raise ConfigError(f"n_blocks must be >= 0, got {self.n_blocks}")
        if self.d_attn % self.heads != 0:
            raise ConfigError(f"heads {self.heads} must divide d_attn "
                              f"{self.d_attn}")
        if self.d_attn % 2 != 0:
            raise ConfigError(f"d_attn must be even for the position table, "
                              f"got {self.d_attn}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.pe_placement not in PE_PLACEMENTS:
            raise ConfigError(f"pe_placement must be one of {PE_PLACEMENTS}, "
                              f"got '{self.pe_placement}'")
        if self.wrcnn.in_channels != self.delta_channels:
            raise ConfigError(
                f"frontend expects {self.wrcnn.in_channels} input planes but "
                f"the model is configured for {self.delta_channels}")
        if self.wrcnn.in_freq != self.feat_dim:
            raise ConfigError(
                f"frontend expects {self.wrcnn.in_freq} frequency bins but "
                f"the model is configured for {self.feat_dim}")


def desk_config(feat_dim: int = 16, n_senones: int = 10, d_attn: int = 64,
                heads: int = 2, n_blocks: int = 2, conv_kernel: int = 16,
                head_hidden: int = 128,
                dropout: float = 0.15) -> AcousticModelConfig:
    """Small profile that trains in seconds on a CPU."""
    return AcousticModelConfig(
        feat_dim=feat_dim, d_attn=d_attn, heads=heads, n_blocks=n_blocks,
        conv_kernel=conv_kernel, head_hidden=head_hidden,
        n_senones=n_senones, dropout=dropout,
        wrcnn=WRCNNConfig(in_channels=3, in_freq=feat_dim, base_channels=16,
                          multipliers=(1, 2, 4), strides=(1, 2, 2),
                          kernel=3, out_dim=d_attn))


def micro_config() -> AcousticModelConfig:
    """Smallest config that still exercises every module; gradient checks."""
    return AcousticModelConfig(
        feat_dim=8, d_attn=8, heads=2, n_blocks=1, conv_kernel=3,
        head_hidden=8, n_senones=5, dropout=0.15,
        wrcnn=WRCNNConfig(in_channels=3, in_freq=8, base_channels=2,
                          multipliers=(1, 2, 4), strides=(1, 2, 2),
                          kernel=3, out_dim=8))


def config_to_dict(cfg: AcousticModelConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["wrcnn"]["multipliers"] = list(cfg.wrcnn.multipliers)
    d["wrcnn"]["strides"] = list(cfg.wrcnn.strides)
    return d


def _from_fields(cls, d: dict, what: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown {what} keys: {', '.join(unknown)}")
    return cls(**d)


def config_from_dict(d: dict) -> AcousticModelConfig:
    d = dict(d)
    w = dict(d.pop("wrcnn", {}))
    for key in ("multipliers", "strides"):
        if key in w:
            w[key] = tuple(w[key])
    wrcnn = _from_fields(WRCNNConfig, w, "frontend config")
    return _from_fields(AcousticModelConfig, d | {"wrcnn": wrcnn},
                        "model config")


@dataclass
class ModelParams:
    cfg: AcousticModelConfig
    wrcnn: WRCNNParams
    w_proj: Tensor  # [d_attn, wrcnn.out_dim]
    b_proj: Tensor
    blocks: list
    w_h1: Tensor    # [head_hidden, d_attn]
    b_h1: Tensor
    w_h2: Tensor    # [n_senones, head_hidden]
    b_h2: Tensor

    @classmethod
    def create(cls, cfg: AcousticModelConfig,
               rng: np.random.Generator | None = None,
               dtype=np.float32) -> "ModelParams":
        rng = rng if rng is not None else keyed(0, "init")
        return cls(
            cfg=cfg,
            wrcnn=WRCNNParams.create(cfg.wrcnn, rng, dtype),
            w_proj=glorot(rng, cfg.d_attn, cfg.wrcnn.out_dim, dtype),
            b_proj=tc.parameter(np.zeros(cfg.d_attn), dtype=dtype),
            blocks=[ConformerBlockParams.create(
                cfg.d_attn, rng, heads=cfg.heads, kernel=cfg.conv_kernel,
                final_norm=cfg.final_block_norm, dtype=dtype)
                for _ in range(cfg.n_blocks)],
            w_h1=glorot(rng, cfg.head_hidden, cfg.d_attn, dtype),
            b_h1=tc.parameter(np.zeros(cfg.head_hidden), dtype=dtype),
            w_h2=glorot(rng, cfg.n_senones, cfg.head_hidden, dtype),
            b_h2=tc.parameter(np.zeros(cfg.n_senones), dtype=dtype))

    def named_parameters(self):
        named = self.wrcnn.named_parameters("wrcnn")
        named += [("proj.w", self.w_proj), ("proj.b", self.b_proj)]
        for i, blk in enumerate(self.blocks):
            named += blk.named_parameters(f"enc{i}")
        named += [("head.w1", self.w_h1), ("head.b1", self.b_h1),
                  ("head.w2", self.w_h2), ("head.b2", self.b_h2)]
        return named

    def set_requires_grad(self, flag: bool) -> None:
        for _, t in self.named_parameters():
            t.requires_grad = flag


def count_params(params) -> int:
    """Exact learnable scalar count (4 bytes each in 32-bit storage)."""
    try:
        named = params.named_parameters()
    except TypeError:
        named = params.named_parameters("p")
    return int(sum(t.size for _, t in named))


def model_forward(x: Tensor, mask: SequenceMask, p: ModelParams,
                  train: bool = False,
                  rng: np.random.Generator | None = None) -> Tensor:
    """[B, 3, F, T] feature planes to [B, T, n_senones] log-posteriors.

    ``train`` toggles dropout only; there are no running statistics anywhere,
    so evaluation is just the deterministic dropout-free forward.
    """
    cfg = p.cfg
    dp = cfg.dropout if train else 0.0
    h = wrcnn_forward(x, p.wrcnn, mask)
    h = apply_mask(tc.add(tc.matmul(h, tc.transpose(p.w_proj, (1, 0))),
                          p.b_proj), mask)
    if cfg.pe_placement == "encoder_input":
        h = add_position(h, mask)
    for blk in p.blocks:
        h = conformer_block_forward(h, blk, mask, dp, rng,
                                    add_pe=cfg.pe_placement == "per_block")
    h = apply_mask(tc.add(tc.matmul(h, tc.transpose(p.w_h1, (1, 0))),
                          p.b_h1), mask)
    h = tc.dropout(tc.relu(h), dp, rng)
    h = tc.add(tc.matmul(h, tc.transpose(p.w_h2, (1, 0))), p.b_h2)
    return tc.log_softmax(h)


# ---------------------------------------------------------------------------
# persistence


@dataclass
class Checkpoint:
    params: ModelParams
    step: int
    extra: dict      # non-model tensors (optimizer moments, shadows)
    header: dict


def save_checkpoint(params: ModelParams, path, step: int = 0,
                    extra: dict | None = None,
                    meta: dict | None = None) -> None:
    """Write config, step, model tensors, and any extra named arrays."""
    header = {"kind": "model", "config": config_to_dict(params.cfg),
              "step": int(step)}
    if meta:
        header.update(meta)
    records = [(name, t.data) for name, t in params.named_parameters()]
    if extra:
        records += sorted(extra.items())
    serial.write_container(path, header, records)


def load_checkpoint(path) -> Checkpoint:
    header, tensors = serial.read_container(path)
    if header.get("kind") != "model":
        raise StructureError(
            f"not a model checkpoint (kind={header.get('kind')!r})")
    cfg = config_from_dict(header["config"])
    params = ModelParams.create(cfg)
    seen = set()
    for name, t in params.named_parameters():
        if name not in tensors:
            raise StructureError(f"checkpoint is missing tensor '{name}'")
        arr = tensors[name]
        if arr.shape != t.shape:
            raise StructureError(
                f"tensor '{name}' has shape {arr.shape} but the stored "
                f"config implies {t.shape}")
        t.data = arr
        seen.add(name)
    extra = {k: v for k, v in tensors.items() if k not in seen}
    return Checkpoint(params=params, step=int(header.get("step", 0)),
                      extra=extra, header=header)
