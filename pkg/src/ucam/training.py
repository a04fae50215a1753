"""Optimization: warmup schedule, Adam, EMA, masked loss, and the fit loop.

Everything here is deterministic given the config seed. Dropout draws come
from a stream keyed by step and shuffling from a stream keyed by epoch, so
a run resumed from a checkpoint at step k reproduces the exact trajectory
the uninterrupted run would have taken from step k+1 on.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .data import Batch, batch_pad
from .errors import ConfigError, DataError, DivergenceError, NumericError
from .masking import SequenceMask, apply_mask
from .model import (ModelParams, config_to_dict, load_checkpoint,
                    model_forward, save_checkpoint)
from .rng import keyed


@dataclass(frozen=True)
class LRSchedule:
    """Inverse-sqrt schedule with linear warmup, scaled by model width."""
    d_attn: int
    warmup: int = 20000
    factor: float = 5.0

    def __post_init__(self):
        if self.d_attn < 1 or self.warmup < 1:
            raise ConfigError("d_attn and warmup must be >= 1")

    def lr_at(self, step: int) -> float:
        if step < 1:
            raise ConfigError(f"schedule is defined for steps >= 1, "
                              f"got {step}")
        return (self.factor * self.d_attn ** -0.5
                * min(step ** -0.5, step * self.warmup ** -1.5))


class AdamState:
    """Adam with bias correction; epsilon sits outside the square root."""

    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.98,
                 eps: float = 1e-9):
        self.named = [(n, p) for n, p in named_params]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step = 0
        # Moments live in the parameter dtype so a float32 checkpoint
        # round-trips them exactly and a resumed run stays bit-identical.
        self.m = {n: np.zeros_like(p.data) for n, p in self.named}
        self.v = {n: np.zeros_like(p.data) for n, p in self.named}

    def apply(self, lr: float) -> None:
        """One update over all parameters that received a gradient.

        Validates every gradient before touching any state, so a non-finite
        gradient aborts the step with nothing half-updated.
        """
        live = [(n, p) for n, p in self.named
                if p.requires_grad and p.grad is not None]
        for n, p in live:
            if not np.isfinite(p.grad).all():
                raise NumericError(f"non-finite gradient for parameter "
                                   f"'{n}'; update step aborted")
        self.step += 1
        c1 = 1.0 - self.beta1 ** self.step
        c2 = 1.0 - self.beta2 ** self.step
        for n, p in live:
            dt = p.data.dtype
            g = p.grad.astype(np.float64)
            m = self.beta1 * self.m[n].astype(np.float64) \
                + (1.0 - self.beta1) * g
            v = self.beta2 * self.v[n].astype(np.float64) \
                + (1.0 - self.beta2) * g * g
            self.m[n] = m.astype(dt)
            self.v[n] = v.astype(dt)
            update = lr * (self.m[n].astype(np.float64) / c1) / (
                np.sqrt(self.v[n].astype(np.float64) / c2) + self.eps)
            p.data = (p.data.astype(np.float64) - update).astype(dt)

    def state_tensors(self):
        """Moment arrays as named records for checkpoint round-trips."""
        for n, _ in self.named:
            yield f"opt.m.{n}", self.m[n]
            yield f"opt.v.{n}", self.v[n]

    def load_state(self, extra: dict, step: int) -> None:
        for n, p in self.named:
            for kind, store in (("m", self.m), ("v", self.v)):
                key = f"opt.{kind}.{n}"
                if key not in extra:
                    raise ConfigError(f"checkpoint lacks optimizer record "
                                      f"'{key}'")
                arr = extra[key]
                if arr.shape != p.data.shape:
                    raise ConfigError(f"optimizer record '{key}' has shape "
                                      f"{arr.shape}, expected "
                                      f"{p.data.shape}")
                store[n] = arr.astype(p.data.dtype)
        self.step = step


class EMAState:
    """Exponential moving average of parameters, kept in float64."""

    def __init__(self, named_params, decay: float = 0.999):
        if not 0.0 <= decay < 1.0:
            raise ConfigError(f"EMA decay must be in [0, 1), got {decay}")
        self.decay = decay
        self.named = [(n, p) for n, p in named_params]
        self.shadow = {n: p.data.astype(np.float64) for n, p in self.named}

    def update(self) -> None:
        d = self.decay
        for n, p in self.named:
            self.shadow[n] = d * self.shadow[n] + (1.0 - d) * p.data

    def swapped(self):
        """Context manager: run with shadow weights, then restore."""
        return _EMASwap(self)


class _EMASwap:
    def __init__(self, ema: EMAState):
        self.ema = ema
        self.saved = None

    def __enter__(self):
        self.saved = {n: p.data for n, p in self.ema.named}
        for n, p in self.ema.named:
            p.data = self.ema.shadow[n].astype(p.data.dtype)
        return self.ema

    def __exit__(self, *exc):
        for n, p in self.ema.named:
            p.data = self.saved[n]
        self.saved = None
        return False


# ---------------------------------------------------------------------------
# loss and evaluation


def masked_cross_entropy(log_probs: tc.Tensor, labels: np.ndarray,
                         mask: SequenceMask) -> tc.Tensor:
    """Mean negative log-likelihood over valid frames.

    Padded frames contribute exactly zero to both the value and the
    gradient; labels there may hold anything. A label out of range at a
    valid frame is a data error and names the offending (batch, frame).
    """
    b, t, k = log_probs.data.shape
    labels = np.asarray(labels)
    if labels.shape != (b, t):
        raise DataError(f"labels {labels.shape} do not match "
                        f"log-probs {(b, t)}")
    ind = mask.indicator(np.bool_)
    bad = ((labels < 0) | (labels >= k)) & ind
    if bad.any():
        bi, ti = np.argwhere(bad)[0]
        raise DataError(f"label {labels[bi, ti]} out of range [0, {k}) at "
                        f"batch {bi}, frame {ti}")
    safe = np.where(ind, labels, 0).astype(np.int64)
    picked = tc.take_along_last(log_probs, safe)
    picked = apply_mask(picked, mask, time_axis=-1)
    return tc.scale(tc.sum_all(picked), -1.0 / mask.valid_frames())


def evaluate(params: ModelParams, utts, batch_size: int = 4,
             lin: np.ndarray | None = None) -> tuple[float, float]:
    """Corpus-level (mean NLL, frame accuracy) in eval mode."""
    total_nll = 0.0
    total_correct = 0
    total_frames = 0
    with tc.no_grad():
        for batch in batch_pad(utts, batch_size=batch_size, lin=lin):
            mask = batch.mask
            out = model_forward(tc.tensor(batch.feats), mask, params)
            loss = masked_cross_entropy(out, batch.labels, mask)
            n = mask.valid_frames()
            total_nll += loss.item() * n
            pred = out.data.argmax(-1)
            ind = mask.indicator(np.bool_)
            total_correct += int((pred[ind] == batch.labels[ind]).sum())
            total_frames += n
    return total_nll / total_frames, total_correct / total_frames


# ---------------------------------------------------------------------------
# fit


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_size: int = 4
    warmup: int = 20000
    lr_factor: float = 5.0
    seed: int = 0
    eval_every: int = 50
    grad_clip: float = 0.0
    finetune_steps: int = 0
    finetune_lr: float = 1e-5
    ema_decay: float = 0.999

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("steps, batch_size and eval_every must "
                              "be >= 1")
        if self.finetune_steps < 0:
            raise ConfigError("finetune_steps must be >= 0")


def _clip_gradients(named, limit: float) -> None:
    if limit <= 0.0:
        return
    sq = 0.0
    grads = [p.grad for _, p in named
             if p.requires_grad and p.grad is not None]
    for g in grads:
        sq += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(sq)
    if norm > limit:
        s = limit / norm
        for g in grads:
            g *= s

def _batch_for_step(utts, step: int, cfg: TrainConfig, cache: dict) -> Batch:
    # Epoch and position follow from the step alone, which is what makes
    # resumption reproduce the uninterrupted data order.
    per_epoch = (len(utts) + cfg.batch_size - 1) // cfg.batch_size
    epoch, pos = divmod(step - 1, per_epoch)
    if cache.get("epoch") != epoch:
        order = keyed(cfg.seed, "shuffle", epoch).permutation(len(utts))
        cache["epoch"] = epoch
        cache["order"] = order
    idx = cache["order"][pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
    group = [utts[i] for i in idx]
    return next(batch_pad(group, batch_size=len(group)))


def _train_step(params, batch: Batch, adam: AdamState, lr: float,
                cfg: TrainConfig, step: int, named) -> float:
    mask = batch.mask
    rng = keyed(cfg.seed, "dropout", step)
    out = model_forward(tc.tensor(batch.feats), mask, params,
                        train=True, rng=rng)
    loss = masked_cross_entropy(out, batch.labels, mask)
    value = loss.item()
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite training loss at step {step}; "
                              f"the last saved checkpoint is still good")
    tc.backward(loss)
    _clip_gradients(named, cfg.grad_clip)
    adam.apply(lr)
    tc.zero_grad(named)
    return value


class _TrainLog:
    """CSV trace: step, lr, train_loss and, on eval rows, dev columns."""

    def __init__(self, path, append: bool):
        mode = "a" if append and os.path.exists(path) else "w"
        self.f = open(path, mode)
        if mode == "w":
            self.f.write("step,lr,train_loss,dev_loss,dev_frame_acc\n")

    def row(self, step, lr, train_loss, dev=None):
        line = f"{step},{lr:.17g},{train_loss:.17g}"
        if dev is not None:
            line += f",{dev[0]:.17g},{dev[1]:.17g}"
        self.f.write(line + "\n")
        self.f.flush()

    def close(self):
        self.f.close()


def fit(params: ModelParams, train_utts, dev_utts, cfg: TrainConfig,
        out_dir, resume_from=None) -> dict:
    """Train, track the best dev checkpoint, optionally fine-tune with EMA.

    Writes best.ckpt / last.ckpt during the main phase and, when
    finetune_steps > 0, final.ckpt (raw weights) plus ema.ckpt (shadow
    weights, the export of record). Returns a summary report.
    """
    os.makedirs(out_dir, exist_ok=True)
    named = list(params.named_parameters())
    sched = LRSchedule(params.cfg.d_attn, warmup=cfg.warmup,
                       factor=cfg.lr_factor)
    adam = AdamState(named)
    start = 1
    best_dev = math.inf
    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        if config_to_dict(ck.params.cfg) != config_to_dict(params.cfg):
            raise ConfigError("resume checkpoint was trained with a "
                              "different model config")
        for (_, dst), (_, src) in zip(named, ck.params.named_parameters()):
            dst.data = src.data
        adam.load_state(ck.extra, ck.step)
        start = ck.step + 1
        best_dev = ck.header.get("best_dev", math.inf)

    def save(name, step):
        meta = {"best_dev": best_dev} if math.isfinite(best_dev) else None
        save_checkpoint(params, os.path.join(out_dir, name), step=step,
                        extra=dict(adam.state_tensors()), meta=meta)

    log = _TrainLog(os.path.join(out_dir, "train_log.csv"),
                    append=resume_from is not None)
    cache: dict = {}
    history = []
    try:
        for step in range(start, cfg.steps + 1):
            batch = _batch_for_step(train_utts, step, cfg, cache)
            lr = sched.lr_at(step)
            value = _train_step(params, batch, adam, lr, cfg, step, named)
            dev = None
            if step % cfg.eval_every == 0 or step == cfg.steps:
                dev = evaluate(params, dev_utts,
                               batch_size=cfg.batch_size)
                if dev[0] < best_dev:
                    best_dev = dev[0]
                    save("best.ckpt", step)
                save("last.ckpt", step)
            log.row(step, lr, value, dev)
            history.append((step, lr, value, dev))

        report = {"steps": cfg.steps, "best_dev": best_dev,
                  "final_train_loss": history[-1][2] if history else None,
                  "history": history}

        if cfg.finetune_steps > 0:
            best_path = os.path.join(out_dir, "best.ckpt")
            if os.path.exists(best_path):
                ck = load_checkpoint(best_path)
                for (_, dst), (_, src) in zip(
                        named, ck.params.named_parameters()):
                    dst.data = src.data
            ft_adam = AdamState(named)
            ema = EMAState(named, decay=cfg.ema_decay)
            for i in range(1, cfg.finetune_steps + 1):
                step = cfg.steps + i
                batch = _batch_for_step(train_utts, step, cfg, cache)
                value = _train_step(params, batch, ft_adam,
                                    cfg.finetune_lr, cfg, step, named)
                ema.update()
                dev = None
                if i % cfg.eval_every == 0 or i == cfg.finetune_steps:
                    with ema.swapped():
                        dev = evaluate(params, dev_utts,
                                       batch_size=cfg.batch_size)
                log.row(step, cfg.finetune_lr, value, dev)
                history.append((step, cfg.finetune_lr, value, dev))
            save_checkpoint(params, os.path.join(out_dir, "final.ckpt"),
                            step=cfg.steps + cfg.finetune_steps)
            with ema.swapped():
                save_checkpoint(params, os.path.join(out_dir, "ema.ckpt"),
                                step=cfg.steps + cfg.finetune_steps)
            report["finetune_dev"] = history[-1][3]
    finally:
        log.close()
    return report
