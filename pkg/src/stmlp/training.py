"""Masked-MAE objective, Adam with coupled L2, multistep schedule and the fit loop."""

from __future__ import annotations

import csv
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .datapipe import Splits, WindowSet, batch_iterator
from .model import STMLP, save_checkpoint

log = logging.getLogger(__name__)

NULL_TOL = 1e-5


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, epoch: int, step: int):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


@dataclass
class TrainConfig:
    learning_rate: float = 0.002
    weight_decay: float = 0.0001
    gamma: float = 0.5
    milestones: list[int] = field(default_factory=lambda: [1, 50, 80])
    num_epochs: int = 200
    batch_size: int = 32
    grad_clip_norm: float = 5.0  # <= 0 disables clipping
    seed: int = 0
    null_value: float = 0.0
    max_steps: int = 0  # 0 = no cap; otherwise stop after this many optimizer steps
    keep_epoch_checkpoints: int = 3

    def __post_init__(self):
        ms = list(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {ms}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.batch_size < 1 or self.num_epochs < 0:
            raise ValueError("batch_size must be >= 1 and num_epochs >= 0")


def null_mask(target: np.ndarray, null_value: float = 0.0) -> np.ndarray:
    if null_value is None or (isinstance(null_value, float) and np.isnan(null_value)):
        return ~np.isnan(target)
    return np.abs(target - null_value) > NULL_TOL


def masked_mae_loss(pred: nc.Tensor, target: np.ndarray, null_value: float = 0.0) -> nc.Tensor:
    """Mean absolute error over entries whose target is not the null value."""
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise nc.ShapeError(f"pred {pred.shape} vs target {target.shape}")
    mask = null_mask(target, null_value)
    if not mask.any():
        warnings.warn("every target entry is masked; loss is 0", RuntimeWarning, stacklevel=2)
    return nc.masked_mean(nc.absolute(pred - target), mask)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state: AdamState, lr: float, weight_decay: float = 0.0) -> None:
    """In-place bias-corrected Adam update; ``weight_decay`` is added to the gradient."""
    for g in grads:
        if g is not None and not np.all(np.isfinite(g)):
            raise nc.NonFiniteError("non-finite gradient; step rejected")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if weight_decay:
            g = g + weight_decay * p.data
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_grad_norm(grads, max_norm: float) -> float:
    """Scale grads in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads if g is not None)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            if g is not None:
                g *= scale
    return total


def multistep_lr(epoch: int, base_lr: float, milestones, gamma: float) -> float:
    return base_lr * gamma ** sum(1 for m in milestones if m <= epoch)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mae: float
    lr: float
    seconds: float
    steps: int


@dataclass
class FitResult:
    model: STMLP
    history: list[EpochRecord]
    best_epoch: int
    best_val_mae: float

    def seconds_per_epoch(self) -> list[float]:
        return [r.seconds for r in self.history]


def evaluate_mae(model: STMLP, samples: WindowSet, batch_size: int = 256, null_value: float = 0.0) -> float:
    """Masked MAE of eval-mode forecasts pooled over every step of every window."""
    abs_sum = 0.0
    count = 0
    for batch in batch_iterator(samples, batch_size):
        pred = model.predict(batch)
        mask = null_mask(batch.y, null_value)
        abs_sum += float(np.abs(pred - batch.y)[mask].sum())
        count += int(mask.sum())
    return abs_sum / count if count else 0.0


def write_history_csv(path: str | Path, history: list[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_mae", "lr", "seconds"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_mae), repr(r.lr), f"{r.seconds:.6f}"])


def fit(model: STMLP, splits: Splits, cfg: TrainConfig, out_dir: str | Path | None = None,
        progress: bool = False) -> FitResult:
    """Train with shuffled batches, validate each epoch, keep the best-validation snapshot.

    The returned model carries the best-validation parameters. When
    ``out_dir`` is given, per-epoch checkpoints (the last
    ``keep_epoch_checkpoints``), ``best.stmp`` and ``history.csv`` are written.
    """
    if len(splits.train) == 0:
        raise ValueError("training split is empty")
    model.normalizer_mean = splits.normalizer.mean
    model.normalizer_std = splits.normalizer.std
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    params = model.parameters()
    opt = AdamState.for_params(params)
    drop_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    history: list[EpochRecord] = []
    best_val = np.inf
    best_epoch = -1
    best_state = model.state_dict()
    mean, std = splits.normalizer.mean, splits.normalizer.std
    steps = 0

    for epoch in range(cfg.num_epochs):
        lr = multistep_lr(epoch, cfg.learning_rate, cfg.milestones, cfg.gamma)
        t0 = time.perf_counter()
        losses = []
        for batch in batch_iterator(splits.train, cfg.batch_size, shuffle=True, seed=cfg.seed, epoch=epoch):
            model.zero_grad()
            pred = model(batch, "train", drop_rng) * std + mean
            loss = masked_mae_loss(pred, batch.y, cfg.null_value)
            if not np.isfinite(loss.data):
                raise DivergenceError(f"loss became non-finite at epoch {epoch}, step {steps}", epoch, steps)
            loss.backward()
            grads = [p.grad for p in params]
            clip_grad_norm(grads, cfg.grad_clip_norm)
            try:
                adam_step(params, grads, opt, lr, cfg.weight_decay)
            except nc.NonFiniteError as exc:
                raise DivergenceError(f"{exc} at epoch {epoch}, step {steps}", epoch, steps) from exc
            losses.append(loss.item())
            steps += 1
            if cfg.max_steps and steps >= cfg.max_steps:
                break
        val_mae = evaluate_mae(model, splits.val, null_value=cfg.null_value) if len(splits.val) else float(np.mean(losses))
        rec = EpochRecord(epoch, float(np.mean(losses)), val_mae, lr, time.perf_counter() - t0, steps)
        history.append(rec)
        if val_mae < best_val:
            best_val, best_epoch = val_mae, epoch
            best_state = model.state_dict()
        if progress:
            log.info("epoch %d  train %.4f  val %.4f  lr %.2e  %.1fs", epoch, rec.train_loss, val_mae, lr, rec.seconds)
        if out is not None:
            save_checkpoint(out / f"epoch_{epoch:03d}.stmp", model)
            stale = out / f"epoch_{epoch - cfg.keep_epoch_checkpoints:03d}.stmp"
            if cfg.keep_epoch_checkpoints > 0 and stale.exists():
                stale.unlink()
            write_history_csv(out / "history.csv", history)
        if cfg.max_steps and steps >= cfg.max_steps:
            break

    model.load_state_dict(best_state)
    if out is not None:
        save_checkpoint(out / "best.stmp", model)
        write_history_csv(out / "history.csv", history)
    return FitResult(model, history, best_epoch, float(best_val))
