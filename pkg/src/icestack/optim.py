"""Adam, the warm-up/cosine learning-rate schedule, and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as tn
from .graph_stack import LayerStackSample
from .model import GraphTransformer, make_batch, save_checkpoint
from .objective import LossConfig, masked_huber_loss, masked_mae, mse_loss
from .tensor import ConfigError, ContractError, ShapeError, Tensor

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "lr", "train_loss", "train_masked_mae", "val_masked_mae")


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 5e-4
    min_lr: float = 1e-6
    warmup_epochs: int = 25
    total_epochs: int = 300
    weight_decay: float = 1e-4
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    decoupled_weight_decay: bool = False
    max_grad_norm: Optional[float] = None
    warmup_start_factor: float = 0.1

    def __post_init__(self):
        if not 0 < self.min_lr <= self.base_lr:
            raise ConfigError(f"need 0 < min_lr <= base_lr, got {self.min_lr}, {self.base_lr}")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigError(f"need 0 <= warmup_epochs < total_epochs, got {self.warmup_epochs}, {self.total_epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(epoch: float, cfg: TrainConfig = TrainConfig()) -> float:
    if not 0 <= epoch <= cfg.total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {cfg.total_epochs}]")
    if epoch < cfg.warmup_epochs:
        start = cfg.warmup_start_factor * cfg.base_lr
        return start + (cfg.base_lr - start) * (epoch / cfg.warmup_epochs)
    frac = (epoch - cfg.warmup_epochs) / (cfg.total_epochs - cfg.warmup_epochs)
    return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * frac))


class Adam:
    def __init__(self, params: Sequence[Tensor], cfg: TrainConfig = TrainConfig()):
        self.params = list(params)
        self.cfg = cfg
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self, lr: float) -> None:
        if lr <= 0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step(self.params, grads, self, lr, self.cfg)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: Adam, lr: float,
              cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient {g.shape} does not match parameter {p.data.shape}")
        if cfg.weight_decay and not cfg.decoupled_weight_decay:
            g = g + cfg.weight_decay * p.data
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        update = (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + cfg.adam_eps)
        if cfg.weight_decay and cfg.decoupled_weight_decay:
            update = update + cfg.weight_decay * p.data
        p.data = p.data - lr * update


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class FitResult:
    log: list[dict]
    steps: int
    checkpoints: list[Path]


def batch_targets(samples: Sequence[LayerStackSample]) -> tuple[np.ndarray, np.ndarray]:
    target = np.vstack([s.observed_thickness() for s in samples])
    mask = np.vstack([s.mask for s in samples]).astype(np.float64)
    return target, mask


def dropout_rng(seed: int, epoch: int, batch_index: int) -> np.random.Generator:
    """Counter-style stream: the same (seed, epoch, batch) always yields the same draws."""
    return np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, (epoch << 32) | batch_index]))


def evaluate_masked_mae(model: GraphTransformer, samples: Sequence[LayerStackSample]) -> float:
    if not samples:
        return float("nan")
    preds = model.predict(samples)
    err = 0.0
    count = 0
    for s, p in zip(samples, preds):
        m = s.mask > 0
        err += float(np.abs(p[m] - s.thickness[m]).sum())
        count += int(m.sum())
    return err / count if count else 0.0


def fit(
    model: GraphTransformer,
    dataset: Sequence[LayerStackSample],
    cfg: TrainConfig = TrainConfig(),
    loss: str = "masked_huber",
    loss_cfg: LossConfig = LossConfig(),
    val: Sequence[LayerStackSample] = (),
    epochs: Optional[int] = None,
    standardize: bool = True,
    checkpoint_every: Optional[int] = None,
    checkpoint_dir=None,
    callbacks: Sequence[Callable[[int, GraphTransformer, dict], None]] = (),
    metrics_path=None,
) -> FitResult:
    """Train ``model`` in place.

    ``epochs`` truncates the run without changing the schedule, which is
    always laid out over ``cfg.total_epochs``.  Checkpoints are written after
    every ``checkpoint_every``-th epoch as ``epoch_XXXX.npz``.
    """
    if not dataset:
        raise ValueError("fit needs a non-empty dataset")
    if loss not in ("masked_huber", "mse"):
        raise ConfigError(f"unknown loss {loss!r}")
    n_epochs = cfg.total_epochs if epochs is None else epochs
    if standardize:
        model.fit_standardization(dataset)
    opt = Adam(model.parameters(), cfg)
    shuffle_rng = np.random.default_rng(cfg.seed)
    history: list[dict] = []
    saved: list[Path] = []
    writer = _MetricsWriter(metrics_path) if metrics_path else None
    try:
        for epoch in range(n_epochs):
            lr = lr_at(epoch, cfg)
            order = shuffle_rng.permutation(len(dataset))
            losses = []
            abs_err = 0.0
            n_obs = 0
            for b, start in enumerate(range(0, len(order), cfg.batch_size)):
                members = [dataset[i] for i in order[start:start + cfg.batch_size]]
                batch = make_batch(members, model.cfg.features)
                target, mask = batch_targets(members)
                opt.zero_grad()
                pred = model.forward_batch(batch, training=True, rng=dropout_rng(cfg.seed, epoch, b))
                if loss == "masked_huber":
                    value = masked_huber_loss(pred, target, mask, loss_cfg)
                else:
                    value = mse_loss(pred, target)
                if not np.isfinite(value.item()) or not np.all(np.isfinite(pred.data)):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}, batch {b}")
                tn.backward(value)
                if cfg.max_grad_norm is not None:
                    _clip(opt.params, cfg.max_grad_norm)
                opt.step(lr)
                losses.append(value.item())
                m = mask > 0
                abs_err += float(np.abs(pred.data[m] - target[m]).sum())
                n_obs += int(m.sum())
            record = {
                "epoch": epoch + 1,
                "lr": lr,
                "train_loss": float(np.mean(losses)),
                "train_masked_mae": abs_err / n_obs if n_obs else 0.0,
                "val_masked_mae": evaluate_masked_mae(model, val) if val else float("nan"),
            }
            history.append(record)
            if writer:
                writer.write(record)
            log.info("epoch %d lr %.3e loss %.5f mae %.4f val %.4f", record["epoch"], lr,
                     record["train_loss"], record["train_masked_mae"], record["val_masked_mae"])
            if checkpoint_every and checkpoint_dir is not None and (epoch + 1) % checkpoint_every == 0:
                path = Path(checkpoint_dir) / f"epoch_{epoch + 1:04d}.npz"
                save_checkpoint(path, model, {"epoch": epoch + 1})
                saved.append(path)
            for cb in callbacks:
                cb(epoch + 1, model, record)
    finally:
        if writer:
            writer.close()
    return FitResult(history, opt.step_count, saved)


def _clip(params: Sequence[Tensor], max_norm: float) -> None:
    norm = tn.parameters_grad_norm(params)
    if norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor


class _MetricsWriter:
    def __init__(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        self.fh = open(path, "w", newline="", encoding="utf-8")
        self.w = csv.writer(self.fh)
        self.w.writerow(METRIC_COLUMNS)

    def write(self, record: dict) -> None:
        self.w.writerow([record["epoch"]] + [repr(float(record[k])) for k in METRIC_COLUMNS[1:]])
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def read_metrics(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            {k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def split_holdout(samples: Sequence, fraction: float, seed: int = 0) -> tuple[list, list]:
    """Seeded (train, holdout) split; holdout gets round(fraction * n) items, at least one when n > 1."""
    n = len(samples)
    if n == 0 or fraction <= 0:
        return list(samples), []
    n_val = min(n - 1, max(1, int(round(fraction * n))))
    order = np.random.default_rng([seed, 0x5EED]).permutation(n)
    val_idx = set(order[:n_val].tolist())
    train = [s for i, s in enumerate(samples) if i not in val_idx]
    val = [s for i, s in enumerate(samples) if i in val_idx]
    return train, val
