"""Losses and metrics for thickness regression under an observation mask."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ConfigError, ShapeError, Tensor, _make, as_tensor


@dataclass(frozen=True)
class LossConfig:
    delta: float = 1.0
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.delta <= 0 or self.epsilon <= 0:
            raise ConfigError(f"delta and epsilon must be positive, got {self.delta}, {self.epsilon}")


def huber(r, delta: float = 1.0):
    r = np.asarray(r, dtype=np.float64)
    a = np.abs(r)
    out = np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


def _check(pred: np.ndarray, *others: np.ndarray) -> None:
    for o in others:
        if o.shape != pred.shape:
            raise ShapeError(f"shape mismatch: prediction {pred.shape} vs {o.shape}")


def masked_huber_value_and_grad(pred, target, mask, cfg: LossConfig = LossConfig()):
    """Loss value and d(loss)/d(pred).

    Masked entries are replaced by a zero residual before anything else, so
    whatever sits in ``pred`` or ``target`` there (including NaN) cannot
    reach the loss or the gradient.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    m = np.asarray(mask) > 0
    _check(pred, target, m)
    r = np.where(m, pred - np.where(m, target, 0.0), 0.0)
    denom = float(m.sum()) + cfg.epsilon
    loss = float(huber(r, cfg.delta).sum()) / denom
    grad = np.where(m, np.clip(r, -cfg.delta, cfg.delta), 0.0) / denom
    return loss, grad


def masked_huber_loss(pred, target, mask, cfg: LossConfig = LossConfig()) -> Tensor:
    pred = as_tensor(pred)
    loss, grad = masked_huber_value_and_grad(pred.data, target, mask, cfg)
    return _make(np.array(loss), (pred,), lambda g: (g * grad,), "masked_huber")


def mse_value_and_grad(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check(pred, target)
    r = pred - target
    return float((r * r).mean()), 2.0 * r / r.size


def mse_loss(pred, target) -> Tensor:
    pred = as_tensor(pred)
    loss, grad = mse_value_and_grad(pred.data, target)
    return _make(np.array(loss), (pred,), lambda g: (g * grad,), "mse")


def masked_mae(pred, target, mask) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    m = np.asarray(mask) > 0
    _check(pred, m)
    if not m.any():
        return 0.0
    return float(np.abs(pred[m] - np.asarray(target, dtype=np.float64)[m]).mean())


def rmse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check(pred, target)
    return float(np.sqrt(((pred - target) ** 2).mean()))
