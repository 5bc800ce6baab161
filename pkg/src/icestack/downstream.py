"""Deep-layer prediction from shallow layers, and the completion-pretraining workflow.

The stand-in predictor is the same graph transformer with one extra node
feature (mean observed thickness of the shallow layers) whose temporal axis
spans only the deep layers.  The workflow pretrains it on completed stacks,
fine-tunes from an intermediate pretraining checkpoint on fully traced
stacks, and compares against an identically budgeted scratch run.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .graph_stack import LayerStackSample
from .model import GraphTransformer, ModelConfig, complete, load_checkpoint, save_checkpoint
from .objective import rmse
from .optim import TrainConfig, fit, split_holdout
from .tensor import ConfigError

log = logging.getLogger(__name__)


class ShallowInputError(ValueError):
    """Shallow layers must be fully observed to drive the predictor."""


@dataclass(frozen=True)
class DownstreamTask:
    shallow_count: int = 5

    def check(self, n_layers: int) -> None:
        if not 1 <= self.shallow_count < n_layers:
            raise ConfigError(f"shallow_count={self.shallow_count} must be in [1, {n_layers - 1}]")


def predictor_config(base: ModelConfig) -> ModelConfig:
    return replace(base, f_in=8, features="physical+shallow")


def to_predictor_sample(sample: LayerStackSample, task: DownstreamTask,
                        thickness: Optional[np.ndarray] = None) -> LayerStackSample:
    """Shallow layers become a node feature; deep layers become the targets.

    ``thickness`` overrides the sample's own (e.g. a completed stack).  Deep
    targets keep the sample mask when no override is given.
    """
    task.check(sample.n_layers)
    K = task.shallow_count
    if thickness is None:
        if not np.all(sample.mask[:, :K] == 1):
            missing = int((sample.mask[:, :K] == 0).sum())
            raise ShallowInputError(f"sample {sample.sample_id!r}: {missing} missing shallow entries")
        thick, mask = sample.thickness, sample.mask
    else:
        thick = np.asarray(thickness, dtype=np.float64)
        mask = np.ones(thick.shape, dtype=np.int8)
        if not np.all(np.isfinite(thick[:, :K])):
            raise ShallowInputError(f"sample {sample.sample_id!r}: non-finite shallow thickness")
    shallow_mean = thick[:, :K].mean(axis=1, keepdims=True)
    feats = np.hstack([sample.node_features, shallow_mean])
    return LayerStackSample(feats, thick[:, K:].copy(), mask[:, K:].copy(), sample.adjacency_spec,
                            sample.sample_id)


def predict_deep(model: GraphTransformer, sample: LayerStackSample, task: DownstreamTask) -> np.ndarray:
    """(N, T-K) deep-layer thickness from a stack whose first K layers are observed."""
    return model.predict([to_predictor_sample(sample, task)])[0]


@dataclass(frozen=True)
class WorkflowConfig:
    task: DownstreamTask = field(default_factory=DownstreamTask)
    predictor: ModelConfig = field(default_factory=lambda: ModelConfig(f_in=8, features="physical+shallow"))
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(total_epochs=450, warmup_epochs=25))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(base_lr=7e-4, total_epochs=450, warmup_epochs=25))
    checkpoint_epoch: int = 100
    holdout_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.checkpoint_epoch <= self.pretrain.total_epochs:
            raise ConfigError(f"checkpoint_epoch={self.checkpoint_epoch} outside pretraining run")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must be in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorkflowConfig":
        d = dict(d)
        kw = {}
        if "task" in d:
            kw["task"] = DownstreamTask(**d.pop("task"))
        if "predictor" in d:
            kw["predictor"] = ModelConfig.from_dict(d.pop("predictor"))
        if "pretrain" in d:
            kw["pretrain"] = TrainConfig.from_dict(d.pop("pretrain"))
        if "finetune" in d:
            kw["finetune"] = TrainConfig.from_dict(d.pop("finetune"))
        return cls(**kw, **d)


def complete_pool(completion_model: GraphTransformer, pool: Sequence[LayerStackSample]) -> list[np.ndarray]:
    preds = completion_model.predict(pool)
    return [complete(s, p) for s, p in zip(pool, preds)]


def evaluate_deep(model: GraphTransformer, samples: Sequence[LayerStackSample], task: DownstreamTask) -> float:
    preds, targets = [], []
    for s in samples:
        preds.append(predict_deep(model, s, task).ravel())
        targets.append(s.thickness[:, task.shallow_count:].ravel())
    return rmse(np.concatenate(preds), np.concatenate(targets))


@dataclass
class WorkflowResult:
    report: dict
    pretrained: GraphTransformer
    finetuned: GraphTransformer
    scratch: GraphTransformer
    logs: dict


def pretrain_then_finetune(
    incomplete_pool: Sequence[LayerStackSample],
    complete_pool_samples: Sequence[LayerStackSample],
    completion_model: Optional[GraphTransformer],
    cfg: WorkflowConfig = WorkflowConfig(),
    out_dir=None,
) -> WorkflowResult:
    """Run both arms and compare their deep-layer RMSE on a held-out split of the complete pool."""
    if completion_model is None:
        raise FileNotFoundError("the workflow needs a trained completion checkpoint")
    task = cfg.task
    out = Path(out_dir) if out_dir is not None else None

    completed = complete_pool(completion_model, incomplete_pool)
    pre_samples = [to_predictor_sample(s, task, c) for s, c in zip(incomplete_pool, completed)]

    train_full, test_full = split_holdout(list(complete_pool_samples), cfg.holdout_fraction, cfg.seed)
    ft_samples = [to_predictor_sample(s, task) for s in train_full]

    pretrained = GraphTransformer(cfg.predictor, seed=cfg.seed)
    snapshot: dict = {}

    def keep(epoch, model, record):
        if epoch == cfg.checkpoint_epoch:
            snapshot["model"] = model.copy()
            if out is not None:
                save_checkpoint(out / f"pretrain_epoch_{epoch:04d}.npz", model, {"epoch": epoch})

    pre_fit = fit(pretrained, pre_samples, cfg.pretrain, loss="mse", callbacks=[keep],
                  metrics_path=out / "pretrain_metrics.csv" if out else None)
    if "model" not in snapshot:
        raise RuntimeError(f"pretraining never reached checkpoint epoch {cfg.checkpoint_epoch}")

    finetuned = snapshot["model"]
    ft_fit = fit(finetuned, ft_samples, cfg.finetune, loss="mse", standardize=False,
                 metrics_path=out / "finetune_metrics.csv" if out else None)

    scratch = GraphTransformer(cfg.predictor, seed=cfg.seed)
    scratch.feat_mean = finetuned.feat_mean.copy()
    scratch.feat_std = finetuned.feat_std.copy()
    sc_fit = fit(scratch, ft_samples, cfg.finetune, loss="mse", standardize=False,
                 metrics_path=out / "scratch_metrics.csv" if out else None)

    ft_rmse = evaluate_deep(finetuned, test_full, task)
    sc_rmse = evaluate_deep(scratch, test_full, task)
    report = {
        "pretrain_finetune_rmse": ft_rmse,
        "scratch_rmse": sc_rmse,
        "improvement_pct": 100.0 * (sc_rmse - ft_rmse) / sc_rmse if sc_rmse > 0 else 0.0,
        "rmse_ratio": ft_rmse / sc_rmse if sc_rmse > 0 else float("nan"),
        "first_epoch_loss": {
            "pretrain_finetune": ft_fit.log[0]["train_loss"],
            "scratch": sc_fit.log[0]["train_loss"],
        },
        "n_pretrain": len(pre_samples),
        "n_finetune": len(ft_samples),
        "n_test": len(test_full),
        "seeds": {"workflow": cfg.seed, "pretrain": cfg.pretrain.seed, "finetune": cfg.finetune.seed},
        "configs": cfg.to_dict(),
    }
    if out is not None:
        save_checkpoint(out / "pretrain_final.npz", pretrained, {"epoch": cfg.pretrain.total_epochs})
        save_checkpoint(out / "finetuned.npz", finetuned)
        save_checkpoint(out / "scratch.npz", scratch)
    log.info("workflow: pretrain+finetune RMSE %.4f, scratch RMSE %.4f", ft_rmse, sc_rmse)
    logs = {"pretrain": pre_fit.log, "finetune": ft_fit.log, "scratch": sc_fit.log}
    return WorkflowResult(report, pretrained, finetuned, scratch, logs)
