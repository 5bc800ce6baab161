import numpy as np
import pytest

from icestack.datasyn import SynthConfig, complete_pool, generate
from icestack.downstream import (
    DownstreamTask,
    ShallowInputError,
    WorkflowConfig,
    predict_deep,
    pretrain_then_finetune,
    to_predictor_sample,
)
from icestack.model import GraphTransformer, ModelConfig
from icestack.optim import TrainConfig, fit
from icestack.tensor import ConfigError

PRED = ModelConfig(f_in=8, features="physical+shallow", d_s=8, d_t=8, heads=2, encoder_layers=1, ffn_mult=2)
COMP = ModelConfig(d_s=8, d_t=8, heads=2, encoder_layers=1, ffn_mult=2)
SYN = dict(n_nodes=16, n_layers=8, gap_len_max=6)


def test_predictor_sample_layout():
    s = complete_pool(SynthConfig(n_samples=1, **SYN))[0][0]
    task = DownstreamTask(shallow_count=3)
    p = to_predictor_sample(s, task)
    assert p.node_features.shape == (16, 8)
    np.testing.assert_array_equal(p.node_features[:, 7], s.thickness[:, :3].mean(axis=1))
    np.testing.assert_array_equal(p.thickness, s.thickness[:, 3:])


def test_missing_shallow_entries_rejected():
    s, _ = generate(SynthConfig(n_samples=1, p_full_missing=1.0, **SYN))
    with pytest.raises(ShallowInputError):
        to_predictor_sample(s[0], DownstreamTask(3))


def test_task_bounds():
    with pytest.raises(ConfigError):
        DownstreamTask(8).check(8)


def test_zero_model_predicts_head_bias_deterministically():
    s = complete_pool(SynthConfig(n_samples=1, **SYN))[0][0]
    m = GraphTransformer(PRED)
    for p in m.parameters():
        p.data = np.zeros_like(p.data)
    m.params["head.b"].data[...] = 4.0
    out = predict_deep(m, s, DownstreamTask(5))
    assert out.shape == (16, 3) and np.all(out == 4.0)
    m2 = GraphTransformer(PRED, seed=3)
    assert np.array_equal(predict_deep(m2, s, DownstreamTask(5)), predict_deep(m2, s, DownstreamTask(5)))


def test_workflow_config_round_trip():
    cfg = WorkflowConfig(checkpoint_epoch=5, pretrain=TrainConfig(total_epochs=10, warmup_epochs=2))
    assert WorkflowConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        WorkflowConfig(checkpoint_epoch=500)


def small_workflow():
    incomplete, _ = generate(SynthConfig(n_samples=8, seed=1, **SYN))
    full, _ = complete_pool(SynthConfig(n_samples=10, seed=2, **SYN))
    completion = GraphTransformer(COMP, seed=0)
    fit(completion, incomplete, TrainConfig(total_epochs=5, warmup_epochs=1, base_lr=1e-2, min_lr=1e-4))
    cfg = WorkflowConfig(
        task=DownstreamTask(4), predictor=PRED,
        pretrain=TrainConfig(base_lr=1e-2, min_lr=1e-4, total_epochs=6, warmup_epochs=1),
        finetune=TrainConfig(base_lr=1e-2, min_lr=1e-4, total_epochs=4, warmup_epochs=1),
        checkpoint_epoch=3,
    )
    return incomplete, full, completion, cfg


def test_workflow_report_and_artifacts(tmp_path):
    incomplete, full, completion, cfg = small_workflow()
    res = pretrain_then_finetune(incomplete, full, completion, cfg, tmp_path)
    rep = res.report
    for key in ("pretrain_finetune_rmse", "scratch_rmse", "rmse_ratio", "improvement_pct"):
        assert np.isfinite(rep[key])
    assert rep["rmse_ratio"] == pytest.approx(rep["pretrain_finetune_rmse"] / rep["scratch_rmse"])
    assert rep["n_test"] == 2 and rep["n_finetune"] == 8 and rep["n_pretrain"] == 8
    assert (tmp_path / "pretrain_epoch_0003.npz").exists()
    assert len(res.logs["finetune"]) == len(res.logs["scratch"]) == 4


def test_workflow_needs_completion_model():
    with pytest.raises(FileNotFoundError):
        pretrain_then_finetune([], [], None)
