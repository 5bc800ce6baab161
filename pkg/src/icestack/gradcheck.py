"""Central finite-difference checks for the tensor primitives and the full model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as tn
from .graph_stack import LayerStackSample, make_sample
from .model import GraphTransformer, ModelConfig
from .objective import LossConfig, masked_huber_loss
from .optim import dropout_rng
from .tensor import Tensor

STEP = 1e-6
REL_TOL = 1e-5
# Denominator floor: below |grad| = 1e-3 the check becomes absolute at 1e-8
# (numpy's allclose atol).  Central differences at step 1e-6 on the default
# model carry ~1e-9 of float64 roundoff, so a pure ratio is meaningless for
# gradients that are exactly or nearly zero.
GRAD_FLOOR = 1e-3


def relative_error(analytic, numeric, floor: Optional[float] = None) -> np.ndarray:
    floor = GRAD_FLOOR if floor is None else floor
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(f: Callable[[], float], x: np.ndarray, indices=None, step: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. entries of ``x`` (perturbed in place)."""
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(flat.size)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * step)
    return out.reshape(x.shape)


@dataclass
class CheckResult:
    name: str
    n_checked: int
    max_rel_error: float
    passed: bool


def check_function(name: str, build: Callable[[Sequence[Tensor]], Tensor], inputs: Sequence[np.ndarray],
                   tol: float = REL_TOL) -> CheckResult:
    """Compare autodiff and finite differences for ``sum(build(inputs) * w)`` with random ``w``."""
    tensors = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    probe = build(tensors)
    weights = np.random.default_rng(123).uniform(-1.0, 1.0, probe.shape)

    def scalar(ts):
        return tn.reduce_sum(tn.multiply(build(ts), weights))

    out = scalar(tensors)
    tn.backward(out)
    worst = 0.0
    count = 0
    for t in tensors:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        with tn.no_grad():
            num = numeric_grad(lambda: scalar(tensors).item(), t.data)
        err = relative_error(g, num)
        worst = max(worst, float(err.max()) if err.size else 0.0)
        count += t.data.size
    return CheckResult(name, count, worst, worst <= tol)


def primitive_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)

    def u(*shape):
        return rng.uniform(-2.0, 2.0, shape)

    nbrs = [[1, 2], [0], [0, 3], [2], []]
    drop_seed = 99

    cases = [
        ("add", lambda t: tn.add(t[0], t[1]), [u(3, 4), u(4)]),
        ("subtract", lambda t: tn.subtract(t[0], t[1]), [u(3, 4), u(3, 1)]),
        ("multiply", lambda t: tn.multiply(t[0], t[1]), [u(2, 3, 4), u(3, 4)]),
        ("scale", lambda t: tn.scale(t[0], -1.7), [u(5)]),
        ("matmul", lambda t: tn.matmul(t[0], t[1]), [u(2, 3, 4), u(4, 5)]),
        ("matmul_batched", lambda t: tn.matmul(t[0], t[1]), [u(2, 3, 4), u(2, 4, 2)]),
        ("concat_lastdim", lambda t: tn.concat_lastdim([t[0], t[1]]), [u(3, 2), u(3, 4)]),
        ("reduce_mean", lambda t: tn.reduce_mean(t[0], axis=(0, 2)), [u(3, 4, 5)]),
        ("reduce_sum", lambda t: tn.reduce_sum(t[0], axis=1, keepdims=True), [u(3, 4)]),
        ("relu", lambda t: tn.relu(t[0]), [u(4, 5)]),
        ("linear", lambda t: tn.linear(t[0], t[1], t[2]), [u(2, 3, 4), u(4, 6), u(6)]),
        ("reshape", lambda t: tn.reshape(t[0], (6, 2)), [u(3, 4)]),
        ("transpose", lambda t: tn.transpose(t[0], (2, 0, 1)), [u(2, 3, 4)]),
        ("broadcast_to", lambda t: tn.broadcast_to(t[0], (3, 2, 4)), [u(3, 1, 4)]),
        ("gather_rows", lambda t: tn.gather_rows(t[0], [0, 2, 2, 1]), [u(3, 4)]),
        ("scatter_mean_rows", lambda t: tn.scatter_mean_rows(t[0], nbrs), [u(5, 3)]),
        ("softmax_lastdim", lambda t: tn.softmax_lastdim(t[0]), [u(3, 5)]),
        ("layer_norm", lambda t: tn.layer_norm(t[0], t[1], t[2], 1e-5), [u(3, 6), u(6), u(6)]),
        ("dropout", lambda t: tn.dropout(t[0], 0.3, True, np.random.default_rng(drop_seed)), [u(4, 5)]),
    ]
    return [check_function(name, fn, inputs) for name, fn, inputs in cases]


def random_sample(n_nodes: int = 4, n_layers: int = 3, seed: int = 0, missing_frac: float = 0.3,
                  k: int = 1) -> LayerStackSample:
    rng = np.random.default_rng(seed)
    feats = np.column_stack([
        rng.uniform(66, 78, n_nodes), rng.uniform(-50, -35, n_nodes),
        rng.normal(250, 100, n_nodes), rng.normal(-20, 3, n_nodes), rng.normal(40, 10, n_nodes),
        rng.normal(-0.08, 0.03, n_nodes), rng.normal(1.5, 0.5, n_nodes),
    ])
    thick = rng.uniform(2.0, 15.0, (n_nodes, n_layers))
    mask = (rng.random((n_nodes, n_layers)) >= missing_frac).astype(np.int8)
    mask.flat[0] = 1
    return make_sample(feats, thick, mask, k=k, sample_id=f"gradcheck-{seed}")


def model_check(cfg: ModelConfig, seed: int = 0, max_entries: Optional[int] = None,
                loss_cfg: LossConfig = LossConfig(delta=1.0), tol: float = REL_TOL) -> list[CheckResult]:
    """Per-parameter check of the masked Huber loss on a random 4-node, 3-layer sample.

    ``max_entries`` limits how many entries of each tensor are perturbed (chosen
    at random); ``None`` checks every scalar.
    """
    sample = random_sample(seed=seed)
    model = GraphTransformer(cfg, seed=seed)
    model.fit_standardization([sample])
    rng = np.random.default_rng(seed + 1)
    # perturb away from the zero-bias / unit-gain init so every term is exercised
    for p in model.parameters():
        spread = 0.1 if p.data.ndim == 1 else 0.5 / np.sqrt(p.data.shape[0])
        p.data = p.data + rng.normal(0.0, spread, p.data.shape)
    target = sample.observed_thickness()
    mask = sample.mask
    # pull predictions into the Huber range of the targets
    with tn.no_grad():
        pred0 = model.forward(sample, training=True, rng=dropout_rng(seed, 0, 0)).data
    model.params["head.b"].data = model.params["head.b"].data + float(np.mean(target[mask > 0]) - pred0.mean())

    def loss_value():
        pred = model.forward(sample, training=True, rng=dropout_rng(seed, 0, 0))
        return masked_huber_loss(pred, target, mask, loss_cfg)

    for p in model.parameters():
        p.grad = None
    tn.backward(loss_value())
    results = []
    for name, p in model.params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        size = p.data.size
        if max_entries is None or size <= max_entries:
            idx = list(range(size))
        else:
            idx = sorted(rng.choice(size, size=max_entries, replace=False).tolist())
        with tn.no_grad():
            num = numeric_grad(lambda: loss_value().item(), p.data, idx)
        err = relative_error(analytic.reshape(-1)[idx], num.reshape(-1)[idx])
        worst = float(err.max())
        results.append(CheckResult(name, len(idx), worst, worst <= tol))
    return results


SMALL_CONFIG = ModelConfig(d_s=8, d_t=8, heads=2, encoder_layers=2, ffn_mult=2, dropout_p=0.05)


def full_suite(default_cfg: ModelConfig = ModelConfig(), seed: int = 0,
               sampled_entries: int = 6) -> dict[str, list[CheckResult]]:
    """Primitives, every scalar of a small model, and sampled entries of every tensor of ``default_cfg``."""
    return {
        "primitives": primitive_checks(seed),
        "model_small_exhaustive": model_check(SMALL_CONFIG, seed),
        "model_default_sampled": model_check(default_cfg, seed, max_entries=sampled_entries),
    }


def format_table(results: dict[str, list[CheckResult]]) -> str:
    lines = [f"{'group':<24} {'check':<22} {'n':>6} {'max_rel_err':>12}  status"]
    for group, rows in results.items():
        for r in rows:
            lines.append(f"{group:<24} {r.name:<22} {r.n_checked:>6} {r.max_rel_error:>12.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
