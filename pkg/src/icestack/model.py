"""Physics-conditioned graph transformer for layer-stack completion.

Per layer graph, a mean-aggregation GraphSAGE encoder embeds each node from
its coordinates and covariates.  The embeddings are projected to the
temporal width, combined with a sinusoidal encoding of the layer index and
normalized, then passed through pre-norm self-attention blocks that run
along the layer axis independently for every node.  A scalar affine head
reads out thickness per (node, layer).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from . import tensor as tn
from .graph_stack import LayerStackSample
from .tensor import ConfigError, ShapeError, Tensor

CHECKPOINT_VERSION = "icestack-checkpoint/1"

FEATURE_SETS = {
    "physical": 7,  # lat, lon + 5 covariates
    "latlon": 2,
    "physical+shallow": 8,  # downstream predictor: + mean shallow thickness
}


@dataclass(frozen=True)
class ModelConfig:
    f_in: int = 7
    d_s: int = 128
    sage_layers: int = 2
    d_t: int = 256
    heads: int = 8
    encoder_layers: int = 4
    dropout_p: float = 0.05
    ffn_mult: int = 4
    ln_eps: float = 1e-5
    features: str = "physical"

    def __post_init__(self):
        for name in ("f_in", "d_s", "sage_layers", "d_t", "heads", "encoder_layers", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_t % self.heads:
            raise ConfigError(f"d_t={self.d_t} is not divisible by heads={self.heads}")
        if self.d_t % 2:
            raise ConfigError(f"d_t={self.d_t} must be even for the positional encoding")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.features not in FEATURE_SETS:
            raise ConfigError(f"unknown feature set {self.features!r}")
        if FEATURE_SETS[self.features] != self.f_in:
            raise ConfigError(f"feature set {self.features!r} has {FEATURE_SETS[self.features]} columns, f_in={self.f_in}")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Name -> shape of every learnable tensor, in a fixed order."""
    shapes: dict[str, tuple] = {}
    d_in = cfg.f_in
    for i in range(cfg.sage_layers):
        shapes[f"sage{i}.W1"] = (d_in, cfg.d_s)
        shapes[f"sage{i}.W2"] = (d_in, cfg.d_s)
        shapes[f"sage{i}.bias"] = (cfg.d_s,)
        d_in = cfg.d_s
    shapes["proj.W"] = (cfg.d_s, cfg.d_t)
    shapes["proj.b"] = (cfg.d_t,)
    shapes["pe_norm.gain"] = (cfg.d_t,)
    shapes["pe_norm.bias"] = (cfg.d_t,)
    d_ff = cfg.ffn_mult * cfg.d_t
    for i in range(cfg.encoder_layers):
        p = f"enc{i}."
        shapes[p + "ln1.gain"] = (cfg.d_t,)
        shapes[p + "ln1.bias"] = (cfg.d_t,)
        for name in ("q", "k", "v", "o"):
            shapes[p + f"W{name}"] = (cfg.d_t, cfg.d_t)
            shapes[p + f"b{name}"] = (cfg.d_t,)
        shapes[p + "ln2.gain"] = (cfg.d_t,)
        shapes[p + "ln2.bias"] = (cfg.d_t,)
        shapes[p + "ff1.W"] = (cfg.d_t, d_ff)
        shapes[p + "ff1.b"] = (d_ff,)
        shapes[p + "ff2.W"] = (d_ff, cfg.d_t)
        shapes[p + "ff2.b"] = (cfg.d_t,)
    shapes["head.W"] = (cfg.d_t, 1)
    shapes["head.b"] = (1,)
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    return int(sum(math.prod(s) for s in param_shapes(cfg).values()))


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def positional_encoding(n_positions: int, d_t: int) -> np.ndarray:
    if d_t % 2:
        raise ConfigError(f"positional encoding needs an even width, got {d_t}")
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    i2 = np.arange(0, d_t, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i2 / d_t)
    pe = np.empty((n_positions, d_t))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


# building blocks --------------------------------------------------------------------

def sage_layer(x, neighbors, W1, W2, bias, activate: bool = True, dropout_p: float = 0.0,
               training: bool = False, rng=None) -> Tensor:
    """``W1 x_i + W2 mean_{j in N(i)} x_j + bias``, optional ReLU, then dropout.

    Weights are stored (in, out), so the products read ``x @ W``.
    """
    x = tn.as_tensor(x)
    if x.shape[-1] != tn.as_tensor(W1).shape[0]:
        raise ShapeError(f"sage_layer: features {x.shape} vs W1 {tn.as_tensor(W1).shape}")
    agg = tn.scatter_mean_rows(x, neighbors)
    out = tn.add(tn.add(tn.matmul(x, W1), tn.matmul(agg, W2)), bias)
    if activate:
        out = tn.relu(out)
    return tn.dropout(out, dropout_p, training, rng)


def multi_head_attention(h: Tensor, params: dict, prefix: str, heads: int) -> Tensor:
    """Bidirectional self-attention over axis 1 of ``h`` (B, T, d)."""
    B, T, d = h.shape
    dh = d // heads

    def split(name):
        y = tn.linear(h, params[prefix + "W" + name], params[prefix + "b" + name])
        return tn.transpose(tn.reshape(y, (B, T, heads, dh)), (0, 2, 1, 3))

    q, k, v = split("q"), split("k"), split("v")
    scores = tn.scale(tn.matmul(q, tn.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = tn.softmax_lastdim(scores)
    ctx = tn.matmul(attn, v)
    ctx = tn.reshape(tn.transpose(ctx, (0, 2, 1, 3)), (B, T, d))
    return tn.linear(ctx, params[prefix + "Wo"], params[prefix + "bo"])


def encoder_layer(z: Tensor, params: dict, prefix: str, cfg: ModelConfig,
                  training: bool = False, rng=None) -> Tensor:
    h = tn.layer_norm(z, params[prefix + "ln1.gain"], params[prefix + "ln1.bias"], cfg.ln_eps)
    att = multi_head_attention(h, params, prefix, cfg.heads)
    u = tn.add(z, tn.dropout(att, cfg.dropout_p, training, rng))
    h2 = tn.layer_norm(u, params[prefix + "ln2.gain"], params[prefix + "ln2.bias"], cfg.ln_eps)
    ff = tn.relu(tn.linear(h2, params[prefix + "ff1.W"], params[prefix + "ff1.b"]))
    ff = tn.linear(ff, params[prefix + "ff2.W"], params[prefix + "ff2.b"])
    return tn.add(u, tn.dropout(ff, cfg.dropout_p, training, rng))


def temporal_encode(z, params: dict, cfg: ModelConfig, training: bool = False, rng=None) -> Tensor:
    z = tn.as_tensor(z)
    for i in range(cfg.encoder_layers):
        z = encoder_layer(z, params, f"enc{i}.", cfg, training, rng)
    return z


# batching ---------------------------------------------------------------------------

def sample_features(s: LayerStackSample, features: str) -> np.ndarray:
    if features == "physical":
        return s.node_features
    if features == "latlon":
        return s.node_features[:, :2]
    if features == "physical+shallow":
        if s.node_features.shape[1] != 8:
            raise ShapeError("physical+shallow features need the shallow-thickness column")
        return s.node_features
    raise ConfigError(f"unknown feature set {features!r}")


@dataclass
class GraphBatch:
    """Several samples merged into one block-diagonal graph sharing T."""

    features: np.ndarray  # (sum N, f_in), raw units
    aggregator: sp.csr_matrix
    n_layers: int
    offsets: np.ndarray  # node offset of each sample, length B + 1

    def split(self, arr: np.ndarray) -> list[np.ndarray]:
        return [arr[self.offsets[i]:self.offsets[i + 1]] for i in range(len(self.offsets) - 1)]


def make_batch(samples: Sequence[LayerStackSample], features: str = "physical") -> GraphBatch:
    if not samples:
        raise ValueError("empty batch")
    T = samples[0].n_layers
    blocks, feats, offsets = [], [], [0]
    for s in samples:
        if s.n_layers != T:
            raise ShapeError(f"batch mixes stack depths {T} and {s.n_layers}")
        feats.append(sample_features(s, features))
        blocks.append(tn.mean_aggregation_matrix(s.adjacency, s.n_nodes))
        offsets.append(offsets[-1] + s.n_nodes)
    return GraphBatch(np.vstack(feats), sp.block_diag(blocks, format="csr"), T, np.array(offsets))


# model ------------------------------------------------------------------------------

class GraphTransformer:
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0,
                 params: Optional[dict] = None):
        self.cfg = cfg
        self.seed = seed
        self.params = params if params is not None else init_params(cfg, seed)
        self.feat_mean = np.zeros(cfg.f_in)
        self.feat_std = np.ones(cfg.f_in)
        self._pe_cache: dict[int, np.ndarray] = {}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def fit_standardization(self, samples: Sequence[LayerStackSample]) -> None:
        x = np.vstack([sample_features(s, self.cfg.features) for s in samples])
        self.feat_mean = x.mean(axis=0)
        std = x.std(axis=0)
        self.feat_std = np.where(std > 0, std, 1.0)

    def _pe(self, T: int) -> np.ndarray:
        if T not in self._pe_cache:
            self._pe_cache[T] = positional_encoding(T, self.cfg.d_t)
        return self._pe_cache[T]

    def spatial_encode(self, x, neighbors, training: bool = False, rng=None) -> Tensor:
        """Node embeddings (N, d_s); identical for every layer of the stack."""
        h = tn.as_tensor(x)
        cfg = self.cfg
        for i in range(cfg.sage_layers):
            last = i == cfg.sage_layers - 1
            h = sage_layer(
                h, neighbors,
                self.params[f"sage{i}.W1"], self.params[f"sage{i}.W2"], self.params[f"sage{i}.bias"],
                activate=not last, dropout_p=cfg.dropout_p, training=training, rng=rng,
            )
        return h

    def spatial_stack(self, x, neighbors, T: int) -> Tensor:
        """H as an explicit (N, T, d_s) tensor."""
        h = self.spatial_encode(x, neighbors)
        return tn.broadcast_to(tn.reshape(h, (h.shape[0], 1, h.shape[1])), (h.shape[0], T, h.shape[1]))

    def forward_batch(self, batch: GraphBatch, training: bool = False,
                      rng: Optional[np.random.Generator] = None) -> Tensor:
        cfg = self.cfg
        x = (batch.features - self.feat_mean) / self.feat_std
        h = self.spatial_encode(x, batch.aggregator, training, rng)
        # projecting before broadcasting over T equals projecting H itself
        z = tn.linear(h, self.params["proj.W"], self.params["proj.b"])
        n, T = z.shape[0], batch.n_layers
        z = tn.add(tn.reshape(z, (n, 1, cfg.d_t)), self._pe(T))
        z = tn.layer_norm(z, self.params["pe_norm.gain"], self.params["pe_norm.bias"], cfg.ln_eps)
        z = temporal_encode(z, self.params, cfg, training, rng)
        y = tn.linear(z, self.params["head.W"], self.params["head.b"])
        return tn.reshape(y, (n, T))

    def forward(self, sample: LayerStackSample, training: bool = False, rng=None) -> Tensor:
        return self.forward_batch(make_batch([sample], self.cfg.features), training, rng)

    def predict(self, samples: Sequence[LayerStackSample]) -> list[np.ndarray]:
        """Eval-mode predictions, one (N, T) array per sample."""
        out = []
        with tn.no_grad():
            for s in samples:
                out.append(self.forward(s).data.copy())
        return out

    # checkpoints --------------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        expected = param_shapes(self.cfg)
        for name, shape in expected.items():
            if name not in state:
                raise KeyError(f"checkpoint lacks parameter {name}")
            if tuple(state[name].shape) != shape:
                raise ShapeError(f"{name}: checkpoint shape {state[name].shape}, model expects {shape}")
        self.params = {name: Tensor(np.array(state[name]), requires_grad=True) for name in expected}

    def copy(self) -> "GraphTransformer":
        out = GraphTransformer(self.cfg, self.seed, params={})
        out.load_state_dict(self.state_dict())
        out.feat_mean = self.feat_mean.copy()
        out.feat_std = self.feat_std.copy()
        return out


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: GraphTransformer, extra: Optional[dict] = None) -> None:
    """npz container: named parameter arrays plus a JSON metadata string."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "seed": model.seed,
        "param_names": list(model.params),
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    arrays["feat_mean"] = model.feat_mean
    arrays["feat_std"] = model.feat_std
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[GraphTransformer, dict]:
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(f"{path}: checkpoint version {meta.get('version')!r}, expected {CHECKPOINT_VERSION!r}")
            cfg = ModelConfig.from_dict(meta["config"])
            state = {name: z[f"param/{name}"] for name in meta["param_names"]}
            model = GraphTransformer(cfg, meta["seed"], params={})
            model.load_state_dict(state)
            model.feat_mean = np.array(z["feat_mean"])
            model.feat_std = np.array(z["feat_std"])
    except (KeyError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    return model, meta.get("extra", {})


def complete(sample: LayerStackSample, predictions: np.ndarray) -> np.ndarray:
    """Observed thickness where mask=1, predictions elsewhere."""
    pred = np.asarray(predictions, dtype=np.float64)
    if pred.shape != sample.thickness.shape:
        raise ShapeError(f"predictions {pred.shape} vs stack {sample.thickness.shape}")
    if not np.all(np.isfinite(pred)):
        raise ValueError("predictions contain non-finite values")
    return np.where(sample.mask > 0, sample.thickness, pred)
