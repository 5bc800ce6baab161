"""Seeded synthetic layer stacks with physically linked covariates.

Each radargram gets a smooth latent accumulation field along the track.
The five covariates are noisy smooth functions of that field (so they carry
information about thickness), thickness decays with depth and scales with
the field, and the observation mask is cut by contiguous gaps and whole
missing layers that grow more likely with depth.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .graph_stack import AdjacencySpec, LayerStackSample, MISSING, write_jsonl
from .tensor import ConfigError


@dataclass(frozen=True)
class MissingRegime:
    p_partial_gap: float = 0.5
    gap_len_min: int = 4
    gap_len_max: int = 24
    max_gaps: int = 2
    p_full_missing: float = 0.1
    depth_bias: float = 0.6
    force_missing_layers: tuple = ()

    def __post_init__(self):
        for name in ("p_partial_gap", "p_full_missing", "depth_bias"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if not 1 <= self.gap_len_min <= self.gap_len_max:
            raise ConfigError(f"bad gap length range [{self.gap_len_min}, {self.gap_len_max}]")
        if self.max_gaps < 1:
            raise ConfigError("max_gaps must be >= 1")

    def layer_probabilities(self, p: float, n_layers: int) -> np.ndarray:
        """Per-layer event probability with depth bias.

        The weight ``w_t = 1 + depth_bias * (2t/(T-1) - 1)`` averages 1 over the
        stack; ``1 - (1-p)^w_t`` keeps p=0 and p=1 fixed points.
        """
        if n_layers == 1:
            w = np.ones(1)
        else:
            w = 1.0 + self.depth_bias * (2.0 * np.arange(n_layers) / (n_layers - 1) - 1.0)
        with np.errstate(divide="ignore"):
            return 1.0 - np.power(1.0 - p, w)


@dataclass(frozen=True)
class SynthConfig:
    n_nodes: int = 256
    n_layers: int = 20
    n_samples: int = 100
    seed: int = 0
    smoothness: float = 0.3
    adjacency_k: int = 2
    covariate_noise: float = 0.05
    layer_jitter: float = 0.03
    p_partial_gap: float = 0.5
    gap_len_min: int = 4
    gap_len_max: int = 24
    max_gaps: int = 2
    p_full_missing: float = 0.1
    depth_bias: float = 0.6

    def __post_init__(self):
        if self.n_layers < 2:
            raise ConfigError(f"n_layers must be >= 2, got {self.n_layers}")
        if self.n_nodes < 1 or self.n_samples < 0:
            raise ConfigError("n_nodes must be >= 1 and n_samples >= 0")
        if self.gap_len_max >= self.n_nodes:
            raise ConfigError(f"gap_len_max={self.gap_len_max} must be < n_nodes={self.n_nodes}")
        if self.smoothness <= 0:
            raise ConfigError("smoothness must be positive")
        self.regime()

    def regime(self) -> MissingRegime:
        return MissingRegime(self.p_partial_gap, self.gap_len_min, self.gap_len_max, self.max_gaps,
                             self.p_full_missing, self.depth_bias)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "SynthConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _latent_field(s: np.ndarray, smoothness: float, rng: np.random.Generator) -> np.ndarray:
    max_freq = max(1.0, 1.0 / smoothness)
    a = np.zeros_like(s)
    for _ in range(4):
        f = rng.uniform(0.2, max_freq)
        a += rng.normal(0.0, 0.5) * np.sin(2 * np.pi * f * s + rng.uniform(0, 2 * np.pi))
    return a + rng.normal(0.0, 0.6)


def _covariates(a: np.ndarray, lat: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    n = a.shape[0]

    def jitter(scale):
        return rng.normal(0.0, noise * scale, n)

    smb = 250.0 + 120.0 * a + jitter(120.0)  # mm w.e. / yr
    temp = -22.0 + 0.6 * (72.0 - lat) - 2.5 * a + jitter(2.5)  # deg C
    refreeze = 40.0 * np.exp(0.3 * a) + jitter(12.0)  # mm w.e. / yr
    melt_dh = -0.08 * np.exp(-0.5 * a) + jitter(0.04)  # m
    snowpack = 1.5 + 0.6 * a + jitter(0.6)  # m
    return np.stack([smb, temp, refreeze, melt_dh, snowpack], axis=1)


def _thickness(a: np.ndarray, s: np.ndarray, n_layers: int, jitter: float,
               rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n_layers)
    base = 14.0 * np.exp(-0.06 * t) + 3.0  # pixels, thinning with depth
    per_layer = np.exp(rng.normal(0.0, jitter, n_layers))
    wiggle = np.stack([
        0.03 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * s + rng.uniform(0, 2 * np.pi))
        for _ in range(n_layers)
    ], axis=1)
    return base[None, :] * per_layer[None, :] * np.exp(0.25 * a)[:, None] * (1.0 + wiggle)


def _draw_mask(n_nodes: int, n_layers: int, regime: MissingRegime, rng: np.random.Generator) -> np.ndarray:
    mask = np.ones((n_nodes, n_layers), dtype=np.int8)
    p_full = regime.layer_probabilities(regime.p_full_missing, n_layers)
    p_gap = regime.layer_probabilities(regime.p_partial_gap, n_layers)
    full_draw = rng.random(n_layers)
    gap_draw = rng.random(n_layers)
    for t in range(n_layers):
        if full_draw[t] < p_full[t] or t in regime.force_missing_layers:
            mask[:, t] = 0
            continue
        if gap_draw[t] < p_gap[t]:
            for _ in range(int(rng.integers(1, regime.max_gaps + 1))):
                length = int(rng.integers(regime.gap_len_min, min(regime.gap_len_max, n_nodes - 1) + 1))
                start = int(rng.integers(0, n_nodes - length + 1))
                mask[start:start + length, t] = 0
    return mask


def generate_sample(cfg: SynthConfig, rng: np.random.Generator, sample_id: str = "") -> tuple[LayerStackSample, np.ndarray]:
    """One masked sample plus its full ground-truth thickness (N, T)."""
    n, T = cfg.n_nodes, cfg.n_layers
    s = np.linspace(0.0, 1.0, n)
    lat0 = rng.uniform(66.0, 78.0)
    lon0 = rng.uniform(-50.0, -35.0)
    heading = rng.uniform(0.0, 2 * np.pi)
    length = rng.uniform(0.2, 0.6)
    lat = lat0 + length * s * np.cos(heading)
    lon = lon0 + length * s * np.sin(heading)
    a = _latent_field(s, cfg.smoothness, rng)
    cov = _covariates(a, lat, cfg.covariate_noise, rng)
    truth = _thickness(a, s, T, cfg.layer_jitter, rng)
    mask = _draw_mask(n, T, cfg.regime(), rng)
    feats = np.column_stack([lat, lon, cov])
    thick = np.where(mask > 0, truth, MISSING)
    sample = LayerStackSample(feats, thick, mask, AdjacencySpec("chain", cfg.adjacency_k), sample_id)
    return sample, truth


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def generate(cfg: SynthConfig) -> tuple[list[LayerStackSample], list[np.ndarray]]:
    samples, truths = [], []
    for i in range(cfg.n_samples):
        smp, truth = generate_sample(cfg, sample_rng(cfg.seed, i), f"syn-{cfg.seed}-{i:05d}")
        samples.append(smp)
        truths.append(truth)
    return samples, truths


def truth_sample(sample: LayerStackSample, truth: np.ndarray) -> LayerStackSample:
    return LayerStackSample(sample.node_features, np.array(truth, dtype=np.float64),
                            np.ones(truth.shape, dtype=np.int8), sample.adjacency_spec, sample.sample_id)


def generate_dataset(cfg: SynthConfig, dataset_path, truth_path) -> tuple[list[LayerStackSample], list[np.ndarray]]:
    """Write the masked JSONL dataset and its hidden-truth twin (no nulls)."""
    samples, truths = generate(cfg)
    write_jsonl(dataset_path, samples)
    write_jsonl(truth_path, [truth_sample(s, t) for s, t in zip(samples, truths)])
    return samples, truths


def corrupt_full_stacks(samples: Sequence[LayerStackSample], regime: MissingRegime,
                        seed: int = 0) -> tuple[list[LayerStackSample], list[np.ndarray]]:
    """Apply missingness to fully observed stacks; only the mask changes."""
    out, truths = [], []
    for i, s in enumerate(samples):
        if not np.all(s.mask == 1):
            raise ValueError(f"sample {s.sample_id!r} is not fully observed")
        rng = np.random.default_rng([seed, i, 1])
        mask = _draw_mask(s.n_nodes, s.n_layers, regime, rng)
        thick = np.where(mask > 0, s.thickness, MISSING)
        out.append(LayerStackSample(s.node_features, thick, mask, s.adjacency_spec, s.sample_id))
        truths.append(s.thickness.copy())
    return out, truths


def complete_pool(cfg: SynthConfig) -> tuple[list[LayerStackSample], list[np.ndarray]]:
    """Fully observed stacks drawn from ``cfg`` (missingness switched off)."""
    clean = replace(cfg, p_partial_gap=0.0, p_full_missing=0.0)
    return generate(clean)


def config_dict(cfg) -> dict:
    return asdict(cfg)
