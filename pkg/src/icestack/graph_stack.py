"""Layer-stack samples: one radargram as T per-layer graphs over shared nodes.

Missing thickness entries are stored as NaN inside the raw ``thickness``
array and are only meaningful together with ``mask``.  Nothing downstream
feeds the raw array to the model; see :func:`observed_thickness`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

PHYS_FIELDS = (
    "snow_mass_balance",
    "near_surface_temperature",
    "meltwater_refreezing",
    "melt_height_change",
    "snowpack_height",
)
N_FEATURES = 2 + len(PHYS_FIELDS)
MISSING = float("nan")


class EmptyGraphError(ValueError):
    pass


class DatasetFormatError(ValueError):
    """A dataset line could not be parsed; carries the 1-based line number."""

    def __init__(self, message: str, line: Optional[int] = None, path=None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.line = line


@dataclass(frozen=True)
class AdjacencySpec:
    scheme: str = "chain"
    k: int = 2

    def to_json(self) -> dict:
        return {"scheme": self.scheme, "k": self.k}


def build_adjacency(n_nodes: int, spec: AdjacencySpec = AdjacencySpec()) -> list[list[int]]:
    """Chain-k neighbor lists: node i links to i-k..i+k except itself."""
    if n_nodes < 1:
        raise EmptyGraphError("graph must have at least one node")
    if spec.scheme != "chain":
        raise ValueError(f"unknown adjacency scheme {spec.scheme!r}")
    if spec.k < 1:
        raise ValueError(f"chain radius must be >= 1, got {spec.k}")
    k = spec.k
    return [
        [j for j in range(max(0, i - k), min(n_nodes, i + k + 1)) if j != i]
        for i in range(n_nodes)
    ]


@dataclass
class LayerStackSample:
    node_features: np.ndarray  # (N, 7): lat, lon, 5 covariates
    thickness: np.ndarray  # (N, T), NaN where mask == 0
    mask: np.ndarray  # (N, T) of {0, 1}
    adjacency_spec: AdjacencySpec = field(default_factory=AdjacencySpec)
    sample_id: str = ""
    _adjacency: Optional[list] = field(default=None, repr=False, compare=False)

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def n_layers(self) -> int:
        return self.thickness.shape[1]

    @property
    def adjacency(self) -> list[list[int]]:
        if self._adjacency is None:
            self._adjacency = build_adjacency(self.n_nodes, self.adjacency_spec)
        return self._adjacency

    def observed_thickness(self) -> np.ndarray:
        """Thickness with missing entries zeroed; safe to feed into arithmetic."""
        return np.where(self.mask > 0, np.nan_to_num(self.thickness, nan=0.0), 0.0)

    def with_adjacency(self, adjacency: list[list[int]]) -> "LayerStackSample":
        """Copy carrying explicit neighbor lists (used for validation of hand-built graphs)."""
        out = LayerStackSample(
            self.node_features, self.thickness, self.mask, self.adjacency_spec, self.sample_id
        )
        out._adjacency = adjacency
        return out


def make_sample(
    node_features,
    thickness,
    mask=None,
    k: int = 2,
    sample_id: str = "",
) -> LayerStackSample:
    """Build a sample, deriving the mask from NaNs when none is given."""
    feats = np.asarray(node_features, dtype=np.float64)
    thick = np.asarray(thickness, dtype=np.float64)
    if mask is None:
        m = np.isfinite(thick).astype(np.int8)
    else:
        m = np.asarray(mask, dtype=np.int8)
    thick = np.where(m > 0, thick, MISSING)
    return LayerStackSample(feats, thick, m, AdjacencySpec("chain", k), sample_id)


@dataclass(frozen=True)
class Violation:
    kind: str
    where: tuple
    detail: str = ""


def validate_sample(s: LayerStackSample) -> list[Violation]:
    """Check every sample invariant; an empty list means the sample is valid."""
    report: list[Violation] = []
    feats, thick, mask = s.node_features, s.thickness, s.mask
    if feats.ndim != 2 or feats.shape[1] != N_FEATURES:
        report.append(Violation("feature_shape", (), f"expected (N, {N_FEATURES}), got {feats.shape}"))
        return report
    n = feats.shape[0]
    if thick.ndim != 2 or thick.shape[0] != n or mask.shape != thick.shape:
        report.append(Violation("stack_shape", (), f"features {feats.shape}, thickness {thick.shape}, mask {mask.shape}"))
        return report
    if n == 0:
        report.append(Violation("empty_graph", ()))
        return report
    for idx in zip(*np.nonzero(~np.isfinite(feats))):
        report.append(Violation("nonfinite_feature", tuple(int(i) for i in idx)))
    bad_mask = ~np.isin(mask, (0, 1))
    for idx in zip(*np.nonzero(bad_mask)):
        report.append(Violation("mask_value", tuple(int(i) for i in idx)))
    observed = mask == 1
    finite = np.isfinite(thick)
    for idx in zip(*np.nonzero(observed & ~finite)):
        report.append(Violation("observed_missing", tuple(int(i) for i in idx), "mask=1 at sentinel"))
    for idx in zip(*np.nonzero(observed & finite & ~(thick > 0))):
        report.append(Violation("nonpositive_thickness", tuple(int(i) for i in idx)))
    for idx in zip(*np.nonzero((mask == 0) & finite)):
        report.append(Violation("unmasked_value", tuple(int(i) for i in idx), "mask=0 but value present"))
    adj = s.adjacency
    if len(adj) != n:
        report.append(Violation("adjacency_size", (), f"{len(adj)} neighbor lists for {n} nodes"))
        return report
    sets = [set(nb) for nb in adj]
    for i, nbrs in enumerate(sets):
        if i in nbrs:
            report.append(Violation("self_loop", (i,)))
        for j in nbrs:
            if not 0 <= j < n:
                report.append(Violation("adjacency_range", (i, j)))
            elif i not in sets[j]:
                report.append(Violation("asymmetric_edge", (i, j)))
    return report


@dataclass(frozen=True)
class LayerSummary:
    observed: tuple
    missing: tuple
    fully_missing: tuple


def layer_observation_summary(s: LayerStackSample) -> LayerSummary:
    obs = (s.mask == 1).sum(axis=0)
    n = s.n_nodes
    return LayerSummary(
        tuple(int(o) for o in obs),
        tuple(int(n - o) for o in obs),
        tuple(bool(o == 0) for o in obs),
    )


# JSON-lines I/O ---------------------------------------------------------------------

def _clean(x: float):
    return None if not math.isfinite(x) else float(x)


def sample_to_json(s: LayerStackSample, extra: Optional[dict] = None) -> dict:
    feats = s.node_features
    thick = np.where(s.mask > 0, s.thickness, np.nan)
    rec = {
        "id": s.sample_id,
        "lat": feats[:, 0].tolist(),
        "lon": feats[:, 1].tolist(),
        "phys": [feats[:, 2 + j].tolist() for j in range(len(PHYS_FIELDS))],
        "thickness": [[_clean(v) for v in thick[:, t]] for t in range(s.n_layers)],
        "adjacency": s.adjacency_spec.to_json(),
    }
    if extra:
        rec.update(extra)
    return rec


def sample_from_json(rec: dict) -> LayerStackSample:
    try:
        lat = np.asarray(rec["lat"], dtype=np.float64)
        lon = np.asarray(rec["lon"], dtype=np.float64)
        phys = rec["phys"]
        if len(phys) != len(PHYS_FIELDS):
            raise DatasetFormatError(f"expected {len(PHYS_FIELDS)} physical fields, got {len(phys)}")
        cols = [lat, lon] + [np.asarray(p, dtype=np.float64) for p in phys]
        if any(c.shape != lat.shape for c in cols):
            raise DatasetFormatError("lat/lon/phys arrays differ in length")
        feats = np.stack(cols, axis=1)
        layers = rec["thickness"]
        n = lat.shape[0]
        thick = np.full((n, len(layers)), MISSING)
        for t, layer in enumerate(layers):
            if len(layer) != n:
                raise DatasetFormatError(f"thickness layer {t} has {len(layer)} entries, expected {n}")
            thick[:, t] = [MISSING if v is None else float(v) for v in layer]
        mask = np.isfinite(thick).astype(np.int8)
        adj = rec.get("adjacency", {"scheme": "chain", "k": 2})
        spec = AdjacencySpec(str(adj.get("scheme", "chain")), int(adj.get("k", 2)))
        return LayerStackSample(feats, thick, mask, spec, str(rec.get("id", "")))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DatasetFormatError):
            raise
        raise DatasetFormatError(f"malformed sample: {exc}") from exc


def iter_jsonl(path) -> Iterator[tuple[int, dict]]:
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"invalid JSON: {exc.msg}", lineno, path) from exc


def read_jsonl(path) -> list[LayerStackSample]:
    out = []
    for lineno, rec in iter_jsonl(path):
        try:
            out.append(sample_from_json(rec))
        except DatasetFormatError as exc:
            raise DatasetFormatError(str(exc), lineno, path) from exc
    return out


def write_jsonl(path, samples: Iterable[LayerStackSample], extras: Optional[Iterable[dict]] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    extras = list(extras) if extras is not None else None
    with open(path, "w", encoding="utf-8") as fh:
        for i, s in enumerate(samples):
            rec = sample_to_json(s, extras[i] if extras else None)
            fh.write(json.dumps(rec, allow_nan=False))
            fh.write("\n")
