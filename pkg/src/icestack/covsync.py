"""Covariate synchronization: gridded fields -> radar node locations.

Triangulation is Bowyer-Watson with a super-triangle on normalized
coordinates, followed by a pocket fill on the hull and a Lawson flip pass
so the result is Delaunay and covers the convex hull even when the
super-triangle clipped a hull edge.  Inside a triangle values are
barycentric (piecewise linear); outside the hull the nearest input point
is used and the query is flagged.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph_stack import PHYS_FIELDS

INCIRCLE_TOL = 1e-12
_SUPER = 1.0e3


class GeometryError(ValueError):
    pass


class FieldCountError(ValueError):
    pass


@dataclass
class GriddedField:
    points: np.ndarray  # (P, 2) x, y
    values: np.ndarray  # (P,)
    name: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.points.shape[0] != self.values.shape[0]:
            raise GeometryError(f"{self.name}: {self.points.shape[0]} points but {self.values.shape[0]} values")
        if not np.all(np.isfinite(self.values)):
            raise GeometryError(f"{self.name}: non-finite field values")


@dataclass
class Triangulation:
    points: np.ndarray  # (P, 2) original coordinates
    triangles: np.ndarray  # (M, 3) vertex indices, counter-clockwise
    neighbors: np.ndarray  # (M, 3) triangle opposite each vertex, -1 on the hull
    origin: np.ndarray
    extent: float

    def normalized(self, xy) -> np.ndarray:
        return (np.asarray(xy, dtype=np.float64) - self.origin) / self.extent


def orient(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def incircle(a, b, c, d) -> float:
    """Positive when d is strictly inside the circumcircle of CCW triangle abc."""
    adx, ady = a[0] - d[0], a[1] - d[1]
    bdx, bdy = b[0] - d[0], b[1] - d[1]
    cdx, cdy = c[0] - d[0], c[1] - d[1]
    ad = adx * adx + ady * ady
    bd = bdx * bdx + bdy * bdy
    cd = cdx * cdx + cdy * cdy
    return (
        adx * (bdy * cd - bd * cdy)
        - ady * (bdx * cd - bd * cdx)
        + ad * (bdx * cdy - bdy * cdx)
    )


def _incircle_many(tri_xy: np.ndarray, d: np.ndarray) -> np.ndarray:
    rel = tri_xy - d
    sq = (rel * rel).sum(axis=2)
    ax, ay, a2 = rel[:, 0, 0], rel[:, 0, 1], sq[:, 0]
    bx, by, b2 = rel[:, 1, 0], rel[:, 1, 1], sq[:, 1]
    cx, cy, c2 = rel[:, 2, 0], rel[:, 2, 1], sq[:, 2]
    return ax * (by * c2 - b2 * cy) - ay * (bx * c2 - b2 * cx) + a2 * (bx * cy - by * cx)


def _check_input(pts: np.ndarray) -> None:
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise GeometryError(f"points must be (P, 2), got {pts.shape}")
    if pts.shape[0] < 3:
        raise GeometryError(f"need at least 3 points, got {pts.shape[0]}")
    if not np.all(np.isfinite(pts)):
        raise GeometryError("non-finite coordinates")
    uniq = np.unique(pts, axis=0)
    if uniq.shape[0] != pts.shape[0]:
        raise GeometryError(f"{pts.shape[0] - uniq.shape[0]} duplicate point(s)")


def _ccw(tri, xy) -> tuple:
    a, b, c = tri
    return (a, b, c) if orient(xy[a], xy[b], xy[c]) > 0 else (a, c, b)


def _edge_map(tris: list) -> dict:
    edges: dict = {}
    for ti, (a, b, c) in enumerate(tris):
        for u, v in ((a, b), (b, c), (c, a)):
            edges[(u, v)] = ti
    return edges


def _bowyer_watson(xy: np.ndarray) -> list:
    n = xy.shape[0]
    sup = np.array([[-_SUPER, -_SUPER], [_SUPER * 2 + 1, -_SUPER], [-_SUPER, _SUPER * 2 + 1]])
    allxy = np.vstack([xy, sup])
    cap = 2 * n + 8
    verts = np.zeros((cap, 3), dtype=np.int64)
    alive = np.zeros(cap, dtype=bool)
    verts[0] = (n, n + 1, n + 2)
    alive[0] = True
    count = 1
    for p in range(n):
        live = np.nonzero(alive[:count])[0]
        det = _incircle_many(allxy[verts[live]], allxy[p])
        bad = live[det > INCIRCLE_TOL]
        if bad.size == 0:
            # p sits on a circumcircle of every candidate; fall back to containment
            tri_xy = allxy[verts[live]]
            bad = live[[_contains(t, allxy[p]) for t in tri_xy]][:1]
        boundary: dict = {}
        for ti in bad:
            a, b, c = verts[ti]
            for u, v in ((a, b), (b, c), (c, a)):
                if (v, u) in boundary:
                    del boundary[(v, u)]
                else:
                    boundary[(u, v)] = True
        alive[bad] = False
        need = count + len(boundary)
        if need > cap:
            cap = max(2 * cap, need)
            verts = np.resize(verts, (cap, 3))
            alive = np.concatenate([alive, np.zeros(cap - alive.shape[0], dtype=bool)])
        for u, v in boundary:
            verts[count] = (u, v, p)
            alive[count] = True
            count += 1
    tris = []
    for ti in np.nonzero(alive[:count])[0]:
        a, b, c = (int(v) for v in verts[ti])
        if a < n and b < n and c < n:
            tris.append(_ccw((a, b, c), xy))
    return tris


def _contains(tri_xy, p, tol: float = 1e-14) -> bool:
    a, b, c = tri_xy
    return orient(a, b, p) >= -tol and orient(b, c, p) >= -tol and orient(c, a, p) >= -tol


def _fill_pockets(tris: list, xy: np.ndarray) -> list:
    """Close concave notches on the boundary left by super-triangle removal."""
    changed = True
    while changed:
        changed = False
        edges = _edge_map(tris)
        succ = {u: v for (u, v) in edges if (v, u) not in edges}
        for a, b in list(succ.items()):
            c = succ.get(b)
            if c is None or c == a:
                continue
            turn = orient(xy[a], xy[b], xy[c])
            if turn < -1e-14:
                tris.append((a, c, b))
                changed = True
                break
    return tris


def _legalize(tris: list, xy: np.ndarray) -> list:
    """Lawson flips until every interior edge passes the in-circle test."""
    for _ in range(10 * len(tris) + 10):
        edges = _edge_map(tris)
        flipped = False
        for (u, v), t1 in edges.items():
            t2 = edges.get((v, u))
            if t2 is None or u > v:
                continue
            a = next(w for w in tris[t1] if w not in (u, v))
            d = next(w for w in tris[t2] if w not in (u, v))
            if incircle(xy[u], xy[v], xy[a], xy[d]) > INCIRCLE_TOL:
                # quad u-d-v-a must be convex for the flip to be valid
                if orient(xy[a], xy[d], xy[u]) * orient(xy[a], xy[d], xy[v]) >= 0:
                    continue
                tris[t1] = _ccw((a, d, v), xy)
                tris[t2] = _ccw((a, u, d), xy)
                flipped = True
                break
        if not flipped:
            return tris
    return tris


def delaunay(points) -> Triangulation:
    pts = np.asarray(points, dtype=np.float64)
    _check_input(pts)
    origin = pts.min(axis=0)
    extent = float((pts.max(axis=0) - origin).max())
    xy = (pts - origin) / extent
    d = xy - xy[0]
    cross = d[:, 0][:, None] * d[:, 1][None, :] - d[:, 1][:, None] * d[:, 0][None, :]
    if np.abs(cross).max() <= 1e-12:
        raise GeometryError("all points are collinear")
    tris = _bowyer_watson(xy)
    tris = _fill_pockets(tris, xy)
    tris = _legalize(tris, xy)
    tri_arr = np.array(tris, dtype=np.int64).reshape(-1, 3)
    edges = _edge_map(tris)
    nbr = np.full(tri_arr.shape, -1, dtype=np.int64)
    for ti, (a, b, c) in enumerate(tris):
        # neighbor opposite vertex k shares the edge not containing it
        for k, (u, v) in enumerate(((b, c), (c, a), (a, b))):
            nbr[ti, k] = edges.get((v, u), -1)
    return Triangulation(pts, tri_arr, nbr, origin, extent)


def _barycentric_all(tri: Triangulation, q: np.ndarray) -> np.ndarray:
    xy = tri.normalized(tri.points)
    a = xy[tri.triangles[:, 0]]
    b = xy[tri.triangles[:, 1]]
    c = xy[tri.triangles[:, 2]]
    det = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    wb = ((q[0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (q[1] - a[:, 1]) * (c[:, 0] - a[:, 0])) / det
    wc = ((b[:, 0] - a[:, 0]) * (q[1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (q[0] - a[:, 0])) / det
    return np.stack([1.0 - wb - wc, wb, wc], axis=1)


def interpolate(tri: Triangulation, values, query) -> tuple[float, bool]:
    """Value at ``query`` and whether it was extrapolated (outside the hull)."""
    vals = np.asarray(values, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64)
    dist = ((tri.points - q) ** 2).sum(axis=1)
    nearest = int(np.argmin(dist))
    if dist[nearest] == 0.0:
        return float(vals[nearest]), False
    w = _barycentric_all(tri, tri.normalized(q))
    score = w.min(axis=1)
    best = int(np.argmax(score))
    if score[best] < -1e-12:
        return float(vals[nearest]), True
    idx = tri.triangles[best]
    return float(w[best] @ vals[idx]), False


def interpolate_many(tri: Triangulation, values, queries) -> tuple[np.ndarray, np.ndarray]:
    qs = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    out = np.empty(qs.shape[0])
    flags = np.zeros(qs.shape[0], dtype=bool)
    for i, q in enumerate(qs):
        out[i], flags[i] = interpolate(tri, values, q)
    return out, flags


def sync_covariates(fields: Sequence[GriddedField], nodes) -> tuple[np.ndarray, np.ndarray]:
    """Interpolate each of the five fields at every (lat, lon) node.

    Field points are read as ``x = lat``, ``y = lon`` in the same planar frame
    as the nodes.  Returns the (N, 5) covariate matrix and matching flags.
    """
    if len(fields) != len(PHYS_FIELDS):
        raise FieldCountError(f"expected exactly {len(PHYS_FIELDS)} covariate fields, got {len(fields)}")
    nodes = np.asarray(nodes, dtype=np.float64).reshape(-1, 2)
    cov = np.empty((nodes.shape[0], len(fields)))
    flags = np.zeros(cov.shape, dtype=bool)
    for j, f in enumerate(fields):
        tri = delaunay(f.points)
        cov[:, j], flags[:, j] = interpolate_many(tri, f.values, nodes)
    return cov, flags


def read_field_csv(path, name: str = "") -> GriddedField:
    pts, vals = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"x", "y", "value"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: header must contain x,y,value")
        for lineno, row in enumerate(reader, start=2):
            try:
                pts.append((float(row["x"]), float(row["y"])))
                vals.append(float(row["value"]))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return GriddedField(np.array(pts), np.array(vals), name or Path(path).stem)


def read_nodes_csv(path) -> np.ndarray:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"lat", "lon"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: header must contain lat,lon")
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append((float(row["lat"]), float(row["lon"])))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return np.array(rows, dtype=np.float64).reshape(-1, 2)


def write_covariates_csv(path, cov: np.ndarray, flags: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(PHYS_FIELDS) + ["extrapolated"])
        for row, fl in zip(cov, flags):
            w.writerow([repr(float(v)) for v in row] + [int(fl.any())])
