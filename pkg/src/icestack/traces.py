"""Per-layer boundary traces of a completed stack as CSV rows and a plain SVG."""

from __future__ import annotations

import csv
from typing import Optional
from xml.sax.saxutils import escape

import numpy as np

OBSERVED_COLOR = "#1f77b4"
MODEL_COLOR = "#ff7f0e"


def boundary_depths(thickness: np.ndarray) -> np.ndarray:
    """Depth (pixels below the first boundary) of the lower boundary of each layer."""
    return np.cumsum(np.asarray(thickness, dtype=np.float64), axis=1)


def write_traces_csv(path, thickness: np.ndarray, observed: Optional[np.ndarray] = None) -> None:
    depth = boundary_depths(thickness)
    n, T = thickness.shape
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "node", "thickness", "boundary_depth", "observed"])
        for t in range(T):
            for i in range(n):
                obs = "" if observed is None else int(observed[i, t])
                w.writerow([t, i, repr(float(thickness[i, t])), repr(float(depth[i, t])), obs])


def _points(xs, ys) -> str:
    return " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))


def traces_svg(thickness: np.ndarray, observed: Optional[np.ndarray] = None, title: str = "",
               width: int = 800, height: int = 500) -> str:
    """One orange polyline per layer (model output); observed runs overlaid in blue."""
    depth = boundary_depths(thickness)
    n, T = thickness.shape
    pad = 40
    xmax = max(n - 1, 1)
    ymax = float(depth.max()) if depth.size and depth.max() > 0 else 1.0
    xs = pad + np.arange(n) * (width - 2 * pad) / xmax
    def ypix(d):
        return pad + d * (height - 2 * pad) / ymax

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line class="axis" x1="{pad}" y1="{pad}" x2="{width - pad}" y2="{pad}" stroke="black"/>',
        f'<line class="axis" x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2:.0f}" y="{height - 8}" text-anchor="middle" font-size="12">along-track node</text>',
        f'<text x="12" y="{height / 2:.0f}" font-size="12" transform="rotate(-90 12 {height / 2:.0f})" text-anchor="middle">depth (px)</text>',
    ]
    if title:
        out.append(f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>')
    for t in range(T):
        out.append(f'<polyline class="completed" data-layer="{t}" fill="none" stroke="{MODEL_COLOR}" '
                   f'stroke-width="1.2" points="{_points(xs, ypix(depth[:, t]))}"/>')
    if observed is not None:
        for t in range(T):
            obs = np.asarray(observed[:, t]) > 0
            start = None
            for i in range(n + 1):
                on = i < n and obs[i]
                if on and start is None:
                    start = i
                elif not on and start is not None:
                    seg = slice(start, i)
                    out.append(f'<polyline class="observed" data-layer="{t}" fill="none" stroke="{OBSERVED_COLOR}" '
                               f'stroke-width="1.6" points="{_points(xs[seg], ypix(depth[seg, t]))}"/>')
                    start = None
    out.append("</svg>")
    return "\n".join(out)
