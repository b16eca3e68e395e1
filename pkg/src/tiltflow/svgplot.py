"""Self-contained deterministic SVG scatter plots of sample batches."""
from __future__ import annotations

import numpy as np

from .world import CELL_LOW, CELL_SIDE

VIEW = 600  # pixels per side
BOUNDS = (-1.5, 1.5)
BASE_COLOR = "#9a9a9a"
OVERLAY_COLOR = "#cc2222"


def _px(value: float, flip: bool = False) -> str:
    lo, hi = BOUNDS
    frac = (value - lo) / (hi - lo)
    if flip:
        frac = 1.0 - frac
    return f"{frac * VIEW:.2f}"


def scatter_svg(base: np.ndarray, overlay: np.ndarray | None = None) -> str:
    """Scatter `base` in grey and `overlay` in red over the support outline.

    Fixed viewport over [-1.5, 1.5]^2; output depends only on the inputs, so
    identical batches give byte-identical SVG.
    """
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{VIEW}" height="{VIEW}" '
        f'viewBox="0 0 {VIEW} {VIEW}">',
        f'<rect x="0" y="0" width="{VIEW}" height="{VIEW}" fill="white" stroke="#333333"/>',
    ]
    # axes through the origin
    parts.append(f'<line x1="{_px(-1.5)}" y1="{_px(0.0, True)}" x2="{_px(1.5)}" '
                 f'y2="{_px(0.0, True)}" stroke="#dddddd"/>')
    parts.append(f'<line x1="{_px(0.0)}" y1="{_px(-1.5, True)}" x2="{_px(0.0)}" '
                 f'y2="{_px(1.5, True)}" stroke="#dddddd"/>')
    for lo in CELL_LOW:
        x = _px(float(lo[0]))
        y = _px(float(lo[1] + CELL_SIDE), True)
        side = f"{CELL_SIDE / (BOUNDS[1] - BOUNDS[0]) * VIEW:.2f}"
        parts.append(f'<rect x="{x}" y="{y}" width="{side}" height="{side}" '
                     f'fill="none" stroke="#555555" stroke-width="1.5"/>')
    for pts, color, r in ((base, BASE_COLOR, 2.0), (overlay, OVERLAY_COLOR, 2.0)):
        if pts is None:
            continue
        for a, b in np.atleast_2d(np.asarray(pts, dtype=np.float64)).reshape(-1, 2):
            parts.append(f'<circle cx="{_px(a)}" cy="{_px(b, True)}" r="{r}" '
                         f'fill="{color}" fill-opacity="0.55"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
