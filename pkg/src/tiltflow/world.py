"""Ground-truth toy world: data density, feature map, and sampling oracles.

The data distribution is uniform on two unit squares,
C1 = [-1,0] x [0,1] and C2 = [0,1] x [-1,0], with density 1/2 on their
union. Each in-support point gets a unit 2-vector feature built from its
normalized distances to the cell center and the nearest cell edges. Two
oracles live here: exact rejection sampling from the feature-tilted
density, and a closed-form Gaussian world for score/velocity identities.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .batchio import SampleBatch
from .net import FeatureMap
from .rng import resolve

# lower-left corners of the two support cells; both have side 1
CELL_LOW = np.array([[-1.0, 0.0], [0.0, -1.0]])
CELL_SIDE = 1.0
DENSITY = 0.5

# normalizers putting each distance in [0, 1] inside a unit cell
_CENTER_SCALE = math.sqrt(2.0) / 2.0
_EDGE_SCALE = 0.5
_DEGENERATE_EPS = 1e-12


class DomainError(ValueError):
    """Point outside the support, or time outside the valid interval."""


class EnvelopeError(RuntimeError):
    """Rejection acceptance rate collapsed; the tilt is too sharp."""


@dataclass(frozen=True)
class ConditionFeature:
    """Conditioning target: a unit feature vector and a guidance scale."""

    target: np.ndarray
    lam: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "target", np.asarray(self.target, dtype=np.float64).reshape(2))
        if abs(np.linalg.norm(self.target) - 1.0) > 1e-6:
            raise ValueError("condition target must be a unit vector (within 1e-6)")
        if not np.isfinite(self.lam) or self.lam < 0.0:
            raise ValueError(f"guidance scale must be finite and >= 0, got {self.lam}")


def cell_index(points: np.ndarray, margin: float = 0.0) -> np.ndarray:
    """0 for C1, 1 for C2, -1 outside (cells dilated by margin; C1 wins ties)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    idx = np.full(pts.shape[0], -1, dtype=np.int64)
    for c in (1, 0):  # check C1 last so it claims the shared corner
        lo = CELL_LOW[c] - margin
        hi = CELL_LOW[c] + CELL_SIDE + margin
        inside = np.all((pts >= lo) & (pts <= hi), axis=1)
        idx[inside] = c
    return idx


def in_support(points: np.ndarray, margin: float = 0.0) -> np.ndarray:
    return cell_index(points, margin) >= 0


def project_to_support(points: np.ndarray) -> np.ndarray:
    """Clamp each point into the nearer cell (identity for in-support points)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    best = None
    best_d = None
    for c in (0, 1):
        clamped = np.clip(pts, CELL_LOW[c], CELL_LOW[c] + CELL_SIDE)
        d = np.sum((pts - clamped) ** 2, axis=1)
        if best is None:
            best, best_d = clamped, d
        else:
            closer = d < best_d
            best = np.where(closer[:, None], clamped, best)
            best_d = np.minimum(d, best_d)
    return best


def sample_p0(n: int, seed: int | np.random.Generator) -> SampleBatch:
    """n i.i.d. points uniform on the two cells, equal cell probability."""
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    rng = resolve(seed, "p0")
    cells = rng.integers(0, 2, size=n)
    offsets = rng.random((n, 2)) * CELL_SIDE
    pts = CELL_LOW[cells] + offsets
    return SampleBatch(points=pts, seed=seed if isinstance(seed, int) else None,
                       settings={"op": "sample_p0", "n": n})


def _center_edge_distances(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Normalized distances to cell center / nearest vertical / horizontal edge."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    idx = cell_index(pts)
    if np.any(idx < 0):
        bad = pts[idx < 0][0]
        raise DomainError(f"point ({bad[0]:g}, {bad[1]:g}) outside the support")
    lo = CELL_LOW[idx]
    center = lo + CELL_SIDE / 2.0
    t = np.linalg.norm(pts - center, axis=1) / _CENTER_SCALE
    rel = pts - lo
    h = np.minimum(rel[:, 0], CELL_SIDE - rel[:, 0]) / _EDGE_SCALE
    w = np.minimum(rel[:, 1], CELL_SIDE - rel[:, 1]) / _EDGE_SCALE
    return t, h, w


def feature_rows(points: np.ndarray) -> np.ndarray:
    """Unit feature [t, h - w] / ||.|| for each in-support point.

    t is the distance to the cell center, h and w the distances to the
    nearest vertical and horizontal cell edges, each divided by its maximum
    attainable value inside a cell so all lie in [0, 1]. The exact cell
    center (t = 0, h = w) maps to [1, 0] by convention, as does anything
    within 1e-12 of it.
    """
    t, h, w = _center_edge_distances(points)
    second = h - w
    r = np.hypot(t, second)
    degenerate = r < _DEGENERATE_EPS
    r_safe = np.where(degenerate, 1.0, r)
    out = np.stack([t / r_safe, second / r_safe], axis=1)
    out[degenerate] = (1.0, 0.0)
    return out


def point_feature(x) -> FeatureMap:
    """Single-point feature as a 1 x 2 unit-normalized FeatureMap."""
    rows = feature_rows(np.asarray(x, dtype=np.float64).reshape(1, 2))
    return FeatureMap(rows=rows, normalized=True)


_PROBE_PROPOSALS = 1_000_000
_MIN_ACCEPT_RATE = 1e-6
_CHUNK = 131_072


def rejection_sample(cond: ConditionFeature, n: int, seed: int | np.random.Generator) -> SampleBatch:
    """Exact samples from the tilted density p0(x) * exp(lam * <feature(x), target>).

    Proposals come from p0 and are accepted with probability
    exp(lam * (s - 1)) where s is the feature similarity; the constant
    envelope exp(lam) is tight because s <= 1, so acceptance never exceeds 1.
    A collapsed acceptance rate (below 1e-6 after a probe of 10^6 proposals)
    raises EnvelopeError suggesting a smaller guidance scale.
    """
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    rng = resolve(seed, "oracle")
    out = np.empty((n, 2))
    filled = 0
    proposed = 0
    accepted = 0
    while filled < n:
        cells = rng.integers(0, 2, size=_CHUNK)
        offsets = rng.random((_CHUNK, 2)) * CELL_SIDE
        u = rng.random(_CHUNK)
        pts = CELL_LOW[cells] + offsets
        sim = feature_rows(pts) @ cond.target
        keep = u < np.exp(cond.lam * (sim - 1.0))
        got = pts[keep]
        take = min(n - filled, got.shape[0])
        out[filled:filled + take] = got[:take]
        filled += take
        proposed += _CHUNK
        accepted += got.shape[0]
        if proposed >= _PROBE_PROPOSALS and accepted / proposed < _MIN_ACCEPT_RATE:
            raise EnvelopeError(
                f"acceptance rate {accepted / proposed:.2e} after {proposed} proposals; "
                f"reduce the guidance scale (lam={cond.lam:g})"
            )
    return SampleBatch(points=out, seed=seed if isinstance(seed, int) else None,
                       settings={"op": "rejection_sample", "n": n,
                                 "lam": cond.lam, "target": cond.target.tolist()})


def tilted_cell_masses(cond: ConditionFeature, resolution: int = 400) -> np.ndarray:
    """Normalized tilted mass of each cell via midpoint quadrature."""
    masses = np.empty(2)
    for c in (0, 1):
        ax = CELL_LOW[c][0] + (np.arange(resolution) + 0.5) * (CELL_SIDE / resolution)
        ay = CELL_LOW[c][1] + (np.arange(resolution) + 0.5) * (CELL_SIDE / resolution)
        gx, gy = np.meshgrid(ax, ay, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
        sim = feature_rows(pts) @ cond.target
        masses[c] = np.exp(cond.lam * sim).sum() / resolution**2
    return masses / masses.sum()


def tilted_grid_masses(cond: ConditionFeature, bounds: tuple[float, float] = (-1.5, 1.5),
                       shape: tuple[int, int] = (40, 40), per_cell: int = 800) -> np.ndarray:
    """Tilted mass binned on a histogram grid, by fine midpoint quadrature."""
    lo, hi = bounds
    nx, ny = shape
    out = np.zeros((nx, ny))
    for c in (0, 1):
        step = CELL_SIDE / per_cell
        ax = CELL_LOW[c][0] + (np.arange(per_cell) + 0.5) * step
        ay = CELL_LOW[c][1] + (np.arange(per_cell) + 0.5) * step
        gx, gy = np.meshgrid(ax, ay, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
        weights = np.exp(cond.lam * (feature_rows(pts) @ cond.target))
        ix = np.clip(((pts[:, 0] - lo) / (hi - lo) * nx).astype(np.int64), 0, nx - 1)
        iy = np.clip(((pts[:, 1] - lo) / (hi - lo) * ny).astype(np.int64), 0, ny - 1)
        np.add.at(out, (ix, iy), weights)
    return out / out.sum()


def _check_time_open(t: float) -> None:
    if not 0.0 < t < 1.0:
        raise DomainError(f"t must lie in the open interval (0, 1), got {t}")


def gaussian_world_score(x, t: float, sigma0: float) -> np.ndarray:
    """Closed-form score of the interpolation marginal for N(0, sigma0^2 I) data.

    With the linear schedule, the marginal at time t is
    N(0, ((1-t)^2 sigma0^2 + t^2) I); sigma0 = 0 is the point-mass world.
    """
    _check_time_open(t)
    if sigma0 < 0:
        raise ValueError("sigma0 must be >= 0")
    var = (1.0 - t) ** 2 * sigma0**2 + t**2
    return -np.asarray(x, dtype=np.float64) / var


def gaussian_world_velocity(x, t: float, sigma0: float) -> np.ndarray:
    """Closed-form optimal velocity in the same analytic world."""
    _check_time_open(t)
    if sigma0 < 0:
        raise ValueError("sigma0 must be >= 0")
    var = (1.0 - t) ** 2 * sigma0**2 + t**2
    return (t - (1.0 - t) * sigma0**2) / var * np.asarray(x, dtype=np.float64)
