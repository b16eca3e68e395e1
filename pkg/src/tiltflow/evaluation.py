"""Statistical verification: two-sample distances, coverage, alignment,
and the feature-embedding distance scan.

All statistics are deterministic given inputs and seed; pairwise sums use a
fixed chunk order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .batchio import SampleBatch
from .net import ModelParams, Workspace, forward_projection, forward_velocity_batch
from .rng import derive_seed, stream
from .sampling import SamplerConfig, sample_sde
from .world import ConditionFeature, cell_index, feature_rows, in_support, project_to_support

DEFAULT_BOUNDS = (-1.5, 1.5)
DEFAULT_SHAPE = (40, 40)
DEFAULT_SMOOTHING = 1e-4
_PAIR_CAP = 4000
_RATIO_FLOOR = 1e-6


def _points(batch) -> np.ndarray:
    if isinstance(batch, SampleBatch):
        return batch.points
    return np.atleast_2d(np.asarray(batch, dtype=np.float64))


@dataclass
class GridHistogram:
    """Counts of points on a square grid, with additive smoothing.

    Points outside the bounds are clamped into the boundary cells so every
    sample is counted. Smoothed masses sum to 1.
    """

    bounds: tuple[float, float] = DEFAULT_BOUNDS
    shape: tuple[int, int] = DEFAULT_SHAPE
    smoothing: float = DEFAULT_SMOOTHING
    counts: np.ndarray = field(default_factory=lambda: np.zeros(DEFAULT_SHAPE))

    @classmethod
    def from_points(cls, points, bounds=DEFAULT_BOUNDS, shape=DEFAULT_SHAPE,
                    smoothing=DEFAULT_SMOOTHING) -> "GridHistogram":
        pts = _points(points)
        lo, hi = bounds
        nx, ny = shape
        ix = np.clip(((pts[:, 0] - lo) / (hi - lo) * nx).astype(np.int64), 0, nx - 1)
        iy = np.clip(((pts[:, 1] - lo) / (hi - lo) * ny).astype(np.int64), 0, ny - 1)
        counts = np.zeros(shape)
        np.add.at(counts, (ix, iy), 1.0)
        return cls(bounds=bounds, shape=shape, smoothing=smoothing, counts=counts)

    @classmethod
    def from_masses(cls, masses: np.ndarray, bounds=DEFAULT_BOUNDS,
                    smoothing=DEFAULT_SMOOTHING) -> "GridHistogram":
        m = np.asarray(masses, dtype=np.float64)
        return cls(bounds=bounds, shape=m.shape, smoothing=smoothing, counts=m)

    def smoothed_masses(self) -> np.ndarray:
        total = self.counts.sum()
        if total <= 0:
            raise ValueError("histogram holds no mass")
        k = self.counts.size
        return (self.counts / total + self.smoothing) / (1.0 + self.smoothing * k)


def _mean_cross_distance(a: np.ndarray, b: np.ndarray, block: int = 512) -> float:
    total = 0.0
    for i in range(0, a.shape[0], block):
        diff = a[i:i + block, None, :] - b[None, :, :]
        total += float(np.sqrt(np.sum(diff * diff, axis=2)).sum())
    return total / (a.shape[0] * b.shape[0])


def energy_distance(a, b, cap: int = _PAIR_CAP, seed: int = 0) -> float:
    """Two-sample energy distance 2 E||A-B|| - E||A-A'|| - E||B-B'||.

    All-pairs means include self pairs, so identical batches give exactly 0.
    Batches larger than `cap` are subsampled without replacement from a
    seeded stream.
    """
    pa, pb = _points(a), _points(b)
    if pa.shape[0] == 0 or pb.shape[0] == 0:
        raise ValueError("energy distance needs non-empty batches")
    rng = stream(seed, "eval-subsample")
    if pa.shape[0] > cap:
        pa = pa[np.sort(rng.choice(pa.shape[0], cap, replace=False))]
    if pb.shape[0] > cap:
        pb = pb[np.sort(rng.choice(pb.shape[0], cap, replace=False))]
    return 2.0 * _mean_cross_distance(pa, pb) - _mean_cross_distance(pa, pa) - _mean_cross_distance(pb, pb)


def symmetric_kl_grid(a, b, bounds=DEFAULT_BOUNDS, shape=DEFAULT_SHAPE,
                      smoothing=DEFAULT_SMOOTHING) -> float:
    """Symmetric KL between smoothed grid histograms: sum (p-q) (log p - log q)."""
    p = GridHistogram.from_points(a, bounds, shape, smoothing).smoothed_masses()
    q = GridHistogram.from_points(b, bounds, shape, smoothing).smoothed_masses()
    return float(np.sum((p - q) * (np.log(p) - np.log(q))))


def symmetric_kl_masses(p: np.ndarray, q: np.ndarray, smoothing=DEFAULT_SMOOTHING) -> float:
    """Symmetric KL between two raw mass arrays after the same smoothing."""
    ps = GridHistogram.from_masses(p, smoothing=smoothing).smoothed_masses()
    qs = GridHistogram.from_masses(q, smoothing=smoothing).smoothed_masses()
    return float(np.sum((ps - qs) * (np.log(ps) - np.log(qs))))


def coverage(batch, margin: float = 0.0) -> tuple[float, float, float]:
    """Fractions of the batch inside the dilated support and inside each cell."""
    if margin < 0:
        raise ValueError("margin must be >= 0")
    pts = _points(batch)
    idx = cell_index(pts, margin)
    n = pts.shape[0]
    return (float(np.mean(idx >= 0)), float(np.mean(idx == 0)), float(np.mean(idx == 1)))


def alignment_score(params: ModelParams, batch) -> float:
    """Mean similarity between the projected tap feature at t = 0 and the
    ground-truth feature of the same point; near 1 for a well-aligned model."""
    pts = _points(batch)
    targets = feature_rows(pts)  # raises for out-of-support points
    ws = Workspace(params.arch, pts.shape[0])
    _, tape = forward_velocity_batch(params, pts, 0.0, ws)
    feats = forward_projection(params, tape, ws).rows
    return float(np.mean(np.sum(feats * targets, axis=1)))


@dataclass
class EmbedScanReport:
    """Per-pair (squared feature distance, distance estimate, estimator
    variance) plus the fitted ratio bounds."""

    pairs: list[tuple[float, float, float]]
    a_bound: float
    b_bound: float
    ratio: float
    correlation: float

    def to_dict(self) -> dict:
        return {
            "A": self.a_bound,
            "B": self.b_bound,
            "ratio": self.ratio,
            "correlation": self.correlation,
            "pairs": [{"feat_dist_sq": d, "d2": v, "d2_var": s} for d, v, s in self.pairs],
        }


def _mean_feature(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo mean of the point features and its covariance / n.

    Out-of-support samples are projected onto the support first (the
    integrator stops at t_end > 0, so a small fraction lands just outside).
    """
    feats = feature_rows(project_to_support(points))
    cov = np.cov(feats, rowvar=False) / feats.shape[0]
    return feats.mean(axis=0), cov


def embed_scan(
    params: ModelParams,
    pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    lam: float,
    n_per_condition: int,
    sampler: SamplerConfig,
    seed: int = 0,
) -> EmbedScanReport:
    """Estimate the conditional-density distance for feature pairs.

    For each pair, draws guided batches conditioned on each feature and
    evaluates d2 = lam * <E1[phi] - E2[phi], phi1 - phi2> with Monte-Carlo
    means. Pairs with squared feature distance below 1e-6 are skipped.
    Reports the min and max ratio d2 / feat_dist_sq and their spread.
    """
    from .net import FeatureMap
    from .potentials import IPAPotential, make_weight_matrix

    results = []
    for j, (f1, f2) in enumerate(pairs):
        f1 = np.asarray(f1, dtype=np.float64).reshape(2)
        f2 = np.asarray(f2, dtype=np.float64).reshape(2)
        dist_sq = float(np.sum((f1 - f2) ** 2))
        if dist_sq < _RATIO_FLOOR:
            continue
        means = []
        var_terms = []
        for s, f in enumerate((f1, f2)):
            spec = IPAPotential(make_weight_matrix("full_map", 1),
                                FeatureMap(rows=f[None, :], normalized=True))
            cfg = SamplerConfig(
                steps=sampler.steps, t_start=sampler.t_start, t_end=sampler.t_end,
                mode="guided_sde", guidance=(spec, lam), convention=sampler.convention,
                seed=derive_seed(seed, "embed", 2 * j + s),
            )
            batch = sample_sde(params, cfg, n_per_condition)
            mean, cov = _mean_feature(batch.points)
            means.append(mean)
            var_terms.append(cov)
        delta = f1 - f2
        d2 = float(lam * (means[0] - means[1]) @ delta)
        d2_var = float(lam**2 * delta @ (var_terms[0] + var_terms[1]) @ delta)
        results.append((dist_sq, d2, d2_var))
    if not results:
        raise ValueError("no usable pairs: all had squared feature distance below 1e-6")
    ratios = [d2 / d for d, d2, _ in results]
    a_bound = float(min(ratios))
    b_bound = float(max(ratios))
    dists = np.array([r[0] for r in results])
    d2s = np.array([r[1] for r in results])
    if len(results) >= 2 and np.std(dists) > 0 and np.std(d2s) > 0:
        corr = float(np.corrcoef(dists, d2s)[0, 1])
    else:
        corr = float("nan")
    ratio = b_bound / a_bound if a_bound != 0 else float("inf")
    return EmbedScanReport(pairs=results, a_bound=a_bound, b_bound=b_bound,
                           ratio=ratio, correlation=corr)
