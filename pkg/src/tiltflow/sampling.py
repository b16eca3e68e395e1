"""Reverse-time generation: probability-flow Euler and Euler-Maruyama.

The deterministic sampler integrates dx/dt = v(x, t) backward on a uniform
grid. The stochastic sampler integrates the reverse-time SDE whose drift is
v - t * score with diffusion sqrt(2t); the score comes from the algebraic
inversion of the velocity/score relation under the linear schedule. Guided
runs add a potential-gradient drift term, -2 * lam * t * grad_x V by
default, steering the terminal law toward the tilted density. Time is
clipped into [eps, 1 - eps] inside drift evaluations to dodge the 1/t
inversion singularity; the Brownian scale uses the raw grid time.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .batchio import SampleBatch
from .net import ModelParams, Workspace, backward_batch, forward_projection, forward_velocity_batch
from .potentials import PotentialSpec, grad_rows
from .rng import stream
from .world import DomainError

MODES = ("ode", "sde", "guided_sde")
CONVENTIONS = ("prop2", "eq7")


@dataclass
class SamplerConfig:
    steps: int = 250
    t_start: float = 1.0
    t_end: float = 1e-3
    mode: str = "sde"
    guidance: Optional[tuple[PotentialSpec, float]] = None
    convention: str = "prop2"
    seed: int = 0
    record_trajectory: bool = False
    zero_diffusion: bool = False  # testing hook: drift-only trajectories

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 < self.t_end < self.t_start <= 1.0:
            raise ValueError(f"need 0 < t_end < t_start <= 1, got ({self.t_start}, {self.t_end})")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.convention not in CONVENTIONS:
            raise ValueError(f"convention must be one of {CONVENTIONS}")
        if self.guidance is not None:
            _, lam = self.guidance
            if not np.isfinite(lam) or lam < 0.0:
                raise ValueError(f"guidance scale must be finite and >= 0, got {lam}")
        if self.mode == "guided_sde" and self.guidance is None:
            raise ValueError("guided_sde mode needs a guidance spec")

    @property
    def eps(self) -> float:
        return self.t_end

    def settings_dict(self) -> dict:
        d = {
            "steps": self.steps,
            "t_start": self.t_start,
            "t_end": self.t_end,
            "mode": self.mode,
            "convention": self.convention,
            "seed": self.seed,
        }
        if self.guidance is not None:
            d["lam"] = self.guidance[1]
        return d


@dataclass
class TrajectoryRecord:
    """Per-step states (steps + 1 of them) plus the terminal batch."""

    states: np.ndarray
    batch: SampleBatch


def velocity_to_score(v: np.ndarray, x: np.ndarray, t: float, eps: float = 1e-3) -> np.ndarray:
    """Invert the velocity/score relation: score = -((1 - t) v + x) / t.

    Valid only for t in [eps, 1 - eps]; callers clip first.
    """
    if not eps <= t <= 1.0 - eps:
        raise DomainError(f"t={t} outside the clipped range [{eps}, {1.0 - eps}]")
    v = np.asarray(v, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    return -((1.0 - t) * v + x) / t


def _clip_time(t: float, eps: float) -> float:
    return min(max(t, eps), 1.0 - eps)


def drift_batch(
    params: ModelParams,
    points: np.ndarray,
    t: float,
    guidance: Optional[tuple[PotentialSpec, float]] = None,
    eps: float = 1e-3,
    convention: str = "prop2",
    ws: Optional[Workspace] = None,
) -> np.ndarray:
    """Reverse-SDE drift v - t * score at clipped time, plus the guidance term.

    The guidance term is -f * lam * t * grad_x V(feats(x, t), .) with f = 2
    under the default convention and f = 1 under "eq7"; the input gradient
    chains the potential gradient through the projection normalization and
    the trunk.
    """
    tc = _clip_time(float(t), eps)
    v, tape = forward_velocity_batch(params, points, tc, ws)
    base = v - tc * velocity_to_score(v, points, tc, eps)
    if not np.all(np.isfinite(base)):
        raise FloatingPointError(f"non-finite drift at t={t}")
    if guidance is None:
        return base
    spec, lam = guidance
    if lam == 0.0:
        return base
    feats = forward_projection(params, tape, ws).rows
    pot_grad = grad_rows(spec, feats)
    _, x_grad = backward_batch(params, tape, v_grad=None, h_grad=pot_grad, ws=ws,
                               need_param_grads=False)
    factor = 2.0 if convention == "prop2" else 1.0
    out = base - factor * lam * tc * x_grad
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite guided drift at t={t}")
    return out


def drift(
    params: ModelParams,
    x,
    t: float,
    guidance: Optional[tuple[PotentialSpec, float]] = None,
    eps: float = 1e-3,
    convention: str = "prop2",
) -> np.ndarray:
    """Single-point drift evaluation."""
    pts = np.asarray(x, dtype=np.float64).reshape(1, 2)
    return drift_batch(params, pts, t, guidance, eps, convention)[0]


def euler_ode(
    drift_fn: Callable[[np.ndarray, float], np.ndarray],
    x_init: np.ndarray,
    t_start: float,
    t_end: float,
    steps: int,
    record: bool = False,
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Backward Euler sweep x <- x - dt * drift(x, t) on a uniform grid."""
    dt = (t_start - t_end) / steps
    x = np.array(x_init, dtype=np.float64)
    states = np.empty((steps + 1,) + x.shape) if record else None
    if record:
        states[0] = x
    for k in range(steps):
        t = t_start - k * dt
        x = x - dt * drift_fn(x, t)
        if record:
            states[k + 1] = x
    return x, states


def euler_maruyama(
    drift_fn: Callable[[np.ndarray, float], np.ndarray],
    x_init: np.ndarray,
    noise: np.ndarray,
    t_start: float,
    t_end: float,
    steps: int,
    diffusion_scale: float = 1.0,
    record: bool = False,
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Reverse-time Euler-Maruyama with Brownian scale sqrt(2 t dt).

    t is the pre-step grid time; `noise` supplies the (steps, ...) standard
    normal increments so determinism is the caller's choice.
    """
    dt = (t_start - t_end) / steps
    x = np.array(x_init, dtype=np.float64)
    if noise.shape[0] != steps:
        raise ValueError(f"noise must have {steps} leading entries, got {noise.shape[0]}")
    states = np.empty((steps + 1,) + x.shape) if record else None
    if record:
        states[0] = x
    for k in range(steps):
        t = t_start - k * dt
        x = x - dt * drift_fn(x, t) + diffusion_scale * np.sqrt(2.0 * t * dt) * noise[k]
        if record:
            states[k + 1] = x
    return x, states


def _chain_streams(seed: int, n: int, steps: int, with_increments: bool) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Initial noise and per-step increments, one independent stream per chain.

    Chain c's stream depends only on (seed, c), so results are unchanged by
    the number of chains run together or any parallel schedule.
    """
    x0 = np.empty((n, 2))
    xi = np.empty((steps, n, 2)) if with_increments else None
    for c in range(n):
        g = stream(seed, "sampler", c)
        x0[c] = g.standard_normal(2)
        if with_increments:
            xi[:, c, :] = g.standard_normal((steps, 2))
    return x0, xi


def sample_ode(params: ModelParams, config: SamplerConfig, n: int):
    """Deterministic probability-flow sweep from Gaussian noise."""
    if n < 1:
        raise ValueError("need n >= 1")
    x0, _ = _chain_streams(config.seed, n, config.steps, with_increments=False)
    ws = Workspace(params.arch, n)

    def f(x, t):
        v, _ = forward_velocity_batch(params, x, t, ws)
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(f"non-finite velocity at t={t}")
        return v

    final, states = euler_ode(f, x0, config.t_start, config.t_end, config.steps,
                              record=config.record_trajectory)
    batch = SampleBatch(points=final, seed=config.seed,
                        settings={"op": "sample_ode", "n": n, **config.settings_dict()})
    if config.record_trajectory:
        return TrajectoryRecord(states=states, batch=batch)
    return batch


def sample_sde(params: ModelParams, config: SamplerConfig, n: int,
               guidance: Optional[tuple[PotentialSpec, float]] = None):
    """Stochastic sweep; passes the guidance spec into the drift when guided.

    A guidance scale of exactly zero consumes the same random streams and
    produces bit-identical output to the plain stochastic mode.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    if config.mode not in ("sde", "guided_sde"):
        raise ValueError(f"sample_sde needs an sde mode, got '{config.mode}'")
    if guidance is None:
        guidance = config.guidance if config.mode == "guided_sde" else None
    x0, xi = _chain_streams(config.seed, n, config.steps, with_increments=True)
    ws = Workspace(params.arch, n)

    def f(x, t):
        return drift_batch(params, x, t, guidance, config.eps, config.convention, ws)

    final, states = euler_maruyama(
        f, x0, xi, config.t_start, config.t_end, config.steps,
        diffusion_scale=0.0 if config.zero_diffusion else 1.0,
        record=config.record_trajectory,
    )
    settings = {"op": "sample_sde", "n": n, **config.settings_dict()}
    batch = SampleBatch(points=final, seed=config.seed, settings=settings)
    if config.record_trajectory:
        return TrajectoryRecord(states=states, batch=batch)
    return batch
