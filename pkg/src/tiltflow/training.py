"""Training loop: flow-matching regression plus feature alignment, via Adam.

Each step draws a batch of data points, fresh Gaussian endpoints and fresh
uniform times, regresses the network velocity onto the interpolation's time
derivative, and simultaneously pushes the projected tap feature toward the
ground-truth feature of the clean point. The two objectives combine as
loss_diff + beta * loss_align.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .net import Arch, ModelParams, Workspace, backward_batch, forward_projection, forward_velocity_batch, init_params
from .rng import stream
from .world import feature_rows, sample_p0


class TrainingError(RuntimeError):
    """Training aborted; message carries epoch/batch context."""


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 512
    dataset_size: int = 100_000
    learning_rate: float = 1e-3
    beta: float = 0.5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    schedule: str = "linear"  # x_t = (1-t) x0 + t x1; the only supported schedule

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1 or self.dataset_size < 1:
            raise ValueError("batch_size and dataset_size must be >= 1")
        if self.batch_size > self.dataset_size:
            raise ValueError("batch_size must not exceed dataset_size")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.schedule != "linear":
            raise ValueError(f"unsupported schedule '{self.schedule}'")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "dataset_size": self.dataset_size,
            "learning_rate": self.learning_rate,
            "beta": self.beta,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps,
            "seed": self.seed,
            "schedule": self.schedule,
        }


@dataclass
class TrainReport:
    loss_diff: list[float] = field(default_factory=list)
    loss_align: list[float] = field(default_factory=list)
    wall_seconds: float = 0.0
    checkpoint_path: Optional[str] = None


def write_report_csv(report: TrainReport, path) -> None:
    lines = ["epoch,loss_diff,loss_align"]
    for e, (ld, la) in enumerate(zip(report.loss_diff, report.loss_align), start=1):
        lines.append(f"{e},{ld:.17g},{la:.17g}")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def interpolate(x0: np.ndarray, x1: np.ndarray, t) -> tuple[np.ndarray, np.ndarray]:
    """Linear interpolation x_t = (1-t) x0 + t x1 and its time derivative x1 - x0."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    tt = np.asarray(t, dtype=np.float64)
    if x0.ndim == 2:
        tt = tt.reshape(-1, 1)
    xt = (1.0 - tt) * x0 + tt * x1
    return xt, x1 - x0


def compound_loss(
    params: ModelParams,
    x0: np.ndarray,
    x1: np.ndarray,
    t: np.ndarray,
    beta: float,
    phi_targets: Optional[np.ndarray] = None,
    ws: Optional[Workspace] = None,
) -> tuple[float, float, ModelParams]:
    """Batch losses and gradients of loss_diff + beta * loss_align.

    loss_diff is the mean squared velocity error; loss_align is minus the
    mean similarity between the projected tap feature at (x_t, t) and the
    clean point's feature. With beta = 0 the alignment head still receives
    an (exactly zero) cotangent, so its gradients are exactly zero. When the
    batch gradients alias a workspace, they are valid until the next call.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    n = x0.shape[0]
    if phi_targets is None:
        phi_targets = feature_rows(x0)
    xt, xdot = interpolate(x0, x1, t)
    v, tape = forward_velocity_batch(params, xt, t, ws)
    feats = forward_projection(params, tape, ws).rows
    resid = v - xdot
    loss_diff = float(np.mean(np.sum(resid**2, axis=1)))
    loss_align = float(-np.mean(np.sum(feats * phi_targets, axis=1)))
    if not (np.isfinite(loss_diff) and np.isfinite(loss_align)):
        raise TrainingError(f"non-finite loss (diff={loss_diff}, align={loss_align})")
    v_grad = (2.0 / n) * resid
    h_grad = (-beta / n) * phi_targets
    grads, _ = backward_batch(params, tape, v_grad, h_grad, ws)
    return loss_diff, loss_align, grads


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls([np.zeros_like(a) for a in params.arrays()],
                   [np.zeros_like(a) for a in params.arrays()], 0)


def adam_step(
    params: ModelParams,
    grads: ModelParams,
    state: AdamState,
    config: TrainConfig,
    in_place: bool = False,
) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update. Pure by default; `in_place` mutates
    params and state for the hot loop (identical arithmetic)."""
    b1, b2, eps, lr = config.adam_beta1, config.adam_beta2, config.adam_eps, config.learning_rate
    step = state.step + 1
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    if in_place:
        new_params, new_m, new_v = params, state.m, state.v
    else:
        new_params = params.copy()
        new_m = [a.copy() for a in state.m]
        new_v = [a.copy() for a in state.v]
    for p, g, m, v in zip(new_params.arrays(), grads.arrays(), new_m, new_v):
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient entries")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    if in_place:
        state.step = step
        return params, state
    return new_params, AdamState(new_m, new_v, step)


def train(
    config: TrainConfig,
    arch: Optional[Arch] = None,
    on_epoch: Optional[Callable[[int, float, float], None]] = None,
) -> tuple[ModelParams, TrainReport]:
    """Full deterministic training run; (seed, config) fixes every byte.

    The dataset is drawn once; noise endpoints and times are resampled per
    example per epoch; batches follow a fresh seeded shuffle each epoch and
    drop the uneven remainder.
    """
    arch = arch or Arch()
    t_begin = time.perf_counter()
    data = sample_p0(config.dataset_size, stream(config.seed, "dataset")).points
    targets = feature_rows(data)
    params = init_params(arch, config.seed)
    report = TrainReport()
    if config.epochs == 0:
        report.wall_seconds = time.perf_counter() - t_begin
        return params, report
    state = AdamState.zeros(params)
    ws = Workspace(arch, config.batch_size)
    n_batches = config.dataset_size // config.batch_size
    bsz = config.batch_size
    for epoch in range(config.epochs):
        perm = stream(config.seed, "shuffle", epoch).permutation(config.dataset_size)
        noise = stream(config.seed, "noise", epoch).standard_normal((config.dataset_size, 2))
        tvals = stream(config.seed, "tval", epoch).random(config.dataset_size)
        sum_diff = 0.0
        sum_align = 0.0
        for b in range(n_batches):
            idx = perm[b * bsz:(b + 1) * bsz]
            try:
                ld, la, grads = compound_loss(
                    params, data[idx], noise[idx], tvals[idx], config.beta,
                    phi_targets=targets[idx], ws=ws,
                )
                params, state = adam_step(params, grads, state, config, in_place=True)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch + 1} batch {b + 1}: {exc}") from exc
            sum_diff += ld
            sum_align += la
        report.loss_diff.append(sum_diff / n_batches)
        report.loss_align.append(sum_align / n_batches)
        if on_epoch is not None:
            on_epoch(epoch + 1, report.loss_diff[-1], report.loss_align[-1])
    report.wall_seconds = time.perf_counter() - t_begin
    return params, report
