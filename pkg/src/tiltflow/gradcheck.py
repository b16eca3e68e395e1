"""Central-finite-difference verification of every analytic gradient path.

Each suite draws random small instances, compares analytic gradients against
(f(p + h) - f(p - h)) / 2h elementwise, and reports the worst relative error
with denominator max(|analytic|, 1e-8). Instances are redrawn when an input
sits too close to a ReLU kink or a normalization floor for the step size to
be trusted.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .net import Arch, FeatureMap, ModelParams, backward, forward_projection, forward_velocity
from .potentials import (
    CompositePotential,
    IPAPotential,
    SPAPotential,
    eval_potential,
    grad_potential,
    make_weight_matrix,
)
from .rng import stream
from .training import compound_loss

FD_STEP = 1e-4            # network suite: plain central differences at this step
FD_STEP_POTENTIAL = 3e-4  # balances truncation against rounding across all variants
FD_STEP_LOSS = 3e-4       # loss suite uses a 5-point stencil at this step
REL_TOL = 1e-4
_DENOM_FLOOR = 1e-8
_KINK_MARGIN = 1e-3
_NORM_MARGIN = 5e-2


@dataclass
class SuiteResult:
    name: str
    trials: int
    max_rel_err: float
    tolerance: float = REL_TOL

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def to_dict(self) -> dict:
        return {"trials": self.trials, "max_rel_err": self.max_rel_err,
                "tolerance": self.tolerance, "pass": self.passed}


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a), _DENOM_FLOOR)))


def _random_arch(rng: np.random.Generator) -> Arch:
    depth = int(rng.integers(3, 6))
    return Arch(
        depth=depth,
        hidden=int(rng.integers(3, 9)),
        tap=int(rng.integers(1, depth)),
        in_dim=3,
        out_dim=2,
        proj_hidden=int(rng.integers(3, 9)),
        feat_dim=int(rng.integers(2, 5)),
    )


def _random_params(arch: Arch, rng: np.random.Generator) -> ModelParams:
    def mats(shapes):
        ws, bs = [], []
        for out_d, in_d in shapes:
            ws.append(rng.standard_normal((out_d, in_d)) / np.sqrt(in_d))
            bs.append(0.3 * rng.standard_normal(out_d))
        return ws, bs

    lw, lb = mats(arch.layer_shapes())
    pw, pb = mats(arch.proj_shapes())
    return ModelParams(lw, lb, pw, pb, arch)


def _margins_ok(params: ModelParams, x: np.ndarray, t: float, margin: float = _KINK_MARGIN) -> bool:
    _, tape = forward_velocity(params, x, t)
    for pre in tape.pre[:-1]:
        if np.min(np.abs(pre)) < margin:
            return False
    forward_projection(params, tape)
    if np.min(np.abs(tape.proj.pre)) < margin:
        return False
    if float(tape.proj.norm.min()) < _NORM_MARGIN:
        return False
    return True


def _param_entries(params: ModelParams):
    for a in params.arrays():
        flat = a.reshape(-1)
        for i in range(flat.shape[0]):
            yield flat, i


def _fd_param_gradient(scalar_fn: Callable[[], float], params: ModelParams,
                       step: float = FD_STEP, stencil5: bool = False) -> list[float]:
    """Per-entry central differences; the 5-point stencil cancels the h^2 term,
    resolving gradients down to ~1e-12 absolute on O(1) scalars."""
    out = []
    for flat, i in _param_entries(params):
        orig = flat[i]

        def at(delta: float) -> float:
            flat[i] = orig + delta
            return scalar_fn()

        if stencil5:
            d = (8.0 * (at(step) - at(-step)) - (at(2 * step) - at(-2 * step))) / (12.0 * step)
        else:
            d = (at(step) - at(-step)) / (2.0 * step)
        flat[i] = orig
        out.append(d)
    return out


def suite_net_backward(seed: int = 0, trials: int = 200) -> SuiteResult:
    """Every parameter gradient and the input gradient of <vg, v> + <hg, h>."""
    worst = 0.0
    done = 0
    attempt = 0
    while done < trials:
        rng = stream(seed, "gradcheck-net", attempt)
        attempt += 1
        if attempt > trials * 50:
            raise RuntimeError("could not draw enough well-separated instances")
        arch = _random_arch(rng)
        params = _random_params(arch, rng)
        x = rng.uniform(-1.0, 1.0, size=2)
        t = float(rng.uniform(0.05, 0.95))
        if not _margins_ok(params, x, t):
            continue
        vg = rng.standard_normal(arch.out_dim)
        hg = rng.standard_normal(arch.feat_dim)

        def scalar() -> float:
            v, tape = forward_velocity(params, x, t)
            h = forward_projection(params, tape).rows[0]
            return float(vg @ v + hg @ h)

        _, tape = forward_velocity(params, x, t)
        forward_projection(params, tape)
        grads, x_grad = backward(params, tape, v_grad=vg, h_grad=hg)
        analytic = np.concatenate([a.reshape(-1) for a in grads.arrays()])
        numeric = np.array(_fd_param_gradient(scalar, params))
        worst = max(worst, rel_err(analytic, numeric))

        # input gradient via FD in the two spatial coordinates
        num_x = np.empty(2)
        for i in range(2):
            xp = x.copy()
            xp[i] += FD_STEP
            vp, tp = forward_velocity(params, xp, t)
            hp = forward_projection(params, tp).rows[0]
            xm = x.copy()
            xm[i] -= FD_STEP
            vm, tm = forward_velocity(params, xm, t)
            hm = forward_projection(params, tm).rows[0]
            num_x[i] = (float(vg @ vp + hg @ hp) - float(vg @ vm + hg @ hm)) / (2.0 * FD_STEP)
        worst = max(worst, rel_err(x_grad, num_x))
        done += 1
    return SuiteResult("net_backward", trials, worst)


def suite_compound_loss(seed: int = 0, trials: int = 100, batch: int = 4) -> SuiteResult:
    """Gradients of loss_diff + beta * loss_align on small surrogate nets."""
    worst = 0.0
    done = 0
    attempt = 0
    while done < trials:
        rng = stream(seed, "gradcheck-loss", attempt)
        attempt += 1
        if attempt > trials * 50:
            raise RuntimeError("could not draw enough well-separated instances")
        arch = Arch(depth=int(rng.integers(3, 5)), hidden=8, tap=int(rng.integers(1, 3)),
                    proj_hidden=8, feat_dim=2)
        params = _random_params(arch, rng)
        cell = rng.integers(0, 2, size=batch)
        x0 = np.where(cell[:, None] == 0, [-1.0, 0.0], [0.0, -1.0]) + rng.random((batch, 2))
        x1 = rng.standard_normal((batch, 2))
        t = rng.uniform(0.05, 0.95, size=batch)
        beta = float(rng.uniform(0.1, 1.0))
        xt = (1.0 - t)[:, None] * x0 + t[:, None] * x1
        # the widest stencil probe is 2 * step, so demand a wider kink margin
        if not all(_margins_ok(params, xt[i], float(t[i]), margin=2e-3) for i in range(batch)):
            continue

        def scalar() -> float:
            ld, la, _ = compound_loss(params, x0, x1, t, beta)
            return ld + beta * la

        _, _, grads = compound_loss(params, x0, x1, t, beta)
        analytic = np.concatenate([a.reshape(-1) for a in grads.arrays()])
        numeric = np.array(_fd_param_gradient(scalar, params, step=FD_STEP_LOSS, stencil5=True))
        worst = max(worst, rel_err(analytic, numeric))
        done += 1
    return SuiteResult("compound_loss", trials, worst)


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    rows = rng.standard_normal((n, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def _potential_instances(name: str, rng: np.random.Generator):
    """Random (spec, h) for one variant; h rows are unit, targets valid."""
    n = int(rng.integers(1, 9))
    d = int(rng.integers(2, 17))
    h = _unit_rows(rng, n, d)
    tgt = FeatureMap(rows=_unit_rows(rng, n, d), normalized=True)
    if name == "ipa_full":
        return IPAPotential(make_weight_matrix("full_map", n), tgt), h
    if name == "ipa_mask":
        size = int(rng.integers(1, n + 1))
        sel = 1 + rng.choice(n, size=size, replace=False)
        return IPAPotential(make_weight_matrix("mask", n, mask=sel.tolist()), tgt), h
    if name == "ipa_single":
        return IPAPotential(make_weight_matrix("single_concept", n, index=int(rng.integers(1, n + 1))), tgt), h
    if name == "ipa_avg":
        # keep the means well away from zero so the step stays valid
        if np.linalg.norm(h.mean(axis=0)) < 0.2 or np.linalg.norm(tgt.rows.mean(axis=0)) < 0.2:
            return None
        return IPAPotential(make_weight_matrix("average_concept", n), tgt), h
    if name.startswith("spa_T"):
        temp = float(name.split("spa_T", 1)[1])
        return SPAPotential(tgt.rows[int(rng.integers(0, n))], temp), h
    if name == "composite":
        if np.linalg.norm(h.mean(axis=0)) < 0.2 or np.linalg.norm(tgt.rows.mean(axis=0)) < 0.2:
            return None
        spec = CompositePotential((
            (float(rng.uniform(0.2, 1.0)), IPAPotential(make_weight_matrix("average_concept", n), tgt)),
            (float(rng.uniform(0.2, 1.0)), SPAPotential(tgt.rows[int(rng.integers(0, n))], 0.5)),
        ))
        return spec, h
    raise ValueError(f"unknown potential suite '{name}'")


POTENTIAL_SUITES = ("ipa_full", "ipa_mask", "ipa_avg", "ipa_single",
                    "spa_T0.1", "spa_T1", "spa_T10", "composite")


def suite_potential(name: str, seed: int = 0, trials: int = 100) -> SuiteResult:
    worst = 0.0
    done = 0
    attempt = 0
    while done < trials:
        rng = stream(seed, f"gradcheck-pot-{name}", attempt)
        attempt += 1
        if attempt > trials * 50:
            raise RuntimeError("could not draw enough instances")
        inst = _potential_instances(name, rng)
        if inst is None:
            continue
        spec, h = inst
        analytic = grad_potential(spec, h)
        numeric = np.empty_like(h)
        step = FD_STEP_POTENTIAL
        for idx in np.ndindex(h.shape):
            hp = h.copy()
            hp[idx] += step
            hm = h.copy()
            hm[idx] -= step
            numeric[idx] = (eval_potential(spec, hp) - eval_potential(spec, hm)) / (2.0 * step)
        worst = max(worst, rel_err(analytic, numeric))
        done += 1
    return SuiteResult(f"potential_{name}", trials, worst)


def run_all(seed: int = 0, net_trials: int = 200, loss_trials: int = 100,
            potential_trials: int = 100) -> dict[str, SuiteResult]:
    results = {
        "net_backward": suite_net_backward(seed, net_trials),
        "compound_loss": suite_compound_loss(seed, loss_trials),
    }
    for name in POTENTIAL_SUITES:
        r = suite_potential(name, seed, potential_trials)
        results[r.name] = r
    return results
