"""Similarity potentials over N x d feature maps and their analytic gradients.

Two families: fixed-weight patch alignment, where a nonnegative N x N matrix
P scores every (predicted patch, conditioning patch) pair and the potential
is sum_{n,m} P[n,m] <h_n, h*_m>; and selective alignment, a temperature-T
log-sum-exp over the similarities of all predicted patches to one target
row, which interpolates between a hard maximum (T -> 0) and the uniform
average (T -> infinity). Potentials compose additively with nonnegative
weights.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .net import FeatureMap

WEIGHT_KINDS = ("full_map", "mask", "average_concept", "single_concept", "custom")
_SUM_TOL = 1e-9
_MEAN_FLOOR = 1e-12


class DegenerateDirectionError(ValueError):
    """A direction needed by the potential has (near-)zero norm."""


class PotentialParseError(ValueError):
    """Unparseable textual potential specification."""


@dataclass(frozen=True)
class WeightMatrix:
    """Patch interaction weights. `entries` is None only for average_concept,
    whose effective weights depend on the evaluated features."""

    kind: str
    size: int
    entries: np.ndarray | None

    def __post_init__(self) -> None:
        if self.kind not in WEIGHT_KINDS:
            raise ValueError(f"unknown weight kind '{self.kind}'")
        if self.size < 1:
            raise ValueError("size must be >= 1")
        if self.kind == "average_concept":
            if self.entries is not None:
                raise ValueError("average_concept carries no fixed entries")
            return
        if self.entries is None:
            raise ValueError(f"{self.kind} requires explicit entries")
        e = np.asarray(self.entries, dtype=np.float64)
        object.__setattr__(self, "entries", e)
        if e.shape != (self.size, self.size):
            raise ValueError(f"entries must be {self.size} x {self.size}, got {e.shape}")
        if np.any(e < 0.0):
            raise ValueError("entries must be nonnegative")
        if self.kind != "custom" and abs(e.sum() - 1.0) > _SUM_TOL:
            raise ValueError(f"{self.kind} entries must sum to 1, got {e.sum()!r}")


def make_weight_matrix(kind: str, n: int, mask=None, index: int | None = None) -> WeightMatrix:
    """Build one of the standard weight configurations (indices are 1-based).

    full_map: I / n. mask: diagonal 1/|S| on the masked indices S.
    single_concept(i): every predicted patch compares to target patch i with
    weight 1/n. average_concept: evaluated dynamically as the cosine of the
    feature-map means.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if kind == "full_map":
        return WeightMatrix(kind, n, np.eye(n) / n)
    if kind == "mask":
        if mask is None or len(list(mask)) == 0:
            raise ValueError("mask kind needs a non-empty index set")
        sel = sorted(set(int(i) for i in mask))
        if sel[0] < 1 or sel[-1] > n:
            raise ValueError(f"mask indices must lie in [1, {n}], got {sel}")
        e = np.zeros((n, n))
        for i in sel:
            e[i - 1, i - 1] = 1.0 / len(sel)
        return WeightMatrix(kind, n, e)
    if kind == "single_concept":
        if index is None or not 1 <= int(index) <= n:
            raise ValueError(f"single_concept needs an index in [1, {n}]")
        e = np.zeros((n, n))
        e[:, int(index) - 1] = 1.0 / n
        return WeightMatrix(kind, n, e)
    if kind == "average_concept":
        return WeightMatrix(kind, n, None)
    if kind == "custom":
        raise ValueError("build custom matrices through the WeightMatrix constructor")
    raise ValueError(f"unknown weight kind '{kind}'")


@dataclass(frozen=True)
class IPAPotential:
    """Fixed-weight patch alignment against a target feature map."""

    weights: WeightMatrix
    target: FeatureMap

    def __post_init__(self) -> None:
        if self.target.rows.shape[0] != self.weights.size:
            raise ValueError(
                f"target has {self.target.rows.shape[0]} rows, weights expect {self.weights.size}"
            )


@dataclass(frozen=True)
class SPAPotential:
    """Log-sum-exp alignment of all predicted patches to one target row."""

    target: np.ndarray
    temperature: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "target", np.asarray(self.target, dtype=np.float64).reshape(-1))
        if not np.isfinite(self.temperature) or self.temperature <= 0.0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")


@dataclass(frozen=True)
class CompositePotential:
    """Nonnegative-weighted sum of sub-potentials."""

    terms: tuple[tuple[float, "PotentialSpec"], ...]

    def __post_init__(self) -> None:
        if len(self.terms) == 0:
            raise ValueError("composite needs at least one term")
        for w, _ in self.terms:
            if not np.isfinite(w) or w < 0.0:
                raise ValueError(f"composite weights must be finite and >= 0, got {w}")


PotentialSpec = Union[IPAPotential, SPAPotential, CompositePotential]


def _rows(h: FeatureMap | np.ndarray) -> np.ndarray:
    return h.rows if isinstance(h, FeatureMap) else np.atleast_2d(np.asarray(h, dtype=np.float64))


def _mean_direction(rows: np.ndarray) -> tuple[np.ndarray, float]:
    mean = rows.mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm < _MEAN_FLOOR:
        raise DegenerateDirectionError("feature-map mean has (near-)zero norm")
    return mean, norm


def eval_potential(spec: PotentialSpec, h: FeatureMap | np.ndarray) -> float:
    """Scalar potential value at the predicted feature map h."""
    rows = _rows(h)
    if isinstance(spec, CompositePotential):
        return float(sum(w * eval_potential(sub, rows) for w, sub in spec.terms))
    if isinstance(spec, SPAPotential):
        sims = rows @ spec.target
        m = sims.max()
        # max-shifted log-sum-exp; exact for a single patch
        return float(m + spec.temperature * np.log(np.sum(np.exp((sims - m) / spec.temperature))))
    if isinstance(spec, IPAPotential):
        tgt = spec.target.rows
        if spec.weights.kind == "average_concept":
            hbar, hn = _mean_direction(rows)
            tbar, tn = _mean_direction(tgt)
            return float(hbar @ tbar / (hn * tn))
        return float(np.sum(spec.weights.entries * (rows @ tgt.T)))
    raise TypeError(f"not a potential spec: {spec!r}")


def grad_potential(spec: PotentialSpec, h: FeatureMap | np.ndarray) -> np.ndarray:
    """Analytic gradient of the potential with respect to each row of h.

    Fixed-weight alignment is linear, so the gradient is P @ target. The
    average-concept gradient goes through both mean normalizations (the
    full cosine-of-means derivative). The selective gradient is the softmax
    of the scaled similarities times the target row: a similarity-reweighted
    version of the uniform single-target gradient.
    """
    rows = _rows(h)
    if isinstance(spec, CompositePotential):
        out = np.zeros_like(rows)
        for w, sub in spec.terms:
            out += w * grad_potential(sub, rows)
        return out
    if isinstance(spec, SPAPotential):
        sims = rows @ spec.target
        m = sims.max()
        e = np.exp((sims - m) / spec.temperature)
        soft = e / e.sum()
        return soft[:, None] * spec.target[None, :]
    if isinstance(spec, IPAPotential):
        tgt = spec.target.rows
        if spec.weights.kind == "average_concept":
            n = rows.shape[0]
            hbar, hn = _mean_direction(rows)
            tbar, tn = _mean_direction(tgt)
            hhat = hbar / hn
            that = tbar / tn
            cos = float(hhat @ that)
            g = (that - cos * hhat) / hn / n
            return np.tile(g, (n, 1))
        return spec.weights.entries @ tgt
    raise TypeError(f"not a potential spec: {spec!r}")


def grad_rows(spec: PotentialSpec, rows: np.ndarray) -> np.ndarray:
    """Per-row gradients when each row of `rows` is its own 1-patch feature map.

    Vectorized form of grad_potential for the sampler hot loop; specs must
    have been built for single-patch maps.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if isinstance(spec, CompositePotential):
        out = np.zeros_like(rows)
        for w, sub in spec.terms:
            out += w * grad_rows(sub, rows)
        return out
    if isinstance(spec, SPAPotential):
        # softmax over one patch is identically 1
        return np.broadcast_to(spec.target, rows.shape).copy()
    if isinstance(spec, IPAPotential):
        if spec.weights.size != 1:
            raise ValueError("per-row gradients require single-patch potentials")
        tgt = spec.target.rows
        if spec.weights.kind == "average_concept":
            tbar, tn = _mean_direction(tgt)
            that = tbar / tn
            hn = np.linalg.norm(rows, axis=1, keepdims=True)
            if np.any(hn < _MEAN_FLOOR):
                raise DegenerateDirectionError("feature row has (near-)zero norm")
            hhat = rows / hn
            cos = hhat @ that
            return (that[None, :] - cos[:, None] * hhat) / hn
        return np.broadcast_to(spec.weights.entries[0, 0] * tgt[0], rows.shape).copy()
    raise TypeError(f"not a potential spec: {spec!r}")


def _parse_indices(text: str) -> list[int]:
    try:
        return [int(p) for p in text.split(",") if p != ""]
    except ValueError as exc:
        raise PotentialParseError(f"bad index list '{text}'") from exc


def parse_potential(text: str, target: FeatureMap) -> PotentialSpec:
    """Parse the CLI potential grammar against a conditioning feature map.

    Forms: "ipa:full", "ipa:mask=2,3", "ipa:single=1", "ipa:avg",
    "spa:i=1,T=0.1", and flat composites like
    "comp:0.7*ipa:avg+0.3*spa:i=1,T=0.1". Indices are 1-based.
    """
    s = text.strip()
    n = target.rows.shape[0]
    if s.startswith("comp:"):
        terms = []
        for part in s[len("comp:"):].split("+"):
            if "*" not in part:
                raise PotentialParseError(f"composite term '{part}' needs a weight, like 0.5*ipa:avg")
            wtxt, sub = part.split("*", 1)
            try:
                w = float(wtxt)
            except ValueError as exc:
                raise PotentialParseError(f"bad composite weight '{wtxt}'") from exc
            if w < 0:
                raise PotentialParseError(f"composite weight must be >= 0, got {w}")
            if sub.strip().startswith("comp:"):
                raise PotentialParseError("nested composites are not supported in the text form")
            terms.append((w, parse_potential(sub, target)))
        return CompositePotential(tuple(terms))
    if s.startswith("ipa:"):
        body = s[len("ipa:"):]
        try:
            if body == "full":
                wm = make_weight_matrix("full_map", n)
            elif body == "avg":
                wm = make_weight_matrix("average_concept", n)
            elif body.startswith("mask="):
                wm = make_weight_matrix("mask", n, mask=_parse_indices(body[len("mask="):]))
            elif body.startswith("single="):
                wm = make_weight_matrix("single_concept", n, index=int(body[len("single="):]))
            else:
                raise PotentialParseError(f"unknown ipa form '{body}'")
        except ValueError as exc:
            raise PotentialParseError(str(exc)) from exc
        return IPAPotential(wm, target)
    if s.startswith("spa:"):
        fields = {}
        for part in s[len("spa:"):].split(","):
            if "=" not in part:
                raise PotentialParseError(f"bad spa field '{part}'")
            k, v = part.split("=", 1)
            fields[k.strip()] = v.strip()
        if set(fields) != {"i", "T"}:
            raise PotentialParseError("spa needs exactly the fields i and T, like spa:i=1,T=0.1")
        try:
            i = int(fields["i"])
            temp = float(fields["T"])
        except ValueError as exc:
            raise PotentialParseError(f"bad spa value ({exc})") from exc
        if not 1 <= i <= n:
            raise PotentialParseError(f"spa index must lie in [1, {n}], got {i}")
        try:
            return SPAPotential(target.rows[i - 1].copy(), temp)
        except ValueError as exc:
            raise PotentialParseError(str(exc)) from exc
    raise PotentialParseError(f"unknown potential '{text}'")
