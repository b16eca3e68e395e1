"""Velocity network with hand-written reverse-mode gradients.

The model is a plain ReLU MLP taking (x1, x2, t) to a 2D velocity, with a
feature tap at an intermediate hidden layer and a 2-layer projection head
that maps the tapped representation to a unit-normalized feature row. All
arithmetic is float64. Forward passes record a tape; `backward` replays it
for exact gradients with respect to every parameter and the spatial input.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .rng import resolve

CHECKPOINT_MAGIC = b"TFLOWCK1"
_NORM_FLOOR = 1e-12


class CheckpointError(Exception):
    """Base class for checkpoint file problems."""


class CheckpointFormatError(CheckpointError):
    """Bad magic, undecodable header, or trailing garbage."""


class CheckpointTruncationError(CheckpointError):
    """Payload shorter than the shapes declared in the header."""


class CheckpointShapeError(CheckpointError):
    """Header shapes inconsistent with the declared architecture."""


class DegenerateProjectionError(ValueError):
    """Projection output collapsed below the normalization floor."""


@dataclass(frozen=True)
class Arch:
    """Network architecture metadata.

    `depth` counts linear layers; ReLU follows every layer except the last.
    `tap` is the 1-based index of the hidden layer whose activation feeds
    the projection head (1 <= tap <= depth - 1).
    """

    depth: int = 5
    hidden: int = 512
    tap: int = 3
    in_dim: int = 3
    out_dim: int = 2
    proj_hidden: int = 512
    feat_dim: int = 2

    def __post_init__(self) -> None:
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if not 1 <= self.tap <= self.depth - 1:
            raise ValueError(f"tap must be in [1, depth-1], got {self.tap}")
        for name in ("hidden", "in_dim", "out_dim", "proj_hidden", "feat_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.in_dim] + [self.hidden] * (self.depth - 1) + [self.out_dim]
        return [(dims[k + 1], dims[k]) for k in range(self.depth)]

    def proj_shapes(self) -> list[tuple[int, int]]:
        return [(self.proj_hidden, self.hidden), (self.feat_dim, self.proj_hidden)]

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "hidden": self.hidden,
            "tap": self.tap,
            "in_dim": self.in_dim,
            "out_dim": self.out_dim,
            "proj_hidden": self.proj_hidden,
            "feat_dim": self.feat_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Arch":
        return cls(**{k: int(v) for k, v in d.items()})


@dataclass
class ModelParams:
    """All weights of the trunk and projection head.

    Also used as the container for gradients and optimizer moments, which
    share the same shapes.
    """

    layer_weights: list[np.ndarray]
    layer_biases: list[np.ndarray]
    proj_weights: list[np.ndarray]
    proj_biases: list[np.ndarray]
    arch: Arch

    def validate(self) -> None:
        expected = self.arch.layer_shapes()
        if len(self.layer_weights) != self.arch.depth or len(self.layer_biases) != self.arch.depth:
            raise ValueError("trunk layer count does not match arch depth")
        for k, (w, b, shape) in enumerate(zip(self.layer_weights, self.layer_biases, expected)):
            if w.shape != shape:
                raise ValueError(f"layer {k + 1} weight shape {w.shape} != {shape}")
            if b.shape != (shape[0],):
                raise ValueError(f"layer {k + 1} bias shape {b.shape} != {(shape[0],)}")
        pexp = self.arch.proj_shapes()
        if len(self.proj_weights) != 2 or len(self.proj_biases) != 2:
            raise ValueError("projection head must have exactly 2 layers")
        for k, (w, b, shape) in enumerate(zip(self.proj_weights, self.proj_biases, pexp)):
            if w.shape != shape:
                raise ValueError(f"projection layer {k + 1} weight shape {w.shape} != {shape}")
            if b.shape != (shape[0],):
                raise ValueError(f"projection layer {k + 1} bias shape {b.shape} != {(shape[0],)}")
        for a in self.arrays():
            if not np.all(np.isfinite(a)):
                raise ValueError("parameters contain non-finite entries")

    def arrays(self) -> Iterator[np.ndarray]:
        """Fixed iteration order: trunk (W, b) per layer, then head (W, b)."""
        for w, b in zip(self.layer_weights, self.layer_biases):
            yield w
            yield b
        for w, b in zip(self.proj_weights, self.proj_biases):
            yield w
            yield b

    def copy(self) -> "ModelParams":
        return ModelParams(
            [w.copy() for w in self.layer_weights],
            [b.copy() for b in self.layer_biases],
            [w.copy() for w in self.proj_weights],
            [b.copy() for b in self.proj_biases],
            self.arch,
        )

    def zeros_like(self) -> "ModelParams":
        return ModelParams(
            [np.zeros_like(w) for w in self.layer_weights],
            [np.zeros_like(b) for b in self.layer_biases],
            [np.zeros_like(w) for w in self.proj_weights],
            [np.zeros_like(b) for b in self.proj_biases],
            self.arch,
        )


@dataclass
class FeatureMap:
    """N x d array of feature rows, optionally flagged unit-normalized."""

    rows: np.ndarray
    normalized: bool = False

    def __post_init__(self) -> None:
        self.rows = np.atleast_2d(np.asarray(self.rows, dtype=np.float64))
        if self.rows.ndim != 2:
            raise ValueError(f"feature rows must be 2-D, got shape {self.rows.shape}")
        if self.normalized:
            norms = np.linalg.norm(self.rows, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ValueError("rows flagged normalized but a row norm deviates from 1 by > 1e-6")

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


@dataclass
class ProjTape:
    """Intermediates of one projection-head pass (batch-first)."""

    pre: np.ndarray        # (n, proj_hidden) pre-activation of the hidden layer
    hidden: np.ndarray     # (n, proj_hidden) post-ReLU
    raw: np.ndarray        # (n, feat_dim) unnormalized output u
    norm: np.ndarray       # (n, 1) row norms of u
    feats: np.ndarray      # (n, feat_dim) u / ||u||


@dataclass
class ForwardTape:
    """Cached intermediates of one trunk pass (batch-first, n >= 1).

    pre[k] and act[k] are the pre-activation and activation of layer k + 1;
    the final activation is the raw network output. `tap` aliases the
    activation of the tap layer. Replaying the tape input through the same
    params reproduces the recorded output bit for bit.
    """

    x: np.ndarray                   # (n, in_dim) rows [x1, x2, t]
    pre: list[np.ndarray]
    act: list[np.ndarray]
    tap: np.ndarray
    proj: Optional[ProjTape] = None

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def output(self) -> np.ndarray:
        return self.act[-1]


class Workspace:
    """Reusable batch buffers for the hot training / sampling loops.

    Purely an allocation cache: results are bit-identical with or without
    reuse. One workspace serves one fixed (arch, batch size) and must not be
    shared across concurrent callers.
    """

    def __init__(self, arch: Arch, n: int):
        self.arch = arch
        self.n = n
        shapes = arch.layer_shapes()
        self.pre = [np.empty((n, s[0])) for s in shapes]
        self.act = [np.empty((n, s[0])) for s in shapes[:-1]]
        self.x = np.empty((n, arch.in_dim))
        self.p_pre = np.empty((n, arch.proj_hidden))
        self.p_hidden = np.empty((n, arch.proj_hidden))
        self.p_raw = np.empty((n, arch.feat_dim))
        # backward scratch
        self.d_act = [np.empty((n, s[0])) for s in shapes[:-1]]
        self.d_pre = [np.empty((n, s[0])) for s in shapes[:-1]]
        self.d_phid = np.empty((n, arch.proj_hidden))
        self.d_ppre = np.empty((n, arch.proj_hidden))
        self.d_tap = np.empty((n, arch.hidden))
        self.grads: Optional[ModelParams] = None

    def grad_buffers(self, params: ModelParams) -> ModelParams:
        if self.grads is None:
            self.grads = params.zeros_like()
        return self.grads


def init_params(arch: Arch, seed: int | np.random.Generator) -> ModelParams:
    """Uniform +-sqrt(6 / (fan_in + fan_out)) weights, zero biases."""
    rng = resolve(seed, "init")
    lw, lb = [], []
    for out_d, in_d in arch.layer_shapes():
        lim = np.sqrt(6.0 / (in_d + out_d))
        lw.append(rng.uniform(-lim, lim, size=(out_d, in_d)))
        lb.append(np.zeros(out_d))
    pw, pb = [], []
    for out_d, in_d in arch.proj_shapes():
        lim = np.sqrt(6.0 / (in_d + out_d))
        pw.append(rng.uniform(-lim, lim, size=(out_d, in_d)))
        pb.append(np.zeros(out_d))
    params = ModelParams(lw, lb, pw, pb, arch)
    params.validate()
    return params


def _forward_trunk(params: ModelParams, xin: np.ndarray, ws: Optional[Workspace]) -> ForwardTape:
    n = xin.shape[0]
    if ws is None or ws.n != n:
        ws = Workspace(params.arch, n)
    depth = params.arch.depth
    np.copyto(ws.x, xin)
    a = ws.x
    for k in range(depth):
        np.matmul(a, params.layer_weights[k].T, out=ws.pre[k])
        ws.pre[k] += params.layer_biases[k]
        if k < depth - 1:
            np.maximum(ws.pre[k], 0.0, out=ws.act[k])
            a = ws.act[k]
    act = list(ws.act) + [ws.pre[-1]]  # no activation on the output layer
    return ForwardTape(x=ws.x, pre=list(ws.pre), act=act, tap=ws.act[params.arch.tap - 1])


def forward_velocity_batch(
    params: ModelParams,
    points: np.ndarray,
    t: np.ndarray | float,
    ws: Optional[Workspace] = None,
) -> tuple[np.ndarray, ForwardTape]:
    """Evaluate the velocity on a batch of points at times t (scalar or per-row)."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != params.arch.in_dim - 1:
        raise ValueError(f"points must be (n, {params.arch.in_dim - 1}), got {points.shape}")
    tcol = np.broadcast_to(np.asarray(t, dtype=np.float64), (points.shape[0],)).reshape(-1, 1)
    if not (np.all(np.isfinite(points)) and np.all(np.isfinite(tcol))):
        raise ValueError("non-finite network input")
    if np.any(tcol < 0.0) or np.any(tcol > 1.0):
        raise ValueError("t outside [0, 1]")
    xin = np.concatenate([points, tcol], axis=1)
    tape = _forward_trunk(params, xin, ws)
    return tape.output, tape


def forward_velocity(params: ModelParams, x: Sequence[float], t: float) -> tuple[np.ndarray, ForwardTape]:
    """Single-point velocity evaluation; returns the output and its tape."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    v, tape = forward_velocity_batch(params, x, float(t))
    return v[0].copy(), tape


def _project(params: ModelParams, tap: np.ndarray, ws: Optional[Workspace]) -> ProjTape:
    n = tap.shape[0]
    if ws is None or ws.n != n:
        ws = Workspace(params.arch, n)
    np.matmul(tap, params.proj_weights[0].T, out=ws.p_pre)
    ws.p_pre += params.proj_biases[0]
    np.maximum(ws.p_pre, 0.0, out=ws.p_hidden)
    np.matmul(ws.p_hidden, params.proj_weights[1].T, out=ws.p_raw)
    ws.p_raw += params.proj_biases[1]
    norm = np.linalg.norm(ws.p_raw, axis=1, keepdims=True)
    if np.any(norm < _NORM_FLOOR):
        raise DegenerateProjectionError(
            f"projection output norm below {_NORM_FLOOR:g}; feature direction undefined"
        )
    feats = ws.p_raw / norm
    return ProjTape(pre=ws.p_pre, hidden=ws.p_hidden, raw=ws.p_raw, norm=norm, feats=feats)


def forward_projection(params: ModelParams, tape: ForwardTape, ws: Optional[Workspace] = None) -> FeatureMap:
    """Project the tapped representation to a unit feature row per batch entry.

    The gradient of anything downstream flows through this normalization
    (see `backward`). The projection intermediates are cached on the tape.
    """
    tape.proj = _project(params, tape.tap, ws)
    return FeatureMap(rows=tape.proj.feats.copy(), normalized=True)


def _backward_core(
    params: ModelParams,
    tape: ForwardTape,
    v_grad: Optional[np.ndarray],
    h_grad: Optional[np.ndarray],
    ws: Optional[Workspace],
    need_param_grads: bool = True,
) -> tuple[Optional[ModelParams], np.ndarray]:
    arch = params.arch
    n = tape.n
    if ws is None or ws.n != n:
        ws = Workspace(arch, n)
    if v_grad is None and h_grad is None:
        raise ValueError("at least one of v_grad, h_grad must be given")
    if v_grad is not None:
        v_grad = np.asarray(v_grad, dtype=np.float64)
        if v_grad.shape != (n, arch.out_dim):
            raise ValueError(f"v_grad shape {v_grad.shape} != {(n, arch.out_dim)}")
    if h_grad is not None:
        h_grad = np.asarray(h_grad, dtype=np.float64)
        if h_grad.shape != (n, arch.feat_dim):
            raise ValueError(f"h_grad shape {h_grad.shape} != {(n, arch.feat_dim)}")

    grads = ws.grad_buffers(params) if need_param_grads else None

    have_head = h_grad is not None
    if have_head:
        proj = tape.proj if tape.proj is not None else _project(params, tape.tap, ws)
        # d/du of <h_grad, u/||u||>: remove the radial component, divide by the norm
        radial = np.sum(h_grad * proj.feats, axis=1, keepdims=True)
        du = (h_grad - proj.feats * radial) / proj.norm
        np.matmul(du, params.proj_weights[1], out=ws.d_phid)
        np.multiply(ws.d_phid, proj.pre > 0.0, out=ws.d_ppre)
        np.matmul(ws.d_ppre, params.proj_weights[0], out=ws.d_tap)
        if need_param_grads:
            np.matmul(du.T, proj.hidden, out=grads.proj_weights[1])
            np.sum(du, axis=0, out=grads.proj_biases[1])
            np.matmul(ws.d_ppre.T, tape.tap, out=grads.proj_weights[0])
            np.sum(ws.d_ppre, axis=0, out=grads.proj_biases[0])
    elif need_param_grads:
        for a in (*grads.proj_weights, *grads.proj_biases):
            a.fill(0.0)

    # trunk walk, output layer down to the input
    dz = v_grad if v_grad is not None else np.zeros((n, arch.out_dim))
    for k in range(arch.depth, 0, -1):
        if need_param_grads:
            below = tape.act[k - 2] if k > 1 else tape.x
            np.matmul(dz.T, below, out=grads.layer_weights[k - 1])
            np.sum(dz, axis=0, out=grads.layer_biases[k - 1])
        if k > 1:
            np.matmul(dz, params.layer_weights[k - 1], out=ws.d_act[k - 2])
            if k - 1 == arch.tap and have_head:
                ws.d_act[k - 2] += ws.d_tap
            np.multiply(ws.d_act[k - 2], tape.pre[k - 2] > 0.0, out=ws.d_pre[k - 2])
            dz = ws.d_pre[k - 2]
        else:
            d_in = dz @ params.layer_weights[0]
    x_grad = d_in[:, : arch.in_dim - 1].copy()
    return grads, x_grad


def backward(
    params: ModelParams,
    tape: ForwardTape,
    v_grad: Optional[Sequence[float]] = None,
    h_grad: Optional[FeatureMap | np.ndarray] = None,
) -> tuple[ModelParams, np.ndarray]:
    """Reverse-mode gradients of <v_grad, v> + <h_grad, h> for a single-point tape.

    Returns gradients shaped like the parameters plus the gradient with
    respect to the spatial input x (the t component is dropped). ReLU uses
    subgradient 0 at exactly 0; the h_grad path differentiates through the
    output normalization of `forward_projection`.
    """
    if tape.n != 1:
        raise ValueError("per-point backward expects a single-row tape; use backward_batch")
    vg = None if v_grad is None else np.asarray(v_grad, dtype=np.float64).reshape(1, -1)
    hg = None
    if h_grad is not None:
        hg = h_grad.rows if isinstance(h_grad, FeatureMap) else np.asarray(h_grad, dtype=np.float64)
        hg = hg.reshape(1, -1)
    grads, x_grad = _backward_core(params, tape, vg, hg, ws=None, need_param_grads=True)
    out = grads.copy()  # detach from workspace buffers
    return out, x_grad[0]


def backward_batch(
    params: ModelParams,
    tape: ForwardTape,
    v_grad: Optional[np.ndarray] = None,
    h_grad: Optional[np.ndarray] = None,
    ws: Optional[Workspace] = None,
    need_param_grads: bool = True,
) -> tuple[Optional[ModelParams], np.ndarray]:
    """Batched `backward`. With a workspace, returned gradients alias its buffers."""
    if h_grad is not None and isinstance(h_grad, FeatureMap):
        h_grad = h_grad.rows
    return _backward_core(params, tape, v_grad, h_grad, ws, need_param_grads)


def _checkpoint_arrays(params: ModelParams) -> list[np.ndarray]:
    return list(params.arrays())


def save_checkpoint(params: ModelParams, path, extra_header: Optional[dict] = None) -> None:
    """Write a checkpoint: magic, u32-LE length-prefixed JSON header, raw arrays.

    The header carries the architecture and the ordered array shapes; arrays
    follow as little-endian float64 in header order. Round trips are
    bit-exact.
    """
    params.validate()
    arrays = _checkpoint_arrays(params)
    header = {
        "arch": params.arch.to_dict(),
        "shapes": [list(a.shape) for a in arrays],
    }
    if extra_header:
        header.update(extra_header)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if len(magic) < len(CHECKPOINT_MAGIC):
            raise CheckpointTruncationError(f"{path}: file shorter than the magic prefix")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
        raw_len = f.read(4)
        if len(raw_len) < 4:
            raise CheckpointTruncationError(f"{path}: missing header length")
        (hlen,) = struct.unpack("<I", raw_len)
        blob = f.read(hlen)
        if len(blob) < hlen:
            raise CheckpointTruncationError(f"{path}: header cut short")
    try:
        header = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: header is not valid JSON ({exc})") from exc
    if "arch" not in header or "shapes" not in header:
        raise CheckpointFormatError(f"{path}: header missing arch/shapes")
    return header


def load_checkpoint(path) -> ModelParams:
    """Read a checkpoint written by `save_checkpoint`."""
    header = read_checkpoint_header(path)
    try:
        arch = Arch.from_dict(header["arch"])
    except (TypeError, ValueError) as exc:
        raise CheckpointShapeError(f"{path}: bad arch metadata ({exc})") from exc
    shapes = [tuple(int(d) for d in s) for s in header["shapes"]]
    expected: list[tuple[int, ...]] = []
    for out_d, in_d in arch.layer_shapes():
        expected.extend([(out_d, in_d), (out_d,)])
    for out_d, in_d in arch.proj_shapes():
        expected.extend([(out_d, in_d), (out_d,)])
    if shapes != expected:
        raise CheckpointShapeError(f"{path}: declared shapes do not match the declared arch")
    hlen = 0
    with open(path, "rb") as f:
        f.seek(len(CHECKPOINT_MAGIC))
        (hlen,) = struct.unpack("<I", f.read(4))
        f.seek(hlen, 1)
        payload = f.read()
    need = sum(int(np.prod(s)) for s in shapes) * 8
    if len(payload) < need:
        raise CheckpointTruncationError(f"{path}: payload has {len(payload)} bytes, need {need}")
    if len(payload) > need:
        raise CheckpointFormatError(f"{path}: {len(payload) - need} trailing bytes after arrays")
    arrays = []
    off = 0
    for s in shapes:
        count = int(np.prod(s))
        arrays.append(np.frombuffer(payload, dtype="<f8", count=count, offset=off).reshape(s).copy())
        off += count * 8
    depth = arch.depth
    lw = [arrays[2 * k] for k in range(depth)]
    lb = [arrays[2 * k + 1] for k in range(depth)]
    pw = [arrays[2 * depth], arrays[2 * depth + 2]]
    pb = [arrays[2 * depth + 1], arrays[2 * depth + 3]]
    params = ModelParams(lw, lb, pw, pb, arch)
    params.validate()
    return params
