import numpy as np
import pytest

from conftest import small_arch
from tiltflow.gradcheck import rel_err, suite_net_backward
from tiltflow.net import (
    Arch,
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointTruncationError,
    DegenerateProjectionError,
    FeatureMap,
    ModelParams,
    backward,
    forward_projection,
    forward_velocity,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from tiltflow.rng import stream


def _oracle_forward(params: ModelParams, x, t):
    """Independent straight-line matrix-chain evaluation (column-vector form)."""
    a = np.concatenate([np.asarray(x, dtype=float), [t]])
    tap = None
    depth = params.arch.depth
    for k in range(depth):
        z = params.layer_weights[k] @ a + params.layer_biases[k]
        a = np.maximum(z, 0.0) if k < depth - 1 else z
        if k + 1 == params.arch.tap:
            tap = a
    p = params.proj_weights[0] @ tap + params.proj_biases[0]
    q = np.maximum(p, 0.0)
    u = params.proj_weights[1] @ q + params.proj_biases[1]
    return a, u / np.linalg.norm(u)


def _zeroed(arch, rng=None):
    params = init_params(arch, 0)
    for w in params.layer_weights + params.proj_weights:
        w[:] = 0.0
    return params


def test_forward_zero_weights_is_bias_chain():
    arch = small_arch()
    params = _zeroed(arch)
    params.layer_biases[-1][:] = (0.7, -0.3)
    v, _ = forward_velocity(params, [0.4, -0.9], 0.2)
    np.testing.assert_array_equal(v, [0.7, -0.3])


def test_forward_determinism_bitwise():
    params = init_params(small_arch(), 3)
    v1, tape1 = forward_velocity(params, [0.1, 0.2], 0.5)
    v2, tape2 = forward_velocity(params, [0.1, 0.2], 0.5)
    np.testing.assert_array_equal(v1, v2)
    for a, b in zip(tape1.pre + tape1.act, tape2.pre + tape2.act):
        np.testing.assert_array_equal(a, b)


def test_forward_and_projection_match_oracle():
    rng = stream(11, "test-oracle")
    for trial in range(20):
        arch = small_arch(depth=int(rng.integers(3, 6)), hidden=int(rng.integers(3, 8)))
        arch = Arch(depth=arch.depth, hidden=arch.hidden, tap=int(rng.integers(1, arch.depth)),
                    proj_hidden=int(rng.integers(2, 8)), feat_dim=2)
        params = init_params(arch, int(rng.integers(0, 1000)))
        for b in params.layer_biases + params.proj_biases:
            b[:] = 0.3 * rng.standard_normal(b.shape)  # keep tiny nets off the all-dead corner
        x = rng.uniform(-1, 1, 2)
        t = float(rng.random())
        v, tape = forward_velocity(params, x, t)
        h = forward_projection(params, tape).rows[0]
        v_ref, h_ref = _oracle_forward(params, x, t)
        np.testing.assert_allclose(v, v_ref, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(h, h_ref, rtol=1e-12, atol=1e-14)


def test_projection_identity_case():
    arch = small_arch(hidden=2, proj_hidden=2, feat_dim=2)
    params = _zeroed(arch)
    params.layer_biases[arch.tap - 1][:] = (1.0, 0.0)  # tap activation = unit vector
    params.proj_weights[0][:] = np.eye(2)
    params.proj_weights[1][:] = np.eye(2)
    _, tape = forward_velocity(params, [0.0, 0.0], 0.0)
    h = forward_projection(params, tape)
    np.testing.assert_array_equal(h.rows, [[1.0, 0.0]])
    assert h.normalized


def test_projection_unit_norm():
    rng = stream(5, "test-norm")
    for seed in range(10):
        params = init_params(small_arch(), seed)
        for b in params.layer_biases + params.proj_biases:
            b[:] = 0.3 * rng.standard_normal(b.shape)
        _, tape = forward_velocity(params, rng.uniform(-1, 1, 2), float(rng.random()))
        h = forward_projection(params, tape)
        assert abs(np.linalg.norm(h.rows[0]) - 1.0) <= 1e-6


def test_projection_degenerate_direction():
    params = _zeroed(small_arch())
    with pytest.raises(DegenerateProjectionError):
        _, tape = forward_velocity(params, [0.1, 0.1], 0.3)
        forward_projection(params, tape)


def test_nonfinite_input_rejected():
    params = init_params(small_arch(), 0)
    with pytest.raises(ValueError, match="non-finite"):
        forward_velocity(params, [np.nan, 0.0], 0.5)
    with pytest.raises(ValueError, match="t outside"):
        forward_velocity(params, [0.0, 0.0], 1.5)


def test_backward_zero_cotangents_give_zero_grads():
    params = init_params(small_arch(), 2)
    _, tape = forward_velocity(params, [0.2, -0.4], 0.6)
    forward_projection(params, tape)
    grads, x_grad = backward(params, tape, v_grad=[0.0, 0.0], h_grad=[0.0, 0.0])
    for a in grads.arrays():
        assert np.all(a == 0.0)
    assert np.all(x_grad == 0.0)


def test_backward_requires_a_cotangent():
    params = init_params(small_arch(), 2)
    _, tape = forward_velocity(params, [0.2, -0.4], 0.6)
    with pytest.raises(ValueError, match="at least one"):
        backward(params, tape)


def test_backward_shape_mismatch_rejected():
    params = init_params(small_arch(), 2)
    _, tape = forward_velocity(params, [0.2, -0.4], 0.6)
    with pytest.raises(ValueError, match="shape"):
        backward(params, tape, v_grad=[1.0, 2.0, 3.0])


def test_backward_matches_finite_differences_quick():
    result = suite_net_backward(seed=123, trials=10)
    assert result.passed, f"max rel err {result.max_rel_err:.3e}"


def test_backward_linear_net_input_gradient_analytic():
    # positive weights, large positive biases: every ReLU active near the origin,
    # so the net is locally linear and x_grad = vg @ W_L @ ... @ W_1 (spatial part)
    arch = small_arch(depth=4, hidden=5, tap=2)
    rng = stream(9, "test-linear")
    params = init_params(arch, 1)
    for w in params.layer_weights:
        w[:] = np.abs(rng.standard_normal(w.shape)) * 0.3
    for b in params.layer_biases[:-1]:
        b[:] = 5.0
    vg = rng.standard_normal(2)
    _, tape = forward_velocity(params, [0.05, -0.03], 0.5)
    _, x_grad = backward(params, tape, v_grad=vg)
    expect = vg.copy()
    for w in reversed(params.layer_weights):
        expect = expect @ w
    np.testing.assert_allclose(x_grad, expect[:2], rtol=1e-12)


def test_feature_map_normalized_flag_checked():
    with pytest.raises(ValueError, match="normalized"):
        FeatureMap(rows=[[3.0, 4.0]], normalized=True)
    fm = FeatureMap(rows=[[0.6, 0.8]], normalized=True)
    assert fm.n == 1 and fm.dim == 2


def test_checkpoint_roundtrip_bitwise(tmp_path):
    params = init_params(small_arch(depth=4), 77)
    path = tmp_path / "m.ckpt"
    save_checkpoint(params, path, extra_header={"config": {"seed": 77}})
    loaded = load_checkpoint(path)
    for a, b in zip(params.arrays(), loaded.arrays()):
        np.testing.assert_array_equal(a, b)
    assert loaded.arch == params.arch


def test_checkpoint_bad_magic(tmp_path):
    params = init_params(small_arch(), 0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(params, path)
    blob = bytearray(path.read_bytes())
    blob[:8] = b"NOTMAGIC"
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_checkpoint_truncated_payload(tmp_path):
    params = init_params(small_arch(), 0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(params, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-16])
    with pytest.raises(CheckpointTruncationError):
        load_checkpoint(path)


def test_checkpoint_shape_mismatch(tmp_path):
    import json
    import struct

    params = init_params(small_arch(), 0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(params, path)
    blob = path.read_bytes()
    (hlen,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12:12 + hlen])
    header["shapes"][0] = [999, 999]
    new_header = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path.write_bytes(blob[:8] + struct.pack("<I", len(new_header)) + new_header + blob[12 + hlen:])
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(path)


def test_checkpoint_trailing_bytes(tmp_path):
    params = init_params(small_arch(), 0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(params, path)
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(CheckpointFormatError, match="trailing"):
        load_checkpoint(path)
