import math

import numpy as np
import pytest

from tiltflow.gradcheck import POTENTIAL_SUITES, suite_potential
from tiltflow.net import FeatureMap
from tiltflow.potentials import (
    CompositePotential,
    DegenerateDirectionError,
    IPAPotential,
    PotentialParseError,
    SPAPotential,
    WeightMatrix,
    eval_potential,
    grad_potential,
    grad_rows,
    make_weight_matrix,
    parse_potential,
)
from tiltflow.rng import stream


def _unit_rows(rng, n, d):
    rows = rng.standard_normal((n, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def test_full_map_single_patch_recovers_identity():
    wm = make_weight_matrix("full_map", 1)
    np.testing.assert_array_equal(wm.entries, [[1.0]])


def test_mask_matrix_definition():
    wm = make_weight_matrix("mask", 3, mask=[2])
    expect = np.zeros((3, 3))
    expect[1, 1] = 1.0
    np.testing.assert_array_equal(wm.entries, expect)


def test_single_concept_matrix_definition():
    wm = make_weight_matrix("single_concept", 2, index=1)
    np.testing.assert_array_equal(wm.entries, [[0.5, 0.0], [0.5, 0.0]])


def test_weight_matrices_sum_to_one():
    rng = stream(1, "test-wm")
    for _ in range(20):
        n = int(rng.integers(1, 9))
        for wm in (
            make_weight_matrix("full_map", n),
            make_weight_matrix("mask", n, mask=(1 + rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False)).tolist()),
            make_weight_matrix("single_concept", n, index=int(rng.integers(1, n + 1))),
        ):
            assert abs(wm.entries.sum() - 1.0) <= 1e-9


def test_weight_matrix_validation():
    with pytest.raises(ValueError):
        make_weight_matrix("mask", 3, mask=[])
    with pytest.raises(ValueError):
        make_weight_matrix("single_concept", 3, index=4)
    with pytest.raises(ValueError):
        WeightMatrix("custom", 2, -np.ones((2, 2)))
    with pytest.raises(ValueError):
        WeightMatrix("full_map", 2, np.ones((2, 2)))  # sums to 4


def test_ipa_self_similarity_is_one():
    rng = stream(2, "test-self")
    rows = _unit_rows(rng, 5, 3)
    tgt = FeatureMap(rows=rows.copy(), normalized=True)
    spec = IPAPotential(make_weight_matrix("full_map", 5), tgt)
    assert abs(eval_potential(spec, rows) - 1.0) <= 1e-12


def test_spa_single_patch_collapses_to_dot_product():
    rng = stream(3, "test-spa1")
    h = _unit_rows(rng, 1, 4)
    tgt = _unit_rows(rng, 1, 4)[0]
    for temp in (1e-3, 0.1, 1.0, 100.0):
        spec = SPAPotential(tgt, temp)
        assert eval_potential(spec, h) == pytest.approx(float(h[0] @ tgt), abs=1e-15)


def test_spa_two_patch_value():
    h = np.array([[1.0, 0.0], [0.0, 1.0]])
    spec = SPAPotential(np.array([1.0, 0.0]), 1.0)
    expect = math.log(math.exp(1.0) + 1.0)  # independent scalar computation
    assert eval_potential(spec, h) == pytest.approx(expect, rel=1e-14)
    assert eval_potential(spec, h) == pytest.approx(1.3132616875182228, rel=1e-12)


def test_ipa_full_gradient_rows():
    rng = stream(4, "test-gradfull")
    n, d = 4, 3
    tgt = FeatureMap(rows=_unit_rows(rng, n, d), normalized=True)
    spec = IPAPotential(make_weight_matrix("full_map", n), tgt)
    g = grad_potential(spec, _unit_rows(rng, n, d))
    np.testing.assert_allclose(g, tgt.rows / n, rtol=1e-15)


def test_spa_gradient_closed_form_two_patches():
    rng = stream(5, "test-gradspa")
    h = _unit_rows(rng, 2, 3)
    tgt = _unit_rows(rng, 1, 3)[0]
    temp = 0.7
    sims = h @ tgt
    w = np.exp(sims / temp)
    w = w / w.sum()  # independent softmax
    expect = w[:, None] * tgt[None, :]
    np.testing.assert_allclose(grad_potential(SPAPotential(tgt, temp), h), expect, rtol=1e-12)


def test_gradients_match_finite_differences():
    for name in POTENTIAL_SUITES:
        result = suite_potential(name, seed=42, trials=15)
        assert result.passed, f"{name}: max rel err {result.max_rel_err:.3e}"


def test_spa_equals_reweighted_single_concept_gradient():
    # the selective gradient is N * softmax(sims / T) times the uniform
    # single-target gradient, to near machine precision
    rng = stream(6, "test-apxd")
    for _ in range(50):
        n = int(rng.integers(1, 9))
        d = int(rng.integers(2, 17))
        h = _unit_rows(rng, n, d)
        tgt = FeatureMap(rows=_unit_rows(rng, n, d), normalized=True)
        i = int(rng.integers(1, n + 1))
        temp = float(rng.uniform(0.05, 10.0))
        spa = grad_potential(SPAPotential(tgt.rows[i - 1], temp), h)
        ipa = grad_potential(IPAPotential(make_weight_matrix("single_concept", n, index=i), tgt), h)
        sims = h @ tgt.rows[i - 1]
        e = np.exp((sims - sims.max()) / temp)
        soft = e / e.sum()
        reweighted = n * soft[:, None] * ipa
        denom = np.maximum(np.abs(spa), 1e-300)
        assert np.max(np.abs(spa - reweighted) / denom) <= 1e-12


def test_spa_high_temperature_limit_is_uniform_average():
    rng = stream(7, "test-limit-hi")
    n, d = 6, 8
    h = _unit_rows(rng, n, d)
    tgt = FeatureMap(rows=_unit_rows(rng, n, d), normalized=True)
    i = 3
    g_spa = grad_potential(SPAPotential(tgt.rows[i - 1], 1e3), h)
    g_avg = grad_potential(IPAPotential(make_weight_matrix("single_concept", n, index=i), tgt), h)
    for a, b in zip(g_spa, g_avg):
        cos = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
        assert cos >= 0.999
    flat_cos = (g_spa.ravel() @ g_avg.ravel()) / (np.linalg.norm(g_spa) * np.linalg.norm(g_avg))
    assert flat_cos >= 0.999


def test_spa_low_temperature_limit_is_hard_max():
    rng = stream(8, "test-limit-lo")
    for _ in range(20):
        n = int(rng.integers(2, 9))
        d = 4
        h = _unit_rows(rng, n, d)
        tgt = _unit_rows(rng, 1, d)[0]
        sims = h @ tgt
        order = np.sort(sims)
        if order[-1] - order[-2] < 0.1:
            continue
        e = np.exp((sims - sims.max()) / 1e-3)
        soft = e / e.sum()
        assert soft[np.argmax(sims)] >= 0.999


def test_ipa_bounded_by_one():
    rng = stream(9, "test-bound")
    for _ in range(50):
        n = int(rng.integers(1, 9))
        d = int(rng.integers(2, 9))
        h = _unit_rows(rng, n, d)
        tgt = FeatureMap(rows=_unit_rows(rng, n, d), normalized=True)
        for wm in (
            make_weight_matrix("full_map", n),
            make_weight_matrix("mask", n, mask=[1]),
            make_weight_matrix("single_concept", n, index=1),
            make_weight_matrix("average_concept", n),
        ):
            assert abs(eval_potential(IPAPotential(wm, tgt), h)) <= 1.0 + 1e-12


def test_composite_is_weighted_sum():
    rng = stream(10, "test-comp")
    n, d = 3, 4
    h = _unit_rows(rng, n, d)
    tgt = FeatureMap(rows=_unit_rows(rng, n, d), normalized=True)
    p1 = IPAPotential(make_weight_matrix("full_map", n), tgt)
    p2 = SPAPotential(tgt.rows[0], 0.5)
    comp = CompositePotential(((0.7, p1), (0.3, p2)))
    assert eval_potential(comp, h) == pytest.approx(
        0.7 * eval_potential(p1, h) + 0.3 * eval_potential(p2, h), rel=1e-14)
    np.testing.assert_allclose(
        grad_potential(comp, h),
        0.7 * grad_potential(p1, h) + 0.3 * grad_potential(p2, h), rtol=1e-14)


def test_average_concept_degenerate_mean():
    h = np.array([[1.0, 0.0], [-1.0, 0.0]])  # zero mean
    tgt = FeatureMap(rows=np.array([[1.0, 0.0]]), normalized=True)
    spec = IPAPotential(make_weight_matrix("average_concept", 2),
                        FeatureMap(rows=np.array([[1.0, 0.0], [0.0, 1.0]])))
    with pytest.raises(DegenerateDirectionError):
        eval_potential(spec, h)


def test_directional_derivative_consistency():
    rng = stream(11, "test-dir")
    eps = 1e-4
    for name in ("ipa_full", "ipa_avg", "spa_T1", "composite"):
        for _ in range(20):
            from tiltflow.gradcheck import _potential_instances

            inst = _potential_instances(name, rng)
            if inst is None:
                continue
            spec, h = inst
            u = rng.standard_normal(h.shape)
            u /= np.linalg.norm(u)
            directional = float(np.sum(grad_potential(spec, h) * u))
            fd = (eval_potential(spec, h + eps * u) - eval_potential(spec, h - eps * u)) / (2 * eps)
            assert abs(directional - fd) / max(abs(directional), 1e-8) <= 1e-4


def test_grad_rows_matches_per_row_loop():
    rng = stream(12, "test-rows")
    rows = _unit_rows(rng, 16, 2)
    tgt = FeatureMap(rows=_unit_rows(rng, 1, 2), normalized=True)
    specs = [
        IPAPotential(make_weight_matrix("full_map", 1), tgt),
        IPAPotential(make_weight_matrix("average_concept", 1), tgt),
        SPAPotential(tgt.rows[0], 0.3),
        CompositePotential(((0.6, IPAPotential(make_weight_matrix("full_map", 1), tgt)),
                            (0.4, SPAPotential(tgt.rows[0], 0.3)))),
    ]
    for spec in specs:
        fast = grad_rows(spec, rows)
        slow = np.stack([grad_potential(spec, rows[i:i + 1])[0] for i in range(rows.shape[0])])
        np.testing.assert_allclose(fast, slow, rtol=1e-12, atol=1e-15)


def test_parse_potential_grammar():
    tgt1 = FeatureMap(rows=np.array([[-1.0, 0.0]]), normalized=True)
    spec = parse_potential("ipa:full", tgt1)
    assert isinstance(spec, IPAPotential) and spec.weights.kind == "full_map"
    spec = parse_potential("ipa:avg", tgt1)
    assert spec.weights.kind == "average_concept"
    rng = stream(13, "test-parse")
    tgt3 = FeatureMap(rows=_unit_rows(rng, 3, 2), normalized=True)
    spec = parse_potential("ipa:mask=2,3", tgt3)
    assert spec.weights.kind == "mask"
    np.testing.assert_allclose(np.diag(spec.weights.entries), [0.0, 0.5, 0.5])
    spec = parse_potential("ipa:single=1", tgt3)
    assert spec.weights.kind == "single_concept"
    spec = parse_potential("spa:i=2,T=0.1", tgt3)
    assert isinstance(spec, SPAPotential)
    np.testing.assert_array_equal(spec.target, tgt3.rows[1])
    assert spec.temperature == 0.1
    comp = parse_potential("comp:0.7*ipa:avg+0.3*spa:i=1,T=0.1", tgt3)
    assert isinstance(comp, CompositePotential)
    assert len(comp.terms) == 2
    assert comp.terms[0][0] == 0.7 and comp.terms[1][0] == 0.3


def test_parse_potential_errors():
    tgt = FeatureMap(rows=np.array([[-1.0, 0.0]]), normalized=True)
    for bad in ("ipa:bogus", "spa:i=1", "spa:i=2,T=0.1", "spa:i=1,T=-1", "xyz", "comp:ipa:full",
                "ipa:mask=", "ipa:single=7", "comp:0.5*comp:0.5*ipa:full"):
        with pytest.raises(PotentialParseError):
            parse_potential(bad, tgt)
