import numpy as np
import pytest

from tiltflow.evaluation import GridHistogram, energy_distance, symmetric_kl_masses
from tiltflow.world import (
    CELL_LOW,
    ConditionFeature,
    DomainError,
    EnvelopeError,
    cell_index,
    feature_rows,
    gaussian_world_score,
    gaussian_world_velocity,
    in_support,
    point_feature,
    project_to_support,
    rejection_sample,
    sample_p0,
    tilted_cell_masses,
    tilted_grid_masses,
)


def test_sample_p0_support_and_determinism():
    a = sample_p0(10_000, seed=1)
    assert np.all(in_support(a.points))
    b = sample_p0(10_000, seed=1)
    np.testing.assert_array_equal(a.points, b.points)
    c = sample_p0(10_000, seed=2)
    assert not np.array_equal(a.points, c.points)


def test_sample_p0_cell_balance():
    pts = sample_p0(100_000, seed=3).points
    frac_c1 = np.mean(cell_index(pts) == 0)
    # binomial 6-sigma band around 1/2 at n = 100,000
    assert 0.49 <= frac_c1 <= 0.51


def test_sample_p0_rejects_zero():
    with pytest.raises(ValueError):
        sample_p0(0, seed=0)


def test_feature_hand_value():
    # x = (-0.25, 0.5) in the left cell: center distance 0.25, nearest vertical
    # edge 0.25, nearest horizontal edge 0.5; normalized by sqrt(2)/2 and 0.5
    t = 0.25 / (np.sqrt(2.0) / 2.0)
    h = 0.25 / 0.5
    w = 0.5 / 0.5
    expect = np.array([t, h - w]) / np.hypot(t, h - w)
    np.testing.assert_allclose(point_feature([-0.25, 0.5]).rows[0], expect, rtol=1e-12)
    np.testing.assert_allclose(expect, [0.5774, -0.8165], atol=5e-5)


def test_feature_unit_norm_and_sign():
    pts = sample_p0(10_000, seed=4).points
    rows = feature_rows(pts)
    np.testing.assert_allclose(np.linalg.norm(rows, axis=1), 1.0, atol=1e-12)
    assert np.all(rows[:, 0] >= 0.0)


def test_feature_degenerate_center():
    for center in ((-0.5, 0.5), (0.5, -0.5)):
        np.testing.assert_array_equal(point_feature(center).rows, [[1.0, 0.0]])
        near = np.asarray(center) + 1e-13
        np.testing.assert_array_equal(point_feature(near).rows, [[1.0, 0.0]])


def test_feature_outside_support_raises():
    with pytest.raises(DomainError):
        point_feature([0.5, 0.5])


def test_feature_reflection_invariance():
    # mirroring a point across its cell's vertical center line preserves all
    # three distances, hence the feature
    pts = sample_p0(1000, seed=5).points
    centers = CELL_LOW[cell_index(pts)] + 0.5
    mirrored = pts.copy()
    mirrored[:, 0] = 2.0 * centers[:, 0] - pts[:, 0]
    np.testing.assert_allclose(feature_rows(pts), feature_rows(mirrored), atol=1e-12)


def test_feature_point_symmetry_between_cells():
    pts = sample_p0(1000, seed=6).points
    np.testing.assert_allclose(feature_rows(pts), feature_rows(-pts), atol=1e-12)


def test_project_to_support():
    pts = np.array([[-0.5, 0.5], [-1.2, 1.3], [0.02, 0.01], [2.0, -2.0]])
    proj = project_to_support(pts)
    assert np.all(in_support(proj))
    np.testing.assert_array_equal(proj[0], pts[0])
    np.testing.assert_allclose(proj[1], [-1.0, 1.0])
    np.testing.assert_allclose(proj[3], [1.0, -1.0])


def test_condition_feature_validation():
    with pytest.raises(ValueError):
        ConditionFeature(target=[1.0, 1.0], lam=1.0)
    with pytest.raises(ValueError):
        ConditionFeature(target=[1.0, 0.0], lam=-0.5)


def test_rejection_lambda0_matches_base_distribution():
    cond = ConditionFeature(target=[-1.0, 0.0], lam=0.0)
    oracle = rejection_sample(cond, 2000, seed=10)
    assert np.all(in_support(oracle.points))
    base_a = sample_p0(2000, seed=11).points
    base_b = sample_p0(2000, seed=12).points
    noise_band = energy_distance(base_a, base_b)
    d = energy_distance(oracle.points, sample_p0(2000, seed=13).points)
    assert d <= 3.0 * max(noise_band, 1e-4), f"d={d:.5f} band={noise_band:.5f}"


def test_rejection_support_and_determinism():
    cond = ConditionFeature(target=[0.0, -1.0], lam=2.0)
    a = rejection_sample(cond, 5000, seed=20)
    assert np.all(in_support(a.points))
    b = rejection_sample(cond, 5000, seed=20)
    np.testing.assert_array_equal(a.points, b.points)


def test_rejection_cell_masses_match_quadrature():
    cond = ConditionFeature(target=[-1.0, 0.0], lam=2.0)
    masses = tilted_cell_masses(cond, resolution=400)
    pts = rejection_sample(cond, 50_000, seed=21).points
    idx = cell_index(pts)
    emp = np.array([np.mean(idx == 0), np.mean(idx == 1)])
    assert np.max(np.abs(emp - masses)) <= 0.01


def test_rejection_grid_skl_against_quadrature():
    # sharp correctness check: 40x40 histogram of 50k oracle draws vs fine
    # quadrature of the tilted density, smoothed symmetric KL below 0.02
    for lam in (0.0, 1.0, 2.0):
        for target in ([-1.0, 0.0], [0.0, -1.0]):
            cond = ConditionFeature(target=target, lam=lam)
            pts = rejection_sample(cond, 50_000, seed=22).points
            hist = GridHistogram.from_points(pts).counts
            quad = tilted_grid_masses(cond, per_cell=400)
            skl = symmetric_kl_masses(hist, quad)
            assert skl <= 0.02, f"lam={lam} target={target}: skl={skl:.4f}"


def test_rejection_envelope_error_for_huge_lambda():
    # with this target the similarity never exceeds about -0.45, so the
    # acceptance probability is at most exp(-1.45 * lam)
    cond = ConditionFeature(target=[-1.0, 0.0], lam=50.0)
    with pytest.raises(EnvelopeError, match="reduce the guidance scale"):
        rejection_sample(cond, 10, seed=23)


def test_gaussian_world_point_mass_case():
    v = gaussian_world_velocity(np.array([1.0, 0.0]), 0.5, sigma0=0.0)
    s = gaussian_world_score(np.array([1.0, 0.0]), 0.5, sigma0=0.0)
    np.testing.assert_allclose(v, [2.0, 0.0], rtol=1e-15)
    np.testing.assert_allclose(s, [-4.0, 0.0], rtol=1e-15)


def test_gaussian_world_velocity_score_identity():
    rng = np.random.default_rng(0)
    for sigma0 in (0.0, 0.5, 1.0, 2.0):
        for _ in range(200):
            t = float(rng.uniform(0.01, 0.99))
            x = rng.standard_normal(2) * 2.0
            v = gaussian_world_velocity(x, t, sigma0)
            s = gaussian_world_score(x, t, sigma0)
            rhs = -x / (1.0 - t) - t / (1.0 - t) * s
            denom = np.maximum(np.abs(rhs), 1.0)
            assert np.max(np.abs(v - rhs) / denom) <= 1e-12


def test_gaussian_world_unit_sigma_variance():
    t = 0.3
    var = (1 - t) ** 2 + t**2
    x = np.array([0.7, -0.2])
    np.testing.assert_allclose(gaussian_world_score(x, t, 1.0), -x / var, rtol=1e-15)


def test_gaussian_world_time_domain():
    for t in (0.0, 1.0, -0.1, 1.1):
        with pytest.raises(DomainError):
            gaussian_world_score([1.0, 0.0], t, 1.0)
