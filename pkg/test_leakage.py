"""
Tests for the power budget, the water-filling solver and the leakage bound
Run with pytest, or directly: python test_leakage.py
"""

import json
import sys
from pathlib import Path

import numpy as np
import pytest

# Add src to path
sys.path.insert(0, str(Path(__file__).parent / 'src'))

from config import DataError, UsageError
from denoise import DenoiserSpec
from fingerprint import residual_products
from leakage import (GammaMap, LeakageSettings, _disturbance, estimate_P, estimate_gamma,
                     estimate_gamma_per_image, ilb, ilb_oracle, leakage_report, leakage_runs,
                     power_from_splits, random_subsets, report_from_products, solve_mu,
                     split_indices)
from sensor_sim import capture_series, flat_field, gen_prnu, textured_field

ORACLE = DenoiserSpec(kind='oracle')


def _gamma(values):
    return GammaMap(values=np.atleast_2d(np.asarray(values, dtype=float)))


def _bound(values, P):
    gamma = _gamma(values)
    return ilb(gamma, solve_mu(gamma, P))[0]


def _oracle_products(L, shape, scenes='tex', sigma_k=0.02, sigma_n=2.0, seed=0):
    truth = gen_prnu(*shape, sigma_k=sigma_k, seed=seed)
    if scenes == 'tex':
        X = [textured_field(*shape, seed=seed + 1 + i) for i in range(L)]
    else:
        X = [flat_field(*shape, 240)] * L
    images = capture_series(X, truth, sigma_n=sigma_n, seed=seed)
    return truth, residual_products(images, ORACLE, truths=X, desc=None)


# ==================== WATER-FILLING ====================

def test_single_channel_closed_form():
    for g, P in ((1.0, 1.0), (3.5, 0.2), (1e-4, 7.0)):
        expected = 0.5 * np.log2(1.0 + g / P)
        assert _bound([g], P) == pytest.approx(expected, rel=1e-9)
        assert ilb_oracle([g], P) == pytest.approx(expected, rel=1e-12)


def test_equal_variances_split_power_evenly():
    n, g, P = 12, 0.7, 3.0
    gamma = _gamma(np.full(n, g))
    bits, bpp = ilb(gamma, solve_mu(gamma, P))
    assert bpp == pytest.approx(0.5 * np.log2(1.0 + g * n / P), rel=1e-8)
    assert bits == pytest.approx(n * bpp)


def test_solver_meets_the_budget():
    rng = np.random.default_rng(1)
    gamma = _gamma(10.0 ** rng.uniform(-4, 1, size=500))
    for P in (1e-3, 1.0, 1e3):
        mu = solve_mu(gamma, P, rel_tol=1e-12)
        assert _disturbance(gamma.values.ravel(), mu) == pytest.approx(P, rel=1e-11)


def test_solver_agrees_with_brute_force_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        n = int(rng.integers(1, 9))
        g = 10.0 ** rng.uniform(-4, 1, size=n)
        P = float(10.0 ** rng.uniform(-3, 1))
        assert _bound(g, P) == pytest.approx(ilb_oracle(g, P), rel=1e-6)


def test_bound_is_monotone():
    g = [0.3, 1.2, 0.05, 4.0]
    budgets = [0.1, 0.5, 2.0, 10.0]
    values = [_bound(g, P) for P in budgets]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert _bound([2 * v for v in g], 1.0) > _bound(g, 1.0)


def test_floor_pixels_are_excluded():
    gamma = _gamma([[1.0, 0.0], [1.0, 0.0]])
    assert gamma.excluded() == 2
    mu = solve_mu(gamma, 2.0)
    bits, bpp = ilb(gamma, mu)
    assert bits == pytest.approx(2 * 0.5 * np.log2(2.0), rel=1e-8)
    assert bpp == pytest.approx(bits / 4)


def test_solver_errors():
    with pytest.raises(UsageError):
        solve_mu(_gamma([1.0]), 0.0)
    with pytest.raises(UsageError):
        solve_mu(_gamma([1.0]), float('nan'))
    with pytest.raises(DataError):
        solve_mu(_gamma([0.0, 0.0]), 1.0)
    with pytest.raises(UsageError):
        ilb_oracle(np.ones(17), 1.0)
    with pytest.raises(DataError):
        GammaMap(values=np.array([[-1.0]]))


# ==================== POWER BUDGET ====================

def test_split_indices_partition_the_set():
    splits = split_indices(11, 4, seed=3)
    assert splits == split_indices(11, 4, seed=3)
    for first, second in splits:
        assert len(first) == 5 and len(second) == 6
        assert sorted(first + second) == list(range(11))
        assert first == sorted(first)
    assert splits[0] != splits[1]


def test_negative_power_is_clamped():
    K = np.ones((2, 2))
    estimate = power_from_splits([(K, -K)], p_floor=1e-6)
    assert estimate.clamped
    assert estimate.p_hat == 1e-6
    assert estimate.p_samples == [-4.0]


def test_power_estimate_matches_fingerprint_energy():
    truth, products = _oracle_products(64, (32, 32))
    estimate = estimate_P(products, S=10, seed=1)
    assert not estimate.clamped
    assert len(estimate.p_samples) == 10
    assert estimate.p_hat == pytest.approx(float(np.sum(truth.K ** 2)), rel=0.05)


def test_power_estimate_needs_two_images():
    _, products = _oracle_products(1, (8, 8))
    with pytest.raises(UsageError):
        estimate_P(products)


# ==================== GAMMA ====================

def test_per_image_gamma_matches_noise_level():
    _, products = _oracle_products(40, (16, 16), scenes='flat', sigma_n=2.0, seed=4)
    gamma = estimate_gamma_per_image(products)
    assert gamma.method == 'per_image'
    expected = 2.0 ** 2 / (240.0 ** 2 * 40)
    assert np.median(gamma.values) == pytest.approx(expected, rel=0.15)


def test_local_gamma_of_white_estimate():
    rng = np.random.default_rng(5)
    gamma = estimate_gamma(rng.standard_normal((64, 64)) * 0.1, window=5)
    assert np.median(gamma.values) == pytest.approx(0.01, rel=0.15)
    assert set(gamma.stats()) == {'min', 'median', 'max'}


# ==================== REPORT ====================

def test_report_is_deterministic_and_serializable():
    _, products = _oracle_products(12, (24, 24), seed=6)
    settings = LeakageSettings(denoiser=ORACLE, splits=4, seed=9)
    first, bundle = report_from_products(products, settings)
    second, _ = report_from_products(products, settings)
    assert first.to_json() == second.to_json()
    doc = json.loads(first.to_json())
    assert doc['L'] == 12 and doc['rows'] == 24 and doc['cols'] == 24
    assert len(doc['P_samples']) == 4
    assert first.ilb_bpp > 0 and np.isfinite(first.ilb_bits)
    assert bundle.flags == first.postprocess_flags
    assert bundle.denoiser_id == 'oracle'


def test_raw_and_per_image_variants():
    _, products = _oracle_products(10, (16, 16), seed=7)
    raw, bundle = report_from_products(products, LeakageSettings(denoiser=ORACLE, raw=True,
                                                                 splits=3))
    assert raw.postprocess_flags == 0
    per_image, _ = report_from_products(products, LeakageSettings(
        denoiser=ORACLE, raw=True, splits=3, gamma_method='per_image'))
    assert per_image.gamma_method == 'per_image'
    assert per_image.P_hat == raw.P_hat


def test_settings_validation():
    with pytest.raises(UsageError):
        LeakageSettings(gamma_method='global')
    with pytest.raises(UsageError):
        LeakageSettings(gamma_method='per_image', whitened=True)
    with pytest.raises(UsageError):
        LeakageSettings(window=4)


def test_leakage_report_needs_enough_images():
    truth = gen_prnu(16, 16)
    images = capture_series([flat_field(16, 16, 240)] * 3, truth, sigma_n=1.0, seed=0)
    with pytest.raises(DataError):
        leakage_report(images, 5, LeakageSettings(denoiser=DenoiserSpec(levels=2)))
    report = leakage_report(images, 3, LeakageSettings(denoiser=DenoiserSpec(levels=2), splits=2))
    assert report.L == 3


def test_random_subsets():
    assert random_subsets(20, 6, 1, seed=3) == [[0, 1, 2, 3, 4, 5]]
    subsets = random_subsets(20, 6, 5, seed=3)
    assert subsets == random_subsets(20, 6, 5, seed=3)
    assert len({tuple(s) for s in subsets}) > 1
    for s in subsets:
        assert len(set(s)) == 6 and s == sorted(s) and max(s) < 20
    with pytest.raises(UsageError):
        random_subsets(20, 6, 0, seed=3)
    with pytest.raises(DataError):
        random_subsets(5, 6, 2, seed=3)


def test_leakage_runs_average_and_standard_error():
    _, products = _oracle_products(16, (16, 16), seed=11)
    settings = LeakageSettings(denoiser=ORACLE, splits=2, seed=4)

    single = leakage_runs(products, 8, 1, settings)
    assert single.runs == 1 and single.ilb_bpp_se is None
    assert single.reports[0].to_json() == report_from_products(products[:8], settings)[0].to_json()

    many = leakage_runs(products, 8, 4, settings)
    values = [r.ilb_bpp for r in many.reports]
    assert many.mean('ilb_bpp') == pytest.approx(np.mean(values))
    assert many.ilb_bpp_se == pytest.approx(np.std(values, ddof=1) / 2.0)
    assert all(r.L == 8 for r in many.reports)
    doc = many.to_dict()
    assert doc['runs'] == 4 and len(doc['subsets']) == 4
    assert json.dumps(doc, sort_keys=True) == \
        json.dumps(leakage_runs(products, 8, 4, settings).to_dict(), sort_keys=True)


if __name__ == '__main__':
    sys.exit(pytest.main([__file__, '-v']))
