"""
Tests for the NP and NCC membership detectors
Run with pytest, or directly: python test_membership.py
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add src to path
sys.path.insert(0, str(Path(__file__).parent / 'src'))

from config import DataError, NumericalError, UsageError
from denoise import DenoiserSpec
from fingerprint import estimate_from_products, residual_products
from membership import (MembershipScore, build_context, decide, ncc_statistic, np_statistic,
                        score_queries)
from sensor_sim import capture_series, flat_field, gen_prnu, textured_field


@pytest.fixture(scope='module')
def experiment():
    """Weak PRNU, oracle denoiser: 4 estimation images and 8 outsiders"""
    shape = (32, 32)
    truth = gen_prnu(*shape, sigma_k=0.005, seed=21)
    scenes = [textured_field(*shape, seed=100 + i) for i in range(12)]
    images = capture_series(scenes, truth, sigma_n=2.0, seed=21)
    products = residual_products(images, DenoiserSpec(kind='oracle'), truths=scenes, desc=None)
    bundle = estimate_from_products(products[:4])
    ids = [f"img{i:02d}" for i in range(12)]
    labels = [i < 4 for i in range(12)]
    return bundle, products, ids, labels


def test_ncc_separates_members(experiment):
    bundle, products, ids, labels = experiment
    scores = score_queries('NCC', bundle.fingerprint, products, ids, truths=labels)
    members = [s.statistic for s in scores if s.is_member_truth]
    outsiders = [s.statistic for s in scores if not s.is_member_truth]
    assert min(members) > max(outsiders)
    assert [s.image_id for s in scores] == ids


def test_np_favours_members(experiment):
    bundle, products, ids, labels = experiment
    scores = score_queries('NP', bundle.fingerprint, products, ids, R=bundle.normalizer,
                           truths=labels)
    members = [s.statistic for s in scores if s.is_member_truth]
    outsiders = [s.statistic for s in scores if not s.is_member_truth]
    assert np.mean(members) > np.mean(outsiders)
    assert all(np.isfinite(s.statistic) for s in scores)


def test_threads_do_not_change_scores(experiment):
    bundle, products, ids, labels = experiment
    one = score_queries('NP', bundle.fingerprint, products, ids, R=bundle.normalizer, threads=1)
    four = score_queries('NP', bundle.fingerprint, products, ids, R=bundle.normalizer, threads=4)
    assert [s.statistic for s in one] == [s.statistic for s in four]


def test_ncc_of_identical_maps_is_one():
    rng = np.random.default_rng(0)
    K = rng.standard_normal((16, 16))
    assert ncc_statistic(K, K).statistic == pytest.approx(1.0, abs=1e-12)
    assert ncc_statistic(K, -2.0 * K).statistic == pytest.approx(-1.0, abs=1e-12)
    with pytest.raises(DataError):
        ncc_statistic(K, np.ones((16, 16)))


def test_np_context(experiment):
    bundle, products, _, _ = experiment
    W, X_hat = products[0]
    ctx = build_context(bundle.fingerprint, W, X_hat, bundle.normalizer)
    assert np.allclose(ctx.Pmat + ctx.Q, bundle.fingerprint)
    assert ctx.lambda_sq.min() >= ctx.floor > 0
    assert ctx.theta_sq.min() >= ctx.floor
    with pytest.raises(UsageError):
        np_statistic(bundle.fingerprint, W, X_hat, None)


def test_np_is_zero_for_an_empty_query(experiment):
    bundle, products, _, _ = experiment
    X_hat = products[0].X_hat
    explained = bundle.fingerprint * X_hat
    score = np_statistic(bundle.fingerprint, explained, X_hat, bundle.normalizer)
    assert score.statistic == pytest.approx(0.0, abs=1e-9)

    literal = np_statistic(bundle.fingerprint, np.zeros_like(X_hat), X_hat, bundle.normalizer,
                           cancel_prnu=False)
    assert literal.statistic == pytest.approx(0.0, abs=1e-9)


def test_np_survives_brighter_outsiders():
    # outsiders share the sensor but are much brighter than the members
    truth = gen_prnu(64, 64, sigma_k=0.01, seed=30)
    dim = [flat_field(64, 64, 128)] * 8
    bright = [flat_field(64, 64, 240)] * 8
    oracle = DenoiserSpec(kind='oracle')
    members = residual_products(capture_series(dim, truth, sigma_n=2.0, seed=30), oracle,
                                truths=dim, desc=None)
    outsiders = residual_products(capture_series(bright, truth, sigma_n=2.0, seed=31), oracle,
                                  truths=bright, desc=None)
    bundle = estimate_from_products(members)

    def stats(products, cancel):
        return [np_statistic(bundle.fingerprint, W, X_hat, bundle.normalizer,
                             cancel_prnu=cancel).statistic for W, X_hat in products]

    assert min(stats(members, True)) > max(stats(outsiders, True))
    # the literal query residual ranks the brighter outsiders first
    assert max(stats(members, False)) < min(stats(outsiders, False))


def test_np_ordering_survives_floor_scaling(experiment):
    bundle, products, _, labels = experiment

    def gap(scale):
        stats = [np_statistic(bundle.fingerprint, W, X_hat, bundle.normalizer,
                              floor_scale=scale).statistic for W, X_hat in products]
        members = [s for s, l in zip(stats, labels) if l]
        outsiders = [s for s, l in zip(stats, labels) if not l]
        return np.mean(members) - np.mean(outsiders)

    assert gap(1.0) > 0 and gap(1e3) > 0


def test_ncc_is_affine_invariant():
    rng = np.random.default_rng(1)
    K = rng.standard_normal((24, 24))
    W = K + rng.standard_normal((24, 24))
    base = ncc_statistic(K, W).statistic
    assert ncc_statistic(K, 3.0 * W + 7.0).statistic == pytest.approx(base, abs=1e-12)
    assert ncc_statistic(K, -0.5 * W + 1.0).statistic == pytest.approx(-base, abs=1e-12)
    assert abs(base) <= 24 * 24 / (24 * 24 - 1)


def test_ncc_null_is_small():
    rng = np.random.default_rng(2)
    K = rng.standard_normal((128, 128))
    values = [ncc_statistic(K, rng.standard_normal((128, 128))).statistic for _ in range(50)]
    assert max(abs(v) for v in values) < 5 / 128


def test_decide_is_strict():
    score = MembershipScore(statistic=1.0, detector='NCC')
    assert not decide(score, 1.0)
    assert decide(score, 0.999)
    assert decide(2.0, 1.0)
    assert decide(-1e300, float('-inf'))


def test_score_validation():
    with pytest.raises(NumericalError):
        MembershipScore(statistic=float('inf'), detector='NP')
    with pytest.raises(UsageError):
        MembershipScore(statistic=0.0, detector='PCE')
    with pytest.raises(UsageError):
        score_queries('NP', np.ones((4, 4)), [], [])
    with pytest.raises(UsageError):
        score_queries('NCC', np.ones((4, 4)), [], ['a'])


if __name__ == '__main__':
    sys.exit(pytest.main([__file__, '-v']))
