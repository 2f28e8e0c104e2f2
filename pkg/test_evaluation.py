"""
Tests for membership trials, ROC analysis, AUC tables and exports
Run with pytest, or directly: python test_evaluation.py
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add src to path
sys.path.insert(0, str(Path(__file__).parent / 'src'))

from config import DataError, UsageError
from denoise import DenoiserSpec
from evaluation import (TrialConfig, auc_compare, bootstrap_auc_se, build_pool,
                        equal_error_rate, format_cell, render_roc_svg, roc_from_arrays,
                        roc_points, run_trials, threshold_at_fpr, write_auc_csv, write_csv)
from leakage import LeakageSettings
from membership import MembershipScore
from sensor_sim import capture_series, gen_prnu, textured_field

ORACLE = DenoiserSpec(kind='oracle')


@pytest.fixture(scope='module')
def pool():
    shape = (32, 32)
    truth = gen_prnu(*shape, sigma_k=0.005, seed=31)
    scenes = [textured_field(*shape, seed=500 + i) for i in range(20)]
    images = capture_series(scenes, truth, sigma_n=2.0, seed=31)
    return build_pool(images, [f"p{i:02d}" for i in range(20)], ORACLE, truths=scenes)


def _scores(stats, labels, detector='NCC', trials=None):
    trials = trials or [None] * len(stats)
    return [MembershipScore(statistic=s, detector=detector, is_member_truth=l, trial=t)
            for s, l, t in zip(stats, labels, trials)]


# ==================== ROC ====================

def test_roc_of_small_example():
    curve = roc_from_arrays(np.array([0.9, 0.8, 0.7, 0.1]), np.array([True, False, True, False]))
    assert curve.points == [(0.0, 0.0), (0.0, 0.5), (0.5, 0.5), (0.5, 1.0), (1.0, 1.0)]
    assert curve.auc == pytest.approx(0.75)
    assert curve.thresholds[0] == np.inf and curve.thresholds[-1] == -np.inf


def test_roc_extremes():
    perfect = roc_points(_scores([5.0, 4.0, 1.0, 0.0], [True, True, False, False]))
    assert perfect.auc == pytest.approx(1.0)
    assert equal_error_rate(perfect) == 0.0
    ties = roc_points(_scores([1.0] * 4, [True, False, True, False]))
    assert ties.points == [(0.0, 0.0), (1.0, 1.0)]
    assert ties.auc == pytest.approx(0.5)


def test_auc_is_rank_based():
    rng = np.random.default_rng(3)
    stats = rng.standard_normal(60)
    labels = rng.random(60) < 0.5
    base = roc_from_arrays(stats, labels).auc
    assert roc_from_arrays(np.exp(3 * stats), labels).auc == pytest.approx(base, abs=1e-12)
    assert roc_from_arrays(stats, ~labels).auc == pytest.approx(1.0 - base, abs=1e-12)


def test_null_auc_is_near_one_half():
    rng = np.random.default_rng(4)
    stats = rng.standard_normal(10_000)
    labels = np.arange(10_000) % 2 == 0
    assert 0.47 <= roc_from_arrays(stats, labels).auc <= 0.53


def test_roc_needs_labels_and_one_detector():
    with pytest.raises(DataError):
        roc_points(_scores([1.0, 2.0], [True, True]))
    with pytest.raises(DataError):
        roc_points(_scores([1.0, 2.0], [True, None]))
    mixed = _scores([1.0], [True]) + _scores([0.0], [False], detector='NP')
    with pytest.raises(UsageError):
        roc_points(mixed)


def test_threshold_at_fpr():
    negatives = [float(v) for v in range(1, 21)]
    scores = _scores(negatives + [30.0], [False] * 20 + [True])
    assert threshold_at_fpr(scores, 0.05) == 19.0
    assert threshold_at_fpr(scores, 0.0) == 20.0
    assert threshold_at_fpr(scores, 1.0) == float('-inf')
    with pytest.raises(UsageError):
        threshold_at_fpr(scores, 1.5)


def test_bootstrap_se_is_reproducible():
    rng = np.random.default_rng(4)
    stats = list(rng.standard_normal(40) + np.repeat([1.0, 0.0], 20))
    labels = [True] * 20 + [False] * 20
    trials = [i % 8 for i in range(40)]
    scores = _scores(stats, labels, trials=trials)
    se = bootstrap_auc_se(scores, resamples=100, seed=2)
    assert se == bootstrap_auc_se(scores, resamples=100, seed=2)
    assert 0.0 < se < 0.3


# ==================== TRIALS ====================

def test_trials_are_deterministic_and_labeled(pool):
    cfg = TrialConfig(pool=pool, L=4, n_trials=3, seed=5, members=3, non_members=6)
    scores = run_trials(cfg)
    assert len(scores) == 3 * 2 * 9
    assert [s.trial for s in scores[:18]] == [0] * 18
    assert sum(1 for s in scores if s.is_member_truth) == 3 * 2 * 3
    again = run_trials(TrialConfig(pool=pool, L=4, n_trials=3, seed=5, members=3,
                                   non_members=6, threads=3))
    assert [s.statistic for s in scores] == [s.statistic for s in again]


def test_trial_config_validation(pool):
    with pytest.raises(DataError):
        TrialConfig(pool=pool, L=15, n_trials=1, non_members=10)
    with pytest.raises(UsageError):
        TrialConfig(pool=pool, L=2, n_trials=1, members=3)
    with pytest.raises(UsageError):
        TrialConfig(pool=pool, L=2, n_trials=1, detectors=('PCE',))
    assert run_trials(TrialConfig(pool=pool, L=2, n_trials=0, members=2)) == []


def test_auc_compare_finds_membership(pool):
    rows = auc_compare(pool, [2, 4], n_trials=4, seed=1, members=2, non_members=6,
                       resamples=50, leakage_settings=LeakageSettings(denoiser=ORACLE, splits=2))
    assert [(r.L, r.detector) for r in rows] == [(2, 'NP'), (2, 'NCC'), (4, 'NP'), (4, 'NCC')]
    ncc_small = rows[1]
    assert ncc_small.auc > 0.9
    assert all(r.ilb_bpp is not None and r.ilb_bpp > 0 for r in rows)
    assert all(0.0 <= r.tpr_at_threshold <= 1.0 for r in rows)
    with pytest.raises(UsageError):
        auc_compare(pool, [4, 2], n_trials=1)


# ==================== EXPORTS ====================

def test_csv_cells_are_exact(tmp_path):
    assert format_cell(0.1) == '0.10000000000000001'
    assert format_cell(None) == ''
    assert format_cell(True) == 'true'
    assert format_cell(3) == '3'
    write_csv(tmp_path / 't.csv', ('a', 'b'), [(1, 0.5), ('x', None)])
    assert (tmp_path / 't.csv').read_text(encoding='utf-8') == 'a,b\n1,0.5\nx,\n'


def test_auc_csv_and_svg_are_reproducible(tmp_path):
    curve = roc_points(_scores([3.0, 2.0, 1.5, 0.5], [True, False, True, False]), L=4)
    render_roc_svg([curve], tmp_path / 'a.svg')
    render_roc_svg([curve], tmp_path / 'b.svg')
    assert (tmp_path / 'a.svg').read_bytes() == (tmp_path / 'b.svg').read_bytes()

    from evaluation import AucRow
    write_auc_csv([AucRow(L=4, detector='NCC', auc=curve.auc, se=0.1, n_trials=30)],
                  tmp_path / 'auc.csv')
    lines = (tmp_path / 'auc.csv').read_text(encoding='utf-8').splitlines()
    assert lines[0].startswith('L,detector,auc,se')
    assert lines[1].startswith('4,NCC,0.75,')


if __name__ == '__main__':
    sys.exit(pytest.main([__file__, '-v']))
