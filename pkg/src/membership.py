"""
PRNU Leakage Toolkit - Membership Inference
Neyman-Pearson (genie, needs R) and normalized cross-correlation detectors
deciding whether a query image was part of a fingerprint's estimation set
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np

from config import Config, DataError, NumericalError, UsageError, parallel_map
from dataset_io import as_image_matrix, require_same_shape
from denoise import local_variance
from fingerprint import ResidualProduct

DETECTORS = ('NP', 'NCC')


@dataclass(eq=False)
class HypothesisContext:
    """
    Matrices of the NP test for one query r:
    Q = W_r o X_hat_r / R, Pmat = K_hat - Q, lambda_sq / theta_sq their floored local variances.
    With the fingerprint share cancelled, W_r stands for W_r - K_hat o X_hat_r
    """
    K_hat: np.ndarray
    Q: np.ndarray
    Pmat: np.ndarray
    lambda_sq: np.ndarray
    theta_sq: np.ndarray
    window: int
    floor: float


@dataclass(frozen=True)
class MembershipScore:
    statistic: float
    detector: str
    image_id: str = ''
    is_member_truth: Optional[bool] = None
    trial: Optional[int] = None

    def __post_init__(self):
        if self.detector not in DETECTORS:
            raise UsageError(f"unknown detector '{self.detector}'")
        if not np.isfinite(self.statistic):
            raise NumericalError(f"{self.detector} statistic for '{self.image_id}' is not finite")


def build_context(K_hat: np.ndarray, W_r: np.ndarray, X_hat_r: np.ndarray, R: np.ndarray,
                  window: int = Config.LOCAL_WINDOW, floor_scale: float = 1.0,
                  cancel_prnu: bool = True) -> HypothesisContext:
    """
    Args:
        K_hat: fingerprint estimate
        W_r, X_hat_r: residual and denoised image of the query
        R: normalizer of K_hat (genie knowledge)
        window: local-variance window
        floor_scale: multiplier of the variance floor (same for both maps)
        cancel_prnu: subtract K_hat o X_hat_r from W_r before forming Q
            (outsiders from the same camera carry the fingerprint too)
    """
    K_hat = as_image_matrix(K_hat, 'fingerprint')
    W_r = as_image_matrix(W_r, 'W_r')
    X_hat_r = as_image_matrix(X_hat_r, 'X_hat_r')
    if R is None:
        raise UsageError("the NP detector needs the normalizer R (bundle saved with --keep-R)")
    R = as_image_matrix(R, 'normalizer R')
    require_same_shape(('fingerprint', K_hat), ('W_r', W_r), ('X_hat_r', X_hat_r), ('R', R))

    if cancel_prnu:
        W_r = W_r - K_hat * X_hat_r
    Q = W_r * X_hat_r / np.maximum(R, Config.EPSILON_R)
    Pmat = K_hat - Q
    floor = Config.VARIANCE_FLOOR_FACTOR * floor_scale * float(np.mean(K_hat * K_hat))
    floor = max(floor, np.finfo(np.float64).tiny)
    return HypothesisContext(K_hat=K_hat, Q=Q, Pmat=Pmat,
                             lambda_sq=np.maximum(local_variance(K_hat, window), floor),
                             theta_sq=np.maximum(local_variance(Pmat, window), floor),
                             window=window, floor=floor)


def np_statistic(K_hat: np.ndarray, W_r: np.ndarray, X_hat_r: np.ndarray, R: np.ndarray,
                 window: int = Config.LOCAL_WINDOW, image_id: str = '',
                 is_member_truth: Optional[bool] = None,
                 floor_scale: float = 1.0, cancel_prnu: bool = True) -> MembershipScore:
    """
    Log-likelihood ratio (natural log) of "used" against "not used":
    sum of 0.5*log(lambda^2/theta^2) - Pmat^2/(2 theta^2) + K_hat^2/(2 lambda^2)
    """
    ctx = build_context(K_hat, W_r, X_hat_r, R, window, floor_scale, cancel_prnu)
    terms = (0.5 * np.log(ctx.lambda_sq / ctx.theta_sq)
             - ctx.Pmat * ctx.Pmat / (2.0 * ctx.theta_sq)
             + ctx.K_hat * ctx.K_hat / (2.0 * ctx.lambda_sq))
    return MembershipScore(statistic=float(np.sum(terms)), detector='NP',
                           image_id=image_id, is_member_truth=is_member_truth)


def ncc_statistic(K_hat: np.ndarray, W_r: np.ndarray, image_id: str = '',
                  is_member_truth: Optional[bool] = None) -> MembershipScore:
    """Normalized cross-correlation with sample statistics (denominator MN - 1)"""
    K_hat = as_image_matrix(K_hat, 'fingerprint')
    W_r = as_image_matrix(W_r, 'W_r')
    require_same_shape(('fingerprint', K_hat), ('W_r', W_r))
    n = K_hat.size
    if n < 2:
        raise DataError("NCC needs at least 2 pixels")

    sk = K_hat.std(ddof=1)
    st = W_r.std(ddof=1)
    if sk <= 1e-15 or st <= 1e-15:
        raise DataError("NCC is undefined for a constant fingerprint or residual")
    a = (K_hat - K_hat.mean()) / sk
    b = (W_r - W_r.mean()) / st
    return MembershipScore(statistic=float(np.sum(a * b) / (n - 1)), detector='NCC',
                           image_id=image_id, is_member_truth=is_member_truth)


def decide(score: Union[MembershipScore, float], psi: float) -> bool:
    """Member iff the statistic is strictly above the threshold"""
    statistic = score.statistic if isinstance(score, MembershipScore) else float(score)
    return statistic > psi


def score_queries(detector: str, K_hat: np.ndarray, queries: Sequence[ResidualProduct],
                  image_ids: Sequence[str], R: Optional[np.ndarray] = None,
                  truths: Optional[Sequence[Optional[bool]]] = None,
                  window: int = Config.LOCAL_WINDOW, threads: int = 1,
                  cancel_prnu: bool = True) -> List[MembershipScore]:
    """
    Score every query; output order follows the input order

    Args:
        detector: 'NP' or 'NCC'
        K_hat: fingerprint estimate
        queries: (W_r, X_hat_r) per query image
        image_ids: identifiers, index-aligned with queries
        R: normalizer, required for NP
        truths: membership labels when known
        window: local-variance window of NP
        threads: worker count
        cancel_prnu: NP only, see build_context
    """
    if detector not in DETECTORS:
        raise UsageError(f"unknown detector '{detector}' (choose from {', '.join(DETECTORS)})")
    if len(image_ids) != len(queries):
        raise UsageError("image_ids and queries differ in length")
    if detector == 'NP' and R is None:
        raise UsageError("the NP detector needs a bundle with R (extract --keep-R)")
    labels = list(truths) if truths is not None else [None] * len(queries)

    def work(i: int) -> MembershipScore:
        W_r, X_hat_r = queries[i]
        if detector == 'NP':
            return np_statistic(K_hat, W_r, X_hat_r, R, window, image_ids[i], labels[i],
                                cancel_prnu=cancel_prnu)
        return ncc_statistic(K_hat, W_r, image_ids[i], labels[i])

    return parallel_map(work, range(len(queries)), threads)
