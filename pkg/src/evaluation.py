"""
PRNU Leakage Toolkit - Evaluation
Monte-Carlo membership trials, ROC sweeps with AUC and bootstrap standard
errors, operating points, CSV exports and SVG figures
"""

import csv
import io
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics import auc

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt

from config import Config, DataError, UsageError, log_debug, log_warn, parallel_map, write_text_atomic
from denoise import DenoiserSpec
from fingerprint import ResidualProduct, estimate_from_products, postprocess, residual_products
from leakage import report_from_products
from membership import DETECTORS, MembershipScore, score_queries
from sensor_sim import STREAM_BOOT, STREAM_TRIAL, rng_for

plt.rcParams['svg.hashsalt'] = Config.TOOLKIT_NAME


# ==================== TRIALS ====================

@dataclass(eq=False)
class ResidualPool:
    """Denoised pool of candidate images: (W, X_hat) per image with its id"""
    ids: List[str]
    products: List[ResidualProduct]

    def __post_init__(self):
        if len(self.ids) != len(self.products):
            raise UsageError("pool ids and residuals differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("pool image ids must be unique")

    def __len__(self):
        return len(self.products)

    def head(self, L: int) -> List[ResidualProduct]:
        return self.products[:L]


def build_pool(images: Sequence[np.ndarray], ids: Sequence[str], spec: DenoiserSpec,
               truths: Optional[Sequence[np.ndarray]] = None, threads: int = 1) -> ResidualPool:
    """Denoise every pool image once; trials only re-combine residuals"""
    products = residual_products(images, spec, truths, threads, desc='Denoising pool')
    return ResidualPool(ids=list(ids), products=products)


@dataclass
class TrialConfig:
    """
    Membership experiment: per trial, L estimation images are drawn from the
    pool, `members` of them are queried along with `non_members` held-out images.
    """
    pool: ResidualPool
    L: int
    n_trials: int
    detectors: Tuple[str, ...] = DETECTORS
    seed: int = Config.DEFAULT_SEED
    members: int = 10
    non_members: int = 10
    window: int = Config.LOCAL_WINDOW
    epsilon_r: float = Config.EPSILON_R
    post: Optional[dict] = None
    threads: int = 1
    cancel_prnu: bool = True

    def __post_init__(self):
        if isinstance(self.detectors, str):
            self.detectors = (self.detectors,)
        for d in self.detectors:
            if d not in DETECTORS:
                raise UsageError(f"unknown detector '{d}' (choose from {', '.join(DETECTORS)})")
        if self.L < 1 or self.n_trials < 0 or self.members < 0 or self.non_members < 0:
            raise UsageError("L must be >= 1 and trial/query counts >= 0")
        if self.members > self.L:
            raise UsageError(f"cannot query {self.members} members of an L={self.L} set")
        if len(self.pool) < self.L + self.non_members:
            raise DataError(f"pool of {len(self.pool)} images is too small for "
                            f"L={self.L} plus {self.non_members} non-members")


def _one_trial(cfg: TrialConfig, t: int) -> List[MembershipScore]:
    rng = rng_for(cfg.seed, STREAM_TRIAL, t)
    perm = rng.permutation(len(cfg.pool))
    estimation = sorted(int(i) for i in perm[:cfg.L])
    held_out = [int(i) for i in perm[cfg.L:cfg.L + cfg.non_members]]
    members = [estimation[int(i)] for i in rng.permutation(cfg.L)[:cfg.members]]

    bundle = estimate_from_products([cfg.pool.products[i] for i in estimation], cfg.epsilon_r)
    K_hat = bundle.fingerprint
    if cfg.post:
        K_hat, _ = postprocess(K_hat, **cfg.post)

    queries = members + held_out
    labels = [True] * len(members) + [False] * len(held_out)
    ids = [cfg.pool.ids[i] for i in queries]
    products = [cfg.pool.products[i] for i in queries]

    scores = []
    for detector in cfg.detectors:
        batch = score_queries(detector, K_hat, products, ids, R=bundle.normalizer,
                              truths=labels, window=cfg.window,
                              cancel_prnu=cfg.cancel_prnu)
        scores.extend(replace(s, trial=t) for s in batch)
    return scores


def run_trials(cfg: TrialConfig) -> List[MembershipScore]:
    """
    All trials, flattened in trial order; deterministic given cfg.seed

    Returns:
        Labeled scores (every detector of cfg for every query of every trial)
    """
    if cfg.n_trials == 0:
        return []
    per_trial = parallel_map(lambda t: _one_trial(cfg, t), range(cfg.n_trials), cfg.threads,
                             desc=f"Trials L={cfg.L}", unit="trial")
    return [s for batch in per_trial for s in batch]


# ==================== ROC ====================

@dataclass
class RocCurve:
    """(FPR, TPR) points from (0,0) to (1,1), the threshold of each, and the trapezoid AUC"""
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float
    detector: str = ''
    L: int = 0

    @property
    def points(self) -> List[Tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def _labeled(scores: Sequence[MembershipScore]) -> Tuple[np.ndarray, np.ndarray]:
    if any(s.is_member_truth is None for s in scores):
        raise DataError("every score needs a membership label for ROC analysis")
    stats = np.array([s.statistic for s in scores], dtype=np.float64)
    labels = np.array([bool(s.is_member_truth) for s in scores])
    if labels.all() or not labels.any():
        raise DataError("ROC analysis needs both members and non-members")
    return stats, labels


def roc_from_arrays(stats: np.ndarray, labels: np.ndarray, detector: str = '', L: int = 0) -> RocCurve:
    """
    Sweep the threshold over +inf, every distinct statistic (descending) and -inf.
    A query counts as member when its statistic is strictly above the threshold.
    """
    pos = np.sort(stats[labels])
    neg = np.sort(stats[~labels])
    thresholds = np.concatenate(([np.inf], np.unique(stats)[::-1], [-np.inf]))
    tpr = (pos.size - np.searchsorted(pos, thresholds, side='right')) / pos.size
    fpr = (neg.size - np.searchsorted(neg, thresholds, side='right')) / neg.size

    keep = np.ones(thresholds.size, dtype=bool)
    keep[1:] = (np.diff(fpr) != 0) | (np.diff(tpr) != 0)
    fpr, tpr, thresholds = fpr[keep], tpr[keep], thresholds[keep]
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds, auc=float(auc(fpr, tpr)),
                    detector=detector, L=L)


def roc_points(scores: Sequence[MembershipScore], L: int = 0) -> RocCurve:
    """ROC curve of labeled scores from a single detector"""
    detectors = {s.detector for s in scores}
    if len(detectors) > 1:
        raise UsageError(f"scores mix detectors {sorted(detectors)}; split them first")
    stats, labels = _labeled(scores)
    return roc_from_arrays(stats, labels, detectors.pop(), L)


def bootstrap_auc_se(scores: Sequence[MembershipScore],
                     resamples: int = Config.BOOTSTRAP_RESAMPLES, seed: int = 0) -> float:
    """
    Standard error of the AUC by resampling whole trials with replacement
    (individual scores when no trial index is present)
    """
    stats, labels = _labeled(scores)
    trials = np.array([-1 if s.trial is None else s.trial for s in scores])
    groups = [np.flatnonzero(trials == t) for t in np.unique(trials)]
    if len(groups) == 1:
        groups = [np.array([i]) for i in range(len(scores))]

    rng = rng_for(seed, STREAM_BOOT)
    values = []
    for _ in range(resamples):
        pick = rng.integers(0, len(groups), size=len(groups))
        idx = np.concatenate([groups[g] for g in pick])
        lab = labels[idx]
        if lab.all() or not lab.any():
            continue
        values.append(roc_from_arrays(stats[idx], lab).auc)
    if len(values) < 2:
        return float('nan')
    return float(np.std(values, ddof=1))


def threshold_at_fpr(scores: Sequence[MembershipScore], target_fpr: float) -> float:
    """Smallest threshold whose false-positive rate does not exceed target_fpr"""
    if not 0 <= target_fpr <= 1:
        raise UsageError(f"target FPR must be in [0, 1] (got {target_fpr})")
    stats, labels = _labeled(scores)
    neg = np.sort(stats[~labels])
    allowed = int(np.floor(target_fpr * neg.size + 1e-12))
    if allowed >= neg.size:
        return float('-inf')
    return float(neg[neg.size - allowed - 1])


def equal_error_rate(curve: RocCurve) -> float:
    """FPR where FPR is closest to the miss rate 1 - TPR"""
    idx = int(np.argmin((curve.fpr - (1 - curve.tpr)) ** 2))
    return float(curve.fpr[idx])


# ==================== COMPARISON ====================

@dataclass
class AucRow:
    L: int
    detector: str
    auc: float
    se: float
    n_trials: int
    ilb_bpp: Optional[float] = None
    eer: Optional[float] = None
    threshold: Optional[float] = None
    tpr_at_threshold: Optional[float] = None
    curve: Optional[RocCurve] = None


def auc_compare(pool: ResidualPool, L_values: Sequence[int], detectors: Sequence[str] = DETECTORS,
                n_trials: int = Config.MIN_AUC_TRIALS, seed: int = Config.DEFAULT_SEED,
                members: int = 10, non_members: int = 10, post: Optional[dict] = None,
                window: int = Config.LOCAL_WINDOW, resamples: int = Config.BOOTSTRAP_RESAMPLES,
                threads: int = 1, leakage_settings=None, target_fpr: float = 0.05,
                cancel_prnu: bool = True) -> List[AucRow]:
    """
    AUC(detector, L) table with bootstrap standard errors

    Args:
        pool: denoised image pool
        L_values: estimation-set sizes, ascending
        detectors: detectors to compare
        n_trials: repetitions per L
        seed: master seed
        members, non_members: queries per trial
        post: postprocess() options for each trial's fingerprint
        window: NP local-variance window
        resamples: bootstrap resamples
        threads: trials in parallel
        leakage_settings: when given, the ILB of the first L pool images is added per row
        target_fpr: operating point reported next to the AUC
        cancel_prnu: NP query without its fingerprint share (membership.build_context)

    Returns:
        Rows ordered by L, then detector
    """
    L_values = list(L_values)
    if L_values != sorted(L_values):
        raise UsageError("L values must be sorted ascending")
    if n_trials < Config.MIN_AUC_TRIALS:
        log_warn(f"{n_trials} trials per L is below {Config.MIN_AUC_TRIALS}; standard errors are rough")

    rows = []
    for L in L_values:
        cfg = TrialConfig(pool=pool, L=L, n_trials=n_trials, detectors=tuple(detectors), seed=seed,
                          members=min(members, L), non_members=non_members, window=window,
                          post=post, threads=threads, cancel_prnu=cancel_prnu)
        scores = run_trials(cfg)
        ilb_bpp = None
        if leakage_settings is not None and L >= 2:
            ilb_bpp = report_from_products(pool.head(L), leakage_settings)[0].ilb_bpp
        for d in detectors:
            subset = [s for s in scores if s.detector == d]
            curve = roc_points(subset, L)
            se = bootstrap_auc_se(subset, resamples, seed)
            psi = threshold_at_fpr(subset, target_fpr)
            hits = [s.statistic > psi for s in subset if s.is_member_truth]
            log_debug(f"L={L} {d}: AUC={curve.auc:.4f} ± {se:.4f}")
            rows.append(AucRow(L=L, detector=d, auc=curve.auc, se=se, n_trials=n_trials,
                               ilb_bpp=ilb_bpp, eer=equal_error_rate(curve), threshold=psi,
                               tpr_at_threshold=float(np.mean(hits)), curve=curve))
    return rows


# ==================== EXPORTS ====================

def format_cell(value) -> str:
    if value is None:
        return ''
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (float, np.floating)):
        return format(float(value), '.17g')
    return str(value)


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_cell(v) for v in row])
    write_text_atomic(path, buf.getvalue())


def write_scores_csv(scores: Sequence[MembershipScore], path):
    write_csv(path, ('image_id', 'detector', 'statistic', 'is_member_truth', 'trial'),
              [(s.image_id, s.detector, s.statistic, s.is_member_truth, s.trial) for s in scores])


def write_roc_csv(curves: Sequence[RocCurve], path):
    rows = []
    for c in curves:
        rows.extend((c.detector, c.L, th, f, t) for th, f, t in zip(c.thresholds, c.fpr, c.tpr))
    write_csv(path, ('detector', 'L', 'threshold', 'fpr', 'tpr'), rows)


def write_auc_csv(rows: Sequence[AucRow], path):
    write_csv(path, ('L', 'detector', 'auc', 'se', 'n_trials', 'ilb_bpp', 'eer', 'threshold',
                     'tpr_at_threshold'),
              [(r.L, r.detector, r.auc, r.se, r.n_trials, r.ilb_bpp, r.eer, r.threshold,
                r.tpr_at_threshold) for r in rows])


def render_roc_svg(curves: Sequence[RocCurve], path, title: str = 'ROC'):
    """Overlay of ROC curves with the line of chance"""
    fig, ax = plt.subplots(figsize=(5, 5))
    for c in curves:
        ax.plot(c.fpr, c.tpr, label=f"{c.detector} L={c.L} (AUC {c.auc:.3f})")
    ax.plot([0, 1], [0, 1], 'k:', linewidth=0.8)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel('False positive rate')
    ax.set_ylabel('True positive rate')
    ax.set_title(title)
    ax.legend(loc='lower right', fontsize=8)
    fig.savefig(path, format='svg', metadata={'Date': None})
    plt.close(fig)


def render_trace_svg(scores: Sequence[MembershipScore], path, title: str = 'Detection statistic'):
    """Statistic per query in input order; members are expected first"""
    fig, ax = plt.subplots(figsize=(8, 3))
    stats = [s.statistic for s in scores]
    colors = ['tab:red' if s.is_member_truth else 'tab:blue' for s in scores]
    ax.scatter(range(len(stats)), stats, c=colors, s=6)
    n_members = sum(1 for s in scores if s.is_member_truth)
    if n_members:
        ax.axvline(n_members - 0.5, color='k', linestyle=':', linewidth=0.8)
    ax.set_xlabel('Image index')
    ax.set_ylabel('Statistic')
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format='svg', metadata={'Date': None})
    plt.close(fig)
