"""
PRNU Leakage Toolkit - Information Leakage
Estimates the disturbance power budget P from random splits, the per-pixel
estimation-noise variance map gamma^2, solves the water-filling condition
for the Lagrange multiplier mu and evaluates the leakage lower bound (ILB).

Per pixel, with x = mu * gamma^2 and s = sqrt(1 + 4 / x):

    disturbance power   p = 2 / (mu * (s + 1))      (sum over pixels = P)
    leaked bits         0.5 * log2(1 + x * (s + 1) / 2)  = 0.5 * log2(1 + gamma^2 / p)
"""

import json
from dataclasses import dataclass, field, asdict, replace
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize

from config import (Config, DataError, NumericalError, UsageError, log_debug, log_ok, log_warn,
                    parallel_map)
from dataset_io import FingerprintBundle, PostProcess, as_image_matrix
from denoise import DenoiserSpec, check_window, local_variance
from fingerprint import (ResidualProduct, estimate_from_products, postprocess,
                         residual_products)
from sensor_sim import STREAM_SPLIT, STREAM_SUBSET, derive_seed, rng_for

GAMMA_METHODS = ('local', 'per_image')


# ==================== GAMMA MAP ====================

@dataclass(eq=False)
class GammaMap:
    """Per-pixel variance of the estimation noise"""
    values: np.ndarray
    window: int = Config.LOCAL_WINDOW
    method: str = 'local'

    def __post_init__(self):
        self.values = as_image_matrix(self.values, 'gamma^2')
        if (self.values < 0).any():
            raise DataError("gamma^2 must be nonnegative")

    @property
    def shape(self):
        return self.values.shape

    def active(self, gamma_floor: float = Config.GAMMA_FLOOR) -> np.ndarray:
        return self.values[self.values > gamma_floor]

    def excluded(self, gamma_floor: float = Config.GAMMA_FLOOR) -> int:
        return int(np.count_nonzero(self.values <= gamma_floor))

    def stats(self) -> Dict[str, float]:
        return {'min': float(self.values.min()),
                'median': float(np.median(self.values)),
                'max': float(self.values.max())}


def estimate_gamma(K_hat: np.ndarray, window: int = Config.LOCAL_WINDOW) -> GammaMap:
    """
    Local sample variance of the fingerprint estimate

    Args:
        K_hat: fingerprint estimate (estimation noise dominates it for moderate L)
        window: odd neighbourhood size

    Returns:
        GammaMap
    """
    K_hat = as_image_matrix(K_hat, 'fingerprint')
    return GammaMap(values=local_variance(K_hat, window), window=window, method='local')


def estimate_gamma_per_image(products: Sequence[ResidualProduct],
                             epsilon_r: float = Config.EPSILON_R) -> GammaMap:
    """
    Per-pixel sample variance of the single-image contributions
    c_i = L * W_i o X_hat_i / R, divided by L (variance of their mean K_hat)
    """
    L = len(products)
    if L < 2:
        raise UsageError("the per-image gamma estimate needs at least 2 images")
    R = np.zeros(products[0].X_hat.shape)
    for p in products:
        R += p.X_hat * p.X_hat
    R = np.maximum(R, epsilon_r)

    # Welford, in image order
    mean = np.zeros_like(R)
    m2 = np.zeros_like(R)
    for i, p in enumerate(products, start=1):
        c = L * p.W * p.X_hat / R
        delta = c - mean
        mean += delta / i
        m2 += delta * (c - mean)
    return GammaMap(values=m2 / (L - 1) / L, window=0, method='per_image')


# ==================== POWER BUDGET ====================

class PowerEstimate(NamedTuple):
    p_hat: float
    p_samples: List[float]
    clamped: bool
    p_floor: float


def power_from_splits(pairs: Sequence[Tuple[np.ndarray, np.ndarray]],
                      p_floor: float) -> PowerEstimate:
    """
    Mean Frobenius cross-product of split-half estimates, clamped below at p_floor
    """
    if not pairs:
        raise UsageError("at least one split is required")
    samples = []
    for K1, K2 in pairs:
        if K1.shape != K2.shape:
            raise DataError(f"split estimates differ in size: {K1.shape} vs {K2.shape}")
        samples.append(float(np.sum(K1 * K2)))
    p_hat = float(np.mean(samples))
    clamped = not p_hat > p_floor
    if clamped:
        log_warn(f"P estimate {p_hat:.4g} clamped to floor {p_floor:.4g}")
        p_hat = p_floor
    return PowerEstimate(p_hat=p_hat, p_samples=samples, clamped=clamped, p_floor=p_floor)


def split_indices(L: int, S: int, seed: int) -> List[Tuple[List[int], List[int]]]:
    """S random splits into halves of sizes floor(L/2) and ceil(L/2), each sorted"""
    splits = []
    for s in range(S):
        perm = rng_for(seed, STREAM_SPLIT, s).permutation(L)
        splits.append((sorted(int(i) for i in perm[:L // 2]),
                       sorted(int(i) for i in perm[L // 2:])))
    return splits


def estimate_P(products: Sequence[ResidualProduct], S: int = Config.SPLITS, seed: int = 0,
               epsilon_r: float = Config.EPSILON_R, post: Optional[dict] = None,
               p_floor: Optional[float] = None, threads: int = 1) -> PowerEstimate:
    """
    Split-based estimate of the disturbance power P

    Args:
        products: per-image (W, X_hat) of the estimation set
        S: number of random splits
        seed: master seed (split s uses its own substream)
        epsilon_r: normalizer guard of each half-estimate
        post: postprocess() options applied to both halves (None: raw halves)
        p_floor: clamp level; default P_FLOOR_FACTOR times the mean of ||K1|| ||K2||
        threads: splits estimated in parallel

    Returns:
        PowerEstimate
    """
    L = len(products)
    if L < 2:
        raise UsageError(f"estimating P needs at least 2 images (got {L})")
    if S < 1:
        raise UsageError(f"split count must be >= 1 (got {S})")

    def halves(split) -> Tuple[np.ndarray, np.ndarray]:
        out = []
        for idx in split:
            K = estimate_from_products([products[i] for i in idx], epsilon_r).fingerprint
            if post:
                K, _ = postprocess(K, **post)
            out.append(K)
        return out[0], out[1]

    pairs = parallel_map(halves, split_indices(L, S, seed), threads)
    if p_floor is None:
        scale = np.mean([np.linalg.norm(K1) * np.linalg.norm(K2) for K1, K2 in pairs])
        p_floor = Config.P_FLOOR_FACTOR * float(scale)
    return power_from_splits(pairs, p_floor)


# ==================== WATER-FILLING ====================

def _channel_terms(gammas: np.ndarray, mu: float):
    """(disturbance powers, leaked bits) per channel; x -> 0 gives (0, 0)"""
    x = mu * gammas
    with np.errstate(divide='ignore', over='ignore'):
        s = np.sqrt(1.0 + 4.0 / x)
        power = np.where(x > 0, 2.0 / (mu * (s + 1.0)), 0.0)
        bits = np.where(x > 0, 0.5 * np.log1p(0.5 * x * (s + 1.0)) / np.log(2.0), 0.0)
    return power, bits


def _disturbance(gammas: np.ndarray, mu: float) -> float:
    return float(np.sum(_channel_terms(gammas, mu)[0]))


def solve_mu(gamma: GammaMap, P: float, rel_tol: float = Config.SOLVER_REL_TOL,
             gamma_floor: float = Config.GAMMA_FLOOR,
             max_iter: int = Config.SOLVER_MAX_ITER) -> float:
    """
    Find mu with sum of per-pixel disturbance powers equal to P

    The sum is strictly decreasing in mu. The root is bracketed by doubling or
    halving from mu0 = MN / P, then bisected in log space.

    Args:
        gamma: variance map
        P: disturbance power budget
        rel_tol: |g(mu) - P| / P at return
        gamma_floor: pixels at or below it are excluded
        max_iter: bracketing plus bisection steps

    Returns:
        mu > 0
    """
    if not (np.isfinite(P) and P > 0):
        raise UsageError(f"P must be positive and finite (got {P})")
    gammas = gamma.active(gamma_floor)
    if gammas.size == 0:
        raise DataError(f"every gamma^2 is at or below the floor {gamma_floor:g}")

    def err(mu):
        return (_disturbance(gammas, mu) - P) / P

    mu0 = gamma.values.size / P
    e0 = err(mu0)
    if abs(e0) <= rel_tol:
        return mu0

    steps = 0
    lo = hi = mu0
    if e0 > 0:
        # too much disturbance: mu too small
        while err(hi) > 0:
            lo, hi = hi, hi * 2.0
            steps += 1
            if steps >= max_iter or not np.isfinite(hi):
                raise NumericalError("could not bracket mu (upper side)")
    else:
        while err(lo) < 0:
            hi, lo = lo, lo * 0.5
            steps += 1
            if steps >= max_iter or lo == 0:
                raise NumericalError("could not bracket mu (lower side)")

    while steps < max_iter:
        mid = float(np.sqrt(lo * hi))
        if not lo < mid < hi:
            break
        e = err(mid)
        if abs(e) <= rel_tol:
            return mid
        if e > 0:
            lo = mid
        else:
            hi = mid
        steps += 1
    raise NumericalError(f"mu solver did not reach rel_tol={rel_tol:g} in {max_iter} steps")


def ilb(gamma: GammaMap, mu: float, gamma_floor: float = Config.GAMMA_FLOOR) -> Tuple[float, float]:
    """
    Leakage lower bound

    Returns:
        (total bits, bits per pixel); pixels at or below gamma_floor contribute 0
    """
    if not mu > 0:
        raise UsageError(f"mu must be positive (got {mu})")
    _, bits = _channel_terms(gamma.active(gamma_floor), mu)
    total = float(np.sum(bits))
    return total, total / gamma.values.size


def ilb_oracle(gammas: Sequence[float], P: float) -> float:
    """
    Brute-force minimum of sum 0.5*log2(1 + g_i / p_i) over p_i >= 0, sum p_i = P

    Independent of the mu solver: SLSQP on the budget fractions x_i = p_i / P.
    """
    g = np.asarray(gammas, dtype=np.float64)
    if g.ndim != 1 or not 1 <= g.size <= 16:
        raise UsageError("ilb_oracle takes between 1 and 16 channel variances")
    if not P > 0:
        raise UsageError(f"P must be positive (got {P})")
    g = g[g > 0]
    if g.size == 0:
        return 0.0
    if g.size == 1:
        return float(0.5 * np.log2(1.0 + g[0] / P))

    ln2 = np.log(2.0)

    def objective(x):
        return float(np.sum(0.5 * np.log1p(g / (P * x)) / ln2))

    def gradient(x):
        return -g / (2.0 * ln2 * x * (P * x + g))

    budget = {'type': 'eq', 'fun': lambda x: np.sum(x) - 1.0, 'jac': lambda x: np.ones_like(x)}
    bounds = [(1e-15, 1.0)] * g.size

    best = None
    for x0 in (np.full(g.size, 1.0 / g.size), np.sqrt(g) / np.sum(np.sqrt(g))):
        result = minimize(objective, x0, jac=gradient, method='SLSQP', bounds=bounds,
                          constraints=[budget], options={'ftol': 1e-15, 'maxiter': 1000})
        x = np.clip(result.x, 1e-15, None)
        x = x / x.sum()
        value = objective(x)
        if best is None or value < best:
            best = value
    return best


# ==================== REPORT ====================

@dataclass
class LeakageSettings:
    """Pipeline switches of leakage_report"""
    denoiser: DenoiserSpec = field(default_factory=DenoiserSpec)
    window: int = Config.LOCAL_WINDOW
    splits: int = Config.SPLITS
    seed: int = Config.DEFAULT_SEED
    epsilon_r: float = Config.EPSILON_R
    zero_meaned: bool = True
    wiener: bool = True
    raw: bool = False
    whitened: bool = False
    gamma_method: str = 'local'
    rel_tol: float = Config.SOLVER_REL_TOL
    threads: int = 1

    def __post_init__(self):
        check_window(self.window)
        if self.gamma_method not in GAMMA_METHODS:
            raise UsageError(f"unknown gamma method '{self.gamma_method}' "
                             f"(choose from {', '.join(GAMMA_METHODS)})")
        if self.gamma_method == 'per_image' and self.whitened:
            raise UsageError("the per-image gamma estimate is not defined for whitened fingerprints")
        if self.splits < 1:
            raise UsageError(f"split count must be >= 1 (got {self.splits})")

    def post_options(self) -> Optional[dict]:
        if self.raw and not self.whitened:
            return None
        return {'zero_meaned': self.zero_meaned and not self.raw,
                'wiener': self.wiener and not self.raw,
                'whitened': self.whitened,
                'whiten_window': self.window}


@dataclass
class LeakageReport:
    P_hat: float
    splits: int
    P_samples: List[float]
    mu: float
    ilb_bits: float
    ilb_bpp: float
    gamma_stats: Dict[str, float]
    excluded_pixels: int
    L: int = 0
    rows: int = 0
    cols: int = 0
    gamma_method: str = 'local'
    postprocess_flags: int = 0
    P_clamped: bool = False
    P_floor: float = 0.0
    warnings: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def report_from_products(products: Sequence[ResidualProduct],
                         settings: LeakageSettings) -> Tuple[LeakageReport, FingerprintBundle]:
    """Leakage pipeline on already denoised images"""
    L = len(products)
    if L < 2:
        raise UsageError(f"leakage analysis needs at least 2 images (got {L})")
    warnings = []

    bundle = estimate_from_products(products, settings.epsilon_r, settings.denoiser.identifier,
                                    settings.seed)
    post = settings.post_options()
    K_hat, flags = bundle.fingerprint, PostProcess.NONE
    if post:
        K_hat, flags = postprocess(K_hat, **post)

    if settings.gamma_method == 'per_image':
        gamma = estimate_gamma_per_image(products, settings.epsilon_r)
    else:
        gamma = estimate_gamma(K_hat, settings.window)

    p_floor = Config.P_FLOOR_FACTOR * float(gamma.values.sum())
    power = estimate_P(products, settings.splits, settings.seed, settings.epsilon_r, post,
                       p_floor if p_floor > 0 else None, settings.threads)
    if power.clamped:
        warnings.append(f"P_hat clamped to floor {power.p_floor:.6g}")

    excluded = gamma.excluded()
    if excluded:
        warnings.append(f"{excluded} pixel(s) with gamma^2 at or below {Config.GAMMA_FLOOR:g} excluded")

    mu = solve_mu(gamma, power.p_hat, settings.rel_tol)
    bits, bpp = ilb(gamma, mu)
    M, N = gamma.shape
    log_debug(f"L={L}: P_hat={power.p_hat:.6g}, mu={mu:.6g}, ILB={bpp:.6g} bpp")

    report = LeakageReport(P_hat=power.p_hat, splits=settings.splits, P_samples=power.p_samples,
                           mu=mu, ilb_bits=bits, ilb_bpp=bpp, gamma_stats=gamma.stats(),
                           excluded_pixels=excluded, L=L, rows=M, cols=N,
                           gamma_method=settings.gamma_method, postprocess_flags=int(flags),
                           P_clamped=power.clamped, P_floor=power.p_floor, warnings=warnings)
    bundle = FingerprintBundle(fingerprint=K_hat, L=L, normalizer=bundle.normalizer, flags=flags,
                               denoiser_id=bundle.denoiser_id, creation_seed=bundle.creation_seed)
    return report, bundle


def leakage_report(images: Sequence[np.ndarray], L: int, settings: LeakageSettings,
                   truths: Optional[Sequence[np.ndarray]] = None) -> LeakageReport:
    """
    Full pipeline: denoise the first L images, estimate K_hat, gamma^2, P_hat, mu and the ILB

    Args:
        images: estimation captures in manifest order
        L: number of images to use
        settings: pipeline switches (splits, seed, post-processing, gamma method)
        truths: true scenes for the oracle denoiser

    Returns:
        LeakageReport (deterministic given settings.seed)
    """
    if L > len(images):
        raise DataError(f"L={L} requested but only {len(images)} estimation images available")
    products = residual_products(images[:L], settings.denoiser,
                                 None if truths is None else truths[:L], settings.threads)
    report, _ = report_from_products(products, settings)
    log_ok(f"ILB for L={L}: {report.ilb_bpp:.6g} bpp ({report.ilb_bits:.6g} bits)")
    return report


# ==================== REPEATED RUNS ====================

def subset_seed(seed: int, L: int, run: int) -> int:
    """Seed of leakage run `run` at size L (drives both the subset and its splits)"""
    return derive_seed(seed, STREAM_SUBSET, L, run)


def random_subsets(n: int, L: int, runs: int, seed: int) -> List[List[int]]:
    """
    Index sets of the estimation images used by each run, sorted ascending.
    A single run takes the first L images; more runs draw L of n at random.
    """
    if runs < 1:
        raise UsageError(f"run count must be >= 1 (got {runs})")
    if L > n:
        raise DataError(f"L={L} requested but only {n} estimation images available")
    if runs == 1:
        return [list(range(L))]
    subsets = []
    for r in range(runs):
        perm = rng_for(subset_seed(seed, L, r), STREAM_SUBSET).permutation(n)
        subsets.append(sorted(int(i) for i in perm[:L]))
    return subsets


@dataclass
class LeakageRuns:
    """ILB of one L over several estimation subsets"""
    L: int
    subsets: List[List[int]]
    reports: List[LeakageReport]

    @property
    def runs(self) -> int:
        return len(self.reports)

    def mean(self, name: str) -> float:
        return float(np.mean([getattr(r, name) for r in self.reports]))

    @property
    def ilb_bpp_se(self) -> Optional[float]:
        """Standard error of the mean ILB; None for a single run"""
        if self.runs < 2:
            return None
        values = [r.ilb_bpp for r in self.reports]
        return float(np.std(values, ddof=1) / np.sqrt(self.runs))

    def to_dict(self) -> dict:
        return {'L': self.L, 'runs': self.runs, 'ilb_bpp_mean': self.mean('ilb_bpp'),
                'ilb_bpp_se': self.ilb_bpp_se, 'subsets': self.subsets,
                'reports': [r.to_dict() for r in self.reports]}


def leakage_runs(products: Sequence[ResidualProduct], L: int, runs: int,
                 settings: LeakageSettings) -> LeakageRuns:
    """
    Repeat the leakage pipeline on `runs` seeded L-subsets of the denoised estimation pool

    Args:
        products: every available estimation image, denoised, in manifest order
        L: estimation set size per run
        runs: number of subsets; 1 keeps the first L images and settings.seed
        settings: pipeline switches; with several runs each run gets its own seed

    Returns:
        LeakageRuns with one report per subset
    """
    subsets = random_subsets(len(products), L, runs, settings.seed)
    reports = []
    for r, subset in enumerate(subsets):
        run_settings = settings
        if runs > 1:
            run_settings = replace(settings, seed=subset_seed(settings.seed, L, r))
        report, _ = report_from_products([products[i] for i in subset], run_settings)
        reports.append(report)
    result = LeakageRuns(L=L, subsets=subsets, reports=reports)
    if runs > 1:
        log_debug(f"L={L}: mean ILB {result.mean('ilb_bpp'):.6g} bpp over {runs} runs "
                  f"(SE {result.ilb_bpp_se:.3g})")
    return result
