"""
PRNU Leakage Toolkit - Fingerprint Estimation
MLE fingerprint K_hat = sum(W o X_hat) / sum(X_hat o X_hat), post-processing
(zero-meaning, full-DFT Wiener filtering) and local-std whitening
"""

from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import uniform_filter

from config import Config, DataError, DimensionError, UsageError, log_debug, log_warn, parallel_map
from dataset_io import FingerprintBundle, PostProcess, as_image_matrix, require_same_shape
from denoise import DenoiserSpec, check_window, denoise, local_variance, residual


class ResidualProduct(NamedTuple):
    """Residual W and denoised image X_hat of one capture"""
    W: np.ndarray
    X_hat: np.ndarray


# ==================== ACCUMULATION ====================

@dataclass(eq=False)
class EstimationAccumulator:
    """
    Running sums of the MLE numerator (W o X_hat) and normalizer R (X_hat o X_hat).

    Contributions are folded in ascending image index; a contribution that
    arrives ahead of its turn waits in `pending`, so any call order yields
    the same bits.
    """
    numerator: np.ndarray
    R: np.ndarray
    L: int = 0
    next_index: int = 0
    pending: Dict[int, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    @property
    def shape(self):
        return self.numerator.shape

    def _fold(self, index: int):
        WX, XX = self.pending.pop(index)
        self.numerator += WX
        self.R += XX

    def flush(self):
        """Fold every waiting contribution in ascending index order"""
        for index in sorted(self.pending):
            self._fold(index)
            self.next_index = max(self.next_index, index + 1)


def new_accumulator(shape: Tuple[int, int]) -> EstimationAccumulator:
    M, N = shape
    if M < 1 or N < 1:
        raise UsageError(f"accumulator size must be positive (got {M}x{N})")
    return EstimationAccumulator(numerator=np.zeros((M, N)), R=np.zeros((M, N)))


def accumulate(acc: EstimationAccumulator, W: np.ndarray, X_hat: np.ndarray,
               index: Optional[int] = None) -> EstimationAccumulator:
    """
    Add one image: numerator += W o X_hat, R += X_hat o X_hat, L += 1

    Args:
        acc: accumulator
        W: residual of the image
        X_hat: denoised image
        index: position of the image in the estimation set (default: next in order)

    Returns:
        The same accumulator, updated
    """
    W = as_image_matrix(W, 'W')
    X_hat = as_image_matrix(X_hat, 'X_hat')
    if W.shape != acc.shape or X_hat.shape != acc.shape:
        raise DimensionError(f"image is {W.shape}/{X_hat.shape}, accumulator is {acc.shape}")
    if index is None:
        index = acc.L
    if index in acc.pending or index < acc.next_index:
        raise UsageError(f"image index {index} accumulated twice")

    acc.pending[index] = (W * X_hat, X_hat * X_hat)
    acc.L += 1
    while acc.next_index in acc.pending:
        acc._fold(acc.next_index)
        acc.next_index += 1
    return acc


def count_low_r(R: np.ndarray, epsilon_r: float = Config.EPSILON_R) -> int:
    """Pixels at or below the guard (a stored, floored R equals epsilon_r there)"""
    return int(np.count_nonzero(R <= epsilon_r))


def finalize(acc: EstimationAccumulator, epsilon_r: float = Config.EPSILON_R,
             denoiser_id: str = '', creation_seed: Optional[int] = None) -> FingerprintBundle:
    """
    K_hat = numerator / max(R, epsilon_r), pointwise

    Pixels with R < epsilon_r are reported; the stored R is floored at epsilon_r.
    """
    if acc.L < 1:
        raise UsageError("cannot finalize an empty accumulator")
    if not epsilon_r > 0:
        raise UsageError(f"epsilon_r must be positive (got {epsilon_r})")
    acc.flush()
    if not acc.R.any():
        raise DataError(f"normalizer R is zero everywhere ({acc.L} all-zero images)")

    low = count_low_r(acc.R, epsilon_r)
    if low:
        log_warn(f"{low} pixel(s) have R < {epsilon_r:g}; their estimate is noise-boosted")
    R = np.maximum(acc.R, epsilon_r)
    return FingerprintBundle(fingerprint=acc.numerator / R, L=acc.L, normalizer=R,
                             denoiser_id=denoiser_id, creation_seed=creation_seed)


def estimate_from_products(products: Sequence[ResidualProduct],
                           epsilon_r: float = Config.EPSILON_R,
                           denoiser_id: str = '',
                           creation_seed: Optional[int] = None) -> FingerprintBundle:
    """MLE estimate over a list of per-image products, reduced in list order"""
    if not products:
        raise UsageError("at least one image is needed to estimate a fingerprint")
    acc = new_accumulator(products[0].W.shape)
    for p in products:
        accumulate(acc, p.W, p.X_hat)
    return finalize(acc, epsilon_r, denoiser_id, creation_seed)


# ==================== POST-PROCESSING ====================

def zero_mean(K: np.ndarray) -> np.ndarray:
    """Subtract row means, then column means"""
    K = as_image_matrix(K, 'fingerprint')
    out = K - K.mean(axis=1, keepdims=True)
    return out - out.mean(axis=0, keepdims=True)


def dft_wiener(K: np.ndarray, window: int = Config.DFT_WINDOW) -> np.ndarray:
    """
    Wiener filtering of the full 2-D DFT, attenuating periodic components

    The noise floor is median(|F|^2) / ln 2 over the non-DC bins, the mean of an
    exponential power spectrum. Each bin keeps the gain floor / max(S, floor),
    S being |F|^2 averaged over a window x window neighbourhood (periodic wrap):
    broadband bins stay close to 1, isolated spectral peaks are suppressed.

    Args:
        K: fingerprint estimate
        window: odd neighbourhood size on the spectrum plane

    Returns:
        Filtered fingerprint
    """
    K = as_image_matrix(K, 'fingerprint')
    check_window(window)
    if K.size < 2:
        return K.copy()

    F = np.fft.fft2(K)
    power = (F * np.conj(F)).real
    non_dc = np.delete(power.ravel(), 0)
    noise_floor = np.median(non_dc) / np.log(2)

    smoothed = uniform_filter(power, size=window, mode='wrap')
    denom = np.maximum(smoothed, noise_floor)
    gain = np.zeros_like(power)
    np.divide(noise_floor, denom, out=gain, where=denom > 0)

    return np.ascontiguousarray(np.real(np.fft.ifft2(F * gain)))


def whiten(K: np.ndarray, window: int = Config.LOCAL_WINDOW) -> np.ndarray:
    """
    Divide K_hat by its local standard deviation (symmetric boundary).
    Neighbourhoods with no variance map to 0.
    """
    K = as_image_matrix(K, 'fingerprint')
    std = np.sqrt(local_variance(K, window))
    out = K / np.maximum(std, Config.WHITEN_FLOOR)
    out[std == 0] = 0.0
    return out


def postprocess(K: np.ndarray, zero_meaned: bool = True, wiener: bool = True,
                whitened: bool = False, window: int = Config.DFT_WINDOW,
                whiten_window: int = Config.LOCAL_WINDOW) -> Tuple[np.ndarray, PostProcess]:
    """
    Apply the post-processing chain in its fixed order: zero_mean, dft_wiener, whiten

    Returns:
        (processed K_hat, flags describing the applied steps)
    """
    flags = PostProcess.NONE
    if zero_meaned:
        K = zero_mean(K)
        flags |= PostProcess.ZERO_MEANED
    if wiener:
        K = dft_wiener(K, window)
        if zero_meaned:
            # Wiener gains are real and symmetric, so only round-off touches the means
            K = zero_mean(K)
        flags |= PostProcess.DFT_WIENER
    if whitened:
        K = whiten(K, whiten_window)
        flags &= ~PostProcess.ZERO_MEANED
        flags |= PostProcess.WHITENED
    return K, flags


def apply_postprocess(bundle: FingerprintBundle, **options) -> FingerprintBundle:
    """New bundle with post-processing applied on top of the existing flags"""
    K, flags = postprocess(bundle.fingerprint, **options)
    flags |= bundle.flags
    if PostProcess.WHITENED in flags:
        flags &= ~PostProcess.ZERO_MEANED
    return FingerprintBundle(fingerprint=K, L=bundle.L, normalizer=bundle.normalizer,
                             flags=flags, denoiser_id=bundle.denoiser_id,
                             creation_seed=bundle.creation_seed)


# ==================== PIPELINE ====================

def residual_products(images: Sequence[np.ndarray], spec: DenoiserSpec,
                      truths: Optional[Sequence[np.ndarray]] = None,
                      threads: int = 1, desc: str = 'Denoising') -> List[ResidualProduct]:
    """
    Denoise every image (in parallel) and return (W, X_hat) in input order

    Args:
        images: captures Y
        spec: denoiser choice
        truths: true scenes, needed by the oracle denoiser
        threads: worker count
        desc: progress bar label
    """
    if truths is not None and len(truths) != len(images):
        raise UsageError(f"{len(truths)} truths given for {len(images)} images")

    def work(i: int) -> ResidualProduct:
        Y = images[i]
        X_hat = denoise(Y, spec, None if truths is None else truths[i])
        return ResidualProduct(W=residual(Y, X_hat), X_hat=X_hat)

    return parallel_map(work, range(len(images)), threads, desc=desc, unit="img")


def extract_fingerprint(images: Sequence[np.ndarray], spec: DenoiserSpec,
                        truths: Optional[Sequence[np.ndarray]] = None, threads: int = 1,
                        epsilon_r: float = Config.EPSILON_R, zero_meaned: bool = True,
                        wiener: bool = True, whitened: bool = False,
                        creation_seed: Optional[int] = None) -> FingerprintBundle:
    """
    Full estimation pipeline: denoise, accumulate in index order, finalize, post-process

    Returns:
        FingerprintBundle (R always present; callers drop it when not wanted)
    """
    if not images:
        raise UsageError("at least one estimation image is required")
    shape = as_image_matrix(images[0]).shape
    for i, Y in enumerate(images):
        if Y.shape != shape:
            raise DimensionError(f"image {i} is {Y.shape}, expected {shape}")

    products = residual_products(images, spec, truths, threads)
    bundle = estimate_from_products(products, epsilon_r, spec.identifier, creation_seed)
    log_debug(f"Estimated fingerprint from L={bundle.L} images")
    if zero_meaned or wiener or whitened:
        bundle = apply_postprocess(bundle, zero_meaned=zero_meaned, wiener=wiener,
                                   whitened=whitened)
    return bundle


def ground_truth_metrics(K_hat: np.ndarray, K: np.ndarray) -> Dict[str, float]:
    """Pearson correlation and RMSE of an estimate against the true PRNU"""
    require_same_shape(('K_hat', K_hat), ('K', K))
    rmse = float(np.sqrt(np.mean((K_hat - K) ** 2)))
    a = K_hat - K_hat.mean()
    b = K - K.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    corr = float((a * b).sum() / denom) if denom > 0 else 0.0
    return {'corr': corr, 'rmse': rmse}
