"""
PRNU Leakage Toolkit - Denoising
Wavelet-domain locally adaptive Wiener denoiser, Gaussian blur and oracle
denoisers, plus the local window statistics shared by the estimators
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pywt
from scipy.ndimage import gaussian_filter, uniform_filter

from config import Config, DimensionError, UsageError
from dataset_io import as_image_matrix, require_same_shape

KINDS = ('wavelet_mihcak', 'gaussian_blur', 'oracle')

# half-sample symmetric extension (d c b a | a b c d) in scipy.ndimage terms
SYMMETRIC = 'reflect'


# ==================== LOCAL STATISTICS ====================

def check_window(window: int, name: str = 'window'):
    if int(window) != window or window < 3 or window % 2 == 0:
        raise UsageError(f"{name} must be an odd integer >= 3 (got {window})")


def local_mean(x: np.ndarray, window: int) -> np.ndarray:
    return uniform_filter(x, size=window, mode=SYMMETRIC)


def local_variance(x: np.ndarray, window: int) -> np.ndarray:
    """
    Population variance over a window x window neighbourhood, symmetric boundary.
    Values at the level of cancellation error (numerically constant
    neighbourhoods) are returned as exact zeros.
    """
    check_window(window)
    mean = local_mean(x, window)
    mean_sq = local_mean(x * x, window)
    var = mean_sq - mean * mean
    var[var <= 1e-12 * mean_sq] = 0.0
    return var


# ==================== DENOISER SPEC ====================

@dataclass(frozen=True)
class DenoiserSpec:
    """
    Choice and parameters of the denoising filter
    """
    kind: str = 'wavelet_mihcak'
    sigma0: float = Config.WAVELET_SIGMA0
    levels: int = Config.WAVELET_LEVELS
    blur_sigma: float = Config.BLUR_SIGMA
    windows: Tuple[int, ...] = Config.WIENER_WINDOWS
    wavelet: str = Config.WAVELET

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UsageError(f"unknown denoiser kind '{self.kind}' (choose from {', '.join(KINDS)})")
        if self.kind == 'wavelet_mihcak':
            if not self.sigma0 > 0:
                raise UsageError(f"sigma0 must be positive (got {self.sigma0})")
            if int(self.levels) != self.levels or self.levels < 1:
                raise UsageError(f"levels must be a positive integer (got {self.levels})")
            for w in self.windows:
                check_window(w, 'Wiener window')
        if self.kind == 'gaussian_blur' and not self.blur_sigma > 0:
            raise UsageError(f"blur_sigma must be positive (got {self.blur_sigma})")

    def validate_for(self, shape: Tuple[int, int]):
        """levels <= log2(min(M, N))"""
        if self.kind == 'wavelet_mihcak' and min(shape) < 2 ** self.levels:
            raise DimensionError(
                f"{shape[0]}x{shape[1]} image is too small for {self.levels} wavelet levels")

    @property
    def identifier(self) -> str:
        if self.kind == 'wavelet_mihcak':
            return f"mihcak-{self.wavelet}-l{self.levels}-s{self.sigma0:.1f}"
        if self.kind == 'gaussian_blur':
            return f"gauss-b{self.blur_sigma:.2f}"
        return 'oracle'


# ==================== WAVELET TRANSFORM ====================

@dataclass
class WaveletPyramid:
    """pywt.wavedec2 coefficient list plus the size it reconstructs to"""
    coeffs: list
    shape: Tuple[int, int]
    wavelet: str

    @property
    def approximation(self) -> np.ndarray:
        return self.coeffs[0]

    @property
    def details(self) -> List[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
        return self.coeffs[1:]


def dwt2(X: np.ndarray, levels: int, wavelet: str = Config.WAVELET) -> WaveletPyramid:
    """
    Orthonormal 2-D DWT (periodized, so Parseval holds for dyadic sizes)

    Args:
        X: image, each dimension >= 2**levels
        levels: decomposition depth
        wavelet: pywt wavelet name

    Returns:
        WaveletPyramid
    """
    X = as_image_matrix(X)
    if min(X.shape) < 2 ** levels:
        raise DimensionError(f"{X.shape[0]}x{X.shape[1]} image is too small for {levels} levels")
    coeffs = pywt.wavedec2(X, wavelet, mode='periodization', level=levels)
    return WaveletPyramid(coeffs=coeffs, shape=X.shape, wavelet=wavelet)


def idwt2(pyramid: WaveletPyramid) -> np.ndarray:
    out = pywt.waverec2(pyramid.coeffs, pyramid.wavelet, mode='periodization')
    M, N = pyramid.shape
    return np.ascontiguousarray(out[:M, :N])


def mihcak_shrink(c: np.ndarray, sigma0: float, windows: Sequence[int]) -> np.ndarray:
    """
    Locally adaptive Wiener shrinkage of one detail subband.
    Signal variance is the minimum over windows of the local energy minus sigma0^2,
    floored at 0; the gain var / (var + sigma0^2) never exceeds 1.
    """
    noise_var = sigma0 ** 2
    energy = c * c
    avg = np.stack([uniform_filter(energy, size=w, mode=SYMMETRIC) for w in windows])
    signal_var = np.maximum(avg.min(axis=0) - noise_var, 0.0)
    return c * (signal_var / (signal_var + noise_var))


def _symmetric_pad(Y: np.ndarray, levels: int, wavelet: str):
    block = 2 ** levels
    margin = pywt.Wavelet(wavelet).dec_len
    pads = []
    for dim in Y.shape:
        total = -(-(dim + 2 * margin) // block) * block
        pads.append((margin, total - dim - margin))
    return np.pad(Y, pads, mode='symmetric'), pads


def wavelet_denoise(Y: np.ndarray, sigma0: float, levels: int, windows: Sequence[int],
                    wavelet: str = Config.WAVELET) -> np.ndarray:
    """Shrink every detail subband, keep the approximation band, reconstruct"""
    padded, pads = _symmetric_pad(Y, levels, wavelet)
    pyramid = dwt2(padded, levels, wavelet)
    pyramid.coeffs[1:] = [tuple(mihcak_shrink(band, sigma0, windows) for band in level)
                          for level in pyramid.details]
    out = idwt2(pyramid)
    (top, _), (left, _) = pads
    return np.ascontiguousarray(out[top:top + Y.shape[0], left:left + Y.shape[1]])


# ==================== PUBLIC API ====================

def denoise(Y: np.ndarray, spec: DenoiserSpec, truth: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Estimate the noise-free image X_hat

    Args:
        Y: sensor output
        spec: denoiser choice
        truth: the true scene, required by the oracle denoiser

    Returns:
        X_hat with the shape of Y
    """
    Y = as_image_matrix(Y, 'Y')
    if spec.kind == 'oracle':
        if truth is None:
            raise UsageError("the oracle denoiser needs the true scene")
        truth = as_image_matrix(truth, 'truth')
        require_same_shape(('Y', Y), ('truth', truth))
        return truth.copy()
    if spec.kind == 'gaussian_blur':
        return gaussian_filter(Y, sigma=spec.blur_sigma, mode=SYMMETRIC)
    spec.validate_for(Y.shape)
    return wavelet_denoise(Y, spec.sigma0, spec.levels, spec.windows, spec.wavelet)


def residual(Y: np.ndarray, X_hat: np.ndarray) -> np.ndarray:
    """W = Y - X_hat"""
    Y = as_image_matrix(Y, 'Y')
    X_hat = as_image_matrix(X_hat, 'X_hat')
    require_same_shape(('Y', Y), ('X_hat', X_hat))
    return Y - X_hat
