"""
PRNU Leakage Toolkit - Sensor Simulator
Synthetic sensors and captures following Y = (1 + K) o X + N, with known ground truth

Random stream layout
--------------------
Every generator is Philox (counter-based) seeded with
SeedSequence(seed, spawn_key=(stream, *index)). Streams:

    STREAM_PRNU     (0,)            K of a sensor
    STREAM_NOISE    (1, i)          additive noise N of capture i
    STREAM_TEXTURE  (2,)            scene content of textured_field
    STREAM_SPLIT    (3, s)          random split s of the P estimator
    STREAM_TRIAL    (4, t)          membership trial t
    STREAM_BOOT     (5,)            bootstrap resampling
    STREAM_PRESET   (6, i)          per-image seeds inside a dataset preset
    STREAM_SUBSET   (7, L, r)       estimation subset of leakage run r at size L

Substreams are independent, so images and trials can be generated in any
order (or in parallel) with bit-identical results.
"""

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from config import Config, DimensionError, UsageError
from dataset_io import as_image_matrix, require_same_shape

STREAM_PRNU = 0
STREAM_NOISE = 1
STREAM_TEXTURE = 2
STREAM_SPLIT = 3
STREAM_TRIAL = 4
STREAM_BOOT = 5
STREAM_PRESET = 6
STREAM_SUBSET = 7

# textured scenes are stretched to this range so no pixel carries zero signal
TEXTURE_RANGE = (16.0, 240.0)


def rng_for(seed: int, stream: int, *index: int) -> np.random.Generator:
    """Independent Philox generator for (seed, stream, index...)"""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream),) + tuple(int(i) for i in index))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, stream: int, *index: int) -> int:
    """A 63-bit child seed, stable across platforms"""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream),) + tuple(int(i) for i in index))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


# ==================== DOMAIN TYPES ====================

@dataclass(eq=False)
class SensorGroundTruth:
    """True PRNU of a simulated sensor"""
    K: np.ndarray
    sigma_k: float
    seed: int

    @property
    def shape(self):
        return self.K.shape


@dataclass(frozen=True)
class CaptureConfig:
    """Parameters of the additive noise N of one capture"""
    sigma_n: float = Config.SIGMA_N
    clip_to_8bit: bool = False
    seed: int = 0
    index: int = 0

    def __post_init__(self):
        if not self.sigma_n >= 0:
            raise UsageError(f"sigma_n must be >= 0 (got {self.sigma_n})")


# ==================== GENERATORS ====================

def gen_prnu(M: int, N: int, sigma_k: float = Config.SIGMA_K, seed: int = 0) -> SensorGroundTruth:
    """
    Draw K i.i.d. Gaussian(0, sigma_k^2)

    Args:
        M, N: sensor size
        sigma_k: PRNU standard deviation (unitless)
        seed: master seed

    Returns:
        SensorGroundTruth
    """
    if M < 1 or N < 1:
        raise UsageError(f"sensor size must be positive (got {M}x{N})")
    if not sigma_k >= 0:
        raise UsageError(f"sigma_k must be >= 0 (got {sigma_k})")
    if sigma_k == 0:
        K = np.zeros((M, N), dtype=np.float64)
    else:
        K = rng_for(seed, STREAM_PRNU).standard_normal((M, N)) * sigma_k
    return SensorGroundTruth(K=K, sigma_k=float(sigma_k), seed=int(seed))


def capture(X: np.ndarray, sensor: SensorGroundTruth, cfg: CaptureConfig) -> np.ndarray:
    """
    Simulate the sensor output Y = (1 + K) o X + N

    Args:
        X: noise-free scene
        sensor: ground truth with K of the same size
        cfg: noise level, clipping, noise seed and capture index

    Returns:
        Y as an ImageMatrix
    """
    X = as_image_matrix(X, 'scene X')
    require_same_shape(('sensor K', sensor.K), ('scene X', X))
    Y = X + sensor.K * X
    if cfg.sigma_n > 0:
        Y = Y + rng_for(cfg.seed, STREAM_NOISE, cfg.index).standard_normal(X.shape) * cfg.sigma_n
    if cfg.clip_to_8bit:
        Y = np.clip(np.rint(Y), 0.0, 255.0)
    return Y


def flat_field(M: int, N: int, level: float) -> np.ndarray:
    """Constant scene, e.g. white (240) or black (16) cardboard"""
    if not 0 <= level <= 255:
        raise UsageError(f"flat-field level must be in [0, 255] (got {level})")
    if M < 1 or N < 1:
        raise UsageError(f"image size must be positive (got {M}x{N})")
    return np.full((M, N), float(level), dtype=np.float64)


def textured_field(M: int, N: int, seed: int, smoothness: float = Config.TEXTURE_SMOOTHNESS) -> np.ndarray:
    """
    Pseudo-natural scene: uniform noise in [0, 255] blurred by a Gaussian of std smoothness.
    Blurred fields are stretched to TEXTURE_RANGE.
    """
    if smoothness < 0:
        raise UsageError(f"smoothness must be >= 0 (got {smoothness})")
    if M < 1 or N < 1:
        raise UsageError(f"image size must be positive (got {M}x{N})")
    field = rng_for(seed, STREAM_TEXTURE).uniform(0.0, 255.0, size=(M, N))
    if smoothness == 0:
        return field
    field = gaussian_filter(field, sigma=smoothness, mode='reflect')
    lo, hi = field.min(), field.max()
    if hi - lo <= 0:
        return np.full((M, N), 0.5 * sum(TEXTURE_RANGE))
    a, b = TEXTURE_RANGE
    return a + (field - lo) * ((b - a) / (hi - lo))


# ==================== DATASET PRESETS ====================

PRESETS = ('brt50', 'drk50', 'brt49+tex', 'drk49+tex', 'pool')


def preset_scenes(name: str, M: int, N: int, seed: int, count: int = 250) -> List[Tuple[str, np.ndarray]]:
    """
    Scenes of a named experiment grid

    brt50 / drk50          50 bright (240) / dark (16) flat-fields
    brt49+tex / drk49+tex  49 flat-fields plus one textured scene
    pool                   `count` independent textured scenes
    """
    if name not in PRESETS:
        raise UsageError(f"unknown preset '{name}' (choose from {', '.join(PRESETS)})")

    if name == 'pool':
        return [(f"tex{i:04d}", textured_field(M, N, derive_seed(seed, STREAM_PRESET, i)))
                for i in range(count)]

    level = Config.BRIGHT_LEVEL if name.startswith('brt') else Config.DARK_LEVEL
    tag = 'brt' if name.startswith('brt') else 'drk'
    n_flat = 50 if name.endswith('50') else 49
    scenes = [(f"{tag}{i:04d}", flat_field(M, N, level)) for i in range(n_flat)]
    if name.endswith('+tex'):
        scenes.append(("tex0000", textured_field(M, N, derive_seed(seed, STREAM_PRESET, 0))))
    return scenes


def capture_series(scenes: List[np.ndarray], sensor: SensorGroundTruth, sigma_n: float,
                   seed: int, clip_to_8bit: bool = False) -> List[np.ndarray]:
    """Capture every scene with its own noise substream (index = position)"""
    out = []
    for i, X in enumerate(scenes):
        if X.shape != sensor.shape:
            raise DimensionError(f"scene {i} is {X.shape}, sensor is {sensor.shape}")
        out.append(capture(X, sensor, CaptureConfig(sigma_n=sigma_n, clip_to_8bit=clip_to_8bit,
                                                    seed=seed, index=i)))
    return out
