"""
PRNU Leakage Toolkit - Dataset I/O
Decodes images to luminance matrices, reads/writes dataset manifests and
persists fingerprint bundles bit-exactly
"""

import json
import struct
from dataclasses import dataclass, field
from enum import IntFlag
from pathlib import Path
from typing import List, Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from config import (
    BundleFormatError, DataError, DimensionError, ImageFormatError, ManifestError,
    write_bytes_atomic, write_text_atomic, log_debug,
)

# ITU-R 601 luma weights
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float64)

ROLES = ('estimation', 'query', 'holdout')

BUNDLE_MAGIC = b'PRNU'
BUNDLE_VERSION = 1
_HEADER = struct.Struct('<4sBIIIBBBBH')
_SEED = struct.Struct('<Q')
_MAX_DIM = 1 << 16


# ==================== IMAGE MATRICES ====================

def as_image_matrix(data, name: str = 'image') -> np.ndarray:
    """
    Validate and normalise an ImageMatrix: 2-D, non-empty, finite, float64, C-contiguous

    Args:
        data: array-like of pixel values
        name: label used in error messages

    Returns:
        float64 ndarray of shape (M, N)
    """
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be a 2-D matrix, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"{name} is empty ({arr.shape[0]}x{arr.shape[1]})")
    if not np.isfinite(arr).all():
        raise DataError(f"{name} contains NaN or Inf values")
    return arr


def require_same_shape(*named_arrays):
    """Raise DimensionError unless all (name, array) pairs share one shape"""
    first_name, first = named_arrays[0]
    for name, arr in named_arrays[1:]:
        if arr.shape != first.shape:
            raise DimensionError(
                f"{name} is {arr.shape[0]}x{arr.shape[1]} but {first_name} is "
                f"{first.shape[0]}x{first.shape[1]}")


def load_image(path) -> np.ndarray:
    """
    Decode an 8-bit grayscale or RGB raster to a luminance ImageMatrix

    Args:
        path: PGM/PNG (or any 8-bit format Pillow reads)

    Returns:
        float64 matrix with values in [0, 255]
    """
    path = Path(path)
    if not path.is_file():
        raise ImageFormatError(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if im.width == 0 or im.height == 0:
                raise ImageFormatError(f"zero-sized image: {path}")
            if mode == 'P':
                im = im.convert('RGBA' if 'transparency' in im.info else 'RGB')
                mode = im.mode
            if mode not in ('L', 'LA', 'RGB', 'RGBA'):
                raise ImageFormatError(f"unsupported bit depth / mode '{mode}' in {path}")
            pixels = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise ImageFormatError(f"unreadable image {path}: {e}") from e

    if pixels.ndim == 2:
        lum = pixels.astype(np.float64)
    elif mode == 'LA':
        lum = pixels[:, :, 0].astype(np.float64)
    else:
        lum = pixels[:, :, :3].astype(np.float64) @ LUMA_WEIGHTS
    return as_image_matrix(lum, str(path))


def save_image(X: np.ndarray, path):
    """
    Write an ImageMatrix as an 8-bit grayscale file (format from the suffix)

    Values are rounded and clamped to [0, 255]; integer-valued inputs in range
    round-trip exactly through load_image.
    """
    X = as_image_matrix(X)
    pixels = np.clip(np.rint(X), 0, 255).astype(np.uint8)
    path = Path(path)
    fmt = 'PPM' if path.suffix.lower() in ('.pgm', '.pnm') else None
    Image.fromarray(pixels).save(path, format=fmt)


def save_preview(X: np.ndarray, path, percentile: float = 99.5):
    """
    Render a fingerprint-like map to an 8-bit PNG for visual inspection.
    Symmetric stretch: +/- the given percentile of |X| maps to 0..255.
    """
    X = as_image_matrix(X)
    scale = float(np.percentile(np.abs(X), percentile))
    if scale <= 0:
        scale = 1.0
    pixels = np.clip(127.5 + 127.5 * X / scale, 0, 255)
    Image.fromarray(np.rint(pixels).astype(np.uint8)).save(Path(path), format='PNG')


# ==================== FINGERPRINT BUNDLE ====================

class PostProcess(IntFlag):
    NONE = 0
    ZERO_MEANED = 1
    DFT_WIENER = 2
    WHITENED = 4


@dataclass(eq=False)
class FingerprintBundle:
    """
    Persisted fingerprint estimate: K_hat, the optional normalizer R and provenance
    """
    fingerprint: np.ndarray
    L: int
    normalizer: Optional[np.ndarray] = None
    flags: PostProcess = PostProcess.NONE
    denoiser_id: str = ''
    creation_seed: Optional[int] = None

    def __post_init__(self):
        self.fingerprint = as_image_matrix(self.fingerprint, 'fingerprint')
        self.flags = PostProcess(int(self.flags))
        if not 0 <= int(self.L) < (1 << 32):
            raise DataError(f"L out of range: {self.L}")
        self.L = int(self.L)
        if self.normalizer is not None:
            self.normalizer = as_image_matrix(self.normalizer, 'normalizer R')
            require_same_shape(('fingerprint', self.fingerprint), ('normalizer R', self.normalizer))
            if not (self.normalizer > 0).all():
                raise DataError("normalizer R must be strictly positive at every pixel")
        if self.creation_seed is not None and not 0 <= int(self.creation_seed) < (1 << 64):
            raise DataError(f"creation seed out of u64 range: {self.creation_seed}")
        if len(self.denoiser_id.encode('utf-8')) > 0xFFFF:
            raise DataError("denoiser_id too long")
        if PostProcess.ZERO_MEANED in self.flags:
            worst = max(np.abs(self.fingerprint.mean(axis=1)).max(),
                        np.abs(self.fingerprint.mean(axis=0)).max())
            if worst > 1e-9:
                raise DataError(f"zero_meaned flag set but a row/column mean is {worst:.3e}")

    @property
    def shape(self):
        return self.fingerprint.shape

    def has_flag(self, flag: PostProcess) -> bool:
        return flag in self.flags

    def bitwise_equal(self, other: 'FingerprintBundle') -> bool:
        """Field-for-field equality, pixels compared by their 64-bit patterns"""
        if (self.L, int(self.flags), self.denoiser_id, self.creation_seed) != \
                (other.L, int(other.flags), other.denoiser_id, other.creation_seed):
            return False
        if self.shape != other.shape or self.fingerprint.tobytes() != other.fingerprint.tobytes():
            return False
        if (self.normalizer is None) != (other.normalizer is None):
            return False
        return self.normalizer is None or self.normalizer.tobytes() == other.normalizer.tobytes()


def encode_bundle(bundle: FingerprintBundle) -> bytes:
    """Serialize a bundle to the little-endian PRNU v1 layout"""
    M, N = bundle.shape
    name = bundle.denoiser_id.encode('utf-8')
    has_r = bundle.normalizer is not None
    has_seed = bundle.creation_seed is not None
    parts = [_HEADER.pack(BUNDLE_MAGIC, BUNDLE_VERSION, M, N, bundle.L,
                          int(bundle.flags), int(has_r), int(has_seed), 0, len(name)),
             name]
    if has_seed:
        parts.append(_SEED.pack(int(bundle.creation_seed)))
    parts.append(bundle.fingerprint.astype('<f8', copy=False).tobytes())
    if has_r:
        parts.append(bundle.normalizer.astype('<f8', copy=False).tobytes())
    return b''.join(parts)


def decode_bundle(payload: bytes) -> FingerprintBundle:
    """Parse a PRNU v1 payload; raises BundleFormatError without building a partial object"""
    if len(payload) < _HEADER.size:
        raise BundleFormatError("truncated bundle header")
    magic, version, M, N, L, flags, has_r, has_seed, reserved, name_len = \
        _HEADER.unpack_from(payload, 0)
    if magic != BUNDLE_MAGIC:
        raise BundleFormatError(f"bad magic {magic!r}")
    if version != BUNDLE_VERSION:
        raise BundleFormatError(f"unsupported bundle version {version}")
    if has_r not in (0, 1) or has_seed not in (0, 1) or reserved != 0 or flags & ~0x07:
        raise BundleFormatError("corrupt bundle header fields")
    if M < 1 or N < 1 or M > _MAX_DIM or N > _MAX_DIM:
        raise BundleFormatError(f"dimension overflow: {M}x{N}")

    offset = _HEADER.size
    n_pixels = M * N
    expected = offset + name_len + (_SEED.size if has_seed else 0) + 8 * n_pixels * (1 + has_r)
    if len(payload) < expected:
        raise BundleFormatError(f"truncated payload ({len(payload)} of {expected} bytes)")
    if len(payload) > expected:
        raise BundleFormatError(f"{len(payload) - expected} trailing bytes after payload")

    try:
        denoiser_id = payload[offset:offset + name_len].decode('utf-8')
    except UnicodeDecodeError as e:
        raise BundleFormatError(f"denoiser_id is not UTF-8: {e}") from e
    offset += name_len

    seed = None
    if has_seed:
        (seed,) = _SEED.unpack_from(payload, offset)
        offset += _SEED.size

    K = np.frombuffer(payload, dtype='<f8', count=n_pixels, offset=offset).reshape(M, N)
    offset += 8 * n_pixels
    R = None
    if has_r:
        R = np.frombuffer(payload, dtype='<f8', count=n_pixels, offset=offset).reshape(M, N)

    try:
        return FingerprintBundle(
            fingerprint=K.astype(np.float64), L=L,
            normalizer=None if R is None else R.astype(np.float64),
            flags=PostProcess(flags), denoiser_id=denoiser_id, creation_seed=seed)
    except DataError as e:
        raise BundleFormatError(f"bundle violates invariants: {e}") from e


def save_bundle(bundle: FingerprintBundle, path):
    """Write a bundle; the target is replaced atomically"""
    write_bytes_atomic(path, encode_bundle(bundle))
    log_debug(f"Saved bundle {path} ({bundle.shape[0]}x{bundle.shape[1]}, L={bundle.L})")


def load_bundle(path) -> FingerprintBundle:
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as e:
        raise BundleFormatError(f"cannot read bundle {path}: {e}") from e
    return decode_bundle(payload)


# ==================== MANIFESTS ====================

@dataclass(frozen=True)
class ManifestEntry:
    path: str
    role: str
    label: Optional[str] = None


@dataclass
class DatasetManifest:
    """
    Ordered list of image entries; relative paths resolve against base_dir
    """
    entries: List[ManifestEntry]
    source_note: str = ''
    base_dir: Path = field(default_factory=Path)

    def __post_init__(self):
        if not self.entries:
            raise ManifestError("manifest has no entries")
        seen = set()
        for entry in self.entries:
            if entry.role not in ROLES:
                raise ManifestError(f"unknown role '{entry.role}' for {entry.path}")
            if entry.path in seen:
                raise ManifestError(f"duplicate path {entry.path}")
            seen.add(entry.path)

    def with_role(self, role: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.role == role]

    def require_role(self, role: str, count: int = 1) -> List[ManifestEntry]:
        found = self.with_role(role)
        if len(found) < count:
            raise ManifestError(f"manifest needs at least {count} '{role}' entries, has {len(found)}")
        return found

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.base_dir / p

    def to_dict(self) -> dict:
        out = []
        for e in self.entries:
            item = {'path': e.path, 'role': e.role}
            if e.label is not None:
                item['label'] = e.label
            out.append(item)
        return {'source_note': self.source_note, 'entries': out}


def load_manifest(path) -> DatasetManifest:
    """
    Read a JSON manifest; entries keep file order

    Args:
        path: manifest file

    Returns:
        DatasetManifest with base_dir set to the manifest's directory
    """
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            doc = json.load(f)
    except OSError as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest {path} is not valid JSON: {e}") from e

    if not isinstance(doc, dict) or not isinstance(doc.get('entries'), list):
        raise ManifestError(f"manifest {path} must be an object with an 'entries' list")

    entries = []
    for i, item in enumerate(doc['entries']):
        if not isinstance(item, dict) or not isinstance(item.get('path'), str):
            raise ManifestError(f"entry {i} lacks a string 'path'")
        label = item.get('label')
        if label is not None and not isinstance(label, str):
            raise ManifestError(f"entry {i} has a non-string label")
        entries.append(ManifestEntry(path=item['path'], role=str(item.get('role', '')), label=label))

    return DatasetManifest(entries=entries, source_note=str(doc.get('source_note', '')),
                           base_dir=path.parent)


def save_manifest(manifest: DatasetManifest, path):
    write_text_atomic(path, json.dumps(manifest.to_dict(), indent=2) + "\n")
