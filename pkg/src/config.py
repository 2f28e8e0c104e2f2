"""
PRNU Leakage Toolkit - Configuration Manager
Handles configuration settings, environment variables, errors, logging and run echoing
"""

import os
import sys
import json
from pathlib import Path
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, Iterable, List, Optional

from dotenv import load_dotenv
from colorama import Fore, Style, init as colorama_init
from tqdm import tqdm

# Load environment variables from .env file
load_dotenv()


def _env_bool(name: str, default: bool) -> bool:
    value = os.getenv(name)
    if value is None:
        return default
    return value.strip().lower() in ('1', 'true', 'yes', 'on')


class Config:
    """
    Central configuration class for the PRNU Leakage Toolkit
    """

    # ==================== TOOLKIT SETTINGS ====================
    TOOLKIT_NAME = 'prnuleak'
    VERSION = '1.0.0'

    # ==================== RUNTIME ====================
    THREADS = int(os.getenv('PRNU_THREADS', 1))
    DEFAULT_SEED = int(os.getenv('PRNU_SEED', 0))

    # ==================== SENSOR SIMULATION ====================
    # Toolkit choices: no camera magnitudes are published for sigma_k / sigma_n
    SIGMA_K = 0.02
    SIGMA_N = 2.0
    DARK_LEVEL = 16
    BRIGHT_LEVEL = 240
    TEXTURE_SMOOTHNESS = 8.0

    # ==================== DENOISER ====================
    WAVELET = 'db8'
    WAVELET_LEVELS = 4
    WAVELET_SIGMA0 = 5.0
    WIENER_WINDOWS = (3, 5, 7, 9)
    BLUR_SIGMA = 1.0

    # ==================== ESTIMATION ====================
    EPSILON_R = 1e-6
    LOCAL_WINDOW = 5
    DFT_WINDOW = 5
    WHITEN_FLOOR = 1e-12

    # ==================== LEAKAGE ====================
    GAMMA_FLOOR = 1e-30
    P_FLOOR_FACTOR = 1e-12
    SPLITS = 10
    SOLVER_REL_TOL = 1e-10
    SOLVER_MAX_ITER = 2000

    # ==================== MEMBERSHIP / EVALUATION ====================
    VARIANCE_FLOOR_FACTOR = 1e-12
    BOOTSTRAP_RESAMPLES = 200
    MIN_AUC_TRIALS = 30

    # ==================== LOGGING ====================
    LOG_LEVEL = os.getenv('PRNU_LOG_LEVEL', 'INFO').upper()  # DEBUG, INFO, WARNING, ERROR
    ENABLE_CONSOLE_LOGS = _env_bool('PRNU_CONSOLE_LOGS', True)
    ENABLE_COLOR = _env_bool('PRNU_COLOR', True)

    # ==================== VALIDATION ====================
    @classmethod
    def validate(cls):
        """
        Validate configuration and check for impossible settings
        Returns: tuple (is_valid: bool, error_message: str)
        """
        errors = []

        if cls.THREADS < 1:
            errors.append(f"PRNU_THREADS must be >= 1 (got {cls.THREADS})")
        if cls.WAVELET_SIGMA0 <= 0:
            errors.append("Wavelet sigma0 must be positive")
        for window in (cls.LOCAL_WINDOW, cls.DFT_WINDOW) + tuple(cls.WIENER_WINDOWS):
            if window < 3 or window % 2 == 0:
                errors.append(f"Window sizes must be odd and >= 3 (got {window})")
        if cls.LOG_LEVEL not in _LEVELS:
            errors.append(f"Unknown PRNU_LOG_LEVEL '{cls.LOG_LEVEL}'")

        if errors:
            return False, "\n".join(errors)

        return True, "Configuration valid"

    @classmethod
    def get_info(cls) -> Dict[str, Any]:
        """
        Get effective defaults for echoing into run outputs
        """
        return {
            'toolkit': cls.TOOLKIT_NAME,
            'version': cls.VERSION,
            'threads': cls.THREADS,
            'sigma_k': cls.SIGMA_K,
            'sigma_n': cls.SIGMA_N,
            'wavelet': cls.WAVELET,
            'wavelet_levels': cls.WAVELET_LEVELS,
            'wavelet_sigma0': cls.WAVELET_SIGMA0,
            'epsilon_r': cls.EPSILON_R,
            'local_window': cls.LOCAL_WINDOW,
            'gamma_floor': cls.GAMMA_FLOOR,
            'splits': cls.SPLITS,
        }


# ==================== ERRORS ====================

class PrnuError(Exception):
    """Base class for every toolkit failure"""
    exit_code = 2


class UsageError(PrnuError):
    """Invalid arguments or option combinations"""
    exit_code = 1


class DataError(PrnuError):
    """Input data is missing, malformed or inconsistent"""
    exit_code = 2


class ImageFormatError(DataError):
    pass


class BundleFormatError(DataError):
    pass


class ManifestError(DataError):
    pass


class DimensionError(DataError):
    pass


class NumericalError(PrnuError):
    """A numerical procedure could not reach its guarantee"""
    exit_code = 3


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the CLI exit code"""
    if isinstance(error, PrnuError):
        return error.exit_code
    # I/O failures count as data errors
    return DataError.exit_code


def format_error_message(error: BaseException) -> str:
    """Format error message for console display"""
    if isinstance(error, UsageError):
        return f"⚠️ Usage error: {error}"
    elif isinstance(error, NumericalError):
        return f"🧮 Numerical failure: {error}"
    elif isinstance(error, DataError):
        return f"📂 Data error: {error}"
    elif isinstance(error, FileNotFoundError):
        return f"📂 File not found: {error.filename or error}"
    else:
        return f"❌ Error: {error}"


# ==================== LOGGING ====================

_LEVELS = {'DEBUG': 10, 'INFO': 20, 'WARNING': 30, 'ERROR': 40}

colorama_init()


def _emit(level: str, glyph: str, color: str, message: str):
    if not Config.ENABLE_CONSOLE_LOGS:
        return
    if _LEVELS[level] < _LEVELS.get(Config.LOG_LEVEL, 20):
        return
    text = f"{glyph} {message}"
    if Config.ENABLE_COLOR:
        text = f"{color}{text}{Style.RESET_ALL}"
    print(text, file=sys.stderr)


def log_debug(message: str):
    _emit('DEBUG', '·', Style.DIM, message)


def log_ok(message: str):
    _emit('INFO', '✓', Fore.GREEN, message)


def log_warn(message: str):
    _emit('WARNING', '⚠️', Fore.YELLOW, message)


def progress_disabled() -> bool:
    """tqdm bars follow the console log switch"""
    return not Config.ENABLE_CONSOLE_LOGS or _LEVELS.get(Config.LOG_LEVEL, 20) > 20


# ==================== RUN CONFIG ====================

class RunConfig:
    """
    Effective parameters of one command run, echoed next to its outputs
    """

    FILE_NAME = 'run_config.json'

    def __init__(self, command: str, params: Optional[Dict[str, Any]] = None):
        self.command = command
        self.params = dict(params or {})

    def to_dict(self) -> Dict[str, Any]:
        return {
            'command': self.command,
            'params': {k: _jsonable(v) for k, v in self.params.items()},
            'defaults': Config.get_info(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def echo(self, out_dir) -> Path:
        """
        Write run_config.json into the output directory

        Args:
            out_dir: directory receiving the command outputs

        Returns:
            Path of the written file
        """
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / self.FILE_NAME
        write_text_atomic(path, self.to_json())
        return path


def _jsonable(value: Any) -> Any:
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (tuple, list)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if hasattr(value, 'item'):
        return value.item()
    return value


# ==================== UTILITY FUNCTIONS ====================

def write_bytes_atomic(path, payload: bytes):
    """Write to a temporary sibling and rename, so no partial file is left behind"""
    path = Path(path)
    tmp = path.with_name(path.name + '.partial')
    try:
        with open(tmp, 'wb') as f:
            f.write(payload)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def write_text_atomic(path, text: str):
    write_bytes_atomic(path, text.encode('utf-8'))


def parallel_map(fn: Callable, items: Iterable, threads: int = 1,
                 desc: Optional[str] = None, unit: str = 'it') -> List[Any]:
    """
    Apply fn to every item, results returned in input order

    Args:
        fn: per-item function (must not share mutable state)
        items: work items
        threads: worker count; 1 runs inline
        desc: tqdm label; no bar when None

    Returns:
        List of results, index-aligned with items
    """
    items = list(items)
    bar = tqdm(total=len(items), desc=desc, unit=unit,
               disable=desc is None or progress_disabled())
    try:
        if threads is None or threads <= 1 or len(items) <= 1:
            results = []
            for item in items:
                results.append(fn(item))
                bar.update()
            return results
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = []
            for result in pool.map(fn, items):
                results.append(result)
                bar.update()
            return results
    finally:
        bar.close()


if __name__ == '__main__':
    # Test configuration
    print("="*50)
    print("PRNU Leakage Toolkit Configuration Test")
    print("="*50)

    is_valid, message = Config.validate()
    print(f"\nValidation: {'✓ PASS' if is_valid else '✗ FAIL'}")
    print(f"Message: {message}\n")

    print("Configuration Info:")
    for key, value in Config.get_info().items():
        print(f"  {key}: {value}")
    print("\n" + "="*50)
