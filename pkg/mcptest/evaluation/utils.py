import sys
from typing import Sequence

import numpy as np
from colorama import Fore


class McpError(Exception):
    pass


class ValidationError(McpError, ValueError):
    pass


class TrecParseError(McpError, ValueError):
    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class ConvergenceError(McpError, RuntimeError):
    def __init__(self, message, last_iterate):
        super().__init__(message)
        self.last_iterate = last_iterate


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent Philox stream named by (seed, *key).

    The same (seed, key) always gives the same stream, whatever order or
    process the caller runs in.
    """
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(seq))


def format_float(value: float) -> str:
    # shortest decimal that round-trips
    return repr(float(value))


def pair_index(m: int):
    """All unordered (i, j) column pairs with i < j, in row-major order."""
    return [(i, j) for i in range(m) for j in range(i + 1, m)]


def check_level(level: float, name: str = "level"):
    if not 0.0 < level < 1.0:
        raise ValidationError(f"{name} must lie in (0, 1), got {level}")


def as_score_array(values: Sequence[float], name: str = "scores") -> np.ndarray:
    array = np.asarray(values, dtype=np.float64)
    if array.ndim != 1:
        raise ValidationError(f"{name} must be one-dimensional")
    if not np.all(np.isfinite(array)):
        raise ValidationError(f"{name} contains non-finite values")
    return array


def info(msg: str, quiet: bool = False):
    if not quiet:
        print(f"{Fore.GREEN}{msg}{Fore.RESET}", file=sys.stderr)


def warn(msg: str, quiet: bool = False):
    if not quiet:
        print(f"{Fore.YELLOW}Warning: {msg}{Fore.RESET}", file=sys.stderr)


def error(msg: str):
    print(f"{Fore.RED}[ERROR] {msg}{Fore.RESET}", file=sys.stderr)
