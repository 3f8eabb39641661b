"""Reference distributions for the parametric tests."""

import math
from functools import lru_cache
from typing import Optional, Tuple, Union

import numpy as np
from scipy import special, stats

from mcptest.evaluation.utils import ValidationError

# Gauss-Legendre panel layout for the studentized range integrals
GL_ORDER = 8
Z_LIMIT = 7.0
Z_PANELS = 28
S_PANELS = 32
S_TAIL = 1e-12


def t_cdf(t: float, df: float) -> float:
    """Student's t CDF through the regularized incomplete beta function."""
    if df <= 0:
        raise ValidationError(f"df must be positive, got {df}")
    tail = 0.5 * special.betainc(df / 2.0, 0.5, df / (df + t * t))
    return float(1.0 - tail) if t > 0 else float(tail)


def t_two_sided_p(t: float, df: float) -> float:
    """P(|T| >= |t|), computed from the tail directly to keep small p accurate."""
    if df <= 0:
        raise ValidationError(f"df must be positive, got {df}")
    return float(min(1.0, special.betainc(df / 2.0, 0.5, df / (df + t * t))))


def _panels(lo: float, hi: float, n_panels: int) -> Tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(GL_ORDER)
    edges = np.linspace(lo, hi, n_panels + 1)
    half = np.diff(edges) / 2.0
    mid = (edges[:-1] + edges[1:]) / 2.0
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


@lru_cache(maxsize=None)
def _z_grid():
    z, wz = _panels(-Z_LIMIT, Z_LIMIT, Z_PANELS)
    return z, wz * stats.norm.pdf(z), special.ndtr(z)


@lru_cache(maxsize=256)
def _s_grid(df: float):
    # density of s = chi_df / sqrt(df)
    root = math.sqrt(df)
    lo = stats.chi.ppf(S_TAIL, df) / root
    hi = stats.chi.isf(S_TAIL, df) / root
    s, ws = _panels(lo, hi, S_PANELS)
    return s, ws * root * stats.chi.pdf(s * root, df)


def _range_cdf_normal(q: np.ndarray, k: int) -> np.ndarray:
    # P(range of k standard normals <= q) = k * int phi(z) [Phi(z) - Phi(z - q)]^(k-1) dz
    z, weights, phi_z = _z_grid()
    inner = phi_z - special.ndtr(z - q[..., None])
    np.clip(inner, 0.0, 1.0, out=inner)
    return k * np.sum(weights * inner ** (k - 1), axis=-1)


def studentized_range_cdf(
    q: Union[float, np.ndarray], k: int, df: Optional[float] = math.inf
) -> Union[float, np.ndarray]:
    """CDF of the studentized range for k means and df error degrees of freedom.

    ``df`` of None or inf gives the range of k standard normals. Accepts an
    array of q values and returns an array of the same shape.
    """
    if k < 2:
        raise ValidationError(f"k must be at least 2, got {k}")
    q_array = np.asarray(q, dtype=np.float64)
    if np.any(q_array < 0):
        raise ValidationError("q must be non-negative")

    if df is None or math.isinf(df):
        result = _range_cdf_normal(q_array, k)
    else:
        if df < 1:
            raise ValidationError(f"df must be >= 1, got {df}")
        s, ws = _s_grid(float(df))
        result = np.sum(ws * _range_cdf_normal(q_array[..., None] * s, k), axis=-1)

    result = np.where(q_array == 0, 0.0, np.clip(result, 0.0, 1.0))
    if np.ndim(q) == 0:
        return float(result)
    return result
