"""p-value adjustments for a family of pairwise hypotheses.

bonferroni and holm control the FWER at level alpha; bh and by control the
FDR at level delta. Each method returns adjusted p-values such that
``adjusted <= level`` reproduces the procedure's rejection set.
"""

from typing import Sequence

import numpy as np
from attrs import define, field

from mcptest.constants import DEFAULT_ALPHA
from mcptest.evaluation.sigtests import HypothesisFamily
from mcptest.evaluation.utils import ValidationError, check_level

ADJUSTMENTS = ("none", "bonferroni", "holm", "bh", "by")


@define(frozen=True, eq=False)
class AdjustedFamily:
    base: HypothesisFamily
    method: str
    adjusted_p: np.ndarray = field(converter=lambda v: np.asarray(v, dtype=np.float64))
    level: float = DEFAULT_ALPHA

    def __attrs_post_init__(self):
        assert self.adjusted_p.shape == self.base.raw_p.shape
        assert np.all(self.adjusted_p >= self.base.raw_p)
        check_level(self.level)


def _sort(p: np.ndarray):
    # stable order so equal p-values keep their original index order
    order = np.argsort(p, kind="stable")
    return p[order], order


def adjust(p: Sequence[float], method: str) -> np.ndarray:
    if method not in ADJUSTMENTS:
        raise ValidationError(f"adjustment must be one of {ADJUSTMENTS}, got {method!r}")
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size < 1:
        raise ValidationError("need a non-empty 1-D sequence of p-values")
    if np.any(np.isnan(p)) or np.any((p < 0) | (p > 1)):
        raise ValidationError("p-values must lie in [0, 1]")

    k = p.size
    if method == "none":
        return p.copy()
    if method == "bonferroni":
        return np.minimum(1.0, k * p)

    sorted_p, order = _sort(p)
    ranks = np.arange(1, k + 1)
    if method == "holm":
        # step-down: running max of (k - i + 1) * p_(i)
        adjusted_sorted = np.maximum.accumulate((k - ranks + 1) * sorted_p)
    else:
        factor = k / ranks
        if method == "by":
            factor = factor * np.sum(1.0 / ranks)
        # step-up: running min from the largest p-value down
        adjusted_sorted = np.minimum.accumulate((factor * sorted_p)[::-1])[::-1]

    adjusted = np.empty(k)
    adjusted[order] = np.minimum(1.0, adjusted_sorted)
    return adjusted


def adjust_family(
    family: HypothesisFamily, method: str, level: float = DEFAULT_ALPHA
) -> AdjustedFamily:
    check_level(level)
    return AdjustedFamily(
        base=family,
        method=method,
        adjusted_p=adjust(family.raw_p, method),
        level=level,
    )


def reject_set(adjusted: AdjustedFamily) -> np.ndarray:
    """True where the pair's null is rejected (inclusive threshold)."""
    return adjusted.adjusted_p <= adjusted.level
