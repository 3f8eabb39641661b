"""Two-sided paired significance tests over a topics x systems score matrix."""

import csv
import hashlib
import io
import math
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np
from attrs import define, field
from scipy import special, stats

from mcptest.constants import WILCOXON_EXACT_CUTOFF
from mcptest.evaluation.distributions import studentized_range_cdf, t_two_sided_p
from mcptest.evaluation.trec_io import ScoreMatrix
from mcptest.evaluation.utils import (
    ValidationError,
    as_score_array,
    derive_rng,
    format_float,
    pair_index,
)

PAIRWISE_TESTS = ("t", "wilcoxon")
WILCOXON_MODES = ("exact", "approx", "auto")

# randomised TukeyHSD draws permutations in blocks of this many iterations
RTUKEY_BLOCK = 1024


@define(frozen=True)
class PairedOutcome:
    p_value: float
    statistic: float
    degenerate: bool = False

    def __float__(self):
        return self.p_value


@define(frozen=True, eq=False)
class HypothesisFamily:
    systems: Tuple[str, ...] = field(converter=tuple)
    pairs: Tuple[Tuple[int, int], ...] = field(converter=tuple)
    raw_p: np.ndarray = field(converter=lambda v: np.asarray(v, dtype=np.float64))
    test_name: str = ""
    degenerate: Tuple[bool, ...] = field(default=(), converter=tuple)

    def __attrs_post_init__(self):
        m = len(self.systems)
        assert len(self.pairs) == m * (m - 1) // 2
        assert self.raw_p.shape == (len(self.pairs),)
        assert np.all((self.raw_p >= 0) & (self.raw_p <= 1))

    @property
    def k(self) -> int:
        return len(self.pairs)


@define(frozen=True, eq=False)
class PValueMatrix:
    systems: Tuple[str, ...] = field(converter=tuple)
    p: np.ndarray
    test_name: str = ""
    degenerate: bool = False

    def to_family(self) -> HypothesisFamily:
        pairs = pair_index(len(self.systems))
        return HypothesisFamily(
            systems=self.systems,
            pairs=pairs,
            raw_p=[self.p[i, j] for i, j in pairs],
            test_name=self.test_name,
            degenerate=[self.degenerate] * len(pairs),
        )


def _paired_arrays(x, y, min_len: int) -> Tuple[np.ndarray, np.ndarray]:
    x = as_score_array(x, "x")
    y = as_score_array(y, "y")
    if x.size != y.size:
        raise ValidationError(f"paired samples differ in length: {x.size} vs {y.size}")
    if x.size < min_len:
        raise ValidationError(f"need at least {min_len} paired observations, got {x.size}")
    return x, y


def paired_t_test(x: Sequence[float], y: Sequence[float]) -> PairedOutcome:
    x, y = _paired_arrays(x, y, 2)
    d = x - y
    n = d.size
    if np.all(d == d[0]):
        # zero variance: no evidence if the shift is zero, certainty otherwise
        if d[0] == 0:
            return PairedOutcome(p_value=1.0, statistic=0.0, degenerate=True)
        return PairedOutcome(p_value=0.0, statistic=math.copysign(math.inf, d[0]), degenerate=True)
    # fsum is correctly rounded, so the statistic does not depend on topic order
    mean = math.fsum(d) / n
    sum_sq = math.fsum((d - mean) ** 2)
    t = mean / math.sqrt(sum_sq / (n - 1) / n)
    return PairedOutcome(p_value=t_two_sided_p(t, n - 1), statistic=float(t))


@lru_cache(maxsize=256)
def _signed_rank_cdf(doubled_ranks: Tuple[int, ...]) -> np.ndarray:
    """CDF of 2*W+ over all 2^n equally likely sign assignments, indexed by the doubled sum."""
    total = sum(doubled_ranks)
    probs = np.zeros(total + 1)
    probs[0] = 1.0
    for r in doubled_ranks:
        # each sign is + or - with probability 1/2; halving keeps large n finite
        shifted = probs.copy()
        shifted[r:] += probs[: total + 1 - r]
        probs = 0.5 * shifted
    return np.cumsum(probs)


def wilcoxon_signed_rank(
    x: Sequence[float], y: Sequence[float], mode: str = "auto"
) -> PairedOutcome:
    """Wilcoxon signed-rank test; zero differences are discarded, ties get average ranks."""
    if mode not in WILCOXON_MODES:
        raise ValidationError(f"mode must be one of {WILCOXON_MODES}, got {mode!r}")
    x, y = _paired_arrays(x, y, 1)
    d = x - y
    d = d[d != 0]
    n = d.size
    if n == 0:
        return PairedOutcome(p_value=1.0, statistic=0.0, degenerate=True)

    ranks = stats.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)

    if mode == "exact" or (mode == "auto" and n <= WILCOXON_EXACT_CUTOFF):
        # average ranks are multiples of 1/2, so doubled ranks are integers
        doubled = tuple(sorted(int(round(2 * r)) for r in ranks))
        cdf = _signed_rank_cdf(doubled)
        p = 2.0 * cdf[int(round(2 * w))]
    else:
        mean = n * (n + 1) / 4.0
        _, tie_sizes = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_sizes**3 - tie_sizes) / 48.0
        z = (w - mean + 0.5) / math.sqrt(var)
        p = 2.0 * special.ndtr(z)
    return PairedOutcome(p_value=float(min(1.0, max(0.0, p))), statistic=w)


def _check_matrix(X: ScoreMatrix):
    if X.n < 2 or X.m < 2:
        raise ValidationError(f"need at least 2 topics and 2 systems, got {X.n}x{X.m}")


def anova_tukey_hsd(X: ScoreMatrix) -> PValueMatrix:
    """Two-way ANOVA without replication (topic block, system treatment) + TukeyHSD."""
    _check_matrix(X)
    values = X.values
    n, m = values.shape
    means = values.mean(axis=0)
    residuals = (
        values - values.mean(axis=1, keepdims=True) - means[None, :] + values.mean()
    )
    df_error = (n - 1) * (m - 1)
    mse = float(np.sum(residuals**2) / df_error)
    diffs = np.abs(means[:, None] - means[None, :])

    scale = max(1.0, float(np.max(np.abs(values))))
    if np.max(np.abs(residuals)) <= 1e-12 * scale:
        p = np.where(diffs == 0, 1.0, 0.0)
        np.fill_diagonal(p, np.nan)
        return PValueMatrix(systems=X.systems, p=p, test_name="anova", degenerate=True)

    q_obs = diffs / math.sqrt(mse / n)
    iu = np.triu_indices(m, k=1)
    p = np.full((m, m), np.nan)
    upper = 1.0 - studentized_range_cdf(q_obs[iu], m, df_error)
    p[iu] = np.clip(upper, 0.0, 1.0)
    p[(iu[1], iu[0])] = p[iu]
    return PValueMatrix(systems=X.systems, p=p, test_name="anova")


def _topic_key(topic: str) -> int:
    return int.from_bytes(hashlib.sha256(topic.encode("utf-8")).digest()[:8], "little")


def randomized_tukey_hsd(
    X: ScoreMatrix,
    B: int,
    seed: int,
    smoothed: bool = False,
    key_by_topic: bool = False,
) -> PValueMatrix:
    """Paired randomised TukeyHSD.

    Every iteration permutes each topic row independently, takes the spread
    (max - min) of the permuted column means and counts, per pair, how often
    that spread strictly exceeds the observed absolute mean difference.

    Permutations of row t in iteration block c come from the stream
    (seed, row_key, c), where row_key is the row position or, with
    ``key_by_topic``, a stable hash of the topic id. One stream per block
    rather than per iteration keeps generator setup off the inner loop.
    """
    if B < 1:
        raise ValidationError(f"B must be positive, got {B}")
    _check_matrix(X)
    values = X.values
    n, m = values.shape
    row_keys = (
        [_topic_key(topic) for topic in X.topics] if key_by_topic else list(range(n))
    )

    # row-sequential sums, the same accumulation order as the permuted sums
    observed_sums = np.zeros(m)
    for row in values:
        observed_sums += row
    observed = observed_sums / n
    diffs = np.abs(observed[:, None] - observed[None, :])
    iu = np.triu_indices(m, k=1)
    pair_diffs = diffs[iu]

    counts = np.zeros(pair_diffs.size, dtype=np.int64)
    any_spread = False
    for block, start in enumerate(range(0, B, RTUKEY_BLOCK)):
        size = min(RTUKEY_BLOCK, B - start)
        sums = np.zeros((size, m))
        for row, key in zip(values, row_keys):
            rng = derive_rng(seed, key, block)
            sums += rng.permuted(np.tile(row, (size, 1)), axis=1)
        permuted_means = sums / n
        spread = permuted_means.max(axis=1) - permuted_means.min(axis=1)
        any_spread = any_spread or bool(np.any(spread > 0))
        counts += np.sum(spread[:, None] > pair_diffs[None, :], axis=0)

    if smoothed:
        upper = (counts + 1) / (B + 1)
    else:
        upper = counts / B
    p = np.full((m, m), np.nan)
    p[iu] = upper
    p[(iu[1], iu[0])] = upper
    degenerate = not any_spread and not np.any(pair_diffs > 0)
    return PValueMatrix(systems=X.systems, p=p, test_name="rtukey", degenerate=degenerate)


def pairwise_family(
    X: ScoreMatrix, test: str, wilcoxon_mode: str = "auto"
) -> HypothesisFamily:
    if test not in PAIRWISE_TESTS:
        raise ValidationError(f"pairwise test must be one of {PAIRWISE_TESTS}, got {test!r}")
    if X.m < 2:
        raise ValidationError(f"need at least 2 systems, got {X.m}")
    pairs = pair_index(X.m)
    outcomes: List[PairedOutcome] = []
    for i, j in pairs:
        x, y = X.values[:, i], X.values[:, j]
        if test == "t":
            outcomes.append(paired_t_test(x, y))
        else:
            outcomes.append(wilcoxon_signed_rank(x, y, wilcoxon_mode))
    return HypothesisFamily(
        systems=X.systems,
        pairs=pairs,
        raw_p=[o.p_value for o in outcomes],
        test_name=test,
        degenerate=[o.degenerate for o in outcomes],
    )


def family_to_csv(family: HypothesisFamily, p_values: Optional[np.ndarray] = None) -> str:
    """``sys_i,sys_j,p`` rows; ``p_values`` overrides the raw p-values (e.g. adjusted)."""
    p_values = family.raw_p if p_values is None else p_values
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["sys_i", "sys_j", "p"])
    for (i, j), p in zip(family.pairs, p_values):
        writer.writerow([family.systems[i], family.systems[j], format_float(p)])
    return buffer.getvalue()


def family_to_json(family: HypothesisFamily, p_values: Optional[np.ndarray] = None) -> dict:
    p_values = family.raw_p if p_values is None else p_values
    return {
        "test": family.test_name,
        "systems": list(family.systems),
        "pairs": [
            {
                "sys_i": family.systems[i],
                "sys_j": family.systems[j],
                "p": float(p),
                "degenerate": bool(family.degenerate[idx]) if family.degenerate else False,
            }
            for idx, ((i, j), p) in enumerate(zip(family.pairs, p_values))
        ],
    }


def pvalue_matrix_to_csv(matrix: PValueMatrix) -> str:
    return family_to_csv(matrix.to_family())
