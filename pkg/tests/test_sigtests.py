import itertools
import math

import numpy as np
import pytest
from scipy import stats

from mcptest.evaluation.distributions import t_two_sided_p
from mcptest.evaluation.sigtests import (
    RTUKEY_BLOCK,
    anova_tukey_hsd,
    family_to_csv,
    family_to_json,
    paired_t_test,
    pairwise_family,
    pvalue_matrix_to_csv,
    randomized_tukey_hsd,
    wilcoxon_signed_rank,
)
from mcptest.evaluation.trec_io import ScoreMatrix
from mcptest.evaluation.utils import ValidationError, derive_rng


def matrix(values, topics=None):
    values = np.asarray(values, dtype=np.float64)
    n, m = values.shape
    return ScoreMatrix(
        topics=topics or [f"q{i}" for i in range(n)],
        systems=[f"s{j}" for j in range(m)],
        values=values,
    )


def dyadic_matrix(rng, n, m):
    # multiples of 1/8 keep every column sum exact in floating point
    return rng.integers(0, 9, size=(n, m)) / 8.0


def test_t_test_identical_samples():
    x = [0.1, 0.4, 0.3]
    outcome = paired_t_test(x, x)
    assert outcome.p_value == 1.0
    assert outcome.degenerate


def test_t_test_constant_shift_is_certain():
    outcome = paired_t_test([1.0, 2.0, 3.0], [0.5, 1.5, 2.5])
    assert outcome.p_value == 0.0
    assert outcome.statistic == math.inf
    assert outcome.degenerate


def test_t_test_symmetric_differences():
    outcome = paired_t_test([1, 0, 1, 0], [0, 1, 0, 1])
    assert outcome.statistic == 0.0
    assert outcome.p_value == pytest.approx(1.0)


def test_t_test_hand_example():
    outcome = paired_t_test([1.0, 2.0, 3.0, 4.0, 5.0], [0.0] * 5)
    assert outcome.statistic == pytest.approx(4.2426, abs=1e-4)
    assert outcome.p_value == pytest.approx(0.01324, abs=1e-4)
    assert float(outcome) == outcome.p_value


def test_t_test_validation():
    with pytest.raises(ValidationError):
        paired_t_test([1.0], [2.0])
    with pytest.raises(ValidationError):
        paired_t_test([1.0, 2.0], [2.0])
    with pytest.raises(ValidationError):
        paired_t_test([1.0, np.nan], [2.0, 1.0])


def test_wilcoxon_identical_samples():
    outcome = wilcoxon_signed_rank([0.3, 0.2], [0.3, 0.2])
    assert outcome.p_value == 1.0
    assert outcome.degenerate


def test_wilcoxon_three_positive_differences():
    outcome = wilcoxon_signed_rank([1, 2, 3], [0, 0, 0], mode="exact")
    assert outcome.statistic == 0.0
    assert outcome.p_value == pytest.approx(0.25, abs=1e-15)


def enumerated_p(d):
    """Two-sided p by walking all 2^n sign assignments of the ranks."""
    d = np.asarray(d, dtype=np.float64)
    d = d[d != 0]
    doubled = np.round(2 * stats.rankdata(np.abs(d))).astype(np.int64)
    total = int(doubled.sum())
    w_plus = int(doubled[d > 0].sum())
    w = min(w_plus, total - w_plus)
    signs = np.array(list(itertools.product([0, 1], repeat=d.size)))
    t = signs @ doubled
    extreme = np.abs(2 * t - total) >= abs(2 * w - total)
    return extreme.sum() / 2.0**d.size


def test_wilcoxon_six_differences_matches_enumeration():
    d = [1, -2, 3, -4, 5, 6]
    outcome = wilcoxon_signed_rank(d, [0] * 6, mode="exact")
    assert abs(outcome.p_value - enumerated_p(d)) <= 1e-12


def test_wilcoxon_exact_matches_enumeration_with_ties():
    rng = np.random.default_rng(20)
    checked = 0
    while checked < 500:
        n = int(rng.integers(1, 13))
        d = rng.integers(-4, 5, size=n).astype(np.float64)
        if not np.any(d != 0):
            continue
        outcome = wilcoxon_signed_rank(d, np.zeros(n), mode="exact")
        assert abs(outcome.p_value - enumerated_p(d)) <= 1e-12
        checked += 1


def test_wilcoxon_auto_uses_exact_for_small_samples():
    rng = np.random.default_rng(5)
    x, y = rng.random(20), rng.random(20)
    assert wilcoxon_signed_rank(x, y) == wilcoxon_signed_rank(x, y, mode="exact")


def test_wilcoxon_approx_close_to_exact():
    rng = np.random.default_rng(8)
    for _ in range(10):
        x, y = rng.random(25), rng.random(25) + 0.1
        exact = wilcoxon_signed_rank(x, y, mode="exact").p_value
        approx = wilcoxon_signed_rank(x, y, mode="approx").p_value
        assert approx == pytest.approx(exact, abs=0.01)


def test_wilcoxon_is_symmetric():
    rng = np.random.default_rng(9)
    x, y = rng.random(40), rng.random(40)
    assert wilcoxon_signed_rank(x, y).p_value == wilcoxon_signed_rank(y, x).p_value


def test_wilcoxon_mode_validation():
    with pytest.raises(ValidationError):
        wilcoxon_signed_rank([1], [0], mode="fast")


def test_anova_identical_columns():
    column = np.linspace(0.1, 0.9, 6)
    result = anova_tukey_hsd(matrix(np.column_stack([column] * 3)))
    family = result.to_family()
    assert np.all(family.raw_p == 1.0)
    assert result.degenerate


def tukey_reference(values):
    n, m = values.shape
    grand = values.mean()
    ss_total = np.sum((values - grand) ** 2)
    ss_topics = m * np.sum((values.mean(axis=1) - grand) ** 2)
    ss_systems = n * np.sum((values.mean(axis=0) - grand) ** 2)
    df = (n - 1) * (m - 1)
    mse = (ss_total - ss_topics - ss_systems) / df
    means = values.mean(axis=0)
    return {
        (i, j): stats.studentized_range.sf(abs(means[i] - means[j]) / math.sqrt(mse / n), m, df)
        for i in range(m)
        for j in range(i + 1, m)
    }


def test_anova_matches_reference_tukey():
    rng = np.random.default_rng(42)
    values = rng.random((10, 3)) + np.array([0.0, 0.1, 0.3])
    result = anova_tukey_hsd(matrix(values))
    for (i, j), p in tukey_reference(values).items():
        assert result.p[i, j] == pytest.approx(p, abs=1e-6)
        assert result.p[j, i] == result.p[i, j]


def test_anova_row_shift_invariance():
    rng = np.random.default_rng(4)
    values = rng.random((12, 4))
    shifted = values.copy()
    shifted[3] += 0.37
    a = anova_tukey_hsd(matrix(values)).to_family().raw_p
    b = anova_tukey_hsd(matrix(shifted)).to_family().raw_p
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_anova_needs_two_by_two():
    with pytest.raises(ValidationError):
        anova_tukey_hsd(matrix([[0.1, 0.2]]))


def test_rtukey_constant_rows():
    values = np.repeat(np.linspace(0.1, 0.5, 5)[:, None], 3, axis=1)
    result = randomized_tukey_hsd(matrix(values), B=200, seed=1)
    family = result.to_family()
    assert np.all(family.raw_p == 0.0)
    assert result.degenerate


def test_rtukey_row_shift_is_bit_identical():
    rng = np.random.default_rng(0)
    for trial in range(100):
        values = dyadic_matrix(rng, 8, 4)
        shifted = values.copy()
        shifted[int(rng.integers(8))] += 0.5
        a = randomized_tukey_hsd(matrix(values), B=2000, seed=trial)
        b = randomized_tukey_hsd(matrix(shifted), B=2000, seed=trial)
        np.testing.assert_array_equal(a.p, b.p)


def test_rtukey_two_systems_matches_paired_permutation_test():
    rng = np.random.default_rng(1)
    B, seed = 2000, 77
    for _ in range(10):
        values = dyadic_matrix(rng, 16, 2)
        n = values.shape[0]
        observed = abs(values[:, 0].sum() / n - values[:, 1].sum() / n)
        count = 0
        for block, start in enumerate(range(0, B, RTUKEY_BLOCK)):
            size = min(RTUKEY_BLOCK, B - start)
            shift = np.zeros(size)
            for t, row in enumerate(values):
                permuted = derive_rng(seed, t, block).permuted(np.tile(row, (size, 1)), axis=1)
                shift += permuted[:, 0] - permuted[:, 1]
            count += int(np.sum(np.abs(shift / n) > observed))
        result = randomized_tukey_hsd(matrix(values), B=B, seed=seed)
        assert result.p[0, 1] == count / B


def test_rtukey_key_by_topic_ignores_row_order():
    rng = np.random.default_rng(2)
    values = dyadic_matrix(rng, 8, 3)
    topics = [f"t{i}" for i in range(8)]
    order = rng.permutation(8)
    a = randomized_tukey_hsd(matrix(values, topics), B=1500, seed=3, key_by_topic=True)
    b = randomized_tukey_hsd(
        matrix(values[order], [topics[i] for i in order]), B=1500, seed=3, key_by_topic=True
    )
    np.testing.assert_array_equal(a.p, b.p)


def test_rtukey_smoothed_and_deterministic():
    rng = np.random.default_rng(6)
    X = matrix(rng.random((12, 3)) + np.array([0.0, 0.0, 1.0]))
    raw = randomized_tukey_hsd(X, B=500, seed=9)
    again = randomized_tukey_hsd(X, B=500, seed=9)
    smoothed = randomized_tukey_hsd(X, B=500, seed=9, smoothed=True)
    np.testing.assert_array_equal(raw.p, again.p)
    counts = raw.p[0, 2] * 500
    assert smoothed.p[0, 2] == pytest.approx((counts + 1) / 501)
    # the shifted system is far from the other two
    assert raw.p[0, 2] < 0.01 and raw.p[1, 2] < 0.01


def test_rtukey_validation():
    with pytest.raises(ValidationError):
        randomized_tukey_hsd(matrix(np.ones((3, 2))), B=0, seed=1)


def test_pairwise_family_sizes():
    rng = np.random.default_rng(12)
    assert pairwise_family(matrix(rng.random((8, 6))), "t").k == 15
    X = matrix(rng.random((8, 2)))
    family = pairwise_family(X, "wilcoxon")
    assert family.k == 1
    assert family.raw_p[0] == wilcoxon_signed_rank(X.values[:, 0], X.values[:, 1]).p_value


def test_pairwise_family_identical_columns():
    column = np.linspace(0, 1, 7)
    family = pairwise_family(matrix(np.column_stack([column] * 3)), "t")
    assert np.all(family.raw_p == 1.0)
    assert all(family.degenerate)


def test_pairwise_family_unknown_test():
    with pytest.raises(ValidationError):
        pairwise_family(matrix(np.ones((3, 2))), "anova")


def test_family_exports():
    rng = np.random.default_rng(13)
    family = pairwise_family(matrix(rng.random((6, 3))), "t")
    lines = family_to_csv(family).splitlines()
    assert lines[0] == "sys_i,sys_j,p"
    assert len(lines) == 4
    assert lines[1].startswith("s0,s1,")
    payload = family_to_json(family, np.ones(3))
    assert payload["test"] == "t"
    assert [pair["p"] for pair in payload["pairs"]] == [1.0, 1.0, 1.0]


def test_pvalue_matrix_export_matches_family():
    rng = np.random.default_rng(14)
    result = anova_tukey_hsd(matrix(rng.random((9, 3))))
    off_diagonal = ~np.eye(3, dtype=bool)
    assert np.all(np.isnan(np.diag(result.p)))
    np.testing.assert_array_equal(result.p[off_diagonal], result.p.T[off_diagonal])
    assert pvalue_matrix_to_csv(result) == family_to_csv(result.to_family())


def test_t_test_is_symmetric():
    rng = np.random.default_rng(15)
    for _ in range(50):
        x, y = rng.random(20), rng.random(20)
        forward, backward = paired_t_test(x, y), paired_t_test(y, x)
        assert forward.p_value == backward.p_value
        assert forward.statistic == -backward.statistic


def test_t_test_shift_invariance():
    rng = np.random.default_rng(16)
    for _ in range(50):
        x, y = rng.random(20), rng.random(20)
        shifted = paired_t_test(x + 0.1234567, y + 0.1234567)
        assert shifted.p_value == pytest.approx(paired_t_test(x, y).p_value, rel=1e-9, abs=1e-12)


def test_topic_order_leaves_paired_p_values_unchanged():
    rng = np.random.default_rng(17)
    for _ in range(200):
        x, y = rng.random(20), rng.random(20)
        order = rng.permutation(20)
        assert paired_t_test(x[order], y[order]).p_value == paired_t_test(x, y).p_value
        for mode in ("exact", "approx"):
            assert (
                wilcoxon_signed_rank(x[order], y[order], mode).p_value
                == wilcoxon_signed_rank(x, y, mode).p_value
            )


@pytest.mark.parametrize("df", [3, 19, 200])
def test_t_p_value_strictly_decreases_in_abs_t(df):
    p = [t_two_sided_p(t, df) for t in np.linspace(0.0, 6.0, 61)]
    assert p[0] == pytest.approx(1.0)
    assert np.all(np.diff(p) < 0)
    assert t_two_sided_p(-2.5, df) == t_two_sided_p(2.5, df)


def test_wilcoxon_exact_agrees_with_normal_for_large_samples():
    rng = np.random.default_rng(18)
    x, y = rng.random(300), rng.random(300) + 0.02
    exact = wilcoxon_signed_rank(x, y, mode="exact").p_value
    approx = wilcoxon_signed_rank(x, y, mode="approx").p_value
    assert 0.0 <= exact <= 1.0
    assert exact == pytest.approx(approx, abs=2e-3)


@pytest.mark.slow
def test_wilcoxon_exact_beyond_float_range_of_sign_counts():
    # 2 ** 1100 sign assignments do not fit a double
    rng = np.random.default_rng(19)
    x, y = rng.random(1100), rng.random(1100) + 0.01
    exact = wilcoxon_signed_rank(x, y, mode="exact").p_value
    approx = wilcoxon_signed_rank(x, y, mode="approx").p_value
    assert math.isfinite(exact)
    assert exact == pytest.approx(approx, abs=1e-3)
