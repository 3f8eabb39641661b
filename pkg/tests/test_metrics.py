import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from mcptest.evaluation.metrics import (
    MetricSpec,
    average_precision,
    build_score_matrix,
    ndcg,
    score_ranking,
)
from mcptest.evaluation.trec_io import Qrels, parse_qrels, parse_run, relevance_vector
from mcptest.evaluation.utils import ValidationError

rankings = st.lists(st.integers(min_value=0, max_value=1), min_size=1, max_size=40)


def test_average_precision_examples():
    assert average_precision([1, 0, 1], 2) == pytest.approx((1 + 2 / 3) / 2)
    assert average_precision([0, 0, 0], 5) == 0.0
    assert average_precision([1, 1, 1], 3) == 1.0
    # denominator defaults to the relevant documents retrieved
    assert average_precision([0, 1]) == pytest.approx(0.5)


def test_average_precision_rejects_small_total():
    with pytest.raises(ValidationError):
        average_precision([1, 1], 1)
    with pytest.raises(ValidationError):
        average_precision([1, 2])


def test_ndcg_examples():
    assert ndcg([1, 1, 1, 1], 4) == pytest.approx(1.0)
    assert ndcg([0, 0, 0], 2) == 0.0
    assert ndcg([0, 1], 1) == pytest.approx(1 / math.log2(3))


@settings(max_examples=200)
@given(rankings, st.integers(min_value=0, max_value=20))
def test_metrics_stay_in_unit_interval(r, extra):
    total = sum(r) + extra
    assert 0.0 <= average_precision(r, total) <= 1.0
    assert 0.0 <= ndcg(r, total) <= 1.0 + 1e-12


@settings(max_examples=100)
@given(rankings)
def test_more_judged_relevant_lowers_ap(r):
    total = sum(r)
    assert average_precision(r, total + 1) <= average_precision(r, total)


@settings(max_examples=200)
@given(
    st.lists(st.integers(min_value=0, max_value=1), min_size=0, max_size=30),
    st.integers(min_value=0, max_value=30),
    st.randoms(use_true_random=False),
)
def test_ap_ignores_the_non_relevant_tail(prefix, tail, random):
    head = prefix + [1]
    total = sum(head) + 2
    suffix = [0] * tail
    random.shuffle(suffix)
    assert average_precision(head + suffix, total) == average_precision(head, total)
    assert average_precision(head + suffix) == average_precision(head)


@settings(max_examples=200)
@given(rankings, st.integers(min_value=0, max_value=5), st.data())
def test_moving_a_relevant_document_up_raises_ap(r, extra, data):
    moves = [(j, i) for i in range(len(r)) for j in range(i) if r[i] == 1 and r[j] == 0]
    assume(moves)
    j, i = data.draw(st.sampled_from(moves))
    better = list(r)
    better[j], better[i] = 1, 0
    total = sum(r) + extra
    assert average_precision(better, total) > average_precision(r, total)


def test_metric_spec_validation():
    assert MetricSpec(kind="AP").kind == "ap"
    with pytest.raises(ValueError):
        MetricSpec(kind="p10")
    with pytest.raises(ValidationError):
        MetricSpec(depth=0)


def test_score_ranking_depth():
    spec = MetricSpec(kind="ap", depth=2)
    assert score_ranking([0, 0, 1], spec) == 0.0


QRELS = "1 0 a 1\n1 0 b 1\n2 0 c 1\n2 0 d 0\n3 0 e 1\n"


def _run(tag, order):
    lines = []
    for topic, docs in order.items():
        for rank, doc in enumerate(docs, start=1):
            lines.append(f"{topic} Q0 {doc} {rank} {100 - rank} {tag}")
    return parse_run("\n".join(lines))


def test_build_score_matrix_perfect_ranking():
    qrels = parse_qrels("1 0 a 1\n")
    matrix = build_score_matrix([_run("s", {"1": ["a", "z"]})], qrels, MetricSpec())
    assert matrix.values.tolist() == [[1.0]]


def test_build_score_matrix_matches_cell_by_cell():
    qrels = parse_qrels(QRELS + "4 0 f 1\n5 0 g 1\n")
    topics = ["1", "2", "3", "4", "5"]
    rng = np.random.default_rng(11)
    docs = list("abcdefgxyz")
    runs = [
        _run(f"r{j}", {t: list(rng.permutation(docs)[:6]) for t in topics}) for j in range(3)
    ]
    for spec in [MetricSpec(), MetricSpec(kind="ndcg", depth=4, denominator_policy="qrels_relevant")]:
        matrix = build_score_matrix(runs, qrels, spec)
        assert matrix.systems == ("r0", "r1", "r2")
        for j, run in enumerate(runs):
            for i, topic in enumerate(matrix.topics):
                r = relevance_vector(run, topic, qrels, spec.depth)
                expected = score_ranking(r, spec, qrels.relevant_count(topic))
                assert matrix.values[i, j] == expected


def test_build_score_matrix_identical_runs():
    qrels = parse_qrels(QRELS)
    order = {"1": ["a", "x", "b"], "2": ["d", "c"], "3": ["q"]}
    matrix = build_score_matrix([_run("x", order), _run("y", order)], qrels, MetricSpec())
    assert np.array_equal(matrix.values[:, 0], matrix.values[:, 1])


def test_build_score_matrix_coverage_mismatch_lists_topics():
    qrels = parse_qrels(QRELS)
    run = _run("partial", {"1": ["a"]})
    with pytest.raises(ValidationError, match="partial: 2, 3"):
        build_score_matrix([run], qrels, MetricSpec())


def test_build_score_matrix_qrels_denominator():
    qrels = parse_qrels("1 0 a 1\n1 0 b 1\n")
    run = _run("s", {"1": ["a", "x"]})
    retrieved = build_score_matrix([run], qrels, MetricSpec())
    judged = build_score_matrix([run], qrels, MetricSpec(denominator_policy="qrels_relevant"))
    assert retrieved.values[0, 0] == 1.0
    assert judged.values[0, 0] == 0.5


def test_build_score_matrix_needs_runs():
    with pytest.raises(ValidationError):
        build_score_matrix([], Qrels(), MetricSpec())
