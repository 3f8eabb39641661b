from collections import Counter
from typing import List, Optional, Sequence

import numpy as np
from attrs import define, field, validators

from mcptest.constants import DEFAULT_DEPTH
from mcptest.evaluation.trec_io import Qrels, RunSet, ScoreMatrix, relevance_vector
from mcptest.evaluation.utils import ValidationError

METRIC_KINDS = ("ap", "ndcg")
DENOMINATOR_POLICIES = ("retrieved_relevant", "qrels_relevant")


def _positive(instance, attribute, value):
    if value < 1:
        raise ValidationError(f"{attribute.name} must be >= 1, got {value}")


@define(frozen=True)
class MetricSpec:
    kind: str = field(default="ap", converter=str.lower, validator=validators.in_(METRIC_KINDS))
    depth: int = field(default=DEFAULT_DEPTH, validator=_positive)
    denominator_policy: str = field(
        default="retrieved_relevant", validator=validators.in_(DENOMINATOR_POLICIES)
    )


def _as_ranking(r) -> np.ndarray:
    r = np.asarray(r, dtype=np.int64)
    if r.ndim != 1 or r.size < 1:
        raise ValidationError("a ranking must be a non-empty 1-D sequence")
    if np.any((r != 0) & (r != 1)):
        raise ValidationError("ranking entries must be 0 or 1")
    return r


def _check_total(r: np.ndarray, total_relevant: Optional[int]) -> int:
    retrieved = int(r.sum())
    if total_relevant is None:
        return retrieved
    if total_relevant < retrieved:
        raise ValidationError(
            f"total_relevant={total_relevant} is below the {retrieved} relevant documents retrieved"
        )
    return int(total_relevant)


def average_precision(r, total_relevant: Optional[int] = None) -> float:
    """AP of a binary ranking.

    ``total_relevant=None`` uses the number of relevant documents in ``r``
    as the denominator (the only option for simulated rankings).
    """
    r = _as_ranking(r)
    total = _check_total(r, total_relevant)
    if total == 0:
        return 0.0
    positions = np.flatnonzero(r) + 1
    precision_at_hits = np.arange(1, positions.size + 1) / positions
    return float(precision_at_hits.sum() / total)


def ndcg(r, total_relevant: Optional[int] = None, depth: Optional[int] = None) -> float:
    r = _as_ranking(r)
    total = _check_total(r, total_relevant)
    if depth is not None:
        if depth < 1:
            raise ValidationError(f"depth must be positive, got {depth}")
        r = r[:depth]
        cutoff = depth
    else:
        cutoff = r.size
    ideal_hits = min(total, cutoff)
    if ideal_hits == 0:
        return 0.0
    discounts = 1.0 / np.log2(np.arange(2, max(r.size, ideal_hits) + 2))
    dcg = float(np.dot(r, discounts[: r.size]))
    idcg = float(discounts[:ideal_hits].sum())
    return dcg / idcg


def score_ranking(r, spec: MetricSpec, total_relevant: Optional[int] = None) -> float:
    if spec.denominator_policy == "retrieved_relevant":
        total_relevant = None
    if spec.kind == "ap":
        return average_precision(np.asarray(r)[: spec.depth], total_relevant)
    return ndcg(r, total_relevant, spec.depth)


def build_score_matrix(
    runs: Sequence[RunSet], qrels: Qrels, spec: MetricSpec
) -> ScoreMatrix:
    if len(runs) == 0:
        raise ValidationError("at least one run is required")
    topics = qrels.topics
    if not topics:
        raise ValidationError("qrels contain no topics")

    missing: List[str] = []
    for run in runs:
        absent = [t for t in topics if t not in run.rankings]
        if absent:
            missing.append(f"{run.system_tag}: {', '.join(absent)}")
    if missing:
        raise ValidationError("topic coverage mismatch; missing " + "; ".join(missing))

    relevant_counts = Counter(
        topic for (topic, _), grade in qrels.grades.items() if grade > 0
    )
    values = np.zeros((len(topics), len(runs)))
    for j, run in enumerate(runs):
        for i, topic in enumerate(topics):
            r = relevance_vector(run, topic, qrels, spec.depth)
            values[i, j] = score_ranking(r, spec, relevant_counts[topic])
    return ScoreMatrix(
        topics=topics, systems=[run.system_tag for run in runs], values=values
    )
