"""TREC run / qrels ingestion and the score-matrix CSV interchange format.

Run format:   topic Q0 docid rank score tag
Qrels format: topic 0 docid grade
Score CSV:    topic,<system tags...> then one row per topic
"""

import csv
import gzip
import io
import math
from typing import Dict, IO, Optional, Sequence, Tuple, Union

import numpy as np
from attrs import define, field

from mcptest.constants import DEFAULT_DEPTH
from mcptest.evaluation.utils import TrecParseError, ValidationError, format_float

TextSource = Union[bytes, str, IO]


@define(frozen=True)
class RankedDoc:
    doc_id: str
    rank: int
    score: float


@define(frozen=True)
class RunSet:
    system_tag: str
    rankings: Dict[str, Tuple[RankedDoc, ...]]

    @property
    def topics(self):
        return list(self.rankings.keys())


@define(frozen=True)
class Qrels:
    grades: Dict[Tuple[str, str], int] = field(factory=dict)

    def grade(self, topic: str, doc_id: str) -> int:
        # unjudged documents count as non-relevant
        return self.grades.get((topic, doc_id), 0)

    @property
    def topics(self):
        return sorted({topic for topic, _ in self.grades})

    def relevant_count(self, topic: str) -> int:
        return sum(
            1 for (t, _), grade in self.grades.items() if t == topic and grade > 0
        )


@define(frozen=True, eq=False)
class ScoreMatrix:
    """n topics x m systems table of effectiveness scores."""

    topics: Tuple[str, ...] = field(converter=tuple)
    systems: Tuple[str, ...] = field(converter=tuple)
    values: np.ndarray = field(converter=lambda v: np.asarray(v, dtype=np.float64))

    def __attrs_post_init__(self):
        n, m = len(self.topics), len(self.systems)
        if self.values.shape != (n, m):
            raise ValidationError(
                f"score matrix shape {self.values.shape} does not match {n} topics x {m} systems"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("score matrix contains non-finite cells")
        if len(set(self.topics)) != n:
            raise ValidationError("duplicate topic ids in score matrix")
        if len(set(self.systems)) != m:
            raise ValidationError("duplicate system tags in score matrix")

    @property
    def n(self) -> int:
        return len(self.topics)

    @property
    def m(self) -> int:
        return len(self.systems)

    def column_means(self) -> np.ndarray:
        return self.values.mean(axis=0)

    def subset(self, topic_indices: Sequence[int]) -> "ScoreMatrix":
        idx = list(topic_indices)
        return ScoreMatrix(
            topics=[self.topics[i] for i in idx],
            systems=self.systems,
            values=self.values[idx, :],
        )

    def __eq__(self, other):
        if not isinstance(other, ScoreMatrix):
            return NotImplemented
        return (
            self.topics == other.topics
            and self.systems == other.systems
            and np.array_equal(self.values, other.values)
        )


def _read_text(source: TextSource) -> str:
    if isinstance(source, bytes):
        return source.decode("utf-8")
    if isinstance(source, str):
        return source
    data = source.read()
    if isinstance(data, bytes):
        return data.decode("utf-8")
    return data


def _open_path(path: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def parse_run(text: TextSource, depth: Optional[int] = None) -> RunSet:
    """Parse a six-column TREC run.

    Rankings are re-sorted by descending score, ties broken by descending
    docid, and ranks are renumbered 1..len. With ``depth`` set every topic
    keeps at most ``depth`` documents.
    """
    per_topic: Dict[str, list] = {}
    seen = set()
    tag = None
    for line_no, line in enumerate(_read_text(text).splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 6:
            raise TrecParseError(f"expected 6 columns, found {len(parts)}", line_no)
        topic, _, doc_id, rank_text, score_text, line_tag = parts
        try:
            rank = int(rank_text)
            score = float(score_text)
        except ValueError:
            raise TrecParseError(
                f"unparsable rank/score {rank_text!r} {score_text!r}", line_no
            )
        if rank < 1 or math.isnan(score):
            raise TrecParseError(f"invalid rank {rank} or score {score}", line_no)
        if tag is None:
            tag = line_tag
        elif line_tag != tag:
            raise TrecParseError(
                f"run tag {line_tag!r} differs from {tag!r}", line_no
            )
        if (topic, doc_id) in seen:
            raise TrecParseError(f"duplicate document {doc_id} for topic {topic}", line_no)
        seen.add((topic, doc_id))
        per_topic.setdefault(topic, []).append((doc_id, score))

    if tag is None:
        raise TrecParseError("no records")

    rankings = {}
    for topic, docs in per_topic.items():
        # descending score, then descending docid
        docs.sort(key=lambda d: (d[1], d[0]), reverse=True)
        if depth is not None:
            docs = docs[:depth]
        rankings[topic] = tuple(
            RankedDoc(doc_id=doc_id, rank=rank, score=score)
            for rank, (doc_id, score) in enumerate(docs, start=1)
        )
    return RunSet(system_tag=tag, rankings=rankings)


def serialize_run(run: RunSet) -> str:
    lines = []
    for topic, docs in run.rankings.items():
        for doc in docs:
            lines.append(
                f"{topic} Q0 {doc.doc_id} {doc.rank} {format_float(doc.score)} {run.system_tag}"
            )
    return "".join(line + "\n" for line in lines)


def read_run_file(path: str, depth: Optional[int] = None) -> RunSet:
    with _open_path(path) as f:
        return parse_run(f, depth=depth)


def parse_qrels(text: TextSource) -> Qrels:
    grades = {}
    for line_no, line in enumerate(_read_text(text).splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 4:
            raise TrecParseError(f"expected 4 columns, found {len(parts)}", line_no)
        topic, _, doc_id, grade_text = parts
        try:
            grade = int(grade_text)
        except ValueError:
            raise TrecParseError(f"unparsable grade {grade_text!r}", line_no)
        if grade < 0:
            raise TrecParseError(f"negative grade {grade}", line_no)
        if (topic, doc_id) in grades:
            raise TrecParseError(f"duplicate judgment for ({topic}, {doc_id})", line_no)
        grades[(topic, doc_id)] = grade
    return Qrels(grades=grades)


def serialize_qrels(qrels: Qrels) -> str:
    return "".join(
        f"{topic} 0 {doc_id} {grade}\n" for (topic, doc_id), grade in qrels.grades.items()
    )


def read_qrels_file(path: str) -> Qrels:
    with _open_path(path) as f:
        return parse_qrels(f)


def relevance_vector(
    run: RunSet, topic: str, qrels: Qrels, depth: int = DEFAULT_DEPTH
) -> np.ndarray:
    """Binary relevance of the top min(depth, len) documents, never padded."""
    if depth < 1:
        raise ValidationError(f"depth must be positive, got {depth}")
    if topic not in run.rankings:
        raise ValidationError(f"topic {topic} not in run {run.system_tag}")
    docs = run.rankings[topic][:depth]
    return np.array(
        [1 if qrels.grade(topic, doc.doc_id) > 0 else 0 for doc in docs],
        dtype=np.int8,
    )


def write_score_matrix(matrix: ScoreMatrix, stream: Optional[IO] = None) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["topic", *matrix.systems])
    for topic, row in zip(matrix.topics, matrix.values):
        writer.writerow([topic, *(format_float(v) for v in row)])
    text = buffer.getvalue()
    if stream is not None:
        stream.write(text)
    return text


def read_score_matrix(source: TextSource) -> ScoreMatrix:
    rows = list(csv.reader(io.StringIO(_read_text(source))))
    rows = [row for row in rows if row]
    if not rows or not rows[0] or rows[0][0] != "topic":
        raise ValidationError("score matrix CSV must start with a 'topic,...' header")
    systems = rows[0][1:]
    if not systems:
        raise ValidationError("score matrix CSV has no system columns")
    topics, values = [], []
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != len(systems) + 1:
            raise ValidationError(
                f"line {line_no}: expected {len(systems) + 1} cells, found {len(row)}"
            )
        try:
            cells = [float(cell) for cell in row[1:]]
        except ValueError:
            raise ValidationError(f"line {line_no}: non-numeric cell")
        topics.append(row[0])
        values.append(cells)
    if not topics:
        raise ValidationError("score matrix CSV has no topic rows")
    return ScoreMatrix(topics=topics, systems=systems, values=np.array(values))


def read_score_matrix_file(path: str) -> ScoreMatrix:
    with _open_path(path) as f:
        return read_score_matrix(f)


def score_matrix_io(
    matrix: Optional[ScoreMatrix], direction: str, medium: Union[IO, TextSource]
):
    """read: medium -> ScoreMatrix; write: matrix -> medium, returns the CSV text."""
    if direction == "read":
        return read_score_matrix(medium)
    elif direction == "write":
        return write_score_matrix(matrix, medium)
    raise ValidationError(f"direction must be 'read' or 'write', got {direction!r}")
