"""Repeated-experiment drivers and the error/power rates they report.

Every rate is kept as an integer ``count`` over an integer ``total`` until it
is printed, so reports pool exactly across split runs and worker counts.
"""

import csv
import io
import multiprocessing
import time
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from attrs import asdict, define, field
from tqdm import tqdm

from mcptest.constants import DEFAULT_ALPHA, DEFAULT_GAMMA, DEFAULT_PERMUTATIONS
from mcptest.evaluation.adjust import ADJUSTMENTS, AdjustedFamily, adjust_family, reject_set
from mcptest.evaluation.simkit import (
    RegressorBank,
    SimConfig,
    simulate_alt_family,
    simulate_null_family,
)
from mcptest.evaluation.sigtests import (
    PAIRWISE_TESTS,
    anova_tukey_hsd,
    pairwise_family,
    randomized_tukey_hsd,
)
from mcptest.evaluation.trec_io import ScoreMatrix
from mcptest.evaluation.utils import (
    ValidationError,
    check_level,
    derive_rng,
    format_float,
    info,
    pair_index,
)

MULTIPLE_COMPARISON_TESTS = ("anova", "rtukey")
TESTS = PAIRWISE_TESTS + MULTIPLE_COMPARISON_TESTS
SCENARIOS = ("null", "alt")
RATE_KINDS = ("fwer", "complete_power", "average_power", "minimal_power")
REPORT_COLUMNS = ("scenario", "test", "adjustment", "m", "n", "reps", "metric", "rate_kind", "rate")

# stream name after (seed, rep_index) for the randomised TukeyHSD seed;
# 0 and 1 are taken by topic selection and ranking sampling
PERMUTATION_STREAM = 2


def pairwise_count(m: int) -> int:
    if m < 2:
        raise ValidationError(f"m must be at least 2, got {m}")
    return m * (m - 1) // 2


def theoretical_fwer(alpha: float, k: int) -> float:
    """1 - (1 - alpha)^k, the FWER of k independent unadjusted tests."""
    check_level(alpha, "alpha")
    if k < 1:
        raise ValidationError(f"k must be positive, got {k}")
    return 1.0 - (1.0 - alpha) ** k


@define(frozen=True)
class Combo:
    test: str
    adjustment: str = "none"

    def __attrs_post_init__(self):
        if self.test not in TESTS:
            raise ValidationError(f"test must be one of {TESTS}, got {self.test!r}")
        if self.adjustment not in ADJUSTMENTS:
            raise ValidationError(
                f"adjustment must be one of {ADJUSTMENTS}, got {self.adjustment!r}"
            )
        if self.test in MULTIPLE_COMPARISON_TESTS and self.adjustment != "none":
            raise ValidationError(f"{self.test} already accounts for multiplicity; use it alone")

    @property
    def label(self) -> str:
        if self.test in MULTIPLE_COMPARISON_TESTS:
            return self.test
        return f"{self.test}+{self.adjustment}"


def parse_combo(text: str) -> Combo:
    """``wilcoxon+bh`` -> Combo("wilcoxon", "bh"); a bare test means no adjustment."""
    test, _, adjustment = text.strip().lower().partition("+")
    return Combo(test=test, adjustment=adjustment or "none")


def parse_combos(texts: Sequence[str]) -> List[Combo]:
    combos = []
    for text in texts:
        for part in text.split(","):
            if part.strip():
                combo = parse_combo(part)
                if combo not in combos:
                    combos.append(combo)
    if not combos:
        raise ValidationError("at least one test is required")
    return combos


def apply_combo(
    X: ScoreMatrix,
    combo: Combo,
    level: float = DEFAULT_ALPHA,
    B: int = DEFAULT_PERMUTATIONS,
    seed: int = 0,
    smoothed: bool = False,
    wilcoxon_mode: str = "auto",
) -> AdjustedFamily:
    if combo.test == "rtukey":
        family = randomized_tukey_hsd(X, B, seed, smoothed=smoothed).to_family()
    elif combo.test == "anova":
        family = anova_tukey_hsd(X).to_family()
    else:
        family = pairwise_family(X, combo.test, wilcoxon_mode)
    return adjust_family(family, combo.adjustment, level)


@define(frozen=True, eq=False)
class TruthMask:
    systems: Tuple[str, ...] = field(converter=tuple)
    pairs: Tuple[Tuple[int, int], ...] = field(converter=tuple)
    different: np.ndarray = field(converter=lambda v: np.asarray(v, dtype=bool))
    mean_diffs: np.ndarray = field(converter=lambda v: np.asarray(v, dtype=np.float64))
    gamma: float = DEFAULT_GAMMA

    def __attrs_post_init__(self):
        assert len(self.pairs) == pairwise_count(len(self.systems))
        assert self.different.shape == self.mean_diffs.shape == (len(self.pairs),)

    @property
    def different_count(self) -> int:
        return int(self.different.sum())

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["sys_i", "sys_j", "mean_diff", "label"])
        for (i, j), diff, different in zip(self.pairs, self.mean_diffs, self.different):
            writer.writerow(
                [
                    self.systems[i],
                    self.systems[j],
                    format_float(diff),
                    "different" if different else "undecided",
                ]
            )
        return buffer.getvalue()


def ground_truth_pairs(full: ScoreMatrix, gamma: float = DEFAULT_GAMMA) -> TruthMask:
    """A pair is ``different`` iff its full-topic mean gap is strictly above gamma.

    Pairs at or below gamma stay ``undecided``: a small gap is no evidence that
    the systems are equal.
    """
    if gamma < 0:
        raise ValidationError(f"gamma must be non-negative, got {gamma}")
    means = full.column_means()
    pairs = pair_index(full.m)
    diffs = np.array([abs(means[i] - means[j]) for i, j in pairs])
    return TruthMask(
        systems=full.systems, pairs=pairs, different=diffs > gamma, mean_diffs=diffs, gamma=gamma
    )


def _rejections(families: Sequence[AdjustedFamily], level: Optional[float]) -> np.ndarray:
    if len(families) == 0:
        raise ValidationError("at least one repetition is required")
    if level is not None:
        check_level(level)
        return np.array([family.adjusted_p <= level for family in families])
    return np.array([reject_set(family) for family in families])


def _truth_columns(rejections: np.ndarray, truth: Optional[TruthMask]) -> np.ndarray:
    if truth is None:
        return rejections
    if truth.different.shape != rejections.shape[1:]:
        raise ValidationError("truth mask and families cover different pairs")
    if truth.different_count == 0:
        raise ValidationError("the truth mask marks no pair as different")
    return rejections[:, truth.different]


def fwer_count(rejections: np.ndarray) -> Tuple[int, int]:
    return int(np.any(rejections, axis=1).sum()), rejections.shape[0]


def complete_power_count(rejections: np.ndarray) -> Tuple[int, int]:
    return int(np.all(rejections, axis=1).sum()), rejections.shape[0]


def average_power_count(rejections: np.ndarray) -> Tuple[int, int]:
    return int(rejections.sum()), rejections.size


def minimal_power_count(rejections: np.ndarray) -> Tuple[int, int]:
    return fwer_count(rejections)


RATE_COUNTERS = {
    "fwer": fwer_count,
    "complete_power": complete_power_count,
    "average_power": average_power_count,
    "minimal_power": minimal_power_count,
}


def estimate_fwer(families: Sequence[AdjustedFamily], level: Optional[float] = None) -> float:
    """Fraction of repetitions rejecting at least one null (all nulls true)."""
    count, total = fwer_count(_rejections(families, level))
    return count / total


def complete_power(
    families: Sequence[AdjustedFamily],
    level: Optional[float] = None,
    truth: Optional[TruthMask] = None,
) -> float:
    rejections = _truth_columns(_rejections(families, level), truth)
    count, total = complete_power_count(rejections)
    return count / total


def average_power(
    families: Sequence[AdjustedFamily],
    truth: Optional[TruthMask] = None,
    level: Optional[float] = None,
) -> float:
    """Correct rejections over reps x different pairs; undecided pairs are left out."""
    rejections = _truth_columns(_rejections(families, level), truth)
    count, total = average_power_count(rejections)
    return count / total


def minimal_power(
    families: Sequence[AdjustedFamily],
    level: Optional[float] = None,
    truth: Optional[TruthMask] = None,
) -> float:
    rejections = _truth_columns(_rejections(families, level), truth)
    count, total = minimal_power_count(rejections)
    return count / total


@define(frozen=True)
class ReportRow:
    scenario: str
    test: str
    adjustment: str
    m: int
    n: int
    reps: int
    metric: str
    rate_kind: str
    count: int
    total: int

    def __attrs_post_init__(self):
        assert self.rate_kind in RATE_KINDS
        assert 0 <= self.count <= self.total and self.total > 0

    @property
    def rate(self) -> float:
        return self.count / self.total

    @property
    def key(self) -> tuple:
        return (self.scenario, self.test, self.adjustment, self.m, self.n, self.metric, self.rate_kind)


@define(frozen=True, eq=False)
class ExperimentReport:
    rows: Tuple[ReportRow, ...] = field(converter=tuple)
    config: Dict = field(factory=dict)
    # wall time in seconds, never written to report files
    elapsed: float = 0.0

    def __eq__(self, other):
        if not isinstance(other, ExperimentReport):
            return NotImplemented
        return self.rows == other.rows and self.config == other.config

    def rate(self, label: str, rate_kind: str, n: Optional[int] = None) -> float:
        combo = parse_combo(label)
        for row in self.rows:
            if (
                (row.test, row.adjustment, row.rate_kind) == (combo.test, combo.adjustment, rate_kind)
                and (n is None or row.n == n)
            ):
                return row.rate
        raise KeyError(f"no {rate_kind} row for {label}" + (f" at n={n}" if n else ""))

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in self.rows:
            writer.writerow(
                [
                    row.scenario,
                    row.test,
                    row.adjustment,
                    row.m,
                    row.n,
                    row.reps,
                    row.metric,
                    row.rate_kind,
                    format_float(row.rate),
                ]
            )
        return buffer.getvalue()

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "rows": [dict(asdict(row), rate=row.rate) for row in self.rows],
        }


def merge_reports(*reports: ExperimentReport) -> ExperimentReport:
    """Pool the integer counts of reports over disjoint repetitions.

    Rows are matched on everything but their counts; the merged report keeps
    the row order of the first report.
    """
    if not reports:
        raise ValidationError("nothing to merge")
    merged: Dict[tuple, ReportRow] = {}
    for report in reports:
        for row in report.rows:
            if row.key not in merged:
                merged[row.key] = row
                continue
            seen = merged[row.key]
            merged[row.key] = ReportRow(
                **{
                    **asdict(seen),
                    "reps": seen.reps + row.reps,
                    "count": seen.count + row.count,
                    "total": seen.total + row.total,
                }
            )
    first = reports[0]
    config = dict(first.config)
    if "reps" in config:
        config["reps"] = sum(report.config.get("reps", 0) for report in reports)
    if len(reports) > 1:
        config["merged"] = len(reports)
    return ExperimentReport(
        rows=list(merged.values()),
        config=config,
        elapsed=sum(report.elapsed for report in reports),
    )


def stack_reports(*reports: ExperimentReport) -> ExperimentReport:
    """Concatenate reports over different grid cells, e.g. several (m, n).

    Each cell keeps its own config under ``cells``; rows sharing a key belong
    in ``merge_reports`` instead.
    """
    if not reports:
        raise ValidationError("nothing to stack")
    if len(reports) == 1:
        return reports[0]
    rows = [row for report in reports for row in report.rows]
    keys = [row.key for row in rows]
    if len(set(keys)) != len(keys):
        raise ValidationError("stacked reports overlap; merge them instead")
    return ExperimentReport(
        rows=rows,
        config={"cells": [report.config for report in reports]},
        elapsed=sum(report.elapsed for report in reports),
    )


def _permutation_seed(master_seed: int, *key: int) -> int:
    return int(derive_rng(master_seed, *key, PERMUTATION_STREAM).integers(0, 2**63))


def _run_combos(X, combos, level, B, seed, smoothed, wilcoxon_mode) -> np.ndarray:
    return np.array(
        [
            reject_set(apply_combo(X, combo, level, B, seed, smoothed, wilcoxon_mode))
            for combo in combos
        ]
    )


def _scenario_worker(args) -> np.ndarray:
    bank, cfg, combos, scenario, level, B, rep_index, smoothed, wilcoxon_mode = args
    simulate = simulate_null_family if scenario == "null" else simulate_alt_family
    X = simulate(bank, cfg, rep_index, cfg.seed)
    seed = _permutation_seed(cfg.seed, rep_index)
    return _run_combos(X, combos, level, B, seed, smoothed, wilcoxon_mode)


def _subsample_worker(args) -> np.ndarray:
    full, size, iteration, combos, level, B, seed, smoothed, wilcoxon_mode = args
    rng = derive_rng(seed, size, iteration, 0)
    topics = np.sort(rng.choice(full.n, size=size, replace=False))
    X = full.subset(topics)
    rtukey_seed = _permutation_seed(seed, size, iteration)
    return _run_combos(X, combos, level, B, rtukey_seed, smoothed, wilcoxon_mode)


def _map(worker, packed_args: list, threads: int, desc: str, quiet: bool) -> List[np.ndarray]:
    """Results in argument order, whatever the worker count."""
    if threads > 1 and len(packed_args) > 1:
        chunksize = max(1, len(packed_args) // (threads * 8))
        with multiprocessing.Pool(processes=threads) as pool:
            return list(
                tqdm(
                    pool.imap(worker, packed_args, chunksize=chunksize),
                    total=len(packed_args),
                    desc=desc,
                    disable=quiet,
                )
            )
    return [worker(args) for args in tqdm(packed_args, desc=desc, disable=quiet)]


def _check_run_args(combos, level, B, threads):
    if not combos:
        raise ValidationError("at least one test is required")
    check_level(level)
    if B < 1:
        raise ValidationError(f"B must be positive, got {B}")
    if threads < 1:
        raise ValidationError(f"threads must be positive, got {threads}")


def run_scenario(
    bank: RegressorBank,
    cfg: SimConfig,
    tests: Sequence[Combo],
    scenario: str = "null",
    level: float = DEFAULT_ALPHA,
    B: int = DEFAULT_PERMUTATIONS,
    threads: int = 1,
    rep_offset: int = 0,
    smoothed: bool = False,
    wilcoxon_mode: str = "auto",
    quiet: bool = False,
) -> ExperimentReport:
    """Simulate ``cfg.reps`` families and tally each test's rejections.

    ``null`` systems all share the bank's regressors and report the FWER;
    ``alt`` systems are perturbed by ``cfg.props`` so every pair differs, and
    report complete, average and minimal power. Repetitions
    ``rep_offset .. rep_offset + reps - 1`` are run, so disjoint offsets can be
    merged with ``merge_reports``.
    """
    if scenario not in SCENARIOS:
        raise ValidationError(f"scenario must be one of {SCENARIOS}, got {scenario!r}")
    combos = list(tests)
    _check_run_args(combos, level, B, threads)
    if rep_offset < 0:
        raise ValidationError(f"rep_offset must be non-negative, got {rep_offset}")
    if cfg.n > len(bank.regressors):
        raise ValidationError(
            f"bank {bank.run_tag} has {len(bank.regressors)} topics, {cfg.n} requested"
        )
    if scenario == "alt" and any(b <= a for a, b in zip(cfg.props, cfg.props[1:])):
        raise ValidationError(f"props must be strictly increasing, got {list(cfg.props)}")

    start = time.perf_counter()
    packed_args = [
        (bank, cfg, combos, scenario, level, B, rep, smoothed, wilcoxon_mode)
        for rep in range(rep_offset, rep_offset + cfg.reps)
    ]
    # reps x combos x pairs
    rejections = np.array(
        _map(_scenario_worker, packed_args, threads, f"{scenario} {bank.run_tag}", quiet)
    )

    rate_kinds = ("fwer",) if scenario == "null" else ("complete_power", "average_power", "minimal_power")
    rows = []
    for c, combo in enumerate(combos):
        for rate_kind in rate_kinds:
            count, total = RATE_COUNTERS[rate_kind](rejections[:, c, :])
            rows.append(
                ReportRow(
                    scenario=scenario,
                    test=combo.test,
                    adjustment=combo.adjustment,
                    m=cfg.m,
                    n=cfg.n,
                    reps=cfg.reps,
                    metric=cfg.metric.kind,
                    rate_kind=rate_kind,
                    count=count,
                    total=total,
                )
            )
    elapsed = time.perf_counter() - start
    info(f"{scenario} scenario on {bank.run_tag}: {cfg.reps} reps in {elapsed:.1f}s", quiet)

    config = {
        "scenario": scenario,
        "bank": bank.run_tag,
        "m": cfg.m,
        "n": cfg.n,
        "reps": cfg.reps,
        "rep_offset": rep_offset,
        "props": [float(p) for p in cfg.props],
        "rank_size": cfg.rank_size,
        "metric": cfg.metric.kind,
        "seed": cfg.seed,
        "level": level,
        "B": B,
        "smoothed": smoothed,
        "tests": [combo.label for combo in combos],
    }
    return ExperimentReport(rows=rows, config=config, elapsed=elapsed)


def subsample_power_experiment(
    full: ScoreMatrix,
    sizes: Sequence[int],
    iters: int,
    tests: Sequence[Combo],
    seed: int,
    gamma: float = DEFAULT_GAMMA,
    level: float = DEFAULT_ALPHA,
    B: int = DEFAULT_PERMUTATIONS,
    threads: int = 1,
    smoothed: bool = False,
    wilcoxon_mode: str = "auto",
    metric: str = "ap",
    quiet: bool = False,
) -> ExperimentReport:
    """Power of each test on random topic subsets, judged against the full-set truth."""
    combos = list(tests)
    _check_run_args(combos, level, B, threads)
    if iters < 1:
        raise ValidationError(f"iters must be positive, got {iters}")
    sizes = list(sizes)
    if not sizes:
        raise ValidationError("at least one subset size is required")
    for size in sizes:
        if not 2 <= size <= full.n:
            raise ValidationError(f"subset size {size} must lie in [2, {full.n}]")
    truth = ground_truth_pairs(full, gamma)
    if truth.different_count == 0:
        raise ValidationError(f"no system pair differs by more than gamma={gamma}")
    info(f"{truth.different_count} of {len(truth.pairs)} pairs are different", quiet)

    start = time.perf_counter()
    rows = []
    for size in sizes:
        packed_args = [
            (full, size, it, combos, level, B, seed, smoothed, wilcoxon_mode)
            for it in range(iters)
        ]
        rejections = np.array(_map(_subsample_worker, packed_args, threads, f"n={size}", quiet))
        for c, combo in enumerate(combos):
            different = rejections[:, c, truth.different]
            for rate_kind in ("complete_power", "average_power", "minimal_power"):
                count, total = RATE_COUNTERS[rate_kind](different)
                rows.append(
                    ReportRow(
                        scenario="subsample",
                        test=combo.test,
                        adjustment=combo.adjustment,
                        m=full.m,
                        n=size,
                        reps=iters,
                        metric=metric,
                        rate_kind=rate_kind,
                        count=count,
                        total=total,
                    )
                )
    elapsed = time.perf_counter() - start
    info(f"subsampling over {len(sizes)} sizes in {elapsed:.1f}s", quiet)

    config = {
        "scenario": "subsample",
        "m": full.m,
        "topics": full.n,
        "sizes": sizes,
        "reps": iters,
        "gamma": gamma,
        "different_pairs": truth.different_count,
        "metric": metric,
        "seed": seed,
        "level": level,
        "B": B,
        "smoothed": smoothed,
        "tests": [combo.label for combo in combos],
    }
    return ExperimentReport(rows=rows, config=config, elapsed=elapsed)
