"""Relevance-based simulation of retrieval systems.

Each topic of a real run is summarised by a logistic regressor giving the
probability that the document at rank position p is relevant:

    h(p) = 1 / (1 + exp(-theta0 - theta1 * p))

Sampling one Bernoulli draw per position yields a synthetic ranking; scaling
the parameters towards "more relevant" yields a known-better system.
"""

import math
from typing import Dict, List, Optional, Sequence, TextIO

import numpy as np
from attrs import Factory, define, field
from scipy import special
from tqdm import tqdm

from mcptest.constants import (
    DEFAULT_RANK_SIZE,
    DEFAULT_REPS,
    DEFAULT_SEED,
    FIT_GRAD_TOL,
    FIT_L2_PENALTY,
    FIT_MAX_ITER,
    SYNTHETIC_THETA0_RANGE,
    SYNTHETIC_THETA1_RANGE,
)
from mcptest.evaluation.metrics import MetricSpec, score_ranking
from mcptest.evaluation.trec_io import Qrels, RunSet, ScoreMatrix, relevance_vector
from mcptest.evaluation.utils import (
    ConvergenceError,
    ValidationError,
    derive_rng,
    format_float,
    warn,
)

# stream name prefixes under (seed, rep_index, ...)
TOPIC_STREAM = 0
SAMPLE_STREAM = 1


def _finite(instance, attribute, value):
    if not math.isfinite(value):
        raise ValidationError(f"{attribute.name} must be finite, got {value}")


@define(frozen=True)
class TopicRegressor:
    theta0: float = field(converter=float, validator=_finite)
    theta1: float = field(converter=float, validator=_finite)


@define(frozen=True)
class RegressorBank:
    regressors: Dict[str, TopicRegressor]
    run_tag: str = "synthetic"
    rank_size: int = DEFAULT_RANK_SIZE

    def __attrs_post_init__(self):
        if len(self.regressors) < 1:
            raise ValidationError("a regressor bank needs at least one topic")
        if self.rank_size < 1:
            raise ValidationError(f"rank_size must be positive, got {self.rank_size}")

    @property
    def topics(self) -> List[str]:
        return list(self.regressors.keys())


def _default_props(self) -> tuple:
    return tuple(round(0.1 * i, 10) for i in range(1, self.m))


@define(frozen=True)
class SimConfig:
    m: int = 5
    n: int = 50
    reps: int = DEFAULT_REPS
    props: tuple = field(default=Factory(_default_props, takes_self=True), converter=tuple)
    rank_size: int = DEFAULT_RANK_SIZE
    metric: MetricSpec = Factory(MetricSpec)
    seed: int = DEFAULT_SEED

    def __attrs_post_init__(self):
        if self.m < 2:
            raise ValidationError(f"m must be at least 2, got {self.m}")
        if self.n < 1:
            raise ValidationError(f"n must be positive, got {self.n}")
        if self.reps < 1:
            raise ValidationError(f"reps must be positive, got {self.reps}")
        if self.rank_size < 1:
            raise ValidationError(f"rank_size must be positive, got {self.rank_size}")
        if len(self.props) != self.m - 1:
            raise ValidationError(
                f"expected {self.m - 1} props for {self.m} systems, got {len(self.props)}"
            )
        if any(not prop > 0 for prop in self.props):
            raise ValidationError(f"props must all be positive, got {list(self.props)}")


def relevance_probability(reg: TopicRegressor, position):
    """h(position); ``expit`` keeps it overflow-free for any finite argument."""
    position = np.asarray(position, dtype=np.float64)
    if np.any(position < 1):
        raise ValidationError("positions start at 1")
    value = special.expit(reg.theta0 + reg.theta1 * position)
    if value.ndim == 0:
        return float(value)
    return value


class RegressorFitter:
    """L2-penalised maximum likelihood fit of h over positions 1..len(r)."""

    def __init__(
        self,
        l2_penalty=FIT_L2_PENALTY,
        grad_tol=FIT_GRAD_TOL,
        max_iter=FIT_MAX_ITER,
    ):
        self.l2_penalty = l2_penalty
        self.grad_tol = grad_tol
        self.max_iter = max_iter
        self.backtracking_alpha = 0.5
        self.armijo_c = 1e-4
        self.min_step = 1e-12
        # relative Newton decrement below which objective changes are round-off
        self.decrement_tol = 1e-12

    def objective(self, theta, design, r) -> float:
        # negative penalised log-likelihood
        z = design @ theta
        loglik = np.sum(r * special.log_expit(z) + (1 - r) * special.log_expit(-z))
        return float(-loglik + self.l2_penalty * np.dot(theta, theta))

    def gradient_hessian(self, theta, design, r):
        h = special.expit(design @ theta)
        gradient = design.T @ (h - r) + 2 * self.l2_penalty * theta
        weights = h * (1 - h)
        hessian = (design.T * weights) @ design + 2 * self.l2_penalty * np.eye(2)
        return gradient, hessian

    def _stalled(self, slope: float, f: float) -> bool:
        # Newton decrement at float round-off of the objective
        return -slope / 2 <= self.decrement_tol * max(1.0, abs(f))

    def fit(self, r) -> TopicRegressor:
        r = np.asarray(r, dtype=np.float64)
        if r.ndim != 1 or r.size < 2:
            raise ValidationError("fitting needs a ranking of at least 2 positions")
        if np.any((r != 0) & (r != 1)):
            raise ValidationError("ranking entries must be 0 or 1")
        positions = np.arange(1, r.size + 1, dtype=np.float64)
        design = np.column_stack([np.ones_like(positions), positions])

        theta = np.zeros(2)
        f = self.objective(theta, design, r)
        for _ in range(self.max_iter):
            gradient, hessian = self.gradient_hessian(theta, design, r)
            if np.linalg.norm(gradient) <= self.grad_tol:
                return TopicRegressor(theta0=theta[0], theta1=theta[1])
            direction = np.linalg.solve(hessian, -gradient)
            slope = float(gradient @ direction)

            # backtracking line search
            t = 1.0
            while t > self.min_step:
                candidate = theta + t * direction
                f_candidate = self.objective(candidate, design, r)
                if f_candidate <= f + self.armijo_c * t * slope:
                    break
                t *= self.backtracking_alpha
            else:
                if not self._stalled(slope, f):
                    raise ConvergenceError("line search failed", last_iterate=theta.copy())
                # improvement is below round-off of f; take the full Newton step
                candidate = theta + direction
                f_candidate = self.objective(candidate, design, r)
            theta, f = candidate, f_candidate

        gradient, hessian = self.gradient_hessian(theta, design, r)
        slope = float(gradient @ np.linalg.solve(hessian, -gradient))
        if np.linalg.norm(gradient) <= self.grad_tol or self._stalled(slope, f):
            return TopicRegressor(theta0=theta[0], theta1=theta[1])
        raise ConvergenceError(
            f"no convergence after {self.max_iter} iterations "
            f"(gradient norm {np.linalg.norm(gradient):.3e})",
            last_iterate=theta.copy(),
        )

    def fit_bank(
        self,
        run: RunSet,
        qrels: Qrels,
        depth: Optional[int] = None,
        quiet: bool = False,
    ) -> RegressorBank:
        """One regressor per topic of ``run``; topics with fewer than 2 documents are skipped."""
        regressors = {}
        longest = 0
        for topic in tqdm(run.topics, desc=f"fit {run.system_tag}", disable=quiet):
            size = len(run.rankings[topic]) if depth is None else depth
            r = relevance_vector(run, topic, qrels, size)
            if r.size < 2:
                warn(f"topic {topic} has {r.size} document(s), skipped", quiet)
                continue
            regressors[topic] = self.fit(r)
            longest = max(longest, r.size)
        if not regressors:
            raise ValidationError(f"run {run.system_tag} has no topic with 2+ documents")
        return RegressorBank(regressors=regressors, run_tag=run.system_tag, rank_size=longest)


def fit_regressor(r) -> TopicRegressor:
    return RegressorFitter().fit(r)


def sample_ranking(
    reg: TopicRegressor, rank_size: int, rng: np.random.Generator
) -> np.ndarray:
    """One independent Bernoulli(h(p)) draw per position p = 1..rank_size."""
    if rank_size < 1:
        raise ValidationError(f"rank_size must be positive, got {rank_size}")
    probs = relevance_probability(reg, np.arange(1, rank_size + 1))
    return (rng.random(rank_size) < probs).astype(np.int8)


def _scale(theta: float, prop: float) -> float:
    if theta > 0:
        return theta * (1 + prop)
    if theta < 0:
        return theta * (1 / (1 + prop))
    return 0.0


def perturb(reg: TopicRegressor, prop: float) -> TopicRegressor:
    """A regressor whose h is pointwise >= the original for every position >= 1."""
    if not prop > 0:
        raise ValidationError(f"prop must be positive, got {prop}")
    return TopicRegressor(theta0=_scale(reg.theta0, prop), theta1=_scale(reg.theta1, prop))


def _select_topics(bank: RegressorBank, n: int, rep_index: int, master_seed: int):
    if n > len(bank.regressors):
        raise ValidationError(
            f"bank {bank.run_tag} has {len(bank.regressors)} topics, {n} requested"
        )
    rng = derive_rng(master_seed, rep_index, TOPIC_STREAM)
    return np.sort(rng.choice(len(bank.regressors), size=n, replace=False))


def _simulate(bank, cfg: SimConfig, rep_index, master_seed, system_regressor) -> ScoreMatrix:
    topics = bank.topics
    selected = _select_topics(bank, cfg.n, rep_index, master_seed)
    values = np.zeros((cfg.n, cfg.m))
    for row, topic_idx in enumerate(selected):
        base = bank.regressors[topics[topic_idx]]
        for system in range(cfg.m):
            rng = derive_rng(master_seed, rep_index, SAMPLE_STREAM, topic_idx, system)
            ranking = sample_ranking(system_regressor(base, system), cfg.rank_size, rng)
            values[row, system] = score_ranking(ranking, cfg.metric)
    return ScoreMatrix(
        topics=[topics[i] for i in selected],
        systems=[f"sim{s + 1}" for s in range(cfg.m)],
        values=values,
    )


def simulate_null_family(
    bank: RegressorBank, cfg: SimConfig, rep_index: int, master_seed: int
) -> ScoreMatrix:
    """n x m matrix where every system samples the unmodified regressors."""
    return _simulate(bank, cfg, rep_index, master_seed, lambda reg, system: reg)


def simulate_alt_family(
    bank: RegressorBank, cfg: SimConfig, rep_index: int, master_seed: int
) -> ScoreMatrix:
    """System 1 is unmodified, system 1+i samples perturb(reg, props[i-1])."""
    props = list(cfg.props)
    if any(b <= a for a, b in zip(props, props[1:])):
        raise ValidationError(f"props must be strictly increasing, got {props}")

    def system_regressor(reg, system):
        if system == 0:
            return reg
        return perturb(reg, props[system - 1])

    return _simulate(bank, cfg, rep_index, master_seed, system_regressor)


def synthetic_bank(
    n_topics: int = 50,
    seed: int = DEFAULT_SEED,
    theta0_range: Sequence[float] = SYNTHETIC_THETA0_RANGE,
    theta1_range: Sequence[float] = SYNTHETIC_THETA1_RANGE,
    rank_size: int = DEFAULT_RANK_SIZE,
) -> RegressorBank:
    """A bank with uniformly drawn parameters, standing in for a fitted run."""
    rng = derive_rng(seed)
    theta0 = rng.uniform(*theta0_range, size=n_topics)
    theta1 = rng.uniform(*theta1_range, size=n_topics)
    regressors = {
        f"T{i + 1:03d}": TopicRegressor(theta0=a, theta1=b)
        for i, (a, b) in enumerate(zip(theta0, theta1))
    }
    return RegressorBank(regressors=regressors, run_tag=f"synthetic-{seed}", rank_size=rank_size)


def write_bank(bank: RegressorBank, stream: Optional[TextIO] = None) -> str:
    lines = [f"# run_tag={bank.run_tag} rank_size={bank.rank_size}", "topic,theta0,theta1"]
    for topic, reg in bank.regressors.items():
        lines.append(f"{topic},{format_float(reg.theta0)},{format_float(reg.theta1)}")
    text = "".join(line + "\n" for line in lines)
    if stream is not None:
        stream.write(text)
    return text


def read_bank(text: str) -> RegressorBank:
    lines = [line.strip() for line in text.splitlines() if line.strip()]
    if len(lines) < 2 or not lines[0].startswith("#"):
        raise ValidationError("bank CSV must start with a '# run_tag=... rank_size=...' line")
    meta = dict(item.split("=", 1) for item in lines[0][1:].split() if "=" in item)
    if "run_tag" not in meta or "rank_size" not in meta:
        raise ValidationError(f"bank header misses run_tag or rank_size: {lines[0]!r}")
    if lines[1] != "topic,theta0,theta1":
        raise ValidationError(f"unexpected bank columns: {lines[1]!r}")
    regressors = {}
    for line_no, line in enumerate(lines[2:], start=3):
        cells = line.split(",")
        if len(cells) != 3:
            raise ValidationError(f"line {line_no}: expected 3 cells, found {len(cells)}")
        topic, theta0, theta1 = cells
        if topic in regressors:
            raise ValidationError(f"line {line_no}: duplicate topic {topic}")
        try:
            regressors[topic] = TopicRegressor(theta0=float(theta0), theta1=float(theta1))
        except ValueError as e:
            raise ValidationError(f"line {line_no}: {e}")
    try:
        rank_size = int(meta["rank_size"])
    except ValueError:
        raise ValidationError(f"bank rank_size is not an integer: {meta['rank_size']!r}")
    return RegressorBank(regressors=regressors, run_tag=meta["run_tag"], rank_size=rank_size)
