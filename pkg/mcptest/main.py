import json
import sys
import traceback
from argparse import ArgumentParser
from typing import Dict, List, Optional

import compress_json

from mcptest.constants import (
    DEBUGGING,
    DEFAULT_ALPHA,
    DEFAULT_DEPTH,
    DEFAULT_GAMMA,
    DEFAULT_PERMUTATIONS,
    DEFAULT_REPS,
    DEFAULT_SEED,
    DEFAULT_THREADS,
)
from mcptest.evaluation.adjust import ADJUSTMENTS
from mcptest.evaluation.harness import (
    SCENARIOS,
    TESTS,
    Combo,
    apply_combo,
    ground_truth_pairs,
    merge_reports,
    parse_combos,
    run_scenario,
    stack_reports,
    subsample_power_experiment,
)
from mcptest.evaluation.metrics import DENOMINATOR_POLICIES, METRIC_KINDS, MetricSpec, build_score_matrix
from mcptest.evaluation.sigtests import WILCOXON_MODES, family_to_csv, family_to_json
from mcptest.evaluation.simkit import (
    RegressorFitter,
    SimConfig,
    read_bank,
    synthetic_bank,
    write_bank,
)
from mcptest.evaluation.trec_io import (
    read_qrels_file,
    read_run_file,
    read_score_matrix_file,
    write_score_matrix,
)
from mcptest.evaluation.utils import (
    TrecParseError,
    ValidationError,
    error,
    info,
)

DEFAULT_TESTS = (
    "t,t+bonferroni,t+holm,t+bh,t+by,"
    "wilcoxon,wilcoxon+bonferroni,wilcoxon+holm,wilcoxon+bh,wilcoxon+by,"
    "anova,rtukey"
)


class UsageError(Exception):
    pass


class CliParser(ArgumentParser):
    """ArgumentParser that reports usage errors with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        error(f"{self.prog}: {message}")
        raise UsageError(message)


def str2bool(v: str):
    v = v.lower().strip()
    if v in ("yes", "true", "t", "y", "1"):
        return True
    elif v in ("no", "false", "f", "n", "0"):
        return False
    else:
        raise ValueError(f"{v} cannot be converted to a bool")


def int_list(v: str) -> List[int]:
    return [int(x) for x in v.split(",") if x.strip()]


def float_list(v: str) -> List[float]:
    return [float(x) for x in v.split(",") if x.strip()]


def read_config(path: str) -> Dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    config = {}
    with open(path, "r") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}, line {line_no}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            config[key.replace("-", "_")] = value
    return config


def apply_config(parser: ArgumentParser, config: Dict[str, str]):
    """Turn config entries into parser defaults so explicit flags still win."""
    actions = {action.dest: action for action in parser._actions}
    defaults = {}
    for key, value in config.items():
        action = actions.get(key)
        if action is None or key in ("help", "config"):
            raise ValidationError(f"unknown config key {key!r} for {parser.prog}")
        if action.nargs == 0:
            defaults[key] = str2bool(value)
        elif action.type in (int_list, float_list):
            defaults[key] = action.type(value)
        elif isinstance(action.default, list) or action.nargs in ("+", "*"):
            convert = action.type or str
            defaults[key] = [convert(item.strip()) for item in value.split(",") if item.strip()]
        else:
            convert = action.type or str
            try:
                defaults[key] = convert(value)
            except ValueError as e:
                raise ValidationError(f"config key {key!r}: {e}")
            if action.choices is not None and defaults[key] not in action.choices:
                raise ValidationError(
                    f"config key {key!r} must be one of {list(action.choices)}, got {value!r}"
                )
    parser.set_defaults(**defaults)


def emit(text: str, out: str):
    if out == "-":
        sys.stdout.write(text)
        sys.stdout.flush()
    else:
        with open(out, "w", newline="") as f:
            f.write(text)


def emit_json(obj: dict, out: str):
    if out == "-":
        sys.stdout.write(json.dumps(obj, indent=4) + "\n")
        sys.stdout.flush()
    else:
        compress_json.dump(obj, out, json_kwargs=dict(indent=4))


def score_command(args):
    spec = MetricSpec(kind=args.metric, depth=args.depth, denominator_policy=args.denominator)
    qrels = read_qrels_file(args.qrels)
    runs = [read_run_file(path, args.depth) for path in args.run]
    matrix = build_score_matrix(runs, qrels, spec)
    info(f"Scored {matrix.m} runs on {matrix.n} topics with {spec.kind}.", args.quiet)
    if args.format == "json":
        emit_json(
            {
                "metric": spec.kind,
                "topics": list(matrix.topics),
                "systems": list(matrix.systems),
                "values": matrix.values.tolist(),
            },
            args.out,
        )
    else:
        emit(write_score_matrix(matrix), args.out)


def fit_command(args):
    qrels = read_qrels_file(args.qrels)
    run = read_run_file(args.run, args.depth)
    bank = RegressorFitter().fit_bank(run, qrels, args.depth, args.quiet)
    info(f"Fitted {len(bank.regressors)} topic regressors for {bank.run_tag}.", args.quiet)
    if args.format == "json":
        emit_json(
            {
                "run_tag": bank.run_tag,
                "rank_size": bank.rank_size,
                "regressors": {
                    topic: [reg.theta0, reg.theta1] for topic, reg in bank.regressors.items()
                },
            },
            args.out,
        )
    else:
        emit(write_bank(bank), args.out)


def simulate_command(args):
    combos = parse_combos(args.tests)
    ms, ns = args.m, args.n
    if not ms or not ns:
        raise ValidationError("--m and --n need at least one value each")
    if args.bank:
        banks = []
        for path in args.bank:
            with open(path, "r") as f:
                banks.append(read_bank(f.read()))
    else:
        banks = [
            synthetic_bank(
                n_topics=max(args.synthetic_topics, *ns),
                seed=args.seed,
                rank_size=args.rank_size or SimConfig().rank_size,
            )
        ]
    metric = MetricSpec(kind=args.metric, depth=args.depth)
    for bank in banks:
        if max(ns) > len(bank.regressors):
            raise ValidationError(
                f"bank {bank.run_tag} has {len(bank.regressors)} topics, {max(ns)} requested"
            )

    cells = []
    for m in ms:
        for n in ns:
            reports = []
            for bank in banks:
                kwargs = dict(
                    m=m,
                    n=n,
                    reps=args.reps,
                    rank_size=args.rank_size or bank.rank_size,
                    metric=metric,
                    seed=args.seed,
                )
                if args.props is not None:
                    # one list serves every m of the grid
                    kwargs["props"] = args.props[: m - 1]
                reports.append(
                    run_scenario(
                        bank,
                        SimConfig(**kwargs),
                        combos,
                        scenario=args.scenario,
                        level=args.alpha,
                        B=args.permutations,
                        threads=args.threads,
                        rep_offset=args.rep_offset,
                        smoothed=args.smoothed,
                        wilcoxon_mode=args.wilcoxon_mode,
                        quiet=args.quiet,
                    )
                )
            cells.append(merge_reports(*reports))
    report = stack_reports(*cells)
    info(f"Simulation finished in {report.elapsed:.1f}s.", args.quiet)
    if args.format == "json":
        emit_json(report.to_json(), args.out)
    else:
        emit(report.to_csv(), args.out)


def test_command(args):
    combo = Combo(test=args.test, adjustment=args.adjust)
    matrix = read_score_matrix_file(args.matrix)
    adjusted = apply_combo(
        matrix,
        combo,
        level=args.alpha,
        B=args.permutations,
        seed=args.seed,
        smoothed=args.smoothed,
        wilcoxon_mode=args.wilcoxon_mode,
    )
    rejected = int((adjusted.adjusted_p <= args.alpha).sum())
    info(
        f"{combo.label}: {rejected} of {adjusted.base.k} pairs rejected at {args.alpha}.",
        args.quiet,
    )
    if args.format == "json":
        payload = family_to_json(adjusted.base, adjusted.adjusted_p)
        payload["adjustment"] = adjusted.method
        payload["level"] = adjusted.level
        for row, raw_p, adjusted_p in zip(
            payload["pairs"], adjusted.base.raw_p, adjusted.adjusted_p
        ):
            row["raw_p"] = float(raw_p)
            row["rejected"] = bool(adjusted_p <= adjusted.level)
        emit_json(payload, args.out)
    else:
        emit(family_to_csv(adjusted.base, adjusted.adjusted_p), args.out)


def subsample_command(args):
    combos = parse_combos(args.tests)
    matrix = read_score_matrix_file(args.matrix)
    report = subsample_power_experiment(
        matrix,
        sizes=args.sizes,
        iters=args.iters,
        tests=combos,
        seed=args.seed,
        gamma=args.gamma,
        level=args.alpha,
        B=args.permutations,
        threads=args.threads,
        smoothed=args.smoothed,
        wilcoxon_mode=args.wilcoxon_mode,
        metric=args.metric,
        quiet=args.quiet,
    )
    if args.format == "json":
        emit_json(report.to_json(), args.out)
    else:
        emit(report.to_csv(), args.out)


def truth_command(args):
    matrix = read_score_matrix_file(args.matrix)
    mask = ground_truth_pairs(matrix, args.gamma)
    info(
        f"{mask.different_count} of {len(mask.pairs)} pairs differ by more than {args.gamma}.",
        args.quiet,
    )
    if args.format == "json":
        emit_json(
            {
                "gamma": mask.gamma,
                "pairs": [
                    {
                        "sys_i": mask.systems[i],
                        "sys_j": mask.systems[j],
                        "mean_diff": float(diff),
                        "label": "different" if different else "undecided",
                    }
                    for (i, j), diff, different in zip(
                        mask.pairs, mask.mean_diffs, mask.different
                    )
                ],
            },
            args.out,
        )
    else:
        emit(mask.to_csv(), args.out)


def add_common(parser: ArgumentParser):
    parser.add_argument("--config", help="Flat 'key = value' file; flags override it.")
    parser.add_argument("--out", default="-", help="Output path, '-' for standard output.")
    parser.add_argument("--format", choices=("csv", "json"), default="csv")
    parser.add_argument("--quiet", action="store_true", help="No progress on standard error.")


def add_testing(parser: ArgumentParser):
    parser.add_argument("--alpha", type=float, default=DEFAULT_ALPHA, help="FWER/FDR level.")
    parser.add_argument(
        "--permutations",
        type=int,
        default=DEFAULT_PERMUTATIONS,
        help="Iterations B of the randomised TukeyHSD.",
    )
    parser.add_argument("--seed", type=int, default=DEFAULT_SEED)
    parser.add_argument(
        "--smoothed",
        action="store_true",
        help="Report (count + 1) / (B + 1) for the randomised TukeyHSD.",
    )
    parser.add_argument("--wilcoxon-mode", choices=WILCOXON_MODES, default="auto")


def build_parser() -> CliParser:
    parser = CliParser(
        prog="mcptest",
        description="Multiple-comparison significance testing for IR evaluation.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    p = subparsers.add_parser("score", help="Runs + qrels -> score-matrix CSV.")
    p.add_argument("--run", nargs="+", help="TREC run files.")
    p.add_argument("--qrels")
    p.add_argument("--metric", choices=METRIC_KINDS, default="ap")
    p.add_argument("--depth", type=int, default=DEFAULT_DEPTH)
    p.add_argument("--denominator", choices=DENOMINATOR_POLICIES, default="qrels_relevant")
    add_common(p)
    p.set_defaults(func=score_command)

    p = subparsers.add_parser("fit", help="One run + qrels -> regressor-bank CSV.")
    p.add_argument("--run")
    p.add_argument("--qrels")
    p.add_argument("--depth", type=int, default=DEFAULT_DEPTH)
    add_common(p)
    p.set_defaults(func=fit_command)

    p = subparsers.add_parser("simulate", help="Bank + scenario -> error/power report.")
    p.add_argument(
        "--bank",
        action="append",
        default=[],
        help="Regressor-bank CSV; repeat to pool banks. A synthetic bank is used if absent.",
    )
    p.add_argument("--scenario", choices=SCENARIOS, default="null")
    p.add_argument("--m", type=int_list, default=[5], help="Systems per family, e.g. 3,5,10.")
    p.add_argument("--n", type=int_list, default=[50], help="Topics per family, e.g. 10,30,50.")
    p.add_argument("--reps", type=int, default=DEFAULT_REPS)
    p.add_argument("--rep-offset", type=int, default=0)
    p.add_argument("--props", type=float_list, default=None, help="e.g. 0.1,0.2")
    p.add_argument("--rank-size", type=int, default=None)
    p.add_argument("--metric", choices=METRIC_KINDS, default="ap")
    p.add_argument("--depth", type=int, default=DEFAULT_DEPTH)
    p.add_argument("--synthetic-topics", type=int, default=50)
    p.add_argument("--tests", nargs="+", default=[DEFAULT_TESTS], help="e.g. t+holm wilcoxon+bh rtukey")
    p.add_argument("--threads", type=int, default=DEFAULT_THREADS)
    add_testing(p)
    add_common(p)
    p.set_defaults(func=simulate_command)

    p = subparsers.add_parser("test", help="Score matrix -> adjusted pairwise p-values.")
    p.add_argument("--matrix")
    p.add_argument("--test", choices=TESTS)
    p.add_argument("--adjust", choices=ADJUSTMENTS, default="none")
    add_testing(p)
    add_common(p)
    p.set_defaults(func=test_command)

    p = subparsers.add_parser("subsample", help="Full matrix -> power over topic subsets.")
    p.add_argument("--matrix")
    p.add_argument("--sizes", type=int_list, help="e.g. 25,50,100")
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--gamma", type=float, default=DEFAULT_GAMMA)
    p.add_argument("--metric", default="ap", help="Label of the matrix's metric in the report.")
    p.add_argument("--tests", nargs="+", default=[DEFAULT_TESTS])
    p.add_argument("--threads", type=int, default=DEFAULT_THREADS)
    add_testing(p)
    add_common(p)
    p.set_defaults(func=subsample_command)

    p = subparsers.add_parser("truth", help="Full matrix -> different/undecided pair mask.")
    p.add_argument("--matrix")
    p.add_argument("--gamma", type=float, default=DEFAULT_GAMMA)
    add_common(p)
    p.set_defaults(func=truth_command)

    parser.subcommands = subparsers.choices
    return parser


# inputs a command cannot run without; they may come from flags or --config
REQUIRED = {
    "score": ("run", "qrels"),
    "fit": ("run", "qrels"),
    "simulate": (),
    "test": ("matrix", "test"),
    "subsample": ("matrix", "sizes"),
    "truth": ("matrix",),
}


def parse_args(argv: Optional[List[str]] = None):
    parser = build_parser()
    args = parser.parse_args(argv)
    subparser = parser.subcommands[args.command]
    if args.config is not None:
        apply_config(subparser, read_config(args.config))
        args = parser.parse_args(argv)
    missing = [name for name in REQUIRED[args.command] if getattr(args, name) in (None, [])]
    if missing:
        subparser.error(
            "the following arguments are required: "
            + ", ".join("--" + name.replace("_", "-") for name in missing)
        )
    return args


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = parse_args(argv)
        args.func(args)
    except UsageError:
        return 1
    except (ValidationError, TrecParseError, ValueError) as e:
        if DEBUGGING:
            traceback.print_exc()
        error(str(e))
        return 1
    except Exception as e:
        # McpError, OSError and anything unexpected are runtime failures
        if DEBUGGING:
            traceback.print_exc()
        error(f"{type(e).__name__}: {e}")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
