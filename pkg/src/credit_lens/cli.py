"""Command-line interface: ``credit-lens {analyze,check,sweep,sample}``.

Exit codes: 0 success, 1 a binding proposition verdict is discrepant, 2 invalid
input (bad flags, unreadable or malformed files, unknown measures), 3 the
enumeration budget was refused.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import shortest_path

from .credit import (
    MEASURES,
    check_propositions,
    credit_reports,
    epsilon_sparsity_classify,
    information_sparsity,
    reports_to_csv,
    reports_to_json,
    verdicts_to_json,
    _verdict,
)
from .engine import BudgetExceededError, categorical_return_dp, default_budget, enumerate_trajectories, value_functions
from .engine import DEFAULT_ATOMS
from .info import to_bits
from .mdp import (
    ConstantOffset,
    InvalidMdpError,
    MdpSchemaError,
    NegatedDistance,
    PotentialBased,
    TabularPolicy,
    apply_shaping,
    chain_metric,
    check_policy,
    grid_index,
    load_mdp,
    make_bandit,
    make_chain,
    make_gridworld,
    manhattan_metric,
    random_mdp,
)
from .sampling import PLUGIN_MEASURES, convergence_sweep

log = logging.getLogger("credit_lens")

EXIT_OK, EXIT_DISCREPANT, EXIT_INVALID, EXIT_BUDGET = 0, 1, 2, 3
DEFAULT_N_GRID = (100, 1000, 10_000, 100_000)


class UsageError(ValueError):
    """Invalid command-line configuration."""


@dataclass
class Problem:
    """A loaded or generated MDP plus what the generator knows about its geometry."""

    mdp: object
    policy: TabularPolicy | None = None
    goal: int | None = None
    metric: np.ndarray | None = field(default=None, repr=False)


# -- generator specs ----------------------------------------------------------


def _parse_options(text: str) -> tuple[str, list[str], dict[str, str]]:
    kind, _, rest = text.partition(":")
    positional, options = [], {}
    for part in filter(None, rest.split(",")):
        if "=" in part:
            k, v = part.split("=", 1)
            options[k.strip()] = v.strip()
        else:
            positional.append(part.strip())
    return kind.strip(), positional, options


def _number(options: dict, key: str, default, cast=float):
    if key not in options:
        return default
    try:
        return cast(options.pop(key))
    except ValueError:
        raise UsageError(f"generator option {key}= expects a {cast.__name__}") from None


def parse_generator(spec: str) -> Problem:
    """Build an MDP from a mini-spec such as ``chain:4,h=3``,
    ``grid:5x5,goal=4_4,slip=0.1``, ``bandit:0_1`` or ``random:seed=3``."""
    kind, pos, opts = _parse_options(spec)
    gamma = _number(opts, "gamma", 1.0)
    if kind == "chain":
        if len(pos) != 1:
            raise UsageError("chain spec needs a length, e.g. chain:4,h=3")
        n = int(pos[0])
        h = _number(opts, "h", n, int)
        reward = _number(opts, "reward", 1.0)
        prob = Problem(make_chain(n, h, reward, gamma), goal=n - 1, metric=chain_metric(n))
    elif kind == "grid":
        if len(pos) != 1 or "x" not in pos[0]:
            raise UsageError("grid spec needs WIDTHxHEIGHT, e.g. grid:5x5,goal=4_4")
        w, hgt = (int(x) for x in pos[0].split("x"))
        goal_text = opts.pop("goal", f"{hgt - 1}_{w - 1}")
        try:
            goal = tuple(int(x) for x in goal_text.split("_"))
        except ValueError:
            raise UsageError(f"goal must be ROW_COL, got {goal_text!r}") from None
        if len(goal) != 2:
            raise UsageError(f"goal must be ROW_COL, got {goal_text!r}")
        m = make_gridworld(w, hgt, goal, _number(opts, "h", 8, int), gamma, _number(opts, "slip", 0.0))
        prob = Problem(m, goal=grid_index(goal, w), metric=manhattan_metric(w, hgt))
    elif kind == "bandit":
        rewards = [float(x) for x in pos[0].split("_")] if pos else [0.0, 1.0]
        prob = Problem(make_bandit(rewards, gamma))
    elif kind == "random":
        rng = np.random.default_rng(_number(opts, "seed", 0, int))
        prob = Problem(random_mdp(rng))
    else:
        raise UsageError(f"unknown generator {kind!r}; choose from chain, grid, bandit, random")
    if opts:
        raise UsageError(f"unknown generator option(s) for {kind}: {', '.join(sorted(opts))}")
    return prob


def load_problem(args) -> Problem:
    if args.mdp is not None:
        m, embedded = load_mdp(args.mdp)
        return Problem(m, embedded)
    return parse_generator(args.gen)


def _load_policy(spec: str, m) -> TabularPolicy:
    if spec == "uniform":
        return check_policy("uniform", m)
    doc = json.loads(Path(spec).read_text(encoding="utf-8"))
    if isinstance(doc, dict):
        if "policy" not in doc:
            raise MdpSchemaError("policy", f"{spec} has no policy field")
        doc = doc["policy"]
    return check_policy(np.asarray(doc, dtype=float), m)


def resolve_policies(args, prob: Problem) -> list[TabularPolicy]:
    if args.policy:
        return [_load_policy(p, prob.mdp) for p in args.policy]
    if prob.policy is not None:
        return [prob.policy]
    return [check_policy("uniform", prob.mdp)]


def parse_measures(text: str | None, valid=MEASURES) -> list[str]:
    if text is None or text == "all":
        return list(valid)
    names = [x.strip().replace("-", "_") for x in text.split(",") if x.strip()]
    aliases = {"information_sparsity": "info_sparsity"}
    names = [aliases.get(x, x) for x in names]
    unknown = [x for x in names if x not in valid]
    if unknown or not names:
        raise UsageError(f"unknown measure {', '.join(unknown) or '(none)'}; valid measures: {', '.join(valid)}")
    return names


def _hop_metric(m) -> np.ndarray:
    adj = (m.transition.max(axis=1) > 0).astype(float)
    d = shortest_path(adj, unweighted=True)
    # unreachable pairs get a distance past every reachable one
    finite = d[np.isfinite(d)]
    return np.where(np.isfinite(d), d, (finite.max() if finite.size else 0.0) + 1.0)


def parse_transform(text: str, prob: Problem):
    """``none`` | ``constant:C`` | ``negdist[:GOAL]`` | ``potential:zero`` |
    ``potential:V0_V1_...`` | ``potential:negdist[:GOAL]``."""
    kind, _, arg = text.partition(":")
    m = prob.mdp
    if kind == "none":
        return None
    if kind == "constant":
        try:
            return ConstantOffset(float(arg))
        except ValueError:
            raise UsageError(f"constant transform needs a number, got {arg!r}") from None

    def goal_and_metric(goal_text: str):
        if goal_text:
            goal = int(goal_text)
            metric = prob.metric if prob.metric is not None else _hop_metric(m)
        elif prob.goal is not None:
            goal, metric = prob.goal, prob.metric
        else:
            # no declared goal: measure distance to the best-rewarded state
            goal, metric = int(np.argmax(m.reward.max(axis=1))), _hop_metric(m)
        return goal, metric

    if kind == "negdist":
        return NegatedDistance(*goal_and_metric(arg))
    if kind == "potential":
        if arg == "zero":
            return PotentialBased(np.zeros(m.num_states), text)
        if arg.startswith("negdist"):
            goal, metric = goal_and_metric(arg.partition(":")[2])
            return PotentialBased(-metric[:, goal], text)
        try:
            phi = np.array([float(x) for x in arg.split("_")])
        except ValueError:
            raise UsageError(f"potential values must be numbers separated by '_', got {arg!r}") from None
        return PotentialBased(phi, text)
    raise UsageError(f"unknown transform {text!r}; use none, constant:C, negdist[:GOAL] or potential:...")


# -- output -------------------------------------------------------------------


def write_atomic(path: str | None, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and rename; ``None``
    or ``-`` prints to stdout."""
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    target = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", dir=target.parent if str(target.parent) else ".")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, target)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _fmt(v: float, bits: bool) -> str:
    return f"{to_bits(v) if bits else v:.6f}"


# -- commands -----------------------------------------------------------------


def cmd_analyze(args) -> int:
    prob = load_problem(args)
    policies = resolve_policies(args, prob)
    measures = parse_measures(args.measure)
    t = enumerate_trajectories(prob.mdp, policies[0], args.budget, args.tol)
    reports = credit_reports(t, measures, marginalize_time=args.marginalize_time)
    unit = "bits" if args.bits else "nats"
    summary = []
    if "info_sparsity" in measures:
        v = next(r for r in reports if r.measure == "info_sparsity").scalar()
        summary.append(f"information_sparsity={_fmt(v, args.bits)} {unit}")
    if args.epsilon is not None:
        sparse, sup, best = epsilon_sparsity_classify(
            prob.mdp, policies, args.epsilon, budget=args.budget, marginalize_time=args.marginalize_time
        )
        summary.append(f"is_sparse={str(sparse).lower()} sup={_fmt(sup, args.bits)}")
    text = reports_to_json(reports, bits=args.bits) if args.format == "json" else reports_to_csv(reports)
    for line in summary:
        print(line)
    write_atomic(args.out, text)
    return EXIT_OK


def _categorical_verdicts(m, policy, atoms: int, tol: float) -> list:
    """Means of the fixed-grid recursion against Bellman Q, to half a grid spacing."""
    cat = categorical_return_dp(m, policy, atoms)
    _, q = value_functions(m, policy)
    spacing = cat.spacing
    gap = float(np.max(np.abs(cat.mean() - q)))
    return [_verdict(f"categorical_mean[atoms={atoms}]", gap, 0.0, spacing / 2 + tol)]


def cmd_check(args) -> int:
    prob = load_problem(args)
    policies = resolve_policies(args, prob)
    verdicts = []
    for i, pol in enumerate(policies):
        vs = check_propositions(prob.mdp, pol, args.tol, budget=args.budget, seed=args.seed)
        vs += _categorical_verdicts(prob.mdp, pol, args.atoms, args.tol)
        if len(policies) > 1:
            for v in vs:
                v.proposition = f"policy{i}:{v.proposition}"
        verdicts += vs
    write_atomic(args.out, verdicts_to_json(verdicts) + "\n")
    bad = [v for v in verdicts if v.binding and v.verdict == "discrepant"]
    n_binding = sum(v.binding for v in verdicts)
    print(f"binding={n_binding} discrepant={len(bad)} diagnostic={len(verdicts) - n_binding}", file=sys.stderr)
    for v in bad:
        print(f"discrepant: {v.proposition} |lhs-rhs|={v.abs_diff:.3e}", file=sys.stderr)
    return EXIT_DISCREPANT if bad else EXIT_OK


def cmd_sweep(args) -> int:
    prob = load_problem(args)
    policy = resolve_policies(args, prob)[0]
    specs = [x.strip() for x in (args.transforms or "").split(",") if x.strip()]
    if "none" not in specs:
        specs.insert(0, "none")
    rows = []
    for spec in specs:
        tr = parse_transform(spec, prob)
        shaped = prob.mdp if tr is None else apply_shaping(prob.mdp, tr)
        t = enumerate_trajectories(shaped, policy, args.budget, args.tol)
        rows.append((spec, information_sparsity(t, marginalize_time=args.marginalize_time)))
    rows.sort(key=lambda r: r[1])
    unit = "bits" if args.bits else "nats"
    if args.format == "json":
        text = json.dumps(
            {"units": unit, "rows": [{"transform": s, "information_sparsity": to_bits(v) if args.bits else v} for s, v in rows]},
            indent=2,
        ) + "\n"
    else:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["transform", f"information_sparsity_{unit}"])
        for s, v in rows:
            w.writerow([s, f"{to_bits(v) if args.bits else v:.17g}"])
        text = buf.getvalue()
    write_atomic(args.out, text)
    return EXIT_OK


def cmd_sample(args) -> int:
    valid = tuple(x for x in PLUGIN_MEASURES if x != "pairwise_kl")
    measures = parse_measures(args.measure or "info_sparsity", valid)
    prob = load_problem(args)
    policy = resolve_policies(args, prob)[0]
    n_grid = _parse_n_grid(args.n_grid)
    seeds = [args.seed + i for i in range(args.seeds)]
    parts = []
    for name in measures:
        rep = convergence_sweep(prob.mdp, policy, name, n_grid, seeds, merge_tol=args.tol, budget=args.budget)
        parts.append(rep.to_csv() if not parts else rep.to_csv().split("\n", 1)[1])
        log.info("%s monotone=%s", name, rep.monotone())
    write_atomic(args.out, "".join(parts))
    return EXIT_OK


def _parse_n_grid(text: str | None) -> list[int]:
    if not text:
        return list(DEFAULT_N_GRID)
    out = []
    for x in text.split(","):
        try:
            v = float(x)
        except ValueError:
            raise UsageError(f"--n-grid expects numbers, got {x!r}") from None
        if v < 1 or v != int(v):
            raise UsageError(f"--n-grid entries must be positive integers, got {x!r}")
        out.append(int(v))
    return out


# -- argument parsing ---------------------------------------------------------


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0 or math.isinf(v):
        raise argparse.ArgumentTypeError(f"must be a positive finite number, got {text}")
    return v


def _positive_int(text: str) -> int:
    v = float(text)
    if v < 1 or v != int(v):
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return int(v)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_mutually_exclusive_group(required=True)
    src.add_argument("--mdp", metavar="PATH", help="MDP JSON file")
    src.add_argument("--gen", metavar="SPEC", help="generator spec, e.g. chain:4,h=3 or grid:5x5,goal=4_4,slip=0.1")
    common.add_argument("--policy", action="append", metavar="PATH|uniform",
                        help="policy file or 'uniform'; repeat to form a policy set")
    common.add_argument("--measure", metavar="LIST", help="comma-separated measures (default: all)")
    common.add_argument("--tol", type=_positive_float, default=1e-9, help="tolerance and merge tolerance")
    common.add_argument("--budget", type=_positive_int, default=None,
                        help="maximum trajectories to enumerate (default 1e7 or $CREDIT_LENS_BUDGET)")
    common.add_argument("--atoms", type=_positive_int, default=DEFAULT_ATOMS, help="categorical grid size")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", metavar="PATH", help="output file (default: stdout)")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("--bits", action="store_true", help="report in bits instead of nats")
    common.add_argument("--marginalize-time", action="store_true",
                        help="pool return laws over timesteps before comparing")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="credit-lens", description="Information-theoretic credit assignment for tabular MDPs.")
    sub = p.add_subparsers(dest="command", required=True)
    a = sub.add_parser("analyze", parents=[common], help="compute credit measures")
    a.add_argument("--epsilon", type=float, help="classify epsilon-information-sparsity over the policy set")
    a.set_defaults(func=cmd_analyze)
    c = sub.add_parser("check", parents=[common], help="check the information identities")
    c.set_defaults(func=cmd_check)
    s = sub.add_parser("sweep", parents=[common], help="information sparsity under reward shaping transforms")
    s.add_argument("--transforms", default="none,constant:5,negdist", metavar="LIST",
                   help="none, constant:C, negdist[:GOAL], potential:zero|V0_V1_...|negdist")
    s.set_defaults(func=cmd_sweep)
    m = sub.add_parser("sample", parents=[common], help="Monte Carlo convergence against exact values")
    m.add_argument("--n-grid", metavar="LIST", help="sample sizes (default 1e2,1e3,1e4,1e5)")
    m.add_argument("--seeds", type=_positive_int, default=10, help="number of seeds per sample size")
    m.set_defaults(func=cmd_sample)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.budget is None:
        try:
            args.budget = default_budget()
        except ValueError:
            print("error: CREDIT_LENS_BUDGET must be a number", file=sys.stderr)
            return EXIT_INVALID
    try:
        return args.func(args)
    except BudgetExceededError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc.filename}", file=sys.stderr)
        return EXIT_INVALID
    except InvalidMdpError as exc:
        print(f"error: invalid MDP or policy: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (MdpSchemaError, UsageError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
