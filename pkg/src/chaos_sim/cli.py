"""Command-line front end.

    chaos-sim run <scenario> [--strategy S | --compare] [--seed N] [--out DIR]
    chaos-sim solve <input>
    chaos-sim validate <scenario>

Exit codes: 0 success, 1 validation error, 2 engine error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .model import MIB, LinkMetrics, TrainingState, split_state
from .scheduler import (
    EnumerationCapError,
    SchedulerInput,
    binary_search_assign_detailed,
    brute_force_assign,
    even_assign,
    greedy_assign,
)
from .scenario import (
    Scenario,
    ScenarioError,
    metrics_from_bandwidth,
    parse_scenario,
    run_to_files,
)
from .training import Strategy


def _cmd_validate(args: argparse.Namespace) -> int:
    try:
        parse_scenario(Path(args.scenario))
    except ScenarioError as exc:
        for line in exc.errors:
            print(f"error: {line}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print("scenario OK")
    return 0


def _cmd_run(args: argparse.Namespace) -> int:
    try:
        sc = parse_scenario(Path(args.scenario))
    except ScenarioError as exc:
        for line in exc.errors:
            print(f"error: {line}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    strategy = Strategy(args.strategy) if args.strategy else None
    try:
        written = run_to_files(sc, Path(args.out), compare=args.compare,
                               strategy=strategy, seed=args.seed)
    except Exception as exc:  # engine errors surface with context
        print(f"engine error: {exc}", file=sys.stderr)
        return 2
    for path in written:
        print(path)
    return 0


def _parse_solve_input(path: Path) -> tuple[SchedulerInput, int | None]:
    """Neighbor metrics plus tensor sizes; raw units by default, MiB on
    request. An optional fixed shard_size drives the non-searching rows."""
    neighbors: list[int] = []
    metrics: dict[int, LinkMetrics] = {}
    sync: dict[int, float] = {}
    tensors: list[tuple[str, int]] = []
    unit = 1
    shard_size: int | None = None
    section = None
    errors: list[str] = []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            section = line.strip("[]").lower()
            continue
        tokens = line.split()
        try:
            if section == "neighbors" and tokens[0] == "neighbor":
                node = int(tokens[1])
                kv = dict(t.split("=", 1) for t in tokens[2:])
                if "bandwidth" in kv:
                    m = metrics_from_bandwidth(float(kv["bandwidth"]),
                                               float(kv.get("prop", "0")))
                else:
                    m = LinkMetrics(float(kv.get("prop", "0")),
                                    float(kv["trans"]))
                neighbors.append(node)
                metrics[node] = m
                sync[node] = float(kv.get("sync", "0"))
            elif section == "model" and tokens[0] == "tensor":
                tensors.append((tokens[1], int(tokens[2])))
            elif section == "model" and tokens[0] == "units":
                unit = MIB if tokens[2] == "mib" else 1
            elif section == "model" and tokens[0] == "shard_size":
                shard_size = int(tokens[2])
            else:
                errors.append(f"line {lineno}: unrecognized statement {line!r}")
        except (ValueError, KeyError, IndexError) as exc:
            errors.append(f"line {lineno}: {exc}")
    if not neighbors:
        errors.append("no neighbors declared")
    if not tensors:
        errors.append("no tensors declared")
    if errors:
        raise ScenarioError(errors)
    state = TrainingState(tensors=tuple((n, s * unit) for n, s in tensors))
    input = SchedulerInput(neighbors=tuple(neighbors), metrics=metrics,
                           sync_finish=sync, state=state, new_node=-1)
    return input, (shard_size * unit if shard_size is not None else None)


def _plan_summary(plan) -> str:
    parts = []
    for u in sorted(plan.assignment):
        idx = sorted(plan.assignment[u])
        if not idx:
            parts.append(f"{u}:-")
        elif len(idx) <= 6:
            parts.append(f"{u}:{','.join(map(str, idx))}")
        else:
            parts.append(f"{u}:{idx[0]}..{idx[-1]}({len(idx)})")
    return " ".join(parts)


def _cmd_solve(args: argparse.Namespace) -> int:
    try:
        input, fixed = _parse_solve_input(Path(args.input))
    except ScenarioError as exc:
        for line in exc.errors:
            print(f"error: {line}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    detail = binary_search_assign_detailed(input)
    rows = [("binary_search", detail.plan, f"probes={len(detail.probes)}")]
    size = fixed if fixed is not None else detail.plan.shard_size
    shards = split_state(input.state, size)
    rows.insert(0, ("greedy", greedy_assign(shards, input), f"s={size}"))
    rows.append(("even", even_assign(shards, input), f"s={size}"))
    brute = None
    try:
        brute = brute_force_assign(shards, input)
        rows.append(("brute_force", brute, f"s={size}"))
    except EnumerationCapError as exc:
        print(f"brute_force: skipped ({exc})")
    best = brute.predicted_makespan if brute is not None \
        else min(p.predicted_makespan for _, p, _ in rows)
    print(f"{'method':<14} {'makespan':>12} {'gap':>8}  note / assignment")
    for name, plan, note in rows:
        gap = (plan.predicted_makespan / best - 1.0) * 100.0 if best > 0 else 0.0
        print(f"{name:<14} {plan.predicted_makespan:>12.6f} {gap:>7.2f}%  "
              f"{note}  [{_plan_summary(plan)}]")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="chaos-sim",
        description="Elastic-training coordination simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario")
    p_run.add_argument("scenario")
    p_run.add_argument("--strategy", choices=[s.value for s in Strategy])
    p_run.add_argument("--compare", action="store_true",
                       help="run all four strategies on identical events")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default="out")
    p_run.set_defaults(fn=_cmd_run)

    p_solve = sub.add_parser("solve", help="solve a scheduler input offline")
    p_solve.add_argument("input")
    p_solve.set_defaults(fn=_cmd_solve)

    p_val = sub.add_parser("validate", help="validate a scenario file")
    p_val.add_argument("scenario")
    p_val.set_defaults(fn=_cmd_validate)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
