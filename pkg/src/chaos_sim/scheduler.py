"""Shard assignment solvers for multi-neighbor state replication.

The replication problem: a joining node pulls disjoint shard subsets from its
neighbors in parallel; each neighbor's completion is its sync-finish offset
plus propagation delay plus transmission of everything assigned to it. We
minimize the latest completion across neighbors.

Solvers:

* ``greedy_assign``     - least-estimated-load sweep over shards.
* ``binary_search_assign`` - outer search over the shard size, greedy inner.
* ``brute_force_assign``   - exact enumeration (reference oracle, capped).
* ``even_assign``          - round-robin baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple

import numpy as np

from . import kernels
from .model import LinkMetrics, NodeId, ShardSet, TrainingState, split_state

#: Refuse brute-force enumerations beyond this many assignment vectors.
DEFAULT_ENUMERATION_CAP = 10_000_000


class EnumerationCapError(ValueError):
    """Brute force was asked to enumerate more assignments than allowed."""


@dataclass(frozen=True)
class SchedulerInput:
    """Everything the solvers need about the joining node's neighborhood."""

    neighbors: tuple[NodeId, ...]
    metrics: Mapping[NodeId, LinkMetrics]
    sync_finish: Mapping[NodeId, float]
    state: TrainingState
    new_node: NodeId

    def __post_init__(self) -> None:
        if not self.neighbors:
            raise ValueError("at least one neighbor is required")
        missing = [u for u in self.neighbors
                   if u not in self.metrics or u not in self.sync_finish]
        if missing:
            raise ValueError(f"missing metrics for neighbors {missing}")

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-neighbor fixed term (prop + sync offset) and transmission rate."""
        base = np.array(
            [self.metrics[u].prop_delay + self.sync_finish[u]
             for u in self.neighbors],
            dtype=np.float64,
        )
        trans = np.array(
            [self.metrics[u].trans_delay_per_unit for u in self.neighbors],
            dtype=np.float64,
        )
        return base, trans


@dataclass(frozen=True)
class ReplicationPlan:
    """A solved assignment: shard size, per-neighbor shard sets, and makespan."""

    shard_size: int
    assignment: Mapping[NodeId, frozenset[int]]
    predicted_makespan: float

    def shard_count(self) -> int:
        return sum(len(s) for s in self.assignment.values())


def neighbor_finish_time(link: LinkMetrics, sync_finish: float,
                         assigned_sizes: Iterable[int]) -> float:
    """Completion time for one neighbor: sync offset + prop + transmission.

    An empty assignment costs the fixed term only (zero transmission).
    """
    return sync_finish + link.prop_delay + \
        link.trans_delay_per_unit * float(sum(assigned_sizes))


def _plan_from_assign(shards: ShardSet, input: SchedulerInput,
                      assign: np.ndarray, makespan: float) -> ReplicationPlan:
    assignment = {
        u: frozenset(int(j) for j in np.flatnonzero(assign == i))
        for i, u in enumerate(input.neighbors)
    }
    return ReplicationPlan(shard_size=shards.shard_size, assignment=assignment,
                           predicted_makespan=float(makespan))


def evaluate_makespan(plan: ReplicationPlan, input: SchedulerInput) -> float:
    """Latest completion time over all neighbors under the plan.

    Rejects plans whose shard sets do not exactly tile the state split at the
    plan's shard size.
    """
    shards = split_state(input.state, plan.shard_size)
    seen: set[int] = set()
    total = 0
    for u, indices in plan.assignment.items():
        if not indices:
            continue
        overlap = seen & set(indices)
        if overlap:
            raise ValueError(f"shards assigned twice: {sorted(overlap)[:5]}")
        seen |= set(indices)
        total += len(indices)
    if total != shards.count or (seen and max(seen) >= shards.count):
        raise ValueError(
            f"plan covers {total} shards, expected {shards.count}"
        )
    finish = [
        neighbor_finish_time(
            input.metrics[u], input.sync_finish[u],
            (shards.size_of(j) for j in plan.assignment.get(u, ())),
        )
        for u in input.neighbors
    ]
    return max(finish)


def greedy_assign(shards: ShardSet, input: SchedulerInput) -> ReplicationPlan:
    """Least-estimated-load sweep: each shard, in index order, goes to the
    neighbor minimizing (current load + shard transmission cost).

    Loads start at the fixed per-neighbor term, so the returned makespan is
    the full objective including sync offsets. Ties break to the lowest
    neighbor index, which makes replays deterministic.
    """
    if shards.count <= 0:
        raise ValueError("shard set is empty")
    base, trans = input.arrays()
    assign = np.empty(shards.count, dtype=np.int32)
    loads = np.empty(len(input.neighbors), dtype=np.float64)
    kernels.greedy_sweep(base, trans, shards.count, float(shards.shard_size),
                         float(shards.last_size), assign, loads)
    return _plan_from_assign(shards, input, assign, loads.max())


def even_assign(shards: ShardSet, input: SchedulerInput) -> ReplicationPlan:
    """Round-robin baseline: shard j goes to neighbor j mod n."""
    n = len(input.neighbors)
    assign = np.arange(shards.count, dtype=np.int32) % n
    plan = _plan_from_assign(shards, input, assign, 0.0)
    makespan = evaluate_makespan(plan, input)
    return ReplicationPlan(plan.shard_size, plan.assignment, makespan)


def brute_force_assign(shards: ShardSet, input: SchedulerInput,
                       cap: int = DEFAULT_ENUMERATION_CAP) -> ReplicationPlan:
    """Enumerate every assignment and return a global optimum.

    Ties break to the lexicographically smallest assignment vector. Inputs
    whose search space exceeds ``cap`` assignments are refused.
    """
    n = len(input.neighbors)
    space = n ** shards.count
    if space > cap:
        raise EnumerationCapError(
            f"{n}^{shards.count} = {space} assignments exceeds cap {cap}"
        )
    base, trans = input.arrays()
    assign = np.empty(shards.count, dtype=np.int32)
    best = kernels.brute_force_search(
        base, trans, shards.count, float(shards.shard_size),
        float(shards.last_size), assign,
    )
    return _plan_from_assign(shards, input, assign, best)


def greedy_sequence(base: list[float], trans: list[float],
                    sizes: list[int]) -> list[int]:
    """Greedy sweep over arbitrary per-item sizes; returns chosen indices.

    Used for mid-replication re-planning, where survivors start from their
    current backlog instead of a fresh fixed term.
    """
    loads = list(base)
    choice: list[int] = []
    for size in sizes:
        best_u = 0
        best_cost = loads[0] + size * trans[0]
        for u in range(1, len(loads)):
            cost = loads[u] + size * trans[u]
            if cost < best_cost:
                best_cost = cost
                best_u = u
        choice.append(best_u)
        loads[best_u] = best_cost
    return choice


class ShardSizeProbe(NamedTuple):
    shard_size: int
    makespan: float


class BinarySearchResult(NamedTuple):
    plan: ReplicationPlan
    probes: tuple[ShardSizeProbe, ...]


def binary_search_assign_detailed(
    input: SchedulerInput,
    min_shard_size: int | None = None,
) -> BinarySearchResult:
    """Binary search over the shard size with the greedy solver inside.

    The search spans [smallest tensor, largest tensor]. Each probe splits the
    state, runs the greedy sweep, and keeps the best makespan seen; a strict
    improvement moves the search to smaller sizes, anything else to larger.
    ``min_shard_size`` optionally raises the lower bound (engine scenarios use
    it to avoid absurdly fine tilings of byte-sized tensors).
    """
    lo = input.state.min_tensor_size
    hi = input.state.max_tensor_size
    if min_shard_size is not None:
        lo = min(max(lo, min_shard_size), hi)
    best_plan: ReplicationPlan | None = None
    probes: list[ShardSizeProbe] = []
    while lo <= hi:
        size = (lo + hi) // 2
        shards = split_state(input.state, size)
        plan = greedy_assign(shards, input)
        probes.append(ShardSizeProbe(size, plan.predicted_makespan))
        if best_plan is None or plan.predicted_makespan < best_plan.predicted_makespan:
            best_plan = plan
            hi = size - 1
        else:
            lo = size + 1
    assert best_plan is not None
    return BinarySearchResult(best_plan, tuple(probes))


def binary_search_assign(input: SchedulerInput,
                         min_shard_size: int | None = None) -> ReplicationPlan:
    return binary_search_assign_detailed(input, min_shard_size).plan
