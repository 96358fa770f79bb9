"""Training-loop abstractions: compute profiles, scale-out strategies,
replication planning, and idle-time accounting.

The four scale-out strategies answer the same question (how does a joining
node obtain the training state?) differently:

* multi-neighbor: solved shard assignment over the new node's direct links;
* single-source: the full state over the one fastest direct link;
* multi-source: even contiguous parts from every active node, routed over
  shortest store-and-forward paths;
* stop-resume: checkpoint to disk, halt, reinitialize, reload.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping

from .model import NodeId, OverlayTopology, TrainingState, split_state
from .network import (
    TransferRequest,
    TransferTag,
    coflow_completion,
    direct_transfer_delay,
    shortest_path,
)
from .scheduler import ReplicationPlan, SchedulerInput, binary_search_assign


class Strategy(enum.Enum):
    MULTI_NEIGHBOR = "multi_neighbor"
    SINGLE_SOURCE = "single_source"
    MULTI_SOURCE = "multi_source"
    STOP_RESUME = "stop_resume"


@dataclass(frozen=True)
class ComputeProfile:
    """Per-node cost model for one training iteration."""

    compute_time: float            # gradient compute per iteration (time units)
    allreduce_payload: float       # data units exchanged per policy edge
    checkpoint_throughput: float = 100.0  # data units per time unit

    def __post_init__(self) -> None:
        if self.compute_time <= 0 or self.allreduce_payload <= 0 \
                or self.checkpoint_throughput <= 0:
            raise ValueError("profile values must be positive")


@dataclass
class MetricsRecord:
    """Per-scaling-event outputs; one CSV row each."""

    event_id: int
    time: float
    primitive: str
    strategy: str
    scale_out_delay: float = 0.0
    replication_delay: float = 0.0
    hidden_delay: float = 0.0
    cluster_idle_time: float = 0.0
    policy_version: int = 0
    #: per-node attribution backing cluster_idle_time (not a CSV column)
    per_node_idle: dict[NodeId, float] = field(default_factory=dict)

    CSV_COLUMNS = ("event_id", "time", "primitive", "strategy",
                   "scale_out_delay", "replication_delay", "hidden_delay",
                   "cluster_idle_time", "policy_version")

    def csv_row(self) -> tuple:
        return (self.event_id, self.time, self.primitive, self.strategy,
                self.scale_out_delay, self.replication_delay,
                self.hidden_delay, self.cluster_idle_time,
                self.policy_version)


def even_parts(total: int, n: int) -> list[int]:
    """Split ``total`` into n contiguous parts whose sizes differ by <= 1."""
    base, rem = divmod(total, n)
    return [base + (1 if i < rem else 0) for i in range(n)]


def single_source_choice(input: SchedulerInput) -> NodeId:
    """The neighbor with minimal full-state direct transfer delay."""
    return min(
        input.neighbors,
        key=lambda u: (direct_transfer_delay(input.metrics[u],
                                             input.state.total_size), u),
    )


def multi_neighbor_requests(input: SchedulerInput,
                            plan: ReplicationPlan) -> list[TransferRequest]:
    """One transfer per assigned shard, submitted per-source in index order."""
    shards = split_state(input.state, plan.shard_size)
    requests: list[TransferRequest] = []
    for u in input.neighbors:
        for j in sorted(plan.assignment.get(u, ())):
            requests.append(TransferRequest(
                src=u, dst=input.new_node, size=shards.size_of(j),
                path=(u, input.new_node), tag=TransferTag.STATE_SHARD,
                meta={"shard": j},
            ))
    return requests


def multi_source_requests(topo: OverlayTopology, new_node: NodeId,
                          state: TrainingState) -> list[TransferRequest]:
    """Even contiguous parts from every active node over shortest paths."""
    sources = [n for n in topo.active_nodes() if n != new_node]
    if not sources:
        raise ValueError("no active sources")
    parts = even_parts(state.total_size, len(sources))
    requests: list[TransferRequest] = []
    for idx, (src, part) in enumerate(zip(sources, parts)):
        if part <= 0:
            continue
        path, _ = shortest_path(topo, src, new_node, part)
        requests.append(TransferRequest(
            src=src, dst=new_node, size=part, path=tuple(path),
            tag=TransferTag.STATE_SHARD, meta={"part": idx},
        ))
    return requests


def replication_makespan(topo: OverlayTopology, new_node: NodeId,
                         neighbors: list[NodeId], state: TrainingState,
                         strategy: Strategy,
                         min_shard_size: int | None = None) -> float:
    """Planning-level replication completion time on an idle network.

    All neighbors are assumed ready at time zero (no sync stagger); this is
    the pure network cost a strategy pays, used for strategy comparisons and
    scaling sweeps.
    """
    input = SchedulerInput(
        neighbors=tuple(neighbors),
        metrics={u: topo.metrics(u, new_node) for u in neighbors},
        sync_finish={u: 0.0 for u in neighbors},
        state=state,
        new_node=new_node,
    )
    if strategy is Strategy.MULTI_NEIGHBOR:
        plan = binary_search_assign(input, min_shard_size)
        requests = multi_neighbor_requests(input, plan)
    elif strategy is Strategy.SINGLE_SOURCE:
        src = single_source_choice(input)
        requests = [TransferRequest(
            src=src, dst=new_node, size=state.total_size,
            path=(src, new_node), tag=TransferTag.STATE_SHARD,
        )]
    elif strategy is Strategy.MULTI_SOURCE:
        requests = multi_source_requests(topo, new_node, state)
    else:
        raise ValueError(f"no network plan for {strategy}")
    return coflow_completion(topo, requests)


@dataclass
class IdleReport:
    """Aggregated idle attribution across a finished run."""

    per_node: dict[NodeId, float]
    per_event: dict[int, float]

    @property
    def cluster_total(self) -> float:
        return sum(self.per_node.values())


def account_idle_time(records: list[MetricsRecord]) -> IdleReport:
    """Fold per-event idle attributions into per-node and cluster totals.

    Barrier waits during normal sync never enter these records; only idle
    attributable to a scaling event is counted.
    """
    per_node: dict[NodeId, float] = {}
    per_event: dict[int, float] = {}
    for rec in records:
        per_event[rec.event_id] = rec.cluster_idle_time
        for node, idle in rec.per_node_idle.items():
            per_node[node] = per_node.get(node, 0.0) + idle
    return IdleReport(per_node=per_node, per_event=per_event)
