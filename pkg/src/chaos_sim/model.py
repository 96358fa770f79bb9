"""Core domain types: overlay topology, training state, shards, and policies.

Everything here is a plain value type. Nothing mutates shared state, so these
objects are safe to hand across module boundaries and thread contexts.
"""

from __future__ import annotations

import copy
import enum
import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping

NodeId = int

#: One data unit is one abstract parameter-byte; scenario files declare sizes
#: in MiB and convert at the boundary.
MIB = 2 ** 20


class NodeState(enum.Enum):
    ACTIVE = "active"
    JOINING = "joining"
    LEAVING = "leaving"
    FAILED = "failed"
    STANDBY = "standby"


@dataclass
class NodeInfo:
    """Per-node record tracked by the cluster monitor."""

    id: NodeId
    state: NodeState = NodeState.ACTIVE
    neighbors: set[NodeId] = field(default_factory=set)
    join_time: float = 0.0
    last_heartbeat: float = 0.0


@dataclass(frozen=True)
class LinkMetrics:
    """Directed link cost: fixed propagation delay plus per-unit transmission."""

    prop_delay: float
    trans_delay_per_unit: float

    def __post_init__(self) -> None:
        if self.prop_delay < 0:
            raise ValueError(f"propagation delay must be >= 0, got {self.prop_delay}")
        if self.trans_delay_per_unit <= 0:
            raise ValueError(
                f"transmission delay must be > 0, got {self.trans_delay_per_unit}"
            )

    def transfer_delay(self, size: float) -> float:
        return self.prop_delay + size * self.trans_delay_per_unit


@dataclass(frozen=True)
class Violation:
    """One topology invariant breach; violations are data, not exceptions."""

    kind: str
    subject: tuple = ()

    def __str__(self) -> str:
        return f"{self.kind}{self.subject}" if self.subject else self.kind


@dataclass
class OverlayTopology:
    """The overlay graph: nodes plus directed links with delay metrics.

    Links are stored per direction so scenarios may declare asymmetric
    metrics; ``add_link`` installs both directions with the same metrics.
    """

    nodes: dict[NodeId, NodeInfo] = field(default_factory=dict)
    links: dict[tuple[NodeId, NodeId], LinkMetrics] = field(default_factory=dict)

    def add_node(self, node: NodeId, state: NodeState = NodeState.ACTIVE,
                 join_time: float = 0.0) -> NodeInfo:
        info = NodeInfo(id=node, state=state, join_time=join_time,
                        last_heartbeat=join_time)
        self.nodes[node] = info
        return info

    def add_link(self, a: NodeId, b: NodeId, metrics: LinkMetrics,
                 reverse: LinkMetrics | None = None) -> None:
        self.links[(a, b)] = metrics
        self.links[(b, a)] = reverse if reverse is not None else metrics
        if a in self.nodes:
            self.nodes[a].neighbors.add(b)
        if b in self.nodes:
            self.nodes[b].neighbors.add(a)

    def remove_link(self, a: NodeId, b: NodeId) -> None:
        self.links.pop((a, b), None)
        self.links.pop((b, a), None)
        if a in self.nodes:
            self.nodes[a].neighbors.discard(b)
        if b in self.nodes:
            self.nodes[b].neighbors.discard(a)

    def remove_node(self, node: NodeId) -> None:
        for other in sorted(self.neighbors_of(node)):
            self.remove_link(node, other)
        self.nodes.pop(node, None)

    def has_link(self, a: NodeId, b: NodeId) -> bool:
        return (a, b) in self.links

    def metrics(self, a: NodeId, b: NodeId) -> LinkMetrics:
        return self.links[(a, b)]

    def neighbors_of(self, node: NodeId) -> set[NodeId]:
        info = self.nodes.get(node)
        return set(info.neighbors) if info else set()

    def active_nodes(self) -> list[NodeId]:
        return sorted(n for n, info in self.nodes.items()
                      if info.state == NodeState.ACTIVE)

    def copy(self) -> "OverlayTopology":
        return copy.deepcopy(self)


def _active_connected(topo: OverlayTopology) -> bool:
    active = topo.active_nodes()
    if len(active) <= 1:
        return True
    active_set = set(active)
    seen = {active[0]}
    stack = [active[0]]
    while stack:
        cur = stack.pop()
        for nxt in topo.neighbors_of(cur):
            if nxt in active_set and nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return seen == active_set


def validate_topology(topo: OverlayTopology) -> list[Violation]:
    """Check all topology invariants; returns one violation record per breach.

    Pure function: same input always yields the same list.
    """
    violations: list[Violation] = []
    for (a, b) in sorted(topo.links):
        if a not in topo.nodes or b not in topo.nodes:
            violations.append(Violation("DanglingLink", (a, b)))
            continue
        if (b, a) not in topo.links:
            violations.append(Violation("MissingReverseLink", (a, b)))
    for node in sorted(topo.nodes):
        info = topo.nodes[node]
        for nb in sorted(info.neighbors):
            if nb not in topo.nodes:
                violations.append(Violation("UnknownNeighbor", (node, nb)))
            elif node not in topo.nodes[nb].neighbors:
                violations.append(Violation("AsymmetricNeighbors", (node, nb)))
            if (node, nb) not in topo.links:
                violations.append(Violation("MissingLink", (node, nb)))
        if info.state == NodeState.FAILED:
            linked = sorted(
                other for other in topo.nodes
                if topo.nodes[other].state == NodeState.ACTIVE
                and node in topo.nodes[other].neighbors
            )
            for other in linked:
                violations.append(Violation("FailedNodeLinked", (node, other)))
    if not _active_connected(topo):
        violations.append(Violation("Disconnected"))
    return violations


@dataclass(frozen=True)
class TrainingState:
    """The ordered tensor list whose total size is sharded for replication.

    Tensor contents are never modeled; only names, sizes (in data units) and
    the runtime bookkeeping a new node would need to resume training.
    """

    tensors: tuple[tuple[str, int], ...]
    epoch: int = 0
    iteration: int = 0
    extra: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.tensors:
            raise ValueError("training state needs at least one tensor")
        for name, size in self.tensors:
            if size <= 0:
                raise ValueError(f"tensor {name!r} has non-positive size {size}")

    @property
    def total_size(self) -> int:
        return sum(size for _, size in self.tensors)

    @property
    def min_tensor_size(self) -> int:
        return min(size for _, size in self.tensors)

    @property
    def max_tensor_size(self) -> int:
        return max(size for _, size in self.tensors)


@dataclass(frozen=True)
class Shard:
    """One slice of the flattened training state."""

    index: int
    size: int
    #: (tensor name, start offset within tensor, end offset within tensor)
    ranges: tuple[tuple[str, int, int], ...]


@dataclass(frozen=True)
class ShardSet:
    """Uniform tiling of a training state; only the final shard may be short.

    Shard range objects are materialized on demand so that fine tilings of
    large states stay cheap for the solvers, which only need sizes.
    """

    shard_size: int
    total_size: int
    count: int
    tensors: tuple[tuple[str, int], ...]

    @property
    def last_size(self) -> int:
        rem = self.total_size - self.shard_size * (self.count - 1)
        return rem

    def size_of(self, index: int) -> int:
        if not 0 <= index < self.count:
            raise IndexError(index)
        return self.shard_size if index < self.count - 1 else self.last_size

    def assigned_size(self, indices) -> int:
        return sum(self.size_of(i) for i in indices)

    def shard(self, index: int) -> Shard:
        if not 0 <= index < self.count:
            raise IndexError(index)
        begin = index * self.shard_size
        end = min(begin + self.shard_size, self.total_size)
        ranges: list[tuple[str, int, int]] = []
        offset = 0
        for name, size in self.tensors:
            lo = max(begin, offset)
            hi = min(end, offset + size)
            if lo < hi:
                ranges.append((name, lo - offset, hi - offset))
            offset += size
            if offset >= end:
                break
        return Shard(index=index, size=end - begin, ranges=tuple(ranges))

    @property
    def shards(self) -> Iterator[Shard]:
        return (self.shard(i) for i in range(self.count))


def split_state(state: TrainingState, shard_size: int) -> ShardSet:
    """Tile the flattened training state into shards of ``shard_size`` units.

    The last shard absorbs the remainder when the size does not divide the
    total; all downstream formulas use each shard's actual size.
    """
    if shard_size <= 0:
        raise ValueError(f"shard size must be >= 1, got {shard_size}")
    total = state.total_size
    count = math.ceil(total / shard_size)
    return ShardSet(shard_size=shard_size, total_size=total, count=count,
                    tensors=state.tensors)


@dataclass(frozen=True)
class SyncPolicy:
    """Versioned all-reduce communication schedule, re-issued per topology change."""

    version: int
    #: per-node ordered neighbor exchange list
    schedule: Mapping[NodeId, tuple[NodeId, ...]]
    #: first iteration that runs under this policy
    effective_iteration: int = 0

    def schedule_for(self, node: NodeId) -> tuple[NodeId, ...]:
        return self.schedule.get(node, ())


def build_sync_policy(topo: OverlayTopology, version: int,
                      effective_iteration: int) -> SyncPolicy:
    """Default neighbor-exchange schedule over the active subgraph."""
    active = set(topo.active_nodes())
    schedule = {
        node: tuple(sorted(nb for nb in topo.neighbors_of(node) if nb in active))
        for node in sorted(active)
    }
    return SyncPolicy(version=version, schedule=schedule,
                      effective_iteration=effective_iteration)


@dataclass
class NodeRuntimeStats:
    """Per-node training telemetry read by the monitor for scheduling."""

    sync_finish_time: float = 0.0
    grad_compute_time: float = 0.0
    allreduce_busy: bool = False
