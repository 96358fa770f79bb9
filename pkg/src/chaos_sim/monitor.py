"""Scheduler-side cluster monitor: topology tracking, heartbeat liveness,
link probing with configurable measurement noise, and assembly of scheduler
inputs for scale-out.

The monitor owns the authoritative node table. Link ground truth lives in the
network; probes read it through a callback so measurement noise stays in one
place (seeded, multiplicative, default +/-5%, zero in acceptance runs).
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Mapping

from .model import (
    LinkMetrics,
    NodeId,
    NodeInfo,
    NodeRuntimeStats,
    NodeState,
    OverlayTopology,
    TrainingState,
)
from .scheduler import SchedulerInput


class LinkFailureError(Exception):
    """A probe found the link dead."""

    def __init__(self, link: tuple[NodeId, NodeId]) -> None:
        super().__init__(f"link {link} is down")
        self.link = link


@dataclass(frozen=True)
class HeartbeatConfig:
    interval: float = 2000.0  # ms of simulated time
    miss_threshold: int = 3

    def __post_init__(self) -> None:
        if self.interval <= 0:
            raise ValueError("heartbeat interval must be > 0")
        if self.miss_threshold < 1:
            raise ValueError("miss threshold must be >= 1")

    @property
    def deadline(self) -> float:
        return self.interval * self.miss_threshold


@dataclass(frozen=True)
class MeasurementReport:
    link: tuple[NodeId, NodeId]
    prop_delay: float
    trans_delay_per_unit: float
    measured_at: float
    sync_finish: Mapping[NodeId, float] = field(default_factory=dict)


class ClusterMonitor:
    """Tracks node state, liveness, and on-demand network measurements."""

    def __init__(
        self,
        topology: OverlayTopology,
        heartbeat: HeartbeatConfig | None = None,
        noise: float = 0.05,
        seed: int | str = 0,
        ground_truth: Callable[[NodeId, NodeId], LinkMetrics] | None = None,
        link_alive: Callable[[NodeId, NodeId], bool] | None = None,
        on_node_failure: Callable[[NodeId, float], None] | None = None,
        on_warning: Callable[[str, float], None] | None = None,
    ) -> None:
        self.topology = topology
        self.heartbeat = heartbeat or HeartbeatConfig()
        self.noise = noise
        self._rng = random.Random(f"monitor-noise:{seed}")
        self._ground_truth = ground_truth or (lambda a, b: topology.metrics(a, b))
        self._link_alive = link_alive or (lambda a, b: topology.has_link(a, b))
        self.on_node_failure = on_node_failure
        self.on_warning = on_warning
        self.stats: dict[NodeId, NodeRuntimeStats] = {}

    # -- liveness ------------------------------------------------------------

    def record_heartbeat(self, node: NodeId, at: float) -> None:
        info = self.topology.nodes.get(node)
        if info is None:
            if self.on_warning is not None:
                self.on_warning(f"heartbeat from unknown node {node}", at)
            return
        info.last_heartbeat = at

    def check_liveness(self, now: float) -> set[NodeId]:
        """Flag nodes silent for strictly longer than the deadline.

        Each node transitions Active -> Failed exactly once; a heartbeat at
        exactly the deadline keeps the node alive (inclusive boundary).
        """
        failed: set[NodeId] = set()
        for node in sorted(self.topology.nodes):
            info = self.topology.nodes[node]
            if info.state != NodeState.ACTIVE:
                continue
            if now - info.last_heartbeat > self.heartbeat.deadline:
                info.state = NodeState.FAILED
                failed.add(node)
                if self.on_node_failure is not None:
                    self.on_node_failure(node, now)
        return failed

    # -- measurement -----------------------------------------------------------

    def _perturb(self, value: float) -> float:
        if self.noise <= 0:
            return value
        return value * (1.0 + self._rng.uniform(-self.noise, self.noise))

    def probe_link(self, link: tuple[NodeId, NodeId], at: float) -> MeasurementReport:
        a, b = link
        if (a, b) not in self.topology.links:
            raise KeyError(f"unknown link {link}")
        if not self._link_alive(a, b):
            raise LinkFailureError(link)
        truth = self._ground_truth(a, b)
        return MeasurementReport(
            link=link,
            prop_delay=self._perturb(truth.prop_delay),
            trans_delay_per_unit=self._perturb(truth.trans_delay_per_unit),
            measured_at=at,
            sync_finish={
                n: self.stats[n].sync_finish_time
                for n in link if n in self.stats
            },
        )

    def measure_for_scaleout(self, new_node: NodeId, neighbors: list[NodeId],
                             state: TrainingState, at: float) -> SchedulerInput:
        """Probe every neighbor link and read sync offsets into a solver input.

        Sync offsets are normalized so the earliest-finished neighbor sits at
        zero; the solver only cares about the relative stagger. Raises
        LinkFailureError on the first dead link.
        """
        metrics: dict[NodeId, LinkMetrics] = {}
        raw_sync: dict[NodeId, float] = {}
        for u in neighbors:
            report = self.probe_link((u, new_node), at)
            metrics[u] = LinkMetrics(report.prop_delay, report.trans_delay_per_unit)
            raw_sync[u] = self.stats.get(u, NodeRuntimeStats()).sync_finish_time
        floor = min(raw_sync.values())
        sync = {u: raw_sync[u] - floor for u in neighbors}
        return SchedulerInput(
            neighbors=tuple(neighbors),
            metrics=metrics,
            sync_finish=sync,
            state=state,
            new_node=new_node,
        )

    # -- snapshots -------------------------------------------------------------

    def topology_snapshot(self, now: float) -> OverlayTopology:
        """Immutable copy reflecting every event processed before ``now``."""
        return self.topology.copy()

    def node_info(self, node: NodeId) -> NodeInfo:
        return self.topology.nodes[node]
