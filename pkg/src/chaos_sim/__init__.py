"""Deterministic discrete-event engine for elastic edge training.

Implements multi-neighbor state replication with shard scheduling, a cluster
monitor, peer-negotiation protocols for scale-out / scale-in / connect-link /
disconnect-link, and baseline scale-out strategies for comparison.
"""

__version__ = "0.1.0"

from .model import (
    LinkMetrics,
    NodeInfo,
    NodeState,
    OverlayTopology,
    ShardSet,
    TrainingState,
    split_state,
    validate_topology,
)
from .scheduler import (
    ReplicationPlan,
    SchedulerInput,
    binary_search_assign,
    brute_force_assign,
    evaluate_makespan,
    even_assign,
    greedy_assign,
    neighbor_finish_time,
)

__all__ = [
    "LinkMetrics",
    "NodeInfo",
    "NodeState",
    "OverlayTopology",
    "ReplicationPlan",
    "SchedulerInput",
    "ShardSet",
    "TrainingState",
    "binary_search_assign",
    "brute_force_assign",
    "evaluate_makespan",
    "even_assign",
    "greedy_assign",
    "neighbor_finish_time",
    "split_state",
    "validate_topology",
]
