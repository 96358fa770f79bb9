"""The discrete-event engine: node actors running the training loop, the
control channel between agents and the scheduler, policy versioning with
barrier-safe effect times, halts, restarts, and metrics assembly.

Time is unitless inside the engine (the CLI maps 1 unit = 1 ms). Node agents
and the scheduler only interact through messages and transfers posted on the
single event loop, so identical inputs and seeds replay identically.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

from .events import EventLoop
from .model import (
    LinkMetrics,
    NodeId,
    NodeRuntimeStats,
    NodeState,
    OverlayTopology,
    SyncPolicy,
    TrainingState,
)
from .monitor import ClusterMonitor, HeartbeatConfig, LinkFailureError
from .negotiator import MessageKind, Negotiator, Primitive
from .network import Network, Transfer, TransferRequest, TransferTag
from .training import ComputeProfile, MetricsRecord, Strategy

# same-instant event ordering: deliveries before control before compute ticks
RANK_CONTROL = 3
RANK_COMPUTE = 4
RANK_TIMER = 9
SCHED_KEY = -1


class EngineError(Exception):
    pass


@dataclass(frozen=True)
class MessageRecord:
    time: float
    src: str
    dst: str
    kind: str
    payload: Mapping[str, object]


@dataclass(frozen=True)
class EventRecord:
    time: float
    kind: str
    detail: Mapping[str, object]


@dataclass
class EngineConfig:
    iterations: int = 10
    strategy: Strategy = Strategy.MULTI_NEIGHBOR
    heartbeat: HeartbeatConfig = field(default_factory=HeartbeatConfig)
    probe_noise: float = 0.0
    seed: int = 0
    control_delay: float = 1.0
    probe_size: float | None = None      # default: 1e-6 of the state size
    single_source_barrier: bool = True
    restart_cost: float = 10_000.0       # stop-resume cluster reinit
    min_shard_size: int | None = 65_536  # floor for engine-driven solves
    scheduler_node: NodeId | None = None
    max_time: float | None = None


class NodeActor:
    """Event-driven agent for one training node."""

    def __init__(self, node: NodeId, profile: ComputeProfile,
                 max_iterations: int) -> None:
        self.id = node
        self.profile = profile
        self.max_iterations = max_iterations
        self.alive = True
        self.training = False
        self.done = False
        self.start_iteration = 1
        self.iteration = 0
        self.last_started_sync = 0
        self.last_completed_sync = 0
        self.phase = "off"  # off|boot|compute|sync|halt
        self.schedule: tuple[NodeId, ...] = ()
        self.known_policies: list[SyncPolicy] = []
        # dict-as-ordered-set: Transfer objects hash by identity, so plain
        # sets would iterate in an address-dependent (non-replayable) order
        self.pending_out: dict[Transfer, None] = {}
        self.pending_in: set[NodeId] = set()
        self.received: dict[int, set[NodeId]] = {}
        self.delivered_out: dict[int, set[NodeId]] = {}
        self.compute_entry = None
        self.compute_end_time: float | None = None
        self.halt_request: object | None = None
        self.halt_point: str | None = None
        self.last_arrival_from: NodeId | None = None
        self.stats = NodeRuntimeStats()
        self.intervals: list[tuple[float, float, str, dict]] = []
        self._open_kind: str | None = None
        self._open_since: float = 0.0
        self._open_detail: dict = {}

    # -- interval bookkeeping ---------------------------------------------

    def mark(self, now: float, kind: str | None, **detail) -> None:
        if self._open_kind is not None and now > self._open_since:
            self.intervals.append(
                (self._open_since, now, self._open_kind, self._open_detail))
        self._open_kind = kind
        self._open_since = now
        self._open_detail = dict(detail)

    def open_detail(self) -> dict:
        return self._open_detail

    def policy_for(self, iteration: int) -> SyncPolicy | None:
        eligible = [p for p in self.known_policies
                    if p.effective_iteration <= iteration]
        if not eligible:
            return None
        return max(eligible, key=lambda p: p.version)

    def intervals_upto(self, now: float) -> list[tuple[float, float, str, dict]]:
        out = list(self.intervals)
        if self._open_kind is not None and now > self._open_since:
            out.append((self._open_since, now, self._open_kind, self._open_detail))
        return out


class Engine:
    """Owns the loop, the network, the monitor, and every node actor."""

    def __init__(self, topology: OverlayTopology, state: TrainingState,
                 profiles: Mapping[NodeId, ComputeProfile],
                 config: EngineConfig | None = None,
                 link_catalog: Mapping[tuple[NodeId, NodeId], LinkMetrics] | None = None) -> None:
        self.config = config or EngineConfig()
        self.state = state
        self.loop = EventLoop()
        self.net = Network(self.loop)
        self.topology = topology
        self.rng = random.Random(f"engine:{self.config.seed}")
        self.catalog: dict[tuple[NodeId, NodeId], LinkMetrics] = dict(topology.links)
        if link_catalog:
            self.catalog.update(link_catalog)
        self.monitor = ClusterMonitor(
            topology,
            heartbeat=self.config.heartbeat,
            noise=self.config.probe_noise,
            seed=self.config.seed,
            ground_truth=lambda a, b: self.net.metrics(a, b),
            link_alive=lambda a, b: self.net.has_link(a, b),
            on_node_failure=self._on_node_failure_detected,
            on_warning=lambda msg, at: self.trace_event("monitor_warning", message=msg),
        )
        self.negotiator = Negotiator(self)
        self.trace: list[MessageRecord | EventRecord] = []
        self.metrics: list[MetricsRecord] = []
        self.iteration_log: list[tuple[int, float]] = []
        self.policy_history: list[SyncPolicy] = []
        self.actors: dict[NodeId, NodeActor] = {}
        self.live_transfers: dict[Transfer, None] = {}
        self.draining_links: set[tuple[NodeId, NodeId]] = set()
        self._global_waiters: list[tuple[int, Callable[[], None]]] = []
        self._node_sync_hooks: dict[NodeId, list[Callable[[], None]]] = {}
        self._completed_through = 0
        self._scenario_pending = 0
        self._silenced: set[NodeId] = set()

        for node in topology.active_nodes():
            actor = NodeActor(node, profiles[node], self.config.iterations)
            actor.training = True
            self.actors[node] = actor
        self.profiles = dict(profiles)
        for (a, b) in topology.links:
            if a < b:
                self.net.add_link(a, b, topology.links[(a, b)],
                                  topology.links.get((b, a)))
        active = topology.active_nodes()
        self.scheduler_node = (self.config.scheduler_node
                               if self.config.scheduler_node is not None
                               else (active[0] if active else 0))
        self.net.on_transfer_failed.append(self._on_transfer_failed)

        policy = self.issue_policy(effective_iteration=1, broadcastless=True)
        for actor in self.actors.values():
            actor.known_policies.append(policy)

    # ------------------------------------------------------------------
    # basics

    @property
    def now(self) -> float:
        return self.loop.now

    def trace_event(self, kind: str, **detail) -> None:
        self.trace.append(EventRecord(self.now, kind, detail))

    def send_control(self, src: NodeId | str, dst: NodeId | str,
                     kind: MessageKind, payload: Mapping[str, object],
                     handler: Callable[[], None] | None = None) -> None:
        """Scheduler<->agent message over the constant-delay control channel."""
        self.trace.append(MessageRecord(self.now, str(src), str(dst),
                                        kind.value, dict(payload)))
        key = (dst if isinstance(dst, int) else SCHED_KEY, RANK_CONTROL)
        if handler is not None:
            self.loop.schedule_in(self.config.control_delay, handler, key=key)

    def link_metrics_for(self, a: NodeId, b: NodeId) -> LinkMetrics | None:
        return self.catalog.get((a, b))

    def network_has_link(self, a: NodeId, b: NodeId) -> bool:
        return self.net.has_link(a, b)

    def training_node_ids(self) -> list[NodeId]:
        return sorted(n for n, a in self.actors.items()
                      if a.alive and a.training and not a.done)

    def _alive_training(self) -> list[NodeActor]:
        return [a for a in self.actors.values()
                if a.alive and a.training and not a.done]

    # ------------------------------------------------------------------
    # topology mutation helpers (called by the negotiator)

    def establish_link(self, a: NodeId, b: NodeId) -> None:
        if self.net.has_link(a, b):
            return
        metrics = self.catalog.get((a, b))
        if metrics is None:
            raise EngineError(f"no declared metrics for link ({a},{b})")
        reverse = self.catalog.get((b, a), metrics)
        self.net.add_link(a, b, metrics, reverse)
        self.topology.add_link(a, b, metrics, reverse)
        self.trace_event("socket_up", link=(a, b))

    def teardown_link(self, a: NodeId, b: NodeId) -> None:
        self.net.remove_link(a, b)
        self.topology.remove_link(a, b)
        self.draining_links.discard((a, b))
        self.draining_links.discard((b, a))

    def activate_node(self, node: NodeId, start_iteration: int) -> None:
        info = self.topology.nodes[node]
        info.state = NodeState.ACTIVE
        info.join_time = self.now
        info.last_heartbeat = self.now
        actor = self.actors.get(node)
        if actor is None:
            actor = NodeActor(node, self.profiles[node], self.config.iterations)
            self.actors[node] = actor
        actor.alive = True
        actor.start_iteration = start_iteration
        actor.iteration = start_iteration
        actor.last_completed_sync = start_iteration - 1
        actor.last_started_sync = start_iteration - 1
        self._schedule_heartbeat(node)

    def detach_node(self, node: NodeId, new_state: NodeState) -> None:
        """Remove a node and its links from the cluster (leave or failure)."""
        for tr in list(self.live_transfers):
            if node in tr.req.path and not tr.done:
                self.cancel_transfer(tr)
        for other in sorted(self.topology.neighbors_of(node)):
            self.net.remove_link(node, other)
            self.topology.remove_link(node, other)
        info = self.topology.nodes.get(node)
        if info is not None:
            info.state = new_state
        actor = self.actors.get(node)
        if actor is not None:
            actor.training = False
            actor.done = True
            actor.mark(self.now, "off")
            if actor.compute_entry is not None:
                self.loop.cancel(actor.compute_entry)
                actor.compute_entry = None
        self._check_boundaries()

    def prepare_boot_node(self, node: NodeId) -> None:
        """Create the joining node's agent at join-request time."""
        if node not in self.topology.nodes:
            self.topology.add_node(node, NodeState.STANDBY, join_time=self.now)
        if node not in self.actors:
            profile = self.profiles.get(node)
            if profile is None:
                raise EngineError(f"no compute profile declared for node {node}")
            self.actors[node] = NodeActor(node, profile, self.config.iterations)
        actor = self.actors[node]
        actor.phase = "boot"
        actor.mark(self.now, "boot")

    def retire_boot_node(self, node: NodeId) -> None:
        actor = self.actors.get(node)
        if actor is not None:
            actor.training = False
            actor.done = True
            actor.mark(self.now, "off")
        info = self.topology.nodes.get(node)
        if info is not None and info.state == NodeState.JOINING:
            info.state = NodeState.STANDBY

    def cap_iterations(self, node: NodeId, max_iteration: int) -> None:
        actor = self.actors[node]
        actor.max_iterations = min(actor.max_iterations, max_iteration)
        if actor.last_completed_sync >= actor.max_iterations:
            if actor.phase == "compute" and actor.compute_entry is not None:
                self.loop.cancel(actor.compute_entry)
                actor.compute_entry = None
            if actor.phase not in ("sync", "halt"):
                self._finish_training(actor)

    def removal_keeps_connectivity(self, a: NodeId, b: NodeId) -> bool:
        scratch = self.topology.copy()
        scratch.remove_link(a, b)
        from .model import _active_connected
        return _active_connected(scratch)

    # ------------------------------------------------------------------
    # policies

    def issue_policy(self, effective_iteration: int,
                     exclude_nodes: set[NodeId] | None = None,
                     exclude_links: set[tuple[NodeId, NodeId]] | None = None,
                     broadcastless: bool = False) -> SyncPolicy:
        if exclude_links:
            for (a, b) in exclude_links:
                self.draining_links.add((a, b))
                self.draining_links.add((b, a))
        version = len(self.policy_history) + 1
        active = set(self.topology.active_nodes()) - (exclude_nodes or set())
        schedule = {}
        for node in sorted(active):
            peers = []
            for nb in sorted(self.topology.neighbors_of(node)):
                if nb not in active:
                    continue
                if (node, nb) in self.draining_links:
                    continue
                peers.append(nb)
            schedule[node] = tuple(peers)
        policy = SyncPolicy(version=version, schedule=schedule,
                            effective_iteration=effective_iteration)
        self.policy_history.append(policy)
        if not broadcastless:
            self.trace_event("policy_issued", version=version,
                             effective_iteration=effective_iteration)
        return policy

    def broadcast_policy(self, policy: SyncPolicy,
                         include: Iterable[NodeId] = ()) -> None:
        targets = sorted(set(self.training_node_ids()) | set(include))
        for node in targets:
            def apply(node: NodeId = node) -> None:
                actor = self.actors.get(node)
                if actor is not None:
                    actor.known_policies.append(policy)
            self.send_control("sched", node, MessageKind.SYNC_POLICY_UPDATE,
                              {"version": policy.version,
                               "effective_iteration": policy.effective_iteration},
                              apply)

    def current_policy_schedule(self, node: NodeId) -> tuple[NodeId, ...]:
        if not self.policy_history:
            return ()
        return self.policy_history[-1].schedule_for(node)

    def next_effective_iteration(self) -> int:
        """Smallest iteration no node will have started syncing before a
        policy message dispatched now can land."""
        arrival = self.now + self.config.control_delay
        started = 0
        for actor in self._alive_training():
            s = actor.last_started_sync
            if actor.phase == "compute" and actor.compute_end_time is not None \
                    and actor.compute_end_time <= arrival + 1e-9:
                s = max(s, actor.iteration)
            started = max(started, s)
        return started + 1

    def min_current_iteration(self) -> int:
        current = [a.iteration for a in self._alive_training() if a.iteration > 0]
        return min(current) if current else self.next_effective_iteration()

    def any_sync_in_flight(self) -> bool:
        return any(a.phase == "sync" for a in self._alive_training())

    # ------------------------------------------------------------------
    # training loop

    def start_training(self) -> None:
        for node in sorted(self.actors):
            actor = self.actors[node]
            if actor.training and not actor.done:
                self.begin_iteration(actor, 1)
            self._schedule_heartbeat(node)
        self._schedule_liveness_check()

    def begin_iteration(self, actor: NodeActor, iteration: int) -> None:
        if not (actor.alive and actor.training) or actor.done:
            return
        if iteration > actor.max_iterations:
            self._finish_training(actor)
            return
        actor.iteration = iteration
        actor.phase = "compute"
        actor.mark(self.now, "compute", iteration=iteration)
        actor.compute_end_time = self.now + actor.profile.compute_time
        actor.compute_entry = self.loop.schedule(
            actor.compute_end_time, lambda: self._compute_done(actor),
            key=(actor.id, RANK_COMPUTE))

    def _compute_done(self, actor: NodeActor) -> None:
        if not (actor.alive and actor.training) or actor.done:
            return
        actor.compute_entry = None
        actor.compute_end_time = None
        if actor.iteration > actor.max_iterations:
            self._finish_training(actor)
            return
        if self._maybe_halt(actor, "pre_sync"):
            return
        self.enter_sync(actor)

    def enter_sync(self, actor: NodeActor) -> None:
        iteration = actor.iteration
        policy = actor.policy_for(iteration)
        actor.schedule = policy.schedule_for(actor.id) if policy else ()
        actor.phase = "sync"
        actor.last_started_sync = iteration
        actor.mark(self.now, "sync_active", iteration=iteration)
        actor.pending_in = set(actor.schedule) - actor.received.get(iteration, set())
        actor.pending_out = {}
        already_sent = actor.delivered_out.get(iteration, set())
        for peer in actor.schedule:
            if peer in already_sent:
                continue
            actor.pending_out[self._send_payload(actor, peer, iteration)] = None
        self._check_sync_done(actor)

    def _send_payload(self, actor: NodeActor, peer: NodeId,
                      iteration: int) -> Transfer:
        req = TransferRequest(
            src=actor.id, dst=peer, size=actor.profile.allreduce_payload,
            path=(actor.id, peer), tag=TransferTag.ALLREDUCE_CHUNK,
            meta={"iteration": iteration, "sender": actor.id})
        return self.submit_transfer(
            req,
            on_complete=lambda tr: self._payload_delivered(tr),
            on_fail=lambda tr, reason: self._payload_failed(tr, reason))

    def _payload_delivered(self, tr: Transfer) -> None:
        iteration = int(tr.req.meta["iteration"])
        sender = self.actors.get(tr.req.src)
        receiver = self.actors.get(tr.req.dst)
        if sender is not None:
            sender.delivered_out.setdefault(iteration, set()).add(tr.req.dst)
            if tr in sender.pending_out:
                sender.pending_out.pop(tr, None)
                self._check_sync_done(sender)
        if receiver is not None:
            receiver.received.setdefault(iteration, set()).add(tr.req.src)
            if receiver.phase == "sync" and receiver.iteration == iteration \
                    and tr.req.src in receiver.pending_in:
                receiver.pending_in.discard(tr.req.src)
                receiver.last_arrival_from = tr.req.src
                self._check_sync_done(receiver)

    def _payload_failed(self, tr: Transfer, reason: str) -> None:
        if reason == "cancelled":
            return
        self.trace_event("allreduce_transfer_failed",
                         link=(tr.req.src, tr.req.dst), reason=reason)
        self.negotiator.handle_link_failure((tr.req.src, tr.req.dst))

    def _check_sync_done(self, actor: NodeActor) -> None:
        if actor.phase != "sync":
            return
        if actor.pending_out:
            return
        if actor.pending_in:
            if actor._open_kind != "sync_wait":
                actor.mark(self.now, "sync_wait", iteration=actor.iteration)
            return
        self._finish_sync(actor)

    def _finish_sync(self, actor: NodeActor) -> None:
        iteration = actor.iteration
        if actor._open_kind == "sync_wait":
            actor.open_detail()["released_by"] = actor.last_arrival_from
        actor.stats.sync_finish_time = self.now
        self.monitor.stats[actor.id] = actor.stats
        actor.last_completed_sync = iteration
        actor.received.pop(iteration, None)
        actor.delivered_out.pop(iteration, None)
        actor.phase = "idle"
        hooks = self._node_sync_hooks.pop(actor.id, [])
        self._check_boundaries()
        for hook in hooks:
            hook()
        if actor.done:
            return
        if self._maybe_halt(actor, "pre_compute"):
            return
        if iteration >= actor.max_iterations:
            self._finish_training(actor)
            return
        self.begin_iteration(actor, iteration + 1)

    def _finish_training(self, actor: NodeActor) -> None:
        actor.done = True
        actor.phase = "off"
        actor.mark(self.now, "off")
        self._check_boundaries()

    # ------------------------------------------------------------------
    # halts (stop-resume and the single-source barrier)

    def request_halt_all(self, session, exclude: tuple[NodeId, ...] = ()) -> None:
        for node in self.training_node_ids():
            if node in exclude:
                continue
            actor = self.actors[node]
            actor.halt_request = session
            if actor.phase == "idle":
                self._halt_now(actor, "pre_compute")

    def _maybe_halt(self, actor: NodeActor, point: str) -> bool:
        if actor.halt_request is None:
            return False
        self._halt_now(actor, point)
        return True

    def _halt_now(self, actor: NodeActor, point: str) -> None:
        session = actor.halt_request
        actor.phase = "halt"
        actor.halt_point = point
        actor.mark(self.now, "halt", session=getattr(session, "id", None))
        if session is not None:
            session.halted[actor.id] = self.now
            hook = getattr(session, "_on_halt_write", None)
            if hook is not None:
                hook(actor.id)

    def release_halt_all(self, session) -> None:
        for node in sorted(session.halted):
            actor = self.actors.get(node)
            if actor is None or actor.phase != "halt":
                continue
            actor.halt_request = None
            point, actor.halt_point = actor.halt_point, None
            if point == "pre_sync":
                self.enter_sync(actor)
            else:
                self.begin_iteration(actor, actor.iteration + 1)

    # ------------------------------------------------------------------
    # stop-resume choreography

    def run_stop_resume(self, session, new_node: NodeId) -> None:
        """Checkpoint, halt, reinitialize, reload, resume."""
        eng = self
        total = self.state.total_size
        participants = [n for n in self.training_node_ids() if n != new_node]
        if not participants:
            self._stop_resume_restart(session, new_node, self.now)
            return
        writes_done: dict[NodeId, float] = {}

        def node_halted_then_write(node: NodeId) -> None:
            actor = eng.actors[node]
            write_time = total / actor.profile.checkpoint_throughput
            eng.loop.schedule_in(write_time,
                                 lambda: write_finished(node),
                                 key=(node, RANK_TIMER))

        def write_finished(node: NodeId) -> None:
            writes_done[node] = eng.now
            eng.trace_event("checkpoint_written", node=node)
            if len(writes_done) == len(participants):
                eng._stop_resume_restart(session, new_node, eng.now)

        # each node starts its checkpoint write at its own halt instant
        session._on_halt_write = node_halted_then_write
        for node in participants:
            actor = self.actors[node]
            actor.halt_request = session
            if actor.phase in ("idle", "off"):
                self._halt_now(actor, "pre_compute")

    def _stop_resume_restart(self, session, new_node: NodeId,
                             at: float) -> None:
        def reload() -> None:
            actor = self.actors[new_node]
            read_time = self.state.total_size / actor.profile.checkpoint_throughput
            self.trace_event("cluster_restarted")
            self.loop.schedule_in(read_time, resume, key=(new_node, RANK_TIMER))

        def resume() -> None:
            self.trace_event("checkpoint_loaded", node=new_node)
            session.ready_time = self.now
            self.release_halt_all(session)
            self.start_joined_node(new_node, session.effective_iteration)

        self.loop.schedule_in(self.config.restart_cost, reload,
                              key=(SCHED_KEY, RANK_TIMER))

    # ------------------------------------------------------------------
    # the joining node

    def start_joined_node(self, node: NodeId, effective_iteration: int) -> None:
        actor = self.actors[node]
        actor.training = True
        if effective_iteration > actor.max_iterations:
            # cluster already finished training; nothing to join
            actor.done = True
            actor.mark(self.now, "off")
            self._check_boundaries()
            return
        actor.mark(self.now, None)
        self.begin_iteration(actor, effective_iteration)

    # ------------------------------------------------------------------
    # restart-all-reduce

    def broadcast_restart(self, policy: SyncPolicy) -> None:
        for node in self.training_node_ids():
            self.send_control("sched", node, MessageKind.RESTART_ALLREDUCE,
                              {"policy_version": policy.version},
                              lambda node=node: self._restart_at(node, policy))

    def _restart_at(self, node: NodeId, policy: SyncPolicy) -> None:
        actor = self.actors.get(node)
        if actor is None or not (actor.alive and actor.training) or actor.done:
            return
        if policy not in actor.known_policies:
            actor.known_policies.append(policy)
        if actor.phase != "sync":
            return
        iteration = actor.iteration
        for tr in list(actor.pending_out):
            self.cancel_transfer(tr)
        actor.pending_out.clear()
        self.trace_event("sync_restarted", node=node, iteration=iteration)
        self.enter_sync(actor)

    # ------------------------------------------------------------------
    # transfers

    def submit_transfer(self, req: TransferRequest,
                        on_complete: Callable[[Transfer], None] | None = None,
                        on_fail: Callable[[Transfer, str], None] | None = None) -> Transfer:
        def complete(tr: Transfer) -> None:
            self.live_transfers.pop(tr, None)
            if on_complete is not None:
                on_complete(tr)

        def fail(tr: Transfer, reason: str) -> None:
            self.live_transfers.pop(tr, None)
            if on_fail is not None:
                on_fail(tr, reason)

        tr = self.net.submit(req, complete, fail)
        if not tr.done:
            self.live_transfers[tr] = None
        return tr

    def cancel_transfer(self, tr: Transfer) -> None:
        self.live_transfers.pop(tr, None)
        self.net.cancel(tr)

    def _on_transfer_failed(self, tr: Transfer, reason: str) -> None:
        self.live_transfers.pop(tr, None)

    # ------------------------------------------------------------------
    # probes

    def probe_payload_size(self) -> float:
        if self.config.probe_size is not None:
            return self.config.probe_size
        return max(1.0, 1e-6 * self.state.total_size)

    def run_probe(self, a: NodeId, b: NodeId, ok: Callable[[], None],
                  dead: Callable[[], None]) -> None:
        """Round-trip probe over the link itself, then a report to the
        scheduler; the traffic queues behind whatever the link is doing."""
        size = self.probe_payload_size()

        def fail(tr: Transfer, reason: str) -> None:
            dead()

        def forward_done(tr: Transfer) -> None:
            back = TransferRequest(src=b, dst=a, size=size, path=(b, a),
                                   tag=TransferTag.PROBE)
            self.submit_transfer(back, on_complete=lambda t: report(),
                                 on_fail=fail)

        def report() -> None:
            self.send_control(a, "sched", MessageKind.ACK,
                              {"re": "probe", "link": [a, b]}, ok)

        fwd = TransferRequest(src=a, dst=b, size=size, path=(a, b),
                              tag=TransferTag.PROBE)
        self.submit_transfer(fwd, on_complete=forward_done, on_fail=fail)

    # ------------------------------------------------------------------
    # boundaries

    def await_node_sync(self, node: NodeId, cb: Callable[[], None]) -> None:
        actor = self.actors.get(node)
        if actor is None or not (actor.alive and actor.training) \
                or actor.done or actor.phase in ("off", "halt"):
            self.loop.schedule(self.now, cb)
            return
        self._node_sync_hooks.setdefault(node, []).append(cb)

    def await_global_boundary(self, iteration: int,
                              cb: Callable[[], None]) -> None:
        if self._boundary_satisfied(iteration):
            self.loop.schedule(self.now, cb)
        else:
            self._global_waiters.append((iteration, cb))

    def _boundary_satisfied(self, iteration: int) -> bool:
        for actor in self.actors.values():
            if not actor.alive or not actor.training:
                continue
            if actor.start_iteration > iteration:
                continue
            if actor.done:
                continue
            if actor.last_completed_sync < min(iteration, actor.max_iterations):
                return False
        return True

    def _check_boundaries(self) -> None:
        while self._boundary_satisfied(self._completed_through + 1) \
                and self._has_participants(self._completed_through + 1):
            self._completed_through += 1
            self.iteration_log.append((self._completed_through, self.now))
        ready = [(k, cb) for k, cb in self._global_waiters
                 if self._boundary_satisfied(k)]
        if ready:
            self._global_waiters = [(k, cb) for k, cb in self._global_waiters
                                    if not self._boundary_satisfied(k)]
            for _, cb in ready:
                self.loop.schedule(self.now, cb)

    def _has_participants(self, iteration: int) -> bool:
        return any(a.alive and a.training and a.start_iteration <= iteration
                   and iteration <= a.max_iterations
                   for a in self.actors.values()) \
            and iteration <= self.config.iterations

    # ------------------------------------------------------------------
    # heartbeats & liveness

    def _schedule_heartbeat(self, node: NodeId) -> None:
        interval = self.config.heartbeat.interval

        def beat() -> None:
            actor = self.actors.get(node)
            if actor is None or not actor.alive or node in self._silenced:
                return
            info = self.topology.nodes.get(node)
            if info is None or info.state not in (NodeState.ACTIVE,
                                                  NodeState.JOINING,
                                                  NodeState.LEAVING):
                return
            self.loop.schedule_in(
                self.config.control_delay,
                lambda: self.monitor.record_heartbeat(node, self.now),
                key=(SCHED_KEY, RANK_TIMER), housekeeping=True)
            if not self.finished():
                self.loop.schedule_in(interval, beat, key=(node, RANK_TIMER),
                                      housekeeping=True)

        self.loop.schedule_in(interval, beat, key=(node, RANK_TIMER),
                              housekeeping=True)

    def _schedule_liveness_check(self) -> None:
        interval = self.config.heartbeat.interval

        def check() -> None:
            self.monitor.check_liveness(self.now)
            if not self.finished():
                self.loop.schedule_in(interval, check,
                                      key=(SCHED_KEY, RANK_TIMER))

        self.loop.schedule_in(interval, check, key=(SCHED_KEY, RANK_TIMER))

    def _on_node_failure_detected(self, node: NodeId, at: float) -> None:
        self.negotiator.handle_node_failure(node, at)

    def measure_blocked_on(self, node: NodeId) -> dict[NodeId, float]:
        """Sync-wait time other nodes have accrued waiting on a dead node."""
        blocked: dict[NodeId, float] = {}
        for other, actor in sorted(self.actors.items()):
            if other == node or not (actor.alive and actor.training):
                continue
            if actor.phase == "sync" and node in actor.pending_in \
                    and actor._open_kind == "sync_wait":
                blocked[other] = self.now - actor._open_since
        return blocked

    # ------------------------------------------------------------------
    # scenario events

    def silence_node(self, node: NodeId) -> None:
        """Simulated crash: the node stops computing, sending, and beating."""
        self._silenced.add(node)
        actor = self.actors.get(node)
        if actor is not None:
            actor.alive = False
            if actor.compute_entry is not None:
                self.loop.cancel(actor.compute_entry)
                actor.compute_entry = None
            actor.mark(self.now, "off")
        self.trace_event("node_silenced", node=node)
        self._check_boundaries()

    def fail_link_ground_truth(self, a: NodeId, b: NodeId) -> None:
        self.trace_event("link_ground_truth_failed", link=(a, b))
        self.net.fail_link(a, b)

    def set_link_metrics(self, a: NodeId, b: NodeId,
                         metrics: LinkMetrics) -> None:
        self.catalog[(a, b)] = metrics
        self.catalog[(b, a)] = metrics
        for pair in ((a, b), (b, a)):
            if pair in self.net._links:
                self.net.set_metrics(*pair, metrics)
            if pair in self.topology.links:
                self.topology.links[pair] = metrics

    def post_scenario_event(self, at: float, fn: Callable[[], None]) -> None:
        self._scenario_pending += 1

        def run() -> None:
            self._scenario_pending -= 1
            fn()

        self.loop.schedule(at, run, key=(SCHED_KEY, RANK_TIMER))

    def finished(self) -> bool:
        if self._scenario_pending > 0:
            return False
        if self.negotiator.active_sessions():
            return False
        return all(a.done or not (a.alive and a.training)
                   for a in self.actors.values())

    def run(self) -> None:
        self.start_training()
        self.loop.run(until=self.config.max_time, stop_when_idle=True)
        for actor in self.actors.values():
            actor.mark(self.now, None)

    # ------------------------------------------------------------------
    # metrics assembly

    def _source_busy_union(self, sources: list[NodeId], lo: float,
                           hi: float) -> float:
        """Total time in [lo, hi] during which at least one source node is
        computing or actively exchanging all-reduce data."""
        spans: list[tuple[float, float]] = []
        for node in sources:
            actor = self.actors.get(node)
            if actor is None:
                continue
            for (t0, t1, kind, _detail) in actor.intervals_upto(self.now):
                if kind in ("compute", "sync_active") and t1 > lo and t0 < hi:
                    spans.append((max(t0, lo), min(t1, hi)))
        if not spans:
            return 0.0
        spans.sort()
        total = 0.0
        cur_lo, cur_hi = spans[0]
        for t0, t1 in spans[1:]:
            if t0 > cur_hi:
                total += cur_hi - cur_lo
                cur_lo, cur_hi = t0, t1
            else:
                cur_hi = max(cur_hi, t1)
        total += cur_hi - cur_lo
        return total

    def finalize_scaleout_metrics(self, session) -> None:
        new_node = session.subject
        actor = self.actors.get(new_node)
        rec = MetricsRecord(
            event_id=session.id, time=session.started_at,
            primitive=session.primitive.value,
            strategy=session.strategy.value if session.strategy else "",
            policy_version=session.policy_version or 0)

        first_sync_start = None
        if actor is not None:
            for (t0, _t1, kind, detail) in actor.intervals_upto(self.now):
                if kind in ("sync_active", "sync_wait"):
                    first_sync_start = t0
                    break
        ready = session.ready_time if session.ready_time is not None else self.now
        if first_sync_start is None:
            first_sync_start = ready + (actor.profile.compute_time if actor else 0.0)
        rec.scale_out_delay = first_sync_start - session.started_at

        dispatch = session.dispatch_time if session.dispatch_time is not None \
            else session.started_at
        rec.replication_delay = max(0.0, ready - dispatch)
        if session.strategy is not Strategy.STOP_RESUME:
            rec.hidden_delay = min(
                rec.replication_delay,
                self._source_busy_union(sorted(set(session.assigned)
                                               | set(session.sources)),
                                        dispatch, ready))

        idle: dict[NodeId, float] = {}
        # the joining node: window minus its own compute and state receive
        window = first_sync_start - session.started_at
        compute_in = 0.0
        if actor is not None:
            for (t0, t1, kind, _d) in actor.intervals_upto(self.now):
                if kind == "compute" and t0 >= session.started_at:
                    compute_in += min(t1, first_sync_start) - t0
        receive = self._receive_union(session)
        v_new_idle = max(0.0, window - compute_in - receive)
        if v_new_idle > 1e-12:
            idle[new_node] = v_new_idle
        # existing nodes: halts plus sync waits released by the new node
        for node, a in sorted(self.actors.items()):
            if node == new_node:
                continue
            acc = 0.0
            for (t0, t1, kind, detail) in a.intervals_upto(self.now):
                if t1 <= session.started_at:
                    continue
                if kind == "halt" and detail.get("session") == session.id:
                    acc += t1 - t0
                elif kind == "sync_wait" \
                        and detail.get("released_by") == new_node:
                    acc += t1 - t0
            if acc > 1e-12:
                idle[node] = idle.get(node, 0.0) + acc
        rec.per_node_idle = idle
        rec.cluster_idle_time = sum(idle.values(), 0.0)
        self.metrics.append(rec)
        self.trace_event("session_done", session=session.id,
                         primitive=session.primitive.value)

    def _receive_union(self, session) -> float:
        spans = []
        for tr in session.transfers:
            if tr.delivered_at is None or not tr.tx_starts:
                continue
            spans.append((tr.tx_starts[0], tr.delivered_at))
        if session.strategy is Strategy.STOP_RESUME \
                and session.ready_time is not None:
            actor = self.actors.get(session.subject)
            if actor is not None:
                read = self.state.total_size / actor.profile.checkpoint_throughput
                spans.append((session.ready_time - read, session.ready_time))
        if not spans:
            return 0.0
        spans.sort()
        total = 0.0
        cur_lo, cur_hi = spans[0]
        for t0, t1 in spans[1:]:
            if t0 > cur_hi:
                total += cur_hi - cur_lo
                cur_lo, cur_hi = t0, t1
            else:
                cur_hi = max(cur_hi, t1)
        return total + (cur_hi - cur_lo)

    def finalize_light_metrics(self, session) -> None:
        """Metrics for scale-in / connect-link / disconnect-link: the
        scale_out_delay column holds the training-visible delay."""
        idle = dict(session.blocked_idle)
        rec = MetricsRecord(
            event_id=session.id, time=session.started_at,
            primitive=session.primitive.value,
            strategy="failure" if session.failure else "graceful",
            scale_out_delay=session.visible_delay,
            policy_version=session.policy_version or 0,
            per_node_idle=idle)
        rec.cluster_idle_time = sum(idle.values(), 0.0)
        self.metrics.append(rec)
        self.trace_event("session_done", session=session.id,
                         primitive=session.primitive.value)
