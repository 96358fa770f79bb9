"""Peer negotiation protocols: scale-out, scale-in, connect-link, and
disconnect-link, including the node-failure and link-failure variants.

The scheduler drives every session. Graceful sessions serialize their
topology commits FIFO and gate them on all-reduce boundaries; failure
variants commit immediately and, when a sync is in flight, broadcast an
all-reduce restart. Sessions only mutate engine state through the engine's
commit helpers, which keeps the ordering auditable in the trace.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable

from .model import NodeId, NodeState, split_state
from .network import TransferRequest, TransferTag
from .scheduler import SchedulerInput, binary_search_assign, greedy_sequence
from .training import Strategy, multi_source_requests, single_source_choice

if TYPE_CHECKING:  # pragma: no cover
    from .engine import Engine


class MessageKind(enum.Enum):
    JOIN_REQUEST = "JoinRequest"
    LEAVE_REQUEST = "LeaveRequest"
    LINK_JOIN_REQUEST = "LinkJoinRequest"
    LINK_LEAVE_REQUEST = "LinkLeaveRequest"
    CONNECT_CMD = "ConnectCmd"
    DISCONNECT_CMD = "DisconnectCmd"
    REPLICATION_POLICY = "ReplicationPolicy"
    SYNC_POLICY_UPDATE = "SyncPolicyUpdate"
    RESTART_ALLREDUCE = "RestartAllReduce"
    ACK = "Ack"


class Primitive(enum.Enum):
    SCALE_OUT = "scale_out"
    SCALE_IN = "scale_in"
    CONNECT_LINK = "connect_link"
    DISCONNECT_LINK = "disconnect_link"


class Phase(enum.Enum):
    CONNECTING = "connecting"
    MEASURING = "measuring"
    AWAITING_BARRIER = "awaiting_barrier"
    REPLICATING = "replicating"
    COMMITTED = "committed"
    REJECTED = "rejected"
    DONE = "done"


@dataclass
class NegotiationSession:
    """One scaling primitive in flight."""

    id: int
    primitive: Primitive
    subject: object  # NodeId or (NodeId, NodeId)
    started_at: float
    strategy: Strategy | None = None
    phase: Phase = Phase.CONNECTING
    failure: bool = False
    # scale-out bookkeeping
    sources: list[NodeId] = field(default_factory=list)
    assigned: dict[NodeId, list[int]] = field(default_factory=dict)
    shard_sizes: dict[int, int] = field(default_factory=dict)
    ms_paths: dict[int, tuple[NodeId, ...]] = field(default_factory=dict)
    delivered: set[int] = field(default_factory=set)
    transfers: list = field(default_factory=list)
    solver_input: SchedulerInput | None = None
    dispatch_time: float | None = None
    ready_time: float | None = None
    effective_iteration: int | None = None
    policy_version: int | None = None
    halted: dict[NodeId, float] = field(default_factory=dict)
    visible_delay: float = 0.0
    blocked_idle: dict[NodeId, float] = field(default_factory=dict)
    _on_halt_write: Callable[[NodeId], None] | None = None

    @property
    def terminal(self) -> bool:
        return self.phase in (Phase.DONE, Phase.REJECTED)


class Negotiator:
    """Protocol engine living next to the scheduler."""

    def __init__(self, engine: "Engine") -> None:
        self.engine = engine
        self.sessions: list[NegotiationSession] = []
        self._next_id = 1
        self._commit_queue: list[Callable[[], None]] = []
        self._commit_busy = False
        self._handled_link_failures: set[tuple[NodeId, NodeId]] = set()

    # ------------------------------------------------------------------
    # plumbing

    def _new_session(self, primitive: Primitive, subject: object,
                     strategy: Strategy | None = None) -> NegotiationSession:
        s = NegotiationSession(id=self._next_id, primitive=primitive,
                               subject=subject, strategy=strategy,
                               started_at=self.engine.now)
        self._next_id += 1
        self.sessions.append(s)
        return s

    def active_sessions(self) -> list[NegotiationSession]:
        return [s for s in self.sessions if not s.terminal]

    def _enqueue_commit(self, fn: Callable[[], None]) -> None:
        """Graceful commits run one at a time, FIFO by readiness."""
        self._commit_queue.append(fn)
        self._pump_commits()

    def _pump_commits(self) -> None:
        if self._commit_busy or not self._commit_queue:
            return
        self._commit_busy = True
        fn = self._commit_queue.pop(0)
        fn()

    def _commit_done(self) -> None:
        self._commit_busy = False
        self._pump_commits()

    # ------------------------------------------------------------------
    # scale-out

    def handle_join(self, new_node: NodeId, wanted: list[NodeId],
                    strategy: Strategy | None = None) -> NegotiationSession:
        """Join-request-initiated scale-out; no admin involved."""
        eng = self.engine
        strategy = strategy or eng.config.strategy
        session = self._new_session(Primitive.SCALE_OUT, new_node, strategy)
        eng.prepare_boot_node(new_node)
        eng.send_control(new_node, "sched", MessageKind.JOIN_REQUEST,
                         {"node": new_node, "neighbors": list(wanted)},
                         lambda: self._join_connect(session, new_node, wanted))
        return session

    def _join_connect(self, session: NegotiationSession, new_node: NodeId,
                      wanted: list[NodeId]) -> None:
        eng = self.engine
        info = eng.topology.nodes.get(new_node)
        if info is not None:
            info.state = NodeState.JOINING
        usable = []
        for u in sorted(set(wanted)):
            node = eng.topology.nodes.get(u)
            if node is None or node.state != NodeState.ACTIVE:
                eng.trace_event("neighbor_dropped", node=u, reason="not active")
                continue
            if eng.link_metrics_for(u, new_node) is None:
                eng.trace_event("neighbor_dropped", node=u, reason="no declared link")
                continue
            usable.append(u)
        if not usable:
            self._reject_join(session, new_node, "no usable neighbors")
            return
        session.sources = usable
        pending = set(usable)

        def on_ack(u: NodeId) -> None:
            pending.discard(u)
            if not pending:
                self._join_measure(session, new_node)

        def on_cmd(u: NodeId) -> None:
            eng.establish_link(u, new_node)
            eng.send_control(u, "sched", MessageKind.ACK,
                             {"re": "connect", "link": [u, new_node]},
                             lambda u=u: on_ack(u))

        for u in usable:
            eng.send_control("sched", u, MessageKind.CONNECT_CMD,
                             {"peer": new_node}, lambda u=u: on_cmd(u))

    def _reject_join(self, session: NegotiationSession, new_node: NodeId,
                     reason: str) -> None:
        eng = self.engine
        session.phase = Phase.REJECTED
        eng.trace_event("join_rejected", node=new_node, reason=reason)
        eng.send_control("sched", new_node, MessageKind.ACK,
                         {"re": "join", "ok": False, "reason": reason},
                         lambda: eng.retire_boot_node(new_node))

    def _join_measure(self, session: NegotiationSession, new_node: NodeId) -> None:
        eng = self.engine
        if session.strategy is Strategy.STOP_RESUME:
            self._enqueue_commit(lambda: self._join_dispatch(session, new_node))
            return
        session.phase = Phase.MEASURING
        outcome: dict[NodeId, bool] = {}

        def probe_done(u: NodeId, ok: bool) -> None:
            outcome[u] = ok
            if len(outcome) < len(session.sources):
                return
            survivors = [v for v in session.sources if outcome[v]]
            for v in session.sources:
                if not outcome[v]:
                    self.handle_link_failure((v, new_node))
            session.sources = survivors
            if not survivors:
                self._reject_join(session, new_node, "all neighbor links failed")
                return
            session.solver_input = eng.monitor.measure_for_scaleout(
                new_node, survivors, eng.state, eng.now)
            self._enqueue_commit(lambda: self._join_dispatch(session, new_node))

        for u in list(session.sources):
            eng.run_probe(u, new_node,
                          lambda u=u: probe_done(u, True),
                          lambda u=u: probe_done(u, False))

    def _join_dispatch(self, session: NegotiationSession, new_node: NodeId) -> None:
        """Hold the commit slot until the scheduler node's current all-reduce
        completes, then dispatch policies."""
        eng = self.engine
        session.phase = Phase.AWAITING_BARRIER
        eng.await_node_sync(eng.scheduler_node,
                            lambda: self._join_commit(session, new_node))

    def _join_commit(self, session: NegotiationSession, new_node: NodeId) -> None:
        eng = self.engine
        if session.strategy is Strategy.STOP_RESUME:
            self._join_commit_stop_resume(session, new_node)
            return

        input = session.solver_input
        effective = eng.next_effective_iteration()
        eng.activate_node(new_node, start_iteration=effective)
        policy = eng.issue_policy(effective)
        session.effective_iteration = effective
        session.policy_version = policy.version
        session.dispatch_time = eng.now
        session.phase = Phase.REPLICATING

        if session.strategy is Strategy.MULTI_NEIGHBOR:
            plan = binary_search_assign(input, eng.config.min_shard_size)
            shards = split_state(eng.state, plan.shard_size)
            session.assigned = {u: sorted(plan.assignment.get(u, ()))
                                for u in session.sources}
            session.shard_sizes = {j: shards.size_of(j)
                                   for j in range(shards.count)}
        elif session.strategy is Strategy.SINGLE_SOURCE:
            src = single_source_choice(input)
            session.sources = [src]
            session.assigned = {src: [0]}
            session.shard_sizes = {0: eng.state.total_size}
        else:  # MULTI_SOURCE: even contiguous parts from every active node
            requests = multi_source_requests(
                eng.monitor.topology_snapshot(eng.now), new_node, eng.state)
            session.sources = [r.src for r in requests]
            session.assigned = {r.src: [int(r.meta["part"])] for r in requests}
            session.shard_sizes = {int(r.meta["part"]): int(r.size)
                                   for r in requests}
            session.ms_paths = {int(r.meta["part"]): r.path for r in requests}

        for u in session.sources:
            eng.send_control(
                "sched", u, MessageKind.REPLICATION_POLICY,
                {"shards": session.assigned[u], "to": new_node},
                lambda u=u: self._start_stream_when_free(session, u, new_node))
        eng.send_control("sched", new_node, MessageKind.REPLICATION_POLICY,
                         {"await": sum(len(v) for v in session.assigned.values())})
        eng.broadcast_policy(policy, include=[new_node])
        if session.strategy is Strategy.SINGLE_SOURCE \
                and eng.config.single_source_barrier:
            eng.request_halt_all(session, exclude=(new_node,))
        eng.await_global_boundary(effective,
                                  lambda: self._join_finalize(session, new_node))
        self._commit_done()

    def _start_stream_when_free(self, session: NegotiationSession, u: NodeId,
                                new_node: NodeId) -> None:
        """Shard streaming starts after the source's own current all-reduce."""
        eng = self.engine
        actor = eng.actors.get(u)
        if actor is not None and actor.phase == "sync":
            eng.await_node_sync(u, lambda: self._stream(session, u, new_node))
        else:
            self._stream(session, u, new_node)

    def _stream(self, session: NegotiationSession, u: NodeId,
                new_node: NodeId) -> None:
        eng = self.engine
        if session.terminal:
            return
        for j in session.assigned.get(u, []):
            if j in session.delivered:
                continue
            path = session.ms_paths.get(j, (u, new_node))
            req = TransferRequest(src=u, dst=new_node,
                                  size=session.shard_sizes[j], path=tuple(path),
                                  tag=TransferTag.STATE_SHARD,
                                  meta={"shard": j, "session": session.id})
            tr = eng.submit_transfer(
                req,
                on_complete=lambda tr, s=session: self._shard_delivered(s, tr),
                on_fail=lambda tr, reason, s=session: self._shard_failed(s, tr, reason))
            session.transfers.append(tr)

    def _shard_delivered(self, session: NegotiationSession, tr) -> None:
        session.delivered.add(int(tr.req.meta["shard"]))
        if len(session.delivered) == len(session.shard_sizes):
            self._replication_complete(session)

    def _shard_failed(self, session: NegotiationSession, tr, reason: str) -> None:
        if session.terminal:
            return
        self.engine.trace_event("shard_transfer_failed",
                                shard=tr.req.meta["shard"],
                                source=tr.req.src, reason=reason)
        self._replan_source(session, tr.req.src)

    def _replan_source(self, session: NegotiationSession, dead: NodeId) -> None:
        """Reassign a lost source's undelivered shards over the survivors,
        seeding the greedy sweep with each survivor's remaining backlog."""
        eng = self.engine
        if dead not in session.assigned or session.terminal:
            return
        orphan = sorted(j for j in session.assigned.pop(dead, [])
                        if j not in session.delivered)
        session.sources = [u for u in session.sources if u != dead]
        for tr in session.transfers:
            if tr.req.src == dead and not tr.done:
                eng.cancel_transfer(tr)
        if not orphan:
            return
        new_node = session.subject
        survivors = [u for u in session.sources
                     if eng.network_has_link(u, new_node)]
        if not survivors:
            session.phase = Phase.REJECTED
            eng.trace_event("scale_out_failed", node=new_node,
                            reason="all replication sources lost")
            eng.retire_boot_node(new_node)
            return
        base, trans = [], []
        for u in survivors:
            backlog = sum(session.shard_sizes[j]
                          for j in session.assigned.get(u, [])
                          if j not in session.delivered)
            m = eng.link_metrics_for(u, new_node)
            base.append(backlog * m.trans_delay_per_unit)
            trans.append(m.trans_delay_per_unit)
        sizes = [session.shard_sizes[j] for j in orphan]
        choice = greedy_sequence(base, trans, sizes)
        for j, pick in zip(orphan, choice):
            session.assigned.setdefault(survivors[pick], []).append(j)
        for u in sorted({survivors[p] for p in choice}):
            eng.send_control("sched", u, MessageKind.REPLICATION_POLICY,
                             {"shards": sorted(session.assigned[u]),
                              "to": new_node, "replan": True},
                             lambda u=u: self._stream_replanned(session, u))

    def _stream_replanned(self, session: NegotiationSession, u: NodeId) -> None:
        eng = self.engine
        if session.terminal:
            return
        new_node = session.subject
        streamed = {int(t.req.meta["shard"]) for t in session.transfers
                    if t.req.src == u and not t.failed}
        for j in sorted(session.assigned.get(u, [])):
            if j in session.delivered or j in streamed:
                continue
            req = TransferRequest(src=u, dst=new_node,
                                  size=session.shard_sizes[j],
                                  path=(u, new_node), tag=TransferTag.STATE_SHARD,
                                  meta={"shard": j, "session": session.id})
            tr = eng.submit_transfer(
                req,
                on_complete=lambda tr, s=session: self._shard_delivered(s, tr),
                on_fail=lambda tr, reason, s=session: self._shard_failed(s, tr, reason))
            session.transfers.append(tr)

    def _replication_complete(self, session: NegotiationSession) -> None:
        eng = self.engine
        new_node = session.subject
        session.ready_time = eng.now
        eng.trace_event("replication_complete", node=new_node)
        if session.strategy is Strategy.SINGLE_SOURCE \
                and eng.config.single_source_barrier:
            eng.release_halt_all(session)
        eng.start_joined_node(new_node, session.effective_iteration)

    def _join_finalize(self, session: NegotiationSession, new_node: NodeId) -> None:
        if session.terminal:
            return
        session.phase = Phase.DONE
        self.engine.finalize_scaleout_metrics(session)

    # -- stop-resume -----------------------------------------------------

    def _join_commit_stop_resume(self, session: NegotiationSession,
                                 new_node: NodeId) -> None:
        eng = self.engine
        effective = eng.next_effective_iteration()
        eng.activate_node(new_node, start_iteration=effective)
        policy = eng.issue_policy(effective)
        session.effective_iteration = effective
        session.policy_version = policy.version
        session.dispatch_time = eng.now
        session.phase = Phase.REPLICATING
        for u in eng.training_node_ids():
            if u != new_node:
                eng.send_control("sched", u, MessageKind.REPLICATION_POLICY,
                                 {"mode": "checkpoint"})
        eng.broadcast_policy(policy, include=[new_node])
        eng.run_stop_resume(session, new_node)
        eng.await_global_boundary(effective,
                                  lambda: self._join_finalize(session, new_node))
        self._commit_done()

    # ------------------------------------------------------------------
    # scale-in

    def handle_leave(self, node: NodeId) -> NegotiationSession:
        session = self._new_session(Primitive.SCALE_IN, node)
        eng = self.engine
        eng.send_control(node, "sched", MessageKind.LEAVE_REQUEST, {"node": node},
                         lambda: self._enqueue_commit(
                             lambda: self._leave_ready(session, node)))
        return session

    def _leave_ready(self, session: NegotiationSession, node: NodeId) -> None:
        eng = self.engine
        info = eng.topology.nodes.get(node)
        if info is None or info.state != NodeState.ACTIVE:
            session.phase = Phase.REJECTED
            eng.trace_event("leave_rejected", node=node, reason="not active")
            self._commit_done()
            return
        session.phase = Phase.AWAITING_BARRIER
        eng.await_node_sync(eng.scheduler_node,
                            lambda: self._leave_policy(session, node))

    def _leave_policy(self, session: NegotiationSession, node: NodeId) -> None:
        eng = self.engine
        info = eng.topology.nodes.get(node)
        info.state = NodeState.LEAVING
        effective = eng.next_effective_iteration()
        session.effective_iteration = effective
        eng.cap_iterations(node, effective - 1)
        policy = eng.issue_policy(effective)
        session.policy_version = policy.version
        eng.broadcast_policy(policy, include=[node])
        self._commit_done()
        eng.await_global_boundary(effective - 1,
                                  lambda: self._leave_commit(session, node))

    def _leave_commit(self, session: NegotiationSession, node: NodeId) -> None:
        eng = self.engine
        session.dispatch_time = eng.now
        pending = set(sorted(eng.topology.neighbors_of(node))) | {node}

        def acked(peer: NodeId) -> None:
            pending.discard(peer)
            if not pending:
                eng.detach_node(node, NodeState.STANDBY)
                session.phase = Phase.DONE
                eng.trace_event("scale_in_complete", node=node)
                eng.finalize_light_metrics(session)

        for peer in sorted(pending):
            eng.send_control("sched", peer, MessageKind.DISCONNECT_CMD,
                             {"node": node},
                             lambda peer=peer: eng.send_control(
                                 peer, "sched", MessageKind.ACK,
                                 {"re": "disconnect", "node": node},
                                 lambda peer=peer: acked(peer)))

    # ------------------------------------------------------------------
    # node failure (detected by heartbeat loss)

    def handle_node_failure(self, node: NodeId,
                            detected_at: float) -> NegotiationSession | None:
        eng = self.engine
        if eng.topology.nodes.get(node) is None:
            return None
        session = self._new_session(Primitive.SCALE_IN, node)
        session.failure = True
        eng.trace_event("node_failure", node=node, detected_at=detected_at)

        session.blocked_idle = eng.measure_blocked_on(node)
        session.visible_delay = sum(session.blocked_idle.values())

        syncing = eng.any_sync_in_flight()
        eng.detach_node(node, NodeState.FAILED)
        effective = eng.min_current_iteration() if syncing \
            else eng.next_effective_iteration()
        session.effective_iteration = effective
        policy = eng.issue_policy(effective)
        session.policy_version = policy.version
        eng.broadcast_policy(policy)
        if syncing:
            eng.broadcast_restart(policy)
        session.dispatch_time = eng.now
        session.phase = Phase.DONE
        eng.finalize_light_metrics(session)
        # a dead replication source triggers a replan in its sessions
        for s in self.active_sessions():
            if s.primitive is Primitive.SCALE_OUT and node in s.assigned:
                self._replan_source(s, node)
        return session

    # ------------------------------------------------------------------
    # connect-link

    def handle_connect_link(self, a: NodeId, b: NodeId) -> NegotiationSession:
        session = self._new_session(Primitive.CONNECT_LINK, (a, b))
        eng = self.engine
        eng.send_control(a, "sched", MessageKind.LINK_JOIN_REQUEST,
                         {"from": a, "to": b},
                         lambda: self._connect_sockets(session, a, b))
        return session

    def _connect_sockets(self, session: NegotiationSession, a: NodeId,
                         b: NodeId) -> None:
        eng = self.engine
        for end in (a, b):
            info = eng.topology.nodes.get(end)
            if info is None or info.state != NodeState.ACTIVE:
                session.phase = Phase.REJECTED
                eng.send_control("sched", a, MessageKind.ACK,
                                 {"re": "connect_link", "ok": False,
                                  "reason": f"endpoint {end} not active"})
                return
        if eng.topology.has_link(a, b):
            session.phase = Phase.DONE
            eng.send_control("sched", a, MessageKind.ACK,
                             {"re": "connect_link", "ok": True, "noop": True})
            eng.finalize_light_metrics(session)
            return
        if eng.link_metrics_for(a, b) is None:
            session.phase = Phase.REJECTED
            eng.send_control("sched", a, MessageKind.ACK,
                             {"re": "connect_link", "ok": False,
                              "reason": "no declared metrics"})
            return
        pending = {a, b}

        def acked(end: NodeId) -> None:
            pending.discard(end)
            if not pending:
                eng.establish_link(a, b)
                self._connect_probe(session, a, b)

        def on_cmd(end: NodeId) -> None:
            eng.send_control(end, "sched", MessageKind.ACK,
                             {"re": "connect", "link": [a, b]},
                             lambda end=end: acked(end))

        for end in sorted((a, b)):
            eng.send_control("sched", end, MessageKind.CONNECT_CMD,
                             {"peer": b if end == a else a},
                             lambda end=end: on_cmd(end))

    def _connect_probe(self, session: NegotiationSession, a: NodeId,
                       b: NodeId) -> None:
        """Monitoring happens once the link is up; a dead probe tears the
        socket straight back down."""
        session.phase = Phase.MEASURING
        eng = self.engine

        def ok() -> None:
            self._enqueue_commit(lambda: self._connect_barrier(session, a, b))

        def dead() -> None:
            session.phase = Phase.REJECTED
            eng.trace_event("connect_link_failed", link=(a, b),
                            reason="probe failed")
            self.handle_link_failure((a, b))

        eng.run_probe(a, b, ok, dead)

    def _connect_barrier(self, session: NegotiationSession, a: NodeId,
                         b: NodeId) -> None:
        eng = self.engine
        session.phase = Phase.AWAITING_BARRIER
        eng.await_node_sync(eng.scheduler_node,
                            lambda: self._connect_commit(session, a, b))

    def _connect_commit(self, session: NegotiationSession, a: NodeId,
                        b: NodeId) -> None:
        eng = self.engine
        effective = eng.next_effective_iteration()
        session.effective_iteration = effective
        policy = eng.issue_policy(effective)
        session.policy_version = policy.version
        session.dispatch_time = eng.now
        eng.broadcast_policy(policy)
        session.phase = Phase.DONE
        eng.trace_event("connect_link_complete", link=(a, b))
        eng.finalize_light_metrics(session)
        self._commit_done()

    # ------------------------------------------------------------------
    # disconnect-link

    def handle_disconnect_link(self, a: NodeId, b: NodeId) -> NegotiationSession:
        session = self._new_session(Primitive.DISCONNECT_LINK, (a, b))
        eng = self.engine
        eng.send_control(a, "sched", MessageKind.LINK_LEAVE_REQUEST,
                         {"from": a, "to": b},
                         lambda: self._disconnect_check(session, a, b))
        return session

    def _disconnect_check(self, session: NegotiationSession, a: NodeId,
                          b: NodeId) -> None:
        eng = self.engine
        if not eng.topology.has_link(a, b):
            session.phase = Phase.REJECTED
            eng.send_control("sched", a, MessageKind.ACK,
                             {"re": "disconnect_link", "ok": False,
                              "reason": "no such link"})
            return
        if not eng.removal_keeps_connectivity(a, b):
            session.phase = Phase.REJECTED
            eng.trace_event("disconnect_rejected", link=(a, b),
                            reason="ClusterPartition")
            eng.send_control("sched", a, MessageKind.ACK,
                             {"re": "disconnect_link", "ok": False,
                              "reason": "ClusterPartition"})
            return
        self._enqueue_commit(lambda: self._disconnect_barrier(session, a, b))

    def _disconnect_barrier(self, session: NegotiationSession, a: NodeId,
                            b: NodeId) -> None:
        eng = self.engine
        session.phase = Phase.AWAITING_BARRIER
        eng.await_node_sync(eng.scheduler_node,
                            lambda: self._disconnect_policy(session, a, b))

    def _disconnect_policy(self, session: NegotiationSession, a: NodeId,
                           b: NodeId) -> None:
        eng = self.engine
        effective = eng.next_effective_iteration()
        session.effective_iteration = effective
        policy = eng.issue_policy(effective, exclude_links={(a, b)})
        session.policy_version = policy.version
        eng.broadcast_policy(policy)
        self._commit_done()
        eng.await_global_boundary(effective - 1,
                                  lambda: self._disconnect_commit(session, a, b))

    def _disconnect_commit(self, session: NegotiationSession, a: NodeId,
                           b: NodeId) -> None:
        eng = self.engine
        session.dispatch_time = eng.now
        pending = {a, b}

        def acked(end: NodeId) -> None:
            pending.discard(end)
            if not pending:
                eng.teardown_link(a, b)
                session.phase = Phase.DONE
                eng.trace_event("disconnect_link_complete", link=(a, b))
                eng.finalize_light_metrics(session)

        for end in sorted((a, b)):
            eng.send_control("sched", end, MessageKind.DISCONNECT_CMD,
                             {"link": [a, b]},
                             lambda end=end: eng.send_control(
                                 end, "sched", MessageKind.ACK,
                                 {"re": "disconnect", "link": [a, b]},
                                 lambda end=end: acked(end)))

    # ------------------------------------------------------------------
    # link failure (probe or in-flight transfer died)

    def handle_link_failure(self, link: tuple[NodeId, NodeId]) -> NegotiationSession | None:
        eng = self.engine
        a, b = min(link), max(link)
        if (a, b) in self._handled_link_failures:
            return None
        self._handled_link_failures.add((a, b))
        eng.trace_event("link_failure", link=(a, b))
        in_policy = b in eng.current_policy_schedule(a)
        session = self._new_session(Primitive.DISCONNECT_LINK, (a, b))
        session.failure = True
        eng.send_control(a, "sched", MessageKind.LINK_LEAVE_REQUEST,
                         {"from": a, "to": b, "failure": True},
                         lambda: self._link_failure_commit(session, a, b,
                                                           in_policy))
        return session

    def _link_failure_commit(self, session: NegotiationSession, a: NodeId,
                             b: NodeId, in_policy: bool) -> None:
        eng = self.engine
        eng.teardown_link(a, b)
        if in_policy:
            syncing = eng.any_sync_in_flight()
            effective = eng.min_current_iteration() if syncing \
                else eng.next_effective_iteration()
            session.effective_iteration = effective
            policy = eng.issue_policy(effective)
            session.policy_version = policy.version
            eng.broadcast_policy(policy)
            if syncing:
                eng.broadcast_restart(policy)
        session.dispatch_time = eng.now
        session.phase = Phase.DONE
        eng.finalize_light_metrics(session)
