"""Event-driven overlay network: per-link FIFO serialization, store-and-forward
multi-hop paths, and helpers for routing and coflow completion.

Contention model: a directed link transmits at most one transfer at a time
(transmission occupies the link for size * trans; propagation overlaps the
next transmission), distinct links are fully parallel, and there is no
cross-link bandwidth sharing. Multi-hop transfers are store-and-forward: each
hop receives the full payload before forwarding.
"""

from __future__ import annotations

import enum
import heapq
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Mapping

from .events import EventLoop
from .model import LinkMetrics, NodeId, OverlayTopology


class NoRouteError(Exception):
    """No path exists between the requested endpoints."""


class TransferTag(enum.Enum):
    STATE_SHARD = "shard"
    CONTROL = "control"
    ALLREDUCE_CHUNK = "allreduce"
    PROBE = "probe"
    HEARTBEAT = "heartbeat"


@dataclass(frozen=True)
class TransferRequest:
    """A point-to-point or multi-hop payload movement."""

    src: NodeId
    dst: NodeId
    size: float
    path: tuple[NodeId, ...]
    tag: TransferTag
    meta: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.path) < 2:
            raise ValueError("path needs at least two nodes")
        if self.path[0] != self.src or self.path[-1] != self.dst:
            raise ValueError("src/dst must be the path endpoints")
        if self.size < 0:
            raise ValueError("size must be >= 0")


class Transfer:
    """In-flight state for one request."""

    __slots__ = ("req", "submitted_at", "hop", "tx_starts", "hop_deliveries",
                 "delivered_at", "failed", "fail_reason", "on_complete",
                 "on_fail", "_token")

    def __init__(self, req: TransferRequest, submitted_at: float,
                 on_complete: Callable[["Transfer"], None] | None,
                 on_fail: Callable[["Transfer", str], None] | None) -> None:
        self.req = req
        self.submitted_at = submitted_at
        self.hop = 0
        self.tx_starts: list[float] = []
        self.hop_deliveries: list[float] = []
        self.delivered_at: float | None = None
        self.failed = False
        self.fail_reason: str | None = None
        self.on_complete = on_complete
        self.on_fail = on_fail
        self._token = 0

    @property
    def done(self) -> bool:
        return self.delivered_at is not None or self.failed

    @property
    def first_tx_start(self) -> float | None:
        return self.tx_starts[0] if self.tx_starts else None

    def _invalidate(self) -> int:
        self._token += 1
        return self._token


class _Link:
    __slots__ = ("metrics", "failed", "current", "queue")

    def __init__(self, metrics: LinkMetrics) -> None:
        self.metrics = metrics
        self.failed = False
        self.current: Transfer | None = None
        self.queue: deque[Transfer] = deque()


def direct_transfer_delay(link: LinkMetrics, size: float) -> float:
    """Unqueued delay over one link: propagation plus transmission."""
    if size < 0:
        raise ValueError("size must be >= 0")
    return link.prop_delay + size * link.trans_delay_per_unit


class Network:
    """Ground-truth link state plus the FIFO transmission machinery."""

    # event-kind ranks for the deterministic same-instant ordering
    RANK_TX_END = 0
    RANK_DELIVERY = 1

    def __init__(self, loop: EventLoop) -> None:
        self.loop = loop
        self._links: dict[tuple[NodeId, NodeId], _Link] = {}
        self.on_transfer_failed: list[Callable[[Transfer, str], None]] = []

    # -- link lifecycle ----------------------------------------------------

    def add_link(self, a: NodeId, b: NodeId, metrics: LinkMetrics,
                 reverse: LinkMetrics | None = None) -> None:
        self._links[(a, b)] = _Link(metrics)
        self._links[(b, a)] = _Link(reverse if reverse is not None else metrics)

    def has_link(self, a: NodeId, b: NodeId) -> bool:
        link = self._links.get((a, b))
        return link is not None and not link.failed

    def metrics(self, a: NodeId, b: NodeId) -> LinkMetrics:
        return self._links[(a, b)].metrics

    def set_metrics(self, a: NodeId, b: NodeId, metrics: LinkMetrics) -> None:
        self._links[(a, b)].metrics = metrics

    def links_view(self) -> dict[tuple[NodeId, NodeId], LinkMetrics]:
        return {pair: link.metrics for pair, link in self._links.items()
                if not link.failed}

    def fail_link(self, a: NodeId, b: NodeId) -> None:
        """Mark both directions dead; everything on them fails immediately."""
        for pair in ((a, b), (b, a)):
            link = self._links.get(pair)
            if link is None or link.failed:
                continue
            link.failed = True
            self._flush(link, "link failed")

    def remove_link(self, a: NodeId, b: NodeId) -> None:
        for pair in ((a, b), (b, a)):
            link = self._links.pop(pair, None)
            if link is not None:
                self._flush(link, "link removed")

    def _flush(self, link: _Link, reason: str) -> None:
        victims = []
        if link.current is not None:
            victims.append(link.current)
            link.current = None
        victims.extend(t for t in link.queue if not t.done)
        link.queue.clear()
        for tr in victims:
            self._fail_transfer(tr, reason)

    # -- transfers ---------------------------------------------------------

    def submit(self, req: TransferRequest,
               on_complete: Callable[[Transfer], None] | None = None,
               on_fail: Callable[[Transfer, str], None] | None = None) -> Transfer:
        tr = Transfer(req, self.loop.now, on_complete, on_fail)
        self._arrive(tr, 0, self.loop.now)
        return tr

    def cancel(self, tr: Transfer) -> None:
        """Drop an in-flight transfer without emitting a failure event."""
        if tr.done:
            return
        tr.failed = True
        tr.fail_reason = "cancelled"
        tr._invalidate()
        hop_pair = self._current_hop_pair(tr)
        link = self._links.get(hop_pair) if hop_pair else None
        if link is not None:
            if link.current is tr:
                link.current = None
                self._start_next(link, hop_pair)
            else:
                try:
                    link.queue.remove(tr)
                except ValueError:
                    pass

    def _current_hop_pair(self, tr: Transfer) -> tuple[NodeId, NodeId] | None:
        path = tr.req.path
        if tr.hop >= len(path) - 1:
            return None
        return (path[tr.hop], path[tr.hop + 1])

    def _fail_transfer(self, tr: Transfer, reason: str) -> None:
        if tr.done:
            return
        tr.failed = True
        tr.fail_reason = reason
        tr._invalidate()
        if tr.on_fail is not None:
            tr.on_fail(tr, reason)
        for cb in self.on_transfer_failed:
            cb(tr, reason)

    def _arrive(self, tr: Transfer, hop: int, at: float) -> None:
        if tr.done:
            return
        tr.hop = hop
        path = tr.req.path
        if hop == len(path) - 1:
            tr.delivered_at = at
            if tr.on_complete is not None:
                tr.on_complete(tr)
            return
        pair = (path[hop], path[hop + 1])
        link = self._links.get(pair)
        if link is None or link.failed:
            self._fail_transfer(tr, f"no usable link {pair}")
            return
        if link.current is None:
            self._begin_tx(link, pair, tr)
        else:
            link.queue.append(tr)

    def _begin_tx(self, link: _Link, pair: tuple[NodeId, NodeId],
                  tr: Transfer) -> None:
        link.current = tr
        now = self.loop.now
        tr.tx_starts.append(now)
        m = link.metrics
        tx_end = now + tr.req.size * m.trans_delay_per_unit
        delivery = tx_end + m.prop_delay
        token = tr._invalidate()

        def end_tx() -> None:
            if link.current is tr:
                link.current = None
                self._start_next(link, pair)

        def deliver() -> None:
            if tr._token == token and not tr.done:
                tr.hop_deliveries.append(delivery)
                self._arrive(tr, tr.hop + 1, delivery)

        self.loop.schedule(tx_end, end_tx, key=(pair[0], self.RANK_TX_END))
        self.loop.schedule(delivery, deliver, key=(pair[1], self.RANK_DELIVERY))

    def _start_next(self, link: _Link, pair: tuple[NodeId, NodeId]) -> None:
        while link.queue:
            nxt = link.queue.popleft()
            if not nxt.done:
                self._begin_tx(link, pair, nxt)
                return


def shortest_path(topo: OverlayTopology, src: NodeId, dst: NodeId,
                  size: float) -> tuple[list[NodeId], float]:
    """Minimum store-and-forward delay path between two active nodes.

    Hop weight is prop + size * trans; ties break to the lexicographically
    smallest path so routing is deterministic.
    """
    if src == dst:
        raise ValueError("src and dst must differ")
    active = set(topo.active_nodes())
    if src not in active or dst not in active:
        raise NoRouteError(f"{src} -> {dst}: endpoint not active")
    heap: list[tuple[float, tuple[NodeId, ...]]] = [(0.0, (src,))]
    settled: set[NodeId] = set()
    while heap:
        dist, path = heapq.heappop(heap)
        node = path[-1]
        if node in settled:
            continue
        settled.add(node)
        if node == dst:
            return list(path), dist
        for nxt in sorted(topo.neighbors_of(node)):
            if nxt in settled or nxt not in active:
                continue
            if (node, nxt) not in topo.links:
                continue
            w = direct_transfer_delay(topo.links[(node, nxt)], size)
            heapq.heappush(heap, (dist + w, path + (nxt,)))
    raise NoRouteError(f"no route {src} -> {dst}")


def coflow_completion(links: Mapping[tuple[NodeId, NodeId], LinkMetrics] | OverlayTopology,
                      requests: list[TransferRequest],
                      start: float = 0.0) -> float:
    """Schedule all transfers on an otherwise idle network; return the latest
    completion time. Raises if any transfer fails."""
    view = links.links if isinstance(links, OverlayTopology) else links
    loop = EventLoop()
    loop.clock.now = start
    net = Network(loop)
    seen: set[tuple[NodeId, NodeId]] = set()
    for (a, b), metrics in view.items():
        if (a, b) in seen:
            continue
        seen.add((a, b))
        seen.add((b, a))
        reverse = view.get((b, a), metrics)
        net.add_link(a, b, metrics, reverse)
    failures: list[str] = []
    net.on_transfer_failed.append(lambda tr, reason: failures.append(reason))
    transfers = [net.submit(req) for req in requests]
    loop.run()
    if failures:
        raise NoRouteError(f"transfer failed: {failures[0]}")
    if not transfers:
        return start
    return max(tr.delivered_at for tr in transfers)
