"""Scenario files: parsing, validation, presets, churn expansion, and the
run/compare entry points that produce CSV metrics and message traces.

Format: INI-like sections with one statement per line.

    [topology]
    node 1
    node 4 standby compute=700
    link 1 2 bandwidth=200 prop=2

    [model]
    preset = vgg11            # or explicit: tensor fc6 392

    [compute]
    compute_ms = 500
    allreduce_payload_mib = 8
    checkpoint_throughput_mibps = 100

    [engine]
    iterations = 10
    strategy = multi_neighbor
    seed = 1

    [events]
    at 1000 join 4 neighbors=1,2
    at 9000 leave 4
    churn rate=0.001 horizon=30000 mix=join:0.5,leave:0.5 seed=7

Sizes are MiB, bandwidth Mbps, times ms; the engine itself is unit-agnostic
(1 time unit = 1 ms, 1 data unit = 1 byte).
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from pathlib import Path

from .engine import Engine, EngineConfig, EventRecord, MessageRecord
from .model import MIB, LinkMetrics, NodeState, OverlayTopology, TrainingState
from .monitor import HeartbeatConfig
from .training import ComputeProfile, MetricsRecord, Strategy

#: Coarse training-state breakdowns (weights + optimizer state), MiB per
#: tensor group. Totals span the small-vision and GPT-2 families.
MODEL_PRESETS: dict[str, tuple[tuple[str, int], ...]] = {
    "resnet101": (("stem", 2), ("layer1", 16), ("layer2", 28),
                  ("layer3", 96), ("layer4", 30), ("fc", 6)),
    "alexnet": (("features", 9), ("fc6", 140), ("fc7", 62), ("fc8", 22)),
    "vgg11": (("conv", 35), ("fc6", 392), ("fc7", 64), ("fc8", 37)),
    "gpt2": (("wte", 147), ("wpe", 3), ("blocks_0_5", 130),
             ("blocks_6_11", 130), ("ln_f", 1), ("head", 57)),
    "gpt2-medium": (("wte", 197), ("wpe", 4), ("blocks_0_7", 384),
                    ("blocks_8_15", 384), ("blocks_16_23", 384), ("ln_f", 2)),
    "gpt2-large": (("wte", 246), ("wpe", 5), ("blocks_0_8", 925),
                   ("blocks_9_17", 925), ("blocks_18_26", 925), ("ln_f", 24)),
}

EVENT_KINDS = ("join", "leave", "connect", "disconnect", "fail", "faillink",
               "setlink")


class ScenarioError(Exception):
    """Parse or validation failure; carries line-anchored messages."""

    def __init__(self, errors: list[str]) -> None:
        super().__init__("; ".join(errors))
        self.errors = errors


def metrics_from_bandwidth(mbps: float, prop_ms: float) -> LinkMetrics:
    """Mbps + propagation ms -> per-byte link metrics (ms per data unit)."""
    if mbps <= 0:
        raise ValueError("bandwidth must be positive")
    return LinkMetrics(prop_delay=prop_ms,
                       trans_delay_per_unit=8e-3 / mbps)


@dataclass
class NodeDecl:
    id: int
    standby: bool = False
    compute_ms: float | None = None


@dataclass
class LinkDecl:
    a: int
    b: int
    metrics: LinkMetrics


@dataclass
class ScenarioEvent:
    time: float
    kind: str
    args: dict
    line: int = 0


@dataclass
class ChurnSpec:
    rate: float                    # events per ms
    horizon: float
    mix: dict[str, float]
    seed: int = 0
    bw_low: float = 100.0
    bw_high: float = 1000.0


@dataclass
class Scenario:
    nodes: list[NodeDecl] = field(default_factory=list)
    links: list[LinkDecl] = field(default_factory=list)
    tensors: tuple[tuple[str, int], ...] = ()
    compute_ms: float = 500.0
    allreduce_payload_mib: float = 8.0
    checkpoint_throughput_mibps: float = 100.0
    iterations: int = 10
    strategy: Strategy = Strategy.MULTI_NEIGHBOR
    seed: int = 0
    heartbeat_interval_ms: float = 2000.0
    heartbeat_miss_threshold: int = 3
    probe_noise: float = 0.0
    control_delay_ms: float = 1.0
    restart_cost_ms: float = 10_000.0
    single_source_barrier: bool = True
    min_shard_size_kib: int = 64
    init_delay_ms: float = 0.0
    max_time_ms: float | None = None
    events: list[ScenarioEvent] = field(default_factory=list)
    churn: ChurnSpec | None = None

    @property
    def state(self) -> TrainingState:
        return TrainingState(tensors=self.tensors)

    def standby_ids(self) -> list[int]:
        return [n.id for n in self.nodes if n.standby]


def _parse_kv(tokens: list[str]) -> dict[str, str]:
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise ValueError(f"expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        out[k] = v
    return out


def parse_scenario(source: str | Path) -> Scenario:
    """Parse and fully validate a scenario; raises ScenarioError with every
    line-anchored problem found."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source
                                    and source.endswith((".txt", ".scn", ".scenario"))):
        text = Path(source).read_text()
    else:
        text = str(source)
    sc = Scenario()
    errors: list[str] = []
    section = None
    preset_used = False
    tensors: list[tuple[str, int]] = []

    def err(lineno: int, msg: str) -> None:
        errors.append(f"line {lineno}: {msg}")

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section not in ("topology", "model", "compute", "engine", "events"):
                err(lineno, f"unknown section [{section}]")
                section = None
            continue
        if section is None:
            err(lineno, "statement outside any section")
            continue
        try:
            if section == "topology":
                _parse_topology_line(sc, line)
            elif section == "model":
                preset_used |= _parse_model_line(sc, line, tensors)
            elif section == "compute":
                _parse_assign(sc, line, {
                    "compute_ms": float, "allreduce_payload_mib": float,
                    "checkpoint_throughput_mibps": float})
            elif section == "engine":
                _parse_engine_line(sc, line)
            elif section == "events":
                _parse_event_line(sc, line, lineno)
        except (ValueError, KeyError) as exc:
            err(lineno, str(exc))

    if tensors:
        if preset_used:
            errors.append("model: cannot mix preset and explicit tensors")
        else:
            sc.tensors = tuple((name, mib * MIB) for name, mib in tensors)
    if not sc.tensors:
        errors.append("model: no tensors declared (use preset or tensor lines)")
    if not any(not n.standby for n in sc.nodes):
        errors.append("topology: no active nodes")
    errors.extend(_validate(sc))
    if errors:
        raise ScenarioError(errors)
    return sc


def _parse_topology_line(sc: Scenario, line: str) -> None:
    tokens = line.split()
    if tokens[0] == "node":
        node = NodeDecl(id=int(tokens[1]))
        rest = tokens[2:]
        if rest and rest[0] == "standby":
            node.standby = True
            rest = rest[1:]
        kv = _parse_kv(rest)
        if "compute" in kv:
            node.compute_ms = float(kv.pop("compute"))
        if kv:
            raise ValueError(f"unknown node options {sorted(kv)}")
        sc.nodes.append(node)
    elif tokens[0] == "link":
        a, b = int(tokens[1]), int(tokens[2])
        kv = _parse_kv(tokens[3:])
        metrics = metrics_from_bandwidth(float(kv.pop("bandwidth")),
                                         float(kv.pop("prop", "0")))
        if kv:
            raise ValueError(f"unknown link options {sorted(kv)}")
        sc.links.append(LinkDecl(a, b, metrics))
    else:
        raise ValueError(f"unknown topology statement {tokens[0]!r}")


def _parse_model_line(sc: Scenario, line: str, tensors: list) -> bool:
    tokens = line.split()
    if tokens[0] == "preset" and len(tokens) == 3 and tokens[1] == "=":
        name = tokens[2]
        if name not in MODEL_PRESETS:
            raise ValueError(f"unknown preset {name!r} "
                             f"(known: {', '.join(sorted(MODEL_PRESETS))})")
        sc.tensors = tuple((n, mib * MIB) for n, mib in MODEL_PRESETS[name])
        return True
    if tokens[0] == "tensor" and len(tokens) == 3:
        size = int(tokens[2])
        if size <= 0:
            raise ValueError(f"tensor {tokens[1]!r} size must be positive")
        tensors.append((tokens[1], size))
        return False
    raise ValueError(f"unknown model statement {line!r}")


def _parse_assign(obj, line: str, fields: dict) -> None:
    key, _, value = (t.strip() for t in line.partition("="))
    if key not in fields:
        raise ValueError(f"unknown option {key!r}")
    setattr(obj, key, fields[key](value))


def _parse_engine_line(sc: Scenario, line: str) -> None:
    def parse_bool(v: str) -> bool:
        if v.lower() in ("true", "1", "yes"):
            return True
        if v.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected boolean, got {v!r}")

    _parse_assign(sc, line, {
        "iterations": int, "seed": int,
        "strategy": lambda v: Strategy(v),
        "heartbeat_interval_ms": float, "heartbeat_miss_threshold": int,
        "probe_noise": float, "control_delay_ms": float,
        "restart_cost_ms": float, "single_source_barrier": parse_bool,
        "min_shard_size_kib": int, "init_delay_ms": float,
        "max_time_ms": float,
    })


def _parse_event_line(sc: Scenario, line: str, lineno: int) -> None:
    tokens = line.split()
    if tokens[0] == "churn":
        kv = _parse_kv(tokens[1:])
        mix = {}
        for part in kv.pop("mix", "join:0.5,leave:0.5").split(","):
            kind, _, weight = part.partition(":")
            if kind not in EVENT_KINDS[:4]:
                raise ValueError(f"churn cannot generate {kind!r} events")
            mix[kind] = float(weight)
        bw_low, _, bw_high = kv.pop("bw", "100:1000").partition(":")
        sc.churn = ChurnSpec(rate=float(kv.pop("rate")),
                             horizon=float(kv.pop("horizon")),
                             mix=mix, seed=int(kv.pop("seed", "0")),
                             bw_low=float(bw_low), bw_high=float(bw_high or bw_low))
        if kv:
            raise ValueError(f"unknown churn options {sorted(kv)}")
        return
    if tokens[0] != "at":
        raise ValueError(f"event lines start with 'at' or 'churn', got {tokens[0]!r}")
    time = float(tokens[1])
    kind = tokens[2]
    if kind not in EVENT_KINDS:
        raise ValueError(f"unknown event kind {kind!r}")
    args: dict = {}
    rest = tokens[3:]
    if kind in ("join", "leave", "fail"):
        args["node"] = int(rest[0])
        kv = _parse_kv(rest[1:])
        if kind == "join":
            args["neighbors"] = [int(x) for x in kv.pop("neighbors", "").split(",") if x]
            if not args["neighbors"]:
                raise ValueError("join needs neighbors=a,b,...")
            if "strategy" in kv:
                args["strategy"] = Strategy(kv.pop("strategy"))
        if kv:
            raise ValueError(f"unknown options {sorted(kv)}")
    elif kind in ("connect", "disconnect", "faillink", "setlink"):
        args["a"], args["b"] = int(rest[0]), int(rest[1])
        kv = _parse_kv(rest[2:])
        if kind in ("connect", "setlink") and "bandwidth" in kv:
            args["metrics"] = metrics_from_bandwidth(
                float(kv.pop("bandwidth")), float(kv.pop("prop", "0")))
        elif kind == "setlink":
            raise ValueError("setlink needs bandwidth=")
        if kv:
            raise ValueError(f"unknown options {sorted(kv)}")
    sc.events.append(ScenarioEvent(time=time, kind=kind, args=args, line=lineno))


def _validate(sc: Scenario) -> list[str]:
    """Static checks: sorted events, resolvable subjects, declared metrics."""
    errors: list[str] = []
    declared = {n.id for n in sc.nodes}
    dup = [n for n in declared
           if sum(1 for d in sc.nodes if d.id == n) > 1]
    if dup:
        errors.append(f"topology: duplicate node declarations {sorted(set(dup))}")
    for link in sc.links:
        for end in (link.a, link.b):
            if end not in declared:
                errors.append(f"topology: link ({link.a},{link.b}) references "
                              f"undeclared node {end}")
    times = [e.time for e in sc.events]
    if times != sorted(times):
        errors.append("events: not sorted by time")

    # membership walk-through: joins activate standby nodes, leaves/fails
    # deactivate, connects add links
    active = {n.id for n in sc.nodes if not n.standby}
    pool = {n.id for n in sc.nodes if n.standby}
    links = {(min(l.a, l.b), max(l.a, l.b)) for l in sc.links}
    catalog = set(links)
    for ev in sc.events:
        where = f"line {ev.line}"
        if ev.kind == "join":
            node = ev.args["node"]
            if node not in declared:
                errors.append(f"{where}: join target {node} not declared")
                continue
            if node in active:
                errors.append(f"{where}: join target {node} already active")
            for nb in ev.args["neighbors"]:
                if nb not in declared:
                    errors.append(f"{where}: join neighbor {nb} not declared")
                elif (min(node, nb), max(node, nb)) not in catalog:
                    errors.append(f"{where}: no declared link ({nb},{node}) "
                                  f"for join")
            pool.discard(node)
            active.add(node)
            links |= {(min(node, nb), max(node, nb)) for nb in ev.args["neighbors"]}
        elif ev.kind in ("leave", "fail"):
            node = ev.args["node"]
            if node not in active:
                errors.append(f"{where}: {ev.kind} target {node} not active "
                              f"at event time")
            active.discard(node)
            links = {l for l in links if node not in l}
        elif ev.kind in ("connect", "disconnect", "faillink", "setlink"):
            a, b = ev.args["a"], ev.args["b"]
            key = (min(a, b), max(a, b))
            for end in (a, b):
                if end not in active:
                    errors.append(f"{where}: {ev.kind} endpoint {end} not "
                                  f"active at event time")
            if ev.kind == "connect":
                if key in links:
                    pass  # idempotent no-op at runtime
                elif "metrics" not in ev.args and key not in catalog:
                    errors.append(f"{where}: connect needs bandwidth= "
                                  f"(no declared metrics for {key})")
                links.add(key)
                catalog.add(key)
            elif ev.kind in ("disconnect", "faillink"):
                if key not in links:
                    errors.append(f"{where}: {ev.kind} on absent link {key}")
                links.discard(key)
            elif key not in catalog:
                errors.append(f"{where}: setlink on undeclared link {key}")
    if sc.churn is not None and not sc.churn.mix:
        errors.append("churn: empty primitive mix")
    return errors


# ---------------------------------------------------------------------------
# engine assembly


def build_engine(sc: Scenario, strategy: Strategy | None = None,
                 seed: int | None = None) -> Engine:
    """Fresh engine for one run; scenario objects are never mutated."""
    strategy = strategy or sc.strategy
    seed = sc.seed if seed is None else seed
    topo = OverlayTopology()
    for n in sc.nodes:
        topo.add_node(n.id, NodeState.STANDBY if n.standby else NodeState.ACTIVE)
    active = {n.id for n in sc.nodes if not n.standby}
    catalog: dict[tuple[int, int], LinkMetrics] = {}
    for l in sc.links:
        catalog[(l.a, l.b)] = l.metrics
        catalog[(l.b, l.a)] = l.metrics
        if l.a in active and l.b in active:
            topo.add_link(l.a, l.b, l.metrics)
    payload = sc.allreduce_payload_mib * MIB
    ckpt = sc.checkpoint_throughput_mibps * MIB / 1000.0
    profiles = {
        n.id: ComputeProfile(
            compute_time=n.compute_ms if n.compute_ms is not None else sc.compute_ms,
            allreduce_payload=payload,
            checkpoint_throughput=ckpt)
        for n in sc.nodes
    }
    config = EngineConfig(
        iterations=sc.iterations,
        strategy=strategy,
        heartbeat=HeartbeatConfig(interval=sc.heartbeat_interval_ms,
                                  miss_threshold=sc.heartbeat_miss_threshold),
        probe_noise=sc.probe_noise,
        seed=seed,
        control_delay=sc.control_delay_ms,
        single_source_barrier=sc.single_source_barrier,
        restart_cost=sc.restart_cost_ms,
        min_shard_size=sc.min_shard_size_kib * 1024,
        max_time=sc.max_time_ms,
    )
    engine = Engine(topo, sc.state, profiles, config, link_catalog=catalog)
    for ev in sc.events:
        _post_event(engine, sc, ev, strategy)
    if sc.churn is not None:
        for ev in expand_churn(sc.churn):
            _post_churn_event(engine, sc, ev, strategy)
    return engine


def _post_event(engine: Engine, sc: Scenario, ev: ScenarioEvent,
                strategy: Strategy) -> None:
    args = ev.args
    if ev.kind == "join":
        delay = sc.init_delay_ms

        def fire() -> None:
            engine.negotiator.handle_join(args["node"], args["neighbors"],
                                          args.get("strategy", strategy))
        engine.post_scenario_event(ev.time + delay, fire)
    elif ev.kind == "leave":
        engine.post_scenario_event(
            ev.time, lambda: engine.negotiator.handle_leave(args["node"]))
    elif ev.kind == "fail":
        engine.post_scenario_event(
            ev.time, lambda: engine.silence_node(args["node"]))
    elif ev.kind == "connect":
        def fire_connect() -> None:
            if "metrics" in args:
                engine.catalog[(args["a"], args["b"])] = args["metrics"]
                engine.catalog[(args["b"], args["a"])] = args["metrics"]
            engine.negotiator.handle_connect_link(args["a"], args["b"])
        engine.post_scenario_event(ev.time, fire_connect)
    elif ev.kind == "disconnect":
        engine.post_scenario_event(
            ev.time,
            lambda: engine.negotiator.handle_disconnect_link(args["a"], args["b"]))
    elif ev.kind == "faillink":
        engine.post_scenario_event(
            ev.time,
            lambda: engine.fail_link_ground_truth(args["a"], args["b"]))
    elif ev.kind == "setlink":
        engine.post_scenario_event(
            ev.time,
            lambda: engine.set_link_metrics(args["a"], args["b"], args["metrics"]))


def expand_churn(spec: ChurnSpec) -> list[ScenarioEvent]:
    """Poisson arrivals, one primitive per event; subjects resolve at runtime."""
    rng = random.Random(f"churn:{spec.seed}")
    kinds = sorted(spec.mix)
    weights = [spec.mix[k] for k in kinds]
    events: list[ScenarioEvent] = []
    t = 0.0
    while True:
        t += rng.expovariate(spec.rate)
        if t >= spec.horizon:
            break
        kind = rng.choices(kinds, weights=weights)[0]
        events.append(ScenarioEvent(time=t, kind=kind, args={"churn": True}))
    return events


def _post_churn_event(engine: Engine, sc: Scenario, ev: ScenarioEvent,
                      strategy: Strategy) -> None:
    """Subjects are drawn from cluster state when the event fires."""
    pool = sc.standby_ids()

    def fire() -> None:
        rng = engine.rng
        active = [n for n in engine.topology.active_nodes()]
        if ev.kind == "join":
            waiting = [n for n in pool
                       if engine.topology.nodes[n].state == NodeState.STANDBY]
            if not waiting or not active:
                engine.trace_event("churn_skipped", kind=ev.kind,
                                   reason="no standby node")
                return
            node = waiting[0]
            k = min(len(active), rng.randint(1, 3))
            neighbors = sorted(rng.sample(active, k))
            for nb in neighbors:
                if (nb, node) not in engine.catalog:
                    m = metrics_from_bandwidth(
                        rng.uniform(sc.churn.bw_low, sc.churn.bw_high), 1.0)
                    engine.catalog[(nb, node)] = m
                    engine.catalog[(node, nb)] = m
            engine.negotiator.handle_join(node, neighbors, strategy)
        elif ev.kind == "leave":
            victims = [n for n in active if n != engine.scheduler_node]
            if len(victims) < 2:
                engine.trace_event("churn_skipped", kind=ev.kind,
                                   reason="cluster too small")
                return
            engine.negotiator.handle_leave(rng.choice(victims))
        elif ev.kind == "connect":
            absent = [(x, y) for i, x in enumerate(active) for y in active[i + 1:]
                      if not engine.topology.has_link(x, y)]
            if not absent:
                engine.trace_event("churn_skipped", kind=ev.kind,
                                   reason="clique already")
                return
            a, b = rng.choice(absent)
            if (a, b) not in engine.catalog:
                m = metrics_from_bandwidth(
                    rng.uniform(sc.churn.bw_low, sc.churn.bw_high), 1.0)
                engine.catalog[(a, b)] = m
                engine.catalog[(b, a)] = m
            engine.negotiator.handle_connect_link(a, b)
        elif ev.kind == "disconnect":
            removable = [
                (x, y) for (x, y) in sorted(engine.topology.links) if x < y
                and engine.removal_keeps_connectivity(x, y)]
            if not removable:
                engine.trace_event("churn_skipped", kind=ev.kind,
                                   reason="no removable link")
                return
            a, b = rng.choice(removable)
            engine.negotiator.handle_disconnect_link(a, b)

    engine.post_scenario_event(ev.time, fire)


# ---------------------------------------------------------------------------
# run outputs


@dataclass
class RunResult:
    strategy: Strategy
    seed: int
    engine: Engine

    @property
    def metrics(self) -> list[MetricsRecord]:
        return self.engine.metrics


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def metrics_csv(results: list[RunResult]) -> str:
    lines = [",".join(MetricsRecord.CSV_COLUMNS)]
    for res in results:
        for rec in res.metrics:
            lines.append(",".join(_fmt(v) for v in rec.csv_row()))
    return "\n".join(lines) + "\n"


def _digest(payload) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.md5(blob.encode()).hexdigest()[:12]


def trace_text(engine: Engine) -> str:
    lines = []
    for rec in engine.trace:
        if isinstance(rec, MessageRecord):
            lines.append(f"MSG {rec.time:.6f} {rec.src} {rec.dst} {rec.kind} "
                         f"{_digest(rec.payload)}")
        else:
            lines.append(f"EVT {rec.time:.6f} {rec.kind} {_digest(rec.detail)}")
    return "\n".join(lines) + "\n"


def summary_text(results: list[RunResult]) -> str:
    lines = []
    for res in results:
        eng = res.engine
        iters = len(eng.iteration_log)
        span = eng.iteration_log[-1][1] if eng.iteration_log else 0.0
        total_idle = sum(r.cluster_idle_time for r in eng.metrics)
        lines.append(f"strategy={res.strategy.value} seed={res.seed} "
                     f"iterations={iters} last_boundary={span:.3f} "
                     f"scaling_events={len(eng.metrics)} "
                     f"cluster_idle_total={total_idle:.3f}")
    return "\n".join(lines) + "\n"


def run_scenario(sc: Scenario, strategy: Strategy | None = None,
                 seed: int | None = None) -> RunResult:
    engine = build_engine(sc, strategy, seed)
    engine.run()
    return RunResult(strategy=strategy or sc.strategy,
                     seed=sc.seed if seed is None else seed, engine=engine)


def run_to_files(sc: Scenario, out_dir: Path, compare: bool = False,
                 strategy: Strategy | None = None,
                 seed: int | None = None) -> list[Path]:
    """Run one strategy (or all four on identical event streams) and write
    metrics.csv, per-strategy traces, and summary.txt."""
    out_dir.mkdir(parents=True, exist_ok=True)
    strategies = list(Strategy) if compare else [strategy or sc.strategy]
    results = [run_scenario(sc, s, seed) for s in strategies]
    written = []
    csv_path = out_dir / "metrics.csv"
    csv_path.write_text(metrics_csv(results))
    written.append(csv_path)
    for res in results:
        path = out_dir / f"trace_{res.strategy.value}.txt"
        path.write_text(trace_text(res.engine))
        written.append(path)
    summary = out_dir / "summary.txt"
    summary.write_text(summary_text(results))
    written.append(summary)
    return written
