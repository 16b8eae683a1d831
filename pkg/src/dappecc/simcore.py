"""Deterministic discrete-event kernel: queue, link delays, timers, stats.

Time is fixed-point nanoseconds so equality tests and cross-run
determinism are exact.  Events pop in (time, priority, sequence) order;
the sequence number makes scheduling order the tiebreaker.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field

from .costmodel import PlacementSnapshot, check_feasible
from .protocol import Message, ProtocolConfig, ProtocolEngine, message_size_bits
from .topology import Topology
from .workload import (ARRIVE, DEPART, MOVE, NS_PER_S, PLACED, TraceEvent,
                       DEFAULT_CLASSES)

# Event priorities at equal timestamps.
PRIO_TRACE = 0
PRIO_PROTO = 1
PRIO_EPOCH = 2
PRIO_SAMPLE = 3

DEFAULT_BANDWIDTH_BPS = 10_000_000
DEFAULT_PROPAGATION_NS = 22_000
DEFAULT_WATCHDOG = 1_000_000


class DivergedError(Exception):
    """Watchdog tripped: too many protocol messages for one invocation."""


@dataclass(frozen=True)
class DelayModel:
    """Control-plane slice bandwidth plus a uniform per-link propagation delay."""

    bandwidth_bps: int = DEFAULT_BANDWIDTH_BPS
    propagation_ns: int = DEFAULT_PROPAGATION_NS

    def __post_init__(self):
        if self.bandwidth_bps <= 0 or self.propagation_ns <= 0:
            raise ValueError("delay model parameters must be positive")


def link_delay_ns(msg: Message, model: DelayModel) -> int:
    bits = message_size_bits(msg)
    return bits * NS_PER_S // model.bandwidth_bps + model.propagation_ns


def link_delay(msg: Message, model: DelayModel) -> float:
    """Transmission plus propagation delay of one hop, in seconds."""
    return link_delay_ns(msg, model) / NS_PER_S


class RunStats:
    """Everything a run reports; serializes to canonical JSON."""

    def __init__(self, algorithm: str, seed: int):
        self.algorithm = algorithm
        self.seed = seed
        self.emitted_by_kind: dict[str, int] = {}
        self.delivered_by_kind: dict[str, int] = {}
        self.bytes_by_kind: dict[str, int] = {}
        self.new_requests = 0
        self.critical_detections = 0
        self.placements = 0
        self.migrations = 0
        self.failures = 0
        self.event_mig_cost = 0
        self.event_comp_cost = 0
        self.aggregate_comp_integral = 0
        self.mig_cost_unit = 0
        self.diverged = False
        self.final_feasible = True
        self.infeasible_epochs = 0
        self.epochs: list[dict] = []
        self.timeline: list[tuple] = []
        self.counters: dict[str, int] = {}

    def count_emission(self, kind: str):
        self.emitted_by_kind[kind] = self.emitted_by_kind.get(kind, 0) + 1

    @property
    def total_control_bytes(self) -> int:
        return sum(self.bytes_by_kind.values())

    @property
    def handled_requests(self) -> int:
        return self.new_requests + self.critical_detections

    @property
    def per_request_bytes(self) -> float:
        if self.handled_requests == 0:
            return 0.0
        return self.total_control_bytes / self.handled_requests

    @property
    def event_cost_total(self) -> int:
        return self.event_mig_cost + self.event_comp_cost

    @property
    def aggregate_cost_total(self) -> int:
        return self.migrations * self.mig_cost_unit + self.aggregate_comp_integral

    def to_dict(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "seed": self.seed,
            "messages_by_kind": dict(sorted(self.delivered_by_kind.items())),
            "bytes_by_kind": dict(sorted(self.bytes_by_kind.items())),
            "total_control_bytes": self.total_control_bytes,
            "new_requests": self.new_requests,
            "critical_detections": self.critical_detections,
            "per_request_bytes": self.per_request_bytes,
            "placements": self.placements,
            "migrations": self.migrations,
            "failures": self.failures,
            "event_cost": {
                "migration": self.event_mig_cost,
                "computational": self.event_comp_cost,
                "total": self.event_cost_total,
            },
            "aggregate_cost": {
                "migration": self.migrations * self.mig_cost_unit,
                "comp_integral": self.aggregate_comp_integral,
                "total": self.aggregate_cost_total,
            },
            "diverged": self.diverged,
            "final_feasible": self.final_feasible,
            "infeasible_epochs": self.infeasible_epochs,
            "epochs": self.epochs,
            "counters": dict(sorted(self.counters.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"

    def timeline_csv(self) -> str:
        lines = ["time,request,from,to,reason"]
        for t, rid, old, new, reason in self.timeline:
            lines.append(f"{t / NS_PER_S},{rid},{'' if old is None else old},{new},{reason}")
        return "\n".join(lines) + "\n"


@dataclass
class RunConfig:
    algorithm: str = "dappecc"
    seed: int = 0
    classes: dict = field(default_factory=lambda: dict(DEFAULT_CLASSES))
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    delay: DelayModel = field(default_factory=DelayModel)
    watchdog: int = DEFAULT_WATCHDOG
    audit: bool = False
    epoch_period_ns: int = NS_PER_S
    sample_costs: bool = True


class Kernel:
    """One kernel per run; strictly single-threaded."""

    def __init__(self, topo: Topology, config: RunConfig):
        self.topo = topo
        self.config = config
        self.stats = RunStats(config.algorithm, config.seed)
        self.stats.mig_cost_unit = config.protocol.mig_cost
        self.now_ns = 0
        self._queue: list = []
        self._seq = 0
        self._link_busy: dict[tuple[int, int], int] = {}
        self._in_flight = 0
        self._msgs_since_trace = 0
        self.engine = None

    def _push(self, time_ns: int, prio: int, payload):
        if time_ns < self.now_ns:
            raise ValueError("cannot schedule an event in the past")
        self._seq += 1
        heapq.heappush(self._queue, (time_ns, prio, self._seq, payload))

    def arm_timer(self, node_id: int, kind: str, delay_ns: int):
        self._in_flight += 1
        self._push(self.now_ns + delay_ns, PRIO_PROTO, ("timer", node_id, kind))

    def send_message(self, msg: Message):
        """Schedule delivery over the store-and-forward control link."""
        bits = message_size_bits(msg)
        tx = bits * NS_PER_S // self.config.delay.bandwidth_bps
        link = (msg.sender, msg.receiver)
        start = max(self.now_ns, self._link_busy.get(link, 0))
        self._link_busy[link] = start + tx
        self.stats.bytes_by_kind[msg.kind] = (
            self.stats.bytes_by_kind.get(msg.kind, 0) + (bits + 7) // 8)
        self._in_flight += 1
        self._push(start + tx + self.config.delay.propagation_ns,
                   PRIO_PROTO, ("msg", msg))

    def schedule_trace(self, events):
        for ev in events:
            self._push(ev.time_ns, PRIO_TRACE, ("trace", ev))

    def schedule_epochs(self, until_ns: int):
        t = 0
        while t <= until_ns:
            self._push(t, PRIO_EPOCH, ("epoch", t))
            t += self.config.epoch_period_ns

    def schedule_samples(self, until_ns: int):
        t = self.config.epoch_period_ns
        while t <= until_ns:
            self._push(t, PRIO_SAMPLE, ("sample", t))
            t += self.config.epoch_period_ns

    def run_loop(self):
        audit = self.config.audit
        while self._queue:
            time_ns, _, _, payload = heapq.heappop(self._queue)
            self.now_ns = time_ns
            kind = payload[0]
            if kind == "trace":
                if audit and self._in_flight == 0:
                    self.engine.audit_quiescent()
                self._msgs_since_trace = 0
                self._dispatch_trace(payload[1])
            elif kind == "msg":
                self._in_flight -= 1
                self._msgs_since_trace += 1
                if self._msgs_since_trace > self.config.watchdog:
                    raise DivergedError(
                        f"{self._msgs_since_trace} messages since last trace event")
                msg = payload[1]
                self.stats.delivered_by_kind[msg.kind] = (
                    self.stats.delivered_by_kind.get(msg.kind, 0) + 1)
                self.engine.on_message(msg)
            elif kind == "timer":
                self._in_flight -= 1
                self.engine.on_timer(payload[1], payload[2])
            elif kind == "epoch":
                self.engine.on_epoch(time_ns)
            elif kind == "sample":
                self.stats.aggregate_comp_integral += self.engine.live_comp_cost()
            if audit:
                self.engine.audit_capacity()

    def _dispatch_trace(self, ev: TraceEvent):
        if ev.kind == ARRIVE:
            self.engine.on_arrive(ev.user, self.config.classes[ev.cls_name], ev.poa)
        elif ev.kind == MOVE:
            self.engine.on_move(ev.user, ev.poa)
        elif ev.kind == DEPART:
            self.engine.on_depart(ev.user)


class _ProtocolAdapter(ProtocolEngine):
    """Protocol engine plus the kernel hooks it does not otherwise need."""

    def on_epoch(self, t_ns: int):
        pass

    def live_comp_cost(self) -> int:
        total = 0
        for req in self.requests.values():
            if req.state == PLACED and req.cur_place is not None:
                total += req.cls.comp_cost_per_level[self.topo.level(req.cur_place)]
        return total

    def final_snapshot(self) -> PlacementSnapshot:
        return PlacementSnapshot.of(
            self.topo, self.requests.values(),
            {rid: r.cur_place for rid, r in self.requests.items()})


def run(events: list[TraceEvent], topo: Topology, config: RunConfig) -> RunStats:
    """Process a trace to quiescence and report; pure in (trace, topo, config)."""
    kernel = Kernel(topo, config)
    if config.algorithm == "dappecc":
        engine = _ProtocolAdapter(topo, config.protocol, kernel)
    else:
        from .baselines import EpochEngine
        engine = EpochEngine(config.algorithm, topo, config.protocol, kernel)
    kernel.engine = engine

    horizon = max((ev.time_ns for ev in events), default=0)
    kernel.schedule_trace(events)
    if config.algorithm != "dappecc":
        kernel.schedule_epochs(horizon)
    if config.sample_costs:
        kernel.schedule_samples(horizon)

    stats = kernel.stats
    try:
        kernel.run_loop()
        if config.audit:
            engine.audit_quiescent()
    except DivergedError:
        stats.diverged = True

    if not stats.diverged:
        assert stats.emitted_by_kind == stats.delivered_by_kind, \
            "message double-entry check failed"
    report = check_feasible(topo, engine.final_snapshot())
    stats.final_feasible = report.ok and not stats.diverged
    stats.counters = dict(getattr(engine, "counters", {}))
    stats.timeline = list(stats.timeline)
    return stats
