"""Distributed asynchronous placement protocol: per-datacenter state machines.

Three flows cooperate, all over single-hop parent/child control messages:

* BU (seek a feasible solution): unassigned requests travel up from the PoA
  leaf; the first datacenter with room reserves capacity.  A request that
  must be placed at the reserving node is placed firmly; otherwise the
  reservation is provisional and a push-up record starts climbing.
* PU (push up): at the top of a climb the records sweep back down; any
  node above the reservation holder with spare capacity adopts the record,
  committing the placement closer to the cheap cloud levels.  The original
  holder releases its reservation when the record passes through it.
* PD (push down): when a request cannot fit at its topmost feasible
  datacenter, that node initiates a depth-first reshuffle of its subtree,
  migrating already-placed work downward until the capacity deficit is
  nullified.  Nodes touched by a push-down enter F(easibility)-mode for a
  fixed period: reservations commit in place, no new push-ups start, and a
  failure while in F-mode drops the request.

Records carry a per-request version stamp; a record whose version no
longer matches the request's current version is stale (the request was
committed, re-routed, or ended elsewhere) and is forwarded for cleanup but
never acted on.  Stale records still travel to their reservation holder so
capacity is always reclaimed.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

from .costmodel import DEFAULT_MIG_COST
from .topology import Topology
from .workload import (DEPARTED, FAILED, PLACED, UNPLACED, Request,
                       ServiceClass, is_critical)

log = logging.getLogger("dappecc.protocol")

BU = "BU"
PU = "PU"
PD_REQ = "PD_REQ"
PD_REPLY = "PD_REPLY"
RELEASE = "RELEASE"

TIMER_BU = "BU"
TIMER_PD = "PD"

HEADER_BITS = 80
MAX_LIST_LEN = 255  # 8-bit count fields


class ProtocolError(Exception):
    """Protocol-level inconsistency (strict mode) or bad message layout."""


class LayoutError(ProtocolError):
    """Message does not fit the wire layout."""


@dataclass
class UEntry:
    """Unassigned request record: wire fields (reqId, classId, curPlaceId)."""

    req_id: int
    cls: ServiceClass
    poa: int            # PoA at mint time; fixes the record's path
    arrival_seq: int
    cur_place: int | None
    version: int


@dataclass
class PuRecord:
    """Push-up record: wire fields (reqId, classId, holderId)."""

    req_id: int
    cls: ServiceClass
    poa: int
    arrival_seq: int
    holder: int
    version: int


@dataclass
class PdEntry:
    """Push-down record: wire fields (reqId, classId, curPlaceId=holder)."""

    req_id: int
    cls: ServiceClass
    poa: int
    arrival_seq: int
    holder: int
    version: int
    stamp: int          # mint order; keeps the push-down list stable
    virtual: bool = False  # unassigned entry standing in for the initiator


@dataclass
class Message:
    kind: str
    sender: int
    receiver: int


@dataclass
class BuMsg(Message):
    u_entries: list[UEntry] = field(default_factory=list)
    pu_records: list[PuRecord] = field(default_factory=list)

    def __init__(self, sender, receiver, u_entries, pu_records):
        super().__init__(BU, sender, receiver)
        self.u_entries = u_entries
        self.pu_records = pu_records


@dataclass
class PuMsg(Message):
    records: list[PuRecord] = field(default_factory=list)

    def __init__(self, sender, receiver, records):
        super().__init__(PU, sender, receiver)
        self.records = records


@dataclass
class PdReqMsg(Message):
    initiator: int = 0
    deficit: int = 0
    entries: list[PdEntry] = field(default_factory=list)

    def __init__(self, sender, receiver, initiator, deficit, entries):
        super().__init__(PD_REQ, sender, receiver)
        self.initiator = initiator
        self.deficit = deficit
        self.entries = entries


@dataclass
class PdReplyMsg(Message):
    deficit: int = 0
    placed_below: list[tuple[int, int]] = field(default_factory=list)
    remaining: list[PdEntry] = field(default_factory=list)

    def __init__(self, sender, receiver, deficit, placed_below, remaining):
        super().__init__(PD_REPLY, sender, receiver)
        self.deficit = deficit
        self.placed_below = placed_below
        self.remaining = remaining


@dataclass
class ReleaseMsg(Message):
    req_id: int = 0
    target: int = 0  # routed hop-by-hop; not a wire field

    def __init__(self, sender, receiver, req_id, target):
        super().__init__(RELEASE, sender, receiver)
        self.req_id = req_id
        self.target = target


def _check_len(n: int, what: str) -> int:
    if n > MAX_LIST_LEN:
        raise LayoutError(f"{what} has {n} entries; 8-bit count allows {MAX_LIST_LEN}")
    return n


def message_size_bits(msg: Message) -> int:
    """Exact size of a control message under the fixed wire layouts."""
    if msg.kind == BU:
        nu = _check_len(len(msg.u_entries), "BU unassigned list")
        npu = _check_len(len(msg.pu_records), "BU push-up list")
        return HEADER_BITS + 8 + 8 + 30 * nu + 30 * npu
    if msg.kind == PU:
        n = _check_len(len(msg.records), "PU record list")
        return HEADER_BITS + 8 + 30 * n
    if msg.kind == PD_REQ:
        n = _check_len(len(msg.entries), "PD request list")
        return HEADER_BITS + 12 + 16 + 8 + 30 * n
    if msg.kind == PD_REPLY:
        np = _check_len(len(msg.placed_below), "PD placed list")
        nr = _check_len(len(msg.remaining), "PD remaining list")
        return HEADER_BITS + 16 + 8 + 26 * np + 8 + 30 * nr
    if msg.kind == RELEASE:
        return HEADER_BITS + 14
    raise LayoutError(f"unknown message kind {msg.kind!r}")


def message_size_bytes(msg: Message) -> int:
    return (message_size_bits(msg) + 7) // 8


@dataclass
class ProtocolConfig:
    t_bu_ad_ns: int = 100_000       # per-level BU accumulation delay unit
    t_pd_ad_ns: int = 400_000       # per-level PD accumulation delay unit
    f_period_ns: int = 10_000_000_000
    mig_cost: int = DEFAULT_MIG_COST
    strict: bool = True
    release_on_detect: bool = False


@dataclass
class PdContext:
    initiator: int
    caller: int | None
    pd_list: list[PdEntry]
    deficit: int
    children_left: list[int]
    awaiting: int | None = None
    placed_below: list[tuple[int, int]] = field(default_factory=list)
    # requests this push-down was initiated for; they fail terminally if
    # the retry after the walk still cannot place them
    retry_ids: frozenset[int] = frozenset()


class NodeState:
    """Per-datacenter protocol state, mutated only inside event handlers."""

    def __init__(self, node):
        self.node = node
        self.a = node.capacity
        self.u: dict[int, UEntry] = {}
        self.pu: dict[int, PuRecord] = {}
        # req id -> (cpu units held, version at reservation/placement)
        self.potentially_placed: dict[int, tuple[int, int]] = {}
        self.placed: dict[int, tuple[int, int]] = {}
        self.pending_pu_to_parent: set[int] = set()
        self.bu_timer_armed = False
        self.pd_timer_armed = False
        self.pd_backlog: dict[int, UEntry] = {}
        self.pd_fire_deferred = False
        self.f_mode_until = -1
        self.pd_ctx: PdContext | None = None
        self.pd_queue: deque[PdReqMsg] = deque()

    @property
    def id(self) -> int:
        return self.node.id

    def held_units(self) -> int:
        return (sum(b for b, _ in self.potentially_placed.values())
                + sum(b for b, _ in self.placed.values()))


def sort_requests(topo: Topology, records, dc_id: int) -> list:
    """Order records at datacenter ``dc_id``: most timing-critical first.

    Key 1 counts the feasible datacenters strictly above ``dc_id`` on the
    record's prefix (fewer first), key 2 is CPU demand here (smaller
    first), key 3 is users' FIFO order.
    """
    level = topo.level(dc_id)

    def key(rec):
        path_len = len(topo.path_to_root(rec.poa))
        top_level = min(rec.cls.max_levels, path_len) - 1
        above = max(0, top_level - level)
        return (above, rec.cls.beta_per_level[level], rec.arrival_seq)

    return sorted(records, key=key)


class ProtocolEngine:
    """All datacenter state machines plus the shared request registry.

    The engine is driven by a kernel that delivers trace events, messages
    and timer expiries one at a time; handlers never block, so a push-down
    wait is stored as a PdContext continuation.
    """

    def __init__(self, topo: Topology, config: ProtocolConfig, kernel):
        self.topo = topo
        self.config = config
        self.kernel = kernel
        self.nodes = {n.id: NodeState(n) for n in topo.nodes.values()}
        self.requests: dict[int, Request] = {}
        self.versions: dict[int, int] = {}
        self._arrival_seq = 0
        self._pd_stamp = 0
        self._early_released: set[int] = set()
        self.counters = {
            "stale_drops": 0, "release_misses": 0, "unmatched_pd_replies": 0,
            "pu_unknown": 0, "reinjected_moves": 0,
        }

    # ---- registry helpers -------------------------------------------------

    def _bump(self, req_id: int) -> int:
        self.versions[req_id] = self.versions.get(req_id, 0) + 1
        return self.versions[req_id]

    def _version(self, req_id: int) -> int:
        return self.versions.get(req_id, 0)

    def _alive(self, req_id: int) -> bool:
        req = self.requests.get(req_id)
        return req is not None and req.state not in (FAILED, DEPARTED)

    def _current(self, rec) -> bool:
        return self._alive(rec.req_id) and rec.version == self._version(rec.req_id)

    def _beta_at(self, rec, dc_id: int) -> int:
        return rec.cls.beta_per_level[self.topo.level(dc_id)]

    def _top_feasible(self, rec) -> int:
        path = self.topo.path_to_root(rec.poa)
        return path[min(rec.cls.max_levels, len(path)) - 1]

    def _in_prefix(self, rec, dc_id: int) -> bool:
        return (self.topo.level(dc_id) < rec.cls.max_levels
                and self.topo.in_subtree(rec.poa, dc_id))

    # ---- trace ingestion --------------------------------------------------

    def on_arrive(self, req_id: int, cls: ServiceClass, poa: int):
        if req_id in self.requests:
            raise ProtocolError(f"request {req_id} arrived twice")
        req = Request(id=req_id, cls=cls, poa=poa, arrival_seq=self._arrival_seq)
        self._arrival_seq += 1
        self.requests[req_id] = req
        self.kernel.stats.new_requests += 1
        self._inject(req)

    def on_move(self, req_id: int, new_poa: int):
        req = self.requests.get(req_id)
        if req is None or req.state in (FAILED, DEPARTED):
            return
        if req.state == UNPLACED:
            # User moved before its placement finished; restart the climb
            # from the new PoA and let version guards retire the old one.
            self.counters["reinjected_moves"] += 1
            req.poa = new_poa
            self._bump(req_id)
            self._inject(req)
            return
        critical = is_critical(self.topo, req, new_poa)
        req.poa = new_poa
        if not critical:
            return
        self.kernel.stats.critical_detections += 1
        self._bump(req_id)
        if self.config.release_on_detect and req.cur_place is not None:
            self._send_release(new_poa, req_id, req.cur_place)
            self._early_released.add(req_id)
        self._inject(req)

    def on_depart(self, req_id: int):
        req = self.requests.get(req_id)
        if req is None or req.state in (FAILED, DEPARTED):
            return
        was_placed = req.state == PLACED and req.cur_place is not None
        place = req.cur_place
        req.state = DEPARTED
        self._bump(req_id)
        if was_placed and req_id not in self._early_released:
            self._send_release(req.poa, req_id, place)
        self._early_released.discard(req_id)

    def _inject(self, req: Request):
        """New or critical request enters at its PoA's co-located leaf."""
        leaf = self.nodes[req.poa]
        leaf.u[req.id] = UEntry(req.id, req.cls, req.poa, req.arrival_seq,
                                req.cur_place, self._version(req.id))
        self._bu_work_arrived(leaf)

    # ---- BU: seek a feasible solution --------------------------------------

    def _bu_work_arrived(self, node: NodeState):
        if not node.bu_timer_armed:
            node.bu_timer_armed = True
            delay = (node.node.level + 1) * self.config.t_bu_ad_ns
            self.kernel.arm_timer(node.id, TIMER_BU, delay)

    def on_timer(self, node_id: int, kind: str):
        node = self.nodes[node_id]
        if kind == TIMER_BU:
            node.bu_timer_armed = False
            self.handle_bu(node)
        elif kind == TIMER_PD:
            node.pd_timer_armed = False
            self._pd_fire(node)
        else:
            raise ProtocolError(f"unknown timer {kind!r}")

    def on_bu_message(self, msg: BuMsg):
        node = self.nodes[msg.receiver]
        for entry in msg.u_entries:
            old = node.u.get(entry.req_id)
            if old is None or old.version < entry.version:
                node.u[entry.req_id] = entry
        for rec in msg.pu_records:
            node.pu[rec.req_id] = rec
        self._bu_work_arrived(node)

    def handle_bu(self, node: NodeState, retry_drop: frozenset[int] = frozenset()):
        """One resumed BU run over everything accumulated at this node.

        ``retry_drop`` names requests whose push-down already ran; if they
        still do not fit here the protocol gives up on them.
        """
        f_active = self.f_mode_active(node.id)
        pd_failures = False
        for entry in sort_requests(self.topo, list(node.u.values()), node.id):
            if not self._current(entry):
                node.u.pop(entry.req_id, None)
                self.counters["stale_drops"] += 1
                continue
            req = self.requests[entry.req_id]
            b = self._beta_at(entry, node.id)
            at_top = self._top_feasible(entry) == node.id
            if node.a >= b:
                del node.u[entry.req_id]
                node.pd_backlog.pop(entry.req_id, None)
                node.a -= b
                if at_top or f_active:
                    # Feasibility first: no push-up record, commit in place.
                    version = self._commit(req, node.id)
                    node.placed[req.id] = (b, version)
                else:
                    version = self._bump(req.id)
                    node.potentially_placed[req.id] = (b, version)
                    node.pu[req.id] = PuRecord(req.id, entry.cls, entry.poa,
                                               entry.arrival_seq, node.id, version)
            elif at_top:
                if entry.req_id in retry_drop:
                    del node.u[entry.req_id]
                    node.pd_backlog.pop(entry.req_id, None)
                    self._fail(req)
                else:
                    node.pd_backlog[entry.req_id] = entry
                    pd_failures = True
            # else: stays unassigned and climbs to the parent below

        if pd_failures and not node.pd_timer_armed:
            node.pd_timer_armed = True
            delay = (node.node.level + 1) * self.config.t_pd_ad_ns
            self.kernel.arm_timer(node.id, TIMER_PD, delay)

        parent = node.node.parent
        if parent is not None:
            u_up = [e for e in node.u.values() if self._top_feasible(e) != node.id]
            pu_up = [r for r in node.pu.values()
                     if self.topo.level(parent) < r.cls.max_levels]
            if u_up or pu_up:
                for e in u_up:
                    del node.u[e.req_id]
                for r in pu_up:
                    del node.pu[r.req_id]
                    node.pending_pu_to_parent.add(r.req_id)
                self._send(BuMsg(node.id, parent, u_up, pu_up))

        if not node.pending_pu_to_parent and node.pu:
            self.handle_pu(node, [])

    # ---- PU: push up -------------------------------------------------------

    def on_pu_message(self, msg: PuMsg):
        node = self.nodes[msg.receiver]
        node.pending_pu_to_parent -= {r.req_id for r in msg.records}
        self.handle_pu(node, msg.records)

    def handle_pu(self, node: NodeState, incoming: list[PuRecord]):
        """Adopt what fits above its holder, release what left, forward the rest."""
        for rec in incoming:
            node.pu[rec.req_id] = rec
        if not node.pu:
            return
        f_active = self.f_mode_active(node.id)
        forward: list[PuRecord] = []
        for rec in sort_requests(self.topo, list(node.pu.values()), node.id):
            del node.pu[rec.req_id]
            rid = rec.req_id
            if rec.holder == node.id:
                held = node.potentially_placed.pop(rid, None)
                if held is None:
                    self.counters["pu_unknown"] += 1
                    continue
                b, version = held
                if self._alive(rid) and rec.version == self._version(rid) == version:
                    version = self._commit(self.requests[rid], node.id)
                    node.placed[rid] = (b, version)
                else:
                    node.a += b  # reservation for a request that moved on or ended
                continue
            if rid in node.potentially_placed:
                # Adopted above me; my reservation is void.
                b, _ = node.potentially_placed.pop(rid)
                node.a += b
                continue
            if (not f_active and self.topo.is_ancestor(node.id, rec.holder)
                    and self._current(rec) and self._in_prefix(rec, node.id)):
                b = self._beta_at(rec, node.id)
                if node.a >= b:
                    node.a -= b
                    version = self._commit(self.requests[rid], node.id)
                    node.placed[rid] = (b, version)
                    rec.holder = node.id
                    rec.version = version
            forward.append(rec)

        by_child: dict[int, list[PuRecord]] = {}
        for rec in forward:
            if node.node.is_leaf:
                self.counters["stale_drops"] += 1
                continue
            child = self.topo.child_toward(node.id, rec.poa)
            by_child.setdefault(child, []).append(rec)
        for child in sorted(by_child):
            self._send(PuMsg(node.id, child, by_child[child]))

    # ---- PD: push down -----------------------------------------------------

    def _next_stamp(self) -> int:
        self._pd_stamp += 1
        return self._pd_stamp

    def _pd_fire(self, node: NodeState):
        """PD accumulation expired: initiate one run over the merged backlog."""
        if node.pd_ctx is not None:
            node.pd_fire_deferred = True
            return
        pending = [e for e in node.pd_backlog.values()
                   if e.req_id in node.u and self._current(e)]
        node.pd_backlog.clear()
        if not pending:
            return
        deficit = sum(self._beta_at(e, node.id) for e in pending) - node.a
        if deficit <= 0:
            self.handle_bu(node)
            return
        if deficit >= 1 << 16:
            raise LayoutError(f"deficit {deficit} does not fit in 16 bits")
        entries = [PdEntry(e.req_id, e.cls, e.poa, e.arrival_seq, node.id,
                           e.version, self._next_stamp(), virtual=True)
                   for e in sort_requests(self.topo, pending, node.id)]
        self._pd_adopt(node, initiator=node.id, caller=None,
                       entries=entries, deficit=deficit,
                       retry_ids=frozenset(e.req_id for e in entries))

    def on_pd_request(self, msg: PdReqMsg):
        self.handle_pd_request(self.nodes[msg.receiver], msg)

    def handle_pd_request(self, node: NodeState, msg: PdReqMsg):
        if node.pd_ctx is not None:
            if node.pd_ctx.initiator != msg.initiator:
                # Busy with another reshuffle: reply immediately with the
                # payload unchanged so the caller keeps making progress.
                self._send(PdReplyMsg(node.id, msg.sender, msg.deficit,
                                      [], msg.entries))
            else:
                node.pd_queue.append(msg)
            return
        self._pd_adopt(node, msg.initiator, msg.sender, msg.entries, msg.deficit)

    def _pd_adopt(self, node: NodeState, initiator: int, caller: int | None,
                  entries: list[PdEntry], deficit: int,
                  retry_ids: frozenset[int] = frozenset()):
        self.enter_f_mode(node.id)
        pd_list = {e.req_id: e for e in sorted(entries, key=lambda e: e.stamp)}
        # Local work joins at the end: provisional reservations first, then
        # firm placements, so already-placed services migrate only if needed.
        for rid in self._local_pd_candidates(node, node.potentially_placed):
            if rid not in pd_list:
                pd_list[rid] = self._mint_pd_entry(node, rid,
                                                   node.potentially_placed[rid][1])
        for rid in self._local_pd_candidates(node, node.placed):
            req = self.requests[rid]
            if rid not in pd_list and req.cur_place == node.id:
                pd_list[rid] = self._mint_pd_entry(node, rid, node.placed[rid][1])
        node.pd_ctx = PdContext(
            initiator=initiator, caller=caller,
            pd_list=sorted(pd_list.values(), key=lambda e: e.stamp),
            deficit=deficit, children_left=list(node.node.children),
            retry_ids=retry_ids)
        self._pd_resume(node)

    def _local_pd_candidates(self, node: NodeState, holding) -> list[int]:
        recs = []
        for rid, (_, version) in holding.items():
            if self._alive(rid) and version == self._version(rid):
                recs.append(self.requests[rid])
        return [r.id for r in sort_requests(self.topo, recs, node.id)]

    def _mint_pd_entry(self, node: NodeState, rid: int, version: int) -> PdEntry:
        req = self.requests[rid]
        return PdEntry(rid, req.cls, req.poa, req.arrival_seq, node.id,
                       version, self._next_stamp())

    def _pd_resume(self, node: NodeState):
        ctx = node.pd_ctx
        while ctx.children_left:
            if ctx.deficit <= 0 or self._pd_self_sufficient(node, ctx):
                ctx.children_left.clear()
                break
            child = ctx.children_left.pop(0)
            subset = [e for e in ctx.pd_list
                      if self._in_prefix(e, child)
                      and self.topo.in_subtree(e.poa, child)]
            if not subset:
                continue
            sent = {e.req_id for e in subset}
            ctx.pd_list = [e for e in ctx.pd_list if e.req_id not in sent]
            ctx.awaiting = child
            self._send(PdReqMsg(node.id, child, ctx.initiator, ctx.deficit, subset))
            return
        self._pd_finish(node)

    def _pd_self_sufficient(self, node: NodeState, ctx: PdContext) -> bool:
        """Could adopting initiator entries here alone nullify the deficit?"""
        if node.id == ctx.initiator:
            return False
        room = node.a
        freed = 0
        init_level = self.topo.level(ctx.initiator)
        for e in ctx.pd_list:
            if e.holder != ctx.initiator or not self._current(e):
                continue
            if not self._in_prefix(e, node.id):
                continue
            b = self._beta_at(e, node.id)
            if b <= room:
                room -= b
                freed += e.cls.beta_per_level[init_level]
                if freed >= ctx.deficit:
                    return True
        return False

    def on_pd_reply(self, msg: PdReplyMsg):
        node = self.nodes[msg.receiver]
        ctx = node.pd_ctx
        if ctx is None or ctx.awaiting != msg.sender:
            if self.config.strict:
                raise ProtocolError(
                    f"dc {node.id}: push-down reply from {msg.sender} without context")
            self.counters["unmatched_pd_replies"] += 1
            return
        self.handle_pd_reply(node, msg)

    def handle_pd_reply(self, node: NodeState, msg: PdReplyMsg):
        ctx = node.pd_ctx
        for rid, new_place in msg.placed_below:
            if new_place == node.id:
                continue
            held = node.potentially_placed.pop(rid, None)
            if held is None:
                held = node.placed.pop(rid, None)
            if held is not None:
                node.a += held[0]
            node.u.pop(rid, None)
            node.pd_backlog.pop(rid, None)
        ctx.deficit = msg.deficit
        ctx.placed_below.extend(msg.placed_below)
        ctx.pd_list = sorted(ctx.pd_list + msg.remaining, key=lambda e: e.stamp)
        ctx.awaiting = None
        self._pd_resume(node)

    def _pd_finish(self, node: NodeState):
        ctx = node.pd_ctx
        self._pd_self_push_down(node, ctx)
        if ctx.caller is not None:
            self._send(PdReplyMsg(node.id, ctx.caller, max(ctx.deficit, 0),
                                  ctx.placed_below, ctx.pd_list))
        node.pd_ctx = None
        if node.u:
            self.handle_bu(node, retry_drop=ctx.retry_ids)
        while node.pd_queue and node.pd_ctx is None:
            self.handle_pd_request(node, node.pd_queue.popleft())
        if node.pd_fire_deferred and node.pd_ctx is None:
            node.pd_fire_deferred = False
            self._pd_fire(node)

    def _pd_self_push_down(self, node: NodeState, ctx: PdContext):
        """Adopt list entries currently held at this node's ancestors."""
        init_level = self.topo.level(ctx.initiator)
        for e in list(ctx.pd_list):
            if not self._current(e):
                ctx.pd_list.remove(e)
                self.counters["stale_drops"] += 1
                continue
            if e.holder == node.id or not self.topo.is_ancestor(e.holder, node.id):
                continue
            if not self._in_prefix(e, node.id):
                continue
            b = self._beta_at(e, node.id)
            if b > node.a:
                continue
            req = self.requests[e.req_id]
            node.a -= b
            version = self._commit(req, node.id, via_pd_holder=e.holder)
            node.placed[e.req_id] = (b, version)
            if e.holder == ctx.initiator:
                ctx.deficit -= e.cls.beta_per_level[init_level]
            ctx.placed_below.append((e.req_id, node.id))
            ctx.pd_list.remove(e)

    # ---- F-mode -------------------------------------------------------------

    def enter_f_mode(self, dc_id: int):
        node = self.nodes[dc_id]
        node.f_mode_until = max(node.f_mode_until,
                                self.kernel.now_ns + self.config.f_period_ns)

    def f_mode_active(self, dc_id: int) -> bool:
        return self.kernel.now_ns < self.nodes[dc_id].f_mode_until

    # ---- commits, releases, failures -----------------------------------------

    def _commit(self, req: Request, new_place: int,
                via_pd_holder: int | None = None) -> int:
        """Make ``new_place`` the request's scheduled placement.

        Accrues event costs and, for a migration, routes a release toward
        the previous placement unless the push-down reply already informs
        that holder.
        """
        old = req.cur_place
        req.cur_place = new_place
        req.state = PLACED
        stats = self.kernel.stats
        stats.placements += 1
        stats.event_comp_cost += req.cls.comp_cost_per_level[self.topo.level(new_place)]
        reason = "pd" if via_pd_holder is not None else "bu/pu"
        if old is not None and old != new_place:
            stats.migrations += 1
            stats.event_mig_cost += self.config.mig_cost
            if req.id in self._early_released:
                self._early_released.discard(req.id)
            elif old != via_pd_holder:
                self._send_release(new_place, req.id, old)
        stats.timeline.append((self.kernel.now_ns, req.id, old, new_place, reason))
        return self._bump(req.id)

    def _fail(self, req: Request):
        req.state = FAILED
        self._bump(req.id)
        self.kernel.stats.failures += 1
        log.debug("request %d failed in F-mode", req.id)

    def _send_release(self, from_dc: int, req_id: int, target: int):
        if from_dc == target:
            self._do_release(self.nodes[target], req_id)
            return
        nxt = self.topo.tree_path(from_dc, target)[1]
        self._send(ReleaseMsg(from_dc, nxt, req_id, target))

    def on_release(self, msg: ReleaseMsg):
        node = self.nodes[msg.receiver]
        if node.id == msg.target:
            self._do_release(node, msg.req_id)
            return
        nxt = self.topo.tree_path(node.id, msg.target)[1]
        self._send(ReleaseMsg(node.id, nxt, msg.req_id, msg.target))

    def _do_release(self, node: NodeState, req_id: int):
        held = node.placed.pop(req_id, None)
        if held is None:
            held = node.potentially_placed.pop(req_id, None)
        if held is None:
            self.counters["release_misses"] += 1
            return
        node.a += held[0]

    # ---- plumbing -------------------------------------------------------------

    def _send(self, msg: Message):
        self.kernel.stats.count_emission(msg.kind)
        self.kernel.send_message(msg)

    def on_message(self, msg: Message):
        if msg.kind == BU:
            self.on_bu_message(msg)
        elif msg.kind == PU:
            self.on_pu_message(msg)
        elif msg.kind == PD_REQ:
            self.on_pd_request(msg)
        elif msg.kind == PD_REPLY:
            self.on_pd_reply(msg)
        elif msg.kind == RELEASE:
            self.on_release(msg)
        else:
            raise ProtocolError(f"unknown message kind {msg.kind!r}")

    # ---- audits ------------------------------------------------------------

    def audit_capacity(self):
        """a_s must equal capacity minus everything this node accounts for."""
        for node in self.nodes.values():
            if node.a < 0:
                raise ProtocolError(f"dc {node.id}: negative available capacity")
            if node.a + node.held_units() != node.node.capacity:
                raise ProtocolError(
                    f"dc {node.id}: ledger mismatch a={node.a} "
                    f"held={node.held_units()} cap={node.node.capacity}")

    def audit_quiescent(self):
        """With no work in flight every live request is firmly placed, once."""
        self.audit_capacity()
        holders: dict[int, int] = {}
        for node in self.nodes.values():
            if node.potentially_placed:
                raise ProtocolError(
                    f"dc {node.id}: dangling reservations {sorted(node.potentially_placed)}")
            for rid in node.placed:
                if rid in holders:
                    raise ProtocolError(f"request {rid} held at {holders[rid]} and {node.id}")
                holders[rid] = node.id
        for rid, req in self.requests.items():
            if req.state == PLACED:
                if holders.get(rid) != req.cur_place:
                    raise ProtocolError(
                        f"request {rid}: committed at {req.cur_place} "
                        f"but held at {holders.get(rid)}")
            elif req.state == UNPLACED:
                raise ProtocolError(f"request {rid} still unplaced at quiescence")
