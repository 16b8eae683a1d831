"""Centralized benchmark algorithms, evaluated once per one-second epoch.

All three see a fresh global snapshot and produce decisions instantly
(their own signaling is not modeled):

* F-Fit: each critical/new request goes to the lowest datacenter of its
  prefix with room; no reshuffling.
* BUPU: bottom-up placement in the protocol's sort order; a failure at a
  request's topmost feasible datacenter re-places that node's whole
  subtree from scratch; a greedy push-up pass then reduces cost.
* LBound: fractional LP over every live request, solved by the in-repo
  simplex; a lower bound on the cost of any feasible placement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .costmodel import PlacementSnapshot
from .protocol import ProtocolConfig, sort_requests
from .simplex import LinearProgram, LpVar, simplex_solve
from .topology import Topology
from .workload import (DEPARTED, FAILED, NS_PER_S, PLACED, UNPLACED, Request,
                       ServiceClass, is_critical)


@dataclass
class EpochSnapshot:
    """Live requests plus which of them need (re)placement this epoch."""

    requests: dict[int, Request]
    pending: list[int]          # new + critical, in arrival order
    capacity: dict[int, int]


def _residuals(topo: Topology, snap: EpochSnapshot) -> dict[int, int]:
    """Free capacity counting only placements that are staying put."""
    resid = dict(snap.capacity)
    pending = set(snap.pending)
    for rid, req in snap.requests.items():
        if rid in pending or req.cur_place is None:
            continue
        resid[req.cur_place] -= req.cls.beta_per_level[topo.level(req.cur_place)]
    return resid


@dataclass
class EpochDecisions:
    placements: dict[int, int] = field(default_factory=dict)   # rid -> datacenter
    failed: list[int] = field(default_factory=list)


def ffit_place(topo: Topology, snap: EpochSnapshot) -> EpochDecisions:
    """Lowest feasible datacenter with room, per request, no reshuffle."""
    resid = _residuals(topo, snap)
    out = EpochDecisions()
    for rid in snap.pending:
        req = snap.requests[rid]
        for dc in topo.feasible_prefix(req.poa, req.cls.max_levels):
            b = req.cls.beta_per_level[topo.level(dc)]
            if resid[dc] >= b:
                resid[dc] -= b
                out.placements[rid] = dc
                break
        else:
            out.failed.append(rid)
    return out


def bupu_place(topo: Topology, snap: EpochSnapshot,
               mig_cost: int = 600) -> EpochDecisions:
    """Bottom-up placement with subtree reshuffle, then a push-up pass."""
    resid = _residuals(topo, snap)
    cur: dict[int, int] = {}    # working placement of everything already down
    pending = set(snap.pending)
    for rid, req in snap.requests.items():
        if rid not in pending and req.cur_place is not None:
            cur[rid] = req.cur_place
    failed: list[int] = []
    reshuffled: set[int] = set()

    def top_of(req: Request) -> int:
        return topo.feasible_prefix(req.poa, req.cls.max_levels)[-1]

    def collect(dc: int, seeds: dict[int, list[Request]]) -> list[Request]:
        """Place what fits in dc's subtree; return what must climb higher."""
        node = topo.node(dc)
        incoming: list[Request] = []
        for child in node.children:
            incoming.extend(collect(child, seeds))
        incoming.extend(seeds.get(dc, []))
        if not incoming:
            return []
        bubbled: list[Request] = []
        entries = sort_requests(topo, incoming, dc)
        for idx, req in enumerate(entries):
            b = req.cls.beta_per_level[node.level]
            if resid[dc] >= b:
                resid[dc] -= b
                cur[req.id] = dc
            elif top_of(req) == dc:
                if dc in reshuffled:
                    failed.append(req.id)
                else:
                    reshuffled.add(dc)
                    bubbled.extend(reshuffle(dc, entries[idx:]))
                    return bubbled
            else:
                bubbled.append(req)
        return bubbled

    def reshuffle(dc: int, unprocessed: list[Request]) -> list[Request]:
        """Clear dc's subtree and re-place its whole load from scratch."""
        pool = list(unprocessed)
        for rid in sorted(r for r, place in cur.items() if topo.in_subtree(place, dc)):
            req = snap.requests[rid]
            resid[cur[rid]] += req.cls.beta_per_level[topo.level(cur[rid])]
            del cur[rid]
            pool.append(req)
        seeds: dict[int, list[Request]] = {}
        for req in sorted(pool, key=lambda r: r.arrival_seq):
            seeds.setdefault(req.poa, []).append(req)
        out = []
        for req in collect(dc, seeds):
            if top_of(req) == dc:
                failed.append(req.id)
            else:
                out.append(req)
        return out

    seeds: dict[int, list[Request]] = {}
    for rid in snap.pending:
        seeds.setdefault(snap.requests[rid].poa, []).append(snap.requests[rid])
    leftover = collect(topo.root_id, seeds)
    assert not leftover, "requests escaped above the root"

    _push_up(topo, snap, cur, resid, mig_cost)

    out = EpochDecisions(failed=sorted(set(failed)))
    for rid, dc in sorted(cur.items()):
        if rid in pending or snap.requests[rid].cur_place != dc:
            out.placements[rid] = dc
    return out


def _push_up(topo: Topology, snap: EpochSnapshot, cur: dict[int, int],
             resid: dict[int, int], mig_cost: int = 600):
    """Greedily migrate placements toward the cloud while that lowers cost."""
    moved = True
    while moved:
        moved = False
        for rid in sorted(cur, key=lambda r: snap.requests[r].arrival_seq):
            req = snap.requests[rid]
            here = cur[rid]
            prefix = topo.feasible_prefix(req.poa, req.cls.max_levels)
            idx = prefix.index(here)
            for dc in reversed(prefix[idx + 1:]):
                b = req.cls.beta_per_level[topo.level(dc)]
                if resid[dc] < b:
                    continue
                old_cost = (req.cls.comp_cost_per_level[topo.level(here)]
                            + (mig_cost if req.cur_place not in (None, here) else 0))
                new_cost = (req.cls.comp_cost_per_level[topo.level(dc)]
                            + (mig_cost if req.cur_place not in (None, dc) else 0))
                if new_cost < old_cost:
                    resid[here] += req.cls.beta_per_level[topo.level(here)]
                    resid[dc] -= b
                    cur[rid] = dc
                    moved = True
                    break


def build_lp(topo: Topology, snap: EpochSnapshot,
             x_frac: dict[tuple[int, int], float] | None = None,
             mig_cost: int = 600) -> LinearProgram:
    """Fractional relaxation over all live requests given current placements.

    With a unit total of current placement per request, the migration term
    of the objective reduces to mig_cost * (1 - x(r, s)) per candidate s;
    first placements migrate for free.
    """
    x_frac = x_frac or {}
    frac_placed = {rid for rid, _ in x_frac}
    variables: list[LpVar] = []
    for rid in sorted(snap.requests):
        req = snap.requests[rid]
        has_x = req.cur_place is not None or rid in frac_placed
        for dc in topo.feasible_prefix(req.poa, req.cls.max_levels):
            level = topo.level(dc)
            cost = float(req.cls.comp_cost_per_level[level])
            if has_x:
                stay = x_frac.get((rid, dc), 1.0 if req.cur_place == dc else 0.0)
                cost += mig_cost * (1.0 - stay)
            variables.append(LpVar(rid, dc, req.cls.beta_per_level[level], cost))
    return LinearProgram(variables=variables, capacities=dict(snap.capacity),
                         request_ids=sorted(snap.requests))


def lbound_cost(topo: Topology, snap: EpochSnapshot,
                x_frac: dict[tuple[int, int], float] | None = None,
                mig_cost: int = 600):
    """Optimal fractional cost for the epoch, or infeasibility."""
    return simplex_solve(build_lp(topo, snap, x_frac, mig_cost))


class EpochEngine:
    """Drives a centralized algorithm inside the simulation kernel."""

    def __init__(self, algorithm: str, topo: Topology, config: ProtocolConfig,
                 kernel):
        if algorithm not in ("ffit", "bupu", "lbound"):
            raise ValueError(f"unknown algorithm {algorithm!r}")
        self.algorithm = algorithm
        self.topo = topo
        self.config = config
        self.kernel = kernel
        self.requests: dict[int, Request] = {}
        self._arrival_seq = 0
        self._x_frac: dict[tuple[int, int], float] = {}
        self._frac_comp = 0.0
        self.counters: dict[str, int] = {}

    # ---- trace ingestion ----------------------------------------------------

    def on_arrive(self, req_id: int, cls: ServiceClass, poa: int):
        self.requests[req_id] = Request(id=req_id, cls=cls, poa=poa,
                                        arrival_seq=self._arrival_seq)
        self._arrival_seq += 1
        self.kernel.stats.new_requests += 1

    def on_move(self, req_id: int, new_poa: int):
        req = self.requests.get(req_id)
        if req is not None and req.state not in (FAILED, DEPARTED):
            req.poa = new_poa

    def on_depart(self, req_id: int):
        req = self.requests.get(req_id)
        if req is not None and req.state not in (FAILED, DEPARTED):
            req.state = DEPARTED
            req.cur_place = None
            self._x_frac = {k: v for k, v in self._x_frac.items() if k[0] != req_id}

    def on_message(self, msg):
        raise AssertionError("centralized algorithms exchange no messages")

    def on_timer(self, node_id, kind):
        raise AssertionError("centralized algorithms use no timers")

    # ---- the epoch ------------------------------------------------------------

    def _snapshot(self) -> EpochSnapshot:
        live = {rid: r for rid, r in self.requests.items()
                if r.state in (UNPLACED, PLACED)}
        pending = []
        for rid in sorted(live, key=lambda r: live[r].arrival_seq):
            req = live[rid]
            if req.state == UNPLACED:
                pending.append(rid)
            elif self.algorithm != "lbound" and is_critical(self.topo, req, req.poa):
                pending.append(rid)
                self.kernel.stats.critical_detections += 1
        return EpochSnapshot(
            requests=live, pending=pending,
            capacity={n.id: n.capacity for n in self.topo.nodes.values()})

    def on_epoch(self, t_ns: int):
        snap = self._snapshot()
        if self.algorithm == "lbound":
            self._lbound_epoch(t_ns, snap)
        else:
            self._placement_epoch(t_ns, snap)

    def _placement_epoch(self, t_ns: int, snap: EpochSnapshot):
        if not snap.pending:
            return
        stats = self.kernel.stats
        if self.algorithm == "ffit":
            decisions = ffit_place(self.topo, snap)
        else:
            decisions = bupu_place(self.topo, snap, self.config.mig_cost)
        epoch_comp = 0
        epoch_mig = 0
        for rid in sorted(decisions.placements):
            req = snap.requests[rid]
            dc = decisions.placements[rid]
            old = req.cur_place
            stats.placements += 1
            epoch_comp += req.cls.comp_cost_per_level[self.topo.level(dc)]
            if old is not None and old != dc:
                stats.migrations += 1
                epoch_mig += self.config.mig_cost
            stats.timeline.append((t_ns, rid, old, dc, self.algorithm))
            req.cur_place = dc
            req.state = PLACED
        stats.event_comp_cost += epoch_comp
        stats.event_mig_cost += epoch_mig
        for rid in decisions.failed:
            snap.requests[rid].state = FAILED
            stats.failures += 1
        stats.epochs.append({
            "epoch": t_ns // NS_PER_S,
            "status": "ok" if not decisions.failed else "fail",
            "objective": epoch_comp + epoch_mig,
            "migrations": epoch_mig // max(self.config.mig_cost, 1),
            "placements": len(decisions.placements)})

    def _lbound_epoch(self, t_ns: int, snap: EpochSnapshot):
        stats = self.kernel.stats
        if not snap.requests:
            return
        result = lbound_cost(self.topo, snap, self._x_frac, self.config.mig_cost)
        if result.status != "optimal":
            stats.failures += len(snap.pending)
            stats.infeasible_epochs += 1
            stats.epochs.append({"epoch": t_ns // NS_PER_S, "status": "infeasible",
                                 "objective": 0.0, "migrations": 0, "placements": 0})
            return
        self._x_frac = result.y
        comp = 0.0
        for (rid, dc), val in result.y.items():
            req = snap.requests[rid]
            comp += req.cls.comp_cost_per_level[self.topo.level(dc)] * val
        self._frac_comp = comp
        stats.event_comp_cost += comp
        stats.event_mig_cost += result.objective - comp
        for rid in snap.pending:
            req = snap.requests[rid]
            req.state = PLACED
            req.cur_place = None  # fractional; no single integral place
        stats.epochs.append({"epoch": t_ns // NS_PER_S, "status": "ok",
                             "objective": result.objective, "migrations": 0,
                             "placements": len(snap.pending)})

    # ---- kernel hooks -----------------------------------------------------------

    def live_comp_cost(self) -> float:
        if self.algorithm == "lbound":
            return self._frac_comp
        total = 0
        for req in self.requests.values():
            if req.state == PLACED and req.cur_place is not None:
                total += req.cls.comp_cost_per_level[self.topo.level(req.cur_place)]
        return total

    def final_snapshot(self) -> PlacementSnapshot:
        if self.algorithm == "lbound":
            return PlacementSnapshot.of(self.topo, [], {})
        live = list(self.requests.values())
        return PlacementSnapshot.of(
            self.topo, live, {r.id: r.cur_place for r in live})

    def audit_capacity(self):
        load: dict[int, int] = {}
        for req in self.requests.values():
            if req.state == PLACED and req.cur_place is not None:
                lvl = self.topo.level(req.cur_place)
                load[req.cur_place] = load.get(req.cur_place, 0) + req.cls.beta_per_level[lvl]
        for dc, used in load.items():
            if used > self.topo.capacity(dc):
                raise AssertionError(f"dc {dc} overloaded: {used} > {self.topo.capacity(dc)}")

    def audit_quiescent(self):
        self.audit_capacity()
