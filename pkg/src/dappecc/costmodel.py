"""Placement-and-migration problem formulation.

Integer CPU units and integer costs throughout.  A placement is feasible
when every live request sits on exactly one datacenter inside its
delay-feasible prefix and no datacenter's capacity is exceeded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .topology import Topology
from .workload import DEPARTED, FAILED, Request

DEFAULT_MIG_COST = 600


class CostDomainError(Exception):
    """Cost queried outside a request's delay-feasible prefix."""


def beta(topo: Topology, req: Request, dc_id: int) -> int:
    """CPU units request ``req`` needs on datacenter ``dc_id``."""
    level = topo.level(dc_id)
    if level >= req.cls.max_levels or not topo.in_subtree(req.poa, dc_id):
        raise CostDomainError(
            f"datacenter {dc_id} is not delay-feasible for request {req.id}")
    return req.cls.beta_per_level[level]


def comp_cost(topo: Topology, req: Request, dc_id: int) -> int:
    """Computational cost of hosting ``req`` on ``dc_id``."""
    level = topo.level(dc_id)
    if level >= req.cls.max_levels or not topo.in_subtree(req.poa, dc_id):
        raise CostDomainError(
            f"datacenter {dc_id} is not delay-feasible for request {req.id}")
    return req.cls.comp_cost_per_level[level]


def mig_cost(req: Request, src: int | None, dst: int,
             cost: int = DEFAULT_MIG_COST) -> int:
    """Migration cost; first placements (no previous place) migrate for free."""
    if src is None:
        return 0
    if src == dst:
        raise CostDomainError(f"request {req.id}: migration needs src != dst")
    return cost


@dataclass
class PlacementSnapshot:
    """Decision variables (place) plus the current-placement parameters (previous)."""

    requests: dict[int, Request]
    place: dict[int, int | None]
    previous: dict[int, int | None] = field(default_factory=dict)
    capacity: dict[int, int] = field(default_factory=dict)

    @classmethod
    def of(cls, topo: Topology, requests, place, previous=None) -> "PlacementSnapshot":
        return cls(requests={r.id: r for r in requests},
                   place=dict(place),
                   previous=dict(previous or {}),
                   capacity={n.id: n.capacity for n in topo.nodes.values()})


@dataclass(frozen=True)
class CostBreakdown:
    migration: int
    computational: int

    @property
    def total(self) -> int:
        return self.migration + self.computational


def objective(topo: Topology, snap: PlacementSnapshot, handled,
              migration_cost: int = DEFAULT_MIG_COST) -> CostBreakdown:
    """Migration plus computational cost over the handled request set."""
    mig = 0
    comp = 0
    for rid in handled:
        req = snap.requests[rid]
        dst = snap.place.get(rid)
        if dst is None:
            raise CostDomainError(f"request {rid} is handled but has no placement")
        src = snap.previous.get(rid)
        if src is not None and src != dst:
            mig += mig_cost(req, src, dst, migration_cost)
        comp += comp_cost(topo, req, dst)
    return CostBreakdown(migration=mig, computational=comp)


@dataclass
class FeasibilityReport:
    ok: bool
    unplaced: list[int] = field(default_factory=list)
    outside_prefix: list[int] = field(default_factory=list)
    overloaded: list[tuple[int, int, int]] = field(default_factory=list)  # (dc, load, cap)

    def __str__(self) -> str:
        if self.ok:
            return "feasible"
        bits = []
        if self.unplaced:
            bits.append(f"unplaced={self.unplaced}")
        if self.outside_prefix:
            bits.append(f"outside_prefix={self.outside_prefix}")
        if self.overloaded:
            bits.append(f"overloaded={self.overloaded}")
        return "infeasible: " + " ".join(bits)


def check_feasible(topo: Topology, snap: PlacementSnapshot) -> FeasibilityReport:
    """Verify the single-placement and capacity constraints; never raises."""
    report = FeasibilityReport(ok=True)
    load: dict[int, int] = {}
    for rid, req in sorted(snap.requests.items()):
        if req.state in (DEPARTED, FAILED):
            continue
        dst = snap.place.get(rid)
        if dst is None:
            report.unplaced.append(rid)
            continue
        prefix = topo.feasible_prefix(req.poa, req.cls.max_levels)
        if dst not in prefix:
            report.outside_prefix.append(rid)
            continue
        load[dst] = load.get(dst, 0) + req.cls.beta_per_level[topo.level(dst)]
    for dc_id in sorted(load):
        cap = snap.capacity.get(dc_id, topo.capacity(dc_id))
        if load[dc_id] > cap:
            report.overloaded.append((dc_id, load[dc_id], cap))
    report.ok = not (report.unplaced or report.outside_prefix or report.overloaded)
    return report
