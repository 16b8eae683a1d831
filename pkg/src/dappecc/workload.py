"""Service classes, requests, and mobility traces.

A trace is an ordered list of arrive / move / depart events.  Traces come
either from a CSV file or from the built-in random-waypoint generator,
which walks users over the PoA grid and emits a move whenever the sampled
PoA changes.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation

from .topology import Topology

NS_PER_S = 1_000_000_000

MAX_REQUEST_ID = (1 << 14) - 1  # 14-bit wire field
MAX_CLASS_ID = (1 << 4) - 1     # 4-bit wire field
MAX_BETA = (1 << 5) - 1         # 5-bit wire field

# Request lifecycle states.
UNPLACED = "unplaced"
PLACED = "placed"
FAILED = "failed"
DEPARTED = "departed"

ARRIVE = "arrive"
MOVE = "move"
DEPART = "depart"


class TraceError(Exception):
    """Malformed trace or class-table input."""


@dataclass(frozen=True)
class ServiceClass:
    """Per-class SLA data: prefix length, CPU demand and cost per level."""

    name: str
    class_id: int
    max_levels: int
    beta_per_level: tuple[int, ...]
    comp_cost_per_level: tuple[int, ...]

    def __post_init__(self):
        if not 0 <= self.class_id <= MAX_CLASS_ID:
            raise TraceError(f"class {self.name}: classId {self.class_id} not 4-bit")
        if len(self.beta_per_level) != self.max_levels:
            raise TraceError(f"class {self.name}: need {self.max_levels} beta values")
        if len(self.comp_cost_per_level) != self.max_levels:
            raise TraceError(f"class {self.name}: need {self.max_levels} cost values")
        if any(not 1 <= b <= MAX_BETA for b in self.beta_per_level):
            raise TraceError(f"class {self.name}: beta values must fit in 5 bits")
        if any(self.comp_cost_per_level[i] <= self.comp_cost_per_level[i + 1]
               for i in range(self.max_levels - 1)):
            raise TraceError(f"class {self.name}: comp cost must strictly decrease with level")


# Demand/cost tables for the two default SLA classes (RT capped at tree
# levels 0-2, non-RT placeable anywhere in a 6-level tree).
RT = ServiceClass("RT", 1, 3, (17, 17, 19), (544, 278, 164))
NON_RT = ServiceClass("NonRT", 2, 6, (17,) * 6, (544, 278, 148, 86, 58, 47))
DEFAULT_CLASSES = {c.name: c for c in (RT, NON_RT)}


def parse_class_table(lines) -> dict[str, ServiceClass]:
    """Parse `name,classId,maxLevels,beta0;beta1;...,cost0;cost1;...` lines."""
    classes: dict[str, ServiceClass] = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise TraceError(f"class table line {lineno}: expected 5 fields, got {len(parts)}")
        try:
            name = parts[0]
            cls = ServiceClass(
                name=name,
                class_id=int(parts[1]),
                max_levels=int(parts[2]),
                beta_per_level=tuple(int(x) for x in parts[3].split(";")),
                comp_cost_per_level=tuple(int(x) for x in parts[4].split(";")),
            )
        except (ValueError, TraceError) as exc:
            raise TraceError(f"class table line {lineno}: {exc}") from None
        if name in classes:
            raise TraceError(f"class table line {lineno}: duplicate class {name}")
        classes[name] = cls
    if not classes:
        raise TraceError("class table is empty")
    return classes


@dataclass
class Request:
    """One service request; at most one current placement at any time."""

    id: int
    cls: ServiceClass
    poa: int
    arrival_seq: int
    cur_place: int | None = None
    state: str = UNPLACED

    def prefix(self, topo: Topology) -> tuple[int, ...]:
        return topo.feasible_prefix(self.poa, self.cls.max_levels)

    def top_feasible(self, topo: Topology) -> int:
        return self.prefix(topo)[-1]


@dataclass(frozen=True)
class TraceEvent:
    time_ns: int
    user: int
    kind: str
    poa: int | None = None
    cls_name: str | None = None

    @property
    def time_s(self) -> float:
        return self.time_ns / NS_PER_S


def _parse_time_ns(text: str) -> int:
    try:
        return int(Decimal(text) * NS_PER_S)
    except InvalidOperation:
        raise ValueError(f"bad time {text!r}") from None


def parse_trace(lines, classes: dict[str, ServiceClass] | None = None,
                valid_poas=None) -> list[TraceEvent]:
    """Parse trace CSV lines `time_s,user_id,kind,arg1[,arg2]`.

    Events are ordered by (time, line order); per-user ordering
    (arrive < moves < depart) is validated.  Errors name the line number.
    """
    classes = classes if classes is not None else DEFAULT_CLASSES
    valid = set(valid_poas) if valid_poas is not None else None
    events: list[TraceEvent] = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) < 3:
            raise TraceError(f"trace line {lineno}: expected at least 3 fields")
        try:
            t = _parse_time_ns(parts[0])
            user = int(parts[1])
        except ValueError as exc:
            raise TraceError(f"trace line {lineno}: {exc}") from None
        if not 0 <= user <= MAX_REQUEST_ID:
            raise TraceError(f"trace line {lineno}: user id {user} not 14-bit")
        kind = parts[2]
        if kind == ARRIVE:
            if len(parts) != 5:
                raise TraceError(f"trace line {lineno}: arrive needs poa and class")
            poa, cls_name = int(parts[3]), parts[4]
            if cls_name not in classes:
                raise TraceError(f"trace line {lineno}: unknown class {cls_name!r}")
            events.append(TraceEvent(t, user, ARRIVE, poa, cls_name))
        elif kind == MOVE:
            if len(parts) != 4:
                raise TraceError(f"trace line {lineno}: move needs a poa")
            events.append(TraceEvent(t, user, MOVE, int(parts[3])))
        elif kind == DEPART:
            events.append(TraceEvent(t, user, DEPART))
        else:
            raise TraceError(f"trace line {lineno}: unknown event kind {kind!r}")
        if kind in (ARRIVE, MOVE) and valid is not None and events[-1].poa not in valid:
            raise TraceError(f"trace line {lineno}: unknown PoA id {events[-1].poa}")

    events.sort(key=lambda e: e.time_ns)  # stable: preserves line order on ties

    seen: dict[int, str] = {}
    last_t: dict[int, int] = {}
    for ev in events:
        prev = seen.get(ev.user)
        if ev.kind == ARRIVE:
            if prev is not None:
                raise TraceError(f"user {ev.user}: duplicate arrive")
        else:
            if prev is None:
                raise TraceError(f"user {ev.user}: {ev.kind} before arrive")
            if prev == DEPART:
                raise TraceError(f"user {ev.user}: {ev.kind} after depart")
            if ev.time_ns < last_t[ev.user]:
                raise TraceError(f"user {ev.user}: events out of time order")
        seen[ev.user] = ev.kind
        last_t[ev.user] = ev.time_ns
    return events


def format_trace(events) -> str:
    """Inverse of parse_trace, for writing generated traces to disk."""
    out = []
    for ev in events:
        t = Decimal(ev.time_ns) / NS_PER_S
        if ev.kind == ARRIVE:
            out.append(f"{t},{ev.user},arrive,{ev.poa},{ev.cls_name}")
        elif ev.kind == MOVE:
            out.append(f"{t},{ev.user},move,{ev.poa}")
        else:
            out.append(f"{t},{ev.user},depart")
    return "\n".join(out) + "\n"


@dataclass(frozen=True)
class SynthParams:
    """Random-waypoint workload over a rows x cols grid of PoA cells.

    ``poas[row * cols + col]`` maps a cell to its leaf datacenter id.  Users
    arrive uniformly in [0, arrival_window_s], walk between uniform random
    waypoints at a uniform random speed (cells/s), and depart at
    duration_s (or after an exponential lifetime when mean_lifetime_s is
    set).  PoA changes are sampled every min_move_gap_s, which also
    enforces the minimum spacing between a user's consecutive events.

    group_size > 1 moves users in convoys: each group shares one waypoint
    trajectory and arrival/departure window, with members scattered around
    the group position and slightly staggered in time.
    """

    n_users: int
    duration_s: float
    grid_rows: int
    grid_cols: int
    poas: tuple[int, ...]
    seed: int
    rt_ratio: float = 0.3
    speed_min: float = 0.02
    speed_max: float = 0.08
    min_move_gap_s: float = 1.0
    arrival_window_s: float | None = None
    mean_lifetime_s: float | None = None  # None: stay until duration_s
    group_size: int = 1
    group_spread: float = 0.8             # member scatter radius, in cells
    group_stagger_s: float = 4.0
    rt_class: str = "RT"
    non_rt_class: str = "NonRT"


def synth_trace(params: SynthParams) -> list[TraceEvent]:
    """Deterministic function of its params; same seed, same trace."""
    rows, cols = params.grid_rows, params.grid_cols
    if rows * cols != len(params.poas) or not params.poas:
        raise TraceError(f"grid {rows}x{cols} needs {rows * cols} PoAs, got {len(params.poas)}")
    if not 0.0 <= params.rt_ratio <= 1.0:
        raise TraceError("rt_ratio must be in [0, 1]")
    if params.n_users > MAX_REQUEST_ID + 1:
        raise TraceError(f"at most {MAX_REQUEST_ID + 1} users supported")
    if params.group_size < 1:
        raise TraceError("group_size must be >= 1")
    rng = random.Random(params.seed)
    window = params.arrival_window_s
    if window is None:
        window = params.duration_s / 2
    gap = params.min_move_gap_s
    events: list[TraceEvent] = []

    def cell_poa(px: float, py: float) -> int:
        c = min(max(int(px), 0), cols - 1)
        r = min(max(int(py), 0), rows - 1)
        return params.poas[r * cols + c]

    user = 0
    while user < params.n_users:
        members = list(range(user, min(user + params.group_size, params.n_users)))
        user += len(members)
        t_arr = rng.uniform(0.0, window)
        if params.mean_lifetime_s is not None:
            t_end = min(params.duration_s,
                        t_arr + rng.expovariate(1.0 / params.mean_lifetime_s))
        else:
            t_end = params.duration_s
        x, y = rng.uniform(0, cols), rng.uniform(0, rows)
        speed = rng.uniform(params.speed_min, params.speed_max)
        wx, wy = rng.uniform(0, cols), rng.uniform(0, rows)

        plan = []  # (member, class, arrive_t, end_t, dx, dy)
        solo = params.group_size == 1
        for m in members:
            cls = params.rt_class if rng.random() < params.rt_ratio \
                else params.non_rt_class
            stagger = 0.0 if solo else rng.uniform(0.0, params.group_stagger_s)
            dx = 0.0 if solo else rng.uniform(-params.group_spread, params.group_spread)
            dy = 0.0 if solo else rng.uniform(-params.group_spread, params.group_spread)
            m_arr = min(t_arr + stagger, params.duration_s)
            m_end = max(min(t_end + stagger, params.duration_s), m_arr)
            plan.append((m, cls, m_arr, m_end, dx, dy))
            poa = cell_poa(x + dx, y + dy)
            events.append(TraceEvent(round(m_arr * NS_PER_S), m, ARRIVE, poa, cls))

        cur_poa = {m: cell_poa(x + dx, y + dy) for m, _, _, _, dx, dy in plan}
        horizon = max(m_end for _, _, _, m_end, _, _ in plan)
        # Walk waypoint to waypoint; sample PoAs on a fixed-gap clock so
        # consecutive events of one user are >= min_move_gap_s apart.
        t = t_arr
        while True:
            t += gap
            if t >= horizon:
                break
            step = speed * gap
            while step > 0:
                ddx, ddy = wx - x, wy - y
                dist = (ddx * ddx + ddy * ddy) ** 0.5
                if dist <= step:
                    x, y = wx, wy
                    step -= dist
                    wx, wy = rng.uniform(0, cols), rng.uniform(0, rows)
                else:
                    x += ddx / dist * step
                    y += ddy / dist * step
                    step = 0.0
            for m, _, m_arr, m_end, dx, dy in plan:
                if t < m_arr + gap or t >= m_end:
                    continue
                poa = cell_poa(x + dx, y + dy)
                if poa != cur_poa[m]:
                    cur_poa[m] = poa
                    events.append(TraceEvent(round(t * NS_PER_S), m, MOVE, poa))
        for m, _, _, m_end, _, _ in plan:
            events.append(TraceEvent(round(m_end * NS_PER_S), m, DEPART))

    events.sort(key=lambda e: e.time_ns)
    return events


def is_critical(topo: Topology, req: Request, new_poa: int) -> bool:
    """True iff the current placement violates the prefix from ``new_poa``."""
    prefix = topo.feasible_prefix(new_poa, req.cls.max_levels)
    return req.cur_place not in prefix
