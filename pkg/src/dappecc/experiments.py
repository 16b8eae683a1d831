"""Experiment harness: feasibility, overhead, and cost studies.

Every study is a pure function of its plan and seeds; outputs are CSV
files plus a meta.json echoing the full configuration.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import __version__
from .protocol import ProtocolConfig
from .simcore import DelayModel, RunConfig, RunStats, run
from .topology import TreeSpec, build_tree
from .workload import NS_PER_S, SynthParams, synth_trace

ALGORITHMS = ("lbound", "bupu", "dappecc", "ffit")

# A single datacenter's capacity must fit the 16-bit deficit field.
MAX_C_CPU = (1 << 16) // 8


class ExperimentError(Exception):
    pass


@dataclass(frozen=True)
class ExperimentPlan:
    """Desk-scale defaults: a 32-leaf tree and a few minutes of mobility."""

    tree: TreeSpec = TreeSpec(height=6, fanouts=2, c_cpu=20)
    grid_rows: int = 4
    grid_cols: int = 8
    n_users: int = 120
    duration_s: float = 240.0
    speed_min: float = 0.02
    speed_max: float = 0.08
    arrival_window_s: float | None = None
    mean_lifetime_s: float | None = None
    group_size: int = 1
    seeds: tuple[int, ...] = (1, 2)
    algorithms: tuple[str, ...] = ALGORITHMS
    rt_ratios: tuple[float, ...] = (0.0, 0.5, 1.0)
    acc_delays_us: tuple[float, ...] = (1.0, 2.0, 4.0, 8.0, 16.0)
    augmentations: tuple[float, ...] = (1.1, 1.25, 1.5, 2.0)
    cost_rt_ratio: float = 0.3
    watchdog: int = 1_000_000

    def trace(self, rt_ratio: float, seed: int):
        topo = build_tree(self.tree)
        params = SynthParams(
            n_users=self.n_users, duration_s=self.duration_s,
            grid_rows=self.grid_rows, grid_cols=self.grid_cols,
            poas=tuple(topo.leaves), seed=seed, rt_ratio=rt_ratio,
            speed_min=self.speed_min, speed_max=self.speed_max,
            arrival_window_s=self.arrival_window_s,
            mean_lifetime_s=self.mean_lifetime_s,
            group_size=self.group_size)
        return synth_trace(params)


def run_point(plan: ExperimentPlan, algorithm: str, trace, c_cpu: int,
              seed: int, protocol: ProtocolConfig | None = None,
              audit: bool = False) -> RunStats:
    topo = build_tree(plan.tree.with_c_cpu(c_cpu))
    config = RunConfig(algorithm=algorithm, seed=seed,
                       protocol=protocol or ProtocolConfig(),
                       delay=DelayModel(), watchdog=plan.watchdog, audit=audit)
    return run(trace, topo, config)


def succeeded(stats: RunStats) -> bool:
    """All critical and new services placed along the whole trace."""
    return (not stats.diverged and stats.failures == 0
            and stats.infeasible_epochs == 0 and stats.final_feasible)


def min_cpu_search(plan: ExperimentPlan, algorithm: str, rt_ratio: float,
                   seed: int, lo: int = 1, hi: int | None = None) -> int | None:
    """Smallest per-leaf CPU at which the whole trace runs without failures.

    Binary search under the (sampled elsewhere) monotonicity assumption
    that success at C implies success at larger C.  Returns None when even
    the upper bound fails.
    """
    trace = plan.trace(rt_ratio, seed)
    if not trace:
        return lo

    def ok(c: int) -> bool:
        return succeeded(run_point(plan, algorithm, trace, c, seed))

    if hi is None:
        hi = max(lo, 8)
        while not ok(hi):
            if hi >= MAX_C_CPU:
                return None
            hi = min(hi * 2, MAX_C_CPU)
    elif not ok(hi):
        return None
    if ok(lo):
        return lo
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


def feasibility_study(plan: ExperimentPlan, rt_ratios=None) -> list[dict]:
    """Minimum CPU per algorithm and RT ratio (the capacity-vs-RT figure)."""
    rows = []
    for rt in rt_ratios if rt_ratios is not None else plan.rt_ratios:
        for seed in plan.seeds:
            base = None
            for alg in plan.algorithms:
                c = min_cpu_search(plan, alg, rt, seed)
                if alg == "lbound":
                    base = c
                rows.append({
                    "rt_ratio": rt, "algorithm": alg, "seed": seed,
                    "min_c_cpu": c if c is not None else "",
                    "lbound_ratio": (round(c / base, 4)
                                     if c is not None and base else "")})
    return rows


def overhead_study(plan: ExperimentPlan, rt_ratios=None,
                   acc_delays_us=None) -> list[dict]:
    """Signaling bytes per critical/new request across RT ratios and delays.

    Capacity is pinned at 110% of the LP lower bound's requirement with
    every request real-time, per seed.
    """
    rows = []
    rt_ratios = rt_ratios if rt_ratios is not None else plan.rt_ratios
    delays = acc_delays_us if acc_delays_us is not None else plan.acc_delays_us
    for seed in plan.seeds:
        lb = min_cpu_search(plan, "lbound", 1.0, seed)
        if lb is None:
            raise ExperimentError(f"no feasible capacity found for seed {seed}")
        c_cpu = math.ceil(1.1 * lb)
        for rt in rt_ratios:
            trace = plan.trace(rt, seed)
            for t_bu in delays:
                proto = ProtocolConfig(t_bu_ad_ns=int(t_bu * 1000),
                                       t_pd_ad_ns=int(4 * t_bu * 1000))
                stats = run_point(plan, "dappecc", trace, c_cpu, seed, proto)
                rows.append({
                    "rt_ratio": rt, "t_bu_ad_us": t_bu, "seed": seed,
                    "c_cpu": c_cpu,
                    "bytes_per_request": round(stats.per_request_bytes, 3),
                    "handled_requests": stats.handled_requests,
                    "diverged": int(stats.diverged)})
    return rows


def cost_study(plan: ExperimentPlan, augmentations=None) -> list[dict]:
    """Costs per algorithm when scaling capacity above the LP minimum."""
    rows = []
    augs = augmentations if augmentations is not None else plan.augmentations
    rt = plan.cost_rt_ratio
    for seed in plan.seeds:
        lb = min_cpu_search(plan, "lbound", rt, seed)
        if lb is None:
            raise ExperimentError(f"no feasible capacity found for seed {seed}")
        trace = plan.trace(rt, seed)
        for aug in augs:
            c_cpu = math.ceil(aug * lb)
            for alg in plan.algorithms:
                stats = run_point(plan, alg, trace, c_cpu, seed)
                rows.append({
                    "augmentation": aug, "algorithm": alg, "seed": seed,
                    "c_cpu": c_cpu,
                    "event_cost": round(stats.event_cost_total, 2),
                    "aggregate_cost": round(stats.aggregate_cost_total, 2),
                    "failures": stats.failures,
                    "diverged": int(stats.diverged)})
    return rows


def write_csv(path: Path, rows: list[dict]):
    if not rows:
        raise ExperimentError(f"no rows to write to {path}")
    cols = list(rows[0])
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(str(row[c]) for c in cols))
    path.write_text("\n".join(lines) + "\n")


def plan_to_dict(plan: ExperimentPlan) -> dict:
    tree = plan.tree
    return {
        "tree": {"height": tree.height, "fanouts": tree.fanouts,
                 "c_cpu": tree.c_cpu},
        "grid_rows": plan.grid_rows, "grid_cols": plan.grid_cols,
        "n_users": plan.n_users, "duration_s": plan.duration_s,
        "speed_min": plan.speed_min, "speed_max": plan.speed_max,
        "seeds": list(plan.seeds), "algorithms": list(plan.algorithms),
        "rt_ratios": list(plan.rt_ratios),
        "acc_delays_us": list(plan.acc_delays_us),
        "augmentations": list(plan.augmentations),
        "cost_rt_ratio": plan.cost_rt_ratio, "watchdog": plan.watchdog,
    }


def run_all(plan: ExperimentPlan, out_dir: Path,
            studies=("feasibility", "overhead", "cost")) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    if "feasibility" in studies:
        written["figure2"] = out_dir / "figure2.csv"
        write_csv(written["figure2"], feasibility_study(plan))
    if "overhead" in studies:
        written["figure3"] = out_dir / "figure3.csv"
        write_csv(written["figure3"], overhead_study(plan))
    if "cost" in studies:
        written["costs"] = out_dir / "costs.csv"
        write_csv(written["costs"], cost_study(plan))
    meta = {"version": __version__, "plan": plan_to_dict(plan),
            "studies": sorted(studies)}
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    written["meta"] = out_dir / "meta.json"
    return written
