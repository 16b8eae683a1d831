"""Dense primal simplex for the placement LP relaxation.

The LP has one assignment equality per request, one capacity inequality
per datacenter, and a [0,1] variable per (request, feasible datacenter)
pair; the equalities make the unit upper bounds implicit.  Two-phase
tableau method; Dantzig pricing with a permanent switch to Bland's rule
once the objective stalls, which rules out cycling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TOL = 1e-9
STALL_LIMIT = 60


class SolverError(Exception):
    """Iteration guard exceeded; should be unreachable under Bland's rule."""


@dataclass(frozen=True)
class LpVar:
    req_id: int
    dc_id: int
    beta: int
    cost: float


@dataclass
class LinearProgram:
    variables: list[LpVar]
    capacities: dict[int, int]
    request_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.request_ids:
            self.request_ids = sorted({v.req_id for v in self.variables})


@dataclass
class SimplexResult:
    status: str                      # "optimal" | "infeasible"
    objective: float
    y: dict[tuple[int, int], float]


def _pivot(T: np.ndarray, basis: np.ndarray, pr: int, pc: int):
    T[pr] /= T[pr, pc]
    col = T[:, pc].copy()
    col[pr] = 0.0
    T -= np.outer(col, T[pr])
    basis[pr] = pc


def _optimize(T: np.ndarray, basis: np.ndarray, m: int, cost_row: int,
              allowed: np.ndarray, max_iter: int) -> None:
    """Pivot until the pricing row has no negative reduced cost left."""
    bland = False
    stall = 0
    last = T[cost_row, -1]  # equals minus the current objective value
    for _ in range(max_iter):
        costs = T[cost_row, :-1]
        candidates = np.where(allowed & (costs < -TOL))[0]
        if candidates.size == 0:
            return
        pc = candidates[0] if bland else candidates[np.argmin(costs[candidates])]
        col = T[:m, pc]
        rows = np.where(col > TOL)[0]
        if rows.size == 0:
            raise SolverError("unbounded direction in a bounded LP")
        ratios = T[rows, -1] / col[rows]
        best = ratios.min()
        tied = rows[np.where(ratios <= best + TOL)[0]]
        pr = tied[np.argmin(basis[tied])]  # smallest basis index on ties
        _pivot(T, basis, pr, pc)
        now = T[cost_row, -1]
        if now > last + TOL:
            stall = 0
        else:
            stall += 1
            if stall > STALL_LIMIT:
                bland = True
        last = now
    raise SolverError(f"simplex did not converge within {max_iter} iterations")


def simplex_solve(lp: LinearProgram) -> SimplexResult:
    """Optimal basic solution of the placement LP, or infeasibility."""
    n = len(lp.variables)
    req_row = {rid: i for i, rid in enumerate(lp.request_ids)}
    n_req = len(lp.request_ids)
    dc_ids = sorted({v.dc_id for v in lp.variables})
    dc_row = {dc: n_req + i for i, dc in enumerate(dc_ids)}
    m = n_req + len(dc_ids)
    if n == 0:
        status = "optimal" if n_req == 0 else "infeasible"
        return SimplexResult(status, 0.0, {})

    n_slack = len(dc_ids)
    width = n + n_slack + n_req + 1
    # rows 0..m-1 constraints, row m phase-2 costs, row m+1 phase-1 costs
    T = np.zeros((m + 2, width))
    for j, v in enumerate(lp.variables):
        T[req_row[v.req_id], j] = 1.0
        T[dc_row[v.dc_id], j] = float(v.beta)
        T[m, j] = float(v.cost)
    for i, dc in enumerate(dc_ids):
        T[n_req + i, n + i] = 1.0
        T[n_req + i, -1] = float(lp.capacities[dc])
    basis = np.empty(m, dtype=np.int64)
    for i in range(n_req):
        T[i, n + n_slack + i] = 1.0
        T[i, -1] = 1.0
        T[m + 1, n + n_slack + i] = 1.0
        basis[i] = n + n_slack + i
    basis[n_req:] = np.arange(n, n + n_slack)
    # make the phase-1 pricing row consistent with the artificial basis
    T[m + 1] -= T[:n_req].sum(axis=0)

    max_iter = 2000 + 60 * (m + n)
    allowed = np.ones(width - 1, dtype=bool)
    _optimize(T, basis, m, m + 1, allowed, max_iter)
    if T[m + 1, -1] < -1e-7:
        return SimplexResult("infeasible", 0.0, {})

    # Pivot any artificial still basic (at zero) out of the basis, else a
    # later pivot could push it positive again.  The assignment and
    # capacity rows are linearly independent, so a pivot always exists.
    for i in range(m):
        if basis[i] >= n + n_slack:
            row = np.abs(T[i, :n + n_slack])
            pc = int(np.argmax(row))
            if row[pc] <= TOL:
                raise SolverError(f"redundant constraint row {i}")
            _pivot(T, basis, i, pc)

    allowed[n + n_slack:] = False  # artificials may not re-enter
    _optimize(T, basis, m, m, allowed, max_iter)

    values = np.zeros(width - 1)
    values[basis] = T[:m, -1]
    y = {}
    for j, v in enumerate(lp.variables):
        if values[j] > TOL:
            y[(v.req_id, v.dc_id)] = float(values[j])
    return SimplexResult("optimal", float(-T[m, -1]), y)
