"""Bundled exact solver: bounded-variable primal simplex plus branch & bound.

The simplex keeps a dense explicit basis inverse with elementary updates and
periodic refactorization, uses Bland's rule throughout (termination over
speed), and handles general box bounds including free variables and bound
flips.  Branch & bound is best-first on the node's relaxation bound, branches
on the most fractional variable, and breaks all ties by lowest index /
insertion order so results are bit-for-bit reproducible.

Intended for desk-scale instances produced by the instantiation builders;
there is no presolve, scaling, cut generation or warm starting.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .sform import StandardForm

RC_TOL = 1e-9          # reduced-cost optimality tolerance
PIVOT_TOL = 1e-10      # minimum pivot magnitude in the ratio test
FEAS_TOL = 1e-9        # bound/row feasibility tolerance
INT_TOL = 1e-6         # integrality tolerance
REFACTOR_EVERY = 50    # pivots between basis refactorizations

AT_LOWER, AT_UPPER, FREE_NB, BASIC = 0, 1, 2, 3


@dataclass
class LPResult:
    status: str                 # optimal | infeasible | unbounded | iteration_limit
    objective: float | None
    x: np.ndarray | None        # structural variables only
    duals: np.ndarray | None    # one multiplier per row
    reduced: np.ndarray | None  # structural reduced costs
    iterations: int

    def dual_objective(self, sf: StandardForm) -> float:
        """Lagrangian bound from the returned multipliers (finite-bound form)."""
        if self.duals is None:
            return float("nan")
        val = float(self.duals @ sf.rhs)
        for j in range(sf.ncols):
            dj = self.reduced[j]
            if dj > RC_TOL:
                val += dj * sf.lb[j] if np.isfinite(sf.lb[j]) else -np.inf
            elif dj < -RC_TOL:
                val += dj * sf.ub[j] if np.isfinite(sf.ub[j]) else -np.inf
        return val


@dataclass
class MILPResult:
    status: str                 # optimal | infeasible | node_limit | unbounded
    objective: float | None     # incumbent objective
    x: np.ndarray | None
    best_bound: float
    nodes: int

    @property
    def gap(self) -> float:
        if self.objective is None:
            return float("inf")
        return self.objective - self.best_bound


class _Simplex:
    """One bounded-variable two-phase solve on the computational form."""

    def __init__(self, sf: StandardForm, lb: np.ndarray, ub: np.ndarray,
                 max_iter: int):
        self.sf = sf
        self.n = sf.ncols
        self.m = sf.nrows
        self.max_iter = max_iter
        # computational form: A x + I s = b, slack bounds encode the sense
        slack_lb = np.empty(self.m)
        slack_ub = np.empty(self.m)
        for i, sense in enumerate(sf.senses):
            if sense == "<":
                slack_lb[i], slack_ub[i] = 0.0, np.inf
            elif sense == ">":
                slack_lb[i], slack_ub[i] = -np.inf, 0.0
            else:
                slack_lb[i] = slack_ub[i] = 0.0
        self.lb = np.concatenate([lb, slack_lb])
        self.ub = np.concatenate([ub, slack_ub])
        A = np.zeros((self.m, self.n + self.m))
        for i, row in enumerate(sf.row_ptr):
            for j, v in row:
                A[i, j] += v
        A[:, self.n:] = np.eye(self.m)
        self.A = A
        self.b = sf.rhs.astype(float).copy()
        self.N = self.n + self.m
        self.iterations = 0

    # -- state helpers ---------------------------------------------------

    def _nb_value(self, j: int) -> float:
        st = self.status[j]
        if st == AT_LOWER:
            return self.lb[j]
        if st == AT_UPPER:
            return self.ub[j]
        return 0.0

    def _initial_point(self) -> None:
        """Nonbasic start values: finite bound nearest zero, else free at 0."""
        self.status = np.empty(self.N, dtype=np.int8)
        for j in range(self.N):
            lo, hi = self.lb[j], self.ub[j]
            if np.isfinite(lo) and (abs(lo) <= abs(hi) or not np.isfinite(hi)):
                self.status[j] = AT_LOWER
            elif np.isfinite(hi):
                self.status[j] = AT_UPPER
            else:
                self.status[j] = FREE_NB

    def _recompute_basics(self) -> None:
        val = np.array([self._nb_value(j) for j in range(self.N)])
        val[self.basis] = 0.0
        rhs_eff = self.b - self.A @ val
        self.xB = self.Binv @ rhs_eff

    def _refactor(self) -> None:
        self.Binv = np.linalg.inv(self.A[:, self.basis])
        self._recompute_basics()

    def _full_values(self) -> np.ndarray:
        val = np.array([self._nb_value(j) for j in range(self.N)])
        val[self.basis] = self.xB
        return val

    # -- core iteration ----------------------------------------------------

    def _price(self, cost: np.ndarray):
        y = cost[self.basis] @ self.Binv
        d = cost - y @ self.A
        return y, d

    def _iterate(self, cost: np.ndarray) -> str:
        """Pivot until optimal/unbounded for the given costs (Bland's rule)."""
        since_refactor = 0
        while True:
            if self.iterations >= self.max_iter:
                return "iteration_limit"
            y, d = self._price(cost)
            enter = -1
            direction = 0
            for j in range(self.N):
                if self.status[j] == BASIC:
                    continue
                if self.ub[j] - self.lb[j] <= 0:
                    continue  # fixed variable can never move
                st, dj = self.status[j], d[j]
                if st == AT_LOWER and dj < -RC_TOL:
                    enter, direction = j, +1
                    break
                if st == AT_UPPER and dj > RC_TOL:
                    enter, direction = j, -1
                    break
                if st == FREE_NB and abs(dj) > RC_TOL:
                    enter, direction = j, (+1 if dj < 0 else -1)
                    break
            if enter < 0:
                return "optimal"

            self.iterations += 1
            w = self.Binv @ self.A[:, enter]
            # max step before the entering variable hits its opposite bound
            span = self.ub[enter] - self.lb[enter]
            t_best = span if np.isfinite(span) else np.inf
            leave_row = -1
            for i in range(self.m):
                wi = direction * w[i]
                if wi > PIVOT_TOL:
                    lo = self.lb[self.basis[i]]
                    ti = np.inf if not np.isfinite(lo) else (self.xB[i] - lo) / wi
                elif wi < -PIVOT_TOL:
                    hi = self.ub[self.basis[i]]
                    ti = np.inf if not np.isfinite(hi) else (self.xB[i] - hi) / wi
                else:
                    continue
                ti = max(ti, 0.0)
                # Bland tie break: smallest basic variable index wins
                if ti < t_best - 1e-12:
                    t_best, leave_row = ti, i
                elif ti <= t_best + 1e-12 and (
                        leave_row < 0
                        or self.basis[i] < self.basis[leave_row]):
                    leave_row = i
                    t_best = min(t_best, ti)
            if not np.isfinite(t_best):
                return "unbounded"

            if leave_row < 0:
                # bound flip: entering variable crosses to its other bound
                self.xB -= t_best * direction * w
                self.status[enter] = AT_UPPER if direction > 0 else AT_LOWER
                continue

            enter_val = self._nb_value(enter) + t_best * direction
            leaving = self.basis[leave_row]
            wi = direction * w[leave_row]
            self.status[leaving] = AT_LOWER if wi > 0 else AT_UPPER
            self.xB -= t_best * direction * w
            self.xB[leave_row] = enter_val
            self.basis[leave_row] = enter
            self.status[enter] = BASIC
            # elementary basis-inverse update on the pivot row
            piv = w[leave_row]
            self.Binv[leave_row] /= piv
            other = np.arange(self.m) != leave_row
            self.Binv[other] -= np.outer(w[other], self.Binv[leave_row])
            since_refactor += 1
            if since_refactor >= REFACTOR_EVERY:
                self._refactor()
                since_refactor = 0

    def solve(self, cost_struct: np.ndarray) -> LPResult:
        if (self.lb > self.ub + FEAS_TOL).any():
            return LPResult("infeasible", None, None, None, None, 0)
        self._initial_point()
        self.basis = list(range(self.n, self.n + self.m))
        self.Binv = np.eye(self.m)
        self._recompute_basics()

        # phase 1: drive bound violations of the slack basis to zero via
        # artificial columns appended on the right
        viol_rows = [i for i in range(self.m)
                     if self.xB[i] < self.lb[self.basis[i]] - FEAS_TOL
                     or self.xB[i] > self.ub[self.basis[i]] + FEAS_TOL]
        if viol_rows:
            n_art = len(viol_rows)
            art_cols = np.zeros((self.m, n_art))
            art_lb = np.zeros(n_art)
            art_ub = np.full(n_art, np.inf)
            for k, i in enumerate(viol_rows):
                slack = self.basis[i]
                target = (self.lb[slack]
                          if self.xB[i] < self.lb[slack] else self.ub[slack])
                resid = self.xB[i] - target
                art_cols[i, k] = 1.0 if resid > 0 else -1.0
            self.A = np.hstack([self.A, art_cols])
            self.lb = np.concatenate([self.lb, art_lb])
            self.ub = np.concatenate([self.ub, art_ub])
            old_N = self.N
            self.N += n_art
            self.status = np.concatenate(
                [self.status, np.full(n_art, AT_LOWER, dtype=np.int8)])
            # swap artificials into the basis in place of violated slacks
            for k, i in enumerate(viol_rows):
                slack = self.basis[i]
                target = (self.lb[slack]
                          if self.xB[i] < self.lb[slack] else self.ub[slack])
                self.status[slack] = (AT_LOWER if target == self.lb[slack]
                                      else AT_UPPER)
                self.basis[i] = old_N + k
                self.status[old_N + k] = BASIC
            self._refactor()
            cost1 = np.zeros(self.N)
            cost1[old_N:] = 1.0
            st = self._iterate(cost1)
            if st == "iteration_limit":
                return LPResult(st, None, None, None, None, self.iterations)
            art_sum = float(cost1 @ self._full_values())
            if st != "optimal" or art_sum > 1e-7:
                return LPResult("infeasible", None, None, None, None,
                                self.iterations)
            # freeze artificials at zero for phase 2
            self.ub[old_N:] = 0.0
            self.lb[old_N:] = 0.0

        cost = np.zeros(self.N)
        cost[:self.n] = cost_struct
        st = self._iterate(cost)
        if st != "optimal":
            return LPResult(st, None, None, None, None, self.iterations)
        val = self._full_values()
        y, d = self._price(cost)
        obj = float(cost_struct @ val[:self.n])
        return LPResult("optimal", obj, val[:self.n].copy(), y.copy(),
                        d[:self.n].copy(), self.iterations)


def solve_lp(sf: StandardForm, lb: np.ndarray | None = None,
             ub: np.ndarray | None = None,
             max_iter: int | None = None) -> LPResult:
    """Solve the LP relaxation of ``sf`` (integrality flags ignored).

    ``lb``/``ub`` override the variable bounds, which is how branch & bound
    reuses this entry point.
    """
    lb = sf.lb if lb is None else lb
    ub = sf.ub if ub is None else ub
    if max_iter is None:
        max_iter = max(20000, 200 * (sf.nrows + sf.ncols))
    return _Simplex(sf, np.asarray(lb, dtype=float),
                    np.asarray(ub, dtype=float), max_iter).solve(sf.obj)


def _most_fractional(x: np.ndarray, int_mask: np.ndarray) -> int:
    """Index of the integer variable farthest from integrality, or -1."""
    best, best_score = -1, INT_TOL
    for j in np.where(int_mask)[0]:
        frac = x[j] - np.floor(x[j])
        score = min(frac, 1.0 - frac)
        if score > best_score + 1e-15:
            best, best_score = int(j), score
    return best


def solve_milp(sf: StandardForm, gap_tol: float = 1e-9,
               node_limit: int = 100000) -> MILPResult:
    """Best-first branch & bound over ``sf``'s integrality flags.

    Terminates when the optimality gap is at most ``gap_tol`` (absolute) or
    the node limit is hit, in which case the incumbent (if any) and a valid
    bound are still returned.
    """
    int_mask = sf.is_int.copy()
    incumbent = None
    inc_obj = np.inf
    nodes = 0
    seq = 0
    root = solve_lp(sf)
    if root.status == "infeasible":
        return MILPResult("infeasible", None, None, np.inf, 1)
    if root.status == "unbounded":
        return MILPResult("unbounded", None, None, -np.inf, 1)
    heap = [(root.objective, seq, sf.lb.copy(), sf.ub.copy(), root)]
    best_bound = root.objective
    while heap:
        bound, _, lb, ub, res = heapq.heappop(heap)
        best_bound = bound
        if bound >= inc_obj - gap_tol:
            break  # remaining nodes cannot improve past the gap tolerance
        nodes += 1
        if nodes > node_limit:
            return MILPResult("node_limit", None if incumbent is None
                              else inc_obj, incumbent, bound, nodes)
        if res is None:
            res = solve_lp(sf, lb, ub)
        if res.status == "infeasible":
            continue
        if res.status != "optimal":
            return MILPResult(res.status, None, None, bound, nodes)
        if res.objective >= inc_obj - gap_tol:
            continue
        j = _most_fractional(res.x, int_mask)
        if j < 0:
            x = res.x.copy()
            x[int_mask] = np.round(x[int_mask])
            if res.objective < inc_obj - 1e-12:
                incumbent, inc_obj = x, res.objective
            continue
        v = res.x[j]
        for new_lb, new_ub in (((lb, _with(ub, j, np.floor(v)))),
                               ((_with(lb, j, np.ceil(v)), ub))):
            seq += 1
            child = solve_lp(sf, new_lb, new_ub)
            if child.status == "infeasible":
                continue
            if child.status != "optimal":
                return MILPResult(child.status, None, None, bound, nodes)
            if child.objective < inc_obj - gap_tol:
                heapq.heappush(heap, (child.objective, seq, new_lb, new_ub,
                                      child))
    else:
        best_bound = inc_obj if incumbent is not None else np.inf
    if incumbent is None:
        return MILPResult("infeasible", None, None, best_bound, max(nodes, 1))
    return MILPResult("optimal", inc_obj, incumbent, min(best_bound, inc_obj),
                      max(nodes, 1))


def _with(arr: np.ndarray, j: int, v: float) -> np.ndarray:
    out = arr.copy()
    out[j] = v
    return out


def check_optimality(sf: StandardForm, res: LPResult) -> dict:
    """Primal residual, duality gap and complementary slackness diagnostics."""
    if res.status != "optimal":
        raise ValueError("diagnostics require an optimal result")
    x = res.x
    primal = float(sf.residuals(x).max(initial=0.0))
    bound_viol = float(max(np.max(sf.lb - x, initial=0.0),
                           np.max(x - sf.ub, initial=0.0)))
    dual_gap = abs(res.objective - _dual_objective(sf, res))
    comp = 0.0
    for i in range(sf.nrows):
        act = sf.row_activity(i, x)
        if sf.senses[i] == "<":
            comp = max(comp, abs(res.duals[i] * (sf.rhs[i] - act)))
        elif sf.senses[i] == ">":
            comp = max(comp, abs(res.duals[i] * (act - sf.rhs[i])))
    for j in range(sf.ncols):
        dj = res.reduced[j]
        if dj > RC_TOL and np.isfinite(sf.lb[j]):
            comp = max(comp, abs(dj * (x[j] - sf.lb[j])))
        elif dj < -RC_TOL and np.isfinite(sf.ub[j]):
            comp = max(comp, abs(dj * (sf.ub[j] - x[j])))
    return {"primal": max(primal, bound_viol), "dual_gap": dual_gap,
            "complementarity": comp}


def _dual_objective(sf: StandardForm, res: LPResult) -> float:
    val = float(res.duals @ sf.rhs)
    for j in range(sf.ncols):
        dj = res.reduced[j]
        if dj > RC_TOL:
            val += dj * sf.lb[j] if np.isfinite(sf.lb[j]) else 0.0
        elif dj < -RC_TOL:
            val += dj * sf.ub[j] if np.isfinite(sf.ub[j]) else 0.0
    return val
