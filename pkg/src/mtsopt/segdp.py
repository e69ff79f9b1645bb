"""Segment value functions by exact backward induction on finite grids.

A segment (the run of level-j ticks under one parent tick) is solved as a
self-contained subproblem with boundary conditions: the start state is
given, the post-dynamics end state must match a prescribed goal (hard
indicator: 0 on match, +inf otherwise), pay an L1 deviation penalty, or is
free.  Values are tabulated over finite grids of states, goals and parent
aggregates, for every transition-family label and chance node, which makes
the tables exact rather than approximate: a control is admissible iff it
maps a grid state to a grid state and satisfies the feasibility system.

Tabulated levels must be hazard (the control at a tick sees that tick's
realized node, as in the short-term recursion the tables implement);
decision-hazard fast levels belong to the MILP routes.

``hybrid_solve`` combines routes: the slowest level is instantiated as a
scenario MILP in which each segment's tabulated value enters through
selection binaries over the finite (start, goal, aggregate) combinations.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .model import (MtsProblem, StageTemplate, TerminalSpec, aggregate,
                    stage_cost, validate_problem)
from .stochastic import (ConditionalNoise, Deterministic, MarkovLattice,
                         ScenarioTree)

KEY_DECIMALS = 9


class DpError(ValueError):
    pass


def vkey(v) -> tuple:
    """Grid lookup key: component-wise rounding kills float fuzz."""
    return tuple(0.0 + round(float(c), KEY_DECIMALS) for c in np.atleast_1d(v))


@dataclass
class StateGrid:
    """Explicit finite state enumeration for one timescale."""
    values: list                     # list of state vectors (np arrays)
    index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.values = [np.asarray(v, dtype=float) for v in self.values]
        self.index = {vkey(v): i for i, v in enumerate(self.values)}
        if len(self.index) != len(self.values):
            raise DpError("state grid contains duplicate points")

    def __len__(self) -> int:
        return len(self.values)

    def lookup(self, v) -> int | None:
        return self.index.get(vkey(v))

    def require(self, v, what: str = "state") -> int:
        i = self.lookup(v)
        if i is None:
            raise DpError(f"{what} {np.asarray(v)} is not on the grid")
        return i

    @classmethod
    def from_template(cls, tpl: StageTemplate, step_size: float = 1.0,
                      filter_pure_rows: bool = True) -> "StateGrid":
        """Product grid: integer components over their integer boxes,
        continuous components discretized with ``step_size``; points
        violating pure-state feasibility rows are dropped."""
        axes = []
        for i in range(tpl.nx):
            lo, hi = tpl.x_lb[i], tpl.x_ub[i]
            if not (np.isfinite(lo) and np.isfinite(hi)):
                raise DpError(f"state component {i} needs finite bounds "
                              f"for grid enumeration")
            if tpl.x_int[i]:
                axes.append([float(v) for v in
                             range(int(np.ceil(lo - 1e-9)),
                                   int(np.floor(hi + 1e-9)) + 1)])
            else:
                n = int(round((hi - lo) / step_size))
                axes.append([lo + step_size * j for j in range(n + 1)
                             if lo + step_size * j <= hi + 1e-9])
        pts = [np.array(c) for c in itertools.product(*axes)] \
            if tpl.nx else [np.zeros(0)]
        if filter_pure_rows and tpl.nrows_feas():
            E, F, J, M, g = tpl.feas(0, 0)
            keep = [i for i in range(len(g))
                    if not F[i].any() and E[i].any()]
            if keep:
                Ek, gk = E[keep], g[keep]
                pts = [v for v in pts if (Ek @ v <= gk + 1e-9).all()]
        if not pts:
            raise DpError("state grid is empty")
        return cls(pts)


def admissible_controls(tpl: StageTemplate, x, y_par, w, next_grid: StateGrid,
                        tol: float = 1e-9) -> list:
    """All (u, next_index) with on-grid successor and feasible rows.

    Integral control components are enumerated over their integer boxes;
    the continuous components are then solved uniquely against each target
    grid point, which requires the continuous columns of B to have full
    column rank (that covers commitment-style controls where the integer
    part absorbs the rank deficiency).
    """
    x = np.asarray(x, dtype=float)
    y_par = np.asarray(y_par, dtype=float)
    w = np.asarray(w, dtype=float)
    A, B, G, H, h = tpl.dyn(len(y_par), len(w))
    base = A @ x + G @ y_par + H @ w + h
    nu = tpl.nu
    if nu == 0:
        i = next_grid.lookup(base)
        if i is None:
            return []
        ok = _feas_ok(tpl, x, np.zeros(0), y_par, w, tol)
        return [(np.zeros(0), i)] if ok else []
    int_ix = np.where(tpl.u_int)[0]
    cont_ix = np.where(~tpl.u_int)[0]
    Bc = B[:, cont_ix]
    if cont_ix.size and np.linalg.matrix_rank(Bc) < cont_ix.size:
        raise DpError("continuous control columns are rank deficient; "
                      "control space is not grid-enumerable")
    int_axes = []
    for i in int_ix:
        lo, hi = tpl.u_lb[i], tpl.u_ub[i]
        if not (np.isfinite(lo) and np.isfinite(hi)):
            raise DpError(f"integral control component {i} needs finite "
                          f"bounds")
        int_axes.append(range(int(np.ceil(lo - 1e-9)),
                              int(np.floor(hi + 1e-9)) + 1))
    out = []
    for combo in itertools.product(*int_axes) if int_axes else [()]:
        partial = base + B[:, int_ix] @ np.asarray(combo, dtype=float) \
            if int_ix.size else base
        for ti, target in enumerate(next_grid.values):
            u = np.zeros(nu)
            u[int_ix] = combo
            if cont_ix.size:
                sol, *_ = np.linalg.lstsq(Bc, target - partial, rcond=None)
                u[cont_ix] = sol
                if np.max(np.abs(Bc @ sol - (target - partial)),
                          initial=0.0) > 1e-7:
                    continue
            elif vkey(partial) != vkey(target):
                continue
            if ((u < tpl.u_lb - tol) | (u > tpl.u_ub + tol)).any():
                continue
            if not _feas_ok(tpl, x, u, y_par, w, tol):
                continue
            out.append((u, ti))
    return out


def _feas_ok(tpl, x, u, y_par, w, tol) -> bool:
    if not tpl.nrows_feas():
        return True
    E, F, J, M, g = tpl.feas(len(y_par), len(w))
    return bool((E @ x + F @ u + J @ y_par + M @ w <= g + tol).all())


# ---------------------------------------------------------------------------
# uniform within-segment chance view for tabulation


class _TabProcess:
    """Hazard segment process: labels, per-position nodes, start weights and
    stepwise transition rows, uniform across lattice / noise / constant."""

    def __init__(self, p: MtsProblem, level: int, m: int):
        proc = p.stochastics.process(level)
        self.kind = "det"
        if isinstance(proc, MarkovLattice):
            self.kind = "lattice"
        elif isinstance(proc, ConditionalNoise):
            self.kind = "noise"
        elif isinstance(proc, ScenarioTree):
            raise DpError("tree levels are instantiated as scenarios, not "
                          "tabulated")
        if not p.stochastics.hazard[level - 1] and self.kind != "det":
            raise DpError(f"level {level} must be hazard for tabulation "
                          f"(the recursion conditions on the current node)")
        self.proc = proc
        self.m = m

    def labels(self) -> list:
        if self.kind == "det":
            return [self.proc.label]
        return self.proc.labels()

    def nodes_at(self, label: str, k: int) -> int:
        if self.kind == "lattice":
            return len(self.proc.nodes_at(k))
        if self.kind == "noise":
            return len(self.proc.distribution(label))
        return 1

    def outcome(self, label: str, k: int, j: int) -> np.ndarray:
        if self.kind == "lattice":
            return np.asarray(self.proc.nodes_at(k)[j].outcome, dtype=float)
        if self.kind == "noise":
            return np.asarray(self.proc.distribution(label)[j][0],
                              dtype=float)
        return np.asarray(self.proc.outcome, dtype=float)

    def node_label(self, label: str, k: int, j: int) -> str:
        if self.kind == "lattice":
            return self.proc.nodes_at(k)[j].label
        if self.kind == "det":
            return self.proc.label
        return ""

    def start_dist(self, label: str) -> np.ndarray:
        """Probabilities over position-0 nodes."""
        n0 = self.nodes_at(label, 0)
        if self.kind == "lattice":
            d = np.zeros(n0)
            d[self.proc.initial] = 1.0
            return d
        if self.kind == "noise":
            return np.array([pr for _, pr in self.proc.distribution(label)])
        return np.ones(1)

    def trans_row(self, label: str, k: int, j: int) -> np.ndarray:
        """P(node at k+1 | node j at k)."""
        if self.kind == "lattice":
            return np.asarray(self.proc.transition(label, k),
                              dtype=float)[j]
        if self.kind == "noise":
            return np.array([pr for _, pr in self.proc.distribution(label)])
        return np.ones(1)


# ---------------------------------------------------------------------------
# value tables


@dataclass
class ValueTable:
    """Tabulated segment value function and its argmin policy.

    ``value[k][label]`` has shape (nodes_at_k, states, goals, aggregates);
    the terminal layer (position m) collapses to (states, goals).  A goal
    axis of size one with ``goal_mode == "free"`` means the end is
    unconstrained.  ``argmin[(k, label, node, si, gi, ai)]`` holds
    (control, next state index, inner value at the argmin); +inf entries
    have none.
    """
    parent_tick: tuple
    level: int
    seg: list
    proc: _TabProcess
    grid: StateGrid
    goals: StateGrid | None
    aggs: list
    goal_mode: str
    rho: float
    value: list
    terminal: np.ndarray
    argmin: dict

    def labels(self) -> list:
        return self.proc.labels()

    def agg_index(self, y_parent) -> int:
        key = vkey(y_parent)
        for i, a in enumerate(self.aggs):
            if vkey(a) == key:
                return i
        raise DpError(f"aggregate value {np.asarray(y_parent)} is not "
                      f"tabulated")

    def goal_index(self, goal) -> int:
        if self.goal_mode == "free":
            return 0
        return self.grid.require(goal, "goal state")


def backward_segment(p: MtsProblem, parent: tuple, grids: dict,
                     terminal: TerminalSpec | str,
                     inner_value=None, agg_values: list | None = None) -> ValueTable:
    """Tabulate the segment value function backward from the end condition.

    ``grids`` maps level -> StateGrid and must cover the segment's level
    (and the parent level when ``agg_values`` is not given).  ``terminal``
    is a TerminalSpec or the string "free" for an unconstrained end.
    ``inner_value`` is an optional callable (tick, x, u, x_next,
    y_parent_value, node_outcome, node_label) -> float adding the finer
    timescale's expected cost at each tick.  All-+inf slices simply report
    unreachability; they are answers, not errors.
    """
    level = len(parent) + 1
    seg = p.grid.segment(parent)
    m = len(seg)
    grid: StateGrid = grids[level]
    if isinstance(terminal, str):
        if terminal != "free":
            raise DpError(f"unknown terminal mode {terminal!r}")
        goal_mode, rho = "free", 0.0
    else:
        goal_mode, rho = terminal.mode, terminal.rho
    ngoal = 1 if goal_mode == "free" else len(grid)

    if agg_values is None:
        agg_values = reachable_aggregates(p, parent, grids)
    aggs = [np.asarray(a, dtype=float) for a in agg_values]
    proc = _TabProcess(p, level, m)
    labels = proc.labels()
    nstate = len(grid)

    term = np.zeros((nstate, ngoal))
    if goal_mode == "hard":
        term.fill(np.inf)
        for si, sv in enumerate(grid.values):
            gi = grid.lookup(sv)
            term[si, gi] = 0.0
    elif goal_mode == "l1":
        for si, sv in enumerate(grid.values):
            for gi, gv in enumerate(grid.values):
                term[si, gi] = rho * float(np.abs(sv - gv).sum())

    value = [None] * m + [term]
    argmin: dict = {}
    for k in range(m - 1, -1, -1):
        tick = seg[k]
        tpl = p.template_at(tick)
        vk = {}
        for label in labels:
            nn = proc.nodes_at(label, k)
            arr = np.full((nn, nstate, ngoal, len(aggs)), np.inf)
            for node in range(nn):
                w = proc.outcome(label, k, node)
                nlab = proc.node_label(label, k, node)
                row = None if k == m - 1 else proc.trans_row(label, k, node)
                for ai, yv in enumerate(aggs):
                    cands = [admissible_controls(tpl, sv, yv, w, grid)
                             for sv in grid.values]
                    for si, sv in enumerate(grid.values):
                        for gi in range(ngoal):
                            best, best_rec = np.inf, None
                            for u, ni in cands[si]:
                                c = stage_cost(tpl, sv, u)
                                inner = 0.0
                                if inner_value is not None:
                                    inner = float(inner_value(
                                        tick, sv, u, grid.values[ni], yv,
                                        w, nlab))
                                c += inner
                                if k == m - 1:
                                    c += float(term[ni, gi])
                                else:
                                    cont = value[k + 1][label][:, ni, gi, ai]
                                    if (row[~np.isfinite(cont)] > 0.0).any():
                                        c = np.inf
                                    else:
                                        c += float(row @ np.where(
                                            np.isfinite(cont), cont, 0.0))
                                if c < best - 1e-12:
                                    best, best_rec = c, (u, ni, inner)
                            arr[node, si, gi, ai] = best
                            if best_rec is not None and np.isfinite(best):
                                argmin[(k, label, node, si, gi, ai)] = \
                                    best_rec
            vk[label] = arr
        value[k] = vk
    return ValueTable(parent_tick=parent, level=level, seg=seg, proc=proc,
                      grid=grid, goals=None if goal_mode == "free" else grid,
                      aggs=aggs, goal_mode=goal_mode, rho=rho, value=value,
                      terminal=term, argmin=argmin)


def reachable_aggregates(p: MtsProblem, parent: tuple, grids: dict) -> list:
    """Parent-level aggregate values over the parent grid and outcomes,
    deduplicated by 1e-9 rounding."""
    lv = len(parent)
    tpl = p.template_at(parent)
    if tpl.ny == 0:
        return [np.zeros(0)]
    if lv not in grids:
        raise DpError(f"no grid supplied for parent level {lv}")
    outs = _level_outcomes(p, lv, parent)
    ypars = _parent_agg_candidates(p, parent, grids)
    seen = {}
    for xv in grids[lv].values:
        for w in outs:
            for yp in ypars:
                y = aggregate(tpl, xv, w, yp)
                seen.setdefault(vkey(y), np.asarray(y, dtype=float))
    return [seen[k] for k in sorted(seen)]


def _level_outcomes(p: MtsProblem, level: int, tick: tuple) -> list:
    proc = p.stochastics.process(level)
    if isinstance(proc, Deterministic):
        return [np.asarray(proc.outcome, dtype=float)]
    if isinstance(proc, ScenarioTree):
        return [np.asarray(n.outcome, dtype=float)
                for n in proc.nodes if n.tick == tick]
    if isinstance(proc, MarkovLattice):
        return [np.asarray(n.outcome, dtype=float)
                for n in proc.nodes_at(tick[-1])]
    if isinstance(proc, ConditionalNoise):
        return [np.asarray(o, dtype=float)
                for dist in proc.table.values() for o, _ in dist]
    return [np.zeros(0)]


def _parent_agg_candidates(p, parent, grids):
    if len(parent) == 1:
        return [np.zeros(0)]
    return reachable_aggregates(p, p.grid.parent_tick(parent), grids)


def value_V(table: ValueTable, x_start, goal, y_parent,
            parent_label: str = "") -> float:
    """Expected segment cost from the start state under the start node law.

    For lattices this is the table at the fixed initial node; for noise it
    averages over the position-0 draw.  Off-grid queries are hard errors;
    nearest-point snapping would silently change the problem.
    """
    si = table.grid.require(x_start, "start state")
    gi = table.goal_index(goal)
    ai = table.agg_index(y_parent)
    if parent_label not in table.labels():
        raise DpError(f"unknown transition-family label {parent_label!r}")
    dist = table.proc.start_dist(parent_label)
    vals = table.value[0][parent_label][:, si, gi, ai]
    if (dist[~np.isfinite(vals)] > 0.0).any():
        return float("inf")
    return float(dist @ np.where(np.isfinite(vals), vals, 0.0))


def forward_rollout(p: MtsProblem, table: ValueTable, x_start, goal,
                    y_parent, parent_label: str = "") -> dict:
    """Exhaustive policy evaluation along every outcome path.

    Follows the argmin controls; returns per-path trajectories with
    realized costs and their probability-weighted total, which equals
    ``value_V`` exactly on finite supports.  A +inf entry en route yields
    an infeasible-rollout report naming the blocking tick.
    """
    si0 = table.grid.require(x_start, "start state")
    gi = table.goal_index(goal)
    ai = table.agg_index(y_parent)
    label = parent_label
    if label not in table.labels():
        raise DpError(f"unknown transition-family label {label!r}")
    m = len(table.seg)
    paths = []
    total = 0.0

    def walk(k, node, si, prob, traj, cost):
        nonlocal total
        key = (k, label, node, si, gi, ai)
        if key not in table.argmin:
            paths.append({"prob": prob, "status": "infeasible",
                          "at": table.seg[k], "trajectory": list(traj),
                          "cost": np.inf})
            return
        u, ni, inner = table.argmin[key]
        tpl = p.template_at(table.seg[k])
        c = stage_cost(tpl, table.grid.values[si], u) + inner
        traj.append((table.seg[k], table.grid.values[si], u))
        if k == m - 1:
            end_cost = 0.0 if table.goal_mode == "free" \
                else float(table.terminal[ni, gi])
            realized = cost + c + end_cost
            paths.append({"prob": prob, "status": "ok",
                          "trajectory": list(traj),
                          "end_state": table.grid.values[ni],
                          "cost": realized})
            total += prob * realized
        else:
            row = table.proc.trans_row(label, k, node)
            for nxt in range(len(row)):
                if row[nxt] > 0.0:
                    walk(k + 1, nxt, ni, prob * row[nxt], traj, cost + c)
        traj.pop()

    start = table.proc.start_dist(label)
    for j in range(len(start)):
        if start[j] > 0.0:
            walk(0, j, si0, float(start[j]), [], 0.0)
    ok = all(pt["status"] == "ok" for pt in paths)
    return {"paths": paths, "expected_cost": total if ok else np.inf,
            "feasible": ok}


# ---------------------------------------------------------------------------
# hybrid instantiation: slow scenario MILP over tabulated segment values


@dataclass
class HybridResult:
    objective: float | None
    status: str
    milp: object
    tables: dict                 # slow tick -> ValueTable
    sf: object
    slow_solution: dict          # (role, level, tick, ctx, comp) -> value


def dispatch_inner_cost(p: MtsProblem, milp_solver=None):
    """Expected finest-level segment cost as a function of the parent tick,
    aggregate value and governing node label.

    For every finest tick under the parent, solves the stateless dispatch
    program min d.u s.t. F u + J y + M w <= g over the noise support
    (per draw for hazard levels; one robust program with stacked rows for
    decision-hazard) and returns the probability-weighted sum.  Results are
    cached on (tick, aggregate key, label).
    """
    from .milp import solve_lp
    from .sform import FormBuilder
    from .stochastic import ConditionalNoise, Deterministic

    L = p.grid.levels
    proc = p.stochastics.process(L)
    hz = p.stochastics.hazard[L - 1]
    tpl = p.templates[L]
    cache: dict = {}

    def dist_for(label: str):
        if isinstance(proc, Deterministic):
            return [(proc.outcome, 1.0)]
        if isinstance(proc, ConditionalNoise):
            return proc.distribution(label)
        raise DpError("finest level must be noise or deterministic for the "
                      "dispatch accessor")

    def solve_one(tick3, y2, draws):
        tpl3 = p.template_at(tick3)
        fb = FormBuilder()
        u = fb.add_vars(tpl3.nu, tpl3.u_lb, tpl3.u_ub, obj=tpl3.d,
                        role="u", level=L, tick=tick3)
        for w, _ in draws:
            wv = np.asarray(w, dtype=float)
            if tpl3.nrows_feas():
                E, F, J, M, g = tpl3.feas(len(y2), len(wv))
                fb.add_block_rows([(F, u)], "<", g - J @ y2 - M @ wv)
        res = solve_lp(fb.build())
        if res.status != "optimal":
            return np.inf
        return res.objective

    def inner(tick2, y2, label):
        key = (tick2, vkey(y2), label)
        if key in cache:
            return cache[key]
        total = 0.0
        dist = dist_for(label)
        for tick3 in p.grid.segment(tick2):
            if hz:
                for w, pr in dist:
                    if pr <= 0.0:
                        continue
                    total += pr * solve_one(tick3, np.asarray(y2, float),
                                            [(w, pr)])
            else:
                total += solve_one(tick3, np.asarray(y2, float), dist)
        cache[key] = total
        return total

    return inner


def make_table_inner(p: MtsProblem, inner_cost) -> object:
    """Adapt a (tick, aggregate, label) cost into the backward-pass hook."""
    def inner(tick, x, u, x_next, y_par, w, nlab):
        tpl = p.template_at(tick)
        if tpl.ny == 0:
            return inner_cost(tick, np.zeros(0), nlab)
        y2 = aggregate(tpl, x, w, y_par)
        return inner_cost(tick, y2, nlab)
    return inner


def build_tables(p: MtsProblem, grids: dict, inner_cost=None) -> dict:
    """One segment table per slow tick; free end for the final segment."""
    inner = None
    if p.grid.levels >= 3:
        if inner_cost is None:
            inner_cost = dispatch_inner_cost(p)
        inner = make_table_inner(p, inner_cost)
    tables = {}
    for t in p.grid.ticks(1):
        term = p.terminal_at(2) if p.grid.next_tick(t) is not None \
            else "free"
        tables[t] = backward_segment(p, t, grids, term, inner_value=inner)
    return tables


def hybrid_solve(p: MtsProblem, grids: dict, *, inner_cost=None,
                 gap_tol: float = 1e-9, node_limit: int = 200000,
                 combo_budget: int = 200000) -> HybridResult:
    """Scenario MILP on the slow level with exact tabulated segment values.

    Requires the shape of the worked three-timescale model: a tree (or
    deterministic) slowest level, a hazard lattice (or deterministic)
    second level, and levels three and deeper stateless under conditional
    noise.  Because start states, goals and aggregates live on finite
    grids, each segment value enters the slow MILP exactly through one
    selection variable per (start, goal, aggregate) combination; grids
    must cover the slow optimum for the result to match the synchronized
    MILP.  Two-level problems need no inner accessor.
    """
    from .instantiate import (BuildValidationError, _emit_slow_layer,
                              _sync_validate, slow_block_groups)
    from .milp import solve_milp
    from .sform import FormBuilder, VarInfo

    issues = validate_problem(p) + _sync_validate(p)
    if p.grid.levels < 2:
        issues.append("hybrid instantiation needs at least two timescales")
    if issues:
        raise BuildValidationError(issues)

    if p.templates[2].nx and grids[2].lookup(p.x0[1]) is None:
        raise DpError("the second level's initial state must lie on its "
                      "grid for hybrid instantiation")
    tables = build_tables(p, grids, inner_cost=inner_cost)
    fb = FormBuilder()
    slow = _emit_slow_layer(p, fb)
    scen, part = slow["scen"], slow["part"]
    zv, yv, nz = slow["zv"], slow["yv"], slow["nz"]
    ticks1 = p.grid.ticks(1)
    child_grid: StateGrid = grids[2]
    tpl1 = p.templates[1]

    # per-tick aggregate candidates shared with the tables
    agg_sets = {t: tables[t].aggs for t in ticks1}

    # selection binaries: alpha picks z on the child grid, beta picks the
    # tabulated aggregate value
    alpha: dict = {}
    beta: dict = {}
    combos = 0
    for t in ticks1:
        for si in range(len(scen)):
            if nz:
                ids = fb.add_vars(len(child_grid), 0.0, 1.0, integral=True,
                                  role="selz", level=1, tick=t,
                                  ctx=f"s{si}")
                alpha[(t, si)] = ids
                fb.add_row([(j, 1.0) for j in ids], "=", 1.0)
                for comp in range(nz):
                    coeffs = [(zv[(t, si)][comp], 1.0)]
                    coeffs += [(ids[i], -child_grid.values[i][comp])
                               for i in range(len(child_grid))]
                    fb.add_row(coeffs, "=", 0.0)
            if tpl1.ny:
                aggs = agg_sets[t]
                ids = fb.add_vars(len(aggs), 0.0, 1.0, integral=True,
                                  role="sely", level=1, tick=t,
                                  ctx=f"s{si}")
                beta[(t, si)] = ids
                fb.add_row([(j, 1.0) for j in ids], "=", 1.0)
                for comp in range(tpl1.ny):
                    coeffs = [(yv[(t, si)][comp], 1.0)]
                    coeffs += [(ids[a], -aggs[a][comp])
                               for a in range(len(aggs))]
                    fb.add_row(coeffs, "=", 0.0)

    # per (tick, scenario) segment-value selection over grid combinations
    for t in ticks1:
        t_next = p.grid.next_tick(t)
        table = tables[t]
        n_goal = 1 if t_next is None or not nz else len(child_grid)
        n_start = len(child_grid) if nz else 1
        n_agg = len(table.aggs)
        for si, s in enumerate(scen):
            label = s.label[t]
            sel_ids = []
            sel_rows = []
            for i in range(n_start):
                for gidx in range(n_goal):
                    for a in range(n_agg):
                        combos += 1
                        if combos > combo_budget:
                            raise BudgetCombos(combos, combo_budget)
                        start = child_grid.values[i] if nz else np.zeros(0)
                        goal = child_grid.values[gidx] if n_goal > 1 \
                            else np.zeros(0)
                        v = value_V(table, start, goal, table.aggs[a],
                                    label)
                        pickers = []
                        if nz:
                            pickers.append(alpha[(t, si)][i])
                        if n_goal > 1:
                            pickers.append(alpha[(t_next, si)][gidx])
                        if (t, si) in beta:
                            pickers.append(beta[(t, si)][a])
                        if not np.isfinite(v):
                            if pickers:
                                fb.add_row([(j, 1.0) for j in pickers], "<",
                                           len(pickers) - 1)
                            else:
                                raise DpError(
                                    f"segment at {t} has no feasible grid "
                                    f"combination")
                            continue
                        g = fb.add_var(0.0, 1.0, obj=s.prob * v,
                                       info=VarInfo("selq", 1, t,
                                                    f"s{si}", combos))
                        sel_ids.append(g)
                        if pickers:
                            fb.add_row([(g, 1.0)]
                                       + [(j, -1.0) for j in pickers], ">",
                                       1 - len(pickers))
            if sel_ids:
                fb.add_row([(j, 1.0) for j in sel_ids], "=", 1.0)

    sf = fb.build()
    res = solve_milp(sf, gap_tol=gap_tol, node_limit=node_limit)
    sol = {}
    if res.x is not None:
        sol = sf.by_key(res.x)
    return HybridResult(objective=res.objective, status=res.status,
                        milp=res, tables=tables, sf=sf, slow_solution=sol)


class BudgetCombos(RuntimeError):
    def __init__(self, count, budget):
        super().__init__(f"hybrid selection combinations {count} exceed "
                         f"budget {budget}")
        self.count = count
        self.budget = budget
