"""MILP instantiation of a multi-timescale problem.

Two builders share one solver-neutral carrier:

* ``build_full_equivalent`` expands the joint outcome space and emits one
  variable block per (tick, scenario) with explicit non-anticipativity
  equality rows over the information classes (the relaxed scenario-tree
  view).  A ``compact=True`` variant indexes variable blocks by information
  class directly: two encodings of the same problem.
* ``build_synchronized`` emits the multi-horizon structure: slow-level
  variables per (tick, slow scenario) with non-anticipativity rows plus
  prescribed child states ``z``; each slow tick then owns a child segment
  block whose start state is pinned to ``z`` at the tick and whose
  post-dynamics end state is pinned (or L1-penalized) to ``z`` at the next
  tick.  Fast blocks are shared by all slow scenarios that agree on the
  information available at the segment's end, which is the edge-attachment
  of multi-horizon trees.  Levels three and deeper are nested recursively
  and must be dispatch-style (no state) because their prescribed-state
  chains are not defined by the synchronized construction.

Both builders run a structural planning pass first, so node budgets bounce
oversized instances before any matrix work, and ``count_nodes`` can report
exact variable/constraint/node counts without building coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import GoalBlock, MtsProblem, TerminalSpec, validate_problem
from .sform import FormBuilder, StandardForm, VarInfo
from .sform import read_interchange, write_interchange  # noqa: F401 (re-export)
from .stochastic import (BudgetError, ConditionalNoise, Deterministic,
                         MarkovLattice, Scenario, ScenarioTree,
                         StochasticSpec, enumerate_scenarios,
                         information_classes)

__all__ = [
    "BuildReport", "build_full_equivalent", "build_synchronized",
    "count_nodes", "StandardForm", "VarInfo", "write_interchange",
    "read_interchange", "full_trajectories", "sync_trajectories",
    "BudgetError",
]

DEFAULT_NODE_BUDGET = 200000


class BuildValidationError(ValueError):
    def __init__(self, violations):
        super().__init__("; ".join(violations))
        self.violations = violations


@dataclass
class BuildReport:
    mode: str
    variables: int
    constraints: int
    nodes_per_level: list
    nac_classes: int
    scenarios: int
    detail: dict = field(default=None, repr=False, compare=False)

    @property
    def total_nodes(self) -> int:
        return sum(self.nodes_per_level)


def _validated(p: MtsProblem) -> None:
    issues = validate_problem(p)
    if issues:
        raise BuildValidationError(issues)


# ---------------------------------------------------------------------------
# full equivalent


def _full_plan(p: MtsProblem, node_budget: int) -> dict:
    scen = enumerate_scenarios(p.grid, p.stochastics, budget=node_budget)
    part = information_classes(p.grid, p.stochastics, p.interpretation, scen)
    order = p.grid.linearize()
    # expanded-tree node counts: distinct outcome prefixes per tick
    nodes_per_level = [0] * p.grid.levels
    prefixes: list[set] = []
    running = [tuple() for _ in scen]
    for i, t in enumerate(order):
        running = [running[si] + (scen[si].outcome[t],)
                   for si in range(len(scen))]
        nodes_per_level[len(t) - 1] += len(set(running))
    total = sum(nodes_per_level)
    if total > node_budget:
        raise BudgetError("full-equivalent expansion", total, node_budget)
    return {"scenarios": scen, "partition": part, "order": order,
            "nodes_per_level": nodes_per_level}


def build_full_equivalent(p: MtsProblem, *, compact: bool = False,
                          node_budget: int = DEFAULT_NODE_BUDGET,
                          count_only: bool = False):
    """Expand all scenarios into one MILP; returns (StandardForm, report).

    With ``compact=True`` variables are indexed by information class instead
    of by scenario and the explicit NAC rows disappear; the two encodings
    have equal optima.
    """
    _validated(p)
    plan = _full_plan(p, node_budget)
    scen = plan["scenarios"]
    part = plan["partition"]
    grid, S = p.grid, p.stochastics
    fb = FormBuilder(count_only=count_only)

    level_ticks = {lv: grid.ticks(lv) for lv in range(1, grid.levels + 1)}

    def ckey(t, si):
        return part.class_of(t, si)

    # variable blocks ------------------------------------------------------
    xv: dict = {}
    uv: dict = {}
    yv: dict = {}

    def block_id(t, si):
        if not compact:
            return si
        return ckey(t, si)

    for t in plan["order"]:
        tpl = p.template_at(t)
        lv = len(t)
        first = level_ticks[lv][0] == t
        for si in range(len(scen)):
            bid = block_id(t, si)
            if (t, bid) in xv:
                continue
            ctx = f"s{si}" if not compact else f"c{bid}"
            if tpl.nx:
                if first:
                    x0 = p.x0[lv - 1]
                    ids = fb.add_vars(tpl.nx, x0, x0,
                                      integral=tpl.x_int, role="x",
                                      level=lv, tick=t, ctx=ctx)
                else:
                    ids = fb.add_vars(tpl.nx, tpl.x_lb, tpl.x_ub,
                                      integral=tpl.x_int, role="x",
                                      level=lv, tick=t, ctx=ctx)
                xv[(t, bid)] = ids
            else:
                xv[(t, bid)] = []
            uv[(t, bid)] = fb.add_vars(tpl.nu, tpl.u_lb, tpl.u_ub,
                                       integral=tpl.u_int, role="u",
                                       level=lv, tick=t, ctx=ctx) \
                if tpl.nu else []
            if tpl.ny:
                yv[(t, bid)] = fb.add_vars(tpl.ny, -np.inf, np.inf,
                                           role="y", level=lv, tick=t,
                                           ctx=ctx)

    # objective: probability-weighted stage costs, accumulated per variable
    acc: dict = {}
    for t in plan["order"]:
        tpl = p.template_at(t)
        for si, s in enumerate(scen):
            bid = block_id(t, si)
            for ids, cost in ((xv[(t, bid)], tpl.c), (uv[(t, bid)], tpl.d)):
                for j, cj in zip(ids, cost):
                    if cj:
                        acc[j] = acc.get(j, 0.0) + s.prob * cj
    for j, cj in acc.items():
        fb.add_obj(j, cj)

    # rows -----------------------------------------------------------------
    seen: set = set()

    def emit_once(key, fn):
        if compact:
            if key in seen:
                return
            seen.add(key)
        fn()

    # per-level final-goal end states
    endv: dict = {}
    for lv in range(1, grid.levels + 1):
        term = p.terminal[lv - 1]
        if term is None or term.final_goal is None:
            continue
        tpl = p.templates[lv]
        last = level_ticks[lv][-1]
        for si in range(len(scen)):
            bid = block_id(last, si)
            if (lv, bid) in endv:
                continue
            ctx = f"s{si}" if not compact else f"c{bid}"
            endv[(lv, bid)] = fb.add_vars(tpl.nx, tpl.x_lb, tpl.x_ub,
                                          integral=tpl.x_int, role="xend",
                                          level=lv, tick=last, ctx=ctx)

    for t in plan["order"]:
        tpl = p.template_at(t)
        lv = len(t)
        nw = p.outcome_dim(lv)
        nyp = p.parent_agg_dim(lv)
        t_next = grid.next_tick(t)
        ticks_lv = level_ticks[lv]
        t_idx = ticks_lv.index(t)
        for si, s in enumerate(scen):
            bid = block_id(t, si)
            w = np.asarray(s.outcome[t], dtype=float)
            ypar_ids = []
            if lv > 1:
                P = grid.parent_tick(t)
                ypar_ids = yv.get((P, block_id(P, si)), [])
            xi, ui = xv[(t, bid)], uv[(t, bid)]
            # feasibility
            if tpl.nrows_feas():
                E, F, J, M, g = tpl.feas(nyp, nw)
                key = ("feas", t, bid, tuple(ypar_ids), tuple(w))
                emit_once(key, lambda E=E, F=F, J=J, M=M, g=g, xi=xi, ui=ui,
                          yp=ypar_ids, w=w: fb.add_block_rows(
                              [(E, xi), (F, ui), (J, yp)], "<", g - M @ w))
            # history rows (lag window over this level's ticks)
            for hb in tpl.history:
                rhs = hb.rhs.astype(float).copy()
                mats = [(np.asarray(hb.F, dtype=float), ui)]
                ok = True
                for lag, W in sorted(hb.lags.items()):
                    W = np.asarray(W, dtype=float)
                    li = t_idx - lag
                    if li >= 0:
                        lag_t = ticks_lv[li]
                        mats.append((W, xv[(lag_t, block_id(lag_t, si))]))
                    else:
                        rhs = rhs - W @ p.x0[lv - 1]
                key = ("hist", t, bid, id(hb),
                       tuple(tuple(m[1]) for m in mats))
                emit_once(key, lambda mats=mats, rhs=rhs:
                          fb.add_block_rows(mats, "<", rhs))
            # aggregation
            if tpl.ny:
                C, K, Lm, kv = tpl.agg(nyp, nw)
                yi = yv[(t, bid)]
                key = ("agg", t, bid, tuple(ypar_ids), tuple(w))
                emit_once(key, lambda C=C, K=K, Lm=Lm, kv=kv, yi=yi, xi=xi,
                          yp=ypar_ids, w=w: fb.add_block_rows(
                              [(np.eye(len(yi)), yi), (-C, xi), (-Lm, yp)],
                              "=", K @ w + kv))
            # dynamics to the next tick on the same level
            target = None
            if t_next is not None:
                target = xv[(t_next, block_id(t_next, si))]
            elif (lv, bid) in endv:
                target = endv[(lv, bid)]
            if target is not None and tpl.nx:
                A, B, G, H, hv = tpl.dyn(nyp, nw)
                key = ("dyn", t, bid, tuple(target), tuple(ypar_ids),
                       tuple(w))
                emit_once(key, lambda A=A, B=B, G=G, H=H, hv=hv, tg=target,
                          xi=xi, ui=ui, yp=ypar_ids, w=w: fb.add_block_rows(
                              [(np.eye(len(tg)), tg), (-A, xi), (-B, ui),
                               (-G, yp)], "=", H @ w + hv))

    # final-goal pinning
    for (lv, bid), ids in endv.items():
        term = p.terminal[lv - 1]
        goal = term.final_goal
        members = [si for si in range(len(scen))
                   if block_id(level_ticks[lv][-1], si) == bid] if compact \
            else [bid]
        wsum = sum(scen[si].prob for si in members)
        if term.mode == "hard":
            fb.add_block_rows([(np.eye(len(ids)), ids)], "=", goal)
        else:
            ctx = f"end{lv}c{bid}" if compact else f"end{lv}s{bid}"
            dp = fb.add_vars(len(ids), 0.0, np.inf, role="dev+", level=lv,
                             tick=level_ticks[lv][-1], ctx=ctx,
                             obj=term.rho * wsum)
            dm = fb.add_vars(len(ids), 0.0, np.inf, role="dev-", level=lv,
                             tick=level_ticks[lv][-1], ctx=ctx,
                             obj=term.rho * wsum)
            fb.add_block_rows([(np.eye(len(ids)), ids),
                               (-np.eye(len(ids)), dp),
                               (np.eye(len(ids)), dm)], "=", goal)

    # NAC equality rows (relaxed view only)
    if not compact:
        for t in plan["order"]:
            for members in part.classes[t]:
                rep = members[0]
                for si in members[1:]:
                    for a, b in ((xv[(t, si)], xv[(t, rep)]),
                                 (uv[(t, si)], uv[(t, rep)])):
                        for ja, jb in zip(a, b):
                            fb.add_row([(ja, 1.0), (jb, -1.0)], "=", 0.0)

    report = BuildReport(
        mode="full-compact" if compact else "full",
        variables=fb.ncols, constraints=fb.nrows,
        nodes_per_level=plan["nodes_per_level"],
        nac_classes=part.class_count(), scenarios=len(scen),
        detail={"plan": plan, "xv": xv, "uv": uv, "yv": yv, "endv": endv,
                "compact": compact})
    if count_only:
        return None, report
    return fb.build(), report


# ---------------------------------------------------------------------------
# synchronized multi-horizon build


class _SegmentChance:
    """Uniform within-segment view of a level's process.

    Positions are 0..m-1; ``options(pos)`` lists (node_id, outcome, label)
    and ``prob(pos, prev_id, node_id)`` gives the transition probability
    into position ``pos``.  Lattices restart at their fixed initial node,
    noise redraws independently per position from the distribution selected
    by the governing parent label, and deterministic levels carry a single
    node (id None, matching scenario enumeration).
    """

    def __init__(self, p: MtsProblem, level: int, label: str):
        self.proc = p.stochastics.process(level)
        self.label = label

    def options(self, pos: int) -> list:
        proc = self.proc
        if isinstance(proc, Deterministic):
            return [(None, proc.outcome, proc.label)]
        if isinstance(proc, MarkovLattice):
            if pos == 0:
                n = proc.nodes_at(0)[proc.initial]
                return [(proc.initial, n.outcome, n.label)]
            nodes = proc.nodes_at(pos)
            return [(j, nodes[j].outcome, nodes[j].label)
                    for j in range(len(nodes))]
        if isinstance(proc, ConditionalNoise):
            dist = proc.distribution(self.label)
            return [(j, dist[j][0], "") for j in range(len(dist))]
        raise BuildValidationError(
            [f"process {type(proc).__name__} not usable inside a segment"])

    def prob(self, pos: int, prev, node) -> float:
        proc = self.proc
        if isinstance(proc, Deterministic):
            return 1.0
        if isinstance(proc, MarkovLattice):
            if pos == 0:
                return 1.0 if node == proc.initial else 0.0
            return float(proc.transition(self.label, pos - 1)[prev, node])
        if isinstance(proc, ConditionalNoise):
            return float(proc.distribution(self.label)[node][1])
        return 0.0


def _segment_contexts(chance: _SegmentChance, m: int) -> list:
    """Per position k=0..m, reachable histories h (nodes before k) -> prob."""
    ctxs = [{(): 1.0}]
    for k in range(m):
        nxt = {}
        for h, ph in ctxs[k].items():
            prev = h[-1] if h else None
            for j, _, _ in chance.options(k):
                pj = chance.prob(k, prev, j)
                if pj > 0.0:
                    nxt[h + (j,)] = ph * pj
        ctxs.append(nxt)
    return ctxs


def _hstr(h: tuple) -> str:
    return "".join("x" if j is None else str(j) for j in h) or "r"


def _pure_state_rows(tpl, nyp: int, nw: int):
    """Feasibility rows that involve only the state (F, J, M all zero)."""
    if not tpl.nrows_feas():
        return None, None
    E, F, J, M, g = tpl.feas(nyp, nw)
    keep = [i for i in range(len(g))
            if not F[i].any() and not J[i].any() and not M[i].any()
            and E[i].any()]
    if not keep:
        return None, None
    return E[keep], g[keep]


def _emit_segment_block(p: MtsProblem, fb: FormBuilder, level: int,
                        parent_tick: tuple, ctx: dict, counts: list,
                        node_budget: int) -> dict:
    """Emit one within-segment block; recurses into child segments.

    ``ctx`` carries: weight (probability mass), label (process family key),
    y_parent (parent aggregate var ids), start (None | ("vars", ids) |
    ("fixed", vec)), end (same forms or None for a free end), terminal
    (TerminalSpec for the end pin), path (name prefix).
    """
    grid, S = p.grid, p.stochastics
    seg = grid.segment(parent_tick)
    m = len(seg)
    tpl0 = p.templates[level]
    nx = tpl0.nx
    nw = p.outcome_dim(level)
    nyp = p.parent_agg_dim(level)
    hz = S.hazard[level - 1]
    w_blk = ctx["weight"]
    chance = _SegmentChance(p, level, ctx["label"])
    ctxs = _segment_contexts(chance, m)
    # the terminal layer holds variables only for stateful levels
    counts[level - 1] += sum(len(ctxs[k]) for k in range(m))
    if nx:
        counts[level - 1] += len(ctxs[m])
    if sum(counts) > node_budget:
        raise BudgetError("synchronized expansion", sum(counts), node_budget)

    tpls = [p.template_at(t) for t in seg]
    path = ctx["path"]
    xv: dict = {}
    uv: dict = {}
    yv: dict = {}
    children: dict = {}

    # states
    if nx:
        if ctx["start"] is None:
            raise BuildValidationError(
                [f"stateful level {level} segment at {parent_tick} has no "
                 f"start state"])
        kind, val = ctx["start"]
        if kind == "vars":
            xv[(0, ())] = list(val)
        else:
            xv[(0, ())] = fb.add_vars(nx, val, val, integral=tpl0.x_int,
                                      role="x", level=level, tick=seg[0],
                                      ctx=f"{path}/k0h{_hstr(())}")
        for k in range(1, m + 1):
            tpl = tpls[min(k, m - 1)]
            tick = seg[k] if k < m else seg[m - 1]
            role = "x" if k < m else "xend"
            for h in ctxs[k]:
                xv[(k, h)] = fb.add_vars(
                    nx, tpl.x_lb, tpl.x_ub, integral=tpl.x_int, role=role,
                    level=level, tick=tick, ctx=f"{path}/k{k}h{_hstr(h)}")

    # controls and aggregates
    for k in range(m):
        tpl = tpls[k]
        for h, ph in ctxs[k].items():
            prev = h[-1] if h else None
            for j, out, lab in chance.options(k):
                pj = chance.prob(k, prev, j)
                if pj <= 0.0:
                    continue
                hj = h + (j,)
                uctx = hj if hz else h
                if tpl.nu and (k, uctx) not in uv:
                    pu = ctxs[k + 1][hj] if hz else ph
                    uv[(k, uctx)] = fb.add_vars(
                        tpl.nu, tpl.u_lb, tpl.u_ub, integral=tpl.u_int,
                        role="u", level=level, tick=seg[k],
                        ctx=f"{path}/k{k}h{_hstr(uctx)}",
                        obj=tpl.d * (w_blk * pu))
                if tpl.ny and (k, hj) not in yv:
                    yv[(k, hj)] = fb.add_vars(
                        tpl.ny, -np.inf, np.inf, role="y", level=level,
                        tick=seg[k], ctx=f"{path}/k{k}h{_hstr(hj)}")

    # stage costs on states (positions 0..m-1; the terminal layer is the
    # next segment's first position and is costed there)
    if nx:
        for k in range(m):
            for h, ph in ctxs[k].items():
                for jx, cj in zip(xv[(k, h)], tpls[k].c):
                    if cj:
                        fb.add_obj(jx, w_blk * ph * cj)

    # rows per (position, history, node)
    for k in range(m):
        tpl = tpls[k]
        A, B, G, H, hvec = tpl.dyn(nyp, nw)
        have_feas = tpl.nrows_feas() > 0
        if have_feas:
            E, F, J, M, g = tpl.feas(nyp, nw)
        C, K, Lm, kv = tpl.agg(nyp, nw) if tpl.ny else (None,) * 4
        for h, ph in ctxs[k].items():
            prev = h[-1] if h else None
            xi = xv.get((k, h), [])
            for j, out, lab in chance.options(k):
                pj = chance.prob(k, prev, j)
                if pj <= 0.0:
                    continue
                hj = h + (j,)
                uctx = hj if hz else h
                ui = uv.get((k, uctx), [])
                wv = np.asarray(out, dtype=float)
                if have_feas:
                    fb.add_block_rows([(E, xi), (F, ui),
                                       (J, ctx["y_parent"])], "<",
                                      g - M @ wv)
                if tpl.ny:
                    yi = yv[(k, hj)]
                    fb.add_block_rows([(np.eye(tpl.ny), yi), (-C, xi),
                                       (-Lm, ctx["y_parent"])], "=",
                                      K @ wv + kv)
                if nx:
                    fb.add_block_rows([(np.eye(nx), xv[(k + 1, hj)]),
                                       (-A, xi), (-B, ui),
                                       (-G, ctx["y_parent"])], "=",
                                      H @ wv + hvec)
                if level < grid.levels:
                    child_ctx = {
                        "weight": w_blk * ctxs[k + 1][hj],
                        "label": lab,
                        "y_parent": yv.get((k, hj), []),
                        "start": None, "end": None,
                        "terminal": p.terminal_at(level + 1),
                        "path": f"{path}/k{k}h{_hstr(hj)}",
                    }
                    children[(k, hj)] = _emit_segment_block(
                        p, fb, level + 1, seg[k], child_ctx, counts,
                        node_budget)

    # terminal layer: pure-state feasibility plus the end pin
    dev: dict = {}
    if nx:
        Eps, gps = _pure_state_rows(tpls[m - 1], nyp, nw)
        for h, ph in ctxs[m].items():
            xi = xv[(m, h)]
            if Eps is not None:
                fb.add_block_rows([(Eps, xi)], "<", gps)
            if ctx["end"] is None:
                continue
            kind, val = ctx["end"]
            term: TerminalSpec = ctx["terminal"]
            if term.mode == "hard":
                if kind == "vars":
                    fb.add_block_rows([(np.eye(nx), xi),
                                       (-np.eye(nx), list(val))], "=",
                                      np.zeros(nx))
                else:
                    fb.add_block_rows([(np.eye(nx), xi)], "=", val)
            else:
                cost = term.rho * w_blk * ph
                dp = fb.add_vars(nx, 0.0, np.inf, role="dev+", level=level,
                                 tick=seg[m - 1],
                                 ctx=f"{path}/k{m}h{_hstr(h)}", obj=cost)
                dm = fb.add_vars(nx, 0.0, np.inf, role="dev-", level=level,
                                 tick=seg[m - 1],
                                 ctx=f"{path}/k{m}h{_hstr(h)}", obj=cost)
                mats = [(np.eye(nx), xi), (-np.eye(nx), dp),
                        (np.eye(nx), dm)]
                if kind == "vars":
                    mats.append((-np.eye(nx), list(val)))
                    fb.add_block_rows(mats, "=", np.zeros(nx))
                else:
                    fb.add_block_rows(mats, "=", val)
                dev[h] = (dp, dm)

    return {"seg": seg, "m": m, "ctxs": ctxs, "xv": xv, "uv": uv, "yv": yv,
            "children": children, "dev": dev, "hazard": hz}


def _slow_scenarios(p: MtsProblem):
    """Level-1-only scenarios and information classes."""
    reduced = StochasticSpec(
        [p.stochastics.process(1)]
        + [Deterministic() for _ in range(p.grid.levels - 1)],
        hazard=list(p.stochastics.hazard),
        stage_boundaries=list(p.stochastics.stage_boundaries))
    scen = enumerate_scenarios(p.grid, reduced)
    part = information_classes(p.grid, reduced, p.interpretation, scen)
    return scen, part


def _sync_validate(p: MtsProblem) -> list:
    out = []
    for lv in range(2, p.grid.levels + 1):
        if p.templates[lv].history:
            out.append(f"level {lv}: history rows are not representable in "
                       f"synchronized mode (segments are decoupled)")
        if lv >= 3 and p.templates[lv].nx:
            out.append(f"level {lv}: synchronized builds require levels "
                       f"three and deeper to be dispatch-style (no state)")
    return out


def _emit_slow_layer(p: MtsProblem, fb: FormBuilder) -> dict:
    """Slow-level scenario variables, rows and NAC; shared by the
    synchronized MILP and the hybrid value-function route."""
    grid = p.grid
    scen, part = _slow_scenarios(p)
    ticks1 = grid.ticks(1)
    tpl1 = p.templates[1]
    child = p.templates[2]
    goal = tpl1.goal
    if goal is None and child.nx:
        goal = GoalBlock(dim=child.nx, lb=child.x_lb, ub=child.x_ub,
                         integral=child.x_int)
    nz = goal.dim if goal is not None and child.nx else 0
    nw1 = p.outcome_dim(1)

    xv: dict = {}
    uv: dict = {}
    yv: dict = {}
    zv: dict = {}
    for t in ticks1:
        tpl = p.template_at(t)
        first = t == ticks1[0]
        for si in range(len(scen)):
            ctxs = f"s{si}"
            if tpl.nx:
                lb, ub = (p.x0[0], p.x0[0]) if first \
                    else (tpl.x_lb, tpl.x_ub)
                xv[(t, si)] = fb.add_vars(tpl.nx, lb, ub,
                                          integral=tpl.x_int, role="x",
                                          level=1, tick=t, ctx=ctxs)
            else:
                xv[(t, si)] = []
            uv[(t, si)] = fb.add_vars(tpl.nu, tpl.u_lb, tpl.u_ub,
                                      integral=tpl.u_int, role="u", level=1,
                                      tick=t, ctx=ctxs) if tpl.nu else []
            if tpl.ny:
                yv[(t, si)] = fb.add_vars(tpl.ny, -np.inf, np.inf, role="y",
                                          level=1, tick=t, ctx=ctxs)
            if nz:
                if first:
                    zv[(t, si)] = fb.add_vars(nz, p.x0[1], p.x0[1],
                                              integral=goal.integral,
                                              role="z", level=1, tick=t,
                                              ctx=ctxs)
                else:
                    zv[(t, si)] = fb.add_vars(nz, goal.lb, goal.ub,
                                              integral=goal.integral,
                                              role="z", level=1, tick=t,
                                              ctx=ctxs)
                if goal.rows is not None:
                    fb.add_block_rows([(goal.rows, zv[(t, si)])], "<",
                                      goal.rhs)

    # slow objective, dynamics, feasibility, history, aggregation
    for ti, t in enumerate(ticks1):
        tpl = p.template_at(t)
        t_next = grid.next_tick(t)
        for si, s in enumerate(scen):
            w = np.asarray(s.outcome[t], dtype=float)
            for ids, cost in ((xv[(t, si)], tpl.c), (uv[(t, si)], tpl.d)):
                for jx, cj in zip(ids, cost):
                    if cj:
                        fb.add_obj(jx, s.prob * cj)
            if tpl.nrows_feas():
                E, F, J, M, g = tpl.feas(0, nw1)
                fb.add_block_rows([(E, xv[(t, si)]), (F, uv[(t, si)])], "<",
                                  g - M @ w)
            for hb in tpl.history:
                rhs = hb.rhs.astype(float).copy()
                mats = [(np.asarray(hb.F, dtype=float), uv[(t, si)])]
                for lag, W in sorted(hb.lags.items()):
                    W = np.asarray(W, dtype=float)
                    li = ti - lag
                    if li >= 0:
                        mats.append((W, xv[(ticks1[li], si)]))
                    else:
                        rhs = rhs - W @ p.x0[0]
                fb.add_block_rows(mats, "<", rhs)
            if tpl.ny:
                C, K, Lm, kv = tpl.agg(0, nw1)
                fb.add_block_rows([(np.eye(tpl.ny), yv[(t, si)]),
                                   (-C, xv[(t, si)])], "=", K @ w + kv)
            if t_next is not None and tpl.nx:
                A, B, G, H, hvec = tpl.dyn(0, nw1)
                fb.add_block_rows([(np.eye(tpl.nx), xv[(t_next, si)]),
                                   (-A, xv[(t, si)]), (-B, uv[(t, si)])],
                                  "=", H @ w + hvec)

    # slow NAC rows on x, u and z
    for t in ticks1:
        for members in part.classes[t]:
            rep = members[0]
            for si in members[1:]:
                for a, b in ((xv[(t, si)], xv[(t, rep)]),
                             (uv[(t, si)], uv[(t, rep)]),
                             (zv.get((t, si), []), zv.get((t, rep), []))):
                    for ja, jb in zip(a, b):
                        fb.add_row([(ja, 1.0), (jb, -1.0)], "=", 0.0)

    # optional horizon-end goal on the slow level
    term1 = p.terminal[0]
    if term1 is not None and term1.final_goal is not None and tpl1.nx:
        last = ticks1[-1]
        tpl_last = p.template_at(last)
        A, B, G, H, hvec = tpl_last.dyn(0, nw1)
        for si, s in enumerate(scen):
            w = np.asarray(s.outcome[last], dtype=float)
            ids = fb.add_vars(tpl1.nx, tpl1.x_lb, tpl1.x_ub,
                              integral=tpl1.x_int, role="xend", level=1,
                              tick=last, ctx=f"s{si}")
            fb.add_block_rows([(np.eye(tpl1.nx), ids),
                               (-A, xv[(last, si)]), (-B, uv[(last, si)])],
                              "=", H @ w + hvec)
            if term1.mode == "hard":
                fb.add_block_rows([(np.eye(tpl1.nx), ids)], "=",
                                  term1.final_goal)
            else:
                dp = fb.add_vars(tpl1.nx, 0.0, np.inf, role="dev+", level=1,
                                 tick=last, ctx=f"s{si}",
                                 obj=term1.rho * s.prob)
                dm = fb.add_vars(tpl1.nx, 0.0, np.inf, role="dev-", level=1,
                                 tick=last, ctx=f"s{si}",
                                 obj=term1.rho * s.prob)
                fb.add_block_rows([(np.eye(tpl1.nx), ids),
                                   (-np.eye(tpl1.nx), dp),
                                   (np.eye(tpl1.nx), dm)], "=",
                                  term1.final_goal)
    return {"scen": scen, "part": part, "xv": xv, "uv": uv, "yv": yv,
            "zv": zv, "nz": nz, "goal": goal}


def slow_block_groups(p: MtsProblem, scen: list, part) -> dict:
    """Group slow scenarios into fast-block attachment keys per tick.

    The key is (information-class key at the segment's end tick, the
    governing outcome and label at the tick itself); all members share the
    prescribed states and the fast process family of the block.
    """
    out = {}
    for t in p.grid.ticks(1):
        t_next = p.grid.next_tick(t)
        t_end = t_next if t_next is not None else t
        groups: dict = {}
        for si, s in enumerate(scen):
            key = (part.keys[t_end][si], tuple(s.outcome[t]), s.label[t])
            groups.setdefault(key, []).append(si)
        out[t] = groups
    return out


def build_synchronized(p: MtsProblem, *,
                       node_budget: int = DEFAULT_NODE_BUDGET,
                       count_only: bool = False):
    """Multi-horizon MILP with prescribed-state coupling; (form, report).

    The slow level keeps one variable block per (tick, slow scenario) with
    explicit NAC rows on states, controls and prescribed states ``z``.
    Child segments attach per information class at the segment's end tick
    (plus the governing outcome/label), start pinned to ``z`` at the tick
    and end pinned or L1-penalized to ``z`` at the next tick; the final
    segment's end is free.  May be infeasible for reachability reasons;
    that is the solver's verdict, not a build error.
    """
    _validated(p)
    issues = _sync_validate(p)
    if issues:
        raise BuildValidationError(issues)
    if p.grid.levels == 1:
        sf, rep = build_full_equivalent(p, node_budget=node_budget,
                                        count_only=count_only)
        rep.mode = "sync"
        return sf, rep

    grid = p.grid
    fb = FormBuilder(count_only=count_only)
    slow = _emit_slow_layer(p, fb)
    scen, part = slow["scen"], slow["part"]
    xv, uv, yv, zv, nz = (slow["xv"], slow["uv"], slow["yv"], slow["zv"],
                          slow["nz"])
    ticks1 = grid.ticks(1)
    counts = [0] * grid.levels
    counts[0] = sum(len(part.classes[t]) for t in ticks1)

    # child segment blocks per (slow tick, end-information class)
    blocks: dict = {}
    term2 = p.terminal_at(2)
    fg2 = None
    if p.terminal[1] is not None and p.terminal[1].final_goal is not None:
        fg2 = p.terminal[1].final_goal
    all_groups = slow_block_groups(p, scen, part)
    for t in ticks1:
        t_next = grid.next_tick(t)
        groups = all_groups[t]
        for bi, (key, members) in enumerate(sorted(groups.items(),
                                                   key=lambda kv: kv[0])):
            rep = members[0]
            wsum = sum(scen[si].prob for si in members)
            end = None
            if nz:
                if t_next is not None:
                    end = ("vars", zv[(t_next, rep)])
                elif fg2 is not None:
                    end = ("fixed", np.asarray(fg2, dtype=float))
            ctx = {
                "weight": wsum,
                "label": scen[rep].label[t],
                "y_parent": yv.get((t, rep), []),
                "start": ("vars", zv[(t, rep)]) if nz else None,
                "end": end,
                "terminal": term2,
                "path": f"t{ticks1.index(t)}b{bi}",
            }
            blocks[(t, key)] = (members, _emit_segment_block(
                p, fb, 2, t, ctx, counts, node_budget))

    report = BuildReport(
        mode="sync", variables=fb.ncols, constraints=fb.nrows,
        nodes_per_level=counts, nac_classes=part.class_count(),
        scenarios=len(scen),
        detail={"slow_scenarios": scen, "partition": part, "xv": xv,
                "uv": uv, "yv": yv, "zv": zv, "blocks": blocks})
    if count_only:
        return None, report
    return fb.build(), report


def count_nodes(p: MtsProblem, mode: str = "full",
                node_budget: int = DEFAULT_NODE_BUDGET) -> BuildReport:
    """Exact build accounting without materializing matrix coefficients."""
    if mode == "full":
        _, rep = build_full_equivalent(p, node_budget=node_budget,
                                       count_only=True)
    elif mode == "sync":
        _, rep = build_synchronized(p, node_budget=node_budget,
                                    count_only=True)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return rep


# ---------------------------------------------------------------------------
# mapping solutions back to per-scenario trajectories


def _vals(x: np.ndarray, ids) -> np.ndarray:
    return np.array([x[j] for j in ids], dtype=float)


def full_trajectories(p: MtsProblem, report: BuildReport,
                      x: np.ndarray) -> dict:
    """Per (scenario index, tick) states/controls from a full-mode solve."""
    d = report.detail
    scen = d["plan"]["partition"].scenarios
    part = d["plan"]["partition"]
    compact = d["compact"]
    out = {"scenarios": scen, "mode": "full", "x": {}, "u": {}, "y": {},
           "z": {}, "xend": {}}
    for t in p.grid.linearize():
        for si in range(len(scen)):
            bid = part.class_of(t, si) if compact else si
            out["x"][(si, t)] = _vals(x, d["xv"][(t, bid)])
            out["u"][(si, t)] = _vals(x, d["uv"][(t, bid)])
            if (t, bid) in d["yv"]:
                out["y"][(si, t)] = _vals(x, d["yv"][(t, bid)])
    for lv in range(1, p.grid.levels + 1):
        last = p.grid.ticks(lv)[-1]
        for si in range(len(scen)):
            bid = part.class_of(last, si) if compact else si
            if (lv, bid) in d["endv"]:
                out["xend"][(si, lv, None)] = _vals(x, d["endv"][(lv, bid)])
    return out


def _match_slow(p: MtsProblem, slow_scen, joint: Scenario) -> int:
    ticks1 = p.grid.ticks(1)
    key = tuple((joint.outcome[t], joint.label[t]) for t in ticks1)
    for si, s in enumerate(slow_scen):
        if tuple((s.outcome[t], s.label[t]) for t in ticks1) == key:
            return si
    raise KeyError("joint scenario does not match any slow scenario")


def _walk_block(p: MtsProblem, level: int, block: dict, joint: Scenario,
                x: np.ndarray, si_out: int, out: dict,
                parent_tick: tuple) -> None:
    seg, m, hz = block["seg"], block["m"], block["hazard"]
    h = ()
    for k in range(m):
        t = seg[k]
        j = joint.node[t]
        hj = h + (j,)
        uctx = hj if hz else h
        if (k, h) in block["xv"]:
            out["x"][(si_out, t)] = _vals(x, block["xv"][(k, h)])
        else:
            out["x"][(si_out, t)] = np.zeros(0)
        if (k, uctx) in block["uv"]:
            out["u"][(si_out, t)] = _vals(x, block["uv"][(k, uctx)])
        else:
            out["u"][(si_out, t)] = np.zeros(0)
        if (k, hj) in block["yv"]:
            out["y"][(si_out, t)] = _vals(x, block["yv"][(k, hj)])
        if (k, hj) in block["children"]:
            _walk_block(p, level + 1, block["children"][(k, hj)], joint, x,
                        si_out, out, t)
        h = hj
    if (m, h) in block["xv"]:
        out["xend"][(si_out, level, parent_tick)] = _vals(
            x, block["xv"][(m, h)])


def sync_trajectories(p: MtsProblem, report: BuildReport, x: np.ndarray,
                      joint_scenarios: list | None = None) -> dict:
    """Per (joint scenario, tick) trajectories from a synchronized solve.

    Joint scenarios are enumerated from the problem's stochastics; each one
    is routed through its slow scenario, edge block and within-segment
    history to collect the variable values it actually experiences.
    """
    if p.grid.levels == 1:
        return full_trajectories(p, report, x)
    d = report.detail
    slow = d["slow_scenarios"]
    part = d["partition"]
    if joint_scenarios is None:
        joint_scenarios = enumerate_scenarios(p.grid, p.stochastics)
    ticks1 = p.grid.ticks(1)
    out = {"scenarios": joint_scenarios, "mode": "sync", "x": {}, "u": {},
           "y": {}, "z": {}, "xend": {}}
    for si, joint in enumerate(joint_scenarios):
        s1 = _match_slow(p, slow, joint)
        for t in ticks1:
            out["x"][(si, t)] = _vals(x, d["xv"][(t, s1)])
            out["u"][(si, t)] = _vals(x, d["uv"][(t, s1)])
            if (t, s1) in d["yv"]:
                out["y"][(si, t)] = _vals(x, d["yv"][(t, s1)])
            if (t, s1) in d["zv"]:
                out["z"][(si, t)] = _vals(x, d["zv"][(t, s1)])
            t_next = p.grid.next_tick(t)
            t_end = t_next if t_next is not None else t
            key = (part.keys[t_end][s1], tuple(joint.outcome[t]),
                   joint.label[t])
            members, block = d["blocks"][(t, key)]
            _walk_block(p, 2, block, joint, x, si, out, t)
    return out


def solution_rows(sf: StandardForm, x: np.ndarray) -> list:
    """Flat (role, level, tick, ctx, comp, value) records for reporting."""
    rows = []
    for j, info in enumerate(sf.var_info):
        if info is None:
            continue
        rows.append({"role": info.role, "level": info.level,
                     "tick": info.tick, "ctx": info.ctx, "comp": info.comp,
                     "value": float(x[j])})
    return rows
