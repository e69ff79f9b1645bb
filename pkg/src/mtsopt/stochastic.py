"""Per-timescale uncertainty descriptions and information structure.

Each timescale carries one finite process:

* ``ScenarioTree`` -- stagewise branching, meant for the slowest level;
  nodes carry an outcome vector and a label that parameterizes finer
  processes.
* ``MarkovLattice`` -- within-segment Markov chain that restarts from a
  fixed initial node at the start of every segment; one transition family
  per governing parent label.
* ``ConditionalNoise`` -- i.i.d. draws per tick, with the distribution
  selected by the governing parent label.
* ``Deterministic`` -- a single constant outcome per tick.

All distributions are explicit and finite so instances can be expanded and
cross-checked exactly.  ``enumerate_scenarios`` produces the full joint
outcome assignments; ``information_classes`` partitions (tick, scenario)
decision points into groups that must receive identical decisions.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .timegrid import TimeGrid

PROB_TOL = 1e-12


class StochasticError(ValueError):
    pass


class BudgetError(RuntimeError):
    """An expansion exceeded its configured size budget."""

    def __init__(self, what: str, count: int, budget: int):
        super().__init__(f"{what}: {count} exceeds budget {budget}")
        self.count = count
        self.budget = budget


# ---------------------------------------------------------------------------
# process descriptions


@dataclass(frozen=True)
class TreeNode:
    """One scenario-tree node.

    ``parent`` is an index into the owning tree's node list, or None for a
    stage-0 node.  ``prob`` is the branch probability conditional on the
    parent.  ``tick`` is the level-1 tick the node sits at.
    """
    parent: int | None
    prob: float
    outcome: tuple
    tick: tuple
    label: str = ""


class ScenarioTree:
    def __init__(self, nodes: list[TreeNode]):
        if not nodes:
            raise StochasticError("scenario tree has no nodes")
        self.nodes = list(nodes)
        self.children: dict[int | None, list[int]] = {}
        for i, n in enumerate(self.nodes):
            self.children.setdefault(n.parent, []).append(i)
        self.stage: dict[tuple, list[int]] = {}
        for i, n in enumerate(self.nodes):
            self.stage.setdefault(n.tick, []).append(i)

    def roots(self) -> list[int]:
        return self.children.get(None, [])

    def leaves(self) -> list[int]:
        return [i for i in range(len(self.nodes)) if i not in self.children]

    def path_to(self, i: int) -> list[int]:
        out = []
        cur: int | None = i
        while cur is not None:
            out.append(cur)
            cur = self.nodes[cur].parent
        out.reverse()
        return out

    def path_prob(self, i: int) -> float:
        p = 1.0
        for j in self.path_to(i):
            p *= self.nodes[j].prob
        return p

    def edges(self) -> list[tuple[int, int]]:
        return [(n.parent, i) for i, n in enumerate(self.nodes)
                if n.parent is not None]

    def node_count(self) -> int:
        return len(self.nodes)

    def validate(self, loc: str = "tree") -> list[str]:
        out = []
        root_p = sum(self.nodes[i].prob for i in self.roots())
        if not self.roots():
            out.append(f"{loc}: no root nodes")
        elif abs(root_p - 1.0) > PROB_TOL:
            out.append(f"{loc}: root probabilities sum to {root_p!r}, not 1")
        for i in range(len(self.nodes)):
            kids = self.children.get(i)
            if kids:
                s = sum(self.nodes[k].prob for k in kids)
                if abs(s - 1.0) > PROB_TOL:
                    out.append(
                        f"{loc}: children of node {i} have probability "
                        f"sum {s!r}, not 1")
            if self.nodes[i].prob < -PROB_TOL:
                out.append(f"{loc}: node {i} has negative probability")
            par = self.nodes[i].parent
            if par is not None:
                pt, ct = self.nodes[par].tick, self.nodes[i].tick
                if len(pt) != 1 or len(ct) != 1 or ct[0] != pt[0] + 1:
                    out.append(
                        f"{loc}: node {i} at tick {ct} under parent at {pt}")
        dims = {len(n.outcome) for n in self.nodes}
        if len(dims) > 1:
            out.append(f"{loc}: mixed outcome dimensions {sorted(dims)}")
        return out

    def outcome_dim(self) -> int:
        return len(self.nodes[0].outcome)


def scenario_paths(tree: ScenarioTree) -> list[tuple[list[tuple], float]]:
    """One (root-to-leaf outcome sequence, path probability) per leaf."""
    leaves = tree.leaves()
    if not leaves:
        raise StochasticError("scenario tree has no leaves")
    out = []
    for lf in leaves:
        path = tree.path_to(lf)
        out.append(([tree.nodes[j].outcome for j in path], tree.path_prob(lf)))
    return out


@dataclass(frozen=True)
class LatticeNode:
    outcome: tuple
    label: str = ""


class MarkovLattice:
    """Within-segment Markov chain with per-parent-label transition families.

    ``nodes`` is either one node list reused at every segment position or an
    explicit list of per-position node lists.  ``families`` maps a parent
    label to either a single row-stochastic matrix (reused between all
    consecutive positions) or a list of matrices, one per transition.
    ``initial`` indexes the fixed position-0 node; segments always restart
    there.
    """

    def __init__(self, nodes, families: dict[str, object], initial: int = 0):
        if nodes and isinstance(nodes[0], LatticeNode):
            self._uniform_nodes = list(nodes)
            self._per_pos = None
        else:
            self._uniform_nodes = None
            self._per_pos = [list(ns) for ns in nodes]
        self.families = {k: v for k, v in families.items()}
        self.initial = int(initial)

    def nodes_at(self, pos: int) -> list[LatticeNode]:
        if self._uniform_nodes is not None:
            return self._uniform_nodes
        if pos >= len(self._per_pos):
            raise StochasticError(f"lattice has no node set for position {pos}")
        return self._per_pos[pos]

    def transition(self, label: str, pos: int) -> np.ndarray:
        """Row-stochastic matrix from position ``pos`` to ``pos + 1``."""
        if label not in self.families:
            raise StochasticError(f"lattice has no transition family {label!r}")
        fam = self.families[label]
        mat = fam[pos] if isinstance(fam, list) else fam
        return np.asarray(mat, dtype=float)

    def labels(self) -> list[str]:
        return sorted(self.families)

    def outcome_dim(self) -> int:
        return len(self.nodes_at(0)[0].outcome)

    def validate(self, loc: str, max_positions: int) -> list[str]:
        out = []
        try:
            n0 = self.nodes_at(0)
        except StochasticError as e:
            return [f"{loc}: {e}"]
        if not 0 <= self.initial < len(n0):
            out.append(f"{loc}: initial node {self.initial} out of range")
        for label in self.families:
            for pos in range(max_positions - 1):
                try:
                    mat = self.transition(label, pos)
                    a, b = len(self.nodes_at(pos)), len(self.nodes_at(pos + 1))
                except StochasticError as e:
                    out.append(f"{loc}: {e}")
                    break
                if mat.shape != (a, b):
                    out.append(
                        f"{loc}: family {label!r} transition {pos} has shape "
                        f"{mat.shape}, expected {(a, b)}")
                    continue
                for r in range(a):
                    s = float(mat[r].sum())
                    if abs(s - 1.0) > PROB_TOL:
                        out.append(
                            f"{loc}: family {label!r} transition {pos} row {r} "
                            f"sums to {s!r}, not 1")
                    if (mat[r] < -PROB_TOL).any():
                        out.append(
                            f"{loc}: family {label!r} transition {pos} row {r} "
                            f"has a negative entry")
        dims = {len(n.outcome) for p in range(max_positions)
                for n in self.nodes_at(p)}
        if len(dims) > 1:
            out.append(f"{loc}: mixed outcome dimensions {sorted(dims)}")
        return out


class ConditionalNoise:
    """Finite i.i.d. noise per tick, conditioned on the parent node label."""

    def __init__(self, table: dict[str, list[tuple[tuple, float]]]):
        self.table = {k: [(tuple(o), float(p)) for o, p in v]
                      for k, v in table.items()}

    def distribution(self, label: str) -> list[tuple[tuple, float]]:
        if label not in self.table:
            raise StochasticError(f"noise table has no condition {label!r}")
        return self.table[label]

    def labels(self) -> list[str]:
        return sorted(self.table)

    def outcome_dim(self) -> int:
        first = next(iter(self.table.values()))
        return len(first[0][0])

    def validate(self, loc: str) -> list[str]:
        out = []
        if not self.table:
            return [f"{loc}: noise table is empty"]
        dims = set()
        for label, dist in self.table.items():
            s = sum(p for _, p in dist)
            if abs(s - 1.0) > PROB_TOL:
                out.append(
                    f"{loc}: condition {label!r} probabilities sum to {s!r}, "
                    f"not 1")
            if any(p < -PROB_TOL for _, p in dist):
                out.append(f"{loc}: condition {label!r} has a negative "
                           f"probability")
            dims.update(len(o) for o, _ in dist)
        if len(dims) > 1:
            out.append(f"{loc}: mixed outcome dimensions {sorted(dims)}")
        return out


class Deterministic:
    """Trivial process: one constant outcome at every tick of the level."""

    def __init__(self, outcome: tuple = (), label: str = ""):
        self.outcome = tuple(outcome)
        self.label = label

    def outcome_dim(self) -> int:
        return len(self.outcome)

    def validate(self, loc: str) -> list[str]:
        return []


Process = object  # ScenarioTree | MarkovLattice | ConditionalNoise | Deterministic


# ---------------------------------------------------------------------------
# per-problem composition


@dataclass
class StochasticSpec:
    """One process per timescale plus information-timing switches.

    ``hazard[j]`` tells whether the level-(j+1) outcome at a tick is revealed
    before (True) or after (False) the decision at that tick.  The default is
    decision-hazard (False).  ``stage_boundaries`` may mark, for a tree
    level, the subset of ticks at which new information is revealed; ticks
    between boundaries are revealed together with their boundary (the block
    is foreseen from its start).  Non-tree levels reveal per tick.
    """
    processes: list
    hazard: list[bool] = field(default_factory=list)
    stage_boundaries: list[set | None] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.processes)
        if not self.hazard:
            self.hazard = [False] * n
        if not self.stage_boundaries:
            self.stage_boundaries = [None] * n

    def levels(self) -> int:
        return len(self.processes)

    def process(self, level: int):
        return self.processes[level - 1]

    def is_stochastic(self, level: int) -> bool:
        return not isinstance(self.process(level), Deterministic)


def validate(spec: StochasticSpec, grid: TimeGrid) -> list[str]:
    """Shape and probability checks; returns one message per violation."""
    out = []
    if spec.levels() != grid.levels:
        out.append(f"spec has {spec.levels()} levels, grid has {grid.levels}")
        return out
    for level in range(1, grid.levels + 1):
        proc = spec.process(level)
        loc = f"level {level}"
        if isinstance(proc, ScenarioTree):
            if level != 1:
                out.append(f"{loc}: scenario trees are only supported on "
                           f"the slowest level")
                continue
            out.extend(proc.validate(loc))
            ticks = set(grid.ticks(1))
            seen = {n.tick for n in proc.nodes}
            missing = sorted(ticks - seen)
            if missing:
                out.append(f"{loc}: tree covers no nodes at ticks {missing}")
        elif isinstance(proc, MarkovLattice):
            if level == 1:
                out.append(f"{loc}: a lattice needs a parent level")
                continue
            max_seg = max(grid.children_count(p)
                          for p in grid.ticks(level - 1))
            out.extend(proc.validate(loc, max_seg))
        elif isinstance(proc, ConditionalNoise):
            out.extend(proc.validate(loc))
        elif isinstance(proc, Deterministic):
            pass
        else:
            out.append(f"{loc}: unknown process type {type(proc).__name__}")
        bounds = spec.stage_boundaries[level - 1]
        if bounds is not None:
            if not isinstance(proc, (ScenarioTree, Deterministic)):
                out.append(f"{loc}: stage boundaries are only supported on "
                           f"tree levels")
            else:
                ticks = grid.ticks(level)
                unknown = sorted(set(bounds) - set(ticks))
                if unknown:
                    out.append(f"{loc}: stage boundaries at unknown ticks "
                               f"{unknown}")
                if ticks and ticks[0] not in bounds:
                    out.append(f"{loc}: the first tick must be a stage "
                               f"boundary")
    return out


# ---------------------------------------------------------------------------
# joint scenario enumeration


@dataclass
class Scenario:
    """One full joint realization: an outcome, label and node id per tick."""
    prob: float
    outcome: dict
    label: dict
    node: dict


def enumerate_scenarios(grid: TimeGrid, spec: StochasticSpec,
                        budget: int | None = None) -> list[Scenario]:
    """Expand the joint outcome space in decision (dictionary) order.

    Zero-probability branches are dropped.  Conditional probabilities
    multiply along the order: tree branching on the slowest level, lattice
    transitions restarting per segment keyed by the governing parent label,
    then independent noise draws keyed by the governing parent label.
    """
    order = grid.linearize()
    scenarios: list[Scenario] = []

    # mutable per-level cursor state during DFS
    def options(t: tuple, state: dict, outcome: dict, label: dict):
        level = len(t)
        proc = spec.process(level)
        if isinstance(proc, Deterministic):
            return [(proc.outcome, proc.label, 1.0, None, None)]
        if isinstance(proc, ScenarioTree):
            cur = state.get("tree")
            idxs = proc.roots() if cur is None else proc.children.get(cur, [])
            if not idxs:
                raise StochasticError(f"tree has no nodes at tick {t}")
            return [(proc.nodes[i].outcome, proc.nodes[i].label,
                     proc.nodes[i].prob, ("tree", i), i) for i in idxs]
        if isinstance(proc, MarkovLattice):
            pos = t[-1]
            parent = t[:-1]
            if pos == 0:
                node = proc.initial
                nodes = proc.nodes_at(0)
                return [(nodes[node].outcome, nodes[node].label, 1.0,
                         ("lat", node), node)]
            fam = label[parent]
            row = proc.transition(fam, pos - 1)[state["lat"]]
            nodes = proc.nodes_at(pos)
            return [(nodes[j].outcome, nodes[j].label, float(row[j]),
                     ("lat", j), j) for j in range(len(nodes)) if row[j] > 0.0]
        if isinstance(proc, ConditionalNoise):
            key = label[t[:-1]] if level > 1 else ""
            dist = proc.distribution(key)
            return [(o, "", p, None, di)
                    for di, (o, p) in enumerate(dist) if p > 0.0]
        raise StochasticError(f"unknown process {type(proc).__name__}")

    def rec(i: int, prob: float, state: dict, outcome: dict, label: dict,
            node: dict):
        if budget is not None and len(scenarios) > budget:
            raise BudgetError("scenario expansion", len(scenarios), budget)
        if i == len(order):
            scenarios.append(Scenario(prob, dict(outcome), dict(label),
                                      dict(node)))
            return
        t = order[i]
        for out, lab, p, upd, nid in options(t, state, outcome, label):
            if p <= 0.0:
                continue
            outcome[t] = tuple(out)
            label[t] = lab
            node[t] = nid
            saved = None
            if upd is not None:
                saved = state.get(upd[0])
                state[upd[0]] = upd[1]
            rec(i + 1, prob * p, state, outcome, label, node)
            if upd is not None:
                state[upd[0]] = saved
            del outcome[t], label[t], node[t]

    rec(0, 1.0, {}, {}, {}, {})
    return scenarios


# ---------------------------------------------------------------------------
# information structure


def boundary_of(grid: TimeGrid, spec: StochasticSpec, t: tuple) -> tuple:
    """Stage boundary governing the revelation of tick ``t``'s outcome."""
    bounds = spec.stage_boundaries[len(t) - 1]
    if bounds is None:
        return t
    if len(t) != 1:
        raise StochasticError("stage boundaries only apply to level 1")
    k = t[0]
    while k >= 0 and (k,) not in bounds:
        k -= 1
    if k < 0:
        raise StochasticError(f"no stage boundary at or before {t}")
    return (k,)


def revealed_ticks(grid: TimeGrid, spec: StochasticSpec, t: tuple,
                   interpretation: int) -> list[tuple]:
    """Ticks whose outcomes are known when the decision at ``t`` is made.

    An outcome attached to tick ``u`` becomes known at ``u``'s stage
    boundary ``b``: before the decision there if the level is hazard, after
    it otherwise.  Interpretation 1 treats coinciding ticks as one decision
    instant, interpretation 2 sequences them slowest-first.
    """
    out = []
    for u in grid.linearize():
        level = len(u)
        if not spec.is_stochastic(level):
            continue
        b = boundary_of(grid, spec, u)
        cmp = grid.compare(b, t, interpretation)
        if cmp < 0 or (cmp == 0 and spec.hazard[level - 1]):
            out.append(u)
    return out


@dataclass
class InfoPartition:
    """Decision-point partition: per tick, scenario groups sharing a key."""
    scenarios: list
    keys: dict            # tick -> list of per-scenario hashable keys
    classes: dict         # tick -> list[list[scenario index]]
    index: dict = field(default_factory=dict)  # tick -> scenario -> class

    def __post_init__(self):
        if not self.index:
            for t, groups in self.classes.items():
                m = {}
                for ci, members in enumerate(groups):
                    for s in members:
                        m[s] = ci
                self.index[t] = m

    def class_count(self) -> int:
        return sum(len(v) for v in self.classes.values())

    def class_of(self, t: tuple, s: int) -> int:
        return self.index[t][s]


def information_classes(grid: TimeGrid, spec: StochasticSpec,
                        interpretation: int = 1,
                        scenarios: list | None = None) -> InfoPartition:
    """Group (tick, scenario) decision points by revealed information.

    Two points at the same tick fall in one class iff the scenarios agree on
    every outcome revealed by that tick (under the chosen interpretation,
    hazard flags, and stage boundaries).  The result is a true partition:
    every point appears in exactly one class.
    """
    if scenarios is None:
        scenarios = enumerate_scenarios(grid, spec)
    keys: dict = {}
    classes: dict = {}
    for t in grid.linearize():
        rev = revealed_ticks(grid, spec, t, interpretation)
        ks = [tuple(s.outcome[u] for u in rev) for s in scenarios]
        keys[t] = ks
        groups: dict = {}
        for i, k in enumerate(ks):
            groups.setdefault(k, []).append(i)
        classes[t] = [groups[k] for k in sorted(groups)]
    return InfoPartition(scenarios, keys, classes)


# ---------------------------------------------------------------------------
# multi-horizon composition


@dataclass
class MultihorizonTree:
    """A slow tree with one fast tree attached to each slow edge."""
    slow: ScenarioTree
    attached: dict        # (parent_idx, child_idx) -> ScenarioTree

    def total_nodes(self) -> int:
        return (self.slow.node_count()
                + sum(t.node_count() for t in self.attached.values()))


def compose_multihorizon(slow: ScenarioTree, fast_factory) -> MultihorizonTree:
    """Attach a fast subtree to every slow edge.

    ``fast_factory`` is either a mapping keyed by slow edges or a callable
    ``edge -> ScenarioTree``.  A missing entry raises.
    """
    attached = {}
    for edge in slow.edges():
        if callable(fast_factory):
            tree = fast_factory(edge)
        else:
            if edge not in fast_factory:
                raise StochasticError(f"no fast tree supplied for edge {edge}")
            tree = fast_factory[edge]
        if tree is None:
            raise StochasticError(f"no fast tree supplied for edge {edge}")
        attached[edge] = tree
    return MultihorizonTree(slow, attached)


# ---------------------------------------------------------------------------
# small constructors used across tests and the demo model


def chain_tree(outcomes: list, tick0: int = 0, label: str = "") -> ScenarioTree:
    """Deterministic tree: one node per tick, single path."""
    nodes = []
    for i, o in enumerate(outcomes):
        nodes.append(TreeNode(parent=None if i == 0 else i - 1, prob=1.0,
                              outcome=tuple(o), tick=(tick0 + i,),
                              label=label))
    return ScenarioTree(nodes)


def uniform_binary_tree(depth: int, outcome_fn=None) -> ScenarioTree:
    """Full binary tree over ticks 0..depth-1 with uniform probabilities."""
    if outcome_fn is None:
        outcome_fn = lambda tick, branch: (float(branch),)
    nodes = [TreeNode(None, 1.0, outcome_fn(0, 0), (0,), "0")]
    frontier = [0]
    for t in range(1, depth):
        nxt = []
        for par in frontier:
            for b in range(2):
                lab = f"{nodes[par].label}{b}"
                nodes.append(TreeNode(par, 0.5, outcome_fn(t, b), (t,), lab))
                nxt.append(len(nodes) - 1)
        frontier = nxt
    return ScenarioTree(nodes)
