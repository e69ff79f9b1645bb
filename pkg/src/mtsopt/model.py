"""Linear stage templates and the multi-timescale problem container.

A stage template fixes, for the ticks of one timescale, the affine pieces of
the decision problem:

* stage cost            f(x, u)   = c.x + d.u
* state dynamics        x_next    = A x + B u + G y_par + H w + h
* feasible set          E x + F u + J y_par + M w <= g, plus box bounds
* aggregate generation  y         = C x + K w + L y_par + k
* history rows          sum_l W[l] x(t - l) + Fh u(t) <= gh  (lag window)
* goal block            bounds/rows for the prescribed child states z

``w`` is the tick's realized outcome vector and ``y_par`` the aggregate
passed down from the governing parent tick.  Everything is affine with
mixed-integer variables, which keeps MILP instantiation exact and the
value-function tables finite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .stochastic import (ConditionalNoise, Deterministic, MarkovLattice,
                         ScenarioTree, StochasticSpec)
from .stochastic import validate as validate_stochastics
from .timegrid import TimeGrid

INF = float("inf")


def _arr(v, n: int | None = None) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if n is not None and a.size == 0:
        a = a.reshape(n) if n == 0 else a
    return a


def _mat(v, shape: tuple[int, int]) -> np.ndarray:
    if v is None:
        return np.zeros(shape)
    a = np.asarray(v, dtype=float)
    if a.size == 0:
        return a.reshape(shape) if 0 in shape else np.zeros(shape)
    return a.reshape(shape) if a.ndim == 1 and shape[0] == 1 else a


@dataclass
class HistoryBlock:
    """Lag-window inequality rows: sum_l W[l] x(t-l) + F u(t) <= rhs.

    Lag 0 is the current state.  References that fall before the first tick
    of the level substitute the level's initial state.
    """
    lags: dict          # lag (int >= 0) -> (rows, nx) coefficient matrix
    F: np.ndarray       # (rows, nu)
    rhs: np.ndarray     # (rows,)

    def nrows(self) -> int:
        return len(self.rhs)


@dataclass
class GoalBlock:
    """Feasibility description of prescribed child states (dimension = child
    state dimension)."""
    dim: int
    lb: np.ndarray
    ub: np.ndarray
    integral: np.ndarray            # bool flags
    rows: np.ndarray | None = None  # (r, dim) pure-state rows
    rhs: np.ndarray | None = None   # (r,)


@dataclass
class StageTemplate:
    nx: int
    nu: int
    # costs
    c: np.ndarray = None
    d: np.ndarray = None
    # bounds and integrality
    x_lb: np.ndarray = None
    x_ub: np.ndarray = None
    u_lb: np.ndarray = None
    u_ub: np.ndarray = None
    x_int: np.ndarray = None
    u_int: np.ndarray = None
    # dynamics  x+ = A x + B u + G y_par + H w + h
    A: np.ndarray = None
    B: np.ndarray = None
    G: np.ndarray = None
    H: np.ndarray = None
    h: np.ndarray = None
    # feasibility  E x + F u + J y_par + M w <= g
    E: np.ndarray = None
    F: np.ndarray = None
    J: np.ndarray = None
    M: np.ndarray = None
    g: np.ndarray = None
    # aggregation  y = C x + K w + L y_par + k   (levels above the finest)
    ny: int = 0
    C: np.ndarray = None
    K: np.ndarray = None
    L: np.ndarray = None
    k: np.ndarray = None
    history: list = field(default_factory=list)
    goal: GoalBlock | None = None

    def __post_init__(self):
        nx, nu = self.nx, self.nu
        self.c = _arr(self.c if self.c is not None else np.zeros(nx), nx)
        self.d = _arr(self.d if self.d is not None else np.zeros(nu), nu)
        self.x_lb = _arr(self.x_lb if self.x_lb is not None else [-INF] * nx, nx)
        self.x_ub = _arr(self.x_ub if self.x_ub is not None else [INF] * nx, nx)
        self.u_lb = _arr(self.u_lb if self.u_lb is not None else [-INF] * nu, nu)
        self.u_ub = _arr(self.u_ub if self.u_ub is not None else [INF] * nu, nu)
        self.x_int = np.asarray(
            self.x_int if self.x_int is not None else [False] * nx, dtype=bool)
        self.u_int = np.asarray(
            self.u_int if self.u_int is not None else [False] * nu, dtype=bool)

    def nrows_feas(self) -> int:
        return 0 if self.g is None else len(np.atleast_1d(self.g))

    def has_dynamics(self) -> bool:
        return self.A is not None or self.B is not None or self.h is not None

    def dyn(self, ny_par: int, nw: int):
        """Dynamics matrices with zero defaults, shaped consistently."""
        nx, nu = self.nx, self.nu
        A = _mat(self.A, (nx, nx))
        B = _mat(self.B, (nx, nu))
        G = _mat(self.G, (nx, ny_par))
        H = _mat(self.H, (nx, nw))
        h = _arr(self.h if self.h is not None else np.zeros(nx), nx)
        return A, B, G, H, h

    def feas(self, ny_par: int, nw: int):
        r = self.nrows_feas()
        E = _mat(self.E, (r, self.nx))
        F = _mat(self.F, (r, self.nu))
        J = _mat(self.J, (r, ny_par))
        M = _mat(self.M, (r, nw))
        g = _arr(self.g if self.g is not None else np.zeros(r), r)
        return E, F, J, M, g

    def agg(self, ny_par: int, nw: int):
        ny = self.ny
        C = _mat(self.C, (ny, self.nx))
        K = _mat(self.K, (ny, nw))
        L = _mat(self.L, (ny, ny_par))
        k = _arr(self.k if self.k is not None else np.zeros(ny), ny)
        return C, K, L, k


@dataclass
class TerminalSpec:
    """Segment-end condition for one timescale.

    ``hard`` pins the segment-end state to the prescribed goal exactly
    (indicator semantics: feasible iff equal); ``l1`` charges
    rho * |x - goal|_1 instead.  The horizon end is free unless
    ``final_goal`` is given, in which case the mode applies there too.
    """
    mode: str = "hard"              # "hard" | "l1"
    rho: float = 0.0
    final_goal: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in ("hard", "l1"):
            raise ValueError(f"terminal mode must be hard or l1, got {self.mode!r}")
        if self.final_goal is not None:
            self.final_goal = _arr(self.final_goal)


@dataclass
class MtsProblem:
    grid: TimeGrid
    stochastics: StochasticSpec
    templates: dict                 # level -> StageTemplate
    x0: list                        # per level, initial state vector
    overrides: dict = field(default_factory=dict)   # tick -> StageTemplate
    interpretation: int = 1
    terminal: list = field(default_factory=list)    # per level, TerminalSpec | None

    def __post_init__(self):
        self.x0 = [np.asarray(v, dtype=float) for v in self.x0]
        if not self.terminal:
            self.terminal = [None] * self.grid.levels

    def template_at(self, t: tuple) -> StageTemplate:
        return self.overrides.get(t, self.templates[len(t)])

    def terminal_at(self, level: int) -> TerminalSpec:
        spec = self.terminal[level - 1]
        return spec if spec is not None else TerminalSpec(mode="hard")

    def outcome_dim(self, level: int) -> int:
        return self.stochastics.process(level).outcome_dim()

    def parent_agg_dim(self, level: int) -> int:
        if level == 1:
            return 0
        return self.templates[level - 1].ny


# ---------------------------------------------------------------------------
# operations


def stage_cost(tpl: StageTemplate, x, u) -> float:
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (tpl.nx,) or u.shape != (tpl.nu,):
        raise ValueError(f"expected dims ({tpl.nx},), ({tpl.nu},); "
                         f"got {x.shape}, {u.shape}")
    return float(tpl.c @ x + tpl.d @ u)


def step(tpl: StageTemplate, x, u, y_parent=None, w=None) -> np.ndarray:
    """Apply the affine dynamics; history rows do not alter the map."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    yp = np.asarray(y_parent if y_parent is not None else [], dtype=float)
    wv = np.asarray(w if w is not None else [], dtype=float)
    A, B, G, H, h = tpl.dyn(len(yp), len(wv))
    return A @ x + B @ u + G @ yp + H @ wv + h


def aggregate(tpl: StageTemplate, x, w=None, y_parent=None) -> np.ndarray:
    """Evaluate y = C x + K w + L y_par + k for a non-finest template."""
    if tpl.ny == 0:
        raise ValueError("template has no aggregation map (finest level)")
    x = np.asarray(x, dtype=float)
    wv = np.asarray(w if w is not None else [], dtype=float)
    yp = np.asarray(y_parent if y_parent is not None else [], dtype=float)
    C, K, L, k = tpl.agg(len(yp), len(wv))
    return C @ x + K @ wv + L @ yp + k


def feasible(tpl: StageTemplate, x, u, y_parent=None, w=None,
             tol: float = 1e-9) -> list[str]:
    """Bound and row residual check; returns one message per violation."""
    out = []
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    yp = np.asarray(y_parent if y_parent is not None else [], dtype=float)
    wv = np.asarray(w if w is not None else [], dtype=float)
    for name, v, lb, ub, flags in (("x", x, tpl.x_lb, tpl.x_ub, tpl.x_int),
                                   ("u", u, tpl.u_lb, tpl.u_ub, tpl.u_int)):
        for i in range(len(v)):
            if v[i] < lb[i] - tol or v[i] > ub[i] + tol:
                out.append(f"{name}[{i}]={v[i]} outside [{lb[i]}, {ub[i]}]")
            if flags[i] and abs(v[i] - round(v[i])) > 1e-6:
                out.append(f"{name}[{i}]={v[i]} not integral")
    if tpl.nrows_feas():
        E, F, J, M, g = tpl.feas(len(yp), len(wv))
        resid = E @ x + F @ u + J @ yp + M @ wv - g
        for i, r in enumerate(resid):
            if r > tol:
                out.append(f"feasibility row {i} violated by {r}")
    return out


def history_feasible(tpl: StageTemplate, x_now, u_now, lagged: dict,
                     tol: float = 1e-9) -> list[str]:
    """Check lag-window rows; ``lagged[l]`` is the state ``l`` ticks back."""
    out = []
    for bi, blk in enumerate(tpl.history):
        lhs = blk.F @ np.asarray(u_now, dtype=float)
        for lag, W in blk.lags.items():
            xv = np.asarray(x_now if lag == 0 else lagged[lag], dtype=float)
            lhs = lhs + np.asarray(W, dtype=float) @ xv
        for i, r in enumerate(lhs - blk.rhs):
            if r > tol:
                out.append(f"history block {bi} row {i} violated by {r}")
    return out


def validate_problem(p: MtsProblem) -> list[str]:
    """Dimension and structural consistency checks, one message each."""
    out = validate_stochastics(p.stochastics, p.grid)
    L = p.grid.levels
    if sorted(p.templates) != list(range(1, L + 1)):
        out.append(f"templates must cover levels 1..{L}, "
                   f"got {sorted(p.templates)}")
        return out
    if len(p.x0) != L:
        out.append(f"x0 must have {L} entries, got {len(p.x0)}")
        return out
    for level in range(1, L + 1):
        tpl = p.templates[level]
        loc = f"level {level}"
        nw = p.outcome_dim(level)
        nyp = p.parent_agg_dim(level)
        out.extend(_check_template(tpl, loc, nw, nyp, level, L))
        if len(p.x0[level - 1]) != tpl.nx:
            out.append(f"{loc}: x0 has dim {len(p.x0[level - 1])}, "
                       f"state dim is {tpl.nx}")
        else:
            x0 = p.x0[level - 1]
            if ((x0 < tpl.x_lb - 1e-9) | (x0 > tpl.x_ub + 1e-9)).any():
                out.append(f"{loc}: x0 violates state bounds")
        if level < L:
            child = p.templates.get(level + 1)
            if tpl.goal is not None and child is not None \
                    and tpl.goal.dim != child.nx:
                out.append(f"{loc}: goal dim {tpl.goal.dim} does not match "
                           f"child state dim {child.nx}")
        term = p.terminal[level - 1]
        if term is not None:
            if term.rho < 0:
                out.append(f"{loc}: terminal rho must be >= 0")
            if term.final_goal is not None \
                    and len(term.final_goal) != tpl.nx:
                out.append(f"{loc}: final goal has dim "
                           f"{len(term.final_goal)}, state dim {tpl.nx}")
    for t, tpl in p.overrides.items():
        if not p.grid.contains(t):
            out.append(f"override at unknown tick {t}")
            continue
        base = p.templates[len(t)]
        if (tpl.nx, tpl.nu, tpl.ny) != (base.nx, base.nu, base.ny):
            # control dimension may legitimately shrink at the horizon edge
            if tpl.nx != base.nx or tpl.ny != base.ny:
                out.append(f"override at {t} changes state/aggregate dims")
        nw = p.outcome_dim(len(t))
        nyp = p.parent_agg_dim(len(t))
        out.extend(_check_template(tpl, f"override {t}", nw, nyp,
                                   len(t), L))
    if p.interpretation not in (1, 2):
        out.append(f"interpretation must be 1 or 2, got {p.interpretation}")
    return out


def _check_template(tpl: StageTemplate, loc: str, nw: int, nyp: int,
                    level: int, levels: int) -> list[str]:
    out = []
    nx, nu = tpl.nx, tpl.nu

    def shape(name, m, want):
        if m is None:
            return
        a = np.asarray(m, dtype=float)
        if a.shape != want:
            out.append(f"{loc}: {name} has shape {a.shape}, expected {want}")

    shape("A", tpl.A, (nx, nx))
    shape("B", tpl.B, (nx, nu))
    shape("G", tpl.G, (nx, nyp))
    shape("H", tpl.H, (nx, nw))
    if tpl.h is not None:
        shape("h", np.atleast_1d(tpl.h), (nx,))
    r = tpl.nrows_feas()
    if r:
        shape("E", tpl.E, (r, nx))
        shape("F", tpl.F, (r, nu))
        shape("J", tpl.J, (r, nyp))
        shape("M", tpl.M, (r, nw))
    if tpl.ny:
        if level == levels:
            out.append(f"{loc}: aggregation declared at the finest level")
        shape("C", tpl.C, (tpl.ny, nx))
        shape("K", tpl.K, (tpl.ny, nw))
        shape("L", tpl.L, (tpl.ny, nyp))
    elif level < levels:
        # aggregation is optional but its absence means children cannot
        # reference a parent aggregate; checked via the child's G/J/L dims
        pass
    if tpl.goal is not None and level == levels:
        out.append(f"{loc}: goal block declared at the finest level")
    for bi, blk in enumerate(tpl.history):
        rh = blk.nrows()
        shape(f"history[{bi}].F", blk.F, (rh, nu))
        for lag, W in blk.lags.items():
            if lag < 0:
                out.append(f"{loc}: history[{bi}] has negative lag {lag}")
            shape(f"history[{bi}].W[{lag}]", W, (rh, nx))
    for name, v, n in (("c", tpl.c, nx), ("d", tpl.d, nu),
                       ("x_lb", tpl.x_lb, nx), ("x_ub", tpl.x_ub, nx),
                       ("u_lb", tpl.u_lb, nu), ("u_ub", tpl.u_ub, nu)):
        if len(v) != n:
            out.append(f"{loc}: {name} has dim {len(v)}, expected {n}")
    if (tpl.x_lb > tpl.x_ub).any() or (tpl.u_lb > tpl.u_ub).any():
        out.append(f"{loc}: crossing bounds (lb > ub)")
    return out
