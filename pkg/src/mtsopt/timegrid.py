"""Nested time grids for multi-timescale decision problems.

A grid has ``levels`` timescales.  Level 1 is the slowest; each level-j tick
owns a contiguous block of level-(j+1) ticks (its *segment*).  A tick is a
zero-based integer tuple whose length equals its level, so ``(0, 1)`` is the
second child of the first level-1 tick.  The first child of any tick starts
at the same physical time as its parent ("coinciding" ticks), which is what
makes cross-level ordering subtle: two orderings are supported, one where
coinciding ticks compare equal (interpretation 1) and plain dictionary order
(interpretation 2).

Grids are immutable after construction and safe to share between threads.
"""

from __future__ import annotations

from fractions import Fraction
from typing import Iterable, Mapping, Sequence, Union

Tick = tuple

#: Children-count specification: a single uniform count, one count per level,
#: or an explicit map from parent tick to count.
ChildSpec = Union[int, Sequence[int], Mapping[tuple, int]]


class GridError(ValueError):
    """Raised for malformed grids or ticks that do not belong to a grid."""


class TimeGrid:
    """Immutable tick hierarchy with ordering and segment operations.

    Parameters
    ----------
    levels:
        Number of timescales, >= 1.
    horizon:
        Number of level-1 ticks.
    children:
        How many level-(j+1) ticks each level-j tick owns.  Accepts a
        uniform int, a per-level list (levels-1 entries), or an explicit
        ``{parent_tick: count}`` map for dynamic resolution.
    finest_steps:
        Optional durations of the finest-level ticks, in order.  Defaults
        to unit steps.  Physical times of coarser ticks are inherited from
        their first finest descendant, so coinciding ticks share a stamp
        by construction.
    """

    def __init__(self, levels: int, horizon: int, children: ChildSpec = 1,
                 finest_steps: Sequence | None = None):
        if levels < 1:
            raise GridError("levels must be >= 1")
        if horizon < 1:
            raise GridError("horizon must be >= 1")
        self.levels = int(levels)
        self.horizon = int(horizon)
        self._children: dict[tuple, int] = {}
        self._ticks_by_level: list[list[tuple]] = []

        level_ticks = [(i,) for i in range(horizon)]
        self._ticks_by_level.append(level_ticks)
        for level in range(1, levels):
            nxt = []
            for t in level_ticks:
                count = _child_count(children, level, t)
                if count < 1:
                    raise GridError(f"children count for {t} must be >= 1")
                self._children[t] = count
                nxt.extend(t + (i,) for i in range(count))
            self._ticks_by_level.append(nxt)
            level_ticks = nxt

        finest = self._ticks_by_level[-1]
        if finest_steps is None:
            steps = [Fraction(1)] * len(finest)
        else:
            if len(finest_steps) != len(finest):
                raise GridError(
                    f"finest_steps has {len(finest_steps)} entries, "
                    f"expected {len(finest)}")
            steps = [Fraction(s) for s in finest_steps]
            if any(s <= 0 for s in steps):
                raise GridError("finest_steps must be positive")

        self._times: dict[tuple, Fraction] = {}
        acc = Fraction(0)
        for t, s in zip(finest, steps):
            self._times[t] = acc
            acc += s
        # Coarser ticks inherit the stamp of their first finest descendant.
        for level in range(levels - 2, -1, -1):
            for t in self._ticks_by_level[level]:
                self._times[t] = self._times[t + (0,)]

    # ------------------------------------------------------------------
    # basic queries

    def level_of(self, t: tuple) -> int:
        self._check(t)
        return len(t)

    def contains(self, t) -> bool:
        return isinstance(t, tuple) and t in self._times

    def ticks(self, level: int) -> list[tuple]:
        """All ticks of one level, in chronological order."""
        if not 1 <= level <= self.levels:
            raise GridError(f"no level {level} in a {self.levels}-level grid")
        return list(self._ticks_by_level[level - 1])

    def children_count(self, t: tuple) -> int:
        self._check(t)
        if len(t) == self.levels:
            raise GridError(f"{t} is at the finest level and has no children")
        return self._children[t]

    def time_of(self, t: tuple) -> Fraction:
        self._check(t)
        return self._times[t]

    def _check(self, t) -> None:
        if not self.contains(t):
            raise GridError(f"tick {t!r} does not belong to this grid")

    # ------------------------------------------------------------------
    # tick arithmetic

    def next_tick(self, t: tuple):
        """Successor of ``t`` on its own level, or None at end of horizon.

        Carries over into the next parent segment when the current segment
        is exhausted, e.g. with 4 children per parent (0,3) -> (1,0).
        """
        self._check(t)
        if len(t) == 1:
            return (t[0] + 1,) if t[0] + 1 < self.horizon else None
        parent, idx = t[:-1], t[-1]
        if idx + 1 < self._children[parent]:
            return parent + (idx + 1,)
        parent_next = self.next_tick(parent)
        if parent_next is None:
            return None
        return parent_next + (0,)

    def parent_tick(self, t: tuple) -> tuple:
        """Owning tick one level up; the coordinate prefix of length j-1."""
        self._check(t)
        if len(t) == 1:
            raise GridError(f"level-1 tick {t} has no parent")
        return t[:-1]

    def segment(self, parent: tuple) -> list[tuple]:
        """Child ticks governed by ``parent``, in order."""
        self._check(parent)
        if len(parent) == self.levels:
            raise GridError(f"{parent} is at the finest level; no segment")
        return [parent + (i,) for i in range(self._children[parent])]

    def compare(self, a: tuple, b: tuple, interpretation: int = 1) -> int:
        """Total (pre)order across all levels; returns -1, 0 or 1.

        Interpretation 2 is plain dictionary order on the tuples, which
        sequences coinciding ticks slowest-first.  Interpretation 1 first
        collapses ticks with identical physical time stamps into one
        equivalence class (they share information and constraints).
        """
        self._check(a)
        self._check(b)
        if interpretation not in (1, 2):
            raise GridError(f"interpretation must be 1 or 2, got {interpretation}")
        if interpretation == 1 and self._times[a] == self._times[b]:
            return 0
        if a == b:
            return 0
        return -1 if a < b else 1

    def linearize(self) -> list[tuple]:
        """Every tick exactly once, in dictionary order.

        This is the order in which decisions are taken:
        (0), (0,0), (0,0,0), (0,0,1), ..., (0,1), (0,1,0), ...
        """
        out: list[tuple] = []

        def visit(t: tuple) -> None:
            out.append(t)
            if len(t) < self.levels:
                for c in self.segment(t):
                    visit(c)

        for i in range(self.horizon):
            visit((i,))
        return out

    def coinciding(self, t: tuple) -> list[tuple]:
        """All ticks sharing ``t``'s physical time stamp (its own class)."""
        self._check(t)
        stamp = self._times[t]
        return [u for u in self.linearize() if self._times[u] == stamp]

    def tick_count(self) -> int:
        return sum(len(lv) for lv in self._ticks_by_level)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return (f"TimeGrid(levels={self.levels}, horizon={self.horizon}, "
                f"ticks={self.tick_count()})")


def _child_count(children: ChildSpec, level: int, parent: tuple) -> int:
    if isinstance(children, Mapping):
        if parent not in children:
            raise GridError(f"children map has no entry for {parent}")
        return int(children[parent])
    if isinstance(children, int):
        return children
    seq = list(children)
    if len(seq) != 0 and len(seq) < level:
        raise GridError(
            f"per-level children list needs {level} entries, has {len(seq)}")
    return int(seq[level - 1])
