"""Solver-neutral MILP carrier and its textual interchange format.

Rows are kept as sparse triplets; variables carry box bounds, integrality
flags and a name record (role, level, tick, block context, component) so
solutions can be mapped back to the problem structure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SENSES = ("<", "=", ">")


@dataclass(frozen=True)
class VarInfo:
    role: str           # "x", "u", "y", "z", "dev+", "dev-", "sel", ...
    level: int
    tick: tuple
    ctx: str            # scenario / block path label
    comp: int

    def key(self):
        return (self.role, self.level, self.tick, self.ctx, self.comp)


@dataclass
class StandardForm:
    ncols: int
    obj: np.ndarray
    row_ptr: list               # per row: list[(col, coef)]
    senses: list
    rhs: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    is_int: np.ndarray
    var_info: list

    @property
    def nrows(self) -> int:
        return len(self.senses)

    def dense_rows(self) -> np.ndarray:
        A = np.zeros((self.nrows, self.ncols))
        for i, row in enumerate(self.row_ptr):
            for j, v in row:
                A[i, j] += v
        return A

    def row_activity(self, i: int, x: np.ndarray) -> float:
        return float(sum(v * x[j] for j, v in self.row_ptr[i]))

    def residuals(self, x: np.ndarray) -> np.ndarray:
        """Per-row constraint violation (0 when satisfied)."""
        out = np.zeros(self.nrows)
        for i in range(self.nrows):
            act = self.row_activity(i, x)
            if self.senses[i] == "<":
                out[i] = max(0.0, act - self.rhs[i])
            elif self.senses[i] == ">":
                out[i] = max(0.0, self.rhs[i] - act)
            else:
                out[i] = abs(act - self.rhs[i])
        return out

    def by_key(self, x: np.ndarray) -> dict:
        """Map solved values back to (role, level, tick, ctx, comp) keys."""
        return {info.key(): float(x[j]) for j, info in enumerate(self.var_info)}


class FormBuilder:
    """Incremental StandardForm assembly; ``count_only`` skips coefficients."""

    def __init__(self, count_only: bool = False):
        self.count_only = count_only
        self._obj: list = []
        self._lb: list = []
        self._ub: list = []
        self._int: list = []
        self._info: list = []
        self._rows: list = []
        self._senses: list = []
        self._rhs: list = []

    @property
    def ncols(self) -> int:
        return len(self._lb)

    @property
    def nrows(self) -> int:
        return len(self._senses)

    def add_var(self, lb: float, ub: float, *, integral: bool = False,
                obj: float = 0.0, info: VarInfo | None = None) -> int:
        self._obj.append(float(obj))
        self._lb.append(float(lb))
        self._ub.append(float(ub))
        self._int.append(bool(integral))
        self._info.append(info)
        return len(self._lb) - 1

    def add_vars(self, n: int, lb, ub, *, integral=None, obj=None,
                 role: str = "", level: int = 0, tick: tuple = (),
                 ctx: str = "") -> list[int]:
        lb = np.broadcast_to(np.asarray(lb, dtype=float), (n,))
        ub = np.broadcast_to(np.asarray(ub, dtype=float), (n,))
        ints = np.broadcast_to(
            np.asarray(integral if integral is not None else False), (n,))
        objs = np.broadcast_to(
            np.asarray(obj if obj is not None else 0.0, dtype=float), (n,))
        return [self.add_var(lb[i], ub[i], integral=bool(ints[i]),
                             obj=float(objs[i]),
                             info=VarInfo(role, level, tick, ctx, i))
                for i in range(n)]

    def add_obj(self, col: int, coef: float) -> None:
        self._obj[col] += float(coef)

    def add_row(self, coeffs, sense: str, rhs: float) -> int:
        """``coeffs`` is an iterable of (col, coef); zeros are dropped."""
        if sense not in SENSES:
            raise ValueError(f"bad sense {sense!r}")
        if self.count_only:
            self._rows.append(None)
        else:
            row = [(int(c), float(v)) for c, v in coeffs if v != 0.0]
            self._rows.append(row)
        self._senses.append(sense)
        self._rhs.append(float(rhs))
        return len(self._senses) - 1

    def add_block_rows(self, mats_and_vars, sense: str, rhs) -> None:
        """Emit rows of  sum_k M_k @ vars_k  (sense)  rhs, one per row index.

        ``mats_and_vars`` is a list of (matrix, var index list) pairs whose
        matrices share the row count; constant vectors may be folded into
        ``rhs`` by the caller.
        """
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        nr = len(rhs)
        for i in range(nr):
            coeffs = []
            if not self.count_only:
                for mat, cols in mats_and_vars:
                    if mat is None or len(cols) == 0:
                        continue
                    mrow = np.asarray(mat)[i]
                    coeffs.extend((c, float(v))
                                  for c, v in zip(cols, mrow) if v != 0.0)
            self.add_row(coeffs, sense, rhs[i])

    def build(self) -> StandardForm:
        if self.count_only:
            raise RuntimeError("count-only builder cannot produce a form")
        return StandardForm(
            ncols=self.ncols,
            obj=np.asarray(self._obj, dtype=float),
            row_ptr=self._rows,
            senses=list(self._senses),
            rhs=np.asarray(self._rhs, dtype=float),
            lb=np.asarray(self._lb, dtype=float),
            ub=np.asarray(self._ub, dtype=float),
            is_int=np.asarray(self._int, dtype=bool),
            var_info=list(self._info),
        )


# ---------------------------------------------------------------------------
# interchange file (one record per line)


def write_interchange(sf: StandardForm, path) -> None:
    """Plain-text dump: header, bounds, objective and row triplets.

    Record kinds: ``vars``/``rows`` counters, ``obj j v``, ``bnd j lb ub``,
    ``int j``, ``row i sense rhs``, ``a i j v``, ``name j role level tick
    ctx comp``.  Floats are emitted with repr round-trip precision.
    """
    with open(path, "w") as fh:
        fh.write("mtsopt-standardform 1\n")
        fh.write(f"vars {sf.ncols}\n")
        fh.write(f"rows {sf.nrows}\n")
        for j in range(sf.ncols):
            fh.write(f"bnd {j} {sf.lb[j]!r} {sf.ub[j]!r}\n")
            if sf.obj[j] != 0.0:
                fh.write(f"obj {j} {sf.obj[j]!r}\n")
            if sf.is_int[j]:
                fh.write(f"int {j}\n")
            info = sf.var_info[j]
            if info is not None:
                tick = ",".join(str(i) for i in info.tick)
                fh.write(f"name {j} {info.role} {info.level} [{tick}] "
                         f"{info.ctx or '-'} {info.comp}\n")
        for i in range(sf.nrows):
            fh.write(f"row {i} {sf.senses[i]} {sf.rhs[i]!r}\n")
            for j, v in sf.row_ptr[i]:
                fh.write(f"a {i} {j} {v!r}\n")


def read_interchange(path) -> StandardForm:
    ncols = nrows = 0
    obj = lb = ub = None
    is_int = None
    rows: list = []
    senses: list = []
    rhs: list = []
    info: list = []
    with open(path) as fh:
        header = fh.readline().split()
        if not header or header[0] != "mtsopt-standardform":
            raise ValueError(f"{path}: not a standard-form interchange file")
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            kind = parts[0]
            if kind == "vars":
                ncols = int(parts[1])
                obj = np.zeros(ncols)
                lb = np.full(ncols, -np.inf)
                ub = np.full(ncols, np.inf)
                is_int = np.zeros(ncols, dtype=bool)
                info = [None] * ncols
            elif kind == "rows":
                nrows = int(parts[1])
                rows = [[] for _ in range(nrows)]
                senses = [None] * nrows
                rhs = [0.0] * nrows
            elif kind == "bnd":
                j = int(parts[1])
                lb[j], ub[j] = float(parts[2]), float(parts[3])
            elif kind == "obj":
                obj[int(parts[1])] = float(parts[2])
            elif kind == "int":
                is_int[int(parts[1])] = True
            elif kind == "name":
                j = int(parts[1])
                tick = tuple(int(s) for s in parts[4].strip("[]").split(",")
                             if s != "")
                ctx = "" if parts[5] == "-" else parts[5]
                info[j] = VarInfo(parts[2], int(parts[3]), tick, ctx,
                                  int(parts[6]))
            elif kind == "row":
                i = int(parts[1])
                senses[i] = parts[2]
                rhs[i] = float(parts[3])
            elif kind == "a":
                rows[int(parts[1])].append((int(parts[2]), float(parts[3])))
            else:
                raise ValueError(f"{path}: unknown record {kind!r}")
    return StandardForm(ncols, obj, rows, senses, np.asarray(rhs),
                        lb, ub, is_int, info)
