"""Linear and mixed-binary programs with a self-contained solver.

The optimizer behind the predictive controller.  Everything is in-house:
LPs go through the bounded-variable simplex in :mod:`rampflow._simplex`,
binaries through best-bound branch and bound with depth-first plunging.
No external solver is involved at any point.

Models are built through :class:`ModelBuilder`, which hands out column and
row indices and records the two gadget encodings the controller needs:

``encode_min_equality``
    ``f = min(a, b)`` for bounded variables, one binary selector, big-M
    constants derived from the declared bounds.

``encode_capacity_drop``
    the discharge-capacity switch: a binary that is 1 exactly on the
    uncongested branch, with the threshold boundary admitting the
    uncongested choice, plus the affine tie between the capacity value
    and the binary.

Both register decode metadata on the model so the solver can snap selector
binaries of a fractional relaxation to the values implied by the continuous
variables (the "polish" incumbent pass).

Text dumps (:func:`dump_model`) use a line grammar, one record per line,
floats in shortest round-trip form::

    milp <name>
    sense min|max
    vars <n>
    var <idx> <name> lower <v> upper <v> obj <v> [binary]
    rows <m>
    row <idx> <name> <L|E|G> <rhs> : <coef>*<varidx> ...
    gadget min f=<i> a=<i> b=<i> z=<i>
    gadget drop xi=<i> x=<i> z=<i> crit=<v>
    end

Statuses: ``optimal`` (gap certified within tolerance), ``infeasible``,
``unbounded``, ``budget_exceeded`` (node budget ran out; the incumbent and
the proven bound are still reported).
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ._simplex import (
    NumericalBreakdown,
    SimplexOptions,
    WarmBasis,
    crash_from_point,
    solve_canonical,
)

__all__ = [
    "OPTIMAL",
    "INFEASIBLE",
    "UNBOUNDED",
    "BUDGET_EXCEEDED",
    "LinearProgram",
    "MilpModel",
    "MilpBudget",
    "Solution",
    "ModelBuilder",
    "encode_min_equality",
    "encode_capacity_drop",
    "solve_lp",
    "solve_milp",
    "check_solution",
    "dump_model",
    "NumericalBreakdown",
]

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
BUDGET_EXCEEDED = "budget_exceeded"

_INT_TOL = 1e-7


@dataclass
class LinearProgram:
    """Columns, rows and an objective; the plain continuous problem."""

    name: str
    sense: str  # "min" | "max"
    obj: np.ndarray
    col_lower: np.ndarray
    col_upper: np.ndarray
    col_names: list[str]
    row_coo: tuple[np.ndarray, np.ndarray, np.ndarray]  # rows, cols, vals
    row_senses: np.ndarray
    rhs: np.ndarray
    row_names: list[str]

    @property
    def n_cols(self) -> int:
        return self.obj.shape[0]

    @property
    def n_rows(self) -> int:
        return self.rhs.shape[0]

    def matrix(self) -> sp.csc_matrix:
        r, c, v = self.row_coo
        return sp.csc_matrix(
            sp.coo_matrix((v, (r, c)), shape=(self.n_rows, self.n_cols))
        )


@dataclass(frozen=True)
class MinGadget:
    f: int
    a: int
    b: int
    z: int


@dataclass(frozen=True)
class DropGadget:
    xi: int
    x: int
    z: int
    x_crit: float


@dataclass
class MilpModel:
    """A linear program plus binary columns and gadget decode metadata."""

    lp: LinearProgram
    binaries: np.ndarray  # sorted column indices
    gadgets: list = field(default_factory=list)


@dataclass(frozen=True)
class MilpBudget:
    max_nodes: int = 100_000
    gap_abs: float = 1e-6
    gap_rel: float = 0.0


@dataclass
class Solution:
    status: str
    x: np.ndarray
    objective: float
    bound: float  # proven bound in the model's own sense
    gap: float
    nodes: int
    iterations: int
    basis: WarmBasis | None = None


class ModelBuilder:
    """Accumulates columns and rows; hands out integer indices."""

    def __init__(self, name: str = "model", sense: str = "min"):
        if sense not in ("min", "max"):
            raise ValueError("sense must be 'min' or 'max'")
        self.name = name
        self.sense = sense
        self.obj: list[float] = []
        self.lower: list[float] = []
        self.upper: list[float] = []
        self.col_names: list[str] = []
        self.binary: list[int] = []
        self._rows: list[int] = []
        self._cols: list[int] = []
        self._vals: list[float] = []
        self.senses: list[str] = []
        self.rhs: list[float] = []
        self.row_names: list[str] = []
        self.gadgets: list = []

    @property
    def n_cols(self) -> int:
        return len(self.obj)

    @property
    def n_rows(self) -> int:
        return len(self.rhs)

    def add_variable(
        self,
        name: str | None = None,
        *,
        lower: float = 0.0,
        upper: float = np.inf,
        objective: float = 0.0,
        binary: bool = False,
    ) -> int:
        j = len(self.obj)
        if binary:
            lower = max(lower, 0.0)
            upper = min(upper, 1.0)
            self.binary.append(j)
        if lower > upper + 1e-12:
            raise ValueError(f"variable {name or j} has lower > upper")
        self.obj.append(float(objective))
        self.lower.append(float(lower))
        self.upper.append(float(upper))
        self.col_names.append(name if name is not None else f"v{j}")
        return j

    def add_row(
        self,
        coeffs: dict[int, float],
        sense: str,
        rhs: float,
        name: str | None = None,
    ) -> int:
        if sense not in ("L", "E", "G"):
            raise ValueError("row sense must be 'L', 'E' or 'G'")
        i = len(self.rhs)
        n = len(self.obj)
        for j, v in coeffs.items():
            if not 0 <= j < n:
                raise IndexError(f"row {name or i} references unknown column {j}")
            if v != 0.0:
                self._rows.append(i)
                self._cols.append(j)
                self._vals.append(float(v))
        self.senses.append(sense)
        self.rhs.append(float(rhs))
        self.row_names.append(name if name is not None else f"r{i}")
        return i

    def fix_variable(self, j: int, value: float) -> None:
        self.lower[j] = float(value)
        self.upper[j] = float(value)

    def tighten(self, j: int, lower: float, upper: float) -> None:
        """Shrink a column's bounds; never widens."""
        self.lower[j] = max(self.lower[j], float(lower))
        self.upper[j] = min(self.upper[j], float(upper))
        if self.lower[j] > self.upper[j] + 1e-9:
            raise ValueError(
                f"tightening column {self.col_names[j]} emptied its range"
            )

    def _lp(self) -> LinearProgram:
        return LinearProgram(
            name=self.name,
            sense=self.sense,
            obj=np.asarray(self.obj, dtype=float),
            col_lower=np.asarray(self.lower, dtype=float),
            col_upper=np.asarray(self.upper, dtype=float),
            col_names=list(self.col_names),
            row_coo=(
                np.asarray(self._rows, dtype=np.int64),
                np.asarray(self._cols, dtype=np.int64),
                np.asarray(self._vals, dtype=float),
            ),
            row_senses=np.asarray(self.senses, dtype="U1"),
            rhs=np.asarray(self.rhs, dtype=float),
            row_names=list(self.row_names),
        )

    def build_lp(self) -> LinearProgram:
        if self.binary:
            raise ValueError("model declares binaries; use build() instead")
        return self._lp()

    def build(self) -> MilpModel:
        return MilpModel(
            lp=self._lp(),
            binaries=np.asarray(sorted(self.binary), dtype=np.int64),
            gadgets=list(self.gadgets),
        )


def encode_min_equality(
    builder: ModelBuilder,
    f: int,
    a: int,
    b: int,
    bound_a: float | None = None,
    bound_b: float | None = None,
    *,
    name: str | None = None,
) -> int:
    """Add rows forcing ``f = min(a, b)`` and return the selector binary.

    The selector is 1 when ``a`` attains the minimum and 0 when ``b`` does;
    ties admit both.  ``bound_a`` must dominate ``sup (a - b)+`` and
    ``bound_b`` must dominate ``sup (b - a)+`` over the feasible set; when
    omitted they are derived from the declared column bounds, which must
    then be finite on the relevant sides.
    """
    tag = name if name is not None else f"min{len(builder.gadgets)}"
    if bound_a is None:
        bound_a = builder.upper[a] - builder.lower[b]
    if bound_b is None:
        bound_b = builder.upper[b] - builder.lower[a]
    if not (np.isfinite(bound_a) and np.isfinite(bound_b)):
        raise ValueError(
            f"gadget {tag}: min-equality needs finite big-M bounds; declare "
            "finite column bounds or pass them explicitly"
        )
    m_a = max(float(bound_a), 0.0)
    m_b = max(float(bound_b), 0.0)
    z = builder.add_variable(f"{tag}.z", binary=True)
    builder.add_row({f: 1.0, a: -1.0}, "L", 0.0, f"{tag}.le_a")
    builder.add_row({f: 1.0, b: -1.0}, "L", 0.0, f"{tag}.le_b")
    builder.add_row({f: 1.0, a: -1.0, z: -m_a}, "G", -m_a, f"{tag}.pick_a")
    builder.add_row({f: 1.0, b: -1.0, z: m_b}, "G", 0.0, f"{tag}.pick_b")
    builder.gadgets.append(MinGadget(f=f, a=a, b=b, z=z))
    return z


def encode_capacity_drop(
    builder: ModelBuilder,
    xi: int,
    x: int,
    x_crit: float,
    c_max: float,
    alpha: float,
    x_jam: float,
    *,
    name: str | None = None,
) -> int:
    """Tie ``xi`` to the discharge-capacity switch on ``x``.

    Returns the binary ``z`` with ``z = 1`` forcing ``x <= x_crit`` and
    ``xi = c_max``, and ``z = 0`` forcing ``x >= x_crit`` and
    ``xi = alpha * c_max``.  A state exactly on the threshold admits both
    branches; decoding prefers ``z = 1``, matching the inclusive boundary
    of the plant's demand function.  ``x_jam`` caps the state from above
    for the big-M on the congested branch.
    """
    tag = name if name is not None else f"drop{len(builder.gadgets)}"
    lb_x = builder.lower[x]
    ub_x = min(builder.upper[x], float(x_jam))
    if not (np.isfinite(lb_x) and np.isfinite(ub_x)):
        raise ValueError(f"gadget {tag}: the state column needs finite bounds")
    z = builder.add_variable(f"{tag}.z", binary=True)
    builder.add_row(
        {xi: 1.0, z: -(1.0 - alpha) * c_max}, "E", alpha * c_max, f"{tag}.tie"
    )
    builder.add_row(
        {x: 1.0, z: max(ub_x - x_crit, 0.0)}, "L", ub_x, f"{tag}.cap"
    )
    builder.add_row(
        {x: 1.0, z: max(x_crit - lb_x, 0.0)}, "G", x_crit, f"{tag}.floor"
    )
    builder.gadgets.append(DropGadget(xi=xi, x=x, z=z, x_crit=x_crit))
    return z


def check_solution(
    model: MilpModel | LinearProgram, x: np.ndarray, *, tol: float = 1e-9
) -> list[str]:
    """Return human-readable violations of bounds, rows and integrality."""
    lp = model.lp if isinstance(model, MilpModel) else model
    x = np.asarray(x, dtype=float)
    out: list[str] = []
    if x.shape != (lp.n_cols,):
        return [f"value vector has shape {x.shape}, expected ({lp.n_cols},)"]
    lo_bad = np.flatnonzero(x < lp.col_lower - tol)
    hi_bad = np.flatnonzero(x > lp.col_upper + tol)
    for j in lo_bad:
        out.append(f"column {lp.col_names[j]}: {x[j]!r} below {lp.col_lower[j]!r}")
    for j in hi_bad:
        out.append(f"column {lp.col_names[j]}: {x[j]!r} above {lp.col_upper[j]!r}")
    ax = lp.matrix() @ x
    for i in range(lp.n_rows):
        s, r, v = lp.row_senses[i], lp.rhs[i], ax[i]
        bad = (
            (s == "L" and v > r + tol)
            or (s == "G" and v < r - tol)
            or (s == "E" and abs(v - r) > tol)
        )
        if bad:
            out.append(f"row {lp.row_names[i]} ({s} {r!r}): activity {v!r}")
    if isinstance(model, MilpModel):
        for j in model.binaries:
            if min(x[j], 1.0 - x[j]) > _INT_TOL:
                out.append(f"binary {lp.col_names[j]}: fractional value {x[j]!r}")
    return out


def _fmt(v) -> str:
    return repr(float(v))


def dump_model(model: MilpModel | LinearProgram) -> str:
    """Serialize a model to the line grammar documented in the module."""
    lp = model.lp if isinstance(model, MilpModel) else model
    binaries = (
        set(int(j) for j in model.binaries)
        if isinstance(model, MilpModel)
        else set()
    )
    lines = [f"milp {lp.name}", f"sense {lp.sense}", f"vars {lp.n_cols}"]
    for j in range(lp.n_cols):
        tail = " binary" if j in binaries else ""
        lines.append(
            f"var {j} {lp.col_names[j]} lower {_fmt(lp.col_lower[j])} "
            f"upper {_fmt(lp.col_upper[j])} obj {_fmt(lp.obj[j])}{tail}"
        )
    lines.append(f"rows {lp.n_rows}")
    mat = lp.matrix().tocsr()
    for i in range(lp.n_rows):
        lo, hi = mat.indptr[i], mat.indptr[i + 1]
        terms = " ".join(
            f"{_fmt(mat.data[k])}*{mat.indices[k]}" for k in range(lo, hi)
        )
        lines.append(
            f"row {i} {lp.row_names[i]} {lp.row_senses[i]} {_fmt(lp.rhs[i])} : {terms}"
        )
    if isinstance(model, MilpModel):
        for g in model.gadgets:
            if isinstance(g, MinGadget):
                lines.append(f"gadget min f={g.f} a={g.a} b={g.b} z={g.z}")
            elif isinstance(g, DropGadget):
                lines.append(
                    f"gadget drop xi={g.xi} x={g.x} z={g.z} crit={_fmt(g.x_crit)}"
                )
    lines.append("end")
    return "\n".join(lines) + "\n"


def solve_lp(
    lp: LinearProgram,
    *,
    warm: WarmBasis | None = None,
    options: SimplexOptions | None = None,
) -> Solution:
    """Solve a continuous program; statuses optimal/infeasible/unbounded."""
    flip = -1.0 if lp.sense == "max" else 1.0
    res = solve_canonical(
        lp.matrix(),
        lp.row_senses,
        lp.rhs,
        flip * lp.obj,
        lp.col_lower,
        lp.col_upper,
        warm=warm,
        options=options,
    )
    if res.status == "optimal":
        obj = flip * res.obj
        return Solution(OPTIMAL, res.x, obj, obj, 0.0, 0, res.iterations, res.basis)
    if res.status == "unbounded":
        bad = flip * -np.inf
        return Solution(UNBOUNDED, res.x, bad, bad, np.inf, 0, res.iterations)
    return Solution(INFEASIBLE, res.x, np.nan, np.nan, np.inf, 0, res.iterations)


def _decode_binaries(model: MilpModel, x: np.ndarray) -> np.ndarray:
    """Integral values for every binary, inferred from the continuous part.

    Gadget binaries follow their decode rule (argmin for selectors, the
    inclusive threshold for capacity drops); binaries without metadata are
    rounded.  Returns an array aligned with ``model.binaries``.
    """
    fixed = {}
    for g in model.gadgets:
        if isinstance(g, MinGadget):
            fixed[g.z] = 1.0 if x[g.a] <= x[g.b] else 0.0
        elif isinstance(g, DropGadget):
            fixed[g.z] = 1.0 if x[g.x] <= g.x_crit + 1e-9 else 0.0
    out = np.empty(model.binaries.shape[0])
    for k, j in enumerate(model.binaries):
        out[k] = fixed.get(int(j), 1.0 if x[j] >= 0.5 else 0.0)
    return out


class _NodeLp:
    """Shared matrices for branch-and-bound node solves."""

    def __init__(self, model: MilpModel, options: SimplexOptions | None):
        lp = model.lp
        self.mat = lp.matrix()
        self.senses = lp.row_senses
        self.rhs = lp.rhs
        self.flip = -1.0 if lp.sense == "max" else 1.0
        self.c = self.flip * lp.obj
        self.lb0 = lp.col_lower
        self.ub0 = lp.col_upper
        self.options = options

    def solve(self, fixes: dict[int, float], warm: WarmBasis | None):
        lb = self.lb0
        ub = self.ub0
        if fixes:
            lb = lb.copy()
            ub = ub.copy()
            for j, v in fixes.items():
                lb[j] = v
                ub[j] = v
        return solve_canonical(
            self.mat,
            self.senses,
            self.rhs,
            self.c,
            lb,
            ub,
            warm=warm,
            options=self.options,
        )


def solve_milp(
    model: MilpModel,
    *,
    budget: MilpBudget | None = None,
    options: SimplexOptions | None = None,
    incumbent_hook=None,
    initial_candidates=None,
    root_warm: WarmBasis | None = None,
) -> Solution:
    """Branch and bound over the binary columns of ``model``.

    Exploration is best-bound with depth-first plunging: after branching,
    the child on the side the relaxation leans toward is solved immediately
    (warm-started from the parent basis); the sibling joins the pool keyed
    by its inherited bound.  Branching picks the most fractional binary,
    ties to the lowest column index, so repeated solves of identical data
    visit identical trees.

    Two incumbent sources run at every feasible node: a polish pass that
    snaps gadget binaries to the values implied by the continuous point and
    re-solves with them fixed, and an optional ``incumbent_hook(x)`` that
    may return a full feasible column vector (the controller plugs a
    dynamics-completion heuristic in here).  Hook candidates are verified
    against the model before being trusted.  ``initial_candidates`` are
    full assignments tried the same way before any node is solved, so a
    caller with a cheap feasible guess can seed the incumbent; the guess
    only tightens pruning and never changes the reported optimum.
    ``root_warm`` warm-starts the root relaxation (children always inherit
    their parent's basis regardless).

    Returns a :class:`Solution` whose ``bound`` is the proven bound in the
    model's own sense and whose ``gap`` is ``objective - bound`` for ``min``
    (mirrored for ``max``).
    """
    bud = budget or MilpBudget()
    node_lp = _NodeLp(model, options)
    flip = node_lp.flip
    nbin = model.binaries.shape[0]

    best_obj = np.inf  # internal (min) sense
    best_x: np.ndarray | None = None
    pruned_min = np.inf
    nodes = 0
    iters = 0
    seq = 0
    # pool entries: (inherited bound, insertion sequence, fixes, warm basis)
    pool: list[tuple[float, int, dict[int, float], WarmBasis | None]] = []
    budget_hit = False

    def gap_eff() -> float:
        if not np.isfinite(best_obj):
            return bud.gap_abs
        return max(bud.gap_abs, bud.gap_rel * abs(best_obj))

    def consider(x: np.ndarray, obj_internal: float) -> None:
        nonlocal best_obj, best_x
        if obj_internal < best_obj - 1e-12:
            best_obj = obj_internal
            best_x = x.copy()

    def try_candidates(x_node: np.ndarray, warm: WarmBasis | None) -> None:
        # polish: fix every binary at its decoded value and re-solve
        if nbin:
            zvals = _decode_binaries(model, x_node)
            fixes = {int(j): float(v) for j, v in zip(model.binaries, zvals)}
            res = node_lp.solve(fixes, warm)
            nonlocal iters
            iters += res.iterations
            if res.status == "optimal":
                consider(res.x, res.obj)
        if incumbent_hook is not None:
            cand = incumbent_hook(x_node)
            if cand is not None:
                cand = np.asarray(cand, dtype=float)
                if not check_solution(model, cand, tol=1e-7):
                    consider(cand, float(node_lp.c @ cand))

    for cand in initial_candidates or ():
        cand = np.asarray(cand, dtype=float)
        if not check_solution(model, cand, tol=1e-7):
            consider(cand, float(node_lp.c @ cand))

    if root_warm is None and best_x is not None:
        # The incumbent is a verified feasible point, so the basis that
        # reproduces it starts the root with phase 1 already satisfied.
        root_warm = crash_from_point(
            node_lp.mat, node_lp.senses, node_lp.rhs,
            node_lp.lb0, node_lp.ub0, best_x,
        )
    heapq.heappush(pool, (-np.inf, seq, {}, root_warm))

    while pool:
        if nodes >= bud.max_nodes:
            budget_hit = True
            break
        inherited, _, fixes, warm = heapq.heappop(pool)
        if inherited >= best_obj - gap_eff():
            pruned_min = min(pruned_min, inherited)
            continue
        # depth-first plunge from this pool entry
        while True:
            if nodes >= bud.max_nodes:
                budget_hit = True
                break
            nodes += 1
            res = node_lp.solve(fixes, warm)
            iters += res.iterations
            if res.status == "infeasible":
                break
            if res.status == "unbounded":
                # the relaxation admits a ray; report it outright
                obj = flip * -np.inf
                return Solution(
                    UNBOUNDED, res.x, obj, obj, np.inf, nodes, iters
                )
            bound = res.obj
            if bound >= best_obj - gap_eff():
                pruned_min = min(pruned_min, bound)
                break
            xb = res.x[model.binaries] if nbin else np.empty(0)
            frac = np.minimum(xb, 1.0 - xb)
            live = np.flatnonzero(frac > _INT_TOL)
            if not live.shape[0]:
                consider(res.x, bound)
                break
            try_candidates(res.x, res.basis)
            if bound >= best_obj - gap_eff():
                pruned_min = min(pruned_min, bound)
                break
            pick = live[np.argmax(frac[live])]
            ties = live[frac[live] >= frac[pick] - 1e-12]
            pick = int(ties.min())
            j = int(model.binaries[pick])
            lean = 1.0 if res.x[j] >= 0.5 else 0.0
            far = dict(fixes)
            far[j] = 1.0 - lean
            seq += 1
            heapq.heappush(pool, (bound, seq, far, res.basis))
            fixes = dict(fixes)
            fixes[j] = lean
            warm = res.basis
        if budget_hit:
            break

    open_min = min((e[0] for e in pool), default=np.inf)
    proven = min(pruned_min, open_min, best_obj)
    if best_x is None:
        if budget_hit:
            return Solution(
                BUDGET_EXCEEDED,
                np.zeros(model.lp.n_cols),
                np.nan,
                flip * proven,
                np.inf,
                nodes,
                iters,
            )
        return Solution(
            INFEASIBLE, np.zeros(model.lp.n_cols), np.nan, np.nan, np.inf, nodes, iters
        )
    status = BUDGET_EXCEEDED if budget_hit else OPTIMAL
    gap = max(best_obj - proven, 0.0)
    return Solution(status, best_x, flip * best_obj, flip * proven, gap, nodes, iters)
