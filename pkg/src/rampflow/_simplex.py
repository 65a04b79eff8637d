"""Bounded-variable primal simplex over sparse equality systems.

This is the numerical engine behind :mod:`rampflow.milp`.  Problems arrive
as ``min c.x  s.t.  A x (<=,=,>=) b,  lb <= x <= ub`` with infinite bounds
allowed.  Rows are converted to equalities with one slack column each, and
the solver runs a two-phase revised simplex:

* phase 1 clones the column of every out-of-bound basic variable into an
  artificial column (sign-adjusted so the artificial starts feasible at the
  violation magnitude), demotes the original to its nearest bound, and
  minimises the sum of artificials;
* phase 2 locks artificials to zero and minimises the real objective.

Cloning rather than inserting unit columns means the scheme also repairs a
warm basis whose bounds changed since it was exported, which is what branch
and bound replays at every node.

Two factorization backends sit behind one interface: an explicit dense
inverse for small bases and SuperLU plus product-form eta updates for large
ones.  Pricing is Dantzig's rule with lowest-index tie-breaking; a streak of
degenerate pivots switches the phase to Bland's rule, which guarantees
termination.  All choices are index-deterministic so repeated solves of the
same data produce identical pivot sequences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import maximum_bipartite_matching
from scipy.sparse.linalg import splu

AT_LOWER = 0
AT_UPPER = 1
BASIC = 2
FREE_ZERO = 3

_TIE = 1e-12


class NumericalBreakdown(RuntimeError):
    """Raised when the factorization cannot be kept trustworthy.

    Carries a short condition report so callers can surface what went
    wrong (a vanishing pivot that survives refactorization, a phase-1 ray,
    or an iteration budget blowout, which no Bland-guarded run should hit).
    """


@dataclass(frozen=True)
class SimplexOptions:
    tol_feas: float = 1e-9
    tol_opt: float = 1e-9
    tol_pivot: float = 1e-10
    max_iter: int = 0  # 0 means "derive from problem size"
    degen_limit: int = 60
    refactor_every: int = 64
    dense_limit: int = 300  # explicit-inverse backend for m <= this


@dataclass
class WarmBasis:
    """Opaque restart token: variable statuses plus the basic-variable list.

    Covers structural and slack columns only; artificials never escape a
    solve.  Stale tokens are tolerated (the solver falls back to a fresh
    crash basis), so callers may replay a token against a problem whose
    bounds have changed, which is exactly what branch and bound does.
    """

    vstat: np.ndarray
    basis: np.ndarray


@dataclass
class CanonicalResult:
    status: str  # "optimal" | "infeasible" | "unbounded"
    x: np.ndarray  # structural values (n,)
    obj: float
    y: np.ndarray | None  # row duals at termination (optimal only)
    basis: WarmBasis | None
    iterations: int


class _SingularBasis(Exception):
    pass


class _DenseBasis:
    """Explicit inverse, updated by elementary row operations."""

    def __init__(self, cols: sp.csc_matrix):
        dense = cols.toarray()
        try:
            self.inv = np.linalg.inv(dense)
        except np.linalg.LinAlgError as exc:
            raise _SingularBasis() from exc
        if not np.all(np.isfinite(self.inv)):
            raise _SingularBasis()

    def ftran(self, v: np.ndarray) -> np.ndarray:
        return self.inv @ v

    def btran(self, v: np.ndarray) -> np.ndarray:
        return self.inv.T @ v

    def update(self, r: int, w: np.ndarray) -> None:
        g = w / w[r]
        g[r] = 1.0 - 1.0 / w[r]
        self.inv -= np.outer(g, self.inv[r])


class _SparseBasis:
    """SuperLU factors plus a product-form eta file."""

    def __init__(self, cols: sp.csc_matrix):
        try:
            self.lu = splu(cols.tocsc())
        except RuntimeError as exc:  # SuperLU signals singularity this way
            raise _SingularBasis() from exc
        self.etas: list[tuple[int, np.ndarray]] = []

    def ftran(self, v: np.ndarray) -> np.ndarray:
        u = self.lu.solve(v)
        for r, g in self.etas:
            u = u - g * u[r]
        return u

    def btran(self, v: np.ndarray) -> np.ndarray:
        u = np.array(v, dtype=float)
        for r, g in reversed(self.etas):
            u[r] -= g @ u
        return self.lu.solve(u, trans="T")

    def update(self, r: int, w: np.ndarray) -> None:
        g = w / w[r]
        g[r] = 1.0 - 1.0 / w[r]
        self.etas.append((r, g))


def _slack_bounds(senses: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lo = np.where(senses == "G", -np.inf, 0.0)
    hi = np.where(senses == "L", np.inf, 0.0)
    return lo, hi


class _Worker:
    """One solve: owns the augmented column matrix and the pivot loop."""

    def __init__(
        self,
        a: sp.csc_matrix,
        senses: np.ndarray,
        b: np.ndarray,
        c: np.ndarray,
        lb: np.ndarray,
        ub: np.ndarray,
        warm: WarmBasis | None,
        opt: SimplexOptions,
    ):
        m, n = a.shape
        self.m, self.n = m, n
        slack_lo, slack_hi = _slack_bounds(senses)
        self.cols = sp.hstack([a, sp.identity(m, format="csc")], format="csc")
        self.lb = np.concatenate([lb, slack_lo])
        self.ub = np.concatenate([ub, slack_hi])
        self.c = np.concatenate([c, np.zeros(m)])
        self.b = np.asarray(b, dtype=float)
        self.opt = opt
        self.iterations = 0
        self.max_iter = opt.max_iter or (20000 + 10 * (m + n))
        self.n_art = 0
        self._install_start(warm)

    # -- start basis -----------------------------------------------------

    def _install_start(self, warm: WarmBasis | None) -> None:
        ntot = self.n + self.m
        if warm is not None and self._try_warm(warm):
            return
        vstat = np.where(
            np.isfinite(self.lb[: self.n]),
            AT_LOWER,
            np.where(np.isfinite(self.ub[: self.n]), AT_UPPER, FREE_ZERO),
        ).astype(np.int8)
        self.vstat = np.concatenate([vstat, np.full(self.m, BASIC, dtype=np.int8)])
        self.basis = np.arange(self.n, ntot, dtype=np.int64)
        self._factor()

    def _try_warm(self, warm: WarmBasis) -> bool:
        ntot = self.n + self.m
        vstat = np.asarray(warm.vstat, dtype=np.int8)
        basis = np.asarray(warm.basis, dtype=np.int64)
        if vstat.shape != (ntot,) or basis.shape != (self.m,):
            return False
        if np.any(basis < 0) or np.any(basis >= ntot):
            return False
        if np.unique(basis).shape[0] != self.m:
            return False
        if np.count_nonzero(vstat == BASIC) != self.m or np.any(vstat[basis] != BASIC):
            return False
        self.vstat = vstat.copy()
        self.basis = basis.copy()
        # Nonbasics parked on a bound that no longer exists move to a valid
        # spot (a branched binary may have had a finite bound replaced).
        nb_lo = (self.vstat == AT_LOWER) & ~np.isfinite(self.lb)
        nb_hi = (self.vstat == AT_UPPER) & ~np.isfinite(self.ub)
        self.vstat[nb_lo] = np.where(
            np.isfinite(self.ub[nb_lo]), AT_UPPER, FREE_ZERO
        ).astype(np.int8)
        self.vstat[nb_hi] = np.where(
            np.isfinite(self.lb[nb_hi]), AT_LOWER, FREE_ZERO
        ).astype(np.int8)
        try:
            self._factor()
        except _SingularBasis:
            return False
        return True

    def _factor(self) -> None:
        cols = self.cols[:, self.basis]
        backend = _DenseBasis if self.m <= self.opt.dense_limit else _SparseBasis
        self.backend = backend(cols)
        self.updates_since_factor = 0
        self._recompute_xb()

    def _nonbasic_values(self) -> np.ndarray:
        vals = np.where(
            self.vstat == AT_LOWER,
            self.lb,
            np.where(self.vstat == AT_UPPER, self.ub, 0.0),
        )
        vals[self.vstat == BASIC] = 0.0
        return vals

    def _recompute_xb(self) -> None:
        xn = self._nonbasic_values()
        rhs = self.b - self.cols @ xn
        self.xb = self.backend.ftran(rhs)

    def _values(self) -> np.ndarray:
        vals = self._nonbasic_values()
        vals[self.basis] = self.xb
        return vals

    # -- phase 1 artificials ----------------------------------------------

    def _add_artificials(self) -> None:
        """Clone every out-of-bound basic column into a feasible artificial."""
        tol = self.opt.tol_feas
        lo_v = self.lb[self.basis] - self.xb
        hi_v = self.xb - self.ub[self.basis]
        viol_pos = np.flatnonzero((lo_v > tol) | (hi_v > tol))
        self.n_art = viol_pos.shape[0]
        if not self.n_art:
            return
        art_cols = []
        art_vals = np.empty(self.n_art)
        for k, i in enumerate(viol_pos):
            j = self.basis[i]
            v = self.xb[i]
            if v < self.lb[j]:
                bound, sign = self.lb[j], -1.0
                self.vstat[j] = AT_LOWER
            else:
                bound, sign = self.ub[j], 1.0
                self.vstat[j] = AT_UPPER
            art_cols.append(self.cols[:, [j]] * sign)
            art_vals[k] = sign * (v - bound)
        base = self.cols.shape[1]
        self.cols = sp.hstack([self.cols] + art_cols, format="csc")
        self.lb = np.concatenate([self.lb, np.zeros(self.n_art)])
        self.ub = np.concatenate([self.ub, np.full(self.n_art, np.inf)])
        self.c = np.concatenate([self.c, np.zeros(self.n_art)])
        self.vstat = np.concatenate(
            [self.vstat, np.full(self.n_art, BASIC, dtype=np.int8)]
        )
        self.basis[viol_pos] = base + np.arange(self.n_art)
        self.xb[viol_pos] = art_vals
        self._factor()

    # -- pivot loop --------------------------------------------------------

    def _price(self, d: np.ndarray, bland: bool) -> int:
        tol = self.opt.tol_opt
        score = np.where(
            self.vstat == AT_LOWER,
            -d,
            np.where(self.vstat == AT_UPPER, d, np.abs(d)),
        )
        blocked = (self.vstat == BASIC) | (self.lb == self.ub)
        score[blocked] = -np.inf
        if bland:
            cand = np.flatnonzero(score > tol)
            return int(cand[0]) if cand.shape[0] else -1
        j = int(np.argmax(score))
        return j if score[j] > tol else -1

    def _ratio_test(
        self, enter: int, sigma: float, w: np.ndarray, *, bland: bool = False
    ) -> tuple[float, int, bool] | None:
        """Return (step, leaving position or -1 for a bound flip, hit-upper?).

        ``None`` means the improving direction is a feasible ray.  Ties
        between blocking rows go to the largest pivot magnitude (the eta
        update divides by it, so a near-zero choice poisons every later
        ftran); under Bland's rule they go to the lowest basic index,
        which the anti-cycling argument needs.
        """
        limit = self.ub[enter] - self.lb[enter]  # inf for free/one-sided vars
        rate = -sigma * w
        rate[np.abs(w) <= self.opt.tol_pivot] = 0.0
        bvars = self.basis
        rooms = np.full(self.m, np.inf)
        up = rate > 0
        dn = rate < 0
        with np.errstate(invalid="ignore"):
            rooms[up] = (self.ub[bvars[up]] - self.xb[up]) / rate[up]
            rooms[dn] = (self.xb[dn] - self.lb[bvars[dn]]) / (-rate[dn])
        np.clip(rooms, 0.0, None, out=rooms)
        best_basic = rooms.min(initial=np.inf)
        if np.isfinite(limit) and limit <= best_basic + _TIE:
            return limit, -1, False
        if not np.isfinite(best_basic):
            return None
        cand = np.flatnonzero(rooms <= best_basic + _TIE)
        if bland:
            pick = cand[np.argmin(bvars[cand])]
        else:
            pick = cand[np.argmax(np.abs(w[cand]))]
        return best_basic, int(pick), bool(up[pick])

    def _pivot(
        self,
        enter: int,
        sigma: float,
        w: np.ndarray,
        step: float,
        leave_pos: int,
        hit_upper: bool,
    ) -> None:
        if abs(w[leave_pos]) <= self.opt.tol_pivot:
            self._factor()
            w = self.backend.ftran(self.cols[:, [enter]].toarray().ravel())
            if abs(w[leave_pos]) <= self.opt.tol_pivot:
                raise NumericalBreakdown(
                    f"pivot element {w[leave_pos]:.3e} below tolerance after "
                    f"refactorization (entering column {enter}, row {leave_pos})"
                )
        leaving = self.basis[leave_pos]
        enter_val = self._entering_origin(enter) + sigma * step
        self.xb -= sigma * step * w
        self.vstat[leaving] = AT_UPPER if hit_upper else AT_LOWER
        self.basis[leave_pos] = enter
        self.vstat[enter] = BASIC
        self.xb[leave_pos] = enter_val
        self.backend.update(leave_pos, w)
        self.updates_since_factor += 1

    def _entering_origin(self, j: int) -> float:
        s = self.vstat[j]
        if s == AT_LOWER:
            return self.lb[j]
        if s == AT_UPPER:
            return self.ub[j]
        return 0.0

    def _run_phase(self, cost: np.ndarray, *, phase1: bool) -> str:
        opt = self.opt
        bland = False
        degen_streak = 0
        while True:
            if self.iterations >= self.max_iter:
                raise NumericalBreakdown(
                    f"simplex iteration budget exhausted after "
                    f"{self.iterations} pivots (m={self.m}, n={self.n})"
                )
            y = self.backend.btran(cost[self.basis])
            d = cost - self.cols.T @ y
            enter = self._price(d, bland)
            if enter < 0:
                return "optimal"
            if self.vstat[enter] == AT_UPPER or (
                self.vstat[enter] == FREE_ZERO and d[enter] > 0
            ):
                sigma = -1.0
            else:
                sigma = 1.0
            w = self.backend.ftran(self.cols[:, [enter]].toarray().ravel())
            hit = self._ratio_test(enter, sigma, w)
            if (
                hit is not None
                and hit[1] >= 0
                and self.updates_since_factor
                and abs(w[hit[1]]) < 1e-7 * (1.0 + float(np.abs(w).max()))
            ):
                # A marginal pivot seen through a stale factorization is how
                # an exactly dependent column sneaks into the basis; redo the
                # column and the ratio test against fresh factors.
                self._factor()
                w = self.backend.ftran(self.cols[:, [enter]].toarray().ravel())
                hit = self._ratio_test(enter, sigma, w)
            if hit is None:
                if phase1:
                    raise NumericalBreakdown(
                        "phase-1 objective fell without bound; "
                        "the basis is numerically inconsistent"
                    )
                return "unbounded"
            step, leave_pos, hit_upper = hit
            self.iterations += 1
            degen_streak = degen_streak + 1 if step <= opt.tol_pivot else 0
            if degen_streak > opt.degen_limit:
                bland = True
            if leave_pos < 0:
                self.xb -= sigma * step * w
                self.vstat[enter] = (
                    AT_UPPER if self.vstat[enter] == AT_LOWER else AT_LOWER
                )
                continue
            self._pivot(enter, sigma, w, step, leave_pos, hit_upper)
            if self.updates_since_factor >= opt.refactor_every:
                self._factor()

    # -- artificial drive-out ----------------------------------------------

    def _expel_artificials(self) -> None:
        """Pivot basic artificials (all at ~0) out where a real pivot exists.

        An artificial stuck in a row whose real entries all vanish marks a
        redundant row; it stays basic, pinned to zero by its locked bounds.
        """
        ntot_real = self.n + self.m
        for i in range(self.m):
            if self.basis[i] < ntot_real:
                continue
            e_i = np.zeros(self.m)
            e_i[i] = 1.0
            row = (self.backend.btran(e_i) @ self.cols[:, :ntot_real]).ravel()
            open_nb = (self.vstat[:ntot_real] != BASIC) & (
                np.abs(row) > 1e-7
            )
            cand = np.flatnonzero(open_nb)
            if not cand.shape[0]:
                continue
            j = int(cand[0])
            old = self.basis[i]
            self.basis[i] = j
            self.vstat[old] = AT_LOWER
            self.vstat[j] = BASIC
            try:
                self._factor()
            except _SingularBasis:
                self.basis[i] = old
                self.vstat[j] = (
                    AT_LOWER if np.isfinite(self.lb[j]) else FREE_ZERO
                )
                self.vstat[old] = BASIC
                self._factor()

    # -- public --------------------------------------------------------------

    def solve(self) -> CanonicalResult:
        self._add_artificials()
        if self.n_art:
            cost1 = np.zeros(self.cols.shape[1])
            cost1[self.n + self.m :] = 1.0
            self._run_phase(cost1, phase1=True)
            art_sum = float(np.sum(np.abs(self._values()[self.n + self.m :])))
            if art_sum > self.opt.tol_feas * (1.0 + float(np.abs(self.b).sum())):
                return CanonicalResult(
                    "infeasible",
                    self._values()[: self.n],
                    np.nan,
                    None,
                    None,
                    self.iterations,
                )
            self.lb[self.n + self.m :] = 0.0
            self.ub[self.n + self.m :] = 0.0
            self._expel_artificials()
        cost2 = self.c.copy()
        status = self._run_phase(cost2, phase1=False)
        if status == "unbounded":
            return CanonicalResult(
                "unbounded",
                self._values()[: self.n],
                -np.inf,
                None,
                None,
                self.iterations,
            )
        self._factor()  # clean recompute before extraction
        y = self.backend.btran(cost2[self.basis])
        values = self._values()
        x = values[: self.n]
        obj = float(self.c[: self.n] @ x)
        return CanonicalResult(
            "optimal", x, obj, np.asarray(y), self._export_basis(), self.iterations
        )

    def _export_basis(self) -> WarmBasis | None:
        ntot = self.n + self.m
        if np.any(self.basis >= ntot):
            return None  # a redundant-row artificial is still basic
        return WarmBasis(self.vstat[:ntot].copy(), self.basis.copy())


def solve_canonical(
    a: sp.spmatrix,
    senses,
    b,
    c,
    lb,
    ub,
    *,
    warm: WarmBasis | None = None,
    options: SimplexOptions | None = None,
) -> CanonicalResult:
    """Solve ``min c.x  s.t.  A x (senses) b,  lb <= x <= ub``.

    ``senses`` is a length-m sequence over {"L", "E", "G"}.  Infinite bounds
    are allowed; equal bounds fix a variable.  ``warm`` replays a basis from
    an earlier solve of a same-shape problem (stale tokens fall back to a
    cold start).  Statuses: "optimal", "infeasible", "unbounded".
    """
    opt = options or SimplexOptions()
    a = sp.csc_matrix(a)
    senses = np.asarray(list(senses), dtype="U1")
    if senses.shape[0] and not set(senses) <= set("LEG"):
        raise ValueError("row senses must come from {'L', 'E', 'G'}")
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    lb = np.asarray(lb, dtype=float)
    ub = np.asarray(ub, dtype=float)
    m, n = a.shape
    if senses.shape != (m,) or b.shape != (m,):
        raise ValueError("row data does not match the matrix")
    if c.shape != (n,) or lb.shape != (n,) or ub.shape != (n,):
        raise ValueError("column data does not match the matrix")
    if not np.all(np.isfinite(b)):
        raise ValueError("right-hand sides must be finite")
    if np.any(lb > ub + 1e-12):
        return CanonicalResult("infeasible", np.zeros(n), np.nan, None, None, 0)
    lb = np.minimum(lb, ub)
    # A basis can still factor exactly singular after heavy eta traffic;
    # restarting cold with stricter pivoting takes a different (still
    # deterministic) path that avoids the dependent column.
    spent = 0
    for tol_piv, refac, start in (
        (opt.tol_pivot, opt.refactor_every, warm),
        (1e-8, 32, None),
        (3e-7, 16, None),
    ):
        retry = SimplexOptions(
            tol_feas=opt.tol_feas,
            tol_opt=opt.tol_opt,
            tol_pivot=tol_piv,
            max_iter=opt.max_iter,
            degen_limit=opt.degen_limit,
            refactor_every=refac,
            dense_limit=opt.dense_limit,
        )
        worker = _Worker(a, senses, b, c, lb, ub, start, retry)
        try:
            result = worker.solve()
        except _SingularBasis:
            spent += worker.iterations
            continue
        if spent:
            result = CanonicalResult(
                result.status, result.x, result.obj, result.y,
                result.basis, result.iterations + spent,
            )
        return result
    raise NumericalBreakdown(
        "the basis kept factoring exactly singular across pivot-tolerance "
        "escalations"
    )


def crash_from_point(
    a: sp.spmatrix,
    senses,
    b,
    lb,
    ub,
    x0,
    *,
    tol: float = 1e-7,
) -> WarmBasis | None:
    """Starting basis whose basic solution reproduces a feasible point.

    For ``x0`` to be a basic solution, every column sitting strictly
    between its bounds must be basic, carried by a row that ``x0``
    satisfies with equality; rows not claimed by a column keep their
    slacks basic.  Columns are paired to tight rows by a maximum
    bipartite matching over the structural nonzeros, so the cover is as
    complete as the sparsity pattern allows.  A complete cover makes the
    basic solution equal ``x0`` exactly and phase 1 starts satisfied.

    The matching is structural, so the basis can in principle still
    factor singular (numeric cancellation) and a stranded column (more
    interior values than tight rows can carry) is parked at its nearest
    bound; both cases degrade to a short phase 1 or to the caller's cold
    start rather than to an error.  Returns ``None`` only when the point
    needs no basic structurals at all, where the default start is
    already equivalent.
    """
    a = sp.csc_matrix(a)
    m, n = a.shape
    senses = np.asarray(list(senses), dtype="U1")
    b = np.asarray(b, dtype=float)
    lb = np.asarray(lb, dtype=float)
    ub = np.asarray(ub, dtype=float)
    x0 = np.asarray(x0, dtype=float)

    r = a @ x0
    tight = np.abs(b - r) <= tol * (1.0 + np.abs(b))
    tight |= senses == "E"

    at_lo = x0 - lb <= tol * (1.0 + np.abs(lb))
    at_hi = ub - x0 <= tol * (1.0 + np.abs(ub))
    free0 = ~np.isfinite(lb) & ~np.isfinite(ub) & (np.abs(x0) <= tol)
    need = ~(at_lo | at_hi | free0)
    if not need.any():
        return None

    tight_rows = np.flatnonzero(tight)
    need_cols = np.flatnonzero(need)
    kept = sp.csc_matrix(
        (np.abs(a.data) > 1e-9, a.indices, a.indptr), shape=a.shape
    )
    sub = sp.csr_matrix(kept[tight_rows][:, need_cols])
    pair = maximum_bipartite_matching(sub, perm_type="row")
    matched_col = np.full(m, -1, dtype=np.int64)
    matched = np.zeros(n, dtype=bool)
    hitj = pair >= 0
    matched[need_cols[hitj]] = True
    matched_col[tight_rows[pair[hitj]]] = need_cols[hitj]

    vstat = np.empty(n + m, dtype=np.int8)
    vstat[:n] = np.where(
        matched,
        BASIC,
        np.where(at_lo, AT_LOWER, np.where(at_hi, AT_UPPER, FREE_ZERO)),
    )
    # Stranded interior columns park at the nearest finite bound.
    stranded = need & ~matched
    park_hi = stranded & (
        ~np.isfinite(lb) | (np.isfinite(ub) & (ub - x0 < x0 - lb))
    )
    vstat[:n][stranded] = np.where(
        np.isfinite(np.where(park_hi, ub, lb))[stranded],
        np.where(park_hi, AT_UPPER, AT_LOWER)[stranded],
        FREE_ZERO,
    )
    slack_stat = np.where(senses == "G", AT_UPPER, AT_LOWER).astype(np.int8)
    basis = np.arange(n, n + m, dtype=np.int64)
    hit = matched_col >= 0
    basis[hit] = matched_col[hit]
    vstat[n:] = np.where(hit, slack_stat, BASIC)
    return WarmBasis(vstat, basis)
