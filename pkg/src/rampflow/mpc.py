"""Tube-based predictive metering over the freeway's interval model.

The controller plans against the two-sided tube dynamics: a horizon-long
trajectory of upper and lower state components, driven by one shared
metering sequence. Every piecewise-linear flow term (sending flow with its
capacity switch, receiving flow) is encoded exactly with the gadget
library from :mod:`rampflow.milp`, so the optimal plan is found by branch
and bound rather than by approximation.

Layout of one horizon step, per tube component: auxiliary columns carry
the speed-line flows v*x, the switched flow ceilings, the receiving-flow
affine expressions, and the chained minima that combine them; equality
rows tie states across stages. The state boxes [0, x_jam] x [0, inf) are
column bounds, which is also what forces the planned ramp discharge to
equal the command (queues stay nonnegative only when u never exceeds
queue plus arrivals, and merges fit only below jam occupancy).

Before any row is written, forward interval propagation bounds every
column from the initial box and the control limits. That serves three
purposes: the big-M constants come out near-minimal, gadgets whose branch
is already decided get their binaries fixed (the whole first stage always
is, because the initial corners are known numbers), and one-step problems
collapse to plain linear programs.

A dynamics-completion heuristic turns fractional relaxation points into
feasible plans: take the relaxed metering sequence, clip it to what the
queues can serve, roll the tube forward, and re-encode. It runs both as
an incumbent hook inside branch and bound and up front on two cheap
seeds (track the arrivals; meter nothing).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import milp
from .ctm import FreewayParams, equilibrium_uncongested
from .embedding import (
    DemandBounds,
    LiftedState,
    ParamBounds,
    lifted_step,
)

COST_LINEAR = "linear"
COST_INDICATOR = "indicator"
FALLBACK_ERROR = "error"
FALLBACK_ZERO = "zero-control"

_BOUND_TOL = 1e-9


class InfeasibleProblem(RuntimeError):
    """The horizon problem admits no plan and the config said to raise."""


class SolveBudgetExceeded(RuntimeError):
    """Branch and bound hit its node budget before proving optimality."""

    def __init__(self, message: str, solution: milp.Solution):
        super().__init__(message)
        self.solution = solution


@dataclass(frozen=True)
class MpcConfig:
    """Horizon, cost weights and failure policy for the planner.

    l and b stack mainline weights first and ramp-queue weights second
    (2I entries each); only the upper tube component is costed. In
    ``linear`` mode the objective is sum of l*x(k) for k < T plus b*x(T);
    in ``indicator`` mode each stage pays l*x(k) only while the lifted
    state sits outside the terminal box, and the terminal cost is zero.
    """

    horizon: int
    l: np.ndarray
    b: np.ndarray
    cost_mode: str = COST_LINEAR
    fallback: str = FALLBACK_ERROR

    def __post_init__(self):
        t = int(self.horizon)
        if t != self.horizon or t < 1:
            raise ValueError("horizon must be an integer >= 1")
        object.__setattr__(self, "horizon", t)
        l = np.asarray(self.l, dtype=float)
        b = np.asarray(self.b, dtype=float)
        if l.ndim != 1 or l.shape != b.shape or l.shape[0] % 2:
            raise ValueError("l and b must be equal-length stacked vectors")
        if not np.all(l > 0.0):
            raise ValueError("running-cost weights must be positive")
        if not np.all(b >= 0.0) or not np.all(np.isfinite(b)):
            raise ValueError("terminal weights must be finite and nonnegative")
        object.__setattr__(self, "l", l)
        object.__setattr__(self, "b", b)
        if self.cost_mode not in (COST_LINEAR, COST_INDICATOR):
            raise ValueError(f"unknown cost mode {self.cost_mode!r}")
        if self.fallback not in (FALLBACK_ERROR, FALLBACK_ZERO):
            raise ValueError(f"unknown fallback {self.fallback!r}")


@dataclass(frozen=True)
class TerminalSet:
    """Box the horizon must end inside, applied to both tube components.

    x_f stacks mainline caps first, queue caps second. Infinite entries
    leave that coordinate unconstrained (customary on the queues when the
    operator only insists on an uncongested mainline).
    """

    x_f: np.ndarray

    def __post_init__(self):
        xf = np.asarray(self.x_f, dtype=float)
        if xf.ndim != 1 or xf.shape[0] % 2:
            raise ValueError("terminal bound must be a stacked vector")
        if np.any(np.isnan(xf)) or np.any(xf < 0.0):
            raise ValueError("terminal bound must be nonnegative")
        object.__setattr__(self, "x_f", xf)

    @property
    def n_cells(self) -> int:
        return self.x_f.shape[0] // 2

    @classmethod
    def mainline_only(cls, x_up: np.ndarray) -> "TerminalSet":
        """Cap the mainline at x_up and leave the queues unconstrained."""
        x_up = np.asarray(x_up, dtype=float)
        return cls(np.concatenate([x_up, np.full(x_up.shape[0], np.inf)]))

    @classmethod
    def drained(cls, x_up: np.ndarray) -> "TerminalSet":
        """Cap the mainline at x_up and require empty queues."""
        x_up = np.asarray(x_up, dtype=float)
        return cls(np.concatenate([x_up, np.zeros(x_up.shape[0])]))


@dataclass(frozen=True)
class CostSpec:
    """Weights consumed by the terminal certificate and the analysis code.

    l is the full stacked running cost; the terminal weight is split into
    its mainline part b_main and queue part b_ramp; d prices the demand
    slack on the right-hand side of the decrease inequality.
    """

    l: np.ndarray
    b_main: np.ndarray
    b_ramp: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        l = np.asarray(self.l, dtype=float)
        bm = np.asarray(self.b_main, dtype=float)
        br = np.asarray(self.b_ramp, dtype=float)
        d = np.asarray(self.d, dtype=float)
        n = bm.shape[0]
        if br.shape[0] != n or d.shape[0] != n or l.shape[0] != 2 * n:
            raise ValueError("weight lengths disagree")
        if np.any(d < 0.0):
            raise ValueError("demand slack weights must be nonnegative")
        for name, arr in (("l", l), ("b_main", bm), ("b_ramp", br), ("d", d)):
            object.__setattr__(self, name, arr)

    @property
    def b(self) -> np.ndarray:
        return np.concatenate([self.b_main, self.b_ramp])


@dataclass
class MpcResult:
    """First planned control plus the value and diagnostics of the solve."""

    u: np.ndarray
    value: float
    status: str
    feasible: bool
    controls: np.ndarray | None
    upper: np.ndarray | None
    lower: np.ndarray | None
    reduced: bool
    solution: milp.Solution | None


@dataclass
class TerminalCheckReport:
    """Worst-case audit of the terminal box certificate."""

    worst_residual: float
    worst_exit: float
    samples: int
    passed: bool
    worst_state: np.ndarray | None


def compute_xup(lam: np.ndarray, params: FreewayParams) -> np.ndarray:
    """Largest uniformly drainable mainline profile for constant demand lam.

    Backward recursion from the last cell: each cap is the critical
    occupancy unless the cell downstream cannot absorb the implied extra
    flow, in which case the slack that remains downstream is pulled back
    through the split ratio. The result always dominates the uncongested
    equilibrium occupancy.
    """
    lam = np.asarray(lam, dtype=float)
    x_unc = equilibrium_uncongested(params, lam)
    crit = params.x_crit
    v = params.v
    beta = params.beta
    x_up = np.empty_like(x_unc)
    x_up[-1] = crit[-1]
    for i in range(params.n_cells - 2, -1, -1):
        pull = x_unc[i] + (x_up[i + 1] - x_unc[i + 1]) * v[i + 1] / (beta[i] * v[i])
        x_up[i] = min(crit[i], pull)
    return x_up


def choose_terminal_weights(
    l: np.ndarray, params: FreewayParams
) -> tuple[np.ndarray, np.ndarray]:
    """Minimal mainline terminal weights certifying the cost decrease.

    Inside the terminal box with metering equal to arrivals, holding one
    extra vehicle in cell i costs l_i / v_i per residence step and then
    beta_i times the same accounting one cell downstream, so the minimal
    weights satisfy v_i * (b_i - beta_i * b_{i+1}) = l_i, solved backward
    from b_I = l_I / v_I. The demand slack weight d equals b, which makes
    the arrival terms on both sides of the decrease inequality cancel.

    Accepts either the mainline running costs (length I) or the full
    stacked vector (length 2I, mainline entries used).
    """
    l = np.asarray(l, dtype=float)
    n = params.n_cells
    if l.shape[0] == 2 * n:
        l = l[:n]
    elif l.shape[0] != n:
        raise ValueError(f"expected {n} or {2 * n} cost entries, got {l.shape[0]}")
    if np.any(l <= 0.0):
        raise ValueError("running-cost weights must be positive")
    b = np.empty(n)
    b[-1] = l[-1] / params.v[-1]
    for i in range(n - 2, -1, -1):
        b[i] = l[i] / params.v[i] + params.beta[i] * b[i + 1]
    return b, b.copy()


def horizon_lower_bound(
    xhat: LiftedState,
    demand_bounds: DemandBounds,
    param_bounds: ParamBounds,
    terminal: TerminalSet,
) -> float:
    """Steps provably needed before the terminal box can be reached.

    Counts vehicles that must leave under the most optimistic rates: the
    mainline can shed at most the last cell's capacity plus every
    off-ramp split share per step, and each queue with a finite terminal
    cap drains at most u_max minus its arrivals per step. Returns a
    plain lower bound (possibly ``inf`` when a queue cannot drain at
    all); feasible horizons may well need to be longer.
    """
    p_up, p_lo = param_bounds.upper, param_bounds.lower
    n = p_up.n_cells
    xf = terminal.x_f
    x0 = np.asarray(xhat.lower, dtype=float)
    lam_lo = np.asarray(demand_bounds.lower, dtype=float)
    c_hi = np.maximum(p_up.c_max, p_lo.c_max)
    u_hi = np.maximum(p_up.u_max, p_lo.u_max)
    beta_lo = np.minimum(p_up.beta, p_lo.beta)
    need = 1.0

    cap_m = np.minimum(np.maximum(p_up.x_jam, p_lo.x_jam), xf[:n])
    surplus = float(np.sum(x0[:n]) - np.sum(cap_m))
    if surplus > 0.0:
        rate = float(c_hi[-1] + np.sum((1.0 - beta_lo) * c_hi[:-1]))
        need = max(need, math.ceil(surplus / rate))

    for j in range(n):
        if not np.isfinite(xf[n + j]):
            continue
        backlog = x0[n + j] - xf[n + j]
        if backlog <= 0.0:
            continue
        slack = u_hi[j] - lam_lo[j]
        if slack <= 0.0:
            return math.inf
        need = max(need, math.ceil(backlog / slack))
    return float(need)


def _finite_cap(bounds: ParamBounds) -> np.ndarray:
    return np.minimum(bounds.upper.x_jam, bounds.lower.x_jam)


def terminal_lyapunov_check(
    terminal: TerminalSet,
    cost_spec: CostSpec,
    demand_bounds: DemandBounds,
    param_bounds: ParamBounds,
    u_candidate: np.ndarray,
    samples: int,
    *,
    seed: int = 0,
    tol: float = 1e-9,
    queue_probe: float = 50.0,
) -> TerminalCheckReport:
    """Audit the terminal box: cost decrease and invariance under u_candidate.

    Samples lifted states inside the box (deterministic corners first,
    then uniform draws), rolls the tube one step, and records the worst
    value of b*F_up - b*x_up + l*x_up - d*lambda together with the worst
    excursion of the successor tube outside the box. The demand corner
    that maximises the residual is chosen per ramp (the dependence is
    affine), so point demand is audited exactly. Queue coordinates with
    an infinite cap are probed up to ``queue_probe``.
    """
    if samples < 1:
        raise ValueError("sample budget must be at least 1")
    n = param_bounds.upper.n_cells
    xf = terminal.x_f
    if xf.shape[0] != 2 * n:
        raise ValueError("terminal bound length disagrees with the parameters")
    u_candidate = np.asarray(u_candidate, dtype=float)
    jam = _finite_cap(param_bounds)
    cap = np.where(
        np.isfinite(xf),
        np.minimum(xf, np.concatenate([jam, np.full(n, np.inf)])),
        np.concatenate([jam, np.full(n, queue_probe)]),
    )

    lam_up = np.asarray(demand_bounds.upper, dtype=float)
    lam_lo = np.asarray(demand_bounds.lower, dtype=float)
    b = cost_spec.b
    l = cost_spec.l
    d = cost_spec.d
    # per ramp, the residual is affine in the arrival rate with slope
    # b_ramp - d, so the adverse corner is picked coordinatewise
    lam_adverse = np.where(cost_spec.b_ramp >= d, lam_up, lam_lo)
    adverse_box = DemandBounds(upper=lam_adverse, lower=lam_adverse)
    finite = np.isfinite(xf)

    probes: list[tuple[np.ndarray, np.ndarray]] = []
    zero = np.zeros(2 * n)
    probes.append((zero, zero))
    probes.append((cap.copy(), cap.copy()))
    probes.append((cap.copy(), zero))
    for j in range(2 * n):
        corner = np.zeros(2 * n)
        corner[j] = cap[j]
        probes.append((corner, corner.copy()))
        probes.append((corner, zero))
    rng = np.random.default_rng(seed)
    states: list[tuple[np.ndarray, np.ndarray]] = probes[:samples]
    while len(states) < samples:
        hi = rng.uniform(0.0, cap)
        lo = rng.uniform(0.0, hi)
        states.append((hi, lo))

    worst_res = -math.inf
    worst_exit = -math.inf
    worst_state = None
    for hi, lo in states:
        cell = LiftedState(upper=hi, lower=lo)
        stepped = lifted_step(cell, u_candidate, demand_bounds, param_bounds)
        res_step = lifted_step(cell, u_candidate, adverse_box, param_bounds)
        residual = float(
            b @ res_step.upper - b @ hi + l @ hi - d @ lam_adverse
        )
        exit_hi = np.max((stepped.upper - xf)[finite], initial=-math.inf)
        exit_lo = float(np.max(-stepped.lower, initial=-math.inf))
        excursion = max(float(exit_hi), exit_lo)
        if residual > worst_res or (residual == worst_res and excursion > worst_exit):
            worst_state = np.stack([hi, lo])
        worst_res = max(worst_res, residual)
        worst_exit = max(worst_exit, excursion)

    return TerminalCheckReport(
        worst_residual=worst_res,
        worst_exit=worst_exit,
        samples=len(states),
        passed=bool(worst_res <= tol and worst_exit <= tol),
        worst_state=worst_state,
    )


def model_census(
    n_cells: int,
    horizon: int,
    *,
    cost_mode: str = COST_LINEAR,
    terminal: TerminalSet | None = None,
    reduced: bool = False,
) -> dict[str, int]:
    """Closed-form size of the encoded model, for audits and tests.

    Column count splits into state variables (two components, both state
    halves, every stage), controls, and gadget auxiliaries (flow columns
    plus selector binaries). The reduced single-component encoding is the
    one the solver uses when the initial box, demand box and parameter
    box are all degenerate.
    """
    n, t = int(n_cells), int(horizon)
    ncomp = 1 if reduced else 2
    if reduced:
        aux_cont, aux_bin, rows = 5 * n - 2, 3 * n - 1, 15 * n - 5
    else:
        aux_cont, aux_bin, rows = 10 * n - 7, 6 * n - 4, 28 * n - 18
    states = ncomp * 2 * n * (t + 1)
    controls = n * t
    aux = ncomp * t * (aux_cont + aux_bin)
    binaries = ncomp * t * aux_bin
    total_rows = ncomp * t * rows
    if cost_mode == COST_INDICATOR:
        if terminal is None:
            raise ValueError("indicator census needs the terminal box")
        n_fin = int(np.count_nonzero(np.isfinite(terminal.x_f)))
        aux += 2 * t
        binaries += t
        total_rows += t * (ncomp * n_fin + 1)
    return {
        "columns": states + controls + aux,
        "rows": total_rows,
        "binaries": binaries,
        "states": states,
        "controls": controls,
        "auxiliaries": aux,
    }


@dataclass(frozen=True)
class _Comp:
    """One tube component: its raising and lowering parameter tuples."""

    tag: str
    prim: FreewayParams
    sec: FreewayParams
    lam: np.ndarray
    x0: np.ndarray


class _Ranges:
    """Interval bounds of one component's stage auxiliaries."""

    __slots__ = (
        "vxo", "xio", "do", "so", "fo", "vxu", "xiu", "du", "si", "fu",
        "thr_out", "thr_up",
    )

    def __init__(self, comp: _Comp, own, oth, jam, merge: bool):
        xlb, xub = own[0][: jam.shape[0]], own[1][: jam.shape[0]]
        zlb, zub = oth[0][: jam.shape[0]], oth[1][: jam.shape[0]]
        prim, sec = comp.prim, comp.sec
        self.thr_out = sec.c_max / prim.v
        self.vxo = (sec.v * xlb, sec.v * xub)
        drop_c = sec.alpha * sec.c_max
        self.xio = (
            np.where(xub > self.thr_out, drop_c, sec.c_max),
            np.where(xlb <= self.thr_out, sec.c_max, drop_c),
        )
        self.do = _own_demand_range(xlb, xub, sec.v, sec.c_max, sec.alpha,
                                    self.thr_out)
        coef = sec.w[1:] / prim.beta
        self.so = (coef * (jam[1:] - xub[1:]), coef * (jam[1:] - xlb[1:]))
        fo_lb = self.do[0].copy()
        fo_ub = self.do[1].copy()
        fo_lb[:-1] = np.minimum(fo_lb[:-1], self.so[0])
        fo_ub[:-1] = np.minimum(fo_ub[:-1], self.so[1])
        self.fo = (fo_lb, fo_ub)
        if merge:
            self.thr_up = prim.c_max[:-1] / sec.v[:-1]
            self.vxu = (prim.v[:-1] * xlb[:-1], prim.v[:-1] * xub[:-1])
            c_p = prim.c_max[:-1]
            drop_p = prim.alpha[:-1] * c_p
            self.xiu = (
                np.where(zub[:-1] > self.thr_up, drop_p, c_p),
                np.where(zlb[:-1] <= self.thr_up, c_p, drop_p),
            )
            self.du = (
                np.minimum(self.vxu[0], self.xiu[0]),
                np.minimum(self.vxu[1], self.xiu[1]),
            )
            coef_u = prim.w[1:] / prim.beta
            self.si = (coef_u * (jam[1:] - xub[1:]),
                       coef_u * (jam[1:] - xlb[1:]))
            self.fu = (
                np.minimum(self.du[0], self.si[0]),
                np.minimum(self.du[1], self.si[1]),
            )
        else:
            self.thr_up = None
            self.vxu = self.xiu = self.du = self.si = None
            self.fu = (fo_lb[:-1], fo_ub[:-1])


def _own_demand_range(xlb, xub, v, c, alpha, thr):
    """Exact range of min(v*x, switched ceiling) when x spans [xlb, xub]."""

    def val(x):
        return np.minimum(v * x, np.where(x <= thr, c, alpha * c))

    at_lb, at_ub = val(xlb), val(xub)
    at_thr = val(np.clip(thr, xlb, xub))
    ub = np.maximum(np.maximum(at_lb, at_ub), at_thr)
    lb = np.minimum(at_lb, at_ub)
    inside = (thr >= xlb) & (thr < xub)
    just_over = np.minimum(v * thr, alpha * c)
    lb = np.where(inside, np.minimum(lb, just_over), lb)
    return lb, ub


def _finalize(prop_lb, prop_ub, limit_ub):
    """Intersect propagated bounds with the constraint box, never emptying.

    The propagated interval is implied by the rows, so dropping it on a
    conflict only loosens the relaxation; the constraint side always
    stays, which is what lets an unreachable terminal surface as solver
    infeasibility instead of a build-time error.
    """
    lb = np.maximum(prop_lb, 0.0)
    ub = np.minimum(prop_ub, limit_ub)
    bad = lb > ub + 1e-12
    lb = np.where(bad, 0.0, lb)
    ub = np.where(bad, limit_ub, ub)
    return lb, ub


class _Problem:
    """Encoded horizon problem plus its column map and codec closures."""

    def __init__(self, model, layout, encode, decode, ucap):
        self.model = model
        self.layout = layout
        self.encode = encode
        self.decode = decode
        self.ucap = ucap


@dataclass
class _Layout:
    n_cells: int
    horizon: int
    reduced: bool
    cost_mode: str
    xm: tuple
    q: tuple
    u: np.ndarray
    vxo: tuple
    xio: tuple
    do: tuple
    so: tuple
    fo: tuple
    vxu: tuple
    xiu: tuple
    du: tuple
    si: tuple
    fu: tuple
    zo_drop: tuple
    zo_dmin: tuple
    zo_fmin: tuple
    zu_drop: tuple
    zu_dmin: tuple
    zu_fmin: tuple
    gate: np.ndarray | None
    stage_cost: np.ndarray | None


def _settle_min(builder: milp.ModelBuilder, z: int, a: int, b: int) -> None:
    if builder.upper[a] <= builder.lower[b]:
        builder.fix_variable(z, 1.0)
    elif builder.upper[b] < builder.lower[a]:
        builder.fix_variable(z, 0.0)


def _settle_drop(builder: milp.ModelBuilder, z: int, x: int, thr: float) -> None:
    if builder.upper[x] <= thr:
        builder.fix_variable(z, 1.0)
    elif builder.lower[x] > thr:
        builder.fix_variable(z, 0.0)


def _validate_inputs(xhat, demand, bounds, config, terminal, n):
    if config.l.shape[0] != 2 * n:
        raise ValueError("cost weight length disagrees with the cell count")
    if terminal.x_f.shape[0] != 2 * n:
        raise ValueError("terminal bound length disagrees with the cell count")
    up = np.asarray(xhat.upper, dtype=float)
    lo = np.asarray(xhat.lower, dtype=float)
    if up.shape != (2 * n,) or lo.shape != (2 * n,):
        raise ValueError("state box must be a stacked vector pair")
    if np.any(lo > up + _BOUND_TOL):
        raise ValueError("state box is inverted")
    if np.any(lo < -_BOUND_TOL):
        raise ValueError("state box dips below zero")
    jam = bounds.upper.x_jam
    if np.any(lo[:n] > jam + _BOUND_TOL):
        raise ValueError("state box lies above jam occupancy")
    lam_up = np.asarray(demand.upper, dtype=float)
    lam_lo = np.asarray(demand.lower, dtype=float)
    if lam_up.shape != (n,) or lam_lo.shape != (n,):
        raise ValueError("demand box must have one entry per ramp")
    if np.any(lam_lo < -_BOUND_TOL) or np.any(lam_lo > lam_up + _BOUND_TOL):
        raise ValueError("demand box is invalid")


def _assemble(xhat, demand, bounds, config, terminal, *, reduced):
    p_up, p_lo = bounds.upper, bounds.lower
    n = p_up.n_cells
    t = config.horizon
    if not bounds.jam_is_point:
        raise ValueError(
            "the prediction model needs one jam profile; collapse the "
            "parameter box onto its upper jam estimate before planning"
        )
    _validate_inputs(xhat, demand, bounds, config, terminal, n)
    if reduced and not (
        np.array_equal(np.asarray(xhat.upper), np.asarray(xhat.lower))
        and np.array_equal(np.asarray(demand.upper), np.asarray(demand.lower))
        and bounds.is_point
    ):
        raise ValueError("the single-component encoding needs point boxes")
    jam = p_up.x_jam
    box_ub = np.concatenate([jam, np.full(n, np.inf)])
    cap0 = np.concatenate([jam, np.full(n, np.inf)])
    x_hi = np.minimum(np.maximum(np.asarray(xhat.upper, float), 0.0), cap0)
    x_lo = np.minimum(np.maximum(np.asarray(xhat.lower, float), 0.0), cap0)
    x_lo = np.minimum(x_lo, x_hi)
    lam_up = np.asarray(demand.upper, dtype=float)
    lam_lo = np.maximum(np.asarray(demand.lower, dtype=float), 0.0)

    if reduced:
        comps = (_Comp("m", p_up, p_up, lam_up, x_hi),)
    else:
        comps = (
            _Comp("up", p_up, p_lo, lam_up, x_hi),
            _Comp("lo", p_lo, p_up, lam_lo, x_lo),
        )
    ncomp = len(comps)
    low_idx = ncomp - 1
    merge = not reduced
    u_hw = np.minimum(p_up.u_max, p_lo.u_max)

    # ---- forward interval propagation -------------------------------
    blb = [np.empty((t + 1, 2 * n)) for _ in comps]
    bub = [np.empty((t + 1, 2 * n)) for _ in comps]
    for c, comp in enumerate(comps):
        blb[c][0] = comp.x0
        bub[c][0] = comp.x0
    ucap = np.empty((t, n))
    limit_last = np.minimum(box_ub, terminal.x_f)

    def stage_ranges(k):
        out = []
        for c, comp in enumerate(comps):
            oth = (ncomp - 1) - c if merge else c
            out.append(
                _Ranges(
                    comp,
                    (blb[c][k], bub[c][k]),
                    (blb[oth][k], bub[oth][k]),
                    jam,
                    merge,
                )
            )
        return out

    for k in range(t):
        ucap[k] = np.minimum(u_hw, bub[low_idx][k][n:] + lam_lo)
        ranges = stage_ranges(k)
        limit = limit_last if k + 1 == t else box_ub
        for c, comp in enumerate(comps):
            r = ranges[c]
            beta = comp.prim.beta
            inc_lb = np.zeros(n)
            inc_ub = ucap[k].copy()
            inc_lb[1:] += beta * r.fu[0]
            inc_ub[1:] += beta * r.fu[1]
            m_lb = blb[c][k][:n] + inc_lb - r.fo[1]
            m_ub = bub[c][k][:n] + inc_ub - r.fo[0]
            q_lb = blb[c][k][n:] + comp.lam - ucap[k]
            q_ub = bub[c][k][n:] + comp.lam
            plb = np.concatenate([m_lb, q_lb])
            pub = np.concatenate([m_ub, q_ub])
            blb[c][k + 1], bub[c][k + 1] = _finalize(plb, pub, limit)

    # ---- columns and rows --------------------------------------------
    bld = milp.ModelBuilder(name=f"meter{t}", sense="min")
    is_linear = config.cost_mode == COST_LINEAR

    def state_obj(k, stacked_idx):
        if not is_linear:
            return 0.0
        if k < t:
            return float(config.l[stacked_idx])
        return float(config.b[stacked_idx])

    xm = tuple(np.empty((t + 1, n), dtype=np.int64) for _ in comps)
    qm = tuple(np.empty((t + 1, n), dtype=np.int64) for _ in comps)
    for k in range(t + 1):
        for c, comp in enumerate(comps):
            costed = c == 0
            for i in range(n):
                xm[c][k, i] = bld.add_variable(
                    f"x.{comp.tag}[{k}][{i}]",
                    lower=blb[c][k, i],
                    upper=bub[c][k, i],
                    objective=state_obj(k, i) if costed else 0.0,
                )
            for i in range(n):
                qm[c][k, i] = bld.add_variable(
                    f"q.{comp.tag}[{k}][{i}]",
                    lower=blb[c][k, n + i],
                    upper=bub[c][k, n + i],
                    objective=state_obj(k, n + i) if costed else 0.0,
                )
    u_ids = np.empty((t, n), dtype=np.int64)
    for k in range(t):
        for i in range(n):
            u_ids[k, i] = bld.add_variable(
                f"u[{k}][{i}]", lower=0.0, upper=ucap[k, i]
            )

    def blank(rows, cols):
        return tuple(np.empty((rows, cols), dtype=np.int64) for _ in comps)

    vxo, xio, do = blank(t, n), blank(t, n), blank(t, n)
    so = blank(t, n - 1)
    fo = blank(t, n)
    zo_drop, zo_dmin = blank(t, n), blank(t, n)
    zo_fmin = blank(t, n - 1)
    if merge:
        vxu, xiu, du = blank(t, n - 1), blank(t, n - 1), blank(t, n - 1)
        si, fu = blank(t, n - 1), blank(t, n - 1)
        zu_drop, zu_dmin, zu_fmin = (
            blank(t, n - 1), blank(t, n - 1), blank(t, n - 1),
        )
    else:
        vxu = xiu = du = si = zu_drop = zu_dmin = zu_fmin = blank(t, 0)
        fu = blank(t, n - 1)

    for k in range(t):
        ranges = stage_ranges(k)
        for c, comp in enumerate(comps):
            r = ranges[c]
            tag = comp.tag
            prim, sec = comp.prim, comp.sec
            xo_k = xm[c][k]
            xn_k = xm[c][k + 1]
            zo_k = xm[(ncomp - 1) - c][k] if merge else xo_k
            # sending flows out of every cell
            for i in range(n):
                vxo[c][k, i] = bld.add_variable(
                    f"vxo.{tag}[{k}][{i}]",
                    lower=r.vxo[0][i], upper=r.vxo[1][i],
                )
                bld.add_row(
                    {int(vxo[c][k, i]): 1.0, int(xo_k[i]): -sec.v[i]},
                    "E", 0.0, f"def.vxo.{tag}[{k}][{i}]",
                )
                xio[c][k, i] = bld.add_variable(
                    f"xio.{tag}[{k}][{i}]",
                    lower=r.xio[0][i], upper=r.xio[1][i],
                )
                zo_drop[c][k, i] = milp.encode_capacity_drop(
                    bld, int(xio[c][k, i]), int(xo_k[i]),
                    float(r.thr_out[i]), float(sec.c_max[i]),
                    float(sec.alpha[i]), float(jam[i]),
                    name=f"dropo.{tag}[{k}][{i}]",
                )
                _settle_drop(bld, int(zo_drop[c][k, i]), int(xo_k[i]),
                             float(r.thr_out[i]))
                do[c][k, i] = bld.add_variable(
                    f"do.{tag}[{k}][{i}]",
                    lower=r.do[0][i], upper=r.do[1][i],
                )
                zo_dmin[c][k, i] = milp.encode_min_equality(
                    bld, int(do[c][k, i]), int(vxo[c][k, i]),
                    int(xio[c][k, i]), name=f"dmin.{tag}[{k}][{i}]",
                )
                _settle_min(bld, int(zo_dmin[c][k, i]),
                            int(vxo[c][k, i]), int(xio[c][k, i]))
            for i in range(n - 1):
                so[c][k, i] = bld.add_variable(
                    f"so.{tag}[{k}][{i}]",
                    lower=r.so[0][i], upper=r.so[1][i],
                )
                coef = sec.w[i + 1] / prim.beta[i]
                bld.add_row(
                    {int(so[c][k, i]): 1.0, int(xo_k[i + 1]): coef},
                    "E", coef * jam[i + 1], f"def.so.{tag}[{k}][{i}]",
                )
                fo[c][k, i] = bld.add_variable(
                    f"fo.{tag}[{k}][{i}]",
                    lower=r.fo[0][i], upper=r.fo[1][i],
                )
                zo_fmin[c][k, i] = milp.encode_min_equality(
                    bld, int(fo[c][k, i]), int(do[c][k, i]),
                    int(so[c][k, i]), name=f"fmin.{tag}[{k}][{i}]",
                )
                _settle_min(bld, int(zo_fmin[c][k, i]),
                            int(do[c][k, i]), int(so[c][k, i]))
            fo[c][k, n - 1] = do[c][k, n - 1]
            # merge flows between consecutive cells
            if merge:
                for i in range(n - 1):
                    vxu[c][k, i] = bld.add_variable(
                        f"vxu.{tag}[{k}][{i}]",
                        lower=r.vxu[0][i], upper=r.vxu[1][i],
                    )
                    bld.add_row(
                        {int(vxu[c][k, i]): 1.0, int(xo_k[i]): -prim.v[i]},
                        "E", 0.0, f"def.vxu.{tag}[{k}][{i}]",
                    )
                    xiu[c][k, i] = bld.add_variable(
                        f"xiu.{tag}[{k}][{i}]",
                        lower=r.xiu[0][i], upper=r.xiu[1][i],
                    )
                    zu_drop[c][k, i] = milp.encode_capacity_drop(
                        bld, int(xiu[c][k, i]), int(zo_k[i]),
                        float(r.thr_up[i]), float(prim.c_max[i]),
                        float(prim.alpha[i]), float(jam[i]),
                        name=f"dropu.{tag}[{k}][{i}]",
                    )
                    _settle_drop(bld, int(zu_drop[c][k, i]), int(zo_k[i]),
                                 float(r.thr_up[i]))
                    du[c][k, i] = bld.add_variable(
                        f"du.{tag}[{k}][{i}]",
                        lower=r.du[0][i], upper=r.du[1][i],
                    )
                    zu_dmin[c][k, i] = milp.encode_min_equality(
                        bld, int(du[c][k, i]), int(vxu[c][k, i]),
                        int(xiu[c][k, i]), name=f"umin.{tag}[{k}][{i}]",
                    )
                    _settle_min(bld, int(zu_dmin[c][k, i]),
                                int(vxu[c][k, i]), int(xiu[c][k, i]))
                    si[c][k, i] = bld.add_variable(
                        f"si.{tag}[{k}][{i}]",
                        lower=r.si[0][i], upper=r.si[1][i],
                    )
                    coef = prim.w[i + 1] / prim.beta[i]
                    bld.add_row(
                        {int(si[c][k, i]): 1.0, int(xo_k[i + 1]): coef},
                        "E", coef * jam[i + 1], f"def.si.{tag}[{k}][{i}]",
                    )
                    fu[c][k, i] = bld.add_variable(
                        f"fu.{tag}[{k}][{i}]",
                        lower=r.fu[0][i], upper=r.fu[1][i],
                    )
                    zu_fmin[c][k, i] = milp.encode_min_equality(
                        bld, int(fu[c][k, i]), int(du[c][k, i]),
                        int(si[c][k, i]), name=f"gmin.{tag}[{k}][{i}]",
                    )
                    _settle_min(bld, int(zu_fmin[c][k, i]),
                                int(du[c][k, i]), int(si[c][k, i]))
            else:
                fu[c][k] = fo[c][k, : n - 1]
            # conservation across the stage boundary
            for i in range(n):
                coeffs = {
                    int(xn_k[i]): 1.0,
                    int(xo_k[i]): -1.0,
                    int(u_ids[k, i]): -1.0,
                    int(fo[c][k, i]): 1.0,
                }
                if i:
                    fid = int(fu[c][k, i - 1])
                    coeffs[fid] = coeffs.get(fid, 0.0) - prim.beta[i - 1]
                bld.add_row(coeffs, "E", 0.0, f"dyn.x.{tag}[{k}][{i}]")
                bld.add_row(
                    {
                        int(qm[c][k + 1, i]): 1.0,
                        int(qm[c][k, i]): -1.0,
                        int(u_ids[k, i]): 1.0,
                    },
                    "E", float(comp.lam[i]), f"dyn.q.{tag}[{k}][{i}]",
                )

    gate = stage_cost = None
    if not is_linear:
        gate = np.empty(t, dtype=np.int64)
        stage_cost = np.empty(t, dtype=np.int64)
        xf = terminal.x_f
        fin = np.flatnonzero(np.isfinite(xf))
        for k in range(t):
            stage_ids = np.concatenate([xm[0][k], qm[0][k]])
            ubs = np.array([bld.upper[int(j)] for j in stage_ids])
            m_cost = float(config.l @ ubs)
            gate[k] = bld.add_variable(f"gate[{k}]", binary=True)
            stage_cost[k] = bld.add_variable(
                f"stagecost[{k}]", lower=0.0, upper=m_cost, objective=1.0
            )
            for c in range(ncomp):
                ids = np.concatenate([xm[c][k], qm[c][k]])
                for j in fin:
                    col = int(ids[j])
                    slack = max(bld.upper[col] - xf[j], 0.0)
                    bld.add_row(
                        {col: 1.0, int(gate[k]): slack},
                        "L", xf[j] + slack, f"inbox[{k}].c{c}.{j}",
                    )
            coeffs = {int(stage_cost[k]): 1.0, int(gate[k]): m_cost}
            for j, col in enumerate(stage_ids):
                coeffs[int(col)] = coeffs.get(int(col), 0.0) - config.l[j]
            bld.add_row(coeffs, "G", 0.0, f"paystage[{k}]")

    model = bld.build()
    layout = _Layout(
        n_cells=n, horizon=t, reduced=reduced, cost_mode=config.cost_mode,
        xm=xm, q=qm, u=u_ids,
        vxo=vxo, xio=xio, do=do, so=so, fo=fo,
        vxu=vxu, xiu=xiu, du=du, si=si, fu=fu,
        zo_drop=zo_drop, zo_dmin=zo_dmin, zo_fmin=zo_fmin,
        zu_drop=zu_drop, zu_dmin=zu_dmin, zu_fmin=zu_fmin,
        gate=gate, stage_cost=stage_cost,
    )

    n_cols = model.lp.n_cols
    xf = terminal.x_f
    fin_mask = np.isfinite(xf)

    def encode(u_seq):
        """Roll the tube under a clipped metering plan; None when it exits."""
        u_seq = np.asarray(u_seq, dtype=float).reshape(t, n)
        vec = np.zeros(n_cols)
        state = [comp.x0.copy() for comp in comps]
        for c in range(ncomp):
            vec[xm[c][0]] = state[c][:n]
            vec[qm[c][0]] = state[c][n:]
        for k in range(t):
            avail = state[low_idx][n:] + lam_lo
            u_k = np.clip(u_seq[k], 0.0, np.minimum(ucap[k], avail))
            vec[u_ids[k]] = u_k
            nxt = []
            for c, comp in enumerate(comps):
                own = state[c]
                oth = state[(ncomp - 1) - c] if merge else own
                prim, sec = comp.prim, comp.sec
                x = own[:n]
                z = oth[:n]
                thr_o = sec.c_max / prim.v
                xi_o = np.where(x <= thr_o, sec.c_max,
                                sec.alpha * sec.c_max)
                vx_o = sec.v * x
                d_o = np.minimum(vx_o, xi_o)
                s_o = (sec.w[1:] / prim.beta) * (jam[1:] - x[1:])
                f_o = d_o.copy()
                f_o[:-1] = np.minimum(d_o[:-1], s_o)
                vec[vxo[c][k]] = vx_o
                vec[xio[c][k]] = xi_o
                vec[do[c][k]] = d_o
                vec[so[c][k]] = s_o
                vec[fo[c][k, : n - 1]] = f_o[:-1]
                vec[zo_drop[c][k]] = (x <= thr_o).astype(float)
                vec[zo_dmin[c][k]] = (vx_o <= xi_o).astype(float)
                vec[zo_fmin[c][k]] = (d_o[:-1] <= s_o).astype(float)
                if merge:
                    thr_u = prim.c_max[:-1] / sec.v[:-1]
                    xi_u = np.where(z[:-1] <= thr_u, prim.c_max[:-1],
                                    prim.alpha[:-1] * prim.c_max[:-1])
                    vx_u = prim.v[:-1] * x[:-1]
                    d_u = np.minimum(vx_u, xi_u)
                    s_i = (prim.w[1:] / prim.beta) * (jam[1:] - x[1:])
                    f_u = np.minimum(d_u, s_i)
                    vec[vxu[c][k]] = vx_u
                    vec[xiu[c][k]] = xi_u
                    vec[du[c][k]] = d_u
                    vec[si[c][k]] = s_i
                    vec[fu[c][k]] = f_u
                    vec[zu_drop[c][k]] = (z[:-1] <= thr_u).astype(float)
                    vec[zu_dmin[c][k]] = (vx_u <= xi_u).astype(float)
                    vec[zu_fmin[c][k]] = (d_u <= s_i).astype(float)
                else:
                    f_u = f_o[:-1]
                inflow = u_k.copy()
                inflow[1:] += prim.beta * f_u
                nm = (x + inflow) - f_o
                nq = (own[n:] + comp.lam) - u_k
                new = np.concatenate([nm, nq])
                if np.any(new < blb[c][k + 1] - 1e-7):
                    return None
                if np.any(new > bub[c][k + 1] + 1e-7):
                    return None
                vec[xm[c][k + 1]] = nm
                vec[qm[c][k + 1]] = nq
                nxt.append(new)
            state = nxt
        if not is_linear:
            for k in range(t):
                inside = True
                for c in range(ncomp):
                    stacked = np.concatenate([vec[xm[c][k]], vec[qm[c][k]]])
                    if np.any(stacked[fin_mask] > xf[fin_mask]):
                        inside = False
                        break
                vec[gate[k]] = 1.0 if inside else 0.0
                if not inside:
                    stacked = np.concatenate([vec[xm[0][k]], vec[qm[0][k]]])
                    vec[stage_cost[k]] = float(config.l @ stacked)
        return vec

    def decode(x):
        controls = np.asarray(x)[u_ids].copy()
        upper = np.concatenate(
            [np.asarray(x)[xm[0]], np.asarray(x)[qm[0]]], axis=-1
        )
        lower = np.concatenate(
            [np.asarray(x)[xm[low_idx]], np.asarray(x)[qm[low_idx]]], axis=-1
        )
        return controls, upper, lower

    return _Problem(model, layout, encode, decode, ucap)


def build_problem(
    xhat: LiftedState,
    demand_bounds: DemandBounds,
    param_bounds: ParamBounds,
    config: MpcConfig,
    terminal: TerminalSet,
) -> milp.MilpModel:
    """Encode the horizon problem over both tube components.

    The returned model's size matches :func:`model_census` exactly;
    feasibility is left to the solver. Requires a parameter box whose jam
    profile is a single vector (the receiving-flow rows need one jam
    value per cell to stay affine).
    """
    return _assemble(
        xhat, demand_bounds, param_bounds, config, terminal, reduced=False
    ).model


def solve_mpc(
    xhat: LiftedState,
    demand_bounds: DemandBounds,
    param_bounds: ParamBounds,
    config: MpcConfig,
    terminal: TerminalSet,
    *,
    budget: milp.MilpBudget | None = None,
    options=None,
    allow_reduced: bool = True,
) -> MpcResult:
    """Plan over the horizon and return the first control with the value.

    When the state box, demand box and parameter box are all degenerate
    the two tube components coincide, and a single-component encoding
    (half the columns, half the binaries) is solved instead; the decoded
    trajectories are then shared between the tube sides. Infeasibility
    follows ``config.fallback``: raise, or return zero metering with an
    infinite value. A solver budget overrun always raises, carrying the
    incumbent diagnostics.
    """
    reduced = (
        allow_reduced
        and np.array_equal(np.asarray(xhat.upper), np.asarray(xhat.lower))
        and np.array_equal(
            np.asarray(demand_bounds.upper), np.asarray(demand_bounds.lower)
        )
        and param_bounds.is_point
    )
    prob = _assemble(
        xhat, demand_bounds, param_bounds, config, terminal, reduced=reduced
    )
    n = prob.layout.n_cells
    t = prob.layout.horizon
    lam = np.asarray(demand_bounds.upper, dtype=float)
    seeds = (np.tile(lam, (t, 1)), np.zeros((t, n)))
    candidates = [v for v in (prob.encode(s) for s in seeds) if v is not None]

    def hook(x_lp):
        return prob.encode(np.asarray(x_lp)[prob.layout.u])

    sol = milp.solve_milp(
        prob.model,
        budget=budget or milp.MilpBudget(),
        options=options,
        incumbent_hook=hook,
        initial_candidates=candidates,
    )
    if sol.status == milp.OPTIMAL:
        x_best = sol.x
        # a state resting exactly on a switch threshold lets the model pick
        # either branch at equal cost; replaying the controls through the
        # actual dynamics pins the trajectories to the plant's inclusive
        # branch whenever that does not cost more
        replay = prob.encode(np.asarray(sol.x)[prob.layout.u])
        if replay is not None:
            val = float(prob.model.lp.obj @ replay)
            if val <= sol.objective + max(1e-6, 1e-9 * abs(sol.objective)):
                x_best = replay
        controls, upper, lower = prob.decode(x_best)
        return MpcResult(
            u=controls[0].copy(),
            value=float(sol.objective),
            status=sol.status,
            feasible=True,
            controls=controls,
            upper=upper,
            lower=lower,
            reduced=reduced,
            solution=sol,
        )
    if sol.status == milp.INFEASIBLE:
        if config.fallback == FALLBACK_ZERO:
            return MpcResult(
                u=np.zeros(n),
                value=math.inf,
                status=sol.status,
                feasible=False,
                controls=None,
                upper=None,
                lower=None,
                reduced=reduced,
                solution=sol,
            )
        raise InfeasibleProblem(
            f"no horizon-{t} plan reaches the terminal box from the given "
            f"state box (explored {sol.nodes} nodes)"
        )
    if sol.status == milp.BUDGET_EXCEEDED:
        have = "no incumbent" if not np.isfinite(sol.objective) else (
            f"incumbent {sol.objective:.6g}, bound {sol.bound:.6g}"
        )
        raise SolveBudgetExceeded(
            f"node budget exhausted after {sol.nodes} nodes ({have})", sol
        )
    raise RuntimeError(f"unexpected solver status {sol.status!r}")
