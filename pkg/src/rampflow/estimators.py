"""Set-membership estimation: state correction, demand carry-over, and
interval identification of the freeway parameters.

Everything here manipulates boxes. ``state_update`` intersects a predicted
state box with what the detectors report, ``demand_update`` carries the
arrival box forward unchanged, and ``theta_update`` contracts the parameter
box by branch-and-prune: bisect one coordinate, try to certify that half the
box cannot reproduce the recorded window, and keep only certified cuts. The
certificate is ``interval_consistency``, a forward interval propagation of
the tube dynamics, so the contraction is conservative by construction: a
parameter value is only ever discarded with a proof.

``freeflow_identify`` is the closed-form complement. While the stretch is in
free flow and fully measured, consecutive occupancy readings determine each
cell's speed and split ratio exactly through small linear solves, and
``full_identify_sweep`` cascades those solves downstream.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from .ctm import FreewayParams, Observation, OutputModel
from .embedding import (PARAM_FIELDS, DemandBounds, LiftedState, ParamBounds,
                        lifted_step)

CONSISTENCY_TOL = 1e-9
RANK_TOL = 1e-8

FEASIBLE = "feasible"
INFEASIBLE = "infeasible"
UNKNOWN = "unknown"

CELL_EXACT = "exact"
CELL_UNIDENTIFIED = "unidentified"
CELL_DEGENERATE = "degenerate"

_WIDTH_TOL = 1e-12


class ContainmentViolation(RuntimeError):
    """A reading, or an entire data window, falls outside the current box.

    Raised when the guaranteed-containment premise breaks: either a detector
    reported a value the predicted state box cannot explain, or no parameter
    value left in the box reproduces the recorded window.
    """


class RankDeficient(RuntimeError):
    """The readings do not pin the parameters down (singular regression)."""


@dataclass(frozen=True)
class EstimatorConfig:
    """Knobs for the windowed estimators.

    backward_horizon is the window length L: updates look at the last L
    transitions. prune_depth bounds the bisection depth per parameter bound,
    prune_budget caps the total number of consistency checks one
    ``theta_update`` call may spend. With relax_jam set, the jam occupancy
    is left alone by the contraction and treated as fixed at its upper
    bound by downstream consumers.
    """

    backward_horizon: int = 8
    prune_depth: int = 8
    prune_budget: int = 256
    relax_jam: bool = False

    def __post_init__(self):
        if int(self.backward_horizon) != self.backward_horizon or self.backward_horizon < 1:
            raise ValueError("backward_horizon must be an integer >= 1")
        if self.prune_depth < 0 or self.prune_budget < 0:
            raise ValueError("prune_depth and prune_budget must be nonnegative")


@dataclass(frozen=True)
class _Record:
    lifted: LiftedState
    observation: Observation
    control: np.ndarray | None
    demand: DemandBounds | None


class MeasurementWindow:
    """Ring buffer of the last L transitions the estimators may look at.

    Each pushed record carries the corrected state box and the raw
    observation at one time step; the control and demand box that produced
    the transition *into* that step ride along with it. The first record of
    a fresh window has no incoming transition, every later one must.
    """

    def __init__(self, backward_horizon: int, output_model: OutputModel):
        if backward_horizon < 1:
            raise ValueError("backward_horizon must be at least 1")
        self.backward_horizon = int(backward_horizon)
        self.output_model = output_model
        self._records: deque[_Record] = deque(maxlen=self.backward_horizon + 1)

    def push(self, lifted: LiftedState, observation: Observation,
             control: np.ndarray | None = None,
             demand: DemandBounds | None = None) -> None:
        if self._records and (control is None or demand is None):
            raise ValueError(
                "records after the first need the control and demand box of "
                "the transition that led to them")
        if control is not None:
            control = np.asarray(control, dtype=float).copy()
        self._records.append(_Record(lifted, observation, control, demand))

    def __len__(self) -> int:
        return len(self._records)

    @property
    def full(self) -> bool:
        return len(self._records) == self.backward_horizon + 1

    @property
    def lifted_boxes(self) -> list[LiftedState]:
        return [r.lifted for r in self._records]

    @property
    def observations(self) -> list[Observation]:
        return [r.observation for r in self._records]

    @property
    def controls(self) -> list[np.ndarray]:
        """Controls aligned with transitions: controls[k] maps box k to k+1."""
        return [r.control for r in list(self._records)[1:]]

    @property
    def demand_boxes(self) -> list[DemandBounds]:
        return [r.demand for r in list(self._records)[1:]]


def state_update(predicted: LiftedState, y: Observation,
                 output_model: OutputModel, *, tol: float = 1e-9) -> LiftedState:
    """Intersect a predicted state box with one measurement.

    Detectors are exact, so a measured mainline cell collapses both bounds
    onto y_i / c_i and every ramp queue collapses onto its reading; cells
    without a detector keep their predicted interval. A reading outside the
    predicted box (beyond tol) voids the containment guarantee and raises
    ContainmentViolation. The result is always contained in the input box,
    and applying the same measurement twice is a no-op.
    """
    up = np.array(predicted.upper, dtype=float)
    lo = np.array(predicted.lower, dtype=float)
    n = output_model.mainline_mask.shape[0]
    if up.shape != (2 * n,):
        raise ValueError(f"state box must have {2 * n} entries, got {up.shape}")
    y_main = np.asarray(y.y_main, dtype=float)
    y_ramp = np.asarray(y.y_ramp, dtype=float)
    if y_main.shape != (n,) or y_ramp.shape != (n,):
        raise ValueError("observation does not match the output model's size")
    if np.any(~np.isfinite(y_main[output_model.mainline_mask])):
        raise ValueError("a measured cell is missing its reading")

    for i in np.flatnonzero(output_model.mainline_mask):
        val = y_main[i] / output_model.c_diag[i]
        if val < lo[i] - tol or val > up[i] + tol:
            raise ContainmentViolation(
                f"mainline cell {i}: reading {val:.6g} outside "
                f"[{lo[i]:.6g}, {up[i]:.6g}]")
        up[i] = lo[i] = min(max(val, lo[i]), up[i])
    for i in range(n):
        val = y_ramp[i]
        if val < lo[n + i] - tol or val > up[n + i] + tol:
            raise ContainmentViolation(
                f"ramp queue {i}: reading {val:.6g} outside "
                f"[{lo[n + i]:.6g}, {up[n + i]:.6g}]")
        up[n + i] = lo[n + i] = min(max(val, lo[n + i]), up[n + i])
    return LiftedState(upper=up, lower=lo)


def demand_update(window: MeasurementWindow) -> DemandBounds:
    """Carry the arrival box forward unchanged.

    The arrival bounds are prior knowledge, not something the detectors can
    sharpen: queues are measured, so arrivals are only seen through the
    commanded discharge and never pin down more than the box already says.
    Returns the most recent recorded box, bit for bit.
    """
    boxes = window.demand_boxes
    if not boxes:
        raise ValueError("the window has not recorded a transition yet")
    return boxes[-1]


def _absorb(up: np.ndarray, lo: np.ndarray, y: Observation,
            output_model: OutputModel, tol: float) -> bool:
    """Collapse measured entries of [lo, up] onto the readings, in place.

    Returns False when some reading lies strictly outside the box by more
    than tol, i.e. the box is certified inconsistent with the measurement.
    """
    n = output_model.mainline_mask.shape[0]
    y_main = np.asarray(y.y_main, dtype=float)
    y_ramp = np.asarray(y.y_ramp, dtype=float)
    for i in np.flatnonzero(output_model.mainline_mask):
        if not np.isfinite(y_main[i]):
            continue
        val = y_main[i] / output_model.c_diag[i]
        if val < lo[i] - tol or val > up[i] + tol:
            return False
        up[i] = lo[i] = min(max(val, lo[i]), up[i])
    for i in range(n):
        val = y_ramp[i]
        if val < lo[n + i] - tol or val > up[n + i] + tol:
            return False
        up[n + i] = lo[n + i] = min(max(val, lo[n + i]), up[n + i])
    return True


def interval_consistency(theta_box: ParamBounds, state_box0: LiftedState,
                         controls, observations, demand_bounds,
                         output_model: OutputModel, *,
                         lifted_boxes=None,
                         tol: float = CONSISTENCY_TOL) -> str:
    """Can some parameter in theta_box reproduce the recorded window?

    Propagates the tube dynamics forward from state_box0 under the given
    controls and demand boxes, collapsing measured entries onto the exact
    readings as it goes, and answers "infeasible" only when a propagated
    interval strictly excludes a reading by more than tol. That one-sided
    certificate is sound: a box containing a consistent parameter is never
    labelled infeasible. A passing point box earns "feasible"; a passing
    wider box only earns "unknown", because interval arithmetic may keep an
    empty box alive.

    With lifted_boxes given (one per time step, None entries allowed), the
    propagated box is additionally intersected with those previously
    certified enclosures, which sharpens the test without risking a false
    certificate.
    """
    controls = [np.asarray(u, dtype=float) for u in controls]
    steps = len(controls)
    observations = list(observations)
    if len(observations) != steps + 1:
        raise ValueError("need one observation per step plus the initial one")
    if isinstance(demand_bounds, DemandBounds):
        demand_bounds = [demand_bounds] * steps
    else:
        demand_bounds = list(demand_bounds)
    if len(demand_bounds) != steps:
        raise ValueError("need one demand box per control")
    if lifted_boxes is not None and len(lifted_boxes) != steps + 1:
        raise ValueError("need one enclosure per time step when tying")

    up = np.array(state_box0.upper, dtype=float)
    lo = np.array(state_box0.lower, dtype=float)
    if not _absorb(up, lo, observations[0], output_model, tol):
        return INFEASIBLE
    for k in range(steps):
        box = lifted_step(LiftedState(upper=up, lower=lo), controls[k],
                          demand_bounds[k], theta_box, check=False)
        up = np.array(box.upper, dtype=float)
        lo = np.array(box.lower, dtype=float)
        if lifted_boxes is not None and lifted_boxes[k + 1] is not None:
            tied_up = np.asarray(lifted_boxes[k + 1].upper, dtype=float)
            tied_lo = np.asarray(lifted_boxes[k + 1].lower, dtype=float)
            if np.any(lo > tied_up + tol) or np.any(tied_lo > up + tol):
                return INFEASIBLE
            np.minimum(up, tied_up, out=up)
            np.maximum(lo, tied_lo, out=lo)
            np.maximum(up, lo, out=up)
        if not _absorb(up, lo, observations[k + 1], output_model, tol):
            return INFEASIBLE
    return FEASIBLE if theta_box.is_point else UNKNOWN


def _corner_maps(bounds: ParamBounds):
    lo = {f: np.array(getattr(bounds.lower, f), dtype=float) for f in PARAM_FIELDS}
    up = {f: np.array(getattr(bounds.upper, f), dtype=float) for f in PARAM_FIELDS}
    return lo, up


def _build_box(lo_map: dict, up_map: dict, template: ParamBounds) -> ParamBounds | None:
    """Assemble a ParamBounds from coordinate maps, or None when a corner
    violates the physical-range checks (possible for interior sub-boxes,
    whose corners mix values the original corners never combined)."""
    try:
        lower = replace(template.lower, **{f: a.copy() for f, a in lo_map.items()})
        upper = replace(template.upper, **{f: a.copy() for f, a in up_map.items()})
        return ParamBounds(upper=upper, lower=lower)
    except ValueError:
        return None


def theta_update(window: MeasurementWindow, param_bounds: ParamBounds,
                 config: EstimatorConfig = EstimatorConfig()) -> ParamBounds:
    """Contract the parameter box against the recorded window.

    Works one scalar coordinate at a time. To lower an upper bound, bisect
    the coordinate's interval and ask ``interval_consistency`` whether the
    upper half-box is certifiably unable to reproduce the window; only a
    certificate moves the bound, so the true parameter is never cut off and
    the result is always contained in the input box. Lower bounds mirror
    this, probes shrink toward the edge when a half cannot be certified,
    and the sweep stops once prune_budget consistency checks are spent.

    A point box passes through unchanged (after the free sanity check). If
    the whole incoming box is certified inconsistent, containment is lost
    and ContainmentViolation is raised.
    """
    if len(window) < 1:
        raise ValueError("the window is empty")
    boxes = window.lifted_boxes
    checks_left = max(config.prune_budget, 1)

    def consistent(candidate: ParamBounds) -> str:
        nonlocal checks_left
        checks_left -= 1
        return interval_consistency(
            candidate, boxes[0], window.controls, window.observations,
            window.demand_boxes, window.output_model, lifted_boxes=boxes)

    if consistent(param_bounds) == INFEASIBLE:
        raise ContainmentViolation(
            "no parameter left in the box reproduces the recorded window")

    lo_map, up_map = _corner_maps(param_bounds)
    coords = [(f, i)
              for f in PARAM_FIELDS
              if not (config.relax_jam and f == "x_jam")
              for i in range(lo_map[f].shape[0])
              if up_map[f][i] - lo_map[f][i] > _WIDTH_TOL]
    applied: list[tuple[str, int, bool, float]] = []

    for f, i in coords:
        # shave the upper bound: certify [mid, cut] infeasible, then cut <- mid
        anchor, cut = lo_map[f][i], up_map[f][i]
        for _ in range(config.prune_depth):
            if checks_left <= 0 or cut - anchor <= _WIDTH_TOL:
                break
            mid = 0.5 * (anchor + cut)
            trial = {g: (a if g != f else a.copy()) for g, a in lo_map.items()}
            trial[f][i] = mid
            candidate = _build_box(trial, up_map, param_bounds)
            if candidate is not None and consistent(candidate) == INFEASIBLE:
                cut = mid
            else:
                anchor = mid
        if cut < up_map[f][i]:
            applied.append((f, i, True, cut))
            up_map[f][i] = cut
        # shave the lower bound symmetrically
        anchor, cut = up_map[f][i], lo_map[f][i]
        for _ in range(config.prune_depth):
            if checks_left <= 0 or anchor - cut <= _WIDTH_TOL:
                break
            mid = 0.5 * (anchor + cut)
            trial = {g: (a if g != f else a.copy()) for g, a in up_map.items()}
            trial[f][i] = mid
            candidate = _build_box(lo_map, trial, param_bounds)
            if candidate is not None and consistent(candidate) == INFEASIBLE:
                cut = mid
            else:
                anchor = mid
        if cut > lo_map[f][i]:
            applied.append((f, i, False, cut))
            lo_map[f][i] = cut

    result = _build_box(lo_map, up_map, param_bounds)
    if result is not None:
        return result
    # Each cut is individually certified, but their union can push a corner
    # outside the physical-range checks. Reapply them one at a time and drop
    # the ones that break a corner; dropping a cut only enlarges the box, so
    # soundness is kept.
    lo_map, up_map = _corner_maps(param_bounds)
    for f, i, is_upper, value in applied:
        target = up_map if is_upper else lo_map
        old = target[f][i]
        target[f][i] = value
        if _build_box(lo_map, up_map, param_bounds) is None:
            target[f][i] = old
    return _build_box(lo_map, up_map, param_bounds)


def freeflow_identify(x_cell, lam_cell: float, *, x_upstream=None,
                      v_upstream: float | None = None,
                      tol: float = RANK_TOL) -> tuple[float | None, float]:
    """Recover one cell's parameters from exact free-flow readings.

    In free flow with the ramp passing exactly its arrivals, cell i obeys
    x_i' = x_i + lam_i + beta_{i-1} v_{i-1} x_{i-1} - v_i x_i, which is
    linear in the unknowns. For the first cell (no x_upstream) one
    transition gives v_1 = (x_1 + lam_1 - x_1') / x_1 and the return value
    is (None, v_1); a third reading, when supplied, is checked against the
    recovered speed and rejects non-free-flow data. Downstream cells need
    x_cell over three consecutive steps, x_upstream over the first two, and
    the already-identified v_upstream; the two transitions form a 2x2
    system in (beta_{i-1}, v_i).

    Raises RankDeficient when the normalized determinant falls below tol
    (steady readings, proportional rows, or an empty cell) and ValueError
    when the recovered values leave (0, 1], which free-flow data cannot
    produce.
    """
    x_cell = np.asarray(x_cell, dtype=float).ravel()
    lam_cell = float(lam_cell)
    if np.any(x_cell < 0.0) or not np.all(np.isfinite(x_cell)):
        raise ValueError("occupancy readings must be finite and nonnegative")

    if x_upstream is None:
        if x_cell.shape[0] < 2:
            raise ValueError("the first cell needs at least two readings")
        x0, x1 = x_cell[0], x_cell[1]
        scale = max(1.0, abs(x1), abs(lam_cell))
        if abs(x0) <= tol * scale:
            raise RankDeficient("the cell is empty; its speed leaves no trace")
        v = (x0 + lam_cell - x1) / x0
        if not 0.0 < v <= 1.0 + 1e-9:
            raise ValueError(
                f"recovered speed {v:.6g} leaves (0, 1]; readings are not free flow")
        if x_cell.shape[0] >= 3:
            predicted = x1 + lam_cell - v * x1
            if abs(predicted - x_cell[2]) > 1e-6 * max(1.0, abs(x_cell[2])):
                raise ValueError("third reading does not follow the free-flow map")
        return None, float(min(v, 1.0))

    if v_upstream is None:
        raise ValueError("downstream cells need the upstream speed")
    x_up = np.asarray(x_upstream, dtype=float).ravel()
    if np.any(x_up < 0.0) or not np.all(np.isfinite(x_up)):
        raise ValueError("occupancy readings must be finite and nonnegative")
    if x_cell.shape[0] < 3 or x_up.shape[0] < 2:
        raise ValueError("need three cell readings and two upstream readings")
    a = np.array([[v_upstream * x_up[0], -x_cell[0]],
                  [v_upstream * x_up[1], -x_cell[1]]])
    rhs = np.array([x_cell[1] - x_cell[0] - lam_cell,
                    x_cell[2] - x_cell[1] - lam_cell])
    norms = np.linalg.norm(a, axis=1)
    if np.any(norms <= _WIDTH_TOL):
        raise RankDeficient("a transition carries no parameter information")
    det = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
    if abs(det) <= tol * norms[0] * norms[1]:
        raise RankDeficient(
            "the two transitions are proportional; the 2x2 system is singular")
    beta, v = np.linalg.solve(a, rhs)
    if not 0.0 < v <= 1.0 + 1e-9:
        raise ValueError(
            f"recovered speed {v:.6g} leaves (0, 1]; readings are not free flow")
    if not 0.0 < beta < 1.0:
        raise ValueError(
            f"recovered split ratio {beta:.6g} leaves (0, 1); readings are not free flow")
    return float(beta), float(min(v, 1.0))


@dataclass(frozen=True)
class IdentifyReport:
    """Per-cell outcome of a sweep: recovered values and a status string.

    v[i] and beta[i-1] are NaN wherever the status is not "exact".
    """

    v: np.ndarray
    beta: np.ndarray
    status: tuple[str, ...]

    @property
    def all_exact(self) -> bool:
        return all(s == CELL_EXACT for s in self.status)


def full_identify_sweep(xs, lam) -> IdentifyReport:
    """Cascade ``freeflow_identify`` along the stretch.

    xs is a (K, I) block of mainline readings on consecutive free-flow
    steps, K >= 3, with NaN marking cells that carry no detector; lam gives
    the constant per-ramp arrivals. Cell 1 needs two consecutive finite
    readings, every later cell needs three of its own plus the first two of
    its upstream neighbour, and its upstream speed must itself have been
    identified; the earliest window that qualifies is used. Cells that
    never qualify, or sit downstream of a break in the cascade, come back
    "unidentified"; windows with data that is singular or off the free-flow
    map come back "degenerate".
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    if xs.shape[0] < 3:
        raise ValueError("need at least three consecutive readings")
    n = xs.shape[1]
    lam = np.asarray(lam, dtype=float).ravel()
    if lam.shape != (n,):
        raise ValueError(f"lam must have length {n}")

    v = np.full(n, np.nan)
    beta = np.full(max(n - 1, 0), np.nan)
    status = [CELL_UNIDENTIFIED] * n

    for i in range(n):
        if i > 0 and status[i - 1] != CELL_EXACT:
            continue
        window = 2 if i == 0 else 3
        tried = False
        for t in range(xs.shape[0] - window + 1):
            own = xs[t:t + 3, i]
            if not np.all(np.isfinite(own[:window])):
                continue
            if own.shape[0] > window and not np.isfinite(own[-1]):
                own = own[:window]
            if i > 0 and not np.all(np.isfinite(xs[t:t + 2, i - 1])):
                continue
            tried = True
            try:
                if i == 0:
                    _, v_i = freeflow_identify(own, lam[0])
                    b_i = None
                else:
                    b_i, v_i = freeflow_identify(
                        own, lam[i], x_upstream=xs[t:t + 2, i - 1],
                        v_upstream=v[i - 1])
            except (RankDeficient, ValueError):
                continue
            v[i] = v_i
            if b_i is not None:
                beta[i - 1] = b_i
            status[i] = CELL_EXACT
            break
        else:
            if tried:
                status[i] = CELL_DEGENERATE
    return IdentifyReport(v=v, beta=beta, status=tuple(status))


def adopt_identified(bounds: ParamBounds, report: IdentifyReport, *,
                     tol: float = 1e-6) -> ParamBounds:
    """Collapse the v and beta intervals onto exact identification results.

    Only cells whose status is "exact" are touched. A recovered value
    outside the current box (beyond tol) contradicts guaranteed
    containment and raises ContainmentViolation; inside, the value is
    clipped into the interval and both bounds are pinned to it.
    """
    lo_v = np.array(bounds.lower.v, dtype=float)
    up_v = np.array(bounds.upper.v, dtype=float)
    lo_b = np.array(bounds.lower.beta, dtype=float)
    up_b = np.array(bounds.upper.beta, dtype=float)
    for i, state in enumerate(report.status):
        if state != CELL_EXACT:
            continue
        val = float(report.v[i])
        if val < lo_v[i] - tol or val > up_v[i] + tol:
            raise ContainmentViolation(
                f"identified v[{i}] = {val:.6g} outside "
                f"[{lo_v[i]:.6g}, {up_v[i]:.6g}]")
        lo_v[i] = up_v[i] = min(max(val, lo_v[i]), up_v[i])
        if i >= 1 and np.isfinite(report.beta[i - 1]):
            val = float(report.beta[i - 1])
            if val < lo_b[i - 1] - tol or val > up_b[i - 1] + tol:
                raise ContainmentViolation(
                    f"identified beta[{i - 1}] = {val:.6g} outside "
                    f"[{lo_b[i - 1]:.6g}, {up_b[i - 1]:.6g}]")
            lo_b[i - 1] = up_b[i - 1] = min(max(val, lo_b[i - 1]), up_b[i - 1])
    return ParamBounds(
        upper=replace(bounds.upper, v=up_v, beta=up_b),
        lower=replace(bounds.lower, v=lo_v, beta=lo_b))
