"""One-sided tube dynamics for the metered freeway.

The plant map is not order preserving (outflow jumps down when a cell tips
past its critical occupancy), so interval prediction goes through a
two-argument decomposition instead: ``_one_sided`` evaluates the next state
from a primary tuple (state x, demand lam, parameter set A) that pushes the
result up and a secondary tuple (state z, parameter set B) that pulls it
down. Evaluating it twice with the tuples exchanged brackets every
trajectory the uncertainty boxes allow.

Slot orientation, fixed here and relied on by the set-membership code:

==================  =========================================
primary (raises)    x, lam, beta, and v/w/x_jam/c_max/alpha
                    where they feed the merge inflow; v also
                    appears here as the outflow drop threshold
                    denominator
secondary (lowers)  z, and v/w/x_jam/c_max/alpha where they
                    feed the cell outflow; v also appears here
                    as the inflow drop threshold denominator
==================  =========================================

beta has no secondary slot: the merge term multiplies beta back against a
supply that divides by the same beta, so one value serves both.

On the diagonal (equal tuples) the map reproduces ``ctm.compact_step``
bit for bit; the expression trees are kept identical on purpose.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ctm import FreewayParams, compact_step

PARAM_FIELDS = ("beta", "v", "w", "x_jam", "c_max", "alpha")


@dataclass(frozen=True)
class LiftedState:
    """Componentwise bracket [lower, upper] around the stacked plant state."""

    upper: np.ndarray
    lower: np.ndarray

    def __post_init__(self):
        up = np.asarray(self.upper, dtype=float)
        lo = np.asarray(self.lower, dtype=float)
        if up.shape != lo.shape:
            raise ValueError("upper and lower must have the same shape")
        object.__setattr__(self, "upper", up)
        object.__setattr__(self, "lower", lo)

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, x: np.ndarray, *, tol: float = 1e-9) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    @classmethod
    def degenerate(cls, x: np.ndarray) -> "LiftedState":
        x = np.asarray(x, dtype=float)
        return cls(upper=x.copy(), lower=x.copy())


@dataclass(frozen=True)
class DemandBounds:
    upper: np.ndarray
    lower: np.ndarray

    def __post_init__(self):
        up = np.asarray(self.upper, dtype=float)
        lo = np.asarray(self.lower, dtype=float)
        if up.shape != lo.shape:
            raise ValueError("demand bounds must have the same shape")
        object.__setattr__(self, "upper", up)
        object.__setattr__(self, "lower", lo)

    @classmethod
    def point(cls, lam: np.ndarray) -> "DemandBounds":
        lam = np.asarray(lam, dtype=float)
        return cls(upper=lam.copy(), lower=lam.copy())


@dataclass(frozen=True)
class ParamBounds:
    """Interval box over the physical parameters, as two parameter sets.

    Tube propagation is order preserving only while v + w stays at or below
    one in every cell (the occupancy kept by a cell plus what the upstream
    merge can push into it must not overreact to the occupancy itself), so
    the box is rejected when its upper corner violates that.
    """

    upper: FreewayParams
    lower: FreewayParams

    def __post_init__(self):
        for name in PARAM_FIELDS:
            lo = getattr(self.lower, name)
            up = getattr(self.upper, name)
            if np.any(lo > up + 1e-12):
                raise ValueError(f"lower bound of {name} exceeds upper bound")
        if np.any(self.upper.v + self.upper.w > 1.0 + 1e-12):
            raise ValueError("tube propagation needs v + w <= 1 per cell")

    @property
    def is_point(self) -> bool:
        return all(
            np.array_equal(getattr(self.lower, n), getattr(self.upper, n))
            for n in PARAM_FIELDS)

    @property
    def jam_is_point(self) -> bool:
        return bool(np.array_equal(self.lower.x_jam, self.upper.x_jam))

    @classmethod
    def point(cls, params: FreewayParams) -> "ParamBounds":
        return cls(upper=params, lower=params)


def tilde_demand(x, z, v, c, alpha, v_threshold):
    """Sending flow with the speed line read at x and the ceiling read at z.

    The ceiling switches to the dropped value alpha*c once z passes
    c / v_threshold; the boundary keeps full capacity, matching the plant.
    """
    xi = np.where(z <= c / v_threshold, c, alpha * c)
    return np.minimum(v * x, xi)


def tilde_supply(x, w, beta_upstream, x_jam, c_upstream):
    """Receiving flow of a cell at occupancy x, clamped at zero.

    The clamp matters because interval arithmetic evaluates this above
    x_jam when the jam bound is read from the opposite corner of the box.
    """
    return np.maximum(0.0, np.minimum((w / beta_upstream) * (x_jam - x), c_upstream))


def _one_sided(x, z, u, lam, primary, secondary):
    """Next stacked state from the split tuples; broadcasts over leading axes.

    primary is (beta, v, w, x_jam, c_max, alpha) and secondary is the same
    without beta. All arrays; cells along the last axis.
    """
    beta_a, v_a, w_a, xjam_a, c_a, alpha_a = primary
    v_b, w_b, xjam_b, c_b, alpha_b = secondary
    x = np.asarray(x, dtype=float)
    n = x.shape[-1] // 2
    xm, xr = x[..., :n], x[..., n:]
    zm = np.asarray(z, dtype=float)[..., :n]

    # merge inflow into cells 2..I: what the upstream cell offers, throttled
    # by the space this cell advertises, all read from the primary tuple
    d_up = tilde_demand(xm[..., :-1], zm[..., :-1], v_a[..., :-1], c_a[..., :-1],
                        alpha_a[..., :-1], v_b[..., :-1])
    s_in = tilde_supply(xm[..., 1:], w_a[..., 1:], beta_a, xjam_a[..., 1:],
                        c_a[..., :-1])
    f_up = np.minimum(d_up, s_in)

    # cell outflow, read from the secondary tuple except for the drop
    # threshold denominator and the supply's beta, which cross over
    d_out = tilde_demand(xm, xm, v_b, c_b, alpha_b, v_a)
    s_out = tilde_supply(xm[..., 1:], w_b[..., 1:], beta_a, xjam_b[..., 1:],
                         c_b[..., :-1])
    f_out = d_out.copy()
    f_out[..., :-1] = np.minimum(d_out[..., :-1], s_out)

    shape = np.broadcast_shapes(xm.shape, np.shape(u))
    inflow = np.zeros(shape)
    inflow += u
    inflow[..., 1:] += beta_a * f_up
    next_m = (xm + inflow) - f_out
    next_r = (xr + lam) - u
    return np.concatenate(np.broadcast_arrays(next_m, next_r), axis=-1)


def _primary_tuple(p: FreewayParams):
    return (p.beta, p.v, p.w, p.x_jam, p.c_max, p.alpha)


def _secondary_tuple(p: FreewayParams):
    return (p.v, p.w, p.x_jam, p.c_max, p.alpha)


def decomposition_F(lifted: LiftedState, u: np.ndarray, demand: DemandBounds,
                    bounds: ParamBounds) -> np.ndarray:
    """Upper component of the tube map (lower = same call with tuples swapped)."""
    return _one_sided(lifted.upper, lifted.lower, u, demand.upper,
                      _primary_tuple(bounds.upper), _secondary_tuple(bounds.lower))


def lifted_step(lifted: LiftedState, u: np.ndarray, demand: DemandBounds,
                bounds: ParamBounds, *, check: bool = True) -> LiftedState:
    """Advance both tube components one step and clamp to physical ranges.

    Clamping is sound: every trajectory the boxes admit keeps its mainline
    in [0, x_jam] and its queues nonnegative, so tightening the bracket to
    those ranges cannot lose the true state.
    """
    up = _one_sided(lifted.upper, lifted.lower, u, demand.upper,
                    _primary_tuple(bounds.upper), _secondary_tuple(bounds.lower))
    lo = _one_sided(lifted.lower, lifted.upper, u, demand.lower,
                    _primary_tuple(bounds.lower), _secondary_tuple(bounds.upper))
    n = up.shape[-1] // 2
    cap = np.maximum(bounds.upper.x_jam, bounds.lower.x_jam)
    for arr in (up, lo):
        np.clip(arr[..., :n], 0.0, cap, out=arr[..., :n])
        np.clip(arr[..., n:], 0.0, None, out=arr[..., n:])
    if check and np.any(up < lo - 1e-9):
        raise AssertionError("tube inverted: upper fell below lower")
    return LiftedState(upper=up, lower=lo)


def lifted_point_step(params: FreewayParams, x: np.ndarray, u: np.ndarray,
                      lam: np.ndarray) -> np.ndarray:
    """Compact dynamics evaluated through the tube map's own code path."""
    return _one_sided(x, x, u, lam, _primary_tuple(params),
                      _secondary_tuple(params))


def simulate_lifted(lifted: LiftedState, controls: np.ndarray,
                    demand, bounds: ParamBounds, *,
                    check: bool = True) -> LiftedState:
    """Compose lifted_step over a control sequence of shape (k, I).

    demand is a single DemandBounds applied every step, or a sequence with
    one entry per step.
    """
    controls = np.atleast_2d(np.asarray(controls, dtype=float))
    if controls.size == 0:
        return lifted
    if isinstance(demand, DemandBounds):
        demand = [demand] * controls.shape[0]
    if len(demand) != controls.shape[0]:
        raise ValueError("need one demand box per control")
    state = lifted
    for u_k, dem_k in zip(controls, demand):
        state = lifted_step(state, u_k, dem_k, bounds, check=check)
    return state


def degenerate_check(params: FreewayParams, x: np.ndarray, u: np.ndarray,
                     lam: np.ndarray) -> bool:
    """True when the tube map and the plant's compact step agree bit for bit."""
    through_tube = lifted_point_step(params, x, u, lam)
    direct = compact_step(params, x, u, lam)
    return bool(np.array_equal(through_tube, direct))
