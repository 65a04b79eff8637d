"""Closed-loop metering policies.

The centerpiece is ``setpc_step``, one tick of the set-membership predictive
controller: correct the state box against the new measurement, contract the
parameter box, refresh the demand box, compute a control (horizon planner
while outside the terminal set, local demand tracking inside), and push the
corrected box through the tube dynamics to predict the next step. The
baselines (ALINEA, open loop, bare local tracking) are standalone functions
so the harness can run them against the same estimation stack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .embedding import (PARAM_FIELDS, DemandBounds, LiftedState, ParamBounds,
                        lifted_step)
from .estimators import (EstimatorConfig, MeasurementWindow, demand_update,
                         state_update, theta_update)
from .mpc import MpcConfig, TerminalSet, solve_mpc

PHASE_MPC = "mpc"
PHASE_LOCAL = "local"

# one-hour integral gain translated to per-step units on the demo cell size
ALINEA_GAIN = 70.0 / (60.0 * 160.0)


@dataclass(frozen=True)
class AlineaConfig:
    """Integral feedback on the merge-cell occupancy estimate.

    The update is u(t) = u(t-1) - gain * (setpoint - estimate), applied per
    ramp and clipped into the control box afterwards. Note the sign: an
    estimate below the setpoint lowers the rate. Leaving setpoint as None
    targets each cell's critical occupancy.
    """

    gain: float = ALINEA_GAIN
    setpoint: np.ndarray | None = None

    def __post_init__(self):
        if self.gain < 0.0:
            raise ValueError("gain must be nonnegative")


@dataclass(frozen=True)
class LocalConfig:
    """Demand-tracking law: serve the reconstructed arrivals, plus a small
    drain offset while queues persist."""

    averaging_window: int = 1
    epsilon: float = 0.1

    def __post_init__(self):
        if int(self.averaging_window) != self.averaging_window or self.averaging_window < 1:
            raise ValueError("averaging_window must be an integer >= 1")
        if self.epsilon < 0.0:
            raise ValueError("epsilon must be nonnegative")


@dataclass(frozen=True)
class SetPcConfig:
    """Everything one Set-PC loop needs beyond its mutable state."""

    mpc: MpcConfig
    terminal: TerminalSet
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    local: LocalConfig = field(default_factory=LocalConfig)
    budget: object | None = None
    options: object | None = None
    allow_reduced: bool = True
    dual_mode: bool = True
    revert_on_exit: bool = True
    pin_jam: bool = False
    track_demand: bool = True


@dataclass(frozen=True)
class SetPcState:
    """Carried between ticks: the predicted box, the uncertainty boxes, the
    shared measurement window, the phase, and the last executed control."""

    predicted: LiftedState
    params: ParamBounds
    demand: DemandBounds
    window: MeasurementWindow
    phase: str = PHASE_MPC
    last_control: np.ndarray | None = None


@dataclass(frozen=True)
class StepDiagnostics:
    value: float
    feasible: bool
    phase: str
    state_width: float
    theta_width: float
    reduced: bool | None = None
    corrected: LiftedState | None = None


def theta_width(bounds: ParamBounds) -> float:
    """Largest per-coordinate gap between the two parameter corners."""
    gaps = [np.max(getattr(bounds.upper, f) - getattr(bounds.lower, f), initial=0.0)
            for f in PARAM_FIELDS]
    return float(max(gaps))


def open_loop_step(lam_nominal, u_max) -> np.ndarray:
    """Meter at the nominal arrival rate, ignoring all measurements."""
    lam = np.asarray(lam_nominal, dtype=float)
    return np.clip(lam, 0.0, np.asarray(u_max, dtype=float))


def alinea_step(prev_u, merge_estimates, params, cfg: AlineaConfig = AlineaConfig()) -> np.ndarray:
    """One ALINEA tick from the merge-cell occupancy estimates."""
    prev_u = np.asarray(prev_u, dtype=float)
    est = np.asarray(merge_estimates, dtype=float)
    setpoint = params.x_crit if cfg.setpoint is None else np.asarray(cfg.setpoint, dtype=float)
    u = prev_u - cfg.gain * (setpoint - est)
    return np.clip(u, 0.0, params.u_max)


def local_controller(queue_history, control_history, cfg: LocalConfig = LocalConfig(),
                     *, u_max=None) -> np.ndarray:
    """Serve the demand reconstructed from queue movement.

    Each recorded transition reveals the arrivals exactly: what joined the
    queue is its change plus what was discharged, lam(k) = q(k) - q(k-1)
    + u(k-1). The command is the mean of the latest reconstructions (up to
    averaging_window of them), plus the drain offset epsilon while any
    queue is still standing; with a single-step window and constant
    arrivals this telescopes to the arrivals themselves after one step.
    """
    queues = [np.asarray(q, dtype=float) for q in queue_history]
    controls = [np.asarray(u, dtype=float) for u in control_history]
    if len(queues) < 2 or len(controls) < len(queues) - 1:
        raise ValueError("need at least two queue readings and the control between them")
    depth = min(cfg.averaging_window, len(queues) - 1)
    recon = [queues[-k] - queues[-k - 1] + controls[-k] for k in range(1, depth + 1)]
    u = np.mean(recon, axis=0)
    if np.any(queues[-1] > 0.0):
        u = u + cfg.epsilon
    upper = np.inf if u_max is None else np.asarray(u_max, dtype=float)
    return np.clip(u, 0.0, upper)


def dual_mode_supervisor(phase: str, x_hat_up, terminal: TerminalSet, *,
                         revert_on_exit: bool = True, tol: float = 1e-9) -> str:
    """Switch to local tracking once the upper estimate sits in the terminal
    box (boundary included); optionally switch back when it leaves."""
    inside = bool(np.all(np.asarray(x_hat_up, dtype=float) <= terminal.x_f + tol))
    if phase == PHASE_MPC:
        return PHASE_LOCAL if inside else PHASE_MPC
    if phase != PHASE_LOCAL:
        raise ValueError(f"unknown phase {phase!r}")
    if inside or not revert_on_exit:
        return PHASE_LOCAL
    return PHASE_MPC


def pin_jam_to_upper(bounds: ParamBounds) -> ParamBounds:
    """Collapse the jam interval onto its upper bound for planning.

    The horizon planner needs a single jam profile; using the upper bound
    keeps every admissible merge admissible in the plan.
    """
    if bounds.jam_is_point:
        return bounds
    return ParamBounds(
        upper=bounds.upper,
        lower=replace(bounds.lower, x_jam=bounds.upper.x_jam))


def _ingest(state: SetPcState, y, config: SetPcConfig):
    """Measurement correction, window push, parameter and demand refresh."""
    window = state.window
    corrected = state_update(state.predicted, y, window.output_model)
    if state.last_control is None:
        window.push(corrected, y)
    else:
        window.push(corrected, y, control=state.last_control, demand=state.demand)
    theta = theta_update(window, state.params, config.estimator)
    if config.track_demand and len(window) > 1:
        demand = demand_update(window)
    else:
        # The window reconstructions assume the arrivals sit still; when
        # they provably vary, the configured box is the only sound one.
        demand = state.demand
    return corrected, theta, demand


def _dispatch(state, corrected, theta, demand, command, *, next_phase,
              diag_phase, value, feasible, reduced=None):
    """Clamp the command, predict the next box, assemble the successor."""
    n = state.window.output_model.mainline_mask.shape[0]
    cap = corrected.lower[n:] + demand.lower
    u_exec = np.clip(command, 0.0, np.minimum(cap, theta.upper.u_max))
    predicted = lifted_step(corrected, u_exec, demand, theta)
    successor = SetPcState(predicted=predicted, params=theta, demand=demand,
                           window=state.window, phase=next_phase,
                           last_control=u_exec)
    diag = StepDiagnostics(
        value=value, feasible=feasible, phase=diag_phase,
        state_width=float(np.max(corrected.width)),
        theta_width=theta_width(theta), reduced=reduced, corrected=corrected)
    return u_exec, successor, diag


def setpc_step(state: SetPcState, y, config: SetPcConfig):
    """One tick of the set-membership predictive loop.

    Runs, in order: the measurement correction, the parameter contraction,
    the demand refresh, the phase decision and control computation, and the
    tube prediction for the next tick. The executed control is clamped to
    the guaranteed service bound min(u, q-lower + lam-lower) so the plant's
    ramp discharge equals the command exactly and containment carries over.
    Returns (executed control, successor state, diagnostics); estimator and
    solver errors propagate.
    """
    corrected, theta, demand = _ingest(state, y, config)

    if config.dual_mode:
        phase = dual_mode_supervisor(state.phase, corrected.upper, config.terminal,
                                     revert_on_exit=config.revert_on_exit)
    else:
        phase = PHASE_MPC

    reduced = None
    if phase == PHASE_MPC:
        planning = pin_jam_to_upper(theta) if config.pin_jam else theta
        result = solve_mpc(corrected, demand, planning, config.mpc,
                           config.terminal, budget=config.budget,
                           options=config.options,
                           allow_reduced=config.allow_reduced)
        command = result.u
        value = result.value
        feasible = result.feasible
        reduced = result.reduced
    else:
        queue_history = [np.asarray(obs.y_ramp, dtype=float)
                         for obs in state.window.observations]
        command = local_controller(queue_history, state.window.controls,
                                   config.local, u_max=theta.upper.u_max)
        value = math.nan
        feasible = True

    return _dispatch(state, corrected, theta, demand, command,
                     next_phase=phase, diag_phase=phase, value=value,
                     feasible=feasible, reduced=reduced)


def forced_step(state: SetPcState, y, config: SetPcConfig, command, *,
                label: str = "warmup"):
    """Estimator tick with an externally chosen command.

    Used to prime the measurement window before the planner takes over:
    the full correction, contraction and prediction pipeline runs, but the
    command is whatever the caller supplies (still clamped to the service
    bound). The successor keeps the control phase it had, so the next
    planned tick resumes where the loop left off; the diagnostics carry
    the supplied label instead.
    """
    corrected, theta, demand = _ingest(state, y, config)
    return _dispatch(state, corrected, theta, demand, command,
                     next_phase=state.phase, diag_phase=label,
                     value=math.nan, feasible=True)
