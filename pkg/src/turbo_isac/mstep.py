"""Turbo-SBI M step: EM surrogate of the grid log-likelihood, its gradient,
Armijo gradient ascent on the dynamic grid and the outer EM loop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .estep import EstepConfig, GaussianBelief, SupportPosterior, run_estep
from .geometry import AngularGrid, clamp_angles, steering_derivative_matrix, steering_matrix
from .observation import Observation, PilotSet, build_operator
from .scene import HmmParams


@dataclass(frozen=True)
class MstepConfig:
    max_outer: int = 30
    c1: float = 1e-4
    beta: float = 0.5
    max_backtracks: int = 30
    grid_tol: float = 1e-4
    step_init: float = 1.0
    step_cap_fraction: float = 0.49  # of the smallest neighbouring grid gap
    update_floor: float | None = None  # restrict updates to indices with support prob above this
    steps_per_iteration: int = 1
    noise_floor: float = 1e-10

    def __post_init__(self):
        if not (0 < self.c1 < 1 and 0 < self.beta < 1):
            raise ValueError("Armijo constants must lie in (0, 1)")
        if self.grid_tol <= 0 or self.step_init <= 0 or self.max_outer < 1:
            raise ValueError("tolerances, step and iteration count must be positive")


def _columns(theta, dp, up, m):
    """Operator columns and their angle derivatives for both blocks."""
    a = steering_matrix(theta, m)
    da = steering_derivative_matrix(theta, m)
    proj = dp @ a.conj()  # a^H v_p
    dproj = dp @ da.conj()
    f_r = (a[None] * proj[:, None]).reshape(-1, a.shape[1])
    g_r = (da[None] * proj[:, None] + a[None] * dproj[:, None]).reshape(-1, a.shape[1])
    f_c = (up[:, None, None] * a[None]).reshape(-1, a.shape[1])
    g_c = (up[:, None, None] * da[None]).reshape(-1, a.shape[1])
    return f_r, g_r, f_c, g_c


def _noise(obs: Observation, floor: float):
    return max(obs.noise_var_r, floor), max(obs.noise_var_c, floor)


def surrogate_q(grid: AngularGrid, belief: GaussianBelief, dp: np.ndarray, up: np.ndarray,
                obs: Observation, noise_floor: float = 1e-10) -> float:
    """Q(theta) = -sum_blocks (||y - F x||^2 + sum_m v_m ||F e_m||^2) / noise_var, constant dropped."""
    m = dp.shape[1]
    f_r, _, f_c, _ = _columns(grid.theta, dp, up, m)
    s_r, s_c = _noise(obs, noise_floor)
    xr, vr = belief.radar()
    xc, vc = belief.comm()
    q = 0.0
    for f, x, v, y, s in ((f_r, xr, vr, obs.y_r, s_r), (f_c, xc, vc, obs.y_c, s_c)):
        if f.shape[0] == 0:
            continue
        res = y - f @ x
        q -= (np.real(np.vdot(res, res)) + np.sum(v * np.sum(np.abs(f) ** 2, axis=0))) / s
    return float(q)


def gradient_q(grid: AngularGrid, belief: GaussianBelief, dp: np.ndarray, up: np.ndarray,
               obs: Observation, noise_floor: float = 1e-10) -> np.ndarray:
    """Analytic dQ/dtheta, one entry per grid angle (radar and comm terms summed)."""
    m = dp.shape[1]
    f_r, g_r, f_c, g_c = _columns(grid.theta, dp, up, m)
    s_r, s_c = _noise(obs, noise_floor)
    xr, vr = belief.radar()
    xc, vc = belief.comm()
    grad = np.zeros(grid.m_tilde)
    for f, g, x, v, y, s in ((f_r, g_r, xr, vr, obs.y_r, s_r), (f_c, g_c, xc, vc, obs.y_c, s_c)):
        if f.shape[0] == 0:
            continue
        res = y - f @ x
        data = x * (res.conj() @ g)
        self_term = v * np.sum(f.conj() * g, axis=0)
        grad += 2.0 / s * np.real(data - self_term)
    return grad


def _step_cap(theta: np.ndarray, fraction: float) -> float:
    if theta.size < 2:
        return fraction * np.pi / 2
    gaps = np.diff(np.sort(theta))
    return fraction * float(np.min(gaps)) if np.min(gaps) > 0 else 0.0


def mstep_update(grid: AngularGrid, gradient: np.ndarray, config: MstepConfig = MstepConfig(),
                 q_fn=None, q0: float | None = None) -> tuple[AngularGrid, dict]:
    """Backtracking ascent step along ``gradient``.

    ``q_fn`` maps a candidate angle vector to Q. Each entry moves by at most the
    configured fraction of the smallest neighbouring gap, keeping a sorted grid
    sorted. When no step passes the sufficient-increase test the grid is returned
    unchanged.
    """
    gradient = np.asarray(gradient, float)
    if not np.all(np.isfinite(gradient)):
        raise ValueError("gradient must be finite")
    theta = grid.theta
    info = {"accepted": False, "step": 0.0, "q_old": q0, "q_new": q0, "backtracks": 0}
    if not gradient.size or np.max(np.abs(gradient)) == 0.0 or q_fn is None:
        return grid, info
    cap = _step_cap(theta, config.step_cap_fraction)
    if cap <= 0:
        return grid, info
    d = gradient
    tau = min(config.step_init, cap / np.max(np.abs(d)))
    if q0 is None:
        q0 = q_fn(theta)
    info["q_old"] = info["q_new"] = q0
    for k in range(config.max_backtracks):
        cand = clamp_angles(theta + tau * d)
        q_new = q_fn(cand)
        # the clamp may shorten the step, so measure the increase along the actual move
        if q_new >= q0 + config.c1 * float(gradient @ (cand - theta)) and q_new >= q0:
            info.update(accepted=True, step=tau, q_new=q_new, backtracks=k)
            return AngularGrid(cand), info
        tau *= config.beta
    info["backtracks"] = config.max_backtracks
    return grid, info


@dataclass
class TurboResult:
    grid: AngularGrid
    belief: GaussianBelief
    support: SupportPosterior
    outer_iterations: int
    converged: bool
    estep_converged: bool
    trace: list = field(default_factory=list)

    def detections(self, threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
        """Indices whose support posterior strictly exceeds ``threshold``."""
        return (np.flatnonzero(self.support.pi_r > threshold),
                np.flatnonzero(self.support.pi_c > threshold))


def run_turbo_sbi(pilots: PilotSet, obs: Observation, params: HmmParams, stage: int = 1,
                  estep: EstepConfig = EstepConfig(), mstep: MstepConfig = MstepConfig(),
                  grid0: AngularGrid | None = None, fixed_grid: bool = False) -> TurboResult:
    """Alternate the E step and one Armijo grid step until the grid stops moving.

    A closing E step is run on the final grid so the returned belief and support
    correspond to it.
    """
    grid = grid0 if grid0 is not None else AngularGrid.uniform(pilots.m)
    dp = pilots.downlink(stage)
    up = pilots.up
    trace = []
    converged = False
    outer = 0
    est = None
    for outer in range(1, mstep.max_outer + 1):
        op = build_operator(pilots, grid, stage)
        est = run_estep(op, obs, params, estep)
        if fixed_grid:
            converged = True
            break
        belief = est.belief
        grad = gradient_q(grid, belief, dp, up, obs, mstep.noise_floor)
        if mstep.update_floor is not None:
            keep = np.maximum(est.support.pi_r, est.support.pi_c) > mstep.update_floor
            grad = np.where(keep, grad, 0.0)

        def q_fn(th, belief=belief):
            return surrogate_q(AngularGrid(th), belief, dp, up, obs, mstep.noise_floor)

        new_grid = grid
        q_start = None
        info = {"q_new": None}
        for _ in range(mstep.steps_per_iteration):
            stepped, info = mstep_update(new_grid, grad, mstep, q_fn, info["q_new"])
            q_start = info["q_old"] if q_start is None else q_start
            if not info["accepted"]:
                break
            new_grid = stepped
            grad = gradient_q(new_grid, belief, dp, up, obs, mstep.noise_floor)
            if mstep.update_floor is not None:
                grad = np.where(keep, grad, 0.0)
        change = float(np.linalg.norm(new_grid.theta - grid.theta))
        trace.append({"iteration": outer, "q_value": info["q_new"], "q_before": q_start,
                      "grid_max_change": float(np.max(np.abs(new_grid.theta - grid.theta))),
                      "estep_iterations": est.iterations_used})
        grid = new_grid
        if change <= mstep.grid_tol:
            converged = True
            break
    if not fixed_grid:
        est = run_estep(build_operator(pilots, grid, stage), obs, params, estep)
    return TurboResult(grid, est.belief, est.support, outer, converged, est.converged, trace)
