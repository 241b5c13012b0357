"""Adaptive Tsitouras 5(4) integration with a discrete adjoint.

States are row-major flattened complex density matrices. The integrator
never projects internal states; :func:`project_physical` is applied once
to every reported state.

Reverse mode replays the recorded accepted steps backwards. Step sizes are
treated as constants, so the returned gradient is the exact gradient of the
discretised loss.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .spinops import pauli_basis, project_physical, project_physical_vjp

# Tsitouras (2011) tableau.
C = np.array([0.0, 0.161, 0.327, 0.9, 0.9800255409045097, 1.0, 1.0])
A = np.zeros((7, 7))
A[1, :1] = [0.161]
A[2, :2] = [-0.008480655492356989, 0.335480655492357]
A[3, :3] = [2.897153057105493, -6.359448489975075, 4.3622954328695815]
A[4, :4] = [5.325864828439257, -11.748883564062828, 7.4955393428898365, -0.09249506636175525]
A[5, :5] = [5.86145544294642, -12.92096931784711, 8.159367898576159, -0.071584973281401,
            -0.028269050394068383]
A[6, :6] = [0.09646076681806523, 0.01, 0.4798896504144996, 1.379008574103742,
            -3.290069515436081, 2.324710524099774]
B = A[6].copy()
# b - b_hat, for the embedded error estimate
B_ERR = np.array([-0.00178001105222577714, -0.0008164344596567469, 0.007880878010261995,
                  -0.1447110071732629, 0.5823571654525552, -0.45808210592918697,
                  0.015151515151515152])
# Continuous extension: b_i(s) = sum_p DENSE[i, p] * s**(p + 1)
DENSE = np.array([
    [1.0, -2.763706197274826, 2.9132554618219126, -1.0530884977290216],
    [0.0, 0.13169999999999998, -0.2234, 0.1017],
    [0.0, 3.9302962368947516, -5.941033872131505, 2.490627285651253],
    [0.0, -12.411077166933676, 30.33818863028232, -16.548102889244902],
    [0.0, 37.50931341651104, -88.1789048947664, 47.37952196281928],
    [0.0, -27.896526289197286, 65.09189467479366, -34.87065786149661],
    [0.0, 1.5, -4.0, 2.5],
])


def dense_weights(s: float) -> np.ndarray:
    """Stage weights of the interpolant at fraction ``s`` of a step."""
    return DENSE @ np.array([s, s**2, s**3, s**4])


class IntegrationError(RuntimeError):
    """Step budget exhausted or step size underflow."""


@dataclass(frozen=True)
class IntegratorConfig:
    rtol: float = 1e-6
    atol: float = 1e-8
    dt0: float = 1e-3
    max_steps: int = 100_000
    safety: float = 0.9
    min_factor: float = 0.2
    max_factor: float = 5.0
    min_dt: float = 1e-12
    method: str = "tsit5-like explicit RK5(4) with adaptive PI step control"

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")

    def to_dict(self) -> dict:
        return {"rtol": self.rtol, "atol": self.atol, "dt0": self.dt0, "max_steps": self.max_steps}


@dataclass
class StepRecord:
    t: float
    h: float
    stages: np.ndarray  # (7, n) stage inputs Y_i
    ks: np.ndarray  # (7, n) stage derivatives k_i
    outputs: list = field(default_factory=list)  # (output index, fraction s)


@dataclass
class Trajectory:
    """Reported states at ``times`` plus the accepted-step log."""

    times: np.ndarray
    states: np.ndarray  # (T, d, d), projected
    raw_states: np.ndarray  # (T, d, d), before projection
    steps: list
    n_rejected: int = 0

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def to_csv(self, path) -> None:
        """Write ``time`` and real Pauli coordinates of every reported state."""
        d = self.states.shape[1]
        n = int(np.log2(d))
        paulis = pauli_basis(n)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"c{j}" for j in range(4**n)])
            for t, rho in zip(self.times, self.states):
                coeffs = np.einsum("jab,ba->j", paulis, rho).real / d
                w.writerow([repr(float(t))] + [repr(float(c)) for c in coeffs])


def _error_norm(err, y0, y1, cfg: IntegratorConfig) -> float:
    scale = cfg.atol + cfg.rtol * np.maximum(np.abs(y0), np.abs(y1))
    return float(np.sqrt(np.mean(np.abs(err / scale) ** 2)))


def _check_times(times) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) == 0:
        raise ValueError("need a non-empty 1-D array of output times")
    if times[0] < 0 or np.any(np.diff(times) <= 0):
        raise ValueError("output times must be non-negative and strictly increasing")
    return times


def _integrate(field, y0: np.ndarray, times: np.ndarray, cfg: IntegratorConfig, record: bool):
    """Core stepper. Returns raw outputs, step log and rejection count."""
    n_out = len(times)
    outputs = np.empty((n_out, y0.size), dtype=y0.dtype)
    steps = []
    t, y = 0.0, y0.copy()
    next_out = 0
    while next_out < n_out and times[next_out] == 0.0:
        outputs[next_out] = y
        next_out += 1
    t_end = float(times[-1])
    h = min(cfg.dt0, t_end) if t_end > 0 else 0.0
    k1 = field(y) if next_out < n_out else None
    err_prev = 1.0
    n_rej = 0
    ks = np.empty((7, y0.size), dtype=y0.dtype)
    stages = np.empty((7, y0.size), dtype=y0.dtype)
    while next_out < n_out:
        if len(steps) >= cfg.max_steps:
            raise IntegrationError(f"exceeded max_steps={cfg.max_steps} at t={t:.6g}")
        if h < cfg.min_dt:
            raise IntegrationError(f"step size underflow (h={h:.3e}) at t={t:.6g}")
        last = t + h >= t_end
        if last:
            h = t_end - t
        ks[0] = k1
        stages[0] = y
        for i in range(1, 7):
            yi = y + h * (A[i, :i] @ ks[:i])
            stages[i] = yi
            ks[i] = field(yi)
        y_new = stages[6]
        err = _error_norm(h * (B_ERR @ ks), y, y_new, cfg)
        if not np.isfinite(err):
            raise IntegrationError(f"non-finite state at t={t:.6g}")
        if err <= 1.0:
            t_new = t_end if last else t + h
            rec = StepRecord(t, h, stages.copy(), ks.copy()) if record else None
            while next_out < n_out and times[next_out] <= t_new:
                s = (times[next_out] - t) / h
                if s >= 1.0:
                    outputs[next_out] = y_new
                    s = 1.0
                else:
                    outputs[next_out] = y + h * (dense_weights(s) @ ks)
                if rec is not None:
                    rec.outputs.append((next_out, s))
                next_out += 1
            steps.append(rec)
            t, y, k1 = t_new, y_new.copy(), ks[6].copy()
            err = max(err, 1e-10)
            fac = cfg.safety * err ** (-0.7 / 5) * err_prev ** (0.4 / 5)
            h *= min(cfg.max_factor, max(cfg.min_factor, fac))
            err_prev = err
        else:
            n_rej += 1
            h *= max(cfg.min_factor, cfg.safety * err ** (-1 / 5))
    return outputs, steps, n_rej


def _as_state_vector(rho0) -> tuple:
    rho0 = np.asarray(rho0, dtype=complex)
    d = rho0.shape[0]
    if rho0.shape != (d, d):
        raise ValueError("initial state must be a square matrix")
    return rho0.reshape(-1).copy(), d


def evolve(field: Callable, rho0, times: Sequence[float], cfg: Optional[IntegratorConfig] = None,
           record: bool = False) -> Trajectory:
    """Integrate ``drho/dt = field(rho)`` from ``t = 0`` and report at ``times``.

    ``field`` acts on the row-major flattened density matrix.
    """
    cfg = cfg or IntegratorConfig()
    times = _check_times(times)
    y0, d = _as_state_vector(rho0)
    raw, steps, n_rej = _integrate(field, y0, times, cfg, record)
    raw = raw.reshape(len(times), d, d)
    states = np.stack([project_physical(m) for m in raw])
    return Trajectory(times, states, raw, steps if record else [], n_rej)


def backward(field, traj: Trajectory, out_cts: np.ndarray):
    """Reverse pass through a recorded trajectory.

    ``out_cts`` are cotangents of the *raw* outputs, shape ``(T, d, d)``.
    Returns ``(grad_params, cotangent of rho0)``.
    """
    acc = field.new_accumulator()
    cts = out_cts.reshape(len(traj.times), -1)
    ybar = np.zeros(cts.shape[1], dtype=complex)
    # outputs reported exactly at t = 0 (before any step)
    handled = {i for st in traj.steps for i, _ in st.outputs}
    for i in range(len(traj.times)):
        if i not in handled:
            ybar += cts[i]
    kbar = np.empty((7, cts.shape[1]), dtype=complex)
    for st in reversed(traj.steps):
        h = st.h
        kbar[:] = 0.0
        # y1 = Y_7 = y0 + h * sum_j B_j k_j; its cotangent flows to y0 and k_j
        kbar += h * B[:, None] * ybar[None, :]
        for idx, s in st.outputs:
            if s >= 1.0:
                kbar += h * B[:, None] * cts[idx][None, :]
                ybar = ybar + cts[idx]
            else:
                kbar += h * dense_weights(s)[:, None] * cts[idx][None, :]
                ybar = ybar + cts[idx]
        for i in range(6, -1, -1):
            if i == 6 and not np.any(kbar[6]):
                continue
            ybar_i = field.vjp(st.stages[i], kbar[i], acc)
            if i == 0:
                ybar = ybar + ybar_i
            else:
                ybar = ybar + ybar_i
                kbar[:i] += h * A[i, :i, None] * ybar_i[None, :]
    return field.finalize(acc), ybar


def evolve_with_gradient(field, rho0, times, loss_fn: Callable, cfg: Optional[IntegratorConfig] = None):
    """Loss and parameter gradient through the solver.

    ``loss_fn(states)`` receives the projected states ``(T, d, d)`` and returns
    ``(loss, cotangents)`` with cotangents of the same shape. Returns
    ``(loss, grad, trajectory)``.
    """
    traj = evolve(field, rho0, times, cfg, record=True)
    loss, state_cts = loss_fn(traj.states)
    raw_cts = np.stack([project_physical_vjp(m, c) for m, c in zip(traj.raw_states, state_cts)])
    grad, _ = backward(field, traj, raw_cts)
    return float(loss), grad, traj


def finite_diff_gradient(loss_of_params: Callable, params, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of a flat parameter vector."""
    if not h > 0:
        raise ValueError("finite-difference step must be positive")
    params = np.asarray(params, dtype=float)
    grad = np.zeros_like(params)
    for k in range(params.size):
        e = np.zeros_like(params)
        e[k] = h
        grad[k] = (loss_of_params(params + e) - loss_of_params(params - e)) / (2 * h)
    return grad
