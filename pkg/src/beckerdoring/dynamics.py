"""Mass-conserving time integration of the truncated Becker-Doring system.

The truncated system closes with ``J_N = 0``:

    dc_1/dt = -J_1 - sum_{i<N} J_i,   dc_i/dt = J_{i-1} - J_i,   dc_N/dt = J_{N-1}

so ``sum_i i c_i`` is conserved exactly in exact arithmetic.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import RK45

from .exceptions import IntegrationError, StiffnessError
from .model import sizes

log = logging.getLogger(__name__)

NEG_CLAMP = 1e-14
DT_MIN = 1e-14
METHODS = ("explicit_adaptive", "implicit_euler")


def fluxes(c, model):
    """All fluxes ``J_1..J_{N-1}``."""
    c = np.asarray(c, dtype=float)
    return model.a[:-1] * c[0] * c[:-1] - model.b[1:] * c[1:]


def flux(c, model, i):
    """``J_i = a_i c_1 c_i - b_{i+1} c_{i+1}`` for ``1 <= i <= N-1``."""
    N = model.N
    if not 1 <= i <= N - 1:
        raise IndexError(f"flux index {i} outside 1..{N - 1}")
    return float(model.a[i - 1] * c[0] * c[i - 1] - model.b[i] * c[i])


def rhs(c, model):
    J = fluxes(c, model)
    dc = np.zeros_like(J, shape=J.size + 1)
    dc[1:] += J
    dc[:-1] -= J
    dc[0] -= J.sum()
    return dc


def rhs_jacobian(c, model):
    """Dense Jacobian of :func:`rhs` (used by the implicit stepper)."""
    c = np.asarray(c, dtype=float)
    N = c.size
    a, b = model.a, model.b
    dJ = np.zeros((N - 1, N))
    k = np.arange(N - 1)
    dJ[:, 0] = a[:-1] * c[:-1]
    dJ[k, k] += a[:-1] * c[0]
    dJ[k, k + 1] = -b[1:]
    # dc = S J with S_{i,k} = +1 (i=k+1), -1 (i=k), -1 (i=0)
    jac = np.zeros((N, N))
    jac[1:, :] += dJ
    jac[:-1, :] -= dJ
    jac[0, :] -= dJ.sum(axis=0)
    return jac


def entropy(c, log_qtilde):
    """``sum c_i (log(c_i / Qt_i) - 1)`` with ``0 log 0 = 0``.

    Takes ``log Qt`` rather than ``Qt`` so far-tail coefficients never
    underflow.
    """
    c = np.asarray(c, dtype=float)
    pos = c > 0
    cp = c[pos]
    return float(np.sum(cp * (np.log(cp) - log_qtilde[pos] - 1.0)))


def relative_entropy(c, log_Q):
    """``sum [c_i log(c_i/Q_i) - c_i + Q_i]``; zero only at ``c = Q``."""
    c = np.asarray(c, dtype=float)
    Q = np.exp(log_Q)
    out = Q.copy()
    pos = c > 0
    cp = c[pos]
    out[pos] = cp * (np.log(cp) - log_Q[pos]) - cp + Q[pos]
    return float(np.sum(out))


def mass(c):
    return float(np.dot(sizes(len(c)), c))


@dataclass
class IntegratorConfig:
    method: str = "explicit_adaptive"
    rtol: float = 1e-8
    atol: float = 1e-14
    dt_init: float = 1e-3
    dt_max: float = 1.0
    t_end: float = 10.0
    checkpoint_times: list = field(default_factory=list)
    interpolation: str = "dense"

    def __post_init__(self):
        if self.interpolation not in ("dense", "linear"):
            raise ValueError("interpolation must be 'dense' or 'linear'")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("rtol and atol must be positive")
        if self.dt_init > self.dt_max:
            raise ValueError("dt_init must not exceed dt_max")
        ts = [float(t) for t in self.checkpoint_times]
        if ts != sorted(ts):
            raise ValueError("checkpoint_times must be sorted")
        if ts and (ts[0] < 0 or ts[-1] > self.t_end):
            raise ValueError("checkpoint_times must lie in [0, t_end]")
        self.checkpoint_times = ts

    def to_dict(self):
        return {
            "method": self.method,
            "rtol": self.rtol,
            "atol": self.atol,
            "dt_init": self.dt_init,
            "dt_max": self.dt_max,
            "t_end": self.t_end,
            "checkpoint_times": list(self.checkpoint_times),
            "interpolation": self.interpolation,
        }


@dataclass(frozen=True)
class StateVector:
    t: float
    c: np.ndarray
    mass: float
    entropy: float


@dataclass
class Trajectory:
    states: list
    step_t: np.ndarray
    step_entropy: np.ndarray
    step_mass: np.ndarray
    n_steps: int
    n_rejected: int
    n_clamped: int
    worst_negative: float
    max_entropy_increase: float

    @property
    def times(self):
        return np.array([s.t for s in self.states])

    @property
    def concentrations(self):
        return np.array([s.c for s in self.states])

    @property
    def mass_drift(self):
        m0 = self.step_mass[0]
        return float(np.max(np.abs(self.step_mass - m0)) / abs(m0))

    @property
    def entropy_monotone(self):
        return self.max_entropy_increase <= 0.0


def stiffness_scale(c, model):
    """``max_i (a_i c_1 + b_i)``, the fastest local relaxation rate."""
    return float(np.max(model.a * max(c[0], 0.0) + model.b))


class _Recorder:
    def __init__(self, c0, model, log_qtilde, checkpoints, callback):
        self.model = model
        self.log_qtilde = log_qtilde
        self.checkpoints = list(checkpoints)
        self.next_cp = 0
        self.states = []
        self.callback = callback
        self.t = [0.0]
        self.V = [entropy(c0, log_qtilde)]
        self.m = [mass(c0)]
        self.max_increase = -math.inf
        self.n_clamped = 0
        self.worst_negative = 0.0
        self._emit_until(0.0, 0.0, c0, 0.0, c0)
        if callback is not None:
            callback(0.0, c0)

    def wants(self, t1):
        return self.next_cp < len(self.checkpoints) and self.checkpoints[self.next_cp] <= t1 + 1e-12 * max(1.0, t1)

    def _emit_until(self, t0, t_prev, c_prev, t1, c1, dense=None):
        # dense output of the stepper when available, else linear interpolation
        while self.wants(t1):
            tc = self.checkpoints[self.next_cp]
            if dense is not None and t_prev < tc < t1:
                c = np.maximum(dense(tc), 0.0)
            elif t1 > t_prev:
                w = (tc - t_prev) / (t1 - t_prev)
                c = (1 - w) * c_prev + w * c1
            else:
                c = c1.copy()
            self.states.append(StateVector(tc, c, mass(c), entropy(c, self.log_qtilde)))
            self.next_cp += 1

    def clamp(self, c, t):
        cmin = c.min()
        if cmin >= 0:
            return c, False
        scale = np.abs(c).max()
        self.worst_negative = min(self.worst_negative, cmin / scale)
        if cmin < -NEG_CLAMP * scale:
            raise IntegrationError(f"negative concentration {cmin:.3e} at t={t:.6g} beyond clamp threshold")
        neg = c < 0
        self.n_clamped += int(neg.sum())
        log.debug("clamped %d negative entries (min %.3e) at t=%.6g", neg.sum(), cmin, t)
        c = c.copy()
        c[neg] = 0.0
        return c, True

    def accept(self, t_prev, c_prev, t, c, dense=None):
        V = entropy(c, self.log_qtilde)
        dV = V - self.V[-1]
        self.max_increase = max(self.max_increase, dV - 1e-12 * abs(self.V[-1]))
        self.t.append(t)
        self.V.append(V)
        self.m.append(mass(c))
        self._emit_until(t_prev, t_prev, c_prev, t, c, dense)
        if self.callback is not None:
            self.callback(t, c)

    def finish(self, n_steps, n_rejected):
        return Trajectory(
            states=self.states,
            step_t=np.array(self.t),
            step_entropy=np.array(self.V),
            step_mass=np.array(self.m),
            n_steps=n_steps,
            n_rejected=n_rejected,
            n_clamped=self.n_clamped,
            worst_negative=self.worst_negative,
            max_entropy_increase=self.max_increase if n_steps else 0.0,
        )


def integrate(c0, model, config, log_qtilde=None, step_callback: Optional[Callable] = None):
    """Integrate from ``c0`` to ``config.t_end``.

    Returns a :class:`Trajectory` with states at ``config.checkpoint_times``
    (dense output of the RK45 step, or linear interpolation between accepted
    steps, as set by ``config.interpolation``) and per-step mass and
    entropy records. ``step_callback(t, c)`` is called at t=0 and after
    every accepted step.
    """
    c0 = np.asarray(c0, dtype=float).copy()
    if c0.shape != (model.N,):
        raise ValueError(f"initial state has shape {c0.shape}, expected ({model.N},)")
    if np.any(c0 < 0) or not np.all(np.isfinite(c0)):
        raise ValueError("initial state must be finite and nonnegative")
    if log_qtilde is None:
        from .model import log_detailed_balance

        log_qtilde = log_detailed_balance(model)
    rec = _Recorder(c0, model, log_qtilde, config.checkpoint_times, step_callback)
    if config.method == "explicit_adaptive":
        n, nrej = _explicit(c0, model, config, rec)
    else:
        n, nrej = _implicit_euler(c0, model, config, rec)
    return rec.finish(n, nrej)


def _explicit(c0, model, config, rec):
    def fun(t, c):
        return rhs(c, model)

    cap = min(config.dt_max, 1.0 / stiffness_scale(c0, model))
    solver = RK45(
        fun, 0.0, c0, config.t_end, rtol=config.rtol, atol=config.atol,
        first_step=min(config.dt_init, cap), max_step=cap,
    )
    n = 0
    nrej = 0
    while solver.status == "running":
        t_prev, c_prev = solver.t, solver.y.copy()
        solver.max_step = min(config.dt_max, 1.0 / stiffness_scale(c_prev, model))
        msg = solver.step()
        if solver.status == "failed":
            raise StiffnessError(f"explicit step failed at t={t_prev:.6g} ({msg}); try method='implicit_euler'")
        if solver.step_size is not None and solver.step_size < DT_MIN and solver.t < config.t_end:
            raise StiffnessError(f"step size {solver.step_size:.3e} underflow at t={solver.t:.6g}; try method='implicit_euler'")
        dense = solver.dense_output() if config.interpolation == "dense" and rec.wants(solver.t) else None
        c, clamped = rec.clamp(solver.y, solver.t)
        if clamped:
            solver.y = c
            solver.f = fun(solver.t, c)
        n += 1
        rec.accept(t_prev, c_prev, solver.t, c, dense)
    return n, nrej


def _implicit_euler_step(c_n, dt, model, tol=1e-13, max_iter=30):
    """One backward Euler step solved by damped Newton; None if Newton fails."""
    c = c_n + dt * rhs(c_n, model)
    c = np.maximum(c, 0.0)
    scale = np.abs(c_n).max()
    I = np.eye(c_n.size)
    for _ in range(max_iter):
        F = c - c_n - dt * rhs(c, model)
        fn = np.abs(F).max()
        if fn <= tol * scale:
            return c
        M = I - dt * rhs_jacobian(c, model)
        try:
            delta = np.linalg.solve(M, -F)
        except np.linalg.LinAlgError:
            return None
        lam = 1.0
        while lam > 1e-4:
            trial = c + lam * delta
            Ft = trial - c_n - dt * rhs(trial, model)
            if np.abs(Ft).max() < (1 - 0.5 * lam) * fn or np.abs(Ft).max() <= tol * scale:
                break
            lam *= 0.5
        c = trial
    F = c - c_n - dt * rhs(c, model)
    return c if np.abs(F).max() <= 1e3 * tol * scale else None


def _implicit_euler(c0, model, config, rec):
    # step doubling: compare one step of dt with two of dt/2
    t = 0.0
    c = c0
    dt = min(config.dt_init, config.dt_max)
    n = 0
    nrej = 0
    while t < config.t_end * (1 - 1e-15):
        dt = min(dt, config.t_end - t)
        if dt < DT_MIN:
            raise StiffnessError(f"implicit step size {dt:.3e} underflow at t={t:.6g}")
        full = _implicit_euler_step(c, dt, model)
        half = _implicit_euler_step(c, dt / 2, model)
        two = _implicit_euler_step(half, dt / 2, model) if half is not None else None
        if full is None or two is None:
            dt *= 0.25
            nrej += 1
            continue
        sc = config.atol + config.rtol * np.maximum(np.abs(two), np.abs(c))
        err = np.sqrt(np.mean(((two - full) / sc) ** 2))
        if err > 1.0:
            dt *= max(0.2, 0.9 / math.sqrt(err))
            nrej += 1
            continue
        # Richardson extrapolation keeps first-order mass-conservation exactness
        c_new, _ = rec.clamp(2 * two - full if np.all(2 * two - full >= 0) else two, t + dt)
        rec.accept(t, c, t + dt, c_new)
        t += dt
        c = c_new
        n += 1
        dt = min(config.dt_max, dt * min(4.0, 0.9 / math.sqrt(max(err, 1e-10))))
    return n, nrej
