"""Weighted norms, perturbations, decay experiments and rate fits.

Perturbations are stored in h-coordinates (``c = Q (1 + h)``) but every
computation runs on the density ``y = Q h = c - Q``; norms then read
``||h||_{X_k} = sum i^k |y_i|`` and never divide by the tiny tail of ``Q``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .dynamics import IntegratorConfig, integrate
from .exceptions import FitDomainError, FormulationError, InfeasiblePerturbationError
from .model import sizes

SLOPE_WINDOW = 10
FLOOR = 1e-12


# --- norms ------------------------------------------------------------------

def weighted_norm(h, Q, k=1.0, kind="poly", eta=None):
    """``sum Q_i w_i |h_i|`` with ``w = i^k`` (``poly``) or ``e^{eta i}`` (``exp``); ``H`` gives the l2(Q) norm."""
    h = np.asarray(h, dtype=float)
    Q = np.asarray(Q, dtype=float)
    i = sizes(h.size)
    if kind == "poly":
        return float(np.sum(Q * i**k * np.abs(h)))
    if kind == "exp":
        if eta is None:
            raise ValueError("exp norm needs eta")
        return float(np.sum(Q * np.exp(eta * i) * np.abs(h)))
    if kind == "H":
        return float(np.sqrt(np.sum(Q * h**2)))
    raise ValueError(f"unknown norm kind {kind!r}")


def density_norm(y, k=1.0):
    """``sum i^k |y_i|``; the X_k norm of ``h = y / Q``. Works on (N,) or (N, T)."""
    y = np.asarray(y, dtype=float)
    w = sizes(y.shape[0]) ** k
    return w @ np.abs(y) if y.ndim == 1 else (w[:, None] * np.abs(y)).sum(axis=0)


def embedding_constant(Q):
    """``(sum Q_i i^2)^{1/2}``, bounding ``||h||_{X_1}`` by ``||h||_H``."""
    Q = np.asarray(Q, dtype=float)
    return float(np.sqrt(np.sum(Q * sizes(Q.size) ** 2)))


# --- perturbations ----------------------------------------------------------

@dataclass
class Perturbation:
    """Zero-mass perturbation stored as its density ``y = Q h`` (``Q`` may underflow)."""

    y: np.ndarray
    equilibrium: object
    zero_mass_residual: float
    compensation: str = "h1"

    @property
    def Q(self):
        return self.equilibrium.Q

    @property
    def h(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.y == 0, 0.0, self.y / self.Q)

    @property
    def c(self):
        return np.maximum(self.Q + self.y, 0.0)

    def norm(self, k):
        return density_norm(self.y, k)

    def norms(self, ks):
        return {float(k): self.norm(k) for k in ks}


def _from_density(y, equilibrium, compensation):
    """Project a density perturbation to zero mass and check ``c >= 0``."""
    Q = equilibrium.Q
    i = sizes(y.size)
    mu = float(i @ y)
    y = y.copy()
    if compensation == "h1":
        y[0] -= mu
    elif compensation == "uniform":
        # constant shift of h: y_i -= Q_i * mu / sum Q_j j
        y -= Q * mu / float(i @ Q)
    else:
        raise ValueError(f"unknown compensation {compensation!r}")
    bad = np.flatnonzero(y < -Q * (1.0 + 1e-12))
    if bad.size:
        j = int(bad[0])
        raise InfeasiblePerturbationError(
            f"projected perturbation has h_{j + 1} = {y[j] / Q[j]:.3e} < -1 ({bad.size} sizes)")
    residual = abs(float(i @ y))
    return Perturbation(y, equilibrium, residual, compensation)


def project_zero_mass(h, equilibrium, compensation="h1"):
    """Remove the mass of ``h`` through ``h_1`` (default) or a constant shift."""
    h = np.asarray(h, dtype=float)
    if np.any(h < -1.0):
        raise InfeasiblePerturbationError("h_i < -1 before projection")
    return _from_density(equilibrium.Q * h, equilibrium, compensation)


def sign_pattern(name, N, seed=0):
    i = sizes(N)
    if isinstance(name, str):
        if name == "positive":
            return np.ones(N)
        if name == "negative":
            return -np.ones(N)
        if name == "alternating":
            return np.where(i % 2 == 1, 1.0, -1.0)
        if name == "random":
            return np.random.default_rng(seed).choice([-1.0, 1.0], size=N)
        raise ValueError(f"unknown sign pattern {name!r}")
    sigma = np.asarray(name, dtype=float)
    if sigma.shape != (N,):
        raise ValueError("sign pattern length differs from N")
    return sigma


def make_polynomial_tail(p, signs, amplitude, equilibrium, ks=(), scale="density",
                         compensation="h1", seed=0):
    """Perturbation with a power-law tail ``amplitude * sigma_i * i^{-p}``, projected to zero mass.

    ``scale="density"`` puts the power law on ``y = c - Q`` (an actual
    algebraic tail of clusters); ``scale="relative"`` puts it on ``h``.
    Warns when ``p <= k + 2`` for a requested ``k`` because the density
    ``X_{1+k}`` norm then grows without bound in ``N``.
    """
    if amplitude <= 0:
        raise ValueError("amplitude must be positive")
    N = equilibrium.N
    i = sizes(N)
    sigma = sign_pattern(signs, N, seed)
    profile = amplitude * sigma * i ** (-float(p))
    for k in ks:
        if p <= k + 2:
            warnings.warn(f"p={p} <= k+2={k + 2}: X_{1 + k} norm of the tail is not bounded in N",
                          RuntimeWarning, stacklevel=2)
    if scale == "density":
        return _from_density(profile, equilibrium, compensation)
    if scale == "relative":
        return project_zero_mass(profile, equilibrium, compensation)
    raise ValueError(f"unknown scale {scale!r}")


# --- fitting ----------------------------------------------------------------

def fit_rate(times, values, window=None):
    """Least squares of ``log values`` on ``log(1 + t)``: ``(slope, intercept, r2)``."""
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if window is not None:
        sel = (t >= window[0]) & (t <= window[1])
        t, v = t[sel], v[sel]
    if t.size < SLOPE_WINDOW:
        raise FitDomainError(f"need at least {SLOPE_WINDOW} points, got {t.size}")
    if np.any(~(v > 0)):
        raise FitDomainError("values must be positive on the fit window")
    x = np.log1p(t)
    ly = np.log(v)
    slope, intercept = np.polyfit(x, ly, 1)
    resid = ly - (slope * x + intercept)
    ss = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss if ss > 0 else 1.0
    return float(slope), float(intercept), float(r2)


def local_slopes(times, values, width=SLOPE_WINDOW):
    """Sliding least-squares slope of ``log values`` vs ``log(1+t)``, centred; NaN at the ends."""
    t = np.log1p(np.asarray(times, dtype=float))
    with np.errstate(divide="ignore"):
        v = np.log(np.asarray(values, dtype=float))
    n = t.size
    out = np.full(n, np.nan)
    if n < width:
        return out
    win = np.lib.stride_tricks.sliding_window_view
    T = win(t, width)
    V = win(v, width)
    Tc = T - T.mean(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = (Tc * (V - V.mean(axis=1, keepdims=True))).sum(axis=1) / (Tc**2).sum(axis=1)
    off = width // 2
    out[off:off + s.size] = s
    return out


def crossover_time(times, slopes, target):
    """First time the local slope is steeper than ``2 * target`` (None if it never is)."""
    band = -2.0 * abs(target)
    hit = np.flatnonzero(np.isfinite(slopes) & (slopes < band))
    return None if hit.size == 0 else float(np.asarray(times)[hit[0]])


def log_time_grid(t_end, per_decade=20, dt=0.25, t_start=1.0):
    """``0`` plus log-spaced times rounded to multiples of ``dt`` (duplicates dropped)."""
    n = int(np.ceil(per_decade * np.log10(t_end / t_start))) + 1
    t = np.round(np.logspace(np.log10(t_start), np.log10(t_end), n) / dt) * dt
    return np.unique(np.concatenate([[0.0], t[t > 0]]))


@dataclass
class DecayReport:
    k: float
    m: float
    rate: float
    times: np.ndarray
    norms: np.ndarray
    initial_norm_k: float
    domination_constant: float
    fitted_slope: float | None
    fit_window: tuple | None
    local_slope: np.ndarray
    crossover: float | None
    N: int
    N_sensitivity: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "k": self.k, "m": self.m, "rate": self.rate, "N": self.N,
            "initial_norm_k": self.initial_norm_k,
            "domination_constant": self.domination_constant,
            "fitted_slope": self.fitted_slope,
            "fit_window": list(self.fit_window) if self.fit_window else None,
            "crossover": self.crossover, "N_sensitivity": self.N_sensitivity,
            **{k: v for k, v in self.extra.items() if np.isscalar(v) or v is None},
        }

    def rows(self):
        h1 = self.extra.get("h1_series")
        for j, t in enumerate(self.times):
            yield (float(t), float(self.norms[j]), None if h1 is None else float(h1[j]),
                   None if not np.isfinite(self.local_slope[j]) else float(self.local_slope[j]))


def build_report(times, norms, norm0_k, k, m, rate, N, fit_window=None):
    """Domination constant over the pre-crossover window, local slopes and fit."""
    times = np.asarray(times, dtype=float)
    norms = np.asarray(norms, dtype=float)
    if not np.all(np.isfinite(norms)):
        raise FormulationError("non-finite norm in decay series")
    # below this the series is rounding noise; slopes there are meaningless
    live = norms > FLOOR * norms[0] if norms[0] > 0 else np.zeros(times.size, bool)
    n_live = int(np.argmin(live)) if not live.all() else times.size
    slopes = np.full(times.size, np.nan)
    slopes[:n_live] = local_slopes(times[:n_live], norms[:n_live])
    cross = crossover_time(times, slopes, rate)
    pre = times <= cross if cross is not None else np.ones(times.size, bool)
    if norm0_k > 0:
        dom = float(np.max(norms[pre] * (1.0 + times[pre]) ** rate) / norm0_k)
    else:
        dom = 0.0
    slope = None
    if fit_window is None and cross is not None:
        fit_window = (float(times[1]), cross)
    if fit_window is not None:
        try:
            slope = fit_rate(times, norms, fit_window)[0]
        except FitDomainError:
            slope = None
    rep = DecayReport(k, m, rate, times, norms, float(norm0_k), dom, slope, fit_window, slopes, cross, N)
    rep.extra["t_exhausted"] = None if n_live == times.size else float(times[n_live])
    return rep


# --- linear evolution -----------------------------------------------------

def _uniform(t_grid):
    t = np.asarray(t_grid, dtype=float)
    if t.ndim != 1 or t.size < 2 or t[0] != 0.0:
        raise ValueError("time grid must start at 0")
    dt = np.diff(t)
    if np.any(dt <= 0) or np.ptp(dt) > 1e-9 * dt.mean():
        raise ValueError("time grid must be uniform")
    return float(dt.mean())


def _base_steps(t_grid, dt):
    t = np.asarray(t_grid, dtype=float)
    if t.ndim != 1 or t.size < 2 or t[0] != 0.0 or np.any(np.diff(t) <= 0):
        raise ValueError("time grid must start at 0 and increase")
    n = np.rint(t / dt)
    if np.any(np.abs(n * dt - t) > 1e-9 * max(dt, 1.0)):
        raise ValueError(f"time grid is not on multiples of dt={dt}")
    return n.astype(int)


def linear_evolution(bundle, y0, t_grid, dt=None):
    """``Q e^{Lt} h0`` at each grid time (columns) by repeated ``expm(L dt)``.

    ``dt`` defaults to the grid spacing (grid must then be uniform); with an
    explicit ``dt`` any grid on multiples of ``dt`` works.
    """
    if dt is None:
        dt = _uniform(t_grid)
    steps = _base_steps(t_grid, dt)
    E = scipy.linalg.expm(bundle.L_density * dt)
    out = np.empty((y0.size, steps.size))
    y = np.array(y0, dtype=float)
    done = 0
    for j, n in enumerate(steps):
        for _ in range(n - done):
            y = E @ y
        done = n
        out[:, j] = y
    return out


def _as_density(u0, bundle):
    if isinstance(u0, Perturbation):
        return u0.y
    return bundle.Q * np.asarray(u0, dtype=float)


def linear_decay_experiment(bundle, u0, k, m, t_grid, half=False, fit_window=None, dt=None):
    """Track ``||e^{Lt} u0||_{X_{1+m}}`` against the rate ``k - m``.

    With ``half`` the run is repeated at ``N/2``; ``N_sensitivity`` is the
    ratio of domination constants and ``extra["t_truncation"]`` the first
    time the two ``X_{1+m}`` series differ by more than 1%.
    """
    if not 0 < m < k:
        raise ValueError("need 0 < m < k")
    y0 = _as_density(u0, bundle)
    i = sizes(y0.size)
    if abs(i @ y0) > 1e-10 * max(density_norm(y0, 1), 1e-300):
        raise ValueError("u0 must be zero-mass")
    Y = linear_evolution(bundle, y0, t_grid, dt)
    rep = build_report(t_grid, density_norm(Y, 1 + m), density_norm(y0, 1 + k), k, m, k - m,
                       bundle.N, fit_window)
    rep.extra["mass_residual"] = float(np.abs(i @ Y).max())
    rep.extra["h1_series"] = Y[0] / bundle.Q[0]
    if half:
        from .linops import assemble_L

        nh = bundle.N // 2
        sub = assemble_L(None, bundle.equilibrium.truncate(nh))
        y_half = y0[:nh].copy()
        y_half[0] -= i[:nh] @ y_half
        p_half = _from_density(y_half, sub.equilibrium, "h1")
        other = linear_decay_experiment(sub, p_half, k, m, t_grid, fit_window=fit_window, dt=dt)
        rep.N_sensitivity = rep.domination_constant / other.domination_constant
        rep.extra["t_truncation"] = truncation_time(t_grid, rep.norms, other.norms)
    return rep


def truncation_time(times, norms, norms_small, tol=0.01):
    """First time two truncations' norm series differ by more than ``tol`` (relative)."""
    with np.errstate(invalid="ignore", divide="ignore"):
        dev = np.abs(norms_small - norms) / norms
    hit = np.flatnonzero(dev > tol)
    return None if hit.size == 0 else float(np.asarray(times)[hit[0]])


def exponential_rate(bundle, u0, t_grid, eta, dt=None):
    """Fitted ``lambda_eta`` from log-linear decay of the X_eta norm."""
    Y = linear_evolution(bundle, _as_density(u0, bundle), t_grid, dt)
    w = np.exp(eta * sizes(bundle.N))
    v = w @ np.abs(Y)
    t = np.asarray(t_grid)
    sel = v > 0
    slope = np.polyfit(t[sel], np.log(v[sel]), 1)[0]
    return float(-slope)


# --- nonlinear experiments ----------------------------------------------------

def h_trajectory(trajectory, equilibrium):
    """Density perturbations ``c(t) - Q`` (columns) and ``h_1(t)``."""
    Y = trajectory.concentrations.T - equilibrium.Q[:, None]
    return Y, Y[0] / equilibrium.Q1


def nonlinear_decay_experiment(model, equilibrium, h0, k, m, t_grid, config=None,
                               delta_hat=None, epsilon=None, require_gap=True):
    """Full nonlinear run from ``c = Q (1 + h0)`` with the rate ``k - m - 1``.

    ``delta_hat`` bounds ``|h_1(t)|`` and ``epsilon`` bounds ``||h(t)||_{X_{1+k}}``;
    a breach is recorded in ``extra["stability_breach"]`` rather than raised.
    """
    if require_gap and not k > m + 2:
        raise ValueError("need k > m + 2")
    if model is None:
        model = equilibrium.model
    pert = h0 if isinstance(h0, Perturbation) else project_zero_mass(h0, equilibrium)
    t_grid = np.asarray(t_grid, dtype=float)
    base = (config or IntegratorConfig(rtol=1e-10, atol=1e-16)).to_dict()
    cfg = IntegratorConfig(**{**base, "t_end": float(t_grid[-1]), "checkpoint_times": list(t_grid)})
    traj = integrate(pert.c, model, cfg, log_qtilde=equilibrium.log_qtilde)
    Y, h1 = h_trajectory(traj, equilibrium)
    rep = build_report(t_grid, density_norm(Y, 1 + m), pert.norm(1 + k), k, m, k - m - 1, model.N)
    xk = density_norm(Y, 1 + k)
    i = sizes(model.N)
    breach = []
    if delta_hat is not None and np.abs(h1).max() > delta_hat:
        breach.append("h1")
    if epsilon is not None and xk.max() > epsilon:
        breach.append("X_1+k")
    rep.extra.update({
        "h1_series": h1, "Xk_series": xk, "trajectory_Y": Y,
        "sup_h1": float(np.abs(h1).max()), "sup_Xk": float(xk.max()),
        "mass_residual": float(np.abs(i @ Y).max() / max(density_norm(Y, 1).max(), 1e-300)),
        "stability_breach": ",".join(breach) or None,
        "n_steps": traj.n_steps,
        "K_hat": growth_rate(t_grid, xk, pert.norm(1 + k)),
    })
    return rep


def growth_rate(times, norms, norm0):
    """Smallest ``K`` with ``norms(t) <= e^{K t} norm0`` on the grid (0 if never exceeded)."""
    t = np.asarray(times, dtype=float)
    v = np.asarray(norms, dtype=float)
    if norm0 <= 0:
        return 0.0
    sel = t > 0
    with np.errstate(divide="ignore"):
        k = np.log(np.maximum(v[sel], 1e-300) / norm0) / t[sel]
    return float(max(k.max(initial=0.0), 0.0))


def duhamel_terms(Y, bundle, t_grid):
    """``(linear part, Duhamel integral)`` in density form on a uniform grid.

    The integral of ``e^{L(t-s)} h_1(s) Gamma h(s)`` uses the trapezoid rule
    through ``T_j = E (T_{j-1} + dt/2 f_{j-1}) + dt/2 f_j`` with ``E = e^{L dt}``.
    """
    dt = _uniform(t_grid)
    E = scipy.linalg.expm(bundle.L_density * dt)
    h1 = Y[0] / bundle.Q[0]
    F = bundle.Gamma_density @ Y * h1
    lin = np.empty_like(Y)
    T = np.zeros_like(Y)
    lin[:, 0] = Y[:, 0]
    for j in range(1, Y.shape[1]):
        lin[:, j] = E @ lin[:, j - 1]
        T[:, j] = E @ (T[:, j - 1] + 0.5 * dt * F[:, j - 1]) + 0.5 * dt * F[:, j]
    return lin, T


@dataclass
class DuhamelReport:
    absolute: float
    relative: float
    linearisation_defect: float
    worst_time: float
    passed: bool


def duhamel_residual(Y, bundle, t_grid, threshold=1e-3, raise_on_fail=True):
    """``max_t ||h(t) - e^{Lt} h(0) - int e^{L(t-s)} h_1 Gamma h ds||_{X_1}``, absolute and relative."""
    Y = np.asarray(Y, dtype=float)
    lin, T = duhamel_terms(Y, bundle, t_grid)
    res = density_norm(Y - lin - T, 1)
    scale = density_norm(Y, 1)
    defect = density_norm(Y - lin, 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(scale > 0, res / scale, 0.0)
    j = int(np.argmax(rel))
    rep = DuhamelReport(float(res.max()), float(rel.max()), float(defect.max()),
                        float(np.asarray(t_grid)[j]), bool(rel.max() <= threshold))
    if not rep.passed and raise_on_fail:
        raise FormulationError(f"Duhamel residual {rep.relative:.3e} exceeds {threshold}")
    return rep
