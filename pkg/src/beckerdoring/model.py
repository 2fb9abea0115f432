"""Coefficient sequences, detailed-balance coefficients and subcritical equilibria.

Sizes are 1-based in the mathematics and 0-based in the arrays: ``a[0]`` is
the attachment rate of the monomer, ``a[N-1]`` that of the largest tracked
cluster.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    InvalidModelError,
    LengthMismatchError,
    SupercriticalError,
    TruncationTooSmallError,
)

MIN_SIZE = 8
# distance kept from z_s when probing the critical mass
CRITICAL_MARGIN = 1e-6


def sizes(n):
    """Cluster sizes 1..n as floats."""
    return np.arange(1, n + 1, dtype=float)


def _frozen(x):
    x = np.asarray(x, dtype=float).copy()
    x.setflags(write=False)
    return x


@dataclass(frozen=True)
class CoefficientModel:
    """Attachment rates ``a`` and detachment rates ``b`` at truncation ``N``.

    ``C1`` is the smallest stored attachment rate and ``C2`` the smallest
    constant with ``a_i, b_i <= C2 * i`` on the stored range.
    """

    kind: str
    params: dict
    a: np.ndarray
    b: np.ndarray
    C1: float = field(init=False)
    C2: float = field(init=False)

    def __post_init__(self):
        a, b = _frozen(self.a), _frozen(self.b)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        if a.shape != b.shape or a.ndim != 1:
            raise LengthMismatchError(f"a and b must be 1-d of equal length, got {a.shape} and {b.shape}")
        if a.size < MIN_SIZE:
            raise InvalidModelError(f"truncation N={a.size} below minimum {MIN_SIZE}")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise InvalidModelError("coefficients must be finite")
        if np.any(a <= 0) or np.any(b <= 0):
            raise InvalidModelError("coefficients must be strictly positive")
        i = sizes(a.size)
        object.__setattr__(self, "C1", float(a.min()))
        object.__setattr__(self, "C2", float(max((a / i).max(), (b / i).max())))

    @property
    def N(self):
        return self.a.size

    def truncate(self, n):
        """Same coefficients restricted to sizes 1..n."""
        return CoefficientModel(self.kind, dict(self.params), self.a[:n], self.b[:n])

    def strong_fragmentation_index(self, z, delta):
        """Smallest ``n >= 1`` with ``a_i (z + delta) <= b_i`` for all ``n < i <= N``.

        Returns ``N`` when the condition already fails at the last stored size.
        """
        ok = self.a * (z + delta) <= self.b
        bad = np.flatnonzero(~ok[1:])  # indices i >= 2 where the bound fails
        if bad.size == 0:
            return 1
        return int(bad[-1]) + 2

    def diagnostics(self, z=None, delta=None):
        out = {"N": self.N, "C1": self.C1, "C2": self.C2}
        if z is not None:
            if delta is None:
                delta = 0.5 * (critical_z(self) - z)
            out["delta"] = float(delta)
            out["sup_excess"] = float(np.max(self.a * (z + delta) - self.b))
            out["N_z"] = self.strong_fragmentation_index(z, delta)
        return out


def penrose_coefficients(alpha, mu, q, z_s, N):
    """``a_i = i**alpha``, ``b_i = a_i (z_s + q / i**(1 - mu))``."""
    if not 0 < alpha <= 1:
        raise InvalidModelError(f"alpha must lie in (0, 1], got {alpha}")
    if not 0 <= mu <= 1:
        raise InvalidModelError(f"mu must lie in [0, 1], got {mu}")
    if q <= 0 or z_s <= 0:
        raise InvalidModelError("q and z_s must be positive")
    N = int(N)
    if N < MIN_SIZE:
        raise InvalidModelError(f"truncation N={N} below minimum {MIN_SIZE}")
    i = sizes(N)
    a = i**alpha
    b = a * (z_s + q / i ** (1.0 - mu))
    params = {"alpha": float(alpha), "mu": float(mu), "q": float(q), "z_s": float(z_s)}
    return CoefficientModel("penrose", params, a, b)


def build_coefficients(kind, N, **params):
    """Build a :class:`CoefficientModel`.

    ``kind="penrose"`` takes ``alpha, mu, q, z_s``; ``kind="custom"`` takes
    sequences ``a`` and ``b`` of length at least ``N`` (extra entries are
    dropped).
    """
    if kind == "penrose":
        return penrose_coefficients(params["alpha"], params["mu"], params["q"], params["z_s"], N)
    if kind == "custom":
        a = np.asarray(params["a"], dtype=float)
        b = np.asarray(params["b"], dtype=float)
        if a.size < N or b.size < N:
            raise LengthMismatchError(f"custom sequences have lengths {a.size}, {b.size}; need {N}")
        return CoefficientModel("custom", {}, a[:N], b[:N])
    raise InvalidModelError(f"unknown coefficient kind {kind!r}")


def _scaled_products(ratios):
    """Running products of ``ratios`` as (mantissa, base-2 exponent) pairs.

    Renormalising with frexp after each multiplication is exact, so every
    step carries a single rounding and nothing under- or overflows.
    """
    n = len(ratios) + 1
    mant = np.empty(n)
    expo = np.empty(n, dtype=np.int64)
    m, e = 1.0, 0
    mant[0], expo[0] = m, e
    frexp = math.frexp
    for j, r in enumerate(ratios.tolist()):
        m, de = frexp(m * r)
        e += de
        mant[j + 1] = m
        expo[j + 1] = e
    return mant, expo


@dataclass(frozen=True)
class DetailedBalance:
    """Detailed-balance coefficients stored as ``mantissa * 2**exponent``."""

    mantissa: np.ndarray
    exponent: np.ndarray

    @property
    def log(self):
        return np.log(self.mantissa) + self.exponent * math.log(2.0)

    @property
    def values(self):
        # may underflow to zero far out in the tail
        return np.ldexp(self.mantissa, self.exponent)


def detailed_balance_scaled(model):
    mant, expo = _scaled_products(model.a[:-1] / model.b[1:])
    mant.setflags(write=False)
    expo.setflags(write=False)
    return DetailedBalance(mant, expo)


def detailed_balance(model):
    """Return ``Qtilde`` with ``Qtilde_1 = 1`` and ``Qtilde_i a_i = Qtilde_{i+1} b_{i+1}``."""
    return detailed_balance_scaled(model).values


def log_detailed_balance(model):
    return detailed_balance_scaled(model).log


def detailed_balance_residual(model):
    """``max_i |Qt_i a_i - Qt_{i+1} b_{i+1}| / (Qt_i a_i)``, evaluated without underflow."""
    db = detailed_balance_scaled(model)
    m, e = db.mantissa, db.exponent
    lhs = m[:-1] * model.a[:-1]
    rhs = m[1:] * np.ldexp(1.0, e[1:] - e[:-1]) * model.b[1:]
    return float(np.max(np.abs(lhs - rhs) / lhs))


@dataclass(frozen=True)
class CriticalZ:
    z_s: float
    convergence: float
    converged: bool


def critical_z_report(model):
    if model.kind == "penrose":
        return CriticalZ(float(model.params["z_s"]), 0.0, True)
    N = model.N
    full = model.b[-1] / model.a[-1]
    half = model.b[N // 2 - 1] / model.a[N // 2 - 1]
    est = abs(full - half)
    converged = est <= 0.1 * full
    if not converged:
        warnings.warn(f"b_N/a_N has not settled (change {est:.3g} between N/2 and N)", RuntimeWarning, stacklevel=3)
    return CriticalZ(float(full), float(est), bool(converged))


def critical_z(model):
    """Critical monomer value ``z_s = lim b_i / a_i``."""
    return critical_z_report(model).z_s


def _log_terms(log_qtilde, z):
    i = sizes(log_qtilde.size)
    return log_qtilde + i * math.log(z)


def tail_bound_from_log_q(log_q):
    """Geometric tail estimate for ``sum_{i>N} i Q_i`` from the last ratio."""
    N = log_q.size
    log_last = math.log(N) + log_q[-1]
    log_prev = math.log(N - 1) + log_q[-2]
    r = math.exp(log_last - log_prev)
    if r >= 1.0:
        return math.inf
    return math.exp(log_last) * r / (1.0 - r) ** 2


def mass_of_z(model, qtilde, z):
    """Truncated mass ``sum_{i<=N} i Qt_i z**i`` and its tail estimate.

    ``qtilde`` may be an array of values, a :class:`DetailedBalance`, or
    ``None`` (computed from ``model``).
    """
    z_s = critical_z(model)
    if z <= 0:
        return 0.0, 0.0
    if z >= z_s:
        raise SupercriticalError(f"z={z} is not below z_s={z_s}")
    log_qt = _as_log_qtilde(model, qtilde)
    log_q = _log_terms(log_qt, z)
    rho = math.fsum(sizes(log_q.size) * np.exp(log_q))
    return rho, tail_bound_from_log_q(log_q)


def _as_log_qtilde(model, qtilde):
    if qtilde is None:
        return log_detailed_balance(model)
    if isinstance(qtilde, DetailedBalance):
        return qtilde.log
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(qtilde, dtype=float))


@dataclass(frozen=True)
class Equilibrium:
    """Subcritical equilibrium ``Q_i = Qt_i z**i`` at a fixed truncation.

    ``Q_1 = z`` since ``Qt_1 = 1``.
    """

    model: CoefficientModel
    log_qtilde: np.ndarray
    z_s: float
    z: float
    rho: float
    tail_bound: float

    @property
    def N(self):
        return self.model.N

    @property
    def qtilde(self):
        return np.exp(self.log_qtilde)

    @property
    def log_Q(self):
        return _log_terms(self.log_qtilde, self.z)

    @property
    def Q(self):
        return np.exp(self.log_Q)

    @property
    def Q1(self):
        return self.z

    def truncate(self, n):
        """Same ``z`` with the coefficients and ``Q`` cut to sizes 1..n."""
        model = self.model.truncate(n)
        log_qt = self.log_qtilde[:n]
        rho, tail = _mass_from_log(log_qt, self.z)
        return Equilibrium(model, log_qt, self.z_s, self.z, rho, tail)

    def to_rows(self):
        """Rows ``(i, a_i, b_i, Qtilde_i, Q_i, detailed-balance residual)``."""
        a, b = self.model.a, self.model.b
        qt, q = self.qtilde, self.Q
        res = np.zeros(self.N)
        lhs = qt[:-1] * a[:-1]
        with np.errstate(invalid="ignore", divide="ignore"):
            res[:-1] = np.abs(lhs - qt[1:] * b[1:]) / lhs
        res[~np.isfinite(res)] = 0.0
        return [(i + 1, a[i], b[i], qt[i], q[i], res[i]) for i in range(self.N)]


def _mass_from_log(log_qt, z):
    log_q = _log_terms(log_qt, z)
    rho = math.fsum(sizes(log_q.size) * np.exp(log_q))
    return rho, tail_bound_from_log_q(log_q)


def equilibrium_from_z(model, z, qtilde=None, *, log_qtilde=None):
    z_s = critical_z(model)
    if not 0 < z < z_s:
        raise SupercriticalError(f"need 0 < z < z_s={z_s}, got z={z}")
    if log_qtilde is None:
        log_qtilde = _as_log_qtilde(model, qtilde)
    log_qt = _frozen(log_qtilde)
    rho, tail = _mass_from_log(log_qt, z)
    return Equilibrium(model, log_qt, z_s, float(z), rho, tail)


def critical_mass(model, qtilde=None):
    """Truncated mass at ``z_s (1 - 1e-6)`` with its tail estimate."""
    z_max = critical_z(model) * (1.0 - CRITICAL_MARGIN)
    return mass_of_z(model, qtilde, z_max)


def solve_z(model, qtilde=None, rho_target=None, tol=1e-12):
    """Bisection for the equilibrium of mass ``rho_target``.

    Refuses targets at or above the truncated critical mass, and targets
    within the critical tail estimate of it when that estimate is usable.
    """
    if rho_target is None or rho_target <= 0:
        raise ValueError("rho_target must be positive")
    if tol <= 0:
        raise ValueError("tol must be positive")
    z_s = critical_z(model)
    log_qt = _as_log_qtilde(model, qtilde)
    z_hi = z_s * (1.0 - CRITICAL_MARGIN)
    rho_max, tail_max = _mass_from_log(log_qt, z_hi)
    if rho_target >= rho_max:
        raise SupercriticalError(f"target mass {rho_target} exceeds truncated critical mass {rho_max}")
    if math.isfinite(tail_max) and tail_max < rho_max and rho_target > rho_max - tail_max:
        raise SupercriticalError(
            f"target mass {rho_target} lies within the tail estimate {tail_max:.3g} of the critical mass"
        )
    lo, hi = 0.0, z_hi
    z = 0.5 * (lo + hi)
    for _ in range(200):
        z = 0.5 * (lo + hi)
        rho, _tail = _mass_from_log(log_qt, z)
        if abs(rho - rho_target) <= tol * rho_target:
            break
        if rho < rho_target:
            lo = z
        else:
            hi = z
        if hi - lo <= 2 * np.finfo(float).eps * hi:
            raise TruncationTooSmallError(f"tolerance {tol} not reachable (bracket collapsed at z={z})")
    else:
        raise TruncationTooSmallError(f"tolerance {tol} not reachable")
    return equilibrium_from_z(model, z, log_qtilde=log_qt)
