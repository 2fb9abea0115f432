"""K-functional, h_r / H_r weights and the interpolation star norm.

Sequences are passed in h-coordinates together with ``Q`` (the weights of
every norm); internally everything works with the density ``y = Q u`` so
that ``||u||_{X_1} = sum i |y_i|`` and ``||u||_{X_eta} = sum e^{eta i} |y_i|``.
Pass ``Q=None`` when ``u`` already is a density.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import integrate, optimize, special

from .exceptions import BoundError, QuadratureError
from .model import sizes


def _density(u, Q):
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise ValueError("u must be finite")
    return u if Q is None else np.asarray(Q, dtype=float) * u


def default_eta(z, z_s):
    """Half of ``log(z_s / z)``, clipped into (0, 1)."""
    return float(min(0.5 * np.log(z_s / z), 0.99))


def s_eta(eta):
    """Threshold above which ``min(x, e^{s + eta x}) = x`` for every real ``x``."""
    return -1.0 - np.log(eta)


@dataclass
class InterpConfig:
    eta: float
    r: float = 2.0
    ds: float = 0.05
    s_margin: float = 40.0
    quad_tol: float = 1e-10

    def __post_init__(self):
        if not 0.0 < self.eta < 1.0:
            raise ValueError("eta must lie in (0, 1)")
        if self.r <= 0:
            raise ValueError("r must be positive")
        if self.ds <= 0 or self.quad_tol <= 0:
            raise ValueError("ds and quad_tol must be positive")

    def to_dict(self):
        return asdict(self)


def sandwich_constant(eta):
    return max(2.0 + np.exp(eta), 1.0 / eta)


def _log_min_kernel(s, i, eta):
    """``log min(i, e^{s + eta i})`` broadcast over ``s`` and ``i``."""
    return np.minimum(np.log(i), s + eta * i)


def K_lower(s, u, eta, Q=None):
    """Per-index infimum ``sum |y_i| min(i, e^{s + eta i})``; vectorised over ``s``."""
    y = _density(u, Q)
    i = sizes(y.size)
    s_arr = np.atleast_1d(np.asarray(s, dtype=float))
    out = np.exp(_log_min_kernel(s_arr[:, None], i, eta)) @ np.abs(y)
    return out if np.ndim(s) else float(out[0])


# --- constrained K via its one-dimensional dual -----------------------------

@dataclass
class KResult:
    value: float
    lam: float
    v: np.ndarray | None = None
    primal: float | None = None
    converged: bool = True


def _dual_values(lam, y, i, c, absy):
    """``g(lam)`` for each row; ``lam`` has shape (S,), ``c`` shape (S, n).

    Each term is rewritten as ``min(i |y| (1 - lam sgn y), c |y|) + lam i y``;
    the first parts are nonnegative and the second sum is just ``lam`` times
    the (rounding-level) mass, so nothing large cancels when ``g`` is tiny.
    """
    part = np.minimum(i * absy * (1.0 - lam[:, None] * np.sign(y)), c * absy).sum(axis=1)
    return part + lam * (i @ y)


def _K_dual(s, y, eta):
    """Exact constrained infimum for each ``s`` (array) by maximising the dual.

    ``g(lam) = sum_i min(i |y_i|, c_i |y_i| + lam i y_i)`` is concave and
    piecewise linear on ``|lam| <= min_i (1 + c_i / i)``; its maximum sits at a
    breakpoint, found by binary search on the sorted breakpoints.
    """
    n = y.size
    i_all = sizes(n)
    s = np.asarray(s, dtype=float)
    lam_max = np.min(1.0 + np.exp(s[:, None] + eta * i_all - np.log(i_all)), axis=1)
    nz = y != 0
    if not nz.any():
        return np.zeros(s.size), np.zeros(s.size)
    i = i_all[nz]
    yv = y[nz]
    absy = np.abs(yv)
    with np.errstate(over="ignore"):
        c = np.exp(s[:, None] + eta * i)
    bp = np.sign(yv) * (1.0 - c / i)
    cand = np.concatenate([np.clip(bp, -lam_max[:, None], lam_max[:, None]),
                           -lam_max[:, None], lam_max[:, None]], axis=1)
    cand.sort(axis=1)
    S, M = cand.shape
    rows = np.arange(S)
    iy = i * yv
    pos = yv > 0
    lo = np.zeros(S, dtype=int)
    hi = np.full(S, M - 1)
    # first candidate where the right derivative of g is <= 0 (it is nonincreasing)
    with np.errstate(invalid="ignore"):
        while np.any(lo < hi):
            mid = (lo + hi) // 2
            lam_m = cand[rows, mid][:, None]
            slope = (np.where(pos, lam_m < bp, lam_m >= bp) * iy).sum(axis=1)
            done = slope <= 0
            hi = np.where(done, mid, hi)
            lo = np.where(done, lo, mid + 1)
        lam = cand[rows, lo]
        # on a flat top take the point nearest 0: far out, c|y| + lam i y cancels badly
        slope = (np.where(pos, lam[:, None] < bp, lam[:, None] >= bp) * iy).sum(axis=1)
        nxt = cand[rows, np.minimum((cand <= lam[:, None]).sum(axis=1), M - 1)]
        lam = np.where(slope == 0, np.clip(0.0, lam, nxt), lam)
        val = _dual_values(lam, yv, i, c, absy)
    return val, lam


def K_exact(s, u, eta, Q=None, return_v=False, mass_tol=1e-10):
    """Infimum over zero-mass ``v`` of ``||u - v||_{X_1} + e^s ||v||_{X_eta}``.

    The value is exact (strong LP duality). With ``return_v`` the minimiser is
    also computed from the primal LP and the primal objective is reported.
    """
    y = _density(u, Q)
    i = sizes(y.size)
    mass = float(i @ y)
    scale = float(i @ np.abs(y))
    if abs(mass) > mass_tol * max(scale, 1e-300):
        raise ValueError(f"u is not zero-mass (relative mass {mass / scale:.3e})")
    s_arr = np.atleast_1d(np.asarray(s, dtype=float))
    val, lam = _K_dual(s_arr, y, eta)
    if not return_v:
        if np.ndim(s):
            return val
        return KResult(float(val[0]), float(lam[0]))
    if np.ndim(s):
        raise ValueError("return_v needs a scalar s")
    v, primal = _K_primal(float(s), y, eta)
    ok = abs(primal - val[0]) <= 1e-7 * max(abs(val[0]), 1e-300) + 1e-14 * scale
    return KResult(float(val[0]), float(lam[0]), v, primal, bool(ok))


def _K_primal(s, y, eta):
    """Minimiser via HiGHS with variables ``(v, p, q)``, ``|y - v| <= p``, ``|v| <= q``.

    Where ``e^{s + eta i} > 2 i`` moving ``v_i`` off zero costs more than it can
    gain, so those coordinates are pinned at zero to keep the LP well scaled.
    """
    n = y.size
    i_all = sizes(n)
    log_c = s + eta * i_all
    free = log_c <= np.log(2.0 * i_all)
    v = np.zeros(n)
    if free.any():
        i = i_all[free]
        c = np.exp(log_c[free])
        scale = np.abs(y[free]).max()
        if scale == 0:
            scale = 1.0
        yf = y[free] / scale
        m = i.size
        cost = np.concatenate([np.zeros(m), i, c])
        I = np.eye(m)
        Z = np.zeros((m, m))
        A_ub = np.block([[-I, -I, Z], [I, -I, Z], [I, Z, -I], [-I, Z, -I]])
        b_ub = np.concatenate([-yf, yf, np.zeros(2 * m)])
        A_eq = np.concatenate([i, np.zeros(2 * m)])[None, :]
        bounds = [(None, None)] * m + [(0, None)] * (2 * m)
        res = optimize.linprog(cost, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=[0.0],
                               bounds=bounds, method="highs",
                               options={"primal_feasibility_tolerance": 1e-10,
                                        "dual_feasibility_tolerance": 1e-10})
        if res.status != 0:
            return np.full(n, np.nan), np.nan
        v[free] = res.x[:m] * scale
    with np.errstate(over="ignore"):
        obj = i_all @ np.abs(y - v) + np.sum(np.exp(log_c[v != 0]) * np.abs(v[v != 0]))
    return v, float(obj)


def sandwich_ratios(s, u, eta, Q=None, floor=1e-10, slack=1e-14):
    """Check ``K_lower <= K_exact <= C K_lower`` on the grid ``s``.

    Zero mass only holds to rounding, which fixes ``K`` to within about
    ``slack * ||u||_{X_1}`` absolutely; both inequalities get that slack.
    Returns ``(min ratio, max ratio, ok)`` with ratios taken where
    ``K_lower > floor * ||u||_{X_1}``.
    """
    y = _density(u, Q)
    x1 = float(sizes(y.size) @ np.abs(y))
    kl = K_lower(np.asarray(s, dtype=float), y, eta)
    ke = K_exact(np.asarray(s, dtype=float), y, eta)
    C = sandwich_constant(eta)
    ok = bool(np.all(ke >= kl - slack * x1) and np.all(ke <= C * kl + slack * x1))
    sel = kl > floor * x1
    if not sel.any():
        return np.nan, np.nan, ok
    r = ke[sel] / kl[sel]
    return float(r.min()), float(r.max()), ok


def truncation_candidate(s, u, eta, Q=None):
    """Explicit zero-mass competitor: keep ``y`` below ``j(s)``, lump the rest at ``j(s)``.

    Returns ``(objective, v)`` in density form; an upper bound for ``K_exact``.
    """
    y = _density(u, Q)
    n = y.size
    i = sizes(n)
    if s >= s_eta(eta):
        v = np.zeros(n)
    else:
        # larger root of x = e^{s + eta x}, to the right of 1/eta
        f = lambda x: np.log(x) - s - eta * x
        hi = 1.0 / eta
        while f(hi) > 0:
            hi *= 2.0
        z_plus = optimize.brentq(f, 1.0 / eta, hi) if f(1.0 / eta) > 0 else 1.0 / eta
        j = int(np.ceil(z_plus))
        if j > n:
            v = y.copy()
        else:
            v = np.where(i < j, y, 0.0)
            v[j - 1] = (i[j - 1:] @ y[j - 1:]) / j
    obj = float(i @ np.abs(y - v) + np.exp(s + eta * i) @ np.abs(v))
    return obj, v


# --- weights ---------------------------------------------------------------

def h_r(s, r):
    s = np.asarray(s, dtype=float)
    with np.errstate(over="ignore"):
        return np.where(s >= 0, np.exp(-np.abs(s)), (1.0 - np.minimum(s, 0.0)) ** (r - 1.0))


def H_r(t, r):
    """``int_t^inf h_r`` in closed form."""
    t = np.asarray(t, dtype=float)
    neg = 1.0 + ((1.0 - np.minimum(t, 0.0)) ** r - 1.0) / r
    return np.where(t >= 0, np.exp(-np.abs(t)), neg)


def log_H_r(t, r):
    t = np.asarray(t, dtype=float)
    return np.where(t >= 0, -t, np.log(H_r(np.minimum(t, 0.0), r)))


def star_kernel(i, r, eta):
    """``I_r(i) = int min(i, e^{s + eta i}) h_r(s) ds`` in closed form.

    Split at ``s* = log i - eta i``; the left tail is
    ``e^{eta i + m} U(1 - r, 1 - r, 1 - m)`` with ``m = min(s*, 0)``.
    """
    i = np.asarray(i, dtype=float)
    s_star = np.log(i) - eta * i
    m = np.minimum(s_star, 0.0)
    left = np.exp(eta * i + m) * special.hyperu(1.0 - r, 1.0 - r, 1.0 - m)
    # s* < 0: i on [s*, 0] against (1 - s)^{r-1}, then i on [0, inf)
    mid_neg = i * ((1.0 - m) ** r - 1.0) / r
    # s* >= 0: e^{s + eta i} e^{-s} = e^{eta i} on [0, s*], then i e^{-s} on [s*, inf)
    ps = np.maximum(s_star, 0.0)
    mid_pos = np.exp(eta * i) * ps
    right = i * np.exp(-ps)
    return left + np.where(s_star < 0, mid_neg, mid_pos) + right


def star_kernel_quad(i, r, eta):
    """Independent quadrature of the same integral (test oracle)."""
    f = lambda s: np.exp(_log_min_kernel(s, i, eta)) * float(h_r(s, r))
    s_star = np.log(i) - eta * i
    pts = sorted({0.0, float(s_star)})
    lo = min(pts[0], 0.0)
    parts = [integrate.quad(f, -np.inf, lo, limit=200)[0]]
    edges = pts + [np.inf]
    for a, b in zip(edges[:-1], edges[1:]):
        if a >= lo:
            parts.append(integrate.quad(f, a, b, limit=200)[0])
    return float(sum(parts))


def index_bounds(N, r, eta):
    """Extremes over ``i = 1..N`` of ``I_r(i) / (1 + i)^{1+r}`` (the per-index constants)."""
    i = sizes(N)
    ratio = star_kernel(i, r, eta) / (1.0 + i) ** (1.0 + r)
    return float(ratio.min()), float(ratio.max())


def s_grid_for(n, eta, ds=0.05, margin=40.0):
    """Grid on which ``K(., u) h_r`` is non-negligible for support ``<= n``."""
    i = sizes(n)
    lo = float(np.min(np.log(i) - eta * i)) - margin
    steps = int(np.ceil((margin - lo) / ds))
    return np.linspace(lo, margin, steps + 1)


def star_norm(u, r, eta, Q=None, mode="lower", config=None, s_grid=None):
    """``int K(s, u) h_r(s) ds`` with ``K`` either the per-index bound or the exact infimum."""
    y = _density(u, Q)
    if mode == "lower":
        return float(np.abs(y) @ star_kernel(sizes(y.size), r, eta))
    if mode != "exact":
        raise ValueError(f"unknown mode {mode!r}")
    cfg = config or InterpConfig(eta=eta, r=r)
    if s_grid is None:
        s_grid = s_grid_for(y.size, eta, cfg.ds, cfg.s_margin)
    vals = K_exact(s_grid, y, eta) * h_r(s_grid, r)
    peak = vals.max()
    if peak > 0 and max(vals[0], vals[-1]) > cfg.quad_tol * peak:
        raise QuadratureError(
            f"star-norm integrand at grid edge is {max(vals[0], vals[-1]) / peak:.2e} of peak; widen the s grid")
    return float(integrate.trapezoid(vals, s_grid))


def weighted_norm_X(u, k, Q=None):
    """``sum i^k |y_i|`` so that ``X_{1+r}`` is ``k = 1 + r``."""
    y = _density(u, Q)
    return float(sizes(y.size) ** k @ np.abs(y))


# --- H_r shift bound and convolution ---------------------------------------

@dataclass
class ShiftReport:
    m: float
    k: float
    sup_ratio: float
    argmax: tuple
    refined_sup: float
    grid_stability: float


def _shift_sup(m, k, t, s):
    T, S = np.meshgrid(t, s, indexing="ij")
    log_ratio = log_H_r(S + T, m) - log_H_r(S, k) - (m - k) * np.log1p(T)
    j = np.unravel_index(np.argmax(log_ratio), log_ratio.shape)
    return float(np.exp(log_ratio[j])), (float(T[j]), float(S[j]))


def Hr_shift_bound(m, k, t_grid=None, s_grid=None):
    """Sup over the grid of ``H_m(s + t) / (H_k(s) (1 + t)^{m - k})`` and its refinement change."""
    if not 0 < m < k:
        raise ValueError("need 0 < m < k")
    if t_grid is None:
        t_grid = np.linspace(0.0, 100.0, 401)
    if s_grid is None:
        s_grid = np.linspace(-50.0, 50.0, 401)
    sup, arg = _shift_sup(m, k, np.asarray(t_grid), np.asarray(s_grid))
    fine_t = np.linspace(t_grid[0], t_grid[-1], 2 * len(t_grid) - 1)
    fine_s = np.linspace(s_grid[0], s_grid[-1], 2 * len(s_grid) - 1)
    sup2, _ = _shift_sup(m, k, fine_t, fine_s)
    return ShiftReport(m, k, sup, arg, sup2, abs(sup2 - sup) / sup2)


@dataclass
class GronwallReport:
    r: float
    t: list
    integral: list
    bound: list
    margin: list
    passed: bool


def gronwall_integral(t, r):
    if t == 0:
        return 0.0
    f = lambda s: (1.0 + t - s) ** (-r) * (1.0 + s) ** (-r)
    return integrate.quad(f, 0.0, t, points=[t / 2], epsabs=0.0, epsrel=1e-12, limit=200)[0]


def gronwall_convolution_check(r, t_grid=(1.0, 10.0, 100.0), raise_on_fail=True):
    """Check ``int_0^t (1+t-s)^-r (1+s)^-r ds <= 2^{r+1}/(r-1) (1+t)^-r``."""
    if r <= 1:
        raise ValueError("need r > 1")
    ts = [float(t) for t in t_grid]
    vals = [gronwall_integral(t, r) for t in ts]
    bounds = [2.0 ** (r + 1) / (r - 1) * (1.0 + t) ** (-r) for t in ts]
    margin = [b / v if v > 0 else np.inf for v, b in zip(vals, bounds)]
    ok = all(v <= b for v, b in zip(vals, bounds))
    if not ok and raise_on_fail:
        raise BoundError(f"convolution bound violated for r={r}")
    return GronwallReport(r, ts, vals, bounds, margin, ok)
