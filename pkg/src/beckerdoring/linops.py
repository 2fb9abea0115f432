"""Linearised operator, perturbation operator and the A/B splitting.

All operators are defined through a weak form over bonds ``k = 1..N-1``

    sum_i Q_i (X h)_i phi_i = sum_k W_k (G phi)_k (E h)_k,
    (G phi)_k = phi_{k+1} - phi_k - phi_1,   W_k = a_k Q_k Q_1,

so ``X = D_Q^{-1} G^T W E``. Each operator is stored twice: acting on the
relative perturbation ``h`` and on the density perturbation ``y = Q h``
(``Xd = D_Q X D_Q^{-1}``). Both have O(1) entries once the ratios
``W_k / Q_j`` are formed in log space, which is how they are assembled here.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .dynamics import rhs
from .exceptions import ConsistencyError, DissipativityError, InvalidModelError, SpectralError
from .model import MIN_SIZE, sizes


def bond_matrix(N):
    """``G`` of shape (N-1, N) with rows ``phi_{k+1} - phi_k - phi_1``."""
    G = np.zeros((N - 1, N))
    k = np.arange(N - 1)
    G[k, k + 1] += 1.0
    G[k, k] -= 1.0
    G[:, 0] -= 1.0
    return G


def _ratio(logW, logQ, rows, cols):
    return np.exp(logW[rows] - logQ[cols])


def _weak_operator(E, logW, logQ, G):
    """Return ``(X, Xd)`` for bond coefficients ``E`` (shape (N-1, N))."""
    r, c = np.nonzero(G)
    RT = np.zeros_like(G)
    RT[r, c] = G[r, c] * _ratio(logW, logQ, r, c)  # G_ki W_k / Q_i
    X = RT.T @ E
    r, c = np.nonzero(E)
    EW = np.zeros_like(E)
    EW[r, c] = E[r, c] * _ratio(logW, logQ, r, c)  # W_k E_kj / Q_j
    Xd = G.T @ EW
    return X, Xd


def _restrict(N):
    P = np.zeros((N - 1, N))
    k = np.arange(N - 1)
    P[k, k] = 1.0
    return P


@dataclass(frozen=True)
class OperatorBundle:
    """Matrices of the linearisation at one equilibrium and truncation.

    ``L``/``Gamma`` act on ``h``; ``L_density``/``Gamma_density`` act on
    ``y = Q h``. The two boundary rows (sizes N-1, N) feel the truncation
    and are excluded from the consistency checks.
    """

    equilibrium: object
    G: np.ndarray
    log_W: np.ndarray
    L: np.ndarray
    Gamma: np.ndarray
    L_density: np.ndarray
    Gamma_density: np.ndarray
    boundary_rows: tuple = field(default=(-2, -1))

    @property
    def N(self):
        return self.G.shape[1]

    @property
    def model(self):
        return self.equilibrium.model

    @property
    def log_Q(self):
        return self.equilibrium.log_Q

    @property
    def Q(self):
        return np.exp(self.log_Q)

    @property
    def W(self):
        return np.exp(self.log_W)

    @property
    def D_Q(self):
        return np.diag(self.Q)

    def F(self, g):
        """``F(g) = L + g Gamma``."""
        return self.L + g * self.Gamma

    def F_density(self, g):
        return self.L_density + g * self.Gamma_density

    def A(self, g=0.0, ntilde=None):
        return assemble_A(self, ntilde, g)[0]

    def B(self, g=0.0, ntilde=None):
        return assemble_A(self, ntilde, g)[1]

    def A_of(self, g):
        """``A(g)`` at the default splitting index."""
        return assemble_A(self, self.Ntilde, g)[0]

    @property
    def Ntilde(self):
        return default_ntilde(self)


def assemble_L(model, equilibrium):
    """Assemble ``L`` and ``Gamma`` for ``equilibrium``."""
    if model is None:
        model = equilibrium.model
    N = model.N
    if N < MIN_SIZE:
        raise InvalidModelError(f"truncation N={N} below minimum {MIN_SIZE}")
    log_Q = equilibrium.log_Q
    log_W = np.log(model.a[:-1]) + log_Q[0] + log_Q[:-1]
    G = bond_matrix(N)
    L, Ld = _weak_operator(-G, log_W, log_Q, G)
    Gm, Gmd = _weak_operator(_restrict(N), log_W, log_Q, G)
    for m in (G, log_W, L, Gm, Ld, Gmd):
        m.setflags(write=False)
    return OperatorBundle(equilibrium, G, log_W, L, Gm, Ld, Gmd)


def assemble_from_weights(a, Q):
    """``(L, Gamma)`` from raw ``a_i`` and ``Q_i`` (any N >= 2, Q_1 taken as ``Q[0]``)."""
    a = np.asarray(a, dtype=float)
    log_Q = np.log(np.asarray(Q, dtype=float))
    G = bond_matrix(log_Q.size)
    log_W = np.log(a[:-1]) + log_Q[0] + log_Q[:-1]
    L, _ = _weak_operator(-G, log_W, log_Q, G)
    Gm, _ = _weak_operator(_restrict(log_Q.size), log_W, log_Q, G)
    return L, Gm


def assemble_Gamma(model, equilibrium, bundle=None):
    if bundle is None:
        bundle = assemble_L(model, equilibrium)
    return bundle.Gamma


def factorized_L(bundle):
    """``-D_Q^{-1} G^T W G`` recomputed from the raw factors (no log tricks)."""
    Q = bundle.Q
    return -(bundle.G.T * bundle.W) @ bundle.G / Q[:, None]


def dirichlet_form(bundle, h):
    """``(<h, L h>_H, sum_k W_k (G h)_k^2)`` for one vector ``h``."""
    Q = bundle.Q
    lhs = float(np.dot(Q * h, bundle.L @ h))
    Gh = bundle.G @ h
    return lhs, float(np.dot(bundle.W, Gh**2))


# --- h-coordinate dynamics -------------------------------------------------

def h_rhs(h, equilibrium):
    """Pushforward of :func:`rhs` through ``c = Q (1 + h)``."""
    Q = equilibrium.Q
    return rhs(Q * (1.0 + h), equilibrium.model) / Q


@dataclass
class ConsistencyReport:
    max_rel_error: float
    row_errors: np.ndarray
    step: float
    rhs_at_zero: float
    passed: bool


def jacobian_consistency(model, equilibrium, step=1e-6, bundle=None, threshold=1e-4):
    """Central finite-difference Jacobian of :func:`h_rhs` at ``h = 0`` versus ``L``."""
    if not 1e-8 <= step <= 1e-4:
        raise ValueError("step must lie in [1e-8, 1e-4]")
    if bundle is None:
        bundle = assemble_L(model, equilibrium)
    N = bundle.N
    J = np.empty((N, N))
    e = np.zeros(N)
    for j in range(N):
        e[j] = step
        J[:, j] = (h_rhs(e, equilibrium) - h_rhs(-e, equilibrium)) / (2 * step)
        e[j] = 0.0
    L = bundle.L
    rows = slice(0, N - 2)
    err = np.abs(J[rows] - L[rows]).max(axis=1) / np.abs(L[rows]).max(axis=1)
    rep = ConsistencyReport(float(err.max()), err, step, float(np.abs(h_rhs(np.zeros(N), equilibrium)).max()),
                            bool(err.max() <= threshold))
    if not rep.passed:
        raise ConsistencyError(f"finite-difference Jacobian differs from L by {rep.max_rel_error:.3e}")
    return rep


# --- spectral gap --------------------------------------------------------

@dataclass
class SpectralReport:
    lambda_c: float
    eigvec: np.ndarray
    residual: float
    N: int
    N_stability: float | None = None
    lambda_c_half: float | None = None


def _sym_factor(bundle):
    """``B = W^{1/2} G D_Q^{-1/2}`` so that ``D^{1/2} L D^{-1/2} = -B^T B``."""
    G = bundle.G
    r, c = np.nonzero(G)
    Bm = np.zeros_like(G)
    Bm[r, c] = G[r, c] * np.exp(0.5 * (bundle.log_W[r] - bundle.log_Q[c]))
    return Bm


def _mass_direction(bundle):
    """Unit vector along ``D_Q^{1/2} (i)``, the symmetrised null vector."""
    logv = np.log(sizes(bundle.N)) + 0.5 * bundle.log_Q
    v = np.exp(logv - logv.max())
    return v / np.linalg.norm(v)


def _complement_basis(v):
    """Orthonormal basis of the complement of unit ``v`` (Householder columns 2..N)."""
    N = v.size
    e1 = np.zeros(N)
    e1[0] = 1.0
    u = v - e1 if v[0] < 0 else v + e1
    u /= np.linalg.norm(u)
    H = np.eye(N) - 2.0 * np.outer(u, u)
    return H[:, 1:]


def _reflect_complement(S, v):
    """``Z^T S Z`` for ``Z = _complement_basis(v)`` with rank-one updates instead of matmuls."""
    N = v.size
    e1 = np.zeros(N)
    e1[0] = 1.0
    u = v - e1 if v[0] < 0 else v + e1
    u /= np.linalg.norm(u)
    Su, uS = S @ u, u @ S
    HSH = S - 2.0 * np.outer(u, uS) - 2.0 * np.outer(Su, u) + 4.0 * (u @ Su) * np.outer(u, u)
    return HSH[1:, 1:]


def symmetric_L(bundle):
    Bm = _sym_factor(bundle)
    return -Bm.T @ Bm


def symmetric_form_F(bundle, g):
    """Symmetric part of ``D^{1/2} F(g) D^{-1/2}`` (the H quadratic form)."""
    Bm = _sym_factor(bundle)
    diag = np.exp(0.5 * (bundle.log_W - bundle.log_Q[:-1]))  # sqrt(a_k Q_1)
    BP = np.zeros_like(Bm)
    k = np.arange(bundle.N - 1)
    BP[k, k] = diag
    cross = Bm.T @ BP
    return -Bm.T @ Bm + 0.5 * g * (cross + cross.T)


def spectral_gap(bundle, half=False):
    """Smallest eigenvalue of ``-L`` on the zero-mass subspace of H."""
    S = symmetric_L(bundle)
    v = _mass_direction(bundle)
    Z = _complement_basis(v)
    Sr = Z.T @ S @ Z
    w, V = scipy.linalg.eigh(-0.5 * (Sr + Sr.T))
    lam = float(w[0])
    x = Z @ V[:, 0]
    residual = float(np.linalg.norm(S @ x + lam * x))
    if lam <= 0:
        raise SpectralError(f"nonpositive spectral gap {lam:.3e}")
    # back to h-coordinates
    h = x * np.exp(-0.5 * (bundle.log_Q - bundle.log_Q.max()))
    h /= np.abs(h).max()
    rep = SpectralReport(lam, h, residual, bundle.N)
    if half:
        sub = assemble_L(None, bundle.equilibrium.truncate(bundle.N // 2))
        lam2 = spectral_gap(sub).lambda_c
        rep.lambda_c_half = lam2
        rep.N_stability = abs(lam - lam2) / lam
    return rep


def null_vector(bundle):
    """Eigenvector of ``L`` for the zero eigenvalue, without projection, in h-coordinates."""
    S = symmetric_L(bundle)
    w, V = scipy.linalg.eigh(-S)
    x = V[:, 0]
    h = x * np.exp(-0.5 * (bundle.log_Q - bundle.log_Q.max()))
    return float(w[0]), h / h[0]


def _reduced_form_parts(bundle):
    """``(A, C)`` with the reduced H form of ``F(g)`` equal to ``A + g C``."""
    v = _mass_direction(bundle)
    A = _reflect_complement(symmetric_form_F(bundle, 0.0), v)
    C = _reflect_complement(symmetric_form_F(bundle, 1.0), v) - A
    return 0.5 * (A + A.T), 0.5 * (C + C.T)


def _top_eig(S):
    n = S.shape[0]
    return float(scipy.linalg.eigvalsh(S, subset_by_index=[n - 1, n - 1])[0])


def quadratic_gap(bundle, g, parts=None):
    """``lambda_H(g)``: minus the top of the H quadratic form of ``F(g)`` on zero mass."""
    if parts is None:
        Sr = _reflect_complement(symmetric_form_F(bundle, g), _mass_direction(bundle))
        return -_top_eig(0.5 * (Sr + Sr.T))
    A, C = parts
    return -_top_eig(A + g * C)


def threshold_scan(passes, g_max, n_grid=16, n_bisect=24):
    """Largest ``g`` in ``[0, g_max]`` such that ``passes`` holds on ``[0, g]``.

    Coarse scan upward, then bisection between the last pass and first fail.
    Returns ``(g_hat, censored)``; ``censored`` means no failure was found.
    """
    grid = np.linspace(0.0, g_max, n_grid + 1)[1:]
    lo = 0.0
    hi = None
    for g in grid:
        if passes(g):
            lo = g
        else:
            hi = g
            break
    if hi is None:
        return float(g_max), True
    for _ in range(n_bisect):
        mid = 0.5 * (lo + hi)
        if passes(mid):
            lo = mid
        else:
            hi = mid
    return float(lo), False


def quadratic_gap_threshold(bundle, g_max=4.0, **kw):
    """Empirical ``delta_H``: smallest ``|g|`` at which ``lambda_H(g)`` stops being positive."""
    parts = _reduced_form_parts(bundle)
    plus, cp = threshold_scan(lambda g: quadratic_gap(bundle, g, parts) > 0, g_max, **kw)
    minus, cm = threshold_scan(lambda g: quadratic_gap(bundle, -g, parts) > 0, g_max, **kw)
    return min(plus, minus), {"positive": plus, "negative": minus, "censored": cp and cm}


# --- A/B splitting ---------------------------------------------------------

def worst_case_coefficient(bundle, k):
    """Per-size coefficient of ``E2 + E3`` with ``sgn h_1 = sgn h_i`` (must be <= 0)."""
    N = bundle.N
    i = sizes(N)
    w = i ** (1.0 + k)
    z = bundle.equilibrium.Q1
    a, b = bundle.model.a, bundle.model.b
    out = np.empty(N)
    wp = np.append(w[1:], np.nan)
    wm = np.insert(w[:-1], 0, np.nan)
    out[:-1] = z * a[:-1] * (wp[:-1] - w[:-1]) + b[:-1] * (wm[:-1] - w[:-1]) + (b[:-1] - z * a[:-1])
    out[-1] = b[-1] * (wm[-1] - w[-1] + 1.0)  # no attachment out of the last size
    out[0] = np.nan
    return out


def default_ntilde(bundle, k=0.0, delta=None):
    """Smallest admissible splitting index for weight ``i^(1+k)``.

    Starts at ``N_z + 1`` and moves up until the worst-case ``E2 + E3``
    coefficient is nonpositive on every size from there to ``N``.
    """
    z = bundle.equilibrium.Q1
    if delta is None:
        delta = 0.5 * (bundle.equilibrium.z_s - z)
    n_z = bundle.model.strong_fragmentation_index(z, delta)
    coef = worst_case_coefficient(bundle, k)
    scale = bundle.model.b * sizes(bundle.N) ** (1.0 + k)
    bad = np.flatnonzero(coef[1:] > 1e-12 * scale[1:]) + 2  # sizes i >= 2 that fail
    start = max(n_z + 1, 2)
    if bad.size:
        start = max(start, int(bad[-1]) + 1)
    if start > bundle.N - 1:
        raise ValueError(f"no admissible splitting index for k={k} at N={bundle.N}")
    return start


def assemble_A(bundle, ntilde=None, g=0.0, density=False):
    """``(A(g), B(g))`` with ``B(g) = F(g) - A(g)``.

    ``A`` keeps bonds ``k >= ntilde`` with coefficient ``(1+g) h_k - h_{k+1}``
    plus the boundary bond ``ntilde-1`` carrying ``-h_ntilde``.
    """
    N = bundle.N
    if ntilde is None:
        ntilde = default_ntilde(bundle)
    z = bundle.equilibrium.Q1
    delta = 0.5 * (bundle.equilibrium.z_s - z)
    n_z = bundle.model.strong_fragmentation_index(z, delta)
    if not (max(n_z + 1, 2) <= ntilde <= N - 1):
        raise ValueError(f"ntilde={ntilde} outside [{max(n_z + 1, 2)}, {N - 1}]")
    E = np.zeros((N - 1, N))
    k = np.arange(ntilde - 1, N - 1)  # 0-based bonds for sizes ntilde..N-1
    E[k, k] = 1.0 + g
    E[k, k + 1] = -1.0
    E[ntilde - 2, ntilde - 1] = -1.0
    A, Ad = _weak_operator(E, bundle.log_W, bundle.log_Q, bundle.G)
    if density:
        return Ad, bundle.F_density(g) - Ad
    return A, bundle.F(g) - A


# --- dissipativity ---------------------------------------------------------

def sign_functional(h, v, k, Q):
    """``sum_i Q_i i^(1+k) v_i sgn(h_i)`` with ``sgn(0) = 0``."""
    h = np.asarray(h, dtype=float)
    w = sizes(h.size) ** (1.0 + k)
    return float(np.sum(Q * w * v * np.sign(h)))


def zero_mass_samples(rng, N, n):
    """Random density perturbations ``y = Q h`` with ``sum_i i y_i = 0``.

    Mixes light (exponential) and heavy (power-law) tails, random and
    block sign patterns, and sparse supports; columns are unit X_1 norm.
    """
    i = sizes(N)[:, None]
    kind = rng.integers(0, 4, size=n)
    beta = rng.uniform(0.02, 1.0, size=n)
    p = rng.uniform(1.5, 6.0, size=n)
    profile = np.where(kind % 2 == 0, np.exp(-beta * (i - 1)), i ** (-p))
    signs = rng.choice([-1.0, 1.0], size=(N, n))
    block = np.sign(np.sin(np.pi * i / rng.integers(2, 20, size=n)) + 1e-9)
    signs = np.where(kind >= 2, block, signs)
    amp = rng.uniform(0.1, 1.0, size=(N, n))
    sparse = rng.random((N, n)) < 0.8
    Y = profile * signs * amp * np.where(rng.random(n) < 0.25, sparse, True)
    Y[0] -= (i[:, 0] @ Y)
    Y /= (i * np.abs(Y)).sum(axis=0)
    return Y


@dataclass
class DissipativityReport:
    g: float
    k: float
    ntilde: int
    max_value: float
    threshold: float
    passed: bool
    witness: np.ndarray | None = None


def dissipativity_values(bundle, g, k, Y, ntilde=None):
    """Sign functional of ``A(g)`` for each density column of ``Y`` and its scale."""
    Ad, _ = assemble_A(bundle, ntilde, g, density=True)
    w = sizes(bundle.N)[:, None] ** (1.0 + k)
    AY = Ad @ Y
    vals = np.sum(w * AY * np.sign(Y), axis=0)
    scale = np.sum(w * np.abs(AY), axis=0)
    return vals, scale


def dissipativity_check(bundle, g, k, samples=10_000, seed=0, ntilde=None, raise_on_fail=False, Y=None):
    """Max over random zero-mass vectors of ``<sgn h, A(g) h>`` in ``X_{1+k}``."""
    if ntilde is None:
        ntilde = default_ntilde(bundle, k)
    if Y is None:
        Y = zero_mass_samples(np.random.default_rng(seed), bundle.N, samples)
    vals, scale = dissipativity_values(bundle, g, k, Y, ntilde)
    rel = vals - 1e-12 * scale
    j = int(np.argmax(rel))
    passed = bool(rel[j] <= 0)
    rep = DissipativityReport(float(g), float(k), int(ntilde), float(vals.max()), float(1e-12 * scale[j]), passed)
    if not passed:
        rep.witness = Y[:, j] / np.exp(bundle.log_Q)
        if raise_on_fail:
            raise DissipativityError(f"A({g}) not dissipative in X_{1 + k}", witness=rep.witness, value=float(vals[j]))
    return rep


def dissipativity_threshold(bundle, k, samples=2000, seed=0, g_max=2.0, ntilde=None, **kw):
    """Empirical ``delta_k`` by scanning ``|g|`` upward on a fixed sample set."""
    if ntilde is None:
        ntilde = default_ntilde(bundle, k)
    Y = zero_mass_samples(np.random.default_rng(seed), bundle.N, samples)

    def ok(g):
        vals, scale = dissipativity_values(bundle, g, k, Y, ntilde)
        return bool(np.all(vals <= 1e-12 * scale))

    plus, cp = threshold_scan(ok, g_max, **kw)
    minus, cm = threshold_scan(lambda g: ok(-g), g_max, **kw)
    return min(plus, minus), {"positive": plus, "negative": minus, "censored": cp and cm, "ntilde": ntilde}


def regularizing_norm(bundle, g=0.0, samples=1000, seed=0, ntilde=None):
    """Sampled ``max ||B(g) h||_H / ||h||_{X_1}``."""
    _, Bd = assemble_A(bundle, ntilde, g, density=True)
    Y = zero_mass_samples(np.random.default_rng(seed), bundle.N, samples)
    BY = Bd @ Y
    # ||B h||_H^2 = sum_i (Q_i (B h)_i)^2 / Q_i
    H = np.sqrt(np.sum(BY**2 * np.exp(-bundle.log_Q)[:, None], axis=0))
    X1 = (sizes(bundle.N)[:, None] * np.abs(Y)).sum(axis=0)
    return float((H / X1).max())


def gamma_bound(bundle, m, samples=1000, seed=0):
    """Sampled ``max ||Gamma h||_{X_{1+m}} / ||h||_{X_{2+m}}``."""
    Y = zero_mass_samples(np.random.default_rng(seed), bundle.N, samples)
    i = sizes(bundle.N)[:, None]
    GY = bundle.Gamma_density @ Y
    num = (i ** (1 + m) * np.abs(GY)).sum(axis=0)
    den = (i ** (2 + m) * np.abs(Y)).sum(axis=0)
    return float((num / den).max())
