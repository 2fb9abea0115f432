import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from beckerdoring import analysis, linops
from beckerdoring.dynamics import IntegratorConfig, integrate
from beckerdoring.exceptions import FitDomainError, FormulationError, InfeasiblePerturbationError
from beckerdoring.model import equilibrium_from_z, sizes
from conftest import penrose


# --- norms ----------------------------------------------------------------------

def test_weighted_norm_single_entry():
    Q = np.linspace(2.0, 0.1, 12)
    h = np.zeros(12)
    h[0] = 1.0
    for k in (0.0, 1.0, 3.5):
        assert analysis.weighted_norm(h, Q, k) == Q[0]


def test_weighted_norm_hand_sum():
    Q = 2.0 ** -sizes(10)
    h = np.where(sizes(10) <= 3, 1.0, 0.0)
    assert analysis.weighted_norm(h, Q, 1.0) == pytest.approx(11 / 8, rel=1e-15)


@given(st.integers(0, 2**32 - 1), st.floats(0, 3), st.floats(0, 3))
def test_weighted_norm_monotone(seed, m, dk):
    rng = np.random.default_rng(seed)
    Q, h = rng.random(30), rng.standard_normal(30)
    assert analysis.weighted_norm(h, Q, m) <= analysis.weighted_norm(h, Q, m + dk) * (1 + 1e-14)


def test_other_norm_kinds():
    Q, h = np.ones(5), np.ones(5)
    assert analysis.weighted_norm(h, Q, kind="H") == pytest.approx(math.sqrt(5))
    assert analysis.weighted_norm(h, Q, kind="exp", eta=0.1) == pytest.approx(np.exp(0.1 * sizes(5)).sum())
    with pytest.raises(ValueError):
        analysis.weighted_norm(h, Q, kind="exp")
    assert analysis.density_norm(np.ones((5, 3)), 1).shape == (3,)


# --- perturbations ------------------------------------------------------------------

@pytest.fixture(scope="module")
def eq():
    return equilibrium_from_z(penrose(60), 0.5)


def test_projection_leaves_zero_mass_alone(eq):
    h = np.zeros(60)
    h[1], h[0] = 1e-3, -2e-3 * eq.Q[1] / eq.Q[0]
    p = analysis.project_zero_mass(h, eq)
    np.testing.assert_allclose(p.h, h, rtol=1e-12, atol=1e-18)


def test_projection_of_e2(eq):
    h = np.zeros(60)
    h[1] = 0.5
    p = analysis.project_zero_mass(h, eq)
    assert p.h[0] == pytest.approx(-2 * 0.5 * eq.Q[1] / eq.Q[0], rel=1e-14)
    assert p.zero_mass_residual <= 1e-16


@given(st.integers(0, 2**32 - 1))
def test_projection_residual_property(seed):
    eq = equilibrium_from_z(penrose(60), 0.5)
    rng = np.random.default_rng(seed)
    h = 0.05 * rng.uniform(-1, 1, 60)
    for comp in ("h1", "uniform"):
        p = analysis.project_zero_mass(h, eq, comp)
        scale = float(np.sum(eq.Q * sizes(60) * np.abs(p.h)))
        assert p.zero_mass_residual <= 1e-12 * scale
        assert np.all(p.h >= -1)


def test_projection_infeasible(eq):
    h = np.zeros(60)
    h[5] = 1e3
    with pytest.raises(InfeasiblePerturbationError):
        analysis.project_zero_mass(h, eq)
    with pytest.raises(InfeasiblePerturbationError):
        analysis.project_zero_mass(-2 * np.ones(60), eq)


def test_polynomial_tail_homogeneous(eq):
    a = analysis.make_polynomial_tail(6.0, "positive", 1e-3, eq)
    b = analysis.make_polynomial_tail(6.0, "positive", 1e-6, eq)
    for k in (1.0, 2.0, 4.0):
        assert b.norm(k) == pytest.approx(1e-3 * a.norm(k), rel=1e-12)


def test_polynomial_tail_alternating(eq):
    # negative density entries deep in the tail drive c below zero
    with pytest.raises(InfeasiblePerturbationError):
        analysis.make_polynomial_tail(6.0, "alternating", 1e-3, eq, ks=(3,))
    p = analysis.make_polynomial_tail(6.0, "alternating", 1e-3, eq, ks=(3,), scale="relative")
    i = sizes(60)
    assert p.norm(4) == pytest.approx(np.sum(i**4 * np.abs(p.y)), rel=1e-13)
    assert np.all(p.c >= 0)


def test_polynomial_tail_warns(eq):
    with pytest.warns(RuntimeWarning):
        analysis.make_polynomial_tail(4.0, "positive", 1e-3, eq, ks=(3,))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        analysis.make_polynomial_tail(6.5, "positive", 1e-3, eq, ks=(3,))
    with pytest.raises(ValueError):
        analysis.make_polynomial_tail(6.5, "bogus", 1e-3, eq)


def test_perturbation_survives_underflowing_Q():
    eq = equilibrium_from_z(penrose(2000), 0.5)
    assert eq.Q[-1] == 0.0  # below the double range
    p = analysis.make_polynomial_tail(6.5, "positive", 1e-2, eq, ks=(3,))
    assert np.isfinite(p.norm(4)) and np.all(np.isfinite(p.c))


# --- fitting ----------------------------------------------------------------------

def test_fit_exact_power_law():
    t = np.linspace(0, 50, 60)
    slope, intercept, r2 = analysis.fit_rate(t, (1 + t) ** -2.0)
    assert abs(slope + 2) <= 1e-10 and abs(intercept) <= 1e-10 and r2 == pytest.approx(1.0)
    slope, intercept, _ = analysis.fit_rate(t, 3 * (1 + t) ** -2.0)
    assert slope == pytest.approx(-2.0, abs=1e-10) and intercept == pytest.approx(math.log(3), abs=1e-10)


def test_fit_exponential_masquerade():
    t = np.linspace(10, 100, 50)
    slope, _, _ = analysis.fit_rate(t, np.exp(-t), window=(10, 100))
    assert slope < -5
    slopes = analysis.local_slopes(t, np.exp(-t))
    assert analysis.crossover_time(t, slopes, 2.0) is not None


def test_fit_domain_errors():
    with pytest.raises(FitDomainError):
        analysis.fit_rate(np.arange(5.0), np.ones(5))
    with pytest.raises(FitDomainError):
        analysis.fit_rate(np.arange(20.0), -np.ones(20))


def test_local_slopes_power_law():
    t = np.linspace(0, 100, 80)
    s = analysis.local_slopes(t, (1 + t) ** -3.0)
    assert np.nanmax(np.abs(s + 3)) <= 1e-10
    assert np.isnan(s[0]) and np.isnan(s[-1])


def test_log_time_grid():
    t = analysis.log_time_grid(100.0, 10, 0.25)
    assert t[0] == 0.0 and t[-1] == 100.0
    assert np.all(np.diff(t) > 0)
    np.testing.assert_allclose(t / 0.25, np.round(t / 0.25))


def test_growth_rate():
    t = np.linspace(0, 10, 11)
    assert analysis.growth_rate(t, np.exp(0.3 * t), 1.0) == pytest.approx(0.3)
    assert analysis.growth_rate(t, np.exp(-t), 1.0) == 0.0


# --- linear experiments ---------------------------------------------------------------

@pytest.fixture(scope="module")
def bundle():
    return linops.assemble_L(None, equilibrium_from_z(penrose(120), 0.5))


def test_linear_evolution_matches_expm(bundle):
    from scipy.linalg import expm

    y0 = analysis.make_polynomial_tail(6.5, "positive", 1e-2, bundle.equilibrium).y
    t = np.array([0.0, 0.5, 1.5, 4.0])
    Y = analysis.linear_evolution(bundle, y0, t, dt=0.5)
    for j, tt in enumerate(t):
        np.testing.assert_allclose(Y[:, j], expm(bundle.L_density * tt) @ y0, atol=1e-15)
    with pytest.raises(ValueError):
        analysis.linear_evolution(bundle, y0, np.array([0.0, 0.3]), dt=0.25)


def test_linear_zero_initial(bundle):
    t = np.linspace(0, 5, 11)
    Y = analysis.linear_evolution(bundle, np.zeros(bundle.N), t)
    assert np.all(Y == 0)


def test_linear_decay_experiment(bundle):
    u0 = analysis.make_polynomial_tail(6.5, "positive", 1e-2, bundle.equilibrium)
    t = analysis.log_time_grid(100.0, 20, 0.25)
    rep = analysis.linear_decay_experiment(bundle, u0, 3.0, 1.0, t, half=True, dt=0.25)
    assert np.isfinite(rep.domination_constant) and rep.domination_constant > 0
    assert 0.5 <= rep.N_sensitivity <= 2.0
    assert rep.extra["mass_residual"] <= 1e-15
    assert len(list(rep.rows())) == t.size
    d = rep.to_dict()
    assert d["k"] == 3.0 and "h1_series" not in d
    with pytest.raises(ValueError):
        analysis.linear_decay_experiment(bundle, u0, 1.0, 3.0, t, dt=0.25)


def test_exponential_tail_decays_exponentially(bundle):
    eq = bundle.equilibrium
    i = sizes(eq.N)
    y = 1e-3 * np.exp(-0.5 * i)
    y[0] -= i @ y
    u0 = analysis._from_density(y, eq, "h1")
    t = np.linspace(0, 20, 81)
    eta = 0.2
    rate = analysis.exponential_rate(bundle, u0, t, eta)
    assert rate > 0
    Y = analysis.linear_evolution(bundle, u0.y, t)
    v = np.exp(eta * i) @ np.abs(Y)
    assert np.all(v[20:] <= v[0] * np.exp(-0.5 * rate * t[20:]))


def test_truncation_time():
    t = np.arange(5.0)
    a = np.ones(5)
    b = np.array([1, 1, 1.001, 1.05, 1.2])
    assert analysis.truncation_time(t, a, b) == 3.0
    assert analysis.truncation_time(t, a, a) is None


def test_build_report_rejects_nan():
    with pytest.raises(FormulationError):
        analysis.build_report(np.arange(3.0), np.array([1.0, np.nan, 1.0]), 1.0, 3, 1, 2, 10)


# --- nonlinear experiments -------------------------------------------------------------

def test_nonlinear_zero_initial():
    eq = equilibrium_from_z(penrose(60), 0.5)
    p = analysis._from_density(np.zeros(60), eq, "h1")
    t = np.linspace(0, 5, 6)
    rep = analysis.nonlinear_decay_experiment(None, eq, p, 3.5, 1.0, t)
    assert np.abs(rep.extra["trajectory_Y"]).max() <= 1e-15


def test_nonlinear_decay_small_amplitude():
    eq = equilibrium_from_z(penrose(100), 0.5)
    h0 = analysis.make_polynomial_tail(6.5, "positive", 1e-2, eq)
    t = analysis.log_time_grid(50.0, 10, 0.25)
    rep = analysis.nonlinear_decay_experiment(None, eq, h0, 3.5, 1.0, t, delta_hat=0.05, epsilon=1.0)
    assert rep.extra["stability_breach"] is None
    assert rep.extra["sup_h1"] < 0.05
    assert rep.extra["mass_residual"] <= 1e-9
    assert np.isfinite(rep.domination_constant)
    with pytest.raises(ValueError):
        analysis.nonlinear_decay_experiment(None, eq, h0, 2.5, 1.0, t)


def test_nonlinear_breach_recorded():
    eq = equilibrium_from_z(penrose(60), 0.5)
    h0 = analysis.make_polynomial_tail(6.5, "positive", 1e-2, eq)
    rep = analysis.nonlinear_decay_experiment(None, eq, h0, 3.5, 1.0, np.linspace(0, 2, 5), delta_hat=1e-9)
    assert rep.extra["stability_breach"] == "h1"


# --- Duhamel ---------------------------------------------------------------------------

def _duhamel(eq, bundle, amp, dt, t_end=5.0):
    t = np.arange(0.0, t_end + dt / 2, dt)
    cfg = IntegratorConfig(rtol=1e-12, atol=1e-18, t_end=float(t[-1]), checkpoint_times=list(t))
    if amp == 0:
        c0 = eq.Q
    else:
        c0 = analysis.make_polynomial_tail(6.5, "positive", amp, eq).c
    Y, _ = analysis.h_trajectory(integrate(c0, eq.model, cfg, log_qtilde=eq.log_qtilde), eq)
    return analysis.duhamel_residual(Y, bundle, t, raise_on_fail=False)


def test_duhamel_zero():
    eq = equilibrium_from_z(penrose(80), 0.5)
    b = linops.assemble_L(None, eq)
    rep = _duhamel(eq, b, 0.0, 0.1)
    assert rep.absolute <= 1e-15


def test_duhamel_quadratic_scaling_and_refinement():
    eq = equilibrium_from_z(penrose(80), 0.5)
    b = linops.assemble_L(None, eq)
    big, small = _duhamel(eq, b, 1e-2, 0.05), _duhamel(eq, b, 5e-3, 0.05)
    assert 3.0 <= big.absolute / small.absolute <= 5.0
    assert big.passed and big.relative <= 1e-3
    coarse = _duhamel(eq, b, 1e-2, 0.1)
    assert big.absolute <= coarse.absolute


def test_duhamel_raises():
    eq = equilibrium_from_z(penrose(40), 0.5)
    b = linops.assemble_L(None, eq)
    t = np.linspace(0, 1, 5)
    Y = np.random.default_rng(0).standard_normal((40, 5))
    with pytest.raises(FormulationError):
        analysis.duhamel_residual(Y, b, t)
