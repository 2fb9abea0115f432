from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from beckerdoring.analysis import make_polynomial_tail
from beckerdoring.dynamics import (IntegratorConfig, entropy, flux, fluxes, integrate, mass,
                                   relative_entropy, rhs, rhs_jacobian)
from beckerdoring.model import critical_mass, equilibrium_from_z, log_detailed_balance, sizes
from conftest import custom, penrose


def _rates(a, b):
    # fluxes only read a and b, so small hand cases need no full model
    return SimpleNamespace(a=np.asarray(a, float), b=np.asarray(b, float), N=len(a))


def test_flux_zero_at_equilibrium():
    eq = equilibrium_from_z(penrose(50), 0.5)
    J = fluxes(eq.Q, eq.model)
    assert np.abs(J).max() <= 1e-15 * (eq.model.a[:-1] * eq.Q[0] * eq.Q[:-1]).max()
    assert np.abs(rhs(eq.Q, eq.model)).max() <= 1e-15


def test_flux_monomers_only():
    m = _rates(np.ones(5), np.ones(5))
    c = np.array([1.0, 0, 0, 0, 0])
    assert flux(c, m, 1) == 1.0
    assert all(flux(c, m, i) == 0.0 for i in range(2, 5))


def test_flux_no_monomers_nonpositive():
    m = penrose(20)
    c = np.random.default_rng(0).random(20)
    c[0] = 0
    assert np.all(fluxes(c, m) <= 0)


def test_flux_index_range():
    with pytest.raises(IndexError):
        flux(np.ones(10), penrose(10), 10)


def test_rhs_hand_case():
    m = _rates(np.ones(3), np.ones(3))
    np.testing.assert_array_equal(rhs(np.array([2.0, 1.0, 1.0]), m), [-7.0, 2.0, 1.0])
    np.testing.assert_array_equal(rhs(np.ones(3), m), [0.0, 0.0, 0.0])


@given(arrays(np.float64, 40, elements=st.floats(0, 10)))
def test_rhs_conserves_mass(c):
    m = penrose(40)
    dc = rhs(c, m)
    assert abs(sizes(40) @ dc) <= 1e-13 * max(np.abs(dc).max(), 1e-300) * 40


def test_rhs_jacobian_matches_finite_difference():
    m = penrose(15)
    c = np.random.default_rng(1).random(15)
    J = rhs_jacobian(c, m)
    eps = 1e-7
    fd = np.column_stack([(rhs(c + eps * e, m) - rhs(c - eps * e, m)) / (2 * eps) for e in np.eye(15)])
    np.testing.assert_allclose(J, fd, atol=1e-7)


def test_entropy_special_values():
    m = penrose(30)
    lq = log_detailed_balance(m)
    qt = np.exp(lq)
    assert entropy(qt, lq) == pytest.approx(-qt.sum(), rel=1e-14)
    assert entropy(np.zeros(30), lq) == 0.0


def test_relative_entropy_zero_at_Q():
    eq = equilibrium_from_z(penrose(30), 0.5)
    assert abs(relative_entropy(eq.Q, eq.log_Q)) <= 1e-15


@given(st.integers(0, 2**32 - 1))
def test_relative_entropy_positive_same_mass(seed):
    eq = equilibrium_from_z(penrose(30), 0.5)
    rng = np.random.default_rng(seed)
    c = eq.Q * rng.uniform(0.2, 3.0, 30)
    c *= eq.rho / mass(c)
    assert relative_entropy(c, eq.log_Q) > 0


def _rk4(c0, m, t_end, dt):
    c = c0.copy()
    for _ in range(int(round(t_end / dt))):
        k1 = rhs(c, m)
        k2 = rhs(c + 0.5 * dt * k1, m)
        k3 = rhs(c + 0.5 * dt * k2, m)
        k4 = rhs(c + dt * k3, m)
        c = c + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return c


def test_equilibrium_is_fixed_point():
    eq = equilibrium_from_z(penrose(60), 0.5)
    traj = integrate(eq.Q, eq.model, IntegratorConfig(t_end=20.0, checkpoint_times=[0, 10, 20]))
    assert np.abs(traj.concentrations - eq.Q).max() <= 1e-12


@pytest.mark.parametrize("method", ["explicit_adaptive", "implicit_euler"])
def test_perturbed_equilibrium_against_reference(method):
    eq = equilibrium_from_z(penrose(30), 0.5)
    h0 = make_polynomial_tail(3.0, "alternating", 0.05, eq, scale="relative")
    t = np.linspace(0, 10, 21)
    cfg = IntegratorConfig(method=method, rtol=1e-10, atol=1e-14, dt_max=0.01 if method == "implicit_euler" else 1.0,
                           t_end=10.0, checkpoint_times=list(t))
    traj = integrate(h0.c, eq.model, cfg)
    ref = _rk4(h0.c, eq.model, 10.0, 1e-3)
    tol = 1e-8 if method == "explicit_adaptive" else 2e-3
    i = sizes(30)
    assert i @ np.abs(traj.states[-1].c - ref) <= tol * (i @ ref)
    # the perturbation shrinks in X_1
    dist = (i * np.abs(traj.concentrations - eq.Q)).sum(axis=1)
    assert np.all(np.diff(dist) <= 1e-12)


def test_conservation_and_entropy_monotone():
    m = penrose(100)
    c0 = np.zeros(100)
    c0[0] = 0.5 * critical_mass(m)[0]
    traj = integrate(c0, m, IntegratorConfig(t_end=50.0, checkpoint_times=[0, 25, 50]))
    assert traj.mass_drift <= 1e-12
    assert traj.entropy_monotone
    assert traj.n_steps > 0 and np.all(traj.concentrations >= 0)


def test_self_convergence():
    m = penrose(100)
    c0 = np.zeros(100)
    c0[0] = 1.0
    ends = [integrate(c0, m, IntegratorConfig(rtol=r, t_end=30.0, checkpoint_times=[30.0])).states[-1].c
            for r in (1e-6, 1e-9)]
    i = sizes(100)
    assert i @ np.abs(ends[0] - ends[1]) <= 1e-5 * (i @ ends[1])


def test_dense_checkpoints_match_linear_at_coarse_tolerance():
    eq = equilibrium_from_z(penrose(30), 0.5)
    h0 = make_polynomial_tail(3.0, "positive", 0.05, eq)
    t = list(np.linspace(0, 5, 11))
    dense = integrate(h0.c, eq.model, IntegratorConfig(t_end=5.0, checkpoint_times=t)).concentrations
    lin = integrate(h0.c, eq.model, IntegratorConfig(t_end=5.0, checkpoint_times=t,
                                                     interpolation="linear")).concentrations
    ref = np.array([_rk4(h0.c, eq.model, tt, 1e-3) for tt in t])
    assert np.abs(dense - ref).max() <= np.abs(lin - ref).max() + 1e-14


def test_step_callback_and_validation():
    m = penrose(20)
    seen = []
    integrate(np.ones(20) * 0.01, m, IntegratorConfig(t_end=1.0), step_callback=lambda t, c: seen.append(t))
    assert seen[0] == 0.0 and seen[-1] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        integrate(-np.ones(20), m, IntegratorConfig(t_end=1.0))
    with pytest.raises(ValueError):
        integrate(np.ones(19), m, IntegratorConfig(t_end=1.0))
    with pytest.raises(ValueError):
        IntegratorConfig(method="euler")


def test_config_round_trip():
    cfg = IntegratorConfig(rtol=1e-7, checkpoint_times=[1.0, 2.0])
    assert IntegratorConfig(**cfg.to_dict()) == cfg
