"""Experiment kinds behind ``beckerdoring run``.

Each runner takes a resolved :class:`~beckerdoring.io.ExperimentConfig`
and returns ``(report, tables)`` where ``tables`` maps a CSV file name to
``(header, rows)``. Nothing here touches the filesystem.
"""
from __future__ import annotations

import numpy as np

from . import analysis, interp, linops
from .exceptions import FormulationError
from .dynamics import IntegratorConfig, entropy, integrate, relative_entropy
from .model import (build_coefficients, critical_mass, critical_z, detailed_balance_residual,
                    equilibrium_from_z, sizes, solve_z)


def _label(k):
    return f"{float(k):g}"


def build_model(cfg):
    N = cfg["N"]
    if cfg["model"] == "penrose":
        return build_coefficients("penrose", N, alpha=cfg["alpha"], mu=cfg["mu"], q=cfg["q"], z_s=cfg["z_s"])
    a, b = cfg["a"], cfg["b"]
    a = np.full(N, float(a)) if np.isscalar(a) else np.asarray(a, dtype=float)
    b = np.full(N, float(b)) if np.isscalar(b) else np.asarray(b, dtype=float)
    return build_coefficients("custom", N, a=a, b=b)


def build_equilibrium(cfg, model=None):
    model = model or build_model(cfg)
    if cfg["z"] is not None:
        return equilibrium_from_z(model, cfg["z"])
    if cfg["z_fraction"] is not None:
        return equilibrium_from_z(model, cfg["z_fraction"] * critical_z(model))
    if cfg["rho"] is not None:
        return solve_z(model, rho_target=cfg["rho"])
    rho_s, _ = critical_mass(model)
    return solve_z(model, rho_target=cfg["rho_fraction"] * rho_s)


def integrator_config(cfg, t_end=None, checkpoints=()):
    return IntegratorConfig(
        method=cfg["method"], rtol=cfg["rtol"], atol=cfg["atol"], dt_init=cfg["dt_init"],
        dt_max=cfg["dt_max"], t_end=cfg["t_end"] if t_end is None else t_end,
        checkpoint_times=list(checkpoints), interpolation=cfg["interpolation"],
    )


def initial_perturbation(cfg, eq, ks=()):
    return analysis.make_polynomial_tail(cfg["p"], cfg["signs"], cfg["amplitude"], eq, ks=ks,
                                         scale=cfg["scale"], compensation=cfg["compensation"],
                                         seed=cfg["seed"])


def _eq_summary(eq):
    return {"N": eq.N, "z": eq.z, "z_s": eq.z_s, "rho": eq.rho, "tail_bound": eq.tail_bound}


def run_equilibrium(cfg):
    eq = build_equilibrium(cfg)
    rows = list(eq.to_rows())
    rep = {**_eq_summary(eq), "max_detailed_balance_residual": detailed_balance_residual(eq.model)}
    return rep, {"equilibrium.csv": (["i", "a_i", "b_i", "Qtilde_i", "Q_i", "residual"], rows)}


def run_simulate(cfg):
    eq = build_equilibrium(cfg)
    pert = initial_perturbation(cfg, eq)
    t = np.linspace(0.0, cfg["t_end"], cfg["n_checkpoints"])
    traj = integrate(pert.c, eq.model, integrator_config(cfg, checkpoints=t), log_qtilde=eq.log_qtilde)
    ks = cfg["ks"]
    header = ["t", "mass", "entropy", "rel_entropy", "norm_X1"] + [f"norm_X1p{_label(k)}" for k in ks] + ["c_1"]
    rows = []
    xk = []
    for st in traj.states:
        y = st.c - eq.Q
        norms = [analysis.density_norm(y, 1 + k) for k in ks]
        xk.append(norms)
        rows.append([st.t, st.mass, st.entropy, relative_entropy(st.c, eq.log_Q),
                     analysis.density_norm(y, 1)] + norms + [st.c[0]])
    xk = np.array(xk)
    growth = {_label(k): analysis.growth_rate(t, xk[:, j], pert.norm(1 + k)) for j, k in enumerate(ks)}
    rep = {
        **_eq_summary(eq),
        "mass_drift": traj.mass_drift,
        "max_entropy_increase": traj.max_entropy_increase,
        "entropy_monotone": traj.entropy_monotone,
        "n_steps": traj.n_steps, "n_rejected": traj.n_rejected, "n_clamped": traj.n_clamped,
        "worst_negative": traj.worst_negative,
        "K_hat": growth,
        "initial_entropy": entropy(pert.c, eq.log_qtilde),
    }
    return rep, {"trajectory.csv": (header, rows)}


def run_spectrum(cfg):
    eq = build_equilibrium(cfg)
    b = linops.assemble_L(None, eq)
    gap = linops.spectral_gap(b, half=True)
    d_h, info_h = linops.quadratic_gap_threshold(b, g_max=4.0)
    lam_h = {_label(g): linops.quadratic_gap(b, g) for g in cfg["g_grid"]}
    dk = {}
    for k in cfg["ks"]:
        d, info = linops.dissipativity_threshold(b, k, samples=cfg["samples"], seed=cfg["seed"], g_max=cfg["g_max"])
        dk[_label(k)] = {"delta_hat": d, **info}
    DL = b.Q[:, None] * b.L
    rep = {
        "N": b.N, "z": eq.z, "z_s": eq.z_s,
        "lambda_c": gap.lambda_c, "lambda_c_half": gap.lambda_c_half, "N_stability": gap.N_stability,
        "lambda_H": lam_h, "delta_hat_H": d_h, "delta_hat_H_detail": info_h,
        "delta_hat_k": dk,
        "residuals": {
            "eigen": gap.residual,
            "factorization": float(np.abs(linops.factorized_L(b) - b.L).max() / np.abs(b.L).max()),
            "self_adjoint": float(np.abs(DL - DL.T).max() / np.abs(DL).max()),
        },
        "boundary_rows": [b.N - 1, b.N],
    }
    return rep, {}


def run_dissipativity(cfg):
    eq = build_equilibrium(cfg)
    b = linops.assemble_L(None, eq)
    out = {}
    for k in cfg["ks"]:
        d, info = linops.dissipativity_threshold(b, k, samples=cfg["samples"], seed=cfg["seed"], g_max=cfg["g_max"])
        checks = {}
        for g in (0.0, 0.5 * d, -0.5 * d):
            r = linops.dissipativity_check(b, g, k, samples=cfg["samples"], seed=cfg["seed"] + 1)
            checks[_label(g)] = {"max_value": r.max_value, "passed": r.passed}
        out[_label(k)] = {"ntilde": info["ntilde"], "delta_hat": d, "censored": info["censored"], "checks": checks}
    rep = {**_eq_summary(eq), "B_norm_X1_to_H": linops.regularizing_norm(b, seed=cfg["seed"]), "by_k": out}
    return rep, {}


def run_interp_check(cfg):
    eq = build_equilibrium(cfg)
    N = eq.N
    eta = cfg["eta"] if cfg["eta"] is not None else interp.default_eta(eq.z, eq.z_s)
    rng = np.random.default_rng(cfg["seed"])
    n = min(cfg["samples"], 100)
    Y = linops.zero_mass_samples(rng, N, n)
    s = np.linspace(-30.0, 30.0, 121)
    lo_ratio, hi_ratio, sandwich_ok = np.inf, 0.0, True
    for j in range(n):
        a, b, ok = interp.sandwich_ratios(s, Y[:, j], eta)
        lo_ratio, hi_ratio, sandwich_ok = min(lo_ratio, a), max(hi_ratio, b), sandwich_ok and ok
    equiv = {}
    for r in cfg["r"]:
        w = (1.0 + sizes(N)) ** (1.0 + r)
        ratios = np.array([interp.star_norm(Y[:, j], r, eta) / (w @ np.abs(Y[:, j])) for j in range(n)])
        c_lo, c_hi = interp.index_bounds(N, r, eta)
        h_lo, h_hi = interp.index_bounds(N // 2, r, eta)
        equiv[_label(r)] = {"min_ratio": float(ratios.min()), "max_ratio": float(ratios.max()),
                            "index_bounds": [c_lo, c_hi], "index_bounds_half_N": [h_lo, h_hi]}
    shift = interp.Hr_shift_bound(1.0, 3.0)
    gron = {_label(r): interp.gronwall_convolution_check(r, raise_on_fail=False).margin for r in (2.0, 3.0)}
    rep = {
        "N": N, "eta": eta, "r": cfg["r"],
        "sandwich_constant": interp.sandwich_constant(eta),
        "sandwich_constants_observed": [lo_ratio, hi_ratio],
        "sandwich_holds": sandwich_ok,
        "equivalence_ratios": equiv,
        "grid_stability": {"H_shift_sup": shift.sup_ratio, "refined": shift.refined_sup,
                           "relative_change": shift.grid_stability},
        "gronwall_margin": gron,
    }
    return rep, {}


def _decay_table(rep):
    return (["t", f"norm_X{_label(1 + rep.m)}", "h1", "local_slope"], list(rep.rows()))


def run_linear_decay(cfg):
    eq = build_equilibrium(cfg)
    b = linops.assemble_L(None, eq)
    u0 = initial_perturbation(cfg, eq, ks=(cfg["k"],))
    t = analysis.log_time_grid(cfg["t_end"], cfg["per_decade"], cfg["dt"])
    rep = analysis.linear_decay_experiment(b, u0, cfg["k"], cfg["m"], t, half=True, dt=cfg["dt"])
    out = {**_eq_summary(eq), **rep.to_dict()}
    return out, {"decay.csv": _decay_table(rep)}


def run_nonlinear_decay(cfg):
    eq = build_equilibrium(cfg)
    b = linops.assemble_L(None, eq)
    k, m = cfg["k"], cfg["m"]
    d, info = linops.dissipativity_threshold(b, k, samples=cfg["samples"], seed=cfg["seed"], g_max=cfg["g_max"])
    h0 = initial_perturbation(cfg, eq, ks=(k,))
    t = analysis.log_time_grid(cfg["t_end"], cfg["per_decade"], cfg["dt"])
    rep = analysis.nonlinear_decay_experiment(eq.model, eq, h0, k, m, t, config=integrator_config(cfg),
                                              delta_hat=d)
    out = {**_eq_summary(eq), **rep.to_dict(), "delta_hat_k": d, "ntilde": info["ntilde"]}
    return out, {"decay.csv": _decay_table(rep)}


def run_duhamel(cfg):
    eq = build_equilibrium(cfg)
    b = linops.assemble_L(None, eq)
    h0 = initial_perturbation(cfg, eq)
    dt = cfg["dt"]
    t = np.arange(0.0, cfg["t_end"] + 0.5 * dt, dt)
    traj = integrate(h0.c, eq.model, integrator_config(cfg, t_end=float(t[-1]), checkpoints=t),
                     log_qtilde=eq.log_qtilde)
    Y, _ = analysis.h_trajectory(traj, eq)
    r = analysis.duhamel_residual(Y, b, t, raise_on_fail=False)
    rep = {**_eq_summary(eq), "absolute": r.absolute, "relative": r.relative,
           "linearisation_defect": r.linearisation_defect, "worst_time": r.worst_time,
           "threshold": 1e-3, "passed": r.passed}
    if not r.passed:
        raise FormulationError(f"Duhamel residual {r.relative:.3e} exceeds 1e-3", report=rep)
    return rep, {}


RUNNERS = {
    "equilibrium": run_equilibrium,
    "simulate": run_simulate,
    "spectrum": run_spectrum,
    "dissipativity": run_dissipativity,
    "interp-check": run_interp_check,
    "linear-decay": run_linear_decay,
    "nonlinear-decay": run_nonlinear_decay,
    "duhamel": run_duhamel,
}
