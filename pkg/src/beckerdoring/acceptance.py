"""The acceptance battery behind ``beckerdoring verify``.

Every check returns a :class:`CheckResult`. A check passes only when its
numerical condition holds *and* it ran within its time limit. The ``fast``
suite skips the second truncation of the N-stability comparisons (criteria
5, 10 and 11 then test only what can be seen at one ``N``).
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import analysis, interp, linops
from .dynamics import IntegratorConfig, integrate
from .model import (build_coefficients, critical_mass, critical_z, detailed_balance_residual,
                    equilibrium_from_z, mass_of_z, sizes, solve_z)

SUITES = ("fast", "full")


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    observed: dict
    threshold: str
    runtime: float = 0.0
    limit: float = float("inf")
    note: str = ""

    @property
    def status(self):
        return "PASS" if self.passed else "FAIL"

    def line(self):
        obs = ", ".join(f"{k}={_short(v)}" for k, v in self.observed.items())
        txt = (f"{self.status} [{self.number:2d}] {self.name}: {obs} | need {self.threshold} | "
               f"{self.runtime:.2f}s (limit {self.limit:g}s)")
        return txt + (f" | {self.note}" if self.note else "")

    def to_dict(self):
        return {"number": self.number, "name": self.name, "passed": self.passed, "observed": self.observed,
                "threshold": self.threshold, "runtime": self.runtime, "limit": self.limit, "note": self.note}


def _short(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.4g}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_short(x) for x in v) + "]"
    return str(v)


def _penrose(N, alpha=0.5, mu=0.5, q=1.0):
    return build_coefficients("penrose", N, alpha=alpha, mu=mu, q=q, z_s=1.0)


def _half_zs(N):
    m = _penrose(N)
    return equilibrium_from_z(m, 0.5 * critical_z(m))


# --- individual criteria ----------------------------------------------------

def check_detailed_balance(full=True):
    res = {}
    for a, mu, q in ((1.0, 1.0, 1.0), (0.5, 0.0, 1.0)):
        res[f"({a:g},{mu:g},{q:g})"] = detailed_balance_residual(_penrose(1000, a, mu, q))
    worst = max(res.values())
    return CheckResult(1, "detailed balance", worst <= 1e-14, {"max_residual": worst}, "<= 1e-14", limit=1.0)


def check_round_trip(full=True):
    model = _penrose(1000)
    rho_s, _ = critical_mass(model)
    errs = []
    for frac in (0.25, 0.5, 0.75):
        rho = frac * rho_s
        eq = solve_z(model, rho_target=rho)
        errs.append(abs(mass_of_z(model, None, eq.z)[0] - rho) / rho)
    return CheckResult(2, "equilibrium round trip", max(errs) <= 1e-9,
                       {"rel_errors": errs, "rho_s": rho_s}, "<= 1e-9", limit=1.0)


def check_conservation(full=True):
    # monomer start at half the critical mass: far from equilibrium
    model = _penrose(300)
    rho = 0.5 * critical_mass(model)[0]
    c0 = np.zeros(300)
    c0[0] = rho
    runs = {}
    for rtol in (1e-6, 1e-9):
        cfg = IntegratorConfig(rtol=rtol, atol=1e-16, t_end=100.0, checkpoint_times=[100.0])
        runs[rtol] = integrate(c0, model, cfg)
    fine = runs[1e-9]
    i = sizes(300)
    # X_1 distance between the two final states, relative to the mass
    conv = float(i @ np.abs(runs[1e-6].states[-1].c - fine.states[-1].c)) / rho
    drift = max(r.mass_drift for r in runs.values())
    # worst entropy increase relative to |V|
    rise = max(float(np.max(np.diff(r.step_entropy) / np.maximum(np.abs(r.step_entropy[1:]), 1e-300)))
               for r in runs.values())
    ok = drift <= 1e-9 and rise <= 1e-12 and conv <= 1e-5
    return CheckResult(3, "conservation and entropy", ok,
                       {"mass_drift": drift, "entropy_rise": rise, "self_convergence": conv},
                       "drift <= 1e-9, rise <= 1e-12, convergence <= 1e-5", limit=30.0)


def check_dirichlet(full=True):
    eq = _half_zs(500)
    b = linops.assemble_L(None, eq)
    rng = np.random.default_rng(4)
    i = sizes(500)
    worst = 0.0
    for _ in range(1000):
        h = rng.standard_normal(500) * rng.uniform(0.1, 10.0)
        h[0] -= (eq.Q * i) @ h / eq.Q[0]
        lhs, form = linops.dirichlet_form(b, h)
        worst = max(worst, abs(lhs + form) / abs(lhs))
    return CheckResult(4, "Dirichlet-form identity", worst <= 1e-12, {"max_rel_error": worst},
                       "<= 1e-12", limit=5.0)


def check_spectral_gap(full=True):
    b = linops.assemble_L(None, _half_zs(800 if full else 400))
    gap = linops.spectral_gap(b, half=full)
    d_h, info = linops.quadratic_gap_threshold(b)
    gs = np.linspace(-0.5 * d_h, 0.5 * d_h, 11)
    lam_h = min(linops.quadratic_gap(b, g) for g in gs)
    obs = {"lambda_c": gap.lambda_c, "delta_hat_H": d_h, "min_lambda_H": lam_h}
    ok = gap.lambda_c > 0 and lam_h > 0
    need = "lambda_c > 0, lambda_H > 0 on |g| <= delta_H/2"
    if full:
        obs["lambda_c_400"] = gap.lambda_c_half
        obs["N_stability"] = gap.N_stability
        ok = ok and gap.N_stability <= 0.01
        need += ", N-stability <= 1%"
    return CheckResult(5, "spectral gap", ok, obs, need, limit=60.0)


def check_jacobian(full=True):
    eq = _half_zs(200)
    b = linops.assemble_L(None, eq)
    rep = linops.jacobian_consistency(None, eq, step=1e-6, bundle=b, threshold=np.inf)
    # the h-RHS is exactly L h + h_1 Gamma h = F(h_1) h
    rng = np.random.default_rng(6)
    i = sizes(200)
    ident = 0.0
    for _ in range(20):
        h = 0.1 * rng.uniform(-1, 1, 200)
        h[0] -= (eq.Q * i) @ h / eq.Q[0]
        lhs = linops.h_rhs(h, eq)
        rhs = b.F(h[0]) @ h
        ident = max(ident, float(np.abs(lhs - rhs)[:-2].max() / np.abs(rhs)[:-2].max()))
    F_gap = float(np.abs(b.F(0.3) - (b.L + 0.3 * b.Gamma)).max())
    ok = rep.max_rel_error <= 1e-5 and ident <= 1e-9 and F_gap == 0.0
    return CheckResult(6, "Jacobian consistency", ok,
                       {"fd_rel_error": rep.max_rel_error, "rhs_identity": ident, "F_identity": F_gap},
                       "fd <= 1e-5, F(h1) h identity <= 1e-9, F(g) exact", limit=10.0)


def check_dissipativity(full=True):
    b = linops.assemble_L(None, _half_zs(200))
    obs = {}
    ok = True
    r0 = linops.dissipativity_check(b, 0.0, 0.0, samples=10_000, seed=7)
    ok &= r0.passed
    obs["A0_X1_max"] = r0.max_value
    for k in (0.0, 1.0, 2.0, 3.0):
        d, _ = linops.dissipativity_threshold(b, k, samples=2000, seed=8)
        worst = -np.inf
        for g in (0.5 * d, -0.5 * d):
            r = linops.dissipativity_check(b, g, k, samples=10_000, seed=9)
            ok &= r.passed
            worst = max(worst, r.max_value)
        obs[f"delta_hat_{k:g}"] = d
        obs[f"max_{k:g}"] = worst
    return CheckResult(7, "dissipativity", bool(ok), obs, "sign functional <= 1e-12 * scale", limit=30.0)


def check_sandwich(full=True):
    N = 100
    eta = 0.5 * np.log(2.0)
    C = interp.sandwich_constant(eta)
    Y = linops.zero_mass_samples(np.random.default_rng(10), N, 100)
    s = np.linspace(-30.0, 30.0, 241)
    lo, hi, ok = np.inf, 0.0, True
    for j in range(Y.shape[1]):
        a, b, fine = interp.sandwich_ratios(s, Y[:, j], eta)
        lo, hi, ok = min(lo, a), max(hi, b), ok and fine
    obs = {"K_ratio_min": lo, "K_ratio_max": hi, "C": C}
    for r in (1.0, 2.0, 3.0):
        b_lo, b_hi = interp.index_bounds(N, r, eta)
        w = (1.0 + sizes(N)) ** (1.0 + r)
        ratio = np.array([interp.star_norm(Y[:, j], r, eta) / (w @ np.abs(Y[:, j])) for j in range(Y.shape[1])])
        ok &= bool(ratio.min() >= b_lo * (1 - 1e-12) and ratio.max() <= b_hi * (1 + 1e-12))
        obs[f"r{r:g}_ratio"] = [float(ratio.min()), float(ratio.max())]
        obs[f"r{r:g}_bounds"] = [b_lo, b_hi]
    return CheckResult(8, "K-functional sandwich", bool(ok), obs,
                       "1 <= K_exact/K_lower <= C, ratios within index bounds", limit=60.0)


def check_gronwall(full=True):
    obs = {}
    ok = True
    for r in (2.0, 3.0):
        rep = interp.gronwall_convolution_check(r, raise_on_fail=False)
        ok &= rep.passed
        obs[f"min_margin_r{r:g}"] = min(rep.margin)
    return CheckResult(9, "Gronwall convolution", bool(ok), obs, "margin >= 1", limit=1.0)


def _linear_run(N):
    eq = _half_zs(N)
    b = linops.assemble_L(None, eq)
    u0 = analysis.make_polynomial_tail(6.5, "positive", 1e-2, eq)
    t = analysis.log_time_grid(400.0, 20, 0.25)
    return analysis.linear_decay_experiment(b, u0, 3.0, 1.0, t, dt=0.25)


def check_linear_decay(full=True):
    small = _linear_run(200)
    obs = {"domination_200": small.domination_constant, "crossover_200": small.crossover}
    ok = np.isfinite(small.domination_constant)
    need = "finite domination"
    if full:
        big = _linear_run(800)
        growth = big.domination_constant / small.domination_constant
        t_tr = analysis.truncation_time(small.times, big.norms, small.norms)
        obs.update({"domination_800": big.domination_constant, "growth": growth,
                    "crossover_800": big.crossover, "t_truncation": t_tr})
        later = (big.crossover is None and small.crossover is not None) or (
            big.crossover is not None and small.crossover is not None and big.crossover > small.crossover)
        ok = ok and growth < 2.0 and later
        need += ", growth < 2, crossover(800) > crossover(200)"
    return CheckResult(10, "linear decay domination", bool(ok), obs, need, limit=120.0)


def _nonlinear_scan(N, amplitudes):
    model = _penrose(N)
    eq = solve_z(model, rho_target=0.5 * critical_mass(model)[0])
    b = linops.assemble_L(None, eq)
    d, _ = linops.dissipativity_threshold(b, 3.5, samples=2000, seed=11)
    t = analysis.log_time_grid(300.0, 20, 0.25)
    reps = []
    for amp in amplitudes:
        h0 = analysis.make_polynomial_tail(6.5, "positive", amp, eq)
        reps.append(analysis.nonlinear_decay_experiment(model, eq, h0, 3.5, 1.0, t, delta_hat=d))
    return d, reps


def check_nonlinear_decay(full=True):
    amps = (4e-2, 2e-2, 1e-2)
    d, reps = _nonlinear_scan(200, amps)
    first = reps[0]
    # epsilon from the largest amplitude of the scan, as a multiple of ||h0||_{X_1+k}
    eps_ratio = first.extra["sup_Xk"] / first.initial_norm_k
    ratios = [r.extra["sup_Xk"] / r.initial_norm_k for r in reps]
    sup_h1 = max(r.extra["sup_h1"] for r in reps)
    dom = [r.domination_constant for r in reps]
    ok = bool(np.all(np.isfinite(dom)) and sup_h1 <= d and max(ratios) <= eps_ratio * (1 + 1e-2))
    obs = {"domination_200": dom[-1], "delta_hat": d, "sup_h1": sup_h1,
           "eps_ratio": eps_ratio, "Xk_ratios": ratios}
    need = "finite domination, sup|h1| <= delta_hat, sup X_1+k <= eps"
    if full:
        _, big = _nonlinear_scan(800, amps[-1:])
        growth = big[0].domination_constant / dom[-1]
        obs.update({"domination_800": big[0].domination_constant, "growth": growth})
        ok = ok and growth < 2.0
        need += ", growth < 2"
    return CheckResult(11, "nonlinear decay domination", ok, obs, need, limit=300.0)


def check_duhamel(full=True):
    eq = _half_zs(300)
    b = linops.assemble_L(None, eq)
    t = np.arange(0.0, 20.0 + 0.025, 0.05)
    cfg = IntegratorConfig(rtol=1e-12, atol=1e-18, t_end=float(t[-1]), checkpoint_times=list(t))
    reps = []
    for amp in (1e-2, 5e-3):
        h0 = analysis.make_polynomial_tail(6.5, "positive", amp, eq)
        traj = integrate(h0.c, eq.model, cfg, log_qtilde=eq.log_qtilde)
        Y, _ = analysis.h_trajectory(traj, eq)
        reps.append(analysis.duhamel_residual(Y, b, t, raise_on_fail=False))
    ratio = reps[0].absolute / reps[1].absolute
    ok = 3.0 <= ratio <= 5.0 and all(r.passed for r in reps)
    return CheckResult(12, "Duhamel residual", bool(ok),
                       {"ratio": ratio, "relative": [r.relative for r in reps],
                        "defect_ratio": reps[0].linearisation_defect / reps[1].linearisation_defect},
                       "ratio in [3, 5], relative <= 1e-3", limit=60.0)


CHECKS = (check_detailed_balance, check_round_trip, check_conservation, check_dirichlet,
          check_spectral_gap, check_jacobian, check_dissipativity, check_sandwich,
          check_gronwall, check_linear_decay, check_nonlinear_decay, check_duhamel)


def run_check(fn, full=True):
    t0 = time.perf_counter()
    try:
        res = fn(full)
    except Exception as exc:  # a crash is a FAIL with the reason attached
        n = CHECKS.index(fn) + 1
        res = CheckResult(n, fn.__name__.removeprefix("check_").replace("_", " "), False,
                          {"error": f"{type(exc).__name__}: {exc}"}, "no exception")
    res.runtime = time.perf_counter() - t0
    if res.runtime > res.limit:
        res.passed = False
        res.note = (res.note + "; " if res.note else "") + "over time limit"
    return res


@dataclass
class SuiteResult:
    suite: str
    results: list = field(default_factory=list)

    @property
    def passed(self):
        return all(r.passed for r in self.results)


def run_suite(suite="fast", echo=None):
    """Run every criterion; ``echo`` gets each result line as it finishes."""
    if suite not in SUITES:
        raise ValueError(f"suite must be one of {SUITES}")
    out = SuiteResult(suite)
    for fn in CHECKS:
        res = run_check(fn, full=suite == "full")
        out.results.append(res)
        if echo is not None:
            echo(res.line())
    return out
