"""Becker-Doring coagulation-fragmentation at finite truncation.

Equilibria (:mod:`.model`), mass-conserving time integration
(:mod:`.dynamics`), the linearised operator and its spectrum
(:mod:`.linops`), K-functional and weighted-norm diagnostics
(:mod:`.interp`) and decay experiments (:mod:`.analysis`).
"""
from .analysis import (DecayReport, Perturbation, fit_rate, linear_decay_experiment,
                       make_polynomial_tail, nonlinear_decay_experiment, weighted_norm)
from .dynamics import IntegratorConfig, Trajectory, entropy, integrate, rhs
from .estimators import BeckerDoringEquilibrium, PowerLawDecayRegressor
from .interp import K_exact, K_lower, star_norm
from .linops import OperatorBundle, assemble_A, assemble_L, spectral_gap
from .model import (CoefficientModel, Equilibrium, build_coefficients, critical_mass, critical_z,
                    detailed_balance, equilibrium_from_z, mass_of_z, solve_z)

__version__ = "0.1.0"

__all__ = [
    "BeckerDoringEquilibrium", "CoefficientModel", "DecayReport", "Equilibrium", "IntegratorConfig",
    "K_exact", "K_lower", "OperatorBundle", "Perturbation", "PowerLawDecayRegressor", "Trajectory",
    "assemble_A", "assemble_L", "build_coefficients", "critical_mass", "critical_z", "detailed_balance",
    "entropy", "equilibrium_from_z", "fit_rate", "integrate", "linear_decay_experiment",
    "make_polynomial_tail", "mass_of_z", "nonlinear_decay_experiment", "rhs", "solve_z",
    "spectral_gap", "star_norm", "weighted_norm",
]
