"""scikit-learn style wrappers.

``BeckerDoringEquilibrium`` fits the equilibrium matching a set of
concentration snapshots (same mass) and maps snapshots to and from
perturbation coordinates. ``PowerLawDecayRegressor`` fits
``y = C (1 + t)^slope``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .analysis import fit_rate
from .model import build_coefficients, equilibrium_from_z, sizes, solve_z


class BeckerDoringEquilibrium(TransformerMixin, BaseEstimator):
    """Equilibrium of a coefficient family fitted to concentration snapshots.

    ``fit`` infers ``N`` from the number of columns and, unless ``rho`` or
    ``z`` is given, the target mass from the mean of ``sum_i i c_i`` over
    rows. ``transform`` returns ``h = c / Q - 1`` (``output="relative"``) or
    ``c - Q`` (``output="density"``).
    """

    def __init__(self, kind="penrose", alpha=0.5, mu=0.5, q=1.0, z_s=1.0, a=None, b=None,
                 rho=None, z=None, output="relative"):
        self.kind = kind
        self.alpha = alpha
        self.mu = mu
        self.q = q
        self.z_s = z_s
        self.a = a
        self.b = b
        self.rho = rho
        self.z = z
        self.output = output

    def _model(self, N):
        if self.kind == "penrose":
            return build_coefficients("penrose", N, alpha=self.alpha, mu=self.mu, q=self.q, z_s=self.z_s)
        return build_coefficients(self.kind, N, a=self.a, b=self.b)

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_features=8)
        if np.any(X < 0):
            raise ValueError("concentrations must be nonnegative")
        if self.output not in ("relative", "density"):
            raise ValueError("output must be 'relative' or 'density'")
        if self.rho is not None and self.z is not None:
            raise ValueError("give at most one of rho and z")
        N = X.shape[1]
        self.model_ = self._model(N)
        if self.z is not None:
            self.equilibrium_ = equilibrium_from_z(self.model_, float(self.z))
        else:
            rho = self.rho if self.rho is not None else float(np.mean(X @ sizes(N)))
            self.equilibrium_ = solve_z(self.model_, rho_target=rho)
        self.Q_ = self.equilibrium_.Q
        self.z_ = self.equilibrium_.z
        self.rho_ = self.equilibrium_.rho
        self.n_features_in_ = N
        return self

    def transform(self, X):
        check_is_fitted(self, "equilibrium_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} sizes, expected {self.n_features_in_}")
        Y = X - self.Q_
        if self.output == "density":
            return Y
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(Y == 0, 0.0, Y / self.Q_)

    def inverse_transform(self, H):
        check_is_fitted(self, "equilibrium_")
        H = check_array(H)
        if self.output == "density":
            return self.Q_ + H
        return self.Q_ * (1.0 + H)

    def mass_residual(self, X):
        """``sum_i i (c_i - Q_i)`` per row (zero when the row has the fitted mass)."""
        check_is_fitted(self, "equilibrium_")
        X = check_array(X)
        return (X - self.Q_) @ sizes(self.n_features_in_)


class PowerLawDecayRegressor(RegressorMixin, BaseEstimator):
    """Least-squares power law ``y = exp(intercept) (1 + t)^slope`` in log-log space."""

    def __init__(self, window=None):
        self.window = window

    def fit(self, X, y):
        X, y = check_X_y(X, y, ensure_min_samples=10)
        if X.shape[1] != 1:
            raise ValueError("X must have a single column of times")
        t = X[:, 0]
        self.slope_, self.intercept_, self.r2_ = fit_rate(t, y, self.window)
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "slope_")
        X = check_array(X)
        return np.exp(self.intercept_) * (1.0 + X[:, 0]) ** self.slope_
