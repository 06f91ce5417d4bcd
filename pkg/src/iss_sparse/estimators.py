"""scikit-learn style wrappers around the path solvers.

Each estimator computes a path on ``fit`` and reports the point selected by a
fixed time (``t``) or by a data-dependent stopping rule (``stop`` with a known
``sigma``). No intercept is fitted; centre the data beforehand if needed.
"""

from __future__ import annotations

import math

from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, check_X_y, validate_data

from .diagnostics import gradient_stop_rule, residual_stop_rule
from .iss import eval_path, iss_path
from .lasso import lasso_solve
from .lb import lb_run, lbiss_integrate
from .model import Problem

__all__ = ["IssRegressor", "LinearizedBregmanRegressor", "LbissRegressor", "LassoBaseline"]


def _rule(stop, sigma, gradient_factor=1.0):
    if stop is None:
        return None
    if sigma is None or sigma <= 0:
        raise ValueError("stopping rules need a positive sigma")
    if stop == "residual":
        return residual_stop_rule(sigma)
    if stop == "gradient":
        return gradient_stop_rule(sigma, gradient_factor)
    raise ValueError(f"stop must be None, 'residual' or 'gradient', got {stop!r}")


class _PathRegressor(RegressorMixin, BaseEstimator):
    def _problem(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        self.n_features_in_ = X.shape[1]
        return Problem(X, y)

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = validate_data(self, X, reset=False)
        return X @ self.coef_


class IssRegressor(_PathRegressor):
    """Exact inverse scale space path, read off at time ``t`` or at the first
    breakpoint passing the ``stop`` rule (``t=None`` and ``stop=None`` give the
    end of the path).

    Attributes
    ----------
    coef_ : ndarray of shape (n_features,)
    path_ : IssPath
    stop_time_ : float
    """

    def __init__(self, t=None, stop=None, sigma=None, t_max=math.inf, gradient_factor=1.0):
        self.t = t
        self.stop = stop
        self.sigma = sigma
        self.t_max = t_max
        self.gradient_factor = gradient_factor

    def fit(self, X, y):
        problem = self._problem(X, y)
        rule = _rule(self.stop, self.sigma, self.gradient_factor)
        t_max = self.t_max if self.t is None else max(float(self.t), 1e-300)
        self.path_ = iss_path(problem, t_max=t_max)
        if rule is not None:
            k = self.path_.n_pieces - 1
            for j, beta in enumerate(self.path_.beta_on_piece):
                if rule(problem, beta, problem.residual(beta)):
                    k = j
                    break
            self.stop_time_ = float(self.path_.breakpoints[k])
            self.coef_ = self.path_.beta_on_piece[k].copy()
        elif self.t is not None:
            self.stop_time_ = float(self.t)
            self.coef_ = eval_path(self.path_, self.t)[1]
        else:
            self.stop_time_ = float(self.path_.breakpoints[-1])
            self.coef_ = self.path_.beta_on_piece[-1].copy()
        return self


class LinearizedBregmanRegressor(_PathRegressor):
    """Linearized Bregman iteration with step ``alpha``.

    The default step ``1 / (kappa ||X^T X / n||)`` keeps the iteration stable
    whatever the scale of ``X``.
    """

    def __init__(self, kappa=64.0, alpha=None, t=None, max_iters=100_000, stop=None, sigma=None,
                 record_stride=1, gradient_factor=1.0):
        self.kappa = kappa
        self.alpha = alpha
        self.t = t
        self.max_iters = max_iters
        self.stop = stop
        self.sigma = sigma
        self.record_stride = record_stride
        self.gradient_factor = gradient_factor

    def fit(self, X, y):
        problem = self._problem(X, y)
        alpha = 1.0 / (self.kappa * max(problem.gram_norm, 1e-300)) if self.alpha is None else self.alpha
        rule = _rule(self.stop, self.sigma, self.gradient_factor)
        reason = "rule_gradient" if self.stop == "gradient" else "rule_residual"
        self.trace_ = lb_run(problem, self.kappa, alpha, max_iters=self.max_iters,
                             t_max=math.inf if self.t is None else self.t,
                             record_stride=self.record_stride, stop_rule=rule, stop_reason=reason)
        self.coef_ = self.trace_.beta[-1].copy()
        self.n_iter_ = self.trace_.n_iters
        return self


class LbissRegressor(_PathRegressor):
    """Continuous linearized Bregman flow evaluated at time ``t``."""

    def __init__(self, kappa=64.0, t=1.0):
        self.kappa = kappa
        self.t = t

    def fit(self, X, y):
        problem = self._problem(X, y)
        self.samples_ = lbiss_integrate(problem, self.kappa, t_max=self.t)
        self.coef_ = self.samples_.beta[-1].copy()
        return self


class LassoBaseline(_PathRegressor):
    """``min lam ||b||_1 + ||y - X b||^2 / (2n)`` by certified coordinate descent."""

    def __init__(self, lam=1.0):
        self.lam = lam

    def fit(self, X, y):
        problem = self._problem(X, y)
        self.coef_ = lasso_solve(problem, self.lam)
        return self
