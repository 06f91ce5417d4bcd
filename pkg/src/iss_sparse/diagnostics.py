"""Lyapunov potential, the Bihari-type rate function, stopping-time bounds and
data-dependent stopping rules.

Reference quantities carry a tilde in the formulas: ``beta_ref`` is usually the
oracle estimator restricted to the true support and ``rho_ref = sign(beta_ref)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._validation import check_index_set, check_positive, check_vector
from .model import ConditionReport, GroundTruth, Problem, full_column_rank

__all__ = [
    "PotentialTrace",
    "SubgradientError",
    "bregman_distance",
    "potential",
    "potential_trace",
    "bihari_F",
    "bihari_F_inverse",
    "stopping_time_bounds",
    "residual_decomposition",
    "residual_threshold",
    "gradient_threshold",
    "stop_rule_residual",
    "stop_rule_gradient",
    "residual_stop_rule",
    "gradient_stop_rule",
    "strong_signal_threshold",
    "strong_signal_check",
    "residual_rule_conditions",
    "verify_discrete_bihari",
]

SUBGRAD_TOL = 1e-9
BIHARI_TOL = 1e-9


class SubgradientError(ValueError):
    """``rho`` is not a subgradient of the l1 norm at ``beta``."""


def _check_subgradient(beta, rho, name):
    bad_range = np.abs(rho) > 1.0 + SUBGRAD_TOL
    bad_match = np.abs(rho * beta - np.abs(beta)) > SUBGRAD_TOL * np.maximum(1.0, np.abs(beta))
    if np.any(bad_range) or np.any(bad_match):
        i = int(np.flatnonzero(bad_range | bad_match)[0])
        raise SubgradientError(
            f"{name}: rho[{i}] = {rho[i]:.12g} is not a subgradient at beta[{i}] = {beta[i]:.12g}"
        )


def bregman_distance(beta_ref, rho_ref, beta, rho, validate=True) -> float:
    """``D(beta_ref, beta) = <beta_ref, rho_ref - rho>`` for l1 subgradients."""
    beta_ref = check_vector(beta_ref, "beta_ref")
    rho_ref = check_vector(rho_ref, "rho_ref", beta_ref.size)
    beta = check_vector(beta, "beta", beta_ref.size)
    rho = check_vector(rho, "rho", beta_ref.size)
    if validate:
        _check_subgradient(beta_ref, rho_ref, "reference")
        _check_subgradient(beta, rho, "current")
    return float(beta_ref @ (rho_ref - rho))


def potential(beta_ref, rho_ref, beta, rho, kappa, validate=True) -> float:
    """``Psi = D(beta_ref, beta) + ||beta - beta_ref||^2 / (2 kappa)``; ``kappa = inf`` allowed."""
    kappa = check_positive(kappa, "kappa", allow_inf=True)
    d = bregman_distance(beta_ref, rho_ref, beta, rho, validate=validate)
    if math.isinf(kappa):
        return d
    diff = np.asarray(beta, dtype=float) - np.asarray(beta_ref, dtype=float)
    return d + float(diff @ diff) / (2.0 * kappa)


@dataclass(frozen=True, eq=False)
class PotentialTrace:
    """Potential along a trajectory of the support-restricted dynamics.

    ``signal_norm[k] = ||X_S (beta_k - beta_ref)||_2`` and ``noise_norm`` is the
    (constant) part of the residual orthogonal to the column span of ``X_S``.
    """

    times: np.ndarray
    psi: np.ndarray
    D: np.ndarray
    signal_norm: np.ndarray
    noise_norm: float


def potential_trace(problem_S: Problem, beta_ref, times, betas, rhos, kappa, validate=True):
    """Evaluate :class:`PotentialTrace` on recorded states (rows of ``betas``/``rhos``)."""
    beta_ref = check_vector(beta_ref, "beta_ref", problem_S.p)
    rho_ref = np.sign(beta_ref)
    betas = np.atleast_2d(np.asarray(betas, dtype=float))
    rhos = np.atleast_2d(np.asarray(rhos, dtype=float))
    if validate:
        _check_subgradient(beta_ref, rho_ref, "reference")
        for b, r in zip(betas, rhos):
            _check_subgradient(b, r, "trajectory")
    D = (rho_ref - rhos) @ beta_ref
    diff = betas - beta_ref
    psi = D if math.isinf(kappa) else D + np.sum(diff * diff, axis=1) / (2.0 * kappa)
    signal = np.linalg.norm(diff @ problem_S.X.T, axis=1)
    noise = float(np.linalg.norm(problem_S.residual(beta_ref)))
    return PotentialTrace(np.asarray(times, dtype=float), psi, D, signal, noise)


def bihari_F(x, kappa, beta_min_tilde, s):
    """Rate function::

        F(x) = x / (2 kappa) + 0                       if x < b^2
                             + 2 x / b                 if b^2 <= x <= s b^2
                             + 2 sqrt(x s)             if x >= s b^2

    with ``b = beta_min_tilde``. Vectorised over ``x``.
    """
    kappa = check_positive(kappa, "kappa", allow_inf=True)
    b = check_positive(beta_min_tilde, "beta_min_tilde")
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("F is defined for x >= 0")
    lin = 0.0 if math.isinf(kappa) else x / (2.0 * kappa)
    extra = np.where(x < b * b, 0.0,
                     np.where(x <= s * b * b, 2.0 * x / b, 2.0 * np.sqrt(x * s)))
    out = lin + extra
    return float(out) if out.ndim == 0 else out


def bihari_F_inverse(y, kappa, beta_min_tilde, s, tol=1e-12):
    """Right-continuous inverse ``inf{x >= 0 : F(x) >= y}`` by bisection.

    The bracket ``[0, hi]`` is doubled until ``F(hi) >= y``; bisection stops at
    ``hi - lo <= tol * hi`` (relative accuracy). Vectorised over ``y``.
    """
    y = np.asarray(y, dtype=float)
    scalar = y.ndim == 0
    y = np.atleast_1d(y)
    if np.any(y < 0):
        raise ValueError("F^-1 is defined for y >= 0")
    lo = np.zeros_like(y)
    hi = np.maximum(1.0, y.copy())
    for _ in range(2100):
        short = bihari_F(hi, kappa, beta_min_tilde, s) < y
        if not short.any():
            break
        hi = np.where(short, 2.0 * hi, hi)
    done = y <= 0
    hi = np.where(done, 0.0, hi)
    for _ in range(200):
        if np.all(hi - lo <= tol * hi):
            break
        mid = 0.5 * (lo + hi)
        up = bihari_F(mid, kappa, beta_min_tilde, s) >= y
        hi = np.where(up, mid, hi)
        lo = np.where(up, lo, mid)
    return float(hi[0]) if scalar else hi


def stopping_time_bounds(beta_tilde, kappa, gamma, C, n, p, alpha=None, opnorm_S=None):
    """Upper bounds ``(tau1, tau2)`` on the sign-consistency and l2-accuracy
    times of the support-restricted dynamics.

    ``tau1 <= (4 + 2 log s) / (g b) + log(||beta||_2 / b) / (kappa g)`` and
    ``tau2(C) <= 4 / (C g) sqrt(n / log p) + (1 + log(n ||beta||^2 / (C^2 s log p))) / (2 kappa g)``,
    with ``b`` the smallest magnitude in ``beta_tilde`` and ``s`` its length.
    For the discrete iteration pass ``alpha`` and ``opnorm_S = ||X_S* X_S||``:
    ``g`` becomes ``gamma (1 - kappa alpha opnorm_S / 2)`` and ``3 alpha`` /
    ``2 alpha`` are added.
    """
    bt = check_vector(beta_tilde, "beta_tilde")
    if np.any(bt == 0):
        raise ValueError("beta_tilde must have no zero entries (restrict it to its support)")
    kappa = check_positive(kappa, "kappa", allow_inf=True)
    gamma = check_positive(gamma, "gamma")
    C = check_positive(C, "C")
    if p < 2:
        raise ValueError("need p >= 2")
    s = bt.size
    bmin = float(np.min(np.abs(bt)))
    norm2 = float(np.linalg.norm(bt))
    g = gamma
    add1 = add2 = 0.0
    if alpha is not None:
        alpha = check_positive(alpha, "alpha")
        if opnorm_S is None:
            raise ValueError("the discrete bounds need opnorm_S")
        g = gamma * (1.0 - kappa * alpha * float(opnorm_S) / 2.0)
        if not g > 0:
            raise ValueError(
                f"step condition kappa * alpha * ||X_S* X_S|| < 2 fails (effective gamma = {g:.4g})"
            )
        add1, add2 = 3.0 * alpha, 2.0 * alpha
    logp = math.log(p)
    inv_k = 0.0 if math.isinf(kappa) else 1.0 / kappa
    tau1 = (4.0 + 2.0 * math.log(s)) / (g * bmin) + inv_k / g * math.log(norm2 / bmin) + add1
    tau2 = (4.0 / (C * g) * math.sqrt(n / logp)
            + inv_k / (2.0 * g) * (1.0 + math.log(n * norm2 ** 2 / (C * C * s * logp))) + add2)
    return tau1, tau2


def residual_decomposition(problem: Problem, support, beta, epsilon_known=None):
    """Split ``||y - X beta||`` for ``beta`` supported inside ``support``.

    Returns ``(signal_norm, noise_norm, total)`` with
    ``signal_norm = ||X_S (beta_ref_S - beta_S)||``, ``noise_norm`` the norm of
    the projection of the noise onto the orthogonal complement of ``span(X_S)``
    (of ``y`` itself when the noise is unknown) and ``total = ||y - X beta||``;
    ``total^2 = signal^2 + noise^2`` whenever ``y - X_S beta*_S`` is the noise.
    """
    S = check_index_set(support, problem.p)
    beta = check_vector(beta, "beta", problem.p)
    off = np.ones(problem.p, dtype=bool)
    off[S] = False
    if np.any(beta[off] != 0):
        raise ValueError("beta has nonzero entries outside the support")
    XS = problem.X[:, S]
    full_column_rank(XS, problem.n)
    Q, _ = np.linalg.qr(XS)
    v = problem.y if epsilon_known is None else check_vector(epsilon_known, "epsilon", problem.n)
    noise_vec = v - Q @ (Q.T @ v)
    fit = Q @ (Q.T @ problem.y) - XS @ beta[S]
    return (float(np.linalg.norm(fit)), float(np.linalg.norm(noise_vec)),
            float(np.linalg.norm(problem.residual(beta))))


def residual_threshold(sigma, n) -> float:
    """``sigma * sqrt(n + 2 sqrt(n log n))``."""
    sigma = check_positive(sigma, "sigma", allow_zero=True)
    return sigma * math.sqrt(n + 2.0 * math.sqrt(n * math.log(n)))


def gradient_threshold(problem: Problem, sigma, factor=1.0) -> float:
    """``factor * 2 sigma sqrt(max_i ||X_i||_2 log p)`` with the plain Euclidean column norm."""
    sigma = check_positive(sigma, "sigma", allow_zero=True)
    factor = check_positive(factor, "factor")
    max_norm = float(np.max(problem.column_norms_n)) * math.sqrt(problem.n)
    return factor * 2.0 * sigma * math.sqrt(max_norm * math.log(problem.p))


def stop_rule_residual(residual, sigma, n) -> bool:
    return bool(np.linalg.norm(residual) <= residual_threshold(sigma, n))


def stop_rule_gradient(problem: Problem, residual, sigma, factor=1.0) -> bool:
    residual = check_vector(residual, "residual", problem.n)
    return bool(np.max(np.abs(problem.X.T @ residual)) <= gradient_threshold(problem, sigma, factor))


def residual_stop_rule(sigma):
    """Callable ``(problem, beta, residual) -> bool`` for :func:`lb_run`."""
    def rule(problem, beta, residual):
        return stop_rule_residual(residual, sigma, problem.n)
    return rule


def gradient_stop_rule(sigma, factor=1.0):
    def rule(problem, beta, residual):
        return stop_rule_gradient(problem, residual, sigma, factor)
    return rule


def strong_signal_threshold(report: ConditionReport, sigma, n, p, max_colnorm_T=None) -> float:
    """``max(4 sigma / sqrt(gamma), 8 sigma (2 + log s) m / (gamma eta)) * sqrt(log p / n)``."""
    sigma = check_positive(sigma, "sigma", allow_zero=True)
    if sigma == 0:
        return 0.0
    m = report.max_colnorm_T if max_colnorm_T is None else float(max_colnorm_T)
    if report.eta <= 0:
        return math.inf
    a = 4.0 * sigma / math.sqrt(report.gamma)
    b = 8.0 * sigma * (2.0 + math.log(report.s)) * m / (report.gamma * report.eta)
    return max(a, b) * math.sqrt(math.log(p) / n)


def strong_signal_check(report: ConditionReport, truth: GroundTruth, n, p, max_colnorm_T=None) -> bool:
    """True iff the smallest planted magnitude reaches :func:`strong_signal_threshold`."""
    return truth.beta_min >= strong_signal_threshold(report, truth.sigma, n, p, max_colnorm_T)


def residual_rule_conditions(report: ConditionReport, truth: GroundTruth, n, p):
    """Signal-strength conditions under which the residual rule selects the true
    support: the strong-signal bound and
    ``beta*_min >= 2 sigma / sqrt(gamma) (sqrt(1 + 2 sqrt(log n / n)) + sqrt(log s / n))``.

    Returns ``(strong_signal_ok, no_early_stop_ok)``.
    """
    sigma = truth.sigma
    second = 2.0 * sigma / math.sqrt(report.gamma) * (
        math.sqrt(1.0 + 2.0 * math.sqrt(math.log(n) / n)) + math.sqrt(math.log(report.s) / n))
    return strong_signal_check(report, truth, n, p), bool(truth.beta_min >= second)


def verify_discrete_bihari(trace, problem_S: Problem, beta_tilde, gamma, kappa, alpha,
                           opnorm_S=None, tol=BIHARI_TOL):
    """Check ``Psi_{k+1} - Psi_k <= -alpha g F^-1(Psi_k) + tol`` at every step.

    ``trace`` must be an unthinned :class:`~iss_sparse.lb.LbTrace` of the
    iteration on ``problem_S`` (the design restricted to the true support),
    and ``g = gamma (1 - kappa alpha opnorm_S / 2)``. Returns
    ``(holds, worst_slack)`` where slack is right side minus left side.
    """
    if trace.record_stride != 1 or np.any(np.diff(trace.iters) != 1):
        raise ValueError("the discrete check needs every iterate (record_stride = 1)")
    bt = check_vector(beta_tilde, "beta_tilde", problem_S.p)
    if np.any(bt == 0):
        raise ValueError("beta_tilde must be nonzero on the support")
    opnorm_S = problem_S.gram_norm if opnorm_S is None else float(opnorm_S)
    g = gamma * (1.0 - kappa * alpha * opnorm_S / 2.0)
    if not g > 0:
        raise ValueError("step condition kappa * alpha * ||X_S* X_S|| < 2 fails")
    pt = potential_trace(problem_S, bt, trace.times, trace.beta, trace.rho, kappa)
    psi = pt.psi
    if psi.size < 2:
        return True, math.inf
    bmin = float(np.min(np.abs(bt)))
    finv = bihari_F_inverse(np.maximum(psi[:-1], 0.0), kappa, bmin, bt.size)
    slack = -alpha * g * finv - np.diff(psi)
    worst = float(np.min(slack))
    return bool(worst >= -tol), worst
