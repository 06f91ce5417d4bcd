"""LASSO baseline ``min_b lam ||b||_1 + ||y - X b||^2 / (2n)`` by coordinate descent."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from ._validation import check_index_set, check_vector
from .model import Problem, full_column_rank

__all__ = [
    "LassoPath",
    "ConvergenceError",
    "lasso_kkt_residual",
    "lasso_objective",
    "lasso_solve",
    "lasso_path",
    "lasso_bias_decomposition",
    "max_lambda",
]

KKT_TOL = 1e-8
UPDATE_TOL = 1e-12
MAX_SWEEPS = 1_000_000
POLISH_EVERY = 1000


class ConvergenceError(RuntimeError):
    def __init__(self, message, kkt_residual):
        super().__init__(f"{message} (KKT residual {kkt_residual:.3e})")
        self.kkt_residual = kkt_residual


@dataclass(frozen=True, eq=False)
class LassoPath:
    lambda_grid: np.ndarray
    solutions: np.ndarray
    kkt_residuals: np.ndarray

    @property
    def times(self) -> np.ndarray:
        return 1.0 / self.lambda_grid


def max_lambda(problem: Problem) -> float:
    """Smallest ``lam`` at which the solution is zero: ``||X* y||_inf``."""
    return float(np.max(np.abs(problem.xty)))


def lasso_objective(problem: Problem, beta, lam) -> float:
    r = problem.residual(beta)
    return float(lam * np.sum(np.abs(beta)) + r @ r / (2 * problem.n))


def lasso_kkt_residual(problem: Problem, beta, lam) -> float:
    """Largest violation of the optimality conditions at ``beta``."""
    q = problem.gradient(beta)
    nz = beta != 0
    viol = np.where(nz, np.abs(q - lam * np.sign(beta)), np.maximum(np.abs(q) - lam, 0.0))
    return float(np.max(viol)) if viol.size else 0.0


@numba.njit(cache=True)
def _cd_kernel(G, c, lam, beta, update_tol, max_sweeps):
    p = c.shape[0]
    q = c.copy()
    for j in range(p):
        if beta[j] != 0.0:
            for i in range(p):
                q[i] -= G[j, i] * beta[j]
    for sweep in range(1, max_sweeps + 1):
        biggest = 0.0
        for j in range(p):
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            old = beta[j]
            u = old + q[j] / gjj
            thr = lam / gjj
            if u > thr:
                new = u - thr
            elif u < -thr:
                new = u + thr
            else:
                new = 0.0
            delta = new - old
            if delta != 0.0:
                beta[j] = new
                for i in range(p):
                    q[i] -= G[j, i] * delta
                if abs(delta) > biggest:
                    biggest = abs(delta)
        if biggest < update_tol:
            return sweep
    return -1


def _polish(problem: Problem, beta, lam):
    """Exact minimiser for the current support and signs, or None if it flips a sign."""
    A = np.flatnonzero(beta)
    if A.size == 0:
        return None
    signs = np.sign(beta[A])
    try:
        bA = np.linalg.solve(problem.gram[np.ix_(A, A)], problem.xty[A] - lam * signs)
    except np.linalg.LinAlgError:
        return None
    if not np.all(bA * signs > 0):
        return None
    out = np.zeros(problem.p)
    out[A] = bA
    return out


def lasso_solve(problem: Problem, lam, warm_start=None, update_tol=UPDATE_TOL,
                max_sweeps=MAX_SWEEPS, kkt_tol=KKT_TOL) -> np.ndarray:
    """Cyclic coordinate minimisation, certified by the KKT conditions.

    Sweeps stop once the largest coordinate update falls below ``update_tol``.
    On ill-conditioned supports this can take very long, so every
    ``POLISH_EVERY`` sweeps without convergence the iterate jumps to the exact
    minimiser on its current support and signs (when that keeps the signs)
    and the sweeps resume from there.

    Raises :class:`ConvergenceError` if the sweep cap is hit or the final KKT
    residual exceeds ``kkt_tol``.
    """
    lam = float(lam)
    if not lam > 0:
        raise ValueError(f"lambda must be > 0, got {lam}")
    if math.isinf(lam) or lam >= max_lambda(problem):
        return np.zeros(problem.p)
    beta = np.zeros(problem.p) if warm_start is None else check_vector(warm_start, "warm_start",
                                                                          problem.p).copy()
    G, c = np.ascontiguousarray(problem.gram), np.ascontiguousarray(problem.xty)
    remaining = int(max_sweeps)
    while True:
        chunk = min(POLISH_EVERY, remaining)
        converged = _cd_kernel(G, c, lam, beta, update_tol, chunk) >= 0
        remaining -= chunk
        if converged or remaining <= 0:
            break
        polished = _polish(problem, beta, lam)
        if polished is not None:
            beta = polished
    kkt = lasso_kkt_residual(problem, beta, lam)
    if not converged:
        raise ConvergenceError(f"coordinate descent did not converge in {max_sweeps} sweeps", kkt)
    if kkt > kkt_tol:
        raise ConvergenceError("solution failed KKT certification", kkt)
    return beta


def lasso_path(problem: Problem, lambda_max=None, lambda_min=None, count=100,
               geometric=True) -> LassoPath:
    """Warm-started solutions on a decreasing grid (default: 100 geometric
    points from ``||X* y||_inf`` down to ``1e-3`` times that)."""
    lmax = max_lambda(problem) if lambda_max is None else float(lambda_max)
    lmin = lmax * 1e-3 if lambda_min is None else float(lambda_min)
    if not (lmax >= lmin > 0):
        raise ValueError("need lambda_max >= lambda_min > 0")
    if count < 1:
        raise ValueError("count must be >= 1")
    if count == 1:
        grid = np.array([lmax])
    elif geometric:
        grid = np.geomspace(lmax, lmin, count)
    else:
        grid = np.linspace(lmax, lmin, count)
    sols = np.empty((count, problem.p))
    kkts = np.empty(count)
    beta = np.zeros(problem.p)
    for i, lam in enumerate(grid):
        beta = lasso_solve(problem, lam, warm_start=beta)
        sols[i] = beta
        kkts[i] = lasso_kkt_residual(problem, beta, lam)
    return LassoPath(grid, sols, kkts)


def lasso_bias_decomposition(problem: Problem, beta_hat, lam, support_hat=None):
    """Split a LASSO solution on its support into the restricted least-squares
    fit and the shrinkage bias: ``beta_hat_S = oracle_part - bias_part``.

    Both parts are returned as length-``p`` vectors, zero off the support.
    """
    beta_hat = check_vector(beta_hat, "beta_hat", problem.p)
    S = np.flatnonzero(beta_hat) if support_hat is None else check_index_set(support_hat, problem.p)
    oracle_part = np.zeros(problem.p)
    bias_part = np.zeros(problem.p)
    if S.size == 0:
        return oracle_part, bias_part
    XS = problem.X[:, S]
    full_column_rank(XS, problem.n)
    G_SS = XS.T @ XS / problem.n
    oracle_part[S] = np.linalg.solve(G_SS, XS.T @ problem.y / problem.n)
    bias_part[S] = float(lam) * np.linalg.solve(G_SS, np.sign(beta_hat[S]))
    return oracle_part, bias_part
