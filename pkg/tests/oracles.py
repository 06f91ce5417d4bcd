"""Independent reference computations used as test oracles.

None of these share code with the package: they use brute force, a different
factorisation or a different algorithm for the same mathematical object.
"""

import itertools

import numpy as np
from scipy.optimize import nnls


def qr_least_squares(A, y):
    Q, R = np.linalg.qr(A)
    return np.linalg.solve(R, Q.T @ y)


def brute_force_sign_ls(X, y, plus, minus):
    """Minimum of ``||y - X b||^2`` under the sign constraints, by enumerating
    every candidate free set and keeping the feasible least-squares fits."""
    C = list(plus) + list(minus)
    signs = np.array([1.0] * len(plus) + [-1.0] * len(minus))
    best = float(y @ y)
    best_beta = np.zeros(X.shape[1])
    for r in range(1, len(C) + 1):
        for subset in itertools.combinations(range(len(C)), r):
            cols = [C[i] for i in subset]
            coef, *_ = np.linalg.lstsq(X[:, cols], y, rcond=None)
            if np.any(coef * signs[list(subset)] < -1e-12):
                continue
            res = y - X[:, cols] @ coef
            val = float(res @ res)
            if val < best - 1e-14:
                best = val
                best_beta = np.zeros(X.shape[1])
                best_beta[cols] = coef
    return best, best_beta


def nnls_sign_ls(X, y, plus, minus):
    """Same problem through scipy's NNLS on sign-flipped columns."""
    C = list(plus) + list(minus)
    beta = np.zeros(X.shape[1])
    if not C:
        return beta
    signs = np.array([1.0] * len(plus) + [-1.0] * len(minus))
    x, _ = nnls(X[:, C] * signs, y, maxiter=50 * len(C))
    beta[C] = signs * x
    return beta


def stepped_iss(X, y, t_end, h):
    """Time-stepped ISS on the grid ``t = k h``: advance the dual by ``h`` times
    the gradient, clamp it to [-1, 1] and refit by NNLS whenever the saturated
    set changes. Runs of steps with an unchanged saturated set are taken in one
    jump (the gradient is constant there), which does not alter the grid.

    Returns ``(times, fits, betas)`` recorded after each refit.
    """
    n, p = X.shape
    rho = np.zeros(p)
    beta = np.zeros(p)
    sat_prev = np.zeros(p, dtype=np.int8)
    k = 0
    k_end = int(np.ceil(t_end / h))
    times, fits, betas = [0.0], [np.zeros(n)], [beta.copy()]
    g = X.T @ (y - X @ beta) / n
    while k < k_end:
        free = (beta == 0) & (np.abs(g) > 1e-13)
        with np.errstate(divide="ignore", invalid="ignore"):
            need = np.where(free, (np.sign(g) - rho) / (h * g), np.inf)
        need = need[np.isfinite(need) & (need > 0)]
        m = int(max(1, np.ceil(np.min(need) - 1e-9))) if need.size else k_end - k
        m = min(m, k_end - k)
        rho = rho + m * h * g
        k += m
        np.clip(rho, -1.0, 1.0, out=rho)
        rho[beta > 0] = 1.0
        rho[beta < 0] = -1.0
        sat = np.where(rho >= 1.0 - 1e-12, 1, np.where(rho <= -1.0 + 1e-12, -1, 0)).astype(np.int8)
        rho[sat != 0] = sat[sat != 0]
        if np.any(sat != sat_prev):
            beta = nnls_sign_ls(X, y, np.flatnonzero(sat == 1), np.flatnonzero(sat == -1))
            g = X.T @ (y - X @ beta) / n
            times.append(k * h)
            fits.append(X @ beta)
            betas.append(beta.copy())
            sat_prev = sat
    return np.array(times), np.array(fits), np.array(betas)


def stepped_iss_fit_at(X, y, t_query, h):
    times, fits, _ = stepped_iss(X, y, max(t_query) + h, h)
    idx = np.searchsorted(times, t_query, side="right") - 1
    return fits[idx]


def fista_lasso(X, y, lam, iters=200_000, tol=1e-15):
    """Accelerated proximal gradient for ``lam ||b||_1 + ||y - X b||^2 / (2n)``."""
    n, p = X.shape
    L = np.linalg.eigvalsh(X.T @ X / n)[-1]
    b = np.zeros(p)
    z = b.copy()
    tk = 1.0
    for _ in range(iters):
        grad = X.T @ (X @ z - y) / n
        u = z - grad / L
        b_new = np.sign(u) * np.maximum(np.abs(u) - lam / L, 0.0)
        t_new = (1 + np.sqrt(1 + 4 * tk * tk)) / 2
        z = b_new + (tk - 1) / t_new * (b_new - b)
        if np.max(np.abs(b_new - b)) < tol:
            b = b_new
            break
        b, tk = b_new, t_new
    return b


def lasso_objective(X, y, b, lam):
    r = y - X @ b
    return lam * np.abs(b).sum() + r @ r / (2 * X.shape[0])


def rank_sum_auc(scores, is_true):
    """Mann-Whitney AUC: fraction of (true, false) pairs ranked correctly,
    ties counting one half. Higher score = selected earlier."""
    pos = scores[is_true]
    neg = scores[~is_true]
    total = 0.0
    for a in pos:
        total += np.sum(a > neg) + 0.5 * np.sum(a == neg)
    return total / (pos.size * neg.size)


def irrepresentable_margin(X, S):
    """``1 - ||X_T^T pinv(X_S)^T||_inf`` via the pseudo-inverse."""
    T = np.setdiff1d(np.arange(X.shape[1]), S)
    M = (np.linalg.pinv(X[:, S]) @ X[:, T]).T
    return 1.0 - np.max(np.abs(M).sum(axis=1))


def scalar_lb(y, kappa, alpha, iters):
    """The one-dimensional iteration with ``X = [1]`` written out by hand."""
    z = b = 0.0
    out = []
    for _ in range(iters):
        z = z + alpha * (y - b)
        b = kappa * max(abs(z) - 1.0, 0.0) * (1.0 if z > 0 else -1.0)
        out.append(b)
    return np.array(out)


def min_norm_nonnegative_fit(A, fit):
    """Smallest ``||x||`` with ``x >= 0`` and ``A x = fit``, by trying the
    pseudo-inverse solution on every support."""
    best = None
    for r in range(0, A.shape[1] + 1):
        for cols in itertools.combinations(range(A.shape[1]), r):
            x = np.zeros(A.shape[1])
            if cols:
                x[list(cols)] = np.linalg.pinv(A[:, list(cols)]) @ fit
            if np.any(x < -1e-12) or np.max(np.abs(A @ x - fit)) > 1e-9:
                continue
            if best is None or np.linalg.norm(x) < np.linalg.norm(best) - 1e-12:
                best = x
    return best
