"""Exact piecewise Bregman inverse scale space path.

The dual variable ``rho`` moves linearly with slope ``X* (y - X beta)`` while the
primal ``beta`` stays constant; a breakpoint occurs whenever a coordinate of
``rho`` hits ``+-1``, after which ``beta`` is recomputed as a least-squares fit
subject to the sign pattern of the saturated coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._validation import check_index_set, check_positive
from .model import Problem

__all__ = [
    "SignLSResult",
    "IssPath",
    "PathRangeError",
    "solve_sign_constrained_ls",
    "iss_path",
    "eval_path",
    "mean_path",
    "is_incremental",
]

KKT_TOL = 1e-10
RANK_RTOL = 1e-10


class PathRangeError(ValueError):
    """Requested time lies outside the computed part of a path."""


@dataclass(frozen=True)
class SignLSResult:
    beta: np.ndarray
    multipliers: np.ndarray
    nonunique: bool
    iterations: int

    def __iter__(self):
        # allows ``beta, multipliers = solve_sign_constrained_ls(...)``
        return iter((self.beta, self.multipliers))


def _lstsq(A, b):
    coef, _, rank, _ = np.linalg.lstsq(A, b, rcond=RANK_RTOL)
    return coef, rank


def _nnls(A, b, gtol, max_iter, x0=None):
    """Lawson-Hanson active set for ``min ||b - A x||`` over ``x >= 0``.

    ``gtol`` bounds the unscaled gradient ``A^T (b - A x)`` at termination.
    Returns ``(x, passive, iterations)``.
    """
    m = A.shape[1]
    x = np.zeros(m) if x0 is None else x0.copy()
    passive = x > 0

    def solve_passive(mask):
        z = np.zeros(m)
        if mask.any():
            z[mask], _ = _lstsq(A[:, mask], b)
        return z

    def restore_feasibility(x, passive):
        # inner loop: step toward the unconstrained passive solution until feasible
        for _ in range(m + 1):
            z = solve_passive(passive)
            bad = passive & (z <= 0)
            if not bad.any():
                return z, passive
            with np.errstate(divide="ignore", invalid="ignore"):
                ratios = np.where(bad, x / (x - z), np.inf)
            step = float(np.min(ratios))
            x = x + step * (z - x)
            passive = passive & (x > gtol * 1e-3)
            x[~passive] = 0.0
        return solve_passive(passive), passive

    if passive.any():
        x, passive = restore_feasibility(x, passive)

    iterations = 0
    blocked = np.zeros(m, dtype=bool)
    while iterations < max_iter:
        iterations += 1
        w = A.T @ (b - A @ x)
        candidates = (~passive) & (~blocked) & (w > gtol)
        if not candidates.any():
            break
        j = int(np.argmax(np.where(candidates, w, -np.inf)))
        trial = passive.copy()
        trial[j] = True
        z = solve_passive(trial)
        if z[j] <= 0:
            # rounding makes this column useless; do not retry it this round
            blocked[j] = True
            continue
        blocked[:] = False
        passive = trial
        x, passive = restore_feasibility(x, passive)
    x = np.where(passive, np.maximum(x, 0.0), 0.0)
    return x, passive, iterations


def _min_norm_nonnegative(A, fit, x_opt):
    """Smallest-norm ``x >= 0`` with ``A x = fit``.

    A lightly ridge-penalised NNLS picks out the support of the minimum-norm
    point, which is then recomputed exactly on that support. Falls back to
    ``x_opt`` if the recomputed point is not a certified solution.
    """
    m = A.shape[1]
    scale = max(float(np.linalg.norm(A, 2)), np.finfo(float).tiny)
    delta = 1e-4 * scale
    aug = np.vstack([A, delta * np.eye(m)])
    rhs = np.concatenate([fit, np.zeros(m)])
    x_reg, support, _ = _nnls(aug, rhs, 1e-13 * scale * max(1.0, float(np.linalg.norm(fit))), 10 * m)
    if not support.any():
        return x_opt
    x = np.zeros(m)
    x[support] = np.linalg.pinv(A[:, support], rcond=RANK_RTOL) @ fit
    # dual certificate: x_P = A_P^T lam and A_j^T lam <= 0 off the support
    lam = np.linalg.pinv(A[:, support].T, rcond=RANK_RTOL) @ x[support]
    tol = 1e-9 * (1.0 + float(np.max(np.abs(x))))
    fit_err = float(np.max(np.abs(A @ x - fit), initial=0.0))
    if (np.all(x[support] > 0) and fit_err <= 1e-9 * (1.0 + float(np.max(np.abs(fit))))
            and np.all(A[:, ~support].T @ lam <= tol)
            and np.allclose(A[:, support].T @ lam, x[support], atol=tol)):
        return x
    return x_reg if np.linalg.norm(x_reg) < np.linalg.norm(x_opt) else x_opt


def solve_sign_constrained_ls(problem: Problem, plus_set, minus_set, warm_start=None,
                              tol=KKT_TOL, max_iter=None) -> SignLSResult:
    """Minimise ``||y - X beta||^2`` with ``beta_i >= 0`` on ``plus_set``,
    ``beta_i <= 0`` on ``minus_set`` and ``beta_j = 0`` elsewhere.

    Primal active-set (Lawson-Hanson) iteration on the sign-flipped columns.
    When the optimum is not unique (rank-deficient optimal face) this is
    reported through ``nonunique`` and the minimum-norm optimiser is returned.
    A feasible ``warm_start`` seeds the working set. ``tol`` applies to the
    ``1/n``-scaled gradient.

    Returns a :class:`SignLSResult`; ``multipliers[i] >= 0`` is the Lagrange
    multiplier of the sign constraint on coordinate ``i`` (zero off the
    constrained sets and on coordinates that are strictly inside their cone).
    """
    p, n = problem.p, problem.n
    plus = check_index_set(plus_set, p, "plus_set")
    minus = check_index_set(minus_set, p, "minus_set")
    if np.intersect1d(plus, minus).size:
        raise ValueError("plus_set and minus_set must be disjoint")
    C = np.concatenate([plus, minus])
    signs = np.concatenate([np.ones(plus.size), -np.ones(minus.size)])
    beta = np.zeros(p)
    multipliers = np.zeros(p)
    if C.size == 0:
        return SignLSResult(beta, multipliers, False, 0)

    A = problem.X[:, C] * signs
    b = problem.y
    m = C.size
    max_iter = 10 * p if max_iter is None else max_iter
    scale = max(1.0, float(np.max(np.abs(A.T @ b))) / n)
    gtol = tol * scale

    x0 = None
    if warm_start is not None:
        x0 = np.asarray(warm_start, dtype=float)[C] * signs
        if not np.all(x0 >= 0):
            x0 = None
    x, passive, iterations = _nnls(A, b, gtol * n, max_iter, x0)

    w = A.T @ (b - A @ x) / n
    multipliers[C] = np.where(passive, 0.0, np.maximum(-w, 0.0))

    degenerate = passive | ((~passive) & (np.abs(w) <= gtol))
    nonunique = False
    if degenerate.sum() > 0:
        k = int(degenerate.sum())
        if k > n:
            nonunique = True
        else:
            sv = np.linalg.svd(A[:, degenerate], compute_uv=False)
            nonunique = bool(sv[-1] <= RANK_RTOL * sv[0])
    if nonunique:
        # every optimum has the same fit; report the smallest one
        xd = _min_norm_nonnegative(A[:, degenerate], A @ x, x[degenerate])
        x = np.zeros(m)
        x[degenerate] = xd
    beta[C] = signs * x
    return SignLSResult(beta, multipliers, nonunique, iterations)


@dataclass(frozen=True, eq=False)
class IssPath:
    """Piecewise path: ``beta`` constant and ``rho`` affine on ``[t_k, t_{k+1})``.

    ``slopes[k]`` is ``X* (y - X beta_k)``. ``horizon`` is the last time at which
    the path is known (``inf`` once the gradient has vanished).
    """

    breakpoints: np.ndarray
    rho_at: np.ndarray
    beta_on_piece: np.ndarray
    slopes: np.ndarray
    active_signs: np.ndarray
    nonunique: np.ndarray
    terminated: bool
    truncated: bool
    horizon: float

    @property
    def n_pieces(self) -> int:
        return int(self.breakpoints.size)

    @property
    def p(self) -> int:
        return int(self.beta_on_piece.shape[1])

    def piece_index(self, t) -> int:
        t = float(t)
        if t < 0 or math.isnan(t):
            raise PathRangeError(f"time must be >= 0, got {t}")
        if t > self.horizon:
            raise PathRangeError(f"time {t} is beyond the computed horizon {self.horizon}")
        return int(np.searchsorted(self.breakpoints, t, side="right") - 1)


def iss_path(problem: Problem, t_max=math.inf, max_breakpoints=10_000, boundary_tol=1e-9,
             grad_rtol=1e-11) -> IssPath:
    """Compute the Bregman ISS path from ``rho_0 = beta_0 = 0``.

    Stops when the gradient vanishes (``terminated``), when the next breakpoint
    would pass ``t_max``, or after ``max_breakpoints`` breakpoints (``truncated``).
    Coordinates whose ``|rho|`` is within ``boundary_tol`` of 1 are treated as
    saturated, which groups near-simultaneous hits into one breakpoint.
    Gradient entries below ``grad_rtol * ||X* y||_inf`` count as zero.
    """
    t_max = check_positive(t_max, "t_max", allow_inf=True)
    p = problem.p
    gtol = grad_rtol * max(float(np.max(np.abs(problem.xty))), np.finfo(float).tiny)

    t = 0.0
    rho = np.zeros(p)
    beta = np.zeros(p)
    times, rhos, betas, slopes, signs_, flags = [], [], [], [], [], []
    terminated = truncated = False
    horizon = t_max

    def record(t, rho, beta, g, nonunique):
        times.append(t)
        rhos.append(rho.copy())
        betas.append(beta.copy())
        slopes.append(g)
        sg = np.zeros(p, dtype=np.int8)
        sg[rho >= 1.0] = 1
        sg[rho <= -1.0] = -1
        signs_.append(sg)
        flags.append(nonunique)

    g = problem.gradient(beta)
    record(t, rho, beta, g, False)
    while True:
        free = beta == 0
        moving = free & (np.abs(g) > gtol)
        with np.errstate(divide="ignore", invalid="ignore"):
            target = np.sign(g)
            dt = np.where(moving, (target - rho) / g, np.inf)
        dt = np.where(moving & ((target - rho) * target > boundary_tol), dt, np.inf)
        step = float(np.min(dt)) if dt.size else math.inf
        if not math.isfinite(step):
            terminated = True
            horizon = math.inf
            break
        if t + step > t_max:
            horizon = t_max
            break
        if len(times) > max_breakpoints:
            truncated = True
            horizon = t
            break
        t = t + step
        rho = rho + step * g
        on_support = beta != 0
        rho[on_support] = np.sign(beta[on_support])
        hit = np.abs(rho) >= 1.0 - boundary_tol
        rho[hit] = np.sign(rho[hit])
        np.clip(rho, -1.0, 1.0, out=rho)
        res = solve_sign_constrained_ls(problem, np.flatnonzero(rho == 1.0),
                                        np.flatnonzero(rho == -1.0), warm_start=beta)
        beta = res.beta
        g = problem.gradient(beta)
        record(t, rho, beta, g, res.nonunique)

    def stack(rows, dtype=float):
        out = np.array(rows, dtype=dtype)
        out.setflags(write=False)
        return out

    return IssPath(
        breakpoints=stack(times),
        rho_at=stack(rhos),
        beta_on_piece=stack(betas),
        slopes=stack(slopes),
        active_signs=stack(signs_, np.int8),
        nonunique=stack(flags, bool),
        terminated=terminated,
        truncated=truncated,
        horizon=horizon,
    )


def eval_path(path: IssPath, t):
    """Return ``(rho(t), beta(t))``."""
    k = path.piece_index(t)
    tk = path.breakpoints[k]
    if t == tk:
        return path.rho_at[k].copy(), path.beta_on_piece[k].copy()
    if k + 1 < path.n_pieces:
        t1 = path.breakpoints[k + 1]
        w = (t - tk) / (t1 - tk)
        rho = (1.0 - w) * path.rho_at[k] + w * path.rho_at[k + 1]
    else:
        rho = path.rho_at[k] + (t - tk) * path.slopes[k]
        rho = np.clip(rho, -1.0, 1.0)
    return rho, path.beta_on_piece[k].copy()


def mean_path(path: IssPath, t):
    """Temporal mean ``(1/t) int_0^t beta(s) ds`` of the piecewise constant path."""
    t = float(t)
    if t <= 0:
        raise ValueError("mean path is undefined at t = 0")
    k = path.piece_index(t)
    starts = path.breakpoints[: k + 1]
    ends = np.append(path.breakpoints[1 : k + 1], t)
    return (ends - starts) @ path.beta_on_piece[: k + 1] / t


def is_incremental(path: IssPath, up_to_t=math.inf) -> bool:
    """True when no selected variable leaves the support up to ``up_to_t``."""
    if up_to_t >= path.breakpoints[-1]:
        last = path.n_pieces - 1
    else:
        last = int(np.searchsorted(path.breakpoints, up_to_t, side="right") - 1)
    supports = path.beta_on_piece[: last + 1] != 0
    for k in range(1, supports.shape[0]):
        if np.any(supports[k - 1] & ~supports[k]):
            return False
    return True
