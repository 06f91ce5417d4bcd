"""Linearized Bregman dynamics: the discrete iteration and its continuous limit.

With ``z = rho + beta / kappa`` the iteration reads::

    z_{k+1}    = z_k + (alpha / n) X^T (y - X beta_k)
    beta_{k+1} = kappa * shrink(z_{k+1}, 1)

and the continuous flow is ``dz/dt = X* (y - kappa X shrink(z, 1))``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numba
import numpy as np

from ._validation import check_positive
from .model import Problem, shrink

__all__ = [
    "LbTrace",
    "LbissSamples",
    "DivergenceError",
    "StepSizeWarning",
    "lb_step",
    "lb_run",
    "lb_entry_iterations",
    "lbiss_integrate",
    "STOP_REASONS",
]

STOP_REASONS = ("max_iters", "t_max", "rule_residual", "rule_gradient")

#: residual growth (relative to ||y||) treated as divergence
DIVERGENCE_FACTOR = 1e6


class DivergenceError(FloatingPointError):
    """The iteration blew up, typically because ``kappa * alpha`` is too large."""


class StepSizeWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class LbTrace:
    """Recorded iterates of a Linearized Bregman run.

    ``first_entry[i]`` is the first iteration with ``beta_i != 0`` (``-1`` if the
    coordinate never entered), tracked at every iteration regardless of the
    record stride.
    """

    kappa: float
    alpha: float
    iters: np.ndarray
    z: np.ndarray
    beta: np.ndarray
    first_entry: np.ndarray
    n_iters: int
    stopping_reason: str
    record_stride: int = 1

    @property
    def times(self) -> np.ndarray:
        return self.iters * self.alpha

    @property
    def rho(self) -> np.ndarray:
        return self.z - self.beta / self.kappa

    def beta_at_time(self, t) -> np.ndarray:
        """Iterate ``beta_k`` with ``k = floor(t / alpha)`` (must be recorded)."""
        k = int(math.floor(t / self.alpha + 1e-9))
        pos = np.searchsorted(self.iters, k)
        if pos >= self.iters.size or self.iters[pos] != k:
            raise KeyError(f"iteration {k} (t = {t}) was not recorded")
        return self.beta[pos]


@dataclass(frozen=True, eq=False)
class LbissSamples:
    kappa: float
    times: np.ndarray
    z: np.ndarray
    event_times: np.ndarray
    truncated: bool

    @property
    def beta(self) -> np.ndarray:
        return self.kappa * shrink(self.z, 1.0)

    @property
    def rho(self) -> np.ndarray:
        return self.z - self.beta / self.kappa


def lb_step(z, problem: Problem, kappa, alpha):
    """One iteration from ``z``; returns ``(z_next, beta_next)``."""
    kappa = check_positive(kappa, "kappa")
    alpha = check_positive(alpha, "alpha")
    beta = kappa * shrink(z, 1.0)
    z_next = z + (alpha / problem.n) * (problem.X.T @ (problem.y - problem.X @ beta))
    return z_next, kappa * shrink(z_next, 1.0)


def check_step_size(problem: Problem, kappa, alpha, opnorm=None):
    """Warn when ``kappa * alpha * ||X* X|| >= 2``; return the product."""
    opnorm = problem.gram_norm if opnorm is None else opnorm
    prod = kappa * alpha * opnorm
    if prod >= 2.0:
        warnings.warn(
            f"kappa * alpha * ||X^T X / n|| = {prod:.4g} >= 2; the iteration may diverge",
            StepSizeWarning,
            stacklevel=3,
        )
    return prod


def lb_run(problem: Problem, kappa, alpha, max_iters=100_000, t_max=math.inf,
           record_stride=1, stop_rule: Optional[Callable] = None,
           stop_reason="rule_residual", record_at=None) -> LbTrace:
    """Iterate from ``z_0 = 0`` and record every ``record_stride``-th iterate,
    or exactly the iterations listed in ``record_at`` when given.

    ``stop_rule(problem, beta, residual) -> bool`` is evaluated after every
    step; a true value stops the run with ``stop_reason``. The final iterate is
    always recorded.
    """
    kappa = check_positive(kappa, "kappa")
    alpha = check_positive(alpha, "alpha")
    if record_stride < 1:
        raise ValueError("record_stride must be >= 1")
    if stop_reason not in STOP_REASONS:
        raise ValueError(f"unknown stop reason {stop_reason!r}")
    wanted = None if record_at is None else set(int(k) for k in record_at)
    check_step_size(problem, kappa, alpha)

    X, y, n, p = problem.X, problem.y, problem.n, problem.p
    step = alpha / n
    limit = DIVERGENCE_FACTOR * max(float(np.linalg.norm(y)), np.finfo(float).tiny)
    z = np.zeros(p)
    beta = np.zeros(p)
    first_entry = np.full(p, -1, dtype=np.int64)
    iters, zs, betas = [0], [z.copy()], [beta.copy()]
    reason = "max_iters"
    k = 0
    while k < max_iters:
        if (k + 1) * alpha > t_max * (1 + 1e-12):
            reason = "t_max"
            break
        residual = y - X @ beta
        z = z + step * (X.T @ residual)
        beta = kappa * shrink(z, 1.0)
        k += 1
        new = (first_entry < 0) & (beta != 0)
        first_entry[new] = k
        r_next = y - X @ beta
        r_norm = float(np.linalg.norm(r_next))
        if not (np.all(np.isfinite(z)) and r_norm <= limit):
            raise DivergenceError(
                f"iterate diverged at k = {k} (kappa * alpha * ||X* X|| = "
                f"{kappa * alpha * problem.gram_norm:.4g}, needs < 2)"
            )
        stop = stop_rule is not None and stop_rule(problem, beta, r_next)
        keep = (k % record_stride == 0) if wanted is None else (k in wanted)
        if keep or stop:
            iters.append(k)
            zs.append(z.copy())
            betas.append(beta.copy())
        if stop:
            reason = stop_reason
            break
    if iters[-1] != k:
        iters.append(k)
        zs.append(z.copy())
        betas.append(beta.copy())
    return LbTrace(
        kappa=kappa,
        alpha=alpha,
        iters=np.array(iters, dtype=np.int64),
        z=np.array(zs),
        beta=np.array(betas),
        first_entry=first_entry,
        n_iters=k,
        stopping_reason=reason,
        record_stride=record_stride,
    )


@numba.njit(cache=True)
def _entry_kernel(G, c, kappa, alpha, max_iters, limit):
    p = c.shape[0]
    z = np.zeros(p)
    beta = np.zeros(p)
    grad = np.empty(p)
    first = np.full(p, -1, dtype=np.int64)
    active = np.empty(p, dtype=np.int64)
    n_active = 0
    for k in range(1, max_iters + 1):
        for i in range(p):
            grad[i] = c[i]
        for a in range(n_active):
            j = active[a]
            bj = beta[j]
            for i in range(p):
                grad[i] -= G[j, i] * bj
        n_active = 0
        big = 0.0
        for i in range(p):
            z[i] += alpha * grad[i]
            zi = z[i]
            if zi > 1.0:
                beta[i] = kappa * (zi - 1.0)
            elif zi < -1.0:
                beta[i] = kappa * (zi + 1.0)
            else:
                beta[i] = 0.0
            if beta[i] != 0.0:
                active[n_active] = i
                n_active += 1
                if first[i] < 0:
                    first[i] = k
            if abs(zi) > big:
                big = abs(zi)
        if not np.isfinite(big) or big > limit:
            return first, z, k
    return first, z, max_iters


def lb_entry_iterations(problem: Problem, kappa, alpha, max_iters):
    """First-entry iteration of each coordinate (``-1`` if never), compiled loop.

    Same recursion as :func:`lb_run` written with the Gram matrix, recording
    nothing but entry iterations; intended for long Monte Carlo runs.
    """
    kappa = check_positive(kappa, "kappa")
    alpha = check_positive(alpha, "alpha")
    check_step_size(problem, kappa, alpha)
    G = np.ascontiguousarray(problem.gram)
    c = np.ascontiguousarray(problem.xty)
    limit = DIVERGENCE_FACTOR * (1.0 + float(np.max(np.abs(c)))) * max(1.0, max_iters * alpha)
    first, z, k = _entry_kernel(G, c, float(kappa), float(alpha), int(max_iters), limit)
    if k < max_iters:
        raise DivergenceError(f"iterate diverged at k = {k}")
    return first


def _pattern(z):
    return np.where(z > 1.0, 1, np.where(z < -1.0, -1, 0)).astype(np.int8)


def lbiss_integrate(problem: Problem, kappa, t_max=None, sample_times: Optional[Sequence[float]] = None,
                    event_tol=1e-10, local_tol=1e-10, max_events=None) -> LbissSamples:
    """Integrate ``dz/dt = X* y - kappa X* X shrink(z, 1)`` from ``z = 0``.

    Classical Runge-Kutta steps with step-doubling error control (local error
    ``<= local_tol``, Richardson-corrected). Whenever a coordinate of ``z``
    crosses ``+-1`` inside a step, the crossing is located by bisection to
    ``event_tol`` and the step is cut there, so no step straddles a change of
    the shrink pattern. The state is returned at ``sample_times`` (default:
    ``t_max`` only).
    """
    kappa = check_positive(kappa, "kappa")
    if sample_times is None:
        if t_max is None:
            raise ValueError("give t_max or sample_times")
        sample_times = [t_max]
    samples = np.asarray(sample_times, dtype=float)
    if samples.ndim != 1 or np.any(np.diff(samples) < 0) or np.any(samples < 0):
        raise ValueError("sample_times must be nonnegative and nondecreasing")
    t_max = float(samples[-1]) if t_max is None else check_positive(t_max, "t_max")
    if samples[-1] > t_max:
        raise ValueError("sample_times exceed t_max")
    max_events = 100 * problem.p if max_events is None else max_events

    G, c = problem.gram, problem.xty

    def field(z):
        # inlined soft threshold: this runs a dozen times per step
        return c - kappa * (G @ (np.sign(z) * np.maximum(np.abs(z) - 1.0, 0.0)))

    def rk4(z, h):
        k1 = field(z)
        k2 = field(z + 0.5 * h * k1)
        k3 = field(z + 0.5 * h * k2)
        k4 = field(z + h * k3)
        return z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    scale = kappa * problem.gram_norm
    h_cap = 1.0 / max(scale, 1e-12)
    h = min(0.1 * h_cap, max(t_max, 1e-12))
    t = 0.0
    z = np.zeros(problem.p)
    out = np.empty((samples.size, problem.p))
    events = []
    truncated = False
    next_sample = 0
    while next_sample < samples.size and samples[next_sample] <= 0.0:
        out[next_sample] = z
        next_sample += 1

    while next_sample < samples.size:
        target = samples[next_sample]
        h_try = min(h, target - t)
        full = rk4(z, h_try)
        half = rk4(rk4(z, 0.5 * h_try), 0.5 * h_try)
        err = float(np.max(np.abs(half - full))) / 15.0
        if err > local_tol and h_try > 1e-14:
            h = 0.5 * h_try
            continue
        z_new = half + (half - full) / 15.0
        pat0 = _pattern(z)
        if np.any(_pattern(z_new) != pat0):
            lo, hi = 0.0, h_try
            while hi - lo > event_tol:
                mid = 0.5 * (lo + hi)
                if np.any(_pattern(rk4(z, mid)) != pat0):
                    hi = mid
                else:
                    lo = mid
            if hi < h_try:
                h_try = hi
                z_new = rk4(rk4(z, 0.5 * h_try), 0.5 * h_try)
            events.append(t + h_try)
            if len(events) > max_events:
                truncated = True
                t += h_try
                z = z_new
                break
        t += h_try
        z = z_new
        if err > 0:
            h = h_try * min(2.0, 0.9 * (local_tol / err) ** 0.2)
        else:
            h = 2.0 * h_try
        # stay well inside the stability region so earlier errors are damped
        h = min(max(h, 1e-14), h_cap)
        if not np.all(np.isfinite(z)):
            raise DivergenceError("integration produced a non-finite state")
        while next_sample < samples.size and samples[next_sample] <= t + 1e-15 * max(1.0, t):
            out[next_sample] = z
            next_sample += 1
    if truncated:
        out = out[:next_sample]
        samples = samples[:next_sample]
    return LbissSamples(
        kappa=kappa,
        times=samples.copy(),
        z=out,
        event_times=np.array(events),
        truncated=truncated,
    )
