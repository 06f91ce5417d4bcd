"""Core data model: the regression problem, planted truth, and condition checks.

Throughout, inner products carry the ``1/n`` normalisation, so ``X* = X.T / n``
and ``||v||_n = ||v|| / sqrt(n)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

from ._validation import check_index_set, check_matrix, check_positive, check_vector

__all__ = [
    "Problem",
    "GroundTruth",
    "ConditionReport",
    "SingularDesignError",
    "AssumptionError",
    "shrink",
    "oracle_estimator",
    "check_conditions",
    "coherence_bounds",
    "tau_bar",
    "lbiss_bound_B",
    "full_column_rank",
]

#: relative threshold on singular values of ``X_S / sqrt(n)`` for full column rank
RANK_RTOL = 1e-10


class SingularDesignError(np.linalg.LinAlgError):
    """Raised when a restricted design ``X_S`` is (numerically) rank deficient."""

    def __init__(self, message, singular_value):
        super().__init__(f"{message} (smallest singular value {singular_value:.3e})")
        self.singular_value = singular_value


class AssumptionError(ValueError):
    """A theoretical precondition (A3, kappa size, step size, ...) does not hold."""


def _freeze(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Problem:
    """Observed data ``(y, X)`` of the linear model ``y = X beta* + eps``."""

    X: np.ndarray
    y: np.ndarray
    column_norms_n: np.ndarray = field(init=False)

    def __post_init__(self):
        X = check_matrix(self.X)
        y = check_vector(self.y, "y", length=X.shape[0])
        object.__setattr__(self, "X", _freeze(X))
        object.__setattr__(self, "y", _freeze(y))
        norms = np.linalg.norm(X, axis=0) / math.sqrt(X.shape[0])
        object.__setattr__(self, "column_norms_n", _freeze(norms))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @cached_property
    def gram(self) -> np.ndarray:
        """``X* X = X^T X / n``."""
        return _freeze(self.X.T @ self.X / self.n)

    @cached_property
    def xty(self) -> np.ndarray:
        """``X* y = X^T y / n``."""
        return _freeze(self.X.T @ self.y / self.n)

    @cached_property
    def gram_norm(self) -> float:
        """Largest eigenvalue of ``X^T X / n``."""
        return float(np.linalg.eigvalsh(self.gram)[-1])

    def gradient(self, beta) -> np.ndarray:
        """``(1/n) X^T (y - X beta)``."""
        return self.X.T @ (self.y - self.X @ beta) / self.n

    def residual(self, beta) -> np.ndarray:
        return self.y - self.X @ beta

    def restrict(self, support) -> "Problem":
        """The problem with only the columns in ``support`` kept."""
        idx = check_index_set(support, self.p)
        return Problem(self.X[:, idx], self.y)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Planted signal, its support and the noise level."""

    beta_star: np.ndarray
    sigma: float = 0.0
    support: np.ndarray = field(init=False)

    def __post_init__(self):
        beta = _freeze(check_vector(self.beta_star, "beta_star"))
        object.__setattr__(self, "beta_star", beta)
        object.__setattr__(self, "sigma", check_positive(self.sigma, "sigma", allow_zero=True))
        support = np.flatnonzero(beta)
        support.setflags(write=False)
        object.__setattr__(self, "support", support)

    @property
    def p(self) -> int:
        return self.beta_star.shape[0]

    @property
    def s(self) -> int:
        return int(self.support.size)

    @property
    def complement(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.p), self.support)

    @property
    def beta_min(self) -> float:
        return float(np.min(np.abs(self.beta_star[self.support]))) if self.s else 0.0

    @property
    def beta_max(self) -> float:
        return float(np.max(np.abs(self.beta_star[self.support]))) if self.s else 0.0

    @property
    def signs(self) -> np.ndarray:
        return np.sign(self.beta_star)

    def check_against(self, problem: Problem) -> None:
        if self.p != problem.p:
            raise ValueError(f"truth has p={self.p} but problem has p={problem.p}")
        if self.s > min(problem.n, problem.p):
            raise ValueError(f"support size {self.s} exceeds min(n, p)")


@dataclass(frozen=True)
class ConditionReport:
    """Design constants on a support ``S``.

    ``gamma``/``gamma_max`` are the extreme eigenvalues of ``X_S* X_S``, ``eta`` is
    the irrepresentable margin ``1 - ||X_T* X_S^dagger||_inf`` and ``mu`` the mutual
    coherence of the column-normalised design.
    """

    gamma: float
    gamma_max: float
    eta: float
    mu: float
    s: int
    cond_number: float
    max_colnorm_T: float
    tau_bar: Optional[float] = None
    B: Optional[float] = None

    @property
    def a3_holds(self) -> bool:
        return self.mu < 1.0 / (2 * self.s - 1)

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "gamma_max": self.gamma_max,
            "eta": self.eta,
            "mu": self.mu,
            "s": self.s,
            "cond_number": self.cond_number,
            "max_colnorm_T": self.max_colnorm_T,
            "tau_bar": self.tau_bar,
            "B": self.B,
            "a3_holds": self.a3_holds,
        }


def shrink(z, lam=1.0):
    """Soft thresholding ``sign(z) * max(|z| - lam, 0)``, elementwise."""
    lam = float(lam)
    if not lam >= 0:
        raise ValueError(f"shrink threshold must be >= 0, got {lam}")
    z = np.asarray(z, dtype=float)
    return np.sign(z) * np.maximum(np.abs(z) - lam, 0.0)


def full_column_rank(XS, n=None):
    """Check ``XS`` for full column rank; return its singular values.

    Raises :class:`SingularDesignError` if the smallest singular value of
    ``XS / sqrt(n)`` is below ``RANK_RTOL`` times the largest.
    """
    n = XS.shape[0] if n is None else n
    if XS.shape[1] == 0:
        return np.empty(0)
    sv = np.linalg.svd(XS / math.sqrt(n), compute_uv=False)
    if XS.shape[1] > XS.shape[0] or sv[-1] <= RANK_RTOL * sv[0]:
        smallest = 0.0 if XS.shape[1] > XS.shape[0] else float(sv[-1])
        raise SingularDesignError("restricted design X_S is rank deficient", smallest)
    return sv


def oracle_estimator(problem: Problem, support) -> np.ndarray:
    """Least squares restricted to ``support``; zero elsewhere."""
    S = check_index_set(support, problem.p)
    beta = np.zeros(problem.p)
    if S.size == 0:
        return beta
    XS = problem.X[:, S]
    full_column_rank(XS, problem.n)
    coef, *_ = np.linalg.lstsq(XS, problem.y, rcond=None)
    beta[S] = coef
    return beta


def coherence(X) -> float:
    """Mutual coherence of ``X`` after scaling every column to ``||X_j||_n = 1``."""
    X = np.asarray(X, dtype=float)
    norms = np.linalg.norm(X, axis=0)
    if np.any(norms == 0):
        raise ValueError("coherence undefined for a zero column")
    Xn = X / norms
    C = np.abs(Xn.T @ Xn)
    np.fill_diagonal(C, 0.0)
    return float(C.max()) if X.shape[1] > 1 else 0.0


def check_conditions(problem: Problem, support, sigma=None, kappa=None, B=None) -> ConditionReport:
    """Evaluate restricted strong convexity, irrepresentability and coherence.

    ``tau_bar`` is filled in when ``sigma`` is given (and uses the kappa-corrected
    form when ``kappa`` and ``B`` are also given).
    """
    S = check_index_set(support, problem.p)
    if S.size == 0:
        raise ValueError("support must be nonempty")
    T = np.setdiff1d(np.arange(problem.p), S)
    XS = problem.X[:, S]
    full_column_rank(XS, problem.n)
    G_SS = XS.T @ XS / problem.n
    eig = np.linalg.eigvalsh(G_SS)
    gamma, gamma_max = float(eig[0]), float(eig[-1])
    if T.size:
        G_TS = problem.X[:, T].T @ XS / problem.n
        M = np.linalg.solve(G_SS, G_TS.T).T  # G_TS G_SS^{-1}
        eta = 1.0 - float(np.max(np.sum(np.abs(M), axis=1)))
        max_colnorm_T = float(np.max(problem.column_norms_n[T]))
    else:
        eta = 1.0
        max_colnorm_T = 0.0
    mu = coherence(problem.X)
    tb = None
    if sigma is not None:
        if T.size == 0:
            tb = math.inf
        elif eta <= 0:
            tb = 0.0  # no safe stopping time exists
        else:
            tb = tau_bar(eta, sigma, problem.n, problem.p, max_colnorm_T, kappa=kappa, B=B)
    return ConditionReport(
        gamma=gamma,
        gamma_max=gamma_max,
        eta=eta,
        mu=mu,
        s=int(S.size),
        cond_number=gamma_max / gamma,
        max_colnorm_T=max_colnorm_T,
        tau_bar=tb,
        B=B,
    )


def coherence_bounds(mu, s):
    """Constants ``(gamma, eta)`` implied by mutual incoherence ``mu`` at sparsity ``s``."""
    mu = float(mu)
    s = int(s)
    if s < 1:
        raise ValueError("s must be >= 1")
    if mu < 0:
        raise ValueError("mu must be >= 0")
    if mu >= 1.0 / (2 * s - 1):
        raise AssumptionError(
            f"mutual incoherence (A3) requires mu < 1/(2s-1) = {1.0 / (2 * s - 1):.6g}, got mu = {mu:.6g}"
        )
    gamma = 1.0 - mu * (s - 1)
    eta = (1.0 - mu * (2 * s - 1)) / (1.0 - mu * (s - 1))
    return gamma, eta


def tau_bar(eta, sigma, n, p, max_colnorm_T, kappa=None, B=None):
    """Early stopping time ``eta / (2 sigma) * sqrt(n / log p) / max_{j in T} ||X_j||_n``.

    With ``kappa`` (and ``B``) the margin ``eta`` is replaced by
    ``(1 - B / (kappa * eta)) * eta``. Natural log.
    """
    sigma = check_positive(sigma, "sigma")
    if not eta > 0:
        raise AssumptionError(f"irrepresentable condition fails (eta = {eta:.6g} <= 0); no stopping time")
    if p < 2:
        raise ValueError("tau_bar needs p >= 2 so that log p > 0")
    max_colnorm_T = check_positive(max_colnorm_T, "max_colnorm_T")
    margin = float(eta)
    if kappa is not None:
        if B is None:
            raise ValueError("the kappa-corrected stopping time needs the bound B")
        kappa = check_positive(kappa, "kappa", allow_inf=True)
        if B >= kappa * eta:
            raise AssumptionError(
                f"kappa too small: need B < kappa * eta, got B = {B:.6g} >= {kappa * eta:.6g}"
            )
        margin = (1.0 - B / (kappa * eta)) * eta
    return margin / (2.0 * sigma) * math.sqrt(n / math.log(p)) / max_colnorm_T


def lbiss_bound_B(problem: Problem, truth: GroundTruth, gamma) -> float:
    """Bound ``B`` on ``||beta_S||_inf`` used in the kappa-size condition ``B <= kappa * eta``.

    ``beta*_max + 2 sigma sqrt(log p / (gamma n)) + (||X beta*|| + 2 sigma sqrt(s log n)) / (n sqrt(gamma))``
    """
    gamma = check_positive(gamma, "gamma")
    truth.check_against(problem)
    n, p, s, sigma = problem.n, problem.p, truth.s, truth.sigma
    signal = float(np.linalg.norm(problem.X @ truth.beta_star))
    return (
        truth.beta_max
        + 2.0 * sigma * math.sqrt(math.log(p) / (gamma * n))
        + (signal + 2.0 * sigma * math.sqrt(s * math.log(n))) / (n * math.sqrt(gamma))
    )
