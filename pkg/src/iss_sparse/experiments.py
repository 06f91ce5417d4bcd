"""Synthetic instances, selection-order ROC/AUC and the Monte Carlo AUC study."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .diagnostics import residual_threshold
from .iss import IssPath, iss_path
from .lasso import LassoPath, lasso_path
from .lb import LbTrace, lb_entry_iterations, lb_run
from .model import GroundTruth, Problem, check_conditions, tau_bar

__all__ = [
    "ExperimentConfig",
    "RocResult",
    "AucStudy",
    "SignTrialResult",
    "covariance_matrix",
    "generate_instance",
    "rep_rng",
    "selection_order",
    "entry_order",
    "roc_auc",
    "run_auc_study",
    "sign_consistency_trial",
    "worker_count",
    "lb_iss_gap",
]

logger = logging.getLogger(__name__)

#: iteration cap for LB runs inside the study
LB_MAX_ITERS = 1_000_000


@dataclass(frozen=True)
class ExperimentConfig:
    """Simulation settings. ``offdiag=None`` means ``1 / (3 p)``."""

    n: int = 80
    p: int = 100
    s: int = 30
    sigma: float = 1.0
    covariance: str = "constant-offdiag"
    offdiag: Optional[float] = None
    signal_law: str = "shifted-gaussian"
    kappa_list: tuple = (4.0, 64.0, 1024.0)
    kappa_alpha: float = 0.1
    reps: int = 100
    seed: int = 0
    lasso_grid: int = 200
    lb_horizon_factor: float = 1.5
    lb_max_iters: int = LB_MAX_ITERS

    def __post_init__(self):
        if min(self.n, self.p) < 1 or self.s < 0 or self.s > self.p:
            raise ValueError("need n, p >= 1 and 0 <= s <= p")
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.covariance not in ("identity", "constant-offdiag"):
            raise ValueError(f"unknown covariance {self.covariance!r}")
        if self.signal_law not in ("shifted-gaussian",):
            raise ValueError(f"unknown signal law {self.signal_law!r}")
        object.__setattr__(self, "kappa_list", tuple(float(k) for k in self.kappa_list))

    @property
    def c(self) -> float:
        if self.covariance == "identity":
            return 0.0
        return 1.0 / (3 * self.p) if self.offdiag is None else float(self.offdiag)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kappa_list"] = list(self.kappa_list)
        return d


def covariance_matrix(config: ExperimentConfig) -> np.ndarray:
    c = config.c
    return np.full((config.p, config.p), c) + (1.0 - c) * np.eye(config.p)


def rep_rng(seed, rep) -> np.random.Generator:
    """Independent stream for replicate ``rep``, reproducible in any order."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(rep),)))


def generate_instance(config: ExperimentConfig, rng) -> tuple:
    """Draw ``(Problem, GroundTruth)``: Gaussian rows with the configured
    covariance, ``beta_j = r_j + sign(r_j)`` on the first ``s`` coordinates and
    ``y = X beta + sigma * N(0, I)``.

    ``rng`` is a Generator or an int replicate index (combined with ``config.seed``).
    The noise draw is scaled by ``sigma`` so designs and signals are shared
    across noise levels for the same replicate.
    """
    if not isinstance(rng, np.random.Generator):
        rng = rep_rng(config.seed, rng)
    try:
        L = np.linalg.cholesky(covariance_matrix(config))
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance is not positive definite") from exc
    X = rng.standard_normal((config.n, config.p)) @ L.T
    beta = np.zeros(config.p)
    r = rng.standard_normal(config.s)
    beta[: config.s] = r + np.sign(r)
    noise = rng.standard_normal(config.n)
    y = X @ beta + config.sigma * noise
    return Problem(X, y), GroundTruth(beta, config.sigma)


def entry_order(entry_times) -> list:
    """``[(coordinate, time), ...]`` sorted by time then index; entries that are
    ``inf``, ``nan`` or negative mean "never selected" and are dropped."""
    t = np.asarray(entry_times, dtype=float)
    keep = np.flatnonzero(np.isfinite(t) & (t >= 0))
    keep = keep[np.lexsort((keep, t[keep]))]
    return [(int(i), float(t[i])) for i in keep]


def selection_order(path) -> list:
    """First-entry events ``(coordinate, time)`` of a path.

    Time is ``t`` for ISS, ``k * alpha`` for LB and ``1 / lambda`` for LASSO
    grids, so earlier always means stronger evidence.
    """
    if isinstance(path, IssPath):
        nz = path.beta_on_piece != 0
        first = np.where(nz.any(axis=0), np.argmax(nz, axis=0), -1)
        times = np.where(first >= 0, path.breakpoints[np.maximum(first, 0)], np.inf)
    elif isinstance(path, LbTrace):
        times = np.where(path.first_entry >= 0, path.first_entry * path.alpha, np.inf)
    elif isinstance(path, LassoPath):
        nz = path.solutions != 0
        first = np.where(nz.any(axis=0), np.argmax(nz, axis=0), -1)
        times = np.where(first >= 0, 1.0 / path.lambda_grid[np.maximum(first, 0)], np.inf)
    else:
        raise TypeError(f"unsupported path type {type(path).__name__}")
    return entry_order(times)


@dataclass(frozen=True, eq=False)
class RocResult:
    events: list
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def roc_auc(order, truth: GroundTruth) -> RocResult:
    """ROC curve of a selection order against the planted support.

    Coordinates entering at the same time form one threshold step (a diagonal
    segment). Coordinates never selected follow in ascending index order.
    The area is computed by the trapezoidal rule.
    """
    p, S = truth.p, truth.support
    s, t_size = S.size, p - S.size
    if s == 0 or t_size == 0:
        raise ValueError("ROC needs both true and false coordinates")
    is_true = np.zeros(p, dtype=bool)
    is_true[S] = True
    seen = np.zeros(p, dtype=bool)
    groups = []
    last = None
    for coord, t in order:
        if seen[coord]:
            raise ValueError(f"coordinate {coord} appears twice in the order")
        seen[coord] = True
        if last is not None and t == last:
            groups[-1].append(coord)
        else:
            groups.append([coord])
        last = t
    groups.extend([int(i)] for i in np.flatnonzero(~seen))
    tp = fp = 0
    tpr, fpr = [0.0], [0.0]
    for g in groups:
        k = int(is_true[g].sum())
        tp += k
        fp += len(g) - k
        tpr.append(tp / s)
        fpr.append(fp / t_size)
    tpr, fpr = np.array(tpr), np.array(fpr)
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocResult(list(order), fpr, tpr, auc)


def _method_keys(config):
    return [("iss", None)] + [("lb", k) for k in config.kappa_list] + [("lasso", None)]


def _one_rep(config: ExperimentConfig, rep: int) -> dict:
    problem, truth = generate_instance(config, rep)
    out = {}
    path = iss_path(problem)
    out[("iss", None)] = roc_auc(selection_order(path), truth).auc
    t_end = config.lb_horizon_factor * float(path.breakpoints[-1])
    for kappa in config.kappa_list:
        alpha = config.kappa_alpha / kappa
        iters = int(min(max(math.ceil(t_end / alpha), 1), config.lb_max_iters))
        first = lb_entry_iterations(problem, kappa, alpha, iters)
        times = np.where(first >= 0, first * alpha, np.inf)
        out[("lb", kappa)] = roc_auc(entry_order(times), truth).auc
    lp = lasso_path(problem, count=config.lasso_grid)
    out[("lasso", None)] = roc_auc(selection_order(lp), truth).auc
    return out


def _safe_rep(args):
    config, rep = args
    try:
        return rep, _one_rep(config, rep), None
    except Exception as exc:  # a failed replicate is reported, not fatal
        return rep, None, f"{type(exc).__name__}: {exc}"


def worker_count(default=1) -> int:
    """Replicate parallelism from ``ISS_SPARSE_THREADS`` (default 1)."""
    raw = os.environ.get("ISS_SPARSE_THREADS")
    if raw is None:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"ISS_SPARSE_THREADS must be an integer, got {raw!r}") from None


@dataclass(frozen=True, eq=False)
class AucStudy:
    config: ExperimentConfig
    rows: list  # (method, kappa, sigma, rep, auc)
    summary: dict  # (method, kappa) -> (mean, std, count)
    failures: list = field(default_factory=list)  # (rep, message)

    def mean(self, method, kappa=None) -> float:
        return self.summary[(method, None if kappa is None else float(kappa))][0]

    def std(self, method, kappa=None) -> float:
        return self.summary[(method, None if kappa is None else float(kappa))][1]

    def summary_json(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "methods": [
                {"method": m, "kappa": k, "mean_auc": v[0], "std_auc": v[1], "reps": v[2]}
                for (m, k), v in self.summary.items()
            ],
            "failures": [{"rep": r, "error": e} for r, e in self.failures],
        }


def run_auc_study(config: ExperimentConfig, workers=None) -> AucStudy:
    """Mean and sample standard deviation of the AUC of every method over
    ``config.reps`` replicates.

    Replicates run on ``workers`` processes (default from
    :func:`worker_count`); results are aggregated in ascending replicate order
    so the output does not depend on scheduling.
    """
    workers = worker_count() if workers is None else max(1, int(workers))
    jobs = [(config, rep) for rep in range(config.reps)]
    if workers == 1 or config.reps == 1:
        results = [_safe_rep(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_safe_rep, jobs))
    results.sort(key=lambda r: r[0])
    rows, failures = [], []
    per_method = {key: [] for key in _method_keys(config)}
    for rep, aucs, err in results:
        if err is not None:
            logger.warning("replicate %d failed: %s", rep, err)
            failures.append((rep, err))
            continue
        for key in per_method:
            per_method[key].append(aucs[key])
            rows.append((key[0], key[1], config.sigma, rep, aucs[key]))
    summary = {}
    for key, vals in per_method.items():
        v = np.array(vals)
        mean = float(v.mean()) if v.size else math.nan
        std = float(v.std(ddof=1)) if v.size > 1 else 0.0
        summary[key] = (mean, std, int(v.size))
    return AucStudy(config, rows, summary, failures)


@dataclass(frozen=True, eq=False)
class SignTrialResult:
    hit: bool
    first_hit_t: Optional[float]
    stop_time: float
    beta_at_hit: Optional[np.ndarray]


def _stop_time(problem, truth, stop, kappa=None):
    if stop == "tau_bar":
        rep = check_conditions(problem, truth.support)
        if rep.eta <= 0:
            return 0.0
        return tau_bar(rep.eta, truth.sigma, problem.n, problem.p, rep.max_colnorm_T)
    if stop != "rule":
        raise ValueError(f"unknown stop {stop!r}; use 'tau_bar' or 'rule'")
    return None


def sign_consistency_trial(problem: Problem, truth: GroundTruth, method="iss", stop="tau_bar",
                           kappa=None, alpha=None, max_iters=1_000_000) -> SignTrialResult:
    """Does the path reach ``sign(beta) = sign(beta*)`` no later than the stop?

    ``stop="tau_bar"`` uses the theoretical stopping time computed from the true
    support; ``stop="rule"`` stops at the first point passing the residual rule
    (which needs ``truth.sigma > 0``).
    """
    target = truth.signs
    t_stop = _stop_time(problem, truth, stop)
    thr = residual_threshold(truth.sigma, problem.n) if stop == "rule" else None
    if method == "iss":
        path = iss_path(problem, t_max=math.inf if t_stop is None else max(t_stop, 1e-300))
        for k in range(path.n_pieces):
            t = float(path.breakpoints[k])
            if t_stop is not None and t > t_stop:
                break
            beta = path.beta_on_piece[k]
            if np.array_equal(np.sign(beta), target):
                return SignTrialResult(True, t, t if t_stop is None else t_stop, beta.copy())
            if thr is not None and np.linalg.norm(problem.residual(beta)) <= thr:
                return SignTrialResult(False, None, t, None)
        return SignTrialResult(False, None, math.inf if t_stop is None else t_stop, None)
    if method == "lb":
        if kappa is None or alpha is None:
            raise ValueError("LB trials need kappa and alpha")
        t_max = math.inf if t_stop is None else t_stop

        def hit_or_stop(prob, beta, residual):
            if np.array_equal(np.sign(beta), target):
                return True
            return thr is not None and np.linalg.norm(residual) <= thr

        tr = lb_run(problem, kappa, alpha, max_iters=max_iters, t_max=t_max,
                    record_stride=max_iters, stop_rule=hit_or_stop)
        beta = tr.beta[-1]
        t = tr.n_iters * alpha
        if np.array_equal(np.sign(beta), target):
            return SignTrialResult(True, t, t if t_stop is None else t_stop, beta.copy())
        return SignTrialResult(False, None, t if t_stop is None else t_stop, None)
    raise ValueError(f"unknown method {method!r}")


def lb_iss_gap(problem: Problem, path: IssPath, kappa, kappa_alpha=0.1, t_cap=math.inf) -> float:
    """Sup-norm distance between the LB iterate at each ISS breakpoint
    ``t_k <= t_cap`` and the ISS value on the piece ending at ``t_k``.

    The left limit is the fair comparison: at ``t_k`` the exact path has
    already jumped while the iteration only starts moving toward the new value.
    """
    alpha = kappa_alpha / kappa
    bp = path.breakpoints
    idx = np.flatnonzero((bp > 0) & (bp <= t_cap))
    if idx.size == 0:
        return 0.0
    ks = np.floor(bp[idx] / alpha + 1e-9).astype(np.int64)
    tr = lb_run(problem, kappa, alpha, max_iters=int(ks.max()), record_at=ks)
    return max(float(np.max(np.abs(tr.beta_at_time(bp[i]) - path.beta_on_piece[i - 1]))) for i in idx)
