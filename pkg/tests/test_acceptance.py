"""End-to-end acceptance suite.

Each test records its criterion number, a title and a one-line detail; the
conftest hook prints a PASS/FAIL line per criterion at the end of the run.
The AUC study (criterion 4) takes tens of minutes on one core; set
``ISS_SPARSE_THREADS`` to spread replicates over processes.
"""

import math
import os
import time

import numpy as np
import pytest

from conftest import random_instance
from oracles import brute_force_sign_ls
from iss_sparse import IssRegressor
from iss_sparse.diagnostics import residual_rule_conditions, verify_discrete_bihari
from iss_sparse.experiments import (
    ExperimentConfig,
    generate_instance,
    lb_iss_gap,
    run_auc_study,
    sign_consistency_trial,
    worker_count,
)
from iss_sparse.iss import eval_path, is_incremental, iss_path, mean_path, solve_sign_constrained_ls
from iss_sparse.lasso import KKT_TOL, lasso_kkt_residual, lasso_path, lasso_solve
from iss_sparse.lb import lb_run, lbiss_integrate
from iss_sparse.model import GroundTruth, Problem, check_conditions, oracle_estimator, tau_bar
from iss_sparse.parallel import ShardPlan, lb_sharded


class Criterion:
    def __init__(self, record_property):
        self._record = record_property

    def __call__(self, num, title):
        self._record("criterion", num)
        self._record("title", title)

    def detail(self, text):
        self._record("detail", text)


@pytest.fixture
def criterion(record_property):
    return Criterion(record_property)


def _warm_up():
    # compile the numba kernels outside the timed region
    P = Problem(np.array([[1.0, 0.0], [0.0, 1.0]]), [1.0, 0.5])
    lasso_solve(P, 0.1)
    lb_run(P, 2.0, 0.1, max_iters=3)


def test_closed_form_fidelity(criterion):
    criterion(1, "closed-form fidelity, n = p = 1")
    _warm_up()
    P = Problem(np.array([[1.0]]), np.array([2.0]))
    y = 2.0
    ts = np.linspace(0.0, 3.0, 1000)
    start = time.perf_counter()
    path = iss_path(P)
    iss = np.array([eval_path(path, t)[1][0] for t in ts])
    lbiss = {k: lbiss_integrate(P, k, sample_times=ts).beta[:, 0] for k in (1.0, 10.0)}
    lasso = np.array([lasso_solve(P, 1.0 / t)[0] if t > 0 else 0.0 for t in ts])
    elapsed = time.perf_counter() - start

    errs = {"iss": np.max(np.abs(iss - np.where(ts >= 1 / y, y, 0.0))),
            "lasso": np.max(np.abs(lasso - np.where(ts > 1 / y, y - 1 / np.maximum(ts, 1e-300), 0.0)))}
    for k, vals in lbiss.items():
        exact = np.where(ts > 1 / y, y * (1 - np.exp(-k * (ts - 1 / y))), 0.0)
        errs[f"lbiss k={k:g}"] = np.max(np.abs(vals - exact))
    worst = max(errs.values())
    criterion.detail(f"worst sup error {worst:.2e} ({', '.join(f'{k} {v:.1e}' for k, v in errs.items())}), "
                     f"{elapsed:.2f}s")
    assert worst <= 1e-10
    assert elapsed < 1.0


def test_orthogonal_design_path(criterion):
    criterion(2, "orthogonal-design path")
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    worst = 0.0
    for p in (1, 2, 5, 10, 20):
        v = rng.choice([-1, 1], p) * rng.uniform(0.5, 5.0, p)
        order = np.argsort(1 / np.abs(v), kind="stable")
        # orthonormal columns (X* X = I): breakpoints 1/|v_i|
        n = p
        P = Problem(np.sqrt(n) * np.eye(p), np.sqrt(n) * v)
        path = iss_path(P)
        worst = max(worst, np.max(np.abs(path.breakpoints[1:] - np.sort(1 / np.abs(v)))))
        for k, j in enumerate(order, start=1):
            worst = max(worst, abs(path.beta_on_piece[k][j] - v[j]))
        # the unnormalized identity X = I_p rescales time by n
        Q = Problem(np.eye(p), v)
        lit = iss_path(Q)
        worst = max(worst, np.max(np.abs(lit.breakpoints[1:] / n - np.sort(1 / np.abs(v)))))
        worst = max(worst, np.max(np.abs(lit.beta_on_piece[-1] - v)))
    elapsed = time.perf_counter() - start
    criterion.detail(f"max deviation {worst:.2e} over p in (1, 2, 5, 10, 20), {elapsed:.2f}s")
    assert worst <= 1e-10
    assert elapsed < 1.0


def test_subproblem_oracle(criterion):
    criterion(3, "sign-constrained least squares vs enumeration")
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        n, p = rng.integers(2, 11), rng.integers(1, 6)
        X = rng.standard_normal((n, p))
        y = rng.standard_normal(n)
        labels = rng.integers(0, 3, p)  # 0 plus, 1 minus, 2 fixed at zero
        plus, minus = np.flatnonzero(labels == 0), np.flatnonzero(labels == 1)
        beta = solve_sign_constrained_ls(Problem(X, y), plus, minus).beta
        best, _ = brute_force_sign_ls(X, y, plus, minus)
        r = y - X @ beta
        worst = max(worst, abs(float(r @ r) - best))
        assert np.all(beta[plus] >= 0) and np.all(beta[minus] <= 0) and np.all(beta[labels == 2] == 0)
    elapsed = time.perf_counter() - start
    criterion.detail(f"max objective gap {worst:.2e} on 200 instances, {elapsed:.2f}s")
    assert worst <= 1e-8
    assert elapsed < 10.0


# mean AUC per noise level; columns LB(4), LB(64), LB(1024), ISS, LASSO
REFERENCE_AUC = {
    1.0: (0.8747, 0.916, 0.9197, 0.9213, 0.9134),
    2.0: (0.8604, 0.8931, 0.8958, 0.8967, 0.8935),
    3.0: (0.8306, 0.8513, 0.8524, 0.8521, 0.8529),
}
AUC_COLUMNS = (("lb", 4.0), ("lb", 64.0), ("lb", 1024.0), ("iss", None), ("lasso", None))


def test_auc_table(criterion):
    criterion(4, "AUC table, 100 reps per noise level")
    workers = worker_count(default=os.cpu_count() or 1)
    means = {}
    for sigma in REFERENCE_AUC:
        study = run_auc_study(ExperimentConfig(sigma=sigma), workers=workers)
        assert not study.failures, study.failures
        means[sigma] = [study.mean(m, k) for m, k in AUC_COLUMNS]
    dev = {(s, c): means[s][i] - REFERENCE_AUC[s][i] for s in means for i, c in enumerate(AUC_COLUMNS)}
    worst_cell = max(dev, key=lambda c: abs(dev[c]))
    cells_ok = all(abs(d) <= 0.02 for d in dev.values())

    lb_increasing = all(means[s][0] < means[s][1] < means[s][2] for s in means)
    lb_closing = all(abs(means[s][2] - means[s][3]) < abs(means[s][0] - means[s][3]) for s in means)
    sig = sorted(means)
    decreasing = all(means[a][i] > means[b][i] for a, b in zip(sig, sig[1:]) for i in range(5))
    table = "; ".join(f"sigma={s:g}: " + " ".join(f"{m:.4f}" for m in means[s]) for s in sig)
    criterion.detail(
        f"cells within 0.02: {cells_ok} (worst {worst_cell[1][0]}"
        f"{'' if worst_cell[1][1] is None else f'({worst_cell[1][1]:g})'} at sigma={worst_cell[0]:g}: "
        f"{dev[worst_cell]:+.4f}); LB increasing in kappa: {lb_increasing}; LB approaching ISS: "
        f"{lb_closing}; decreasing in sigma: {decreasing}; table [{table}]")
    assert cells_ok
    assert lb_increasing and lb_closing and decreasing


def test_kappa_convergence(criterion):
    criterion(5, "LB path approaches ISS as kappa grows")
    P, _ = generate_instance(ExperimentConfig(), 0)
    path = iss_path(P, t_max=5.0)
    g4, g1024 = (lb_iss_gap(P, path, k, t_cap=5.0) for k in (4.0, 1024.0))
    criterion.detail(f"sup gap at breakpoints <= 5: kappa=4 {g4:.4f}, kappa=1024 {g1024:.4f}")
    assert g1024 < g4


def test_discrete_bihari_suite(criterion):
    criterion(6, "discrete Bihari inequality")
    worst, steps = math.inf, 0
    for seed in range(100):
        s = 1 + seed % 10
        P, truth = random_instance(seed, n=60, p=s + 4, s=s, sigma=0.5)
        PS = Problem(P.X[:, truth.support], P.y)
        kappa = (4.0, 16.0, 64.0)[seed % 3]
        alpha = (0.2, 0.5, 1.0, 1.5)[seed % 4] / (kappa * PS.gram_norm)
        gamma = check_conditions(PS, np.arange(s)).gamma
        assert gamma * (1 - kappa * alpha * PS.gram_norm / 2) > 0
        tr = lb_run(PS, kappa, alpha, max_iters=400)
        tilde = oracle_estimator(PS, np.arange(s))
        _, slack = verify_discrete_bihari(tr, PS, tilde, gamma, kappa, alpha)
        worst = min(worst, slack)
        steps += tr.n_iters
    criterion.detail(f"worst slack {worst:.2e} over 100 runs, {steps} steps")
    assert worst >= -1e-9


def test_residual_monotonicity(criterion):
    criterion(7, "oracle residual nonincreasing")
    worst, runs = -math.inf, 0
    for seed in range(60):
        s = 1 + seed % 5
        P, truth = random_instance(seed, n=40, p=s + 4, s=s, sigma=0.5)
        S = truth.support
        PS = Problem(P.X[:, S], P.y)
        tilde = oracle_estimator(PS, np.arange(s))

        def rise(betas, scale):
            dist = np.linalg.norm((np.asarray(betas) - tilde) @ PS.X.T, axis=1)
            return float(np.max(np.diff(dist), initial=-math.inf)) / scale

        # ISS restricted to the support
        path = iss_path(PS)
        worst = max(worst, rise(path.beta_on_piece, 1.0))
        # LB on the support for step sizes inside the stability range
        for ratio in (0.3, 1.0, 1.9):
            kappa = (4.0, 64.0)[seed % 2]
            alpha = ratio / (kappa * PS.gram_norm)
            tr = lb_run(PS, kappa, alpha, max_iters=300)
            worst = max(worst, rise(tr.beta, 1.0))
            runs += 1
        # and the full residual along the unrestricted path
        full = iss_path(P)
        res = [np.linalg.norm(P.residual(b)) for b in full.beta_on_piece]
        worst = max(worst, float(np.max(np.diff(res), initial=-math.inf)))
        runs += 2
    criterion.detail(f"largest per-step increase {worst:.2e} over {runs} runs")
    assert worst <= 1e-9


def test_mean_path_lasso(criterion):
    criterion(8, "mean path equals LASSO on incremental paths")
    cfg = ExperimentConfig(n=100, p=30, s=3, sigma=0.5, covariance="identity", seed=11)
    kept, worst, rep = 0, 0.0, 0
    while kept < 50 and rep < 500:
        P, truth = generate_instance(cfg, rep)
        rep += 1
        rc = check_conditions(P, truth.support)
        if rc.eta <= 0:
            continue
        tb = tau_bar(rc.eta, truth.sigma, P.n, P.p, rc.max_colnorm_T)
        path = iss_path(P, t_max=tb)
        on_support = all(set(np.flatnonzero(b)) <= set(truth.support) for b in path.beta_on_piece)
        if not (is_incremental(path, tb) and on_support):
            continue
        kept += 1
        for t in np.linspace(tb / 20, tb, 20):
            worst = max(worst, float(np.max(np.abs(mean_path(path, t) - lasso_solve(P, 1.0 / t)))))
    criterion.detail(f"{kept} qualifying instances out of {rep} drawn, max deviation {worst:.2e}")
    assert kept == 50
    assert worst <= 1e-6


def test_lasso_certification(criterion):
    criterion(9, "LASSO solutions pass the KKT check")
    worst, count = 0.0, 0
    for rep in range(10):
        P, _ = generate_instance(ExperimentConfig(), rep)
        lp = lasso_path(P, count=200)
        worst = max(worst, float(np.max(lp.kkt_residuals)))
        count += lp.lambda_grid.size
    for seed in range(100):
        P, _ = random_instance(seed, n=12, p=8, corr=0.7)
        lp = lasso_path(P, count=40)
        # recompute independently of the stored residuals
        res = [lasso_kkt_residual(P, b, lam) for b, lam in zip(lp.solutions, lp.lambda_grid)]
        worst = max(worst, max(res))
        count += len(res)
    criterion.detail(f"max KKT residual {worst:.2e} over {count} solutions")
    assert worst <= KKT_TOL


def test_sharded_equivalence(criterion):
    criterion(10, "sharded LB equals serial LB")
    P, _ = generate_instance(ExperimentConfig(), 0)
    worst, identical = 0.0, True
    for kappa in (4.0, 64.0, 1024.0):
        alpha = 0.1 / kappa
        serial = lb_run(P, kappa, alpha, max_iters=1000)
        for L in (1, 2, 4, 8):
            plan = ShardPlan.even(P.p, L)
            a = lb_sharded(P, plan, kappa, alpha, 1000)
            b = lb_sharded(P, plan, kappa, alpha, 1000, threads=min(L, 4))
            worst = max(worst, float(np.max(np.abs(a.beta - serial.beta))))
            identical &= np.array_equal(a.beta, b.beta) and np.array_equal(a.z, b.z)
    criterion.detail(f"max deviation over 1000 iterates {worst:.2e}; repeated runs bit-identical: {identical}")
    assert worst <= 1e-12
    assert identical


def _strong_signal_instance(seed, n=2000, p=50, s=5, sigma=1.0):
    rng = np.random.default_rng([99, seed])
    X = rng.standard_normal((n, p))
    beta = np.zeros(p)
    r = rng.standard_normal(s)
    beta[:s] = np.sign(r) * (3.0 + np.abs(r))
    y = X @ beta + sigma * rng.standard_normal(n)
    return Problem(X, y), GroundTruth(beta, sigma)


def test_stopping_rule_consistency(criterion):
    criterion(11, "residual rule selects the true support")
    exact, conditions = 0, 0
    for seed in range(100):
        P, truth = _strong_signal_instance(seed)
        rc = check_conditions(P, truth.support)
        conditions += all(residual_rule_conditions(rc, truth, P.n, P.p))
        est = IssRegressor(stop="residual", sigma=truth.sigma).fit(P.X, P.y)
        exact += np.array_equal(np.flatnonzero(est.coef_), truth.support)
    criterion.detail(f"exact support in {exact}/100 trials; both signal conditions hold in {conditions}/100")
    assert exact >= 90


def test_sign_consistency_at_tau_bar(criterion):
    criterion(12, "sign consistency before the stopping time")
    cfg = ExperimentConfig(n=1000, p=30, s=3, sigma=0.5, covariance="identity", seed=12)
    hits, eta_ok, worst = 0, 0, 0.0
    for rep in range(100):
        P, truth = generate_instance(cfg, rep)
        eta_ok += check_conditions(P, truth.support).eta > 0
        res = sign_consistency_trial(P, truth)
        if res.hit:
            hits += 1
            assert res.first_hit_t <= res.stop_time
            worst = max(worst, float(np.max(np.abs(res.beta_at_hit - oracle_estimator(P, truth.support)))))
    criterion.detail(f"hits {hits}/100 (irrepresentable margin positive in {eta_ok}/100); "
                     f"max distance to oracle at hit {worst:.2e}")
    assert hits >= 90
    assert worst <= 1e-10
