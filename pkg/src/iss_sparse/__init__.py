"""Sparse regression paths from inverse scale space dynamics.

Exact Bregman inverse scale space paths, linearized Bregman iterations and
their continuous flow, a LASSO baseline, theory-side diagnostics and a Monte
Carlo harness for variable-selection studies.
"""

__version__ = "0.1.0"

from .model import (
    AssumptionError,
    ConditionReport,
    GroundTruth,
    Problem,
    SingularDesignError,
    check_conditions,
    coherence,
    coherence_bounds,
    lbiss_bound_B,
    oracle_estimator,
    shrink,
    tau_bar,
)
from .iss import IssPath, eval_path, is_incremental, iss_path, mean_path, solve_sign_constrained_ls
from .lb import LbissSamples, LbTrace, lb_entry_iterations, lb_run, lb_step, lbiss_integrate
from .lasso import LassoPath, lasso_bias_decomposition, lasso_path, lasso_solve
from .diagnostics import (
    bihari_F,
    bihari_F_inverse,
    bregman_distance,
    potential,
    residual_decomposition,
    stop_rule_gradient,
    stop_rule_residual,
    stopping_time_bounds,
    strong_signal_check,
    verify_discrete_bihari,
)
from .experiments import ExperimentConfig, generate_instance, roc_auc, run_auc_study, selection_order
from .parallel import ShardPlan, communication_cost, lb_sharded
from .estimators import IssRegressor, LassoBaseline, LbissRegressor, LinearizedBregmanRegressor
