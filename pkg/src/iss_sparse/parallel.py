"""Column-sharded Linearized Bregman iteration with an all-reduce of the fits.

Each shard owns a contiguous block of columns ``X_l`` and its part of ``z``.
Per iteration a shard computes its partial fit ``w_l = X_l beta_l``; the
partial fits are summed by a fixed pairwise tree (ascending shard index), and
every shard then updates ``z_l += (alpha / n) X_l^T (y - w)``. Only length-``n``
vectors travel between shards.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._validation import check_positive
from .lb import DIVERGENCE_FACTOR, DivergenceError, LbTrace, check_step_size
from .model import Problem

__all__ = ["ShardPlan", "lb_sharded", "tree_reduce", "communication_cost"]


@dataclass(frozen=True)
class ShardPlan:
    """Contiguous column ranges ``[(start, stop), ...]`` covering ``[0, p)``."""

    ranges: tuple

    def __post_init__(self):
        ranges = tuple((int(a), int(b)) for a, b in self.ranges)
        if not ranges:
            raise ValueError("a shard plan needs at least one shard")
        if ranges[0][0] != 0:
            raise ValueError("shards must start at column 0")
        for (a, b), (c, _) in zip(ranges, ranges[1:] + ((ranges[-1][1], None),)):
            if b <= a:
                raise ValueError(f"empty or reversed shard ({a}, {b})")
            if c != b:
                raise ValueError("shards must be contiguous and disjoint")
        object.__setattr__(self, "ranges", ranges)

    @classmethod
    def even(cls, p, L) -> "ShardPlan":
        """Split ``p`` columns into ``L`` nearly equal blocks."""
        if not 1 <= L <= p:
            raise ValueError(f"need 1 <= L <= p, got L={L}, p={p}")
        edges = np.linspace(0, p, L + 1).round().astype(int)
        return cls(tuple(zip(edges[:-1], edges[1:])))

    @property
    def L(self) -> int:
        return len(self.ranges)

    @property
    def p(self) -> int:
        return self.ranges[-1][1]


def tree_reduce(parts):
    """Sum arrays pairwise, ``(0+1) + (2+3) + ...`` level by level; an odd
    trailing element is carried up unchanged."""
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to reduce")
    while len(parts) > 1:
        nxt = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def communication_cost(plan: ShardPlan, iters, n) -> dict:
    """Floats exchanged by the tree reduction: ``n (L - 1)`` per iteration."""
    per_iter = int(n) * (plan.L - 1)
    return {"reduced_floats_per_iter": per_iter, "total": per_iter * int(iters)}


def lb_sharded(problem: Problem, plan: ShardPlan, kappa, alpha, iters, record_stride=1,
               threads=None) -> LbTrace:
    """Run ``iters`` iterations of the sharded scheme from ``z = 0``.

    With ``threads`` > 1 the per-shard products run on a thread pool; the
    reduction order is fixed, so results do not depend on scheduling.
    """
    if plan.p != problem.p:
        raise ValueError(f"shard plan covers {plan.p} columns, problem has {problem.p}")
    kappa = check_positive(kappa, "kappa")
    alpha = check_positive(alpha, "alpha")
    if record_stride < 1:
        raise ValueError("record_stride must be >= 1")
    check_step_size(problem, kappa, alpha)
    X, y, n, p = problem.X, problem.y, problem.n, problem.p
    blocks = [X[:, a:b] for a, b in plan.ranges]
    zs = [np.zeros(b - a) for a, b in plan.ranges]
    betas = [np.zeros(b - a) for a, b in plan.ranges]
    step = alpha / n
    limit = DIVERGENCE_FACTOR * max(float(np.linalg.norm(y)), np.finfo(float).tiny)

    def fit(l):
        return blocks[l] @ betas[l]

    def update(l, r):
        z = zs[l] + step * (blocks[l].T @ r)
        zs[l] = z
        betas[l] = kappa * (np.sign(z) * np.maximum(np.abs(z) - 1.0, 0.0))

    pool = ThreadPoolExecutor(max_workers=int(threads)) if threads and threads > 1 else None
    try:
        def for_all(fn, *args):
            if pool is None:
                return [fn(l, *args) for l in range(plan.L)]
            return list(pool.map(lambda l: fn(l, *args), range(plan.L)))

        first_entry = np.full(p, -1, dtype=np.int64)
        rec_iters, rec_z, rec_beta = [0], [np.zeros(p)], [np.zeros(p)]
        w = tree_reduce(for_all(fit))
        for k in range(1, int(iters) + 1):
            r = y - w
            for_all(update, r)
            beta = np.concatenate(betas)
            new = (first_entry < 0) & (beta != 0)
            first_entry[new] = k
            w = tree_reduce(for_all(fit))
            if not (np.all(np.isfinite(w)) and np.linalg.norm(y - w) <= limit):
                raise DivergenceError(f"sharded iterate diverged at k = {k}")
            if k % record_stride == 0 or k == iters:
                rec_iters.append(k)
                rec_z.append(np.concatenate(zs))
                rec_beta.append(beta)
    finally:
        if pool is not None:
            pool.shutdown()
    return LbTrace(
        kappa=kappa,
        alpha=alpha,
        iters=np.array(rec_iters, dtype=np.int64),
        z=np.array(rec_z),
        beta=np.array(rec_beta),
        first_entry=first_entry,
        n_iters=int(iters),
        stopping_reason="max_iters",
        record_stride=record_stride,
    )
