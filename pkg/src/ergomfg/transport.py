"""Exact Wasserstein distances on a finite metric space."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import coo_matrix, vstack


@dataclass
class TransportPlan:
    plan: np.ndarray
    cost: float


def wasserstein(mu1, mu2, p, metric):
    """Order-``p`` Wasserstein distance and an optimal coupling.

    Solved exactly as a transportation LP over the supports of the two
    measures (dual simplex, tight tolerances).
    """
    if p < 1:
        raise ValueError("Wasserstein order p must be >= 1")
    mu1 = np.asarray(mu1, dtype=float)
    mu2 = np.asarray(mu2, dtype=float)
    d = np.asarray(metric, dtype=float)
    n = d.shape[0]
    if mu1.shape != (n,) or mu2.shape != (n,):
        raise ValueError("measures must live on the metric's state space")

    plan = np.zeros((n, n))
    if np.array_equal(mu1, mu2):
        plan[np.diag_indices(n)] = mu1
        return 0.0, TransportPlan(plan, 0.0)

    rows = np.flatnonzero(mu1 > 0)
    cols = np.flatnonzero(mu2 > 0)
    a, b = mu1[rows], mu2[cols]
    k, m = len(rows), len(cols)
    C = d[np.ix_(rows, cols)] ** p
    if k == 1 or m == 1:
        # a point mass on one side admits a single coupling
        sub = np.outer(a, b)
    else:
        idx = np.arange(k * m)
        A_row = coo_matrix((np.ones(k * m), (idx // m, idx)), shape=(k, k * m))
        A_col = coo_matrix((np.ones(k * m), (idx % m, idx)), shape=(m, k * m))
        A = vstack([A_row, A_col]).tocsr()
        # rescale the column marginal so both sum to exactly the same total
        rhs = np.concatenate([a, b * (a.sum() / b.sum())])
        res = linprog(C.ravel(), A_eq=A, b_eq=rhs, bounds=(0, None), method="highs-ds",
                      options={"primal_feasibility_tolerance": 1e-10,
                               "dual_feasibility_tolerance": 1e-10})
        if res.status != 0:
            raise RuntimeError(f"transport LP failed: {res.message}")
        sub = np.maximum(res.x.reshape(k, m), 0.0)
    plan[np.ix_(rows, cols)] = sub
    total = float(np.sum(C * sub))
    return total ** (1.0 / p), TransportPlan(plan, total)


def empirical(points, n_states=None):
    """Uniform average of Dirac masses at ``points``."""
    pts = np.asarray(points, dtype=int).ravel()
    if pts.size == 0:
        raise ValueError("empirical measure of an empty list")
    if n_states is None:
        n_states = int(pts.max()) + 1
    return np.bincount(pts, minlength=n_states).astype(float) / pts.size


def tv_distance(mu1, mu2):
    """Normalized total variation, in [0, 1]."""
    return 0.5 * float(np.abs(np.asarray(mu1, dtype=float) - np.asarray(mu2, dtype=float)).sum())
