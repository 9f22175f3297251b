"""Average-cost optimal control against a frozen measure.

Three routes to the ergodic Bellman pair ``(V, rho)`` with ``V[anchor] = 0``:
discounted problems (policy iteration), the vanishing-discount limit, and
relative value iteration. Every solver breaks argmin ties toward the lowest
action index so that selectors from different routes are comparable.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from ergomfg.errors import BudgetError, IterationError
from ergomfg.stationary import StationaryControl, average_cost_of_table, chain_from_probs

TOL_VI = 1e-10
TOL_BELLMAN = 1e-8
TOL_VD = 1e-7
DEFAULT_ALPHAS = (0.9, 0.99, 0.999, 0.9999)
TIE_TOL = 1e-9


@dataclass
class DiscountedSolution:
    value: np.ndarray
    alpha: float
    selector: StationaryControl
    residual: float
    iterations: int


@dataclass
class ErgodicSolution:
    value: np.ndarray
    rho: float
    selector: StationaryControl
    residual: float
    certified: bool
    method: str
    iterations: int = 0
    trace: list = field(default_factory=list)

    def to_dict(self):
        return {
            "value": self.value.tolist(),
            "rho": self.rho,
            "selector": self.selector.tolist(),
            "residual": self.residual,
            "certified": self.certified,
            "method": self.method,
            "iterations": self.iterations,
        }


def q_values(P, costs, V, alpha=1.0):
    return costs + alpha * (P @ V)


def greedy(Q, tie_tol=TIE_TOL):
    """Lowest action index whose value is within ``tie_tol`` of the row minimum."""
    m = Q.min(axis=1, keepdims=True)
    near = Q <= m + tie_tol * (1.0 + np.abs(m))
    return np.argmax(near, axis=1)


def _det(actions, n_actions):
    return StationaryControl.deterministic(actions, n_actions)


def _policy_slices(P, costs, actions):
    idx = np.arange(P.shape[0])
    return P[idx, actions], costs[idx, actions]


def evaluate_average(P, costs, probs, anchor):
    """Solve ``h + rho = r_v + P_v h`` with ``h[anchor] = 0`` for a fixed control.

    Raises ``numpy.linalg.LinAlgError`` if the control is not unichain.
    """
    n = P.shape[0]
    Pv = chain_from_probs(P, probs)
    rv = np.sum(costs * probs, axis=1)
    A = np.zeros((n + 1, n + 1))
    A[:n, :n] = np.eye(n) - Pv
    A[:n, n] = 1.0
    A[n, anchor] = 1.0
    sol = np.linalg.solve(A, np.concatenate([rv, [0.0]]))
    h = sol[:n]
    h[anchor] = 0.0
    return h, float(sol[n])


def _evaluate_relative_discounted(P, costs, actions, alpha, anchor):
    """``(V^a - V^a[anchor], (1-a) V^a[anchor])`` for a fixed policy, via a bordered system."""
    n = P.shape[0]
    Pv, rv = _policy_slices(P, costs, actions)
    A = np.zeros((n + 1, n + 1))
    A[:n, :n] = np.eye(n) - alpha * Pv
    A[:n, n] = 1.0
    A[n, anchor] = 1.0
    sol = np.linalg.solve(A, np.concatenate([rv, [0.0]]))
    h = sol[:n]
    h[anchor] = 0.0
    return h, float(sol[n])


def ergodic_residual(P, costs, V, rho):
    """Per-state residual of ``V + rho = min_u {r + P V}``."""
    return V + rho - q_values(P, costs, V).min(axis=1)


# ---------------------------------------------------------------------------
# discounted problem


def discounted_table(P, costs, alpha, tol=TOL_VI, max_iter=1000):
    if not 0 < alpha < 1:
        raise ValueError("discount factor must lie in (0, 1)")
    n, m = costs.shape
    actions = costs.argmin(axis=1)
    idx = np.arange(n)
    for it in range(1, max_iter + 1):
        Pv, rv = _policy_slices(P, costs, actions)
        V = np.linalg.solve(np.eye(n) - alpha * Pv, rv)
        Q = q_values(P, costs, V, alpha)
        best = Q.min(axis=1)
        # switch only on strict improvement, otherwise Howard's method can cycle on ties
        improve = Q[idx, actions] > best + tol * (1.0 + np.abs(best))
        if not improve.any():
            break
        actions = np.where(improve, Q.argmin(axis=1), actions)
    else:
        raise IterationError(f"policy iteration did not settle in {max_iter} steps")
    sel = greedy(Q)
    residual = float(np.abs(V - best).max())
    return DiscountedSolution(V, alpha, _det(sel, m), residual, it)


def solve_discounted(model, mu, alpha, tol=TOL_VI, max_iter=1000):
    """Fixed point of the alpha-discounted Bellman operator for the frozen cost at ``mu``."""
    return discounted_table(model.P, model.cost_table(mu), alpha, tol, max_iter)


# ---------------------------------------------------------------------------
# vanishing discount


def _neville_at_zero(eps, values):
    """Polynomial extrapolation of ``values(eps)`` to ``eps = 0``."""
    eps = list(eps)
    tab = [np.asarray(v, dtype=float) for v in values]
    k = len(eps)
    for j in range(1, k):
        tab = [
            (eps[i] * tab[i + 1] - eps[i + j] * tab[i]) / (eps[i] - eps[i + j])
            for i in range(k - j)
        ]
    return tab[0]


def vanishing_discount_table(P, costs, anchor, alphas=DEFAULT_ALPHAS, tol_vd=TOL_VD,
                             tol_bellman=TOL_BELLMAN, max_points=4):
    alphas = [float(a) for a in alphas]
    if not alphas or any(not 0 < a < 1 for a in alphas):
        raise ValueError("discount factors must lie in (0, 1)")
    if any(b <= a for a, b in zip(alphas, alphas[1:])):
        raise ValueError("discount factors must be increasing")
    if alphas[-1] < 0.999:
        raise ValueError("the last discount factor must be at least 0.999")
    m = costs.shape[1]

    points = []  # (eps, h, rho, actions)
    trace = []
    for a in alphas:
        ds = discounted_table(P, costs, a)
        h, rho = _evaluate_relative_discounted(P, costs, ds.selector.actions, a, anchor)
        points.append((1 - a, h, rho, tuple(ds.selector.actions)))
        trace.append((len(trace), float(ds.residual), rho))

    # extrapolate over the finest points sharing the final discounted selector
    tail = [pt for pt in points if pt[3] == points[-1][3]][-max_points:]

    def extrapolate(pts):
        eps = [pt[0] for pt in pts]
        return (float(_neville_at_zero(eps, [pt[2] for pt in pts])),
                _neville_at_zero(eps, [pt[1] for pt in pts]))

    rho, V = extrapolate(tail)
    V = np.array(V)
    V[anchor] = 0.0
    converged = False
    if len(tail) > 1:
        # compare against the lower-order extrapolant that drops the coarsest point
        prev_rho, prev_V = extrapolate(tail[1:])
        step = max(abs(rho - prev_rho), float(np.abs(V - prev_V).max()))
        converged = step <= tol_vd
    res = float(np.abs(ergodic_residual(P, costs, V, rho)).max())
    sel = greedy(q_values(P, costs, V))
    return ErgodicSolution(V, rho, _det(sel, m), res, bool(converged and res <= tol_bellman),
                           "vanishing-discount", len(alphas), trace)


def solve_ergodic_vanishing_discount(model, mu, alphas=DEFAULT_ALPHAS, tol_vd=TOL_VD,
                                     tol_bellman=TOL_BELLMAN):
    """Ergodic pair as the limit of relative discounted values as alpha -> 1.

    Along the given discount factors the relative values and ``(1 - alpha)
    V^alpha(anchor)`` are extrapolated polynomially in ``1 - alpha``. An
    unconverged sequence still returns its best estimate with
    ``certified=False``.
    """
    return vanishing_discount_table(model.P, model.cost_table(mu), model.anchor, alphas,
                                    tol_vd, tol_bellman)


# ---------------------------------------------------------------------------
# relative value iteration


def rvi_table(P, costs, anchor, tol=TOL_VI, max_iter=200_000, v0=None,
              tol_bellman=TOL_BELLMAN, polish=True):
    n, m = costs.shape
    V = np.zeros(n) if v0 is None else np.array(v0, dtype=float)
    V = V - V[anchor]
    trace = []
    for it in range(1, max_iter + 1):
        TV = q_values(P, costs, V).min(axis=1)
        diff = TV - V
        span = float(diff.max() - diff.min())
        trace.append((it, span, float(0.5 * (diff.max() + diff.min()))))
        V = TV - TV[anchor]
        if span <= tol:
            break
    else:
        raise IterationError(
            f"relative value iteration did not converge in {max_iter} sweeps "
            "(try the vanishing-discount solver)"
        )
    rho = trace[-1][2]
    sel = greedy(q_values(P, costs, V))
    res = float(np.abs(ergodic_residual(P, costs, V, rho)).max())

    if polish:
        # exact evaluation of the greedy policy removes the iteration error
        for _ in range(n * m + 1):
            try:
                h, r = evaluate_average(P, costs, _det(sel, m).probs, anchor)
            except np.linalg.LinAlgError:
                break
            new_res = float(np.abs(ergodic_residual(P, costs, h, r)).max())
            new_sel = greedy(q_values(P, costs, h))
            if new_res <= res:
                V, rho, res = h, r, new_res
            if np.array_equal(new_sel, sel):
                break
            sel = new_sel
        sel = greedy(q_values(P, costs, V))
    return ErgodicSolution(V, rho, _det(sel, m), res, res <= tol_bellman, "rvi", it, trace)


def solve_ergodic_rvi(model, mu, tol=TOL_VI, max_iter=200_000, v0=None,
                      tol_bellman=TOL_BELLMAN):
    """Relative value iteration with span stopping, anchored at ``model.anchor``."""
    return rvi_table(model.P, model.cost_table(mu), model.anchor, tol, max_iter, v0,
                     tol_bellman)


# ---------------------------------------------------------------------------
# certification


@dataclass
class BellmanReport:
    residual: np.ndarray
    max_residual: float
    selector_gap: np.ndarray

    def to_dict(self):
        return {"residual": self.residual.tolist(), "max_residual": self.max_residual,
                "selector_gap": self.selector_gap.tolist()}


def bellman_report(P, costs, value, rho, selector):
    Q = q_values(P, costs, value)
    res = value + rho - Q.min(axis=1)
    gap = np.sum(selector.probs * Q, axis=1) - Q.min(axis=1)
    return BellmanReport(res, float(np.abs(res).max()), gap)


def verify_ergodic_equation(model, mu, sol):
    return bellman_report(model.P, model.cost_table(mu), sol.value, sol.rho, sol.selector)


def iter_deterministic_policies(n_states, n_actions, budget=None):
    total = n_actions ** n_states
    if budget is not None and total > budget:
        raise BudgetError(f"{total} deterministic policies exceed the budget {budget}")
    for acts in itertools.product(range(n_actions), repeat=n_states):
        yield np.array(acts, dtype=int)


@dataclass
class FirstReturnReport:
    residual: np.ndarray
    max_residual: float
    mode: str  # "enumerated" or "one-sided"
    n_policies: int
    skipped: int

    def to_dict(self):
        return {"residual": self.residual.tolist(), "max_residual": self.max_residual,
                "mode": self.mode, "n_policies": self.n_policies, "skipped": self.skipped}


def _first_return_values(P, costs, rho, V, actions, outside, ball):
    """E_x[sum_{i<tau}(r - rho) + V(X_tau)] for x outside the ball, tau = first entry time."""
    Pv, rv = _policy_slices(P, costs, actions)
    A = np.eye(outside.size) - Pv[np.ix_(outside, outside)]
    b = rv[outside] - rho + Pv[np.ix_(outside, ball)] @ V[ball]
    return np.linalg.solve(A, b)


def verify_first_return_representation(model, mu, sol, ball, budget=4096):
    """Check V(x) against the first-entry-time representation over deterministic controls.

    Only the actions on states outside ``ball`` matter, so the enumeration
    runs over ``n_actions ** (#outside)`` policies. Above ``budget`` only
    the solution's own selector is evaluated (one-sided mode).
    """
    n, m = model.n_states, model.n_actions
    ball = np.array(sorted(set(int(b) for b in ball)), dtype=int)
    if ball.size == 0:
        raise ValueError("ball must be nonempty")
    if model.anchor not in ball:
        raise ValueError("ball must contain the anchor state")
    outside = np.setdiff1d(np.arange(n), ball)
    if outside.size == 0:
        return FirstReturnReport(np.zeros(n), 0.0, "enumerated", 0, 0)
    P, costs, V = model.P, model.cost_table(mu), sol.value

    base = np.array(sol.selector.actions)
    if m ** outside.size <= budget:
        best = np.full(outside.size, np.inf)
        count = skipped = 0
        for sub in itertools.product(range(m), repeat=outside.size):
            acts = base.copy()
            acts[outside] = sub
            count += 1
            try:
                w = _first_return_values(P, costs, sol.rho, V, acts, outside, ball)
            except np.linalg.LinAlgError:
                # the ball is not reached almost surely under this policy
                skipped += 1
                continue
            best = np.minimum(best, w)
        mode = "enumerated"
    else:
        best = _first_return_values(P, costs, sol.rho, V, base, outside, ball)
        count, skipped, mode = 1, 0, "one-sided"
    residual = np.zeros(n)
    residual[outside] = V[outside] - best
    return FirstReturnReport(residual, float(np.abs(residual).max()), mode, count, skipped)


@dataclass
class SelectorReport:
    gap: float
    support_residual: float
    off_support_residual: float
    consistent: bool

    def to_dict(self):
        return dict(self.__dict__)


def verify_selector_characterization(model, mu, sol, candidate, tol=1e-8):
    """Optimality gap of ``candidate`` versus its Bellman-selector residual on its support."""
    P, costs = model.P, model.cost_table(mu)
    avg, eta = average_cost_of_table(P, costs, candidate.probs)
    gap = avg - sol.rho
    Q = q_values(P, costs, sol.value)
    pointwise = np.sum(candidate.probs * Q, axis=1) - (sol.value + sol.rho)
    on = eta > 0
    sup_res = float(np.abs(pointwise[on]).max())
    off_res = float(np.abs(pointwise[~on]).max()) if (~on).any() else 0.0
    # gap = sum_x eta(x) * pointwise(x) with pointwise >= 0 up to rounding
    consistent = (abs(gap) <= tol) == (sup_res <= tol / eta[on].min())
    return SelectorReport(float(gap), sup_res, off_res, bool(consistent))
