"""Mean-field equilibria: best-response map, damped fixed-point iteration, certification."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ergomfg.ergodic import TOL_BELLMAN, bellman_report, solve_ergodic_rvi, q_values
from ergomfg.model import as_measure
from ergomfg.stationary import (
    StationaryControl,
    control_invariant,
    mix_controls,
    occupation,
)
from ergomfg.transport import tv_distance

TOL_INVARIANCE = 1e-8
TOL_SELECTOR = 1e-8


@dataclass
class MfgSolution:
    eta: np.ndarray
    value: np.ndarray
    rho: float
    selector: StationaryControl
    residuals: dict = field(default_factory=dict)
    certified: bool = False
    iterations: int = 0
    converged: bool = False

    def to_dict(self):
        return {
            "eta": self.eta.tolist(),
            "value": self.value.tolist(),
            "rho": self.rho,
            "selector": self.selector.tolist(),
            "residuals": dict(self.residuals),
            "certified": self.certified,
            "converged": self.converged,
            "iterations": self.iterations,
        }


@dataclass
class IterationTrace:
    rows: list = field(default_factory=list)  # (k, tv_step, rho, lambda)

    header = ("k", "tv_step", "rho", "lambda")

    def append(self, k, tv, rho, lam):
        self.rows.append((int(k), float(tv), float(rho), float(lam)))

    def __len__(self):
        return len(self.rows)


def damping_schedule(spec):
    """``"harmonic"`` gives 1/(k+1); a number gives a constant step."""
    if callable(spec):
        return spec
    if spec in (None, "harmonic"):
        return lambda k: 1.0 / (k + 1)
    lam = float(spec)
    if not 0 < lam <= 1:
        raise ValueError("constant damping must lie in (0, 1]")
    return lambda k: lam


def best_response(model, mu, solver=solve_ergodic_rvi):
    """One element of the best-response set: the invariant measure of the
    lowest-index minimizing selector for the cost frozen at ``mu``."""
    sol = solver(model, mu)
    return control_invariant(model, sol.selector), sol


def solve_mfg(model, mu0, damping="harmonic", max_iter=2000, tol_fp=1e-10,
              tol_bellman=TOL_BELLMAN, tol_inv=TOL_INVARIANCE, tol_sel=TOL_SELECTOR,
              jump=True):
    """Damped best-response iteration on measures, then independent certification.

    The control generating each iterate is carried along through
    ``mix_controls``; it is undefined until the first full step (damping 1),
    which the default harmonic schedule takes at k = 0.

    With ``jump=True``, whenever two consecutive best responses come from the
    same selector, its invariant measure is tested as a fixed point and, if it
    is one, the iteration jumps there. Damped averaging alone approaches such
    a point only at the rate of the damping.
    """
    sched = damping_schedule(damping)
    mu = as_measure(mu0, model.n_states, tol=1e-9)
    control = None
    trace = IterationTrace()
    converged = False
    k = 0
    prev_sel = None
    for k in range(max_iter):
        eta, sol = best_response(model, mu)
        if jump and sol.selector == prev_sel and tv_distance(mu, eta) > tol_fp:
            eta2, sol2 = best_response(model, eta)
            if sol2.selector == sol.selector:
                trace.append(k, tv_distance(mu, eta), sol.rho, 1.0)
                mu, control = eta, sol.selector
                converged = True
                break
        prev_sel = sol.selector
        lam = float(sched(k))
        if not 0 < lam <= 1:
            raise ValueError(f"damping {lam} at step {k} is outside (0, 1]")
        new_mu = (1 - lam) * mu + lam * eta
        new_mu = new_mu / new_mu.sum()
        if lam == 1.0:
            new_control = sol.selector
        elif control is not None:
            new_control, _ = mix_controls(control, sol.selector, 1 - lam, model, certify=False)
        else:
            new_control = None
        tv = tv_distance(mu, new_mu)
        trace.append(k, tv, sol.rho, lam)
        mu, control = new_mu, new_control
        if tv <= tol_fp * lam:
            converged = True
            break

    if control is None:
        control = best_response(model, mu)[1].selector
    fresh = solve_ergodic_rvi(model, mu)
    cand = MfgSolution(mu, fresh.value, fresh.rho, control, iterations=k + 1,
                       converged=converged)
    report = verify_mfg(model, cand, tol_bellman, tol_inv, tol_sel)
    cand.residuals = report.residuals
    cand.certified = report.certified
    return cand, trace


@dataclass
class MfgCertificate:
    residuals: dict
    certified: bool
    off_support_gap: float

    def to_dict(self):
        return {"residuals": dict(self.residuals), "certified": self.certified,
                "off_support_gap": self.off_support_gap}


def verify_mfg(model, cand, tol_bellman=TOL_BELLMAN, tol_inv=TOL_INVARIANCE,
               tol_sel=TOL_SELECTOR):
    """Recompute the ergodic problem at ``cand.eta`` and test the equilibrium conditions.

    Certification uses the Bellman residual of the candidate pair, the
    selector's optimality gap on the support of ``eta`` and the invariance
    of ``eta`` under the selector. The off-support gap and the distance to
    the deterministic best response are reported but not required.
    """
    eta = np.asarray(cand.eta, dtype=float)
    costs = model.cost_table(eta)
    fresh = solve_ergodic_rvi(model, eta)
    value = fresh.value if cand.value is None else np.asarray(cand.value)
    rho = fresh.rho if cand.rho is None else float(cand.rho)
    rep = bellman_report(model.P, costs, value, rho, cand.selector)
    on = eta > 0
    sel_res = float(np.abs(rep.selector_gap[on]).max())
    off = float(np.abs(rep.selector_gap[~on]).max()) if (~on).any() else 0.0
    inv = tv_distance(eta, control_invariant(model, cand.selector))
    fixed = tv_distance(eta, control_invariant(model, fresh.selector))
    residuals = {
        "bellman": rep.max_residual,
        "selector": sel_res,
        "invariance": inv,
        "fixed_point": fixed,
        "rho_recomputed_gap": abs(rho - fresh.rho),
    }
    ok = rep.max_residual <= tol_bellman and sel_res <= tol_sel and inv <= tol_inv
    return MfgCertificate(residuals, bool(ok), off)


@dataclass
class MonotonicityReport:
    values: list
    min_value: float
    max_value: float
    monotone_on_sample: bool

    def to_dict(self):
        return {"values": list(self.values), "min": self.min_value, "max": self.max_value,
                "monotone_on_sample": self.monotone_on_sample}


def check_monotonicity(model, samples, tol=1e-12):
    """Sign of the cost-difference integral against occupation-measure differences.

    For each pair of controls ``(v, w)`` with invariant measures ``eta, xi``
    computes ``sum_{x,u} [r(x,u,eta) - r(x,u,xi)] * [occ_v - occ_w](x,u)``.
    Nonnegative values on every pair with ``eta != xi`` is evidence (not
    proof) of equilibrium uniqueness.
    """
    vals = []
    mono = True
    for v, w in samples:
        ov, ow = occupation(model, v), occupation(model, w)
        eta, xi = ov.state_marginal, ow.state_marginal
        I = float(np.sum((model.cost_table(eta) - model.cost_table(xi)) * (ov.joint - ow.joint)))
        vals.append(I)
        if tv_distance(eta, xi) > tol and I < -tol:
            mono = False
    if not vals:
        raise ValueError("need at least one control pair")
    return MonotonicityReport(vals, min(vals), max(vals), mono)


def argmin_is_unique(model, mu, sol=None, tie_tol=1e-9):
    """Whether every state has a strict minimizer in the frozen Bellman bracket."""
    sol = sol or solve_ergodic_rvi(model, mu)
    Q = q_values(model.P, model.cost_table(mu), sol.value)
    s = np.sort(Q, axis=1)
    if Q.shape[1] < 2:
        return True
    return bool(np.all(s[:, 1] - s[:, 0] > tie_tol * (1 + np.abs(s[:, 0]))))
