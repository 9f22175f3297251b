"""Finite game model: state space, controlled kernel, mean-field cost, Lyapunov data.

The checks in this module evaluate the standing stability assumptions
(drift, minorization, regularity of the cost in the measure) on a concrete
finite instance. Everything is exact linear algebra up to floating point.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ergomfg.errors import ModelError

PROB_TOL = 1e-12
FILE_ROW_TOL = 1e-9
DRIFT_TOL = 1e-10


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def as_measure(mu, n=None, tol=PROB_TOL):
    """Validate and return ``mu`` as a float vector on the simplex."""
    mu = np.asarray(mu, dtype=float)
    if mu.ndim != 1:
        raise ValueError("measure must be a 1-D vector")
    if n is not None and mu.shape[0] != n:
        raise ValueError(f"measure has {mu.shape[0]} entries, expected {n}")
    if np.any(mu < -tol) or abs(mu.sum() - 1.0) > tol * max(1, mu.shape[0]):
        raise ValueError("measure must be nonnegative and sum to 1")
    return mu


def dirac(n, s):
    mu = np.zeros(n)
    mu[s] = 1.0
    return mu


@dataclass(frozen=True)
class StateSpace:
    n_states: int
    metric: np.ndarray
    anchor: int = 0

    def __post_init__(self):
        n = int(self.n_states)
        if n < 1:
            raise ModelError("n_states must be positive")
        d = np.asarray(self.metric, dtype=float)
        if d.shape != (n, n):
            raise ModelError(f"metric must be {n}x{n}, got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ModelError("metric entries must be finite")
        if not np.array_equal(d, d.T):
            raise ModelError("metric must be symmetric")
        if np.any(np.diag(d) != 0):
            raise ModelError("metric must have a zero diagonal")
        off = ~np.eye(n, dtype=bool)
        if np.any(d[off] <= 0):
            raise ModelError("metric must be positive off the diagonal")
        # d[i,k] <= d[i,j] + d[j,k] for all triples
        viol = d[:, None, :] - (d[:, :, None] + d[None, :, :])
        if n and viol.max() > 1e-12 * max(1.0, d.max()):
            raise ModelError("metric violates the triangle inequality")
        if not 0 <= int(self.anchor) < n:
            raise ModelError("anchor must be a state index")
        object.__setattr__(self, "n_states", n)
        object.__setattr__(self, "anchor", int(self.anchor))
        object.__setattr__(self, "metric", _frozen(d))

    @classmethod
    def line(cls, n, anchor=0):
        idx = np.arange(n)
        return cls(n, np.abs(idx[:, None] - idx[None, :]).astype(float), anchor)

    @classmethod
    def discrete(cls, n, anchor=0):
        return cls(n, 1.0 - np.eye(n), anchor)

    def moment(self, mu, q):
        """Integral of d(y, anchor)^q against ``mu``."""
        return float(np.dot(self.metric[self.anchor] ** q, mu))

    @property
    def diameter(self):
        return float(self.metric.max())


@dataclass(frozen=True)
class ControlledKernel:
    """Transition law ``probs[x, u, y] = P(y | x, u)``."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise ModelError("kernel must have shape (n_states, n_actions, n_states)")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ModelError("kernel entries must be finite and nonnegative")
        if np.max(np.abs(p.sum(axis=2) - 1.0)) > PROB_TOL:
            raise ModelError("every kernel row must sum to 1")
        object.__setattr__(self, "probs", _frozen(p))

    @property
    def n_states(self):
        return self.probs.shape[0]

    @property
    def n_actions(self):
        return self.probs.shape[1]


@dataclass(frozen=True)
class LyapunovData:
    v_fn: np.ndarray
    small_set: tuple
    beta1: float
    beta2: float
    minor_measure: np.ndarray
    gamma: float

    def __post_init__(self):
        v = np.asarray(self.v_fn, dtype=float)
        if v.ndim != 1 or np.any(v < 1):
            raise ModelError("Lyapunov function must be a vector with entries >= 1")
        C = tuple(sorted({int(c) for c in self.small_set}))
        if not C or C[0] < 0 or C[-1] >= v.shape[0]:
            raise ModelError("small set must be a nonempty set of state indices")
        if self.beta1 <= 0 or self.beta2 <= 0:
            raise ModelError("beta1 and beta2 must be positive")
        if not 0 < self.gamma < 1:
            raise ModelError("gamma must lie in (0, 1)")
        nu = as_measure(self.minor_measure, v.shape[0])
        outside = np.ones(v.shape[0], dtype=bool)
        outside[list(C)] = False
        if nu[outside].sum() > PROB_TOL:
            raise ModelError("minorizing measure must be supported in the small set")
        object.__setattr__(self, "v_fn", _frozen(v))
        object.__setattr__(self, "small_set", C)
        object.__setattr__(self, "minor_measure", _frozen(nu))
        object.__setattr__(self, "beta1", float(self.beta1))
        object.__setattr__(self, "beta2", float(self.beta2))
        object.__setattr__(self, "gamma", float(self.gamma))

    def in_small_set(self, n):
        mask = np.zeros(n, dtype=bool)
        mask[list(self.small_set)] = True
        return mask


@dataclass(frozen=True)
class CostFunction:
    """Mean-field running cost r(x, u, mu).

    ``table(mu)`` returns the full ``(n_states, n_actions)`` array for one
    measure; the scalar call form is a convenience over it.
    """

    kind: str
    table_fn: Callable[[np.ndarray], np.ndarray]
    n_states: int
    n_actions: int
    r1: np.ndarray | None = None
    phi: np.ndarray | None = None
    outer: dict | None = None
    g0: np.ndarray | None = None
    g1: np.ndarray | None = None

    def table(self, mu):
        return np.asarray(self.table_fn(np.asarray(mu, dtype=float)), dtype=float)

    def __call__(self, x, u, mu):
        return float(self.table(mu)[x, u])


def _check_r1_phi(r1, phi):
    r1 = np.asarray(r1, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if r1.ndim != 2:
        raise ModelError("r1 must be a state x action matrix")
    n = r1.shape[0]
    if phi.shape != (n, n):
        raise ModelError(f"phi must be {n}x{n}")
    if not (np.all(np.isfinite(r1)) and np.all(np.isfinite(phi))):
        raise ModelError("cost entries must be finite")
    return r1, phi


def make_affine_cost(r1, phi, g0=None, g1=None):
    """Cost ``r1[x, u] + sum_y phi[x, y] mu[y]``."""
    r1, phi = _check_r1_phi(r1, phi)
    # the affine form is minimized over the simplex at a vertex
    worst = r1 + phi.min(axis=1)[:, None]
    if worst.min() < 0:
        x, u = np.unravel_index(np.argmin(worst), worst.shape)
        raise ModelError(f"cost is negative at a simplex vertex (x={x}, u={u})")
    r1, phi = _frozen(r1), _frozen(phi)
    if g0 is None:
        g0 = r1.max(axis=1)
    if g1 is None:
        g1 = np.maximum(phi, 0).max(axis=0)

    def table_fn(mu):
        return r1 + (phi @ mu)[:, None]

    n, m = r1.shape
    return CostFunction("tabular-affine", table_fn, n, m, r1=r1, phi=phi,
                        g0=_frozen(g0), g1=_frozen(g1))


def _power_outer(spec):
    scale = float(spec.get("scale", 1.0))
    expo = float(spec.get("exponent", 1.0))
    if scale < 0 or expo <= 0:
        raise ModelError("power outer map needs scale >= 0 and exponent > 0")
    return lambda z: scale * np.power(np.maximum(z, 0.0), expo)


OUTER_FORMS = {"power": _power_outer}


def make_interaction_cost(r1, phi, outer):
    """Cost ``r1[x, u] + R(zeta(x, mu))`` with ``zeta(x, mu) = sum_y phi[x, y] mu[y]``.

    ``outer`` is either a callable ``R`` acting elementwise on arrays, or a
    dict such as ``{"form": "power", "scale": 2.0, "exponent": 2}``. Only the
    dict form can be written to a model file.
    """
    r1, phi = _check_r1_phi(r1, phi)
    if np.any(phi < 0):
        raise ModelError("interaction kernel phi must be nonnegative")
    if isinstance(outer, dict):
        form = outer.get("form")
        if form not in OUTER_FORMS:
            raise ModelError(f"unknown outer form {form!r}")
        R = OUTER_FORMS[form](outer)
        spec = dict(outer)
    else:
        R, spec = outer, None
    r1, phi = _frozen(r1), _frozen(phi)

    def table_fn(mu):
        return r1 + np.asarray(R(phi @ mu), dtype=float)[:, None]

    # R is evaluated on zeta in [min phi, max phi]; check on the vertices and a grid
    z = np.linspace(phi.min(), phi.max(), 65)
    if (r1.min() + np.min(R(z))) < 0:
        raise ModelError("interaction cost can be negative")
    n, m = r1.shape
    return CostFunction("interaction-kernel", table_fn, n, m, r1=r1, phi=phi, outer=spec)


def make_general_cost(fn, n_states, n_actions):
    """Wrap an arbitrary ``fn(mu) -> (n_states, n_actions)`` array. Not file-serializable."""
    return CostFunction("general", fn, n_states, n_actions)


@dataclass(frozen=True)
class MfgModel:
    space: StateSpace
    n_actions: int
    kernel: ControlledKernel
    cost: CostFunction
    lyapunov: LyapunovData
    p_order: float = 1.0
    q_order: float = 1.0
    name: str = "model"
    load_notes: tuple = field(default=(), compare=False)

    def __post_init__(self):
        n = self.space.n_states
        if (self.kernel.n_states, self.kernel.n_actions) != (n, self.n_actions):
            raise ModelError(
                f"kernel shape {self.kernel.probs.shape[:2]} does not match "
                f"({n}, {self.n_actions})"
            )
        if (self.cost.n_states, self.cost.n_actions) != (n, self.n_actions):
            raise ModelError("cost dimensions do not match the model")
        if self.lyapunov.v_fn.shape[0] != n:
            raise ModelError("Lyapunov function has the wrong length")
        if not (self.p_order >= 1 and 1 <= self.q_order <= self.p_order):
            raise ModelError("orders must satisfy 1 <= q <= p")

    @property
    def n_states(self):
        return self.space.n_states

    @property
    def anchor(self):
        return self.space.anchor

    @property
    def P(self):
        return self.kernel.probs

    def cost_table(self, mu):
        return self.cost.table(as_measure(mu, self.n_states, tol=1e-9))

    def with_cost(self, cost):
        return MfgModel(self.space, self.n_actions, self.kernel, cost, self.lyapunov,
                        self.p_order, self.q_order, self.name, self.load_notes)


# ---------------------------------------------------------------------------
# assumption checks


@dataclass
class DriftReport:
    passed: bool
    slack: np.ndarray
    lhs: np.ndarray
    separation_ok: bool
    separation_lhs: float
    separation_rhs: float
    relaxed_separation: bool = False

    def to_dict(self):
        return {
            "passed": self.passed,
            "slack": self.slack.tolist(),
            "lhs": self.lhs.tolist(),
            "separation_ok": self.separation_ok,
            "separation_lhs": self.separation_lhs,
            "separation_rhs": self.separation_rhs,
            "relaxed_separation": self.relaxed_separation,
        }


def check_drift(model, relax_separation=False, tol=DRIFT_TOL):
    """Evaluate the Foster-Lyapunov drift inequality state by state.

    ``slack[x]`` is the left side minus the allowed bound, so the condition
    holds at ``x`` iff ``slack[x] <= tol``.
    """
    lyap = model.lyapunov
    n = model.n_states
    V = lyap.v_fn
    inC = lyap.in_small_set(n)
    lhs = (model.P @ V).max(axis=1) - V
    bound = np.where(inC, lyap.beta2, -lyap.beta1 * V)
    slack = lhs - bound

    sep_rhs = max(V[inC].max(), 2 * lyap.beta2 / lyap.beta1)
    sep_lhs = float(V[~inC].min()) if (~inC).any() else float("inf")
    sep_ok = sep_lhs >= sep_rhs - tol
    passed = bool(np.all(slack <= tol) and (sep_ok or relax_separation))
    return DriftReport(passed, slack, lhs, bool(sep_ok), sep_lhs, float(sep_rhs),
                       relaxed_separation=bool(relax_separation and not sep_ok))


@dataclass
class MinorReport:
    gamma_star: float
    declared_gamma: float
    passed: bool
    argmin: tuple

    def to_dict(self):
        return {"gamma_star": self.gamma_star, "declared_gamma": self.declared_gamma,
                "passed": self.passed, "argmin": list(self.argmin)}


def check_minorization(model):
    """Largest gamma with ``P(.|x,u) >= gamma * nu`` for all x in C and all u."""
    lyap = model.lyapunov
    nu = lyap.minor_measure
    if nu[~lyap.in_small_set(model.n_states)].sum() > PROB_TOL:
        raise ModelError("minorizing measure is not supported in the small set")
    supp = np.flatnonzero(nu > 0)
    C = list(lyap.small_set)
    ratios = model.P[C][:, :, supp] / nu[supp]
    k = np.unravel_index(np.argmin(ratios), ratios.shape)
    g = float(ratios[k])
    argmin = (C[k[0]], int(k[1]), int(supp[k[2]]))
    return MinorReport(g, lyap.gamma, bool(g > 0 and g >= lyap.gamma), argmin)


@dataclass
class RegularityReport:
    max_lipschitz_ratio: float
    max_drop_one: float
    growth_ok: bool | None
    n_pairs: int

    def to_dict(self):
        return {"max_lipschitz_ratio": self.max_lipschitz_ratio,
                "max_drop_one": self.max_drop_one,
                "growth_ok": self.growth_ok, "n_pairs": self.n_pairs}


def check_cost_regularity(model, trial_measures, n_list=(2, 5, 10, 50), n_samples=20,
                          seed=0):
    """Empirical Lipschitz-in-measure and drop-one constants of the cost.

    The Lipschitz ratio divides the cost difference by the moment factor
    ``(1 + m_q(mu1) + m_q(mu2))^((q-1)/q)`` times the order-q transport
    distance. The drop-one constant is ``N * |r(emp_N) - r(emp_{N-1})|``
    where the second measure drops the last point.
    """
    from ergomfg.transport import empirical, wasserstein

    if not trial_measures:
        raise ValueError("need at least one trial measure pair")
    sp = model.space
    q = model.q_order
    qexp = (q - 1) / q
    best = 0.0
    for mu1, mu2 in trial_measures:
        diff = np.abs(model.cost_table(mu1) - model.cost_table(mu2)).max()
        if diff == 0:
            continue
        dist, _ = wasserstein(mu1, mu2, q, sp.metric)
        factor = (1 + sp.moment(mu1, q) + sp.moment(mu2, q)) ** qexp
        if dist <= 0:
            best = float("inf")
            continue
        best = max(best, diff / (factor * dist))

    rng = np.random.default_rng(seed)
    drop = 0.0
    growth_ok = None if model.cost.g0 is None else True
    for N in n_list:
        for _ in range(n_samples):
            pts = rng.integers(0, model.n_states, size=N)
            full = model.cost_table(empirical(pts, model.n_states))
            if N > 1:
                part = model.cost_table(empirical(pts[:-1], model.n_states))
                drop = max(drop, N * float(np.abs(full - part).max()))
            if growth_ok is not None:
                cap = model.cost.g0[:, None] + model.cost.g1[pts].mean()
                growth_ok = growth_ok and bool(np.all(full <= cap + 1e-12))
    return RegularityReport(float(best), float(drop), growth_ok, len(trial_measures))


def affine_lipschitz_constant(cost, metric):
    """Transport-Lipschitz constant of an affine cost in the order-1 distance."""
    phi = cost.phi
    d = np.asarray(metric, dtype=float)
    n = d.shape[0]
    if n == 1:
        return 0.0
    off = ~np.eye(n, dtype=bool)
    lip = np.abs(phi[:, :, None] - phi[:, None, :])[:, off] / d[off]
    return float(lip.max())


def cost_range(model):
    """max - min of the cost over states, actions and Dirac measures."""
    vals = np.stack([model.cost_table(dirac(model.n_states, s)) for s in range(model.n_states)])
    return float(vals.max() - vals.min())


def control_distance(v1, v2):
    """Max over states of the total variation between action distributions."""
    a = np.asarray(getattr(v1, "probs", v1), dtype=float)
    b = np.asarray(getattr(v2, "probs", v2), dtype=float)
    return float(0.5 * np.abs(a - b).sum(axis=1).max())


# ---------------------------------------------------------------------------
# model files


def model_from_dict(doc, name=None):
    """Build a model from a parsed model document.

    Kernel rows within 1e-9 of stochastic are renormalized and the largest
    correction is recorded in ``load_notes``.
    """
    try:
        st = doc["states"]
        n = int(st["n"])
        space = StateSpace(n, st["metric"], st.get("anchor", 0))
        m = int(doc["actions"])
        P = np.asarray(doc["kernel"], dtype=float)
        if P.shape != (n, m, n):
            raise ModelError(f"kernel must have shape ({n}, {m}, {n}), got {P.shape}")
        if np.any(P < 0):
            raise ModelError("kernel entries must be nonnegative")
        sums = P.sum(axis=2)
        err = float(np.abs(sums - 1).max())
        if err > FILE_ROW_TOL:
            raise ModelError(f"kernel rows deviate from 1 by {err:.3g}")
        notes = []
        if err > 0:
            P = P / sums[:, :, None]
            notes.append(f"kernel rows renormalized (max correction {err:.3g})")
        kernel = ControlledKernel(P)

        c = doc["cost"]
        kind = c.get("kind")
        if kind == "tabular-affine":
            cost = make_affine_cost(c["r1"], c["phi"], c.get("g0"), c.get("g1"))
        elif kind == "interaction-kernel":
            cost = make_interaction_cost(c["r1"], c["phi"], c["outer"])
        else:
            raise ModelError(f"cost kind {kind!r} cannot be loaded from a file")

        ly = doc["lyapunov"]
        lyap = LyapunovData(ly["v"], ly["C"], ly["beta1"], ly["beta2"], ly["nu"], ly["gamma"])
        orders = doc.get("orders", {})
        return MfgModel(space, m, kernel, cost, lyap,
                        float(orders.get("p", 1.0)), float(orders.get("q", 1.0)),
                        name=name or doc.get("name", "model"), load_notes=tuple(notes))
    except KeyError as exc:
        raise ModelError(f"model document is missing field {exc}") from None


def model_to_dict(model):
    c = model.cost
    if c.kind == "tabular-affine":
        cost = {"kind": c.kind, "r1": c.r1.tolist(), "phi": c.phi.tolist()}
    elif c.kind == "interaction-kernel" and c.outer is not None:
        cost = {"kind": c.kind, "r1": c.r1.tolist(), "phi": c.phi.tolist(), "outer": c.outer}
    else:
        raise ModelError("general costs cannot be written to a model file")
    ly = model.lyapunov
    return {
        "name": model.name,
        "states": {"n": model.n_states, "metric": model.space.metric.tolist(),
                   "anchor": model.anchor},
        "actions": model.n_actions,
        "kernel": model.P.tolist(),
        "cost": cost,
        "lyapunov": {"v": ly.v_fn.tolist(), "C": list(ly.small_set), "beta1": ly.beta1,
                     "beta2": ly.beta2, "nu": ly.minor_measure.tolist(), "gamma": ly.gamma},
        "orders": {"p": model.p_order, "q": model.q_order},
    }


def load_model(path):
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    return model_from_dict(doc, name=doc.get("name", path.stem))


def save_model(model, path):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=2)
        fh.write("\n")
