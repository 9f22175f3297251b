"""Stationary Markov controls, their chains, invariant and occupation measures."""

from __future__ import annotations

from dataclasses import dataclass
from math import gcd

import numpy as np
from scipy.sparse.csgraph import connected_components

from ergomfg.errors import NonUniqueInvariant
from ergomfg.model import PROB_TOL
from ergomfg.transport import tv_distance

INVARIANT_RESIDUAL_TOL = 1e-10
MIX_CERT_TOL = 1e-9


@dataclass(frozen=True)
class StationaryControl:
    """Per-state distribution over actions; one-hot rows make it deterministic."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 2:
            raise ValueError("control must be a (n_states, n_actions) array")
        if np.any(p < -PROB_TOL) or np.max(np.abs(p.sum(axis=1) - 1.0)) > PROB_TOL:
            raise ValueError("each control row must be a probability vector")
        p = np.maximum(p, 0.0)
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @classmethod
    def deterministic(cls, actions, n_actions):
        actions = np.asarray(actions, dtype=int)
        p = np.zeros((actions.size, n_actions))
        p[np.arange(actions.size), actions] = 1.0
        return cls(p)

    @classmethod
    def uniform(cls, n_states, n_actions):
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @property
    def n_states(self):
        return self.probs.shape[0]

    @property
    def n_actions(self):
        return self.probs.shape[1]

    @property
    def is_deterministic(self):
        return bool(np.all((self.probs == 0) | (self.probs == 1)))

    @property
    def actions(self):
        """Most likely action per state (the action itself for deterministic controls)."""
        return np.argmax(self.probs, axis=1)

    def tolist(self):
        return self.probs.tolist()

    def __eq__(self, other):
        return isinstance(other, StationaryControl) and np.array_equal(self.probs, other.probs)

    def __hash__(self):
        return hash(self.probs.tobytes())


@dataclass(frozen=True)
class OccupationMeasure:
    joint: np.ndarray

    @property
    def state_marginal(self):
        return self.joint.sum(axis=1)


def chain_from_probs(P, probs):
    """``sum_u probs[x, u] P[x, u, :]`` for a raw kernel array."""
    return np.einsum("xu,xuy->xy", probs, P)


def induced_chain(model, v):
    probs = v.probs if isinstance(v, StationaryControl) else np.asarray(v, dtype=float)
    if probs.shape != (model.n_states, model.n_actions):
        raise ValueError("control dimensions do not match the model")
    return chain_from_probs(model.P, probs)


def recurrent_classes(chain):
    """Closed communicating classes of the support graph of ``chain``."""
    chain = np.asarray(chain)
    adj = chain > 0
    k, labels = connected_components(adj, directed=True, connection="strong")
    classes = []
    for c in range(k):
        members = np.flatnonzero(labels == c)
        leaving = adj[members][:, labels != c].any()
        if not leaving:
            classes.append(members)
    return classes


def period(chain, members):
    """Period of the communicating class ``members`` (1 means aperiodic)."""
    adj = np.asarray(chain) > 0
    members = list(members)
    inside = set(members)
    level = {members[0]: 0}
    frontier = [members[0]]
    g = 0
    while frontier:
        nxt = []
        for x in frontier:
            for y in np.flatnonzero(adj[x]):
                y = int(y)
                if y not in inside:
                    continue
                if y in level:
                    g = gcd(g, level[x] + 1 - level[y])
                else:
                    level[y] = level[x] + 1
                    nxt.append(y)
        frontier = nxt
    return abs(g) if g else 0


def invariant_measure(chain):
    """Unique invariant probability vector of a row-stochastic matrix.

    One balance equation is replaced by the normalization and the system is
    solved directly. Raises ``NonUniqueInvariant`` when the chain has more
    than one recurrent class.
    """
    chain = np.asarray(chain, dtype=float)
    n = chain.shape[0]
    classes = recurrent_classes(chain)
    if len(classes) != 1:
        raise NonUniqueInvariant(
            f"chain has {len(classes)} recurrent classes", [c.tolist() for c in classes]
        )
    A = chain.T - np.eye(n)
    A[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    eta = np.linalg.solve(A, b)
    # transient states carry no mass; clear rounding noise there
    eta[np.setdiff1d(np.arange(n), classes[0])] = 0.0
    eta = np.maximum(eta, 0.0)
    return eta / eta.sum()


def invariant_residual(chain, eta):
    return float(np.abs(eta @ chain - eta).max())


def control_invariant(model, v):
    return invariant_measure(induced_chain(model, v))


def mix_controls(v1, v2, theta, model, certify=True):
    """Control whose invariant measure is ``theta*eta1 + (1-theta)*eta2``.

    On states outside the support of the mixture the row of ``v1`` is used.
    """
    if not 0 <= theta <= 1:
        raise ValueError("theta must lie in [0, 1]")
    eta1 = control_invariant(model, v1)
    eta2 = control_invariant(model, v2)
    w1 = theta * eta1
    w2 = (1 - theta) * eta2
    denom = w1 + w2
    probs = np.array(v1.probs)
    on = denom > 0
    probs[on] = (w1[on, None] * v1.probs[on] + w2[on, None] * v2.probs[on]) / denom[on, None]
    probs /= probs.sum(axis=1, keepdims=True)
    v = StationaryControl(probs)
    eta = denom / denom.sum()
    if certify:
        tv = tv_distance(control_invariant(model, v), eta)
        if tv > MIX_CERT_TOL:
            raise RuntimeError(f"mixed control misses the measure mixture by TV {tv:.3g}")
    return v, eta


def occupation(model, v):
    eta = control_invariant(model, v)
    return OccupationMeasure(eta[:, None] * v.probs)


def average_cost_of_table(P, costs, probs):
    """Long-run average of a frozen cost table under a control, with its invariant measure."""
    eta = invariant_measure(chain_from_probs(P, probs))
    return float(np.sum(costs * probs * eta[:, None])), eta


def long_run_average(model, v, mu):
    """Ergodic cost of ``v`` when the environment is frozen at ``mu``."""
    joint = occupation(model, v).joint
    return float(np.sum(model.cost_table(mu) * joint))
