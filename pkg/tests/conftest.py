import itertools
from importlib import resources

import numpy as np
import pytest

from ergomfg.model import check_drift, check_minorization, load_model, model_from_dict
from ergomfg.stationary import StationaryControl, average_cost_of_table

SHIPPED = ("crowd_aversion", "crowd_aversion_quadratic", "mu_independent")


def shipped_path(name):
    return str(resources.files("ergomfg") / "models" / f"{name}.json")


def shipped(name):
    return load_model(shipped_path(name))


def model_doc(P, r1, phi=None, metric=None, anchor=0, v=None, C=None, nu=None, gamma=None,
              beta1=0.5, beta2=1.0, outer=None, name="test"):
    """Model document with a vacuous drift (C = all states) unless told otherwise."""
    P = np.asarray(P, dtype=float)
    n, m, _ = P.shape
    if metric is None:
        metric = 1.0 - np.eye(n)
    if phi is None:
        phi = np.zeros((n, n))
    C = list(range(n)) if C is None else list(C)
    if nu is None:
        nu = np.zeros(n)
        nu[C] = 1.0 / len(C)
    nu = np.asarray(nu, dtype=float)
    if gamma is None:
        supp = nu > 0
        gamma = float((P[C][:, :, supp] / nu[supp]).min())
        gamma = min(gamma, 0.99)
    cost = {"kind": "tabular-affine", "r1": np.asarray(r1).tolist(),
            "phi": np.asarray(phi).tolist()}
    if outer is not None:
        cost = dict(cost, kind="interaction-kernel", outer=outer)
    return {
        "name": name,
        "states": {"n": n, "metric": np.asarray(metric).tolist(), "anchor": anchor},
        "actions": m,
        "kernel": P.tolist(),
        "cost": cost,
        "lyapunov": {"v": list(np.ones(n) if v is None else v), "C": C, "beta1": beta1,
                     "beta2": beta2, "nu": nu.tolist(), "gamma": gamma},
        "orders": {"p": 1, "q": 1},
    }


def make_model(P, r1, **kw):
    return model_from_dict(model_doc(P, r1, **kw))


def random_model(rng, n, m, affine=True, eps=0.1):
    """Dense random kernel with self-loop mass >= eps on every (x, u)."""
    P = rng.dirichlet(np.ones(n), size=(n, m)) * (1 - eps)
    P[np.arange(n), :, np.arange(n)] += eps
    r1 = rng.uniform(0, 1, size=(n, m))
    phi = rng.uniform(0, 1, size=(n, n)) if affine else None
    metric = np.abs(np.subtract.outer(np.arange(n), np.arange(n))).astype(float)
    return make_model(P, r1, phi=phi, metric=metric, name=f"random_{n}x{m}")


def battery(seed=2024, count=24):
    """Validated random models with |S| <= 5 and |U| <= 3."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        n = int(rng.integers(1, 6))
        m = int(rng.integers(1, 4))
        model = random_model(rng, n, m)
        if check_drift(model).passed and check_minorization(model).passed:
            out.append((model, rng.dirichlet(np.ones(n))))
    return out


def enumerate_rho(model, mu):
    """Minimum long-run average over all deterministic stationary policies."""
    costs = model.cost_table(mu)
    n, m = model.n_states, model.n_actions
    best = np.inf
    for acts in itertools.product(range(m), repeat=n):
        probs = StationaryControl.deterministic(acts, m).probs
        best = min(best, average_cost_of_table(model.P, costs, probs)[0])
    return best


def power_iteration(chain, steps=10_000):
    x = np.full(chain.shape[0], 1.0 / chain.shape[0])
    for _ in range(steps):
        x = x @ chain
    return x


@pytest.fixture(scope="session")
def model_battery():
    return battery()


@pytest.fixture(scope="session")
def crowd():
    return shipped("crowd_aversion")


@pytest.fixture(scope="session")
def crowd_quadratic():
    return shipped("crowd_aversion_quadratic")


@pytest.fixture(scope="session")
def mu_free():
    return shipped("mu_independent")


@pytest.fixture
def three_state():
    P = np.array([
        [[0.6, 0.3, 0.1], [0.2, 0.2, 0.6]],
        [[0.3, 0.5, 0.2], [0.1, 0.3, 0.6]],
        [[0.2, 0.2, 0.6], [0.5, 0.4, 0.1]],
    ])
    r1 = np.array([[0.2, 0.7], [0.5, 0.1], [0.9, 0.4]])
    return make_model(P, r1, phi=0.5 * np.eye(3))
