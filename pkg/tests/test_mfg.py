import itertools

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import make_model
from ergomfg.ergodic import solve_ergodic_rvi
from ergomfg.mfg import (
    MfgSolution,
    argmin_is_unique,
    best_response,
    check_monotonicity,
    damping_schedule,
    solve_mfg,
    verify_mfg,
)
from ergomfg.stationary import (
    StationaryControl,
    average_cost_of_table,
    control_invariant,
    induced_chain,
    invariant_residual,
)
from ergomfg.transport import tv_distance


def enumerated_best_response(model, mu):
    """Invariant measure of the lowest-index optimal deterministic policy."""
    costs = model.cost_table(mu)
    m = model.n_actions
    best, best_eta = np.inf, None
    for acts in itertools.product(range(m), repeat=model.n_states):
        avg, eta = average_cost_of_table(model.P, costs,
                                         StationaryControl.deterministic(acts, m).probs)
        if avg < best - 1e-12:
            best, best_eta = avg, eta
    return best_eta


def simplex_scan(model, step=1e-3):
    """Grid points t where t -> BR((t, 1-t))(0) - t changes sign or vanishes."""
    ts = np.linspace(0, 1, int(round(1 / step)) + 1)
    f = np.array([enumerated_best_response(model, [t, 1 - t])[0] - t for t in ts])
    roots = list(ts[np.abs(f) <= step])
    roots += [ts[k] for k in np.flatnonzero(np.sign(f[:-1]) != np.sign(f[1:]))]
    return sorted(set(roots))


def one_state_model():
    return make_model(np.ones((1, 2, 1)), [[0.3, 0.1]], phi=[[1.0]])


class TestBestResponse:
    def test_measure_free_cost(self, mu_free):
        a, _ = best_response(mu_free, [0.9, 0.1])
        b, _ = best_response(mu_free, [0.2, 0.8])
        assert_allclose(a, b)

    def test_one_state(self):
        eta, _ = best_response(one_state_model(), [1.0])
        assert_allclose(eta, [1.0])

    def test_randomized_grid_search(self, crowd):
        for mu in ([0.5, 0.5], [0.95, 0.05], [0.2, 0.8]):
            eta, sol = best_response(crowd, mu)
            costs = crowd.cost_table(mu)
            grid = np.linspace(0, 1, 21)
            best = min(
                average_cost_of_table(crowd.P, costs, np.array([[a, 1 - a], [b, 1 - b]]))[0]
                for a in grid for b in grid
            )
            assert sol.rho == pytest.approx(best, abs=1e-10)
            assert invariant_residual(induced_chain(crowd, sol.selector), eta) <= 1e-10


class TestSolve:
    def test_measure_free_one_step(self, mu_free):
        sol, trace = solve_mfg(mu_free, [0.5, 0.5], tol_fp=1e-8)
        assert sol.certified
        single = solve_ergodic_rvi(mu_free, [0.5, 0.5])
        assert_allclose(sol.eta, control_invariant(mu_free, single.selector), atol=0)
        assert trace.rows[1][1] == 0.0  # nothing moves after the first full step

    def test_one_state(self):
        sol, _ = solve_mfg(one_state_model(), [1.0])
        assert_allclose(sol.eta, [1.0])
        assert sol.certified

    def test_crowd_aversion_matches_scan(self, crowd):
        sol, trace = solve_mfg(crowd, [0.5, 0.5])
        assert sol.converged and sol.certified
        assert_allclose(sol.eta, [8 / 9, 1 / 9], atol=1e-12)
        roots = simplex_scan(crowd)
        assert min(abs(r - sol.eta[0]) for r in roots) <= 2e-3

    def test_constant_damping_keeps_measures(self, crowd):
        sol, trace = solve_mfg(crowd, [0.1, 0.9], damping=0.5, max_iter=200, jump=False)
        assert abs(sol.eta.sum() - 1) <= 1e-12
        assert all(row[3] == 0.5 for row in trace.rows)
        assert sol.certified

    def test_two_starts_agree(self, crowd):
        a, _ = solve_mfg(crowd, [0.99, 0.01])
        b, _ = solve_mfg(crowd, [0.01, 0.99])
        assert tv_distance(a.eta, b.eta) <= 1e-6

    def test_plain_harmonic_stays_close(self, crowd):
        # without the jump, averaging approaches the equilibrium like 1/k
        sol, trace = solve_mfg(crowd, [0.99, 0.01], max_iter=400, jump=False)
        assert tv_distance(sol.eta, [8 / 9, 1 / 9]) <= 5e-3
        assert all(row[1] >= 0 for row in trace.rows)

    def test_bad_damping(self):
        with pytest.raises(ValueError):
            damping_schedule(1.5)
        assert damping_schedule("harmonic")(0) == 1.0


class TestVerify:
    def test_perturbed_eta(self, crowd):
        sol, _ = solve_mfg(crowd, [0.5, 0.5])
        eta = sol.eta + np.array([-0.1, 0.1])
        cand = MfgSolution(eta, None, None, sol.selector)
        cert = verify_mfg(crowd, cand)
        assert not cert.certified
        assert max(cert.residuals["invariance"], cert.residuals["fixed_point"]) >= 0.05

    def test_measure_free_best_response(self, mu_free):
        eta, sol = best_response(mu_free, [0.5, 0.5])
        cert = verify_mfg(mu_free, MfgSolution(eta, sol.value, sol.rho, sol.selector))
        assert cert.certified

    def test_tie_free(self, crowd):
        assert argmin_is_unique(crowd, [8 / 9, 1 / 9])


class TestMonotonicity:
    def pairs(self, rng, k=30):
        out = []
        for _ in range(k):
            v = StationaryControl(rng.dirichlet(np.ones(2), size=2))
            w = StationaryControl(rng.dirichlet(np.ones(2), size=2))
            out.append((v, w))
        return out

    def test_same_control(self, crowd):
        v = StationaryControl.uniform(2, 2)
        assert check_monotonicity(crowd, [(v, v)]).values == [0.0]

    def test_measure_free(self, mu_free):
        rep = check_monotonicity(mu_free, self.pairs(np.random.default_rng(0)))
        assert_allclose(rep.values, 0.0, atol=1e-15)

    def test_crowd_aversion_monotone(self, crowd):
        rep = check_monotonicity(crowd, self.pairs(np.random.default_rng(1)))
        assert rep.monotone_on_sample
        assert rep.min_value >= -1e-12
