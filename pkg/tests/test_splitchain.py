import itertools

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import make_model, random_model
from ergomfg.errors import MinorizationTooTight
from ergomfg.model import check_minorization
from ergomfg.splitchain import (
    SplitState,
    atom_rows_identical,
    exact_tau_moments,
    make_split_spec,
    marginal_law_gap,
    product_kernel,
    simulate_regeneration,
    split_kernel,
    star,
    verify_coupling_bounds,
    verify_product_drift,
    verify_product_minorization,
)
from ergomfg.stationary import StationaryControl, induced_chain


def one_state(gamma=0.9, v=2.0):
    return make_model(np.ones((1, 1, 1)), [[0.0]], v=[v], gamma=gamma)


def det(model, acts):
    return StationaryControl.deterministic(acts, model.n_actions)


def mixing_model():
    P = np.array([[[0.5, 0.5], [0.45, 0.55]], [[0.55, 0.45], [0.5, 0.5]]])
    return make_model(P, np.zeros((2, 2)), gamma=0.9)


def split_specs(crowd):
    """Spec battery: shipped model, near-uniform model, a 3-state model with a single atom, 1-state."""
    rng = np.random.default_rng(17)
    P3 = rng.dirichlet(np.ones(3), size=(3, 2)) * 0.7
    P3[:, :, 0] += 0.3
    three = make_model(P3, np.zeros((3, 2)), C=[0], nu=[1, 0, 0], gamma=0.3)
    specs = [
        make_split_spec(crowd, det(crowd, [0, 1])),
        make_split_spec(crowd, StationaryControl.uniform(2, 2)),
        make_split_spec(mixing_model(), det(mixing_model(), [0, 1])),
        make_split_spec(three, det(three, [1, 0, 1])),
        make_split_spec(one_state(), det(one_state(), [0])),
    ]
    return specs


class TestProductKernel:
    def test_one_state(self):
        assert_allclose(product_kernel(one_state(), det(one_state(), [0])), [[1.0]])

    def test_double_loop(self, crowd):
        v = StationaryControl([[0.3, 0.7], [0.6, 0.4]])
        P = induced_chain(crowd, v)
        Pbar = product_kernel(crowd, v)
        for x1, x2, y1, y2 in itertools.product(range(2), repeat=4):
            assert Pbar[x1 * 2 + x2, y1 * 2 + y2] == pytest.approx(P[x1, y1] * P[x2, y2])

    def test_coordinate_marginal(self, crowd):
        v = StationaryControl([[0.3, 0.7], [0.6, 0.4]])
        P = induced_chain(crowd, v)
        Pbar = product_kernel(crowd, v)
        for k in (1, 3, 7):
            law = np.linalg.matrix_power(Pbar, k)[0 * 2 + 1].reshape(2, 2).sum(axis=1)
            assert_allclose(law, np.linalg.matrix_power(P, k)[0], atol=1e-14)


class TestProductMinorization:
    def test_single_atom(self):
        P = np.array([[[0.4, 0.6], [0.7, 0.3]], [[0.2, 0.8], [0.5, 0.5]]])
        m = make_model(P, np.zeros((2, 2)), C=[0], nu=[1, 0], gamma=0.4)
        rep = verify_product_minorization(make_split_spec(m, det(m, [0, 0])))
        assert rep.passed
        assert rep.atom_ratio == pytest.approx(0.4 * 0.4)

    def test_gamma_star_squared(self, crowd):
        g = check_minorization(crowd).gamma_star
        rep = verify_product_minorization(make_split_spec(crowd, det(crowd, [0, 1])))
        assert rep.passed
        assert rep.atom_ratio == pytest.approx(g * g)

    def test_adversarial(self, crowd):
        bad = make_model(crowd.P, np.zeros((2, 2)), gamma=0.3)  # true gamma* is 0.2
        assert not check_minorization(bad).passed
        assert not verify_product_minorization(make_split_spec(bad, det(bad, [0, 1]))).passed


class TestSplitKernel:
    def test_stochastic_and_atom_rows(self, crowd):
        for spec in split_specs(crowd):
            K = split_kernel(spec)
            assert np.all(K >= 0)
            assert_allclose(K.sum(axis=1), 1.0, atol=1e-12)
            assert atom_rows_identical(K, spec)

    def test_tiny_gamma1(self, crowd):
        spec = make_split_spec(crowd, det(crowd, [0, 1]), gamma1=1e-13)
        K = split_kernel(spec)
        assert_allclose(K[:4, :4], product_kernel(crowd, det(crowd, [0, 1])), atol=1e-12)

    def test_one_state_by_hand(self):
        spec = make_split_spec(one_state(gamma=0.6), det(one_state(), [0]))
        g1 = 0.6 ** 2 / 2
        assert_allclose(split_kernel(spec), [[1 - g1, g1], [1 - g1, g1]])

    def test_marginal_law_identity(self, crowd):
        for spec in split_specs(crowd):
            for z in range(spec.n ** 2):
                assert marginal_law_gap(spec, z, k_max=20) <= 1e-12

    def test_feasibility_boundary(self, crowd):
        # declared gamma equals gamma*, so gamma^2 is the largest feasible gamma1
        v = det(crowd, [0, 1])
        split_kernel(make_split_spec(crowd, v, gamma1=0.04))
        with pytest.raises(MinorizationTooTight):
            split_kernel(make_split_spec(crowd, v, gamma1=0.04 * 1.01))

    def test_star_mass_split(self, crowd):
        spec = make_split_spec(crowd, det(crowd, [0, 1]))
        mu = np.array([0.1, 0.2, 0.3, 0.4])
        lifted = star(spec, mu)
        assert_allclose(lifted[4:], spec.gamma1 * mu)
        assert_allclose(lifted[:4] + lifted[4:], mu)


class TestSimulation:
    def test_mixing_base_exact_mean(self):
        m = mixing_model()
        spec = make_split_spec(m, det(m, [0, 1]), gamma1=0.8)
        start = SplitState((0, 1))
        stats = simulate_regeneration(spec, start, horizon=100, n_paths=20_000, seed=1)
        assert not stats.censored.any()
        exact, surv = exact_tau_moments(spec, star(spec, np.eye(4)[1]), k_max=5)
        se = stats.tau.std(ddof=1) / np.sqrt(stats.n_paths)
        assert abs(stats.tau.mean() - exact) <= 4 * se
        for k, s in enumerate(surv, start=1):
            emp = (stats.tau > k).mean()
            assert abs(emp - s) <= 4 * np.sqrt(s * (1 - s) / stats.n_paths) + 1e-12

    def test_unreachable_atom(self):
        P = np.array([[[0.5, 0.5]], [[0.0, 1.0]]])
        m = make_model(P, np.zeros((2, 1)), C=[0], nu=[1, 0], gamma=0.5)
        spec = make_split_spec(m, det(m, [0, 0]))
        stats = simulate_regeneration(spec, SplitState((1, 1)), horizon=50, n_paths=500, seed=0)
        assert stats.censored.all()
        assert stats.status.startswith("warning")
        with pytest.raises(ValueError):
            verify_coupling_bounds(spec, stats)

    def test_one_state_geometric(self):
        m = one_state(gamma=0.9, v=2.0)
        spec = make_split_spec(m, det(m, [0]))
        g1 = spec.gamma1
        stats = simulate_regeneration(spec, SplitState((0, 0), 0), horizon=400,
                                      n_paths=50_000, seed=7)
        rep = verify_coupling_bounds(spec, stats)
        assert abs(rep.mean_tau - 1 / g1) <= 3 * rep.mean_tau_se
        theta = (1 / g1 + 1) * 2 * 2.0 / (2 * 2.0 + 1)
        assert abs(rep.theta_hat - theta) <= 3 * rep.theta_se

    def test_thread_count_irrelevant(self, crowd):
        spec = make_split_spec(crowd, det(crowd, [0, 1]))
        a = simulate_regeneration(spec, SplitState((0, 1)), 500, 9000, seed=4, threads=1)
        b = simulate_regeneration(spec, SplitState((0, 1)), 500, 9000, seed=4, threads=3)
        assert np.array_equal(a.tau, b.tau) and np.array_equal(a.sum_v, b.sum_v)
        for k in a.post:
            assert np.array_equal(a.post[k][0], b.post[k][0])

    def test_rows_export(self, crowd):
        spec = make_split_spec(crowd, det(crowd, [0, 1]))
        stats = simulate_regeneration(spec, SplitState((0, 0)), 500, 10, seed=0)
        rows = stats.rows()
        assert len(rows) == 10 and rows[3][0] == 3


class TestCouplingBounds:
    def test_bounds_on_battery(self, crowd):
        for spec in split_specs(crowd):
            n = spec.n
            for start in {(0, 0), (0, n - 1)}:
                stats = simulate_regeneration(spec, SplitState(start), 3000, 20_000, seed=11)
                rep = verify_coupling_bounds(spec, stats)
                assert rep.bound_respected
                assert rep.exchangeable
                assert rep.delta_hat > 0 and np.isfinite(rep.exp_moment)
                assert np.isfinite(rep.theta_hat)

    def test_visit_survival_is_geometric(self, crowd):
        spec = make_split_spec(crowd, det(crowd, [0, 1]))
        stats = simulate_regeneration(spec, SplitState((0, 1)), 3000, 20_000, seed=2)
        rep = verify_coupling_bounds(spec, stats)
        for k, s, bound in rep.survival[:20]:
            exact = (1 - spec.gamma1) ** k
            assert abs(s - exact) <= 4 * np.sqrt(exact * (1 - exact) / 20_000)
            assert s <= bound

    def test_atom_start_independent_of_point(self, crowd):
        spec = make_split_spec(crowd, det(crowd, [0, 1]))
        K = split_kernel(spec)
        atom_rows = K[4:][spec.atom_set]
        for row in atom_rows:
            assert np.array_equal(row, atom_rows[0])


class TestProductDrift:
    def test_birth_death_by_hand(self):
        P = np.array([[[0.7, 0.3, 0.0]], [[0.8, 0.2, 0.0]], [[0.0, 0.6, 0.4]]])
        m = make_model(P, np.zeros((3, 1)), v=[1, 4, 16], C=[0], nu=[1, 0, 0],
                       beta1=0.25, beta2=16)
        spec = make_split_spec(m, det(m, [0, 0, 0]))
        rep = verify_product_drift(spec)
        assert rep.passed
        # on C x C = {(0, 0)}: 2 * 0.9 + (0.25 / 4) * 2
        assert rep.kappa == pytest.approx(1.925)

    def test_random_models_from_base_drift(self):
        rng = np.random.default_rng(5)
        m = random_model(rng, 3, 2)
        V = m.lyapunov.v_fn
        spec = make_split_spec(m, det(m, [0, 0, 0]))
        rep = verify_product_drift(spec)
        worst = -np.inf
        for x1, x2 in itertools.product(range(3), repeat=2):
            best = max(m.P[x1, u1] @ V + m.P[x2, u2] @ V
                       for u1, u2 in itertools.product(range(2), repeat=2))
            worst = max(worst, best - V[x1] - V[x2] + m.lyapunov.beta1 / 4 * (V[x1] + V[x2]))
        assert rep.kappa == pytest.approx(max(worst, 0.0))
