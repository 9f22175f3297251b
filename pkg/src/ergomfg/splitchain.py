"""Pseudo-atom (split chain) construction on the product of two controlled chains.

Product states are indexed ``x1 * n + x2``; split states append a level
bit, ``level * n**2 + pair``. Level-1 states in ``C x C`` form the pseudo-atom:
every level-1 row of the split kernel is the lifted minorizing measure.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2_contingency

from ergomfg.errors import MinorizationTooTight
from ergomfg.rng import stream
from ergomfg.stationary import StationaryControl, induced_chain

CHUNK = 4096


@dataclass(frozen=True)
class SplitChainSpec:
    base: object
    control: StationaryControl
    gamma1: float
    atom_set: np.ndarray  # boolean mask over product states
    split_minor: np.ndarray

    @property
    def n(self):
        return self.base.n_states

    @property
    def gamma2(self):
        g = self.gamma1
        return g * g / (1 - g)

    @property
    def exceeds_default(self):
        return self.gamma1 > self.base.lyapunov.gamma ** 2 / 2


def make_split_spec(model, control, gamma1=None):
    """Spec with ``C x C`` as atom set and ``nu x nu`` as minorizing measure.

    ``gamma1`` defaults to half the squared declared minorization constant.
    Larger values are accepted; ``split_kernel`` rejects them once the
    residual kernel turns negative.
    """
    lyap = model.lyapunov
    if gamma1 is None:
        gamma1 = lyap.gamma ** 2 / 2
    if not 0 < gamma1 < 1:
        raise ValueError("gamma1 must lie in (0, 1)")
    inC = lyap.in_small_set(model.n_states)
    atom = np.outer(inC, inC).ravel()
    nu = lyap.minor_measure
    return SplitChainSpec(model, control, float(gamma1), atom, np.outer(nu, nu).ravel())


def product_kernel(model, v):
    """Transition matrix of two independent copies driven by the same control."""
    P = induced_chain(model, v)
    return np.kron(P, P)


def pair_index(n, x1, x2):
    return x1 * n + x2


@dataclass
class ProductMinorReport:
    passed: bool
    gamma_sq: float
    atom_ratio: float
    worst_slack: float

    def to_dict(self):
        return dict(self.__dict__)


def verify_product_minorization(spec, n_random=200, seed=0):
    """Check ``Pbar(A | xbar, ubar) >= gamma^2 * nubar(A)`` on C x C for every action pair.

    Singletons and ``n_random`` random subsets of product states are tested.
    """
    model = spec.base
    n, m = model.n_states, model.n_actions
    g2 = model.lyapunov.gamma ** 2
    nu = spec.split_minor
    C = list(model.lyapunov.small_set)
    rng = np.random.default_rng(seed)
    subsets = rng.random((n_random, n * n)) < 0.5
    worst = np.inf
    ratio = np.inf
    supp = nu > 0
    for x1 in C:
        for x2 in C:
            for u1 in range(m):
                for u2 in range(m):
                    row = np.outer(model.P[x1, u1], model.P[x2, u2]).ravel()
                    worst = min(worst, float((row - g2 * nu).min()))
                    worst = min(worst, float((subsets @ row - g2 * (subsets @ nu)).min()))
                    ratio = min(ratio, float((row[supp] / nu[supp]).min()))
    return ProductMinorReport(bool(worst >= -1e-15), g2, ratio, worst)


def star(spec, mu):
    """Lift a measure on product states to split states (level 1 gets gamma1 of the atom mass)."""
    mu = np.asarray(mu, dtype=float)
    g = spec.gamma1
    lo = np.where(spec.atom_set, (1 - g) * mu, mu)
    hi = np.where(spec.atom_set, g * mu, 0.0)
    return np.concatenate([lo, hi])


def split_kernel(spec):
    """Split-chain transition matrix on ``2 n^2`` states."""
    Pbar = product_kernel(spec.base, spec.control)
    n2 = Pbar.shape[0]
    g = spec.gamma1
    K = np.zeros((2 * n2, 2 * n2))
    for z in range(n2):
        if spec.atom_set[z]:
            resid = (Pbar[z] - g * spec.split_minor) / (1 - g)
            if resid.min() < -1e-14:
                raise MinorizationTooTight(
                    f"gamma1={g:.6g} leaves a negative residual kernel at product state {z}"
                )
            resid = np.maximum(resid, 0.0)
            K[z] = star(spec, resid / resid.sum())
        else:
            K[z] = star(spec, Pbar[z])
    K[n2:] = star(spec, spec.split_minor)
    return K


def marginal_law_gap(spec, start_pair, k_max=20, K=None):
    """Max entrywise gap between the level-marginalized split law and the product law."""
    K = split_kernel(spec) if K is None else K
    Pbar = product_kernel(spec.base, spec.control)
    n2 = Pbar.shape[0]
    e = np.zeros(n2)
    e[start_pair] = 1.0
    z = star(spec, e)
    x = e.copy()
    worst = 0.0
    for _ in range(k_max):
        z = z @ K
        x = x @ Pbar
        worst = max(worst, float(np.abs(z[:n2] + z[n2:] - x).max()))
    return worst


def atom_target(spec):
    n2 = spec.n ** 2
    target = np.zeros(2 * n2, dtype=bool)
    target[n2:] = spec.atom_set
    return target


def exact_tau_moments(spec, start_dist, k_max=0, K=None):
    """Exact E[tau*] and P(tau* > k), k = 1..k_max, from a split-state distribution."""
    K = split_kernel(spec) if K is None else K
    target = atom_target(spec)
    keep = ~target
    Q = K[np.ix_(keep, keep)]
    # m(z) = expected steps to hit the atom from z, counting steps n >= 1
    m_keep = np.linalg.solve(np.eye(Q.shape[0]) - Q, np.ones(Q.shape[0]))
    m_all = 1.0 + K[:, keep] @ m_keep
    start_dist = np.asarray(start_dist, dtype=float)
    mean = float(start_dist @ m_all)
    surv = []
    w = start_dist @ K[:, keep]
    for _ in range(k_max):
        surv.append(float(w.sum()))
        w = w @ Q
    return mean, np.array(surv)


@dataclass(frozen=True)
class SplitState:
    pair: tuple
    level: int | None = None


@dataclass
class RegenerationStats:
    tau: np.ndarray
    censored: np.ndarray
    sum_v: np.ndarray
    visits: np.ndarray
    post: dict = field(default_factory=dict)  # n -> (x1, x2) arrays at tau* + n
    horizon: int = 0
    start: SplitState | None = None
    status: str = "ok"

    @property
    def n_paths(self):
        return self.tau.size

    @property
    def uncensored_fraction(self):
        return float(1 - self.censored.mean())

    def rows(self):
        return [(i, int(t), bool(c), float(s))
                for i, (t, c, s) in enumerate(zip(self.tau, self.censored, self.sum_v))]


def _simulate_chunk(cdf, V1, V2, n2, target, start_lo, start_hi, z0_level, horizon,
                    post_steps, seed, chunk_index, size):
    rng = stream(seed, chunk_index)
    n_states_split = cdf.shape[0]
    if z0_level is None:
        u = rng.random(size)
        z = np.where(u < start_hi, start_lo + n2, start_lo)
    else:
        z = np.full(size, start_lo + n2 * z0_level)
    pair = z % n2
    sum_v = V1[pair] + V2[pair]
    tau = np.full(size, horizon, dtype=np.int64)
    done = np.zeros(size, dtype=bool)
    visits = np.zeros(size, dtype=np.int64)
    max_post = max(post_steps) if post_steps else 0
    post = {k: (np.full(size, -1), np.full(size, -1)) for k in post_steps}
    atom_pairs = target[n2:]
    active = np.arange(size)
    t = 0
    while active.size and t < horizon + max_post:
        t += 1
        u = rng.random(size)[active]
        z_new = (u[:, None] >= cdf[z[active]]).sum(axis=1)
        z_new = np.minimum(z_new, n_states_split - 1)
        z[active] = z_new
        pair = z_new % n2
        fresh = ~done[active]
        if t <= horizon:
            idx = active[fresh]
            p = pair[fresh]
            sum_v[idx] += V1[p] + V2[p]
            visits[idx] += atom_pairs[p]
            hit = target[z_new[fresh]]
            tau[idx[hit]] = t
            done[idx[hit]] = True
        reg = active[done[active]]
        lag = t - tau[reg]
        for k in post_steps:
            sel = reg[lag == k]
            post[k][0][sel] = z[sel] % n2 // int(np.sqrt(n2))
            post[k][1][sel] = z[sel] % n2 % int(np.sqrt(n2))
        finished = done[active] & (t - tau[active] >= max_post)
        if t >= horizon:
            finished |= ~done[active]
        active = active[~finished]
    censored = ~done
    return tau, censored, sum_v, visits, post


def simulate_regeneration(spec, start, horizon=1000, n_paths=10_000, seed=0,
                          post_steps=(1, 3), threads=1):
    """Simulate split-chain paths until the first atom hit ``tau*`` (censored at ``horizon``).

    ``sum_v`` accumulates ``V(X1_i) + V(X2_i)`` for ``0 <= i <= tau*``;
    ``visits`` counts entries into ``C x C`` at times ``1..tau*``. Paths are
    simulated in fixed chunks with one counter-based stream each, so the
    result does not depend on ``threads``.
    """
    K = split_kernel(spec)
    cdf = np.cumsum(K, axis=1)
    cdf[:, -1] = 1.0 + 1e-12
    n = spec.n
    n2 = n * n
    V = spec.base.lyapunov.v_fn
    V1 = np.repeat(V, n)
    V2 = np.tile(V, n)
    target = atom_target(spec)
    x1, x2 = start.pair
    lo = pair_index(n, x1, x2)
    hi_prob = spec.gamma1 if spec.atom_set[lo] else 0.0

    sizes = [min(CHUNK, n_paths - s) for s in range(0, n_paths, CHUNK)]
    args = [(cdf, V1, V2, n2, target, lo, hi_prob, start.level, horizon, tuple(post_steps),
             seed, c, size) for c, size in enumerate(sizes)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(lambda a: _simulate_chunk(*a), args))
    else:
        parts = [_simulate_chunk(*a) for a in args]
    tau = np.concatenate([p[0] for p in parts])
    cens = np.concatenate([p[1] for p in parts])
    sum_v = np.concatenate([p[2] for p in parts])
    visits = np.concatenate([p[3] for p in parts])
    post = {k: (np.concatenate([p[4][k][0] for p in parts]),
                np.concatenate([p[4][k][1] for p in parts])) for k in post_steps}
    stats = RegenerationStats(tau, cens, sum_v, visits, post, horizon, start)
    if cens.mean() >= 0.5:
        stats.status = "warning: horizon too small, at least half the paths are censored"
    return stats


@dataclass
class CouplingReport:
    theta_hat: float
    theta_se: float
    survival: list  # (k, empirical_survival, bound)
    bound_respected: bool
    step_rate: float
    delta_hat: float
    exp_moment: float
    exchangeability_pvalues: dict
    exchangeable: bool
    mean_tau: float
    mean_tau_se: float

    def to_dict(self):
        d = dict(self.__dict__)
        d["exchangeability_pvalues"] = {str(k): v for k, v in self.exchangeability_pvalues.items()}
        d["survival"] = [list(r) for r in self.survival]
        return d


def visit_survival(stats, k_max=None):
    """Empirical P(tau* > k-th entry into C x C), with censored paths counted while informative."""
    visits = stats.visits
    cens = stats.censored
    if k_max is None:
        k_max = int(visits.max()) if visits.size else 0
    rows = []
    for k in range(1, k_max + 1):
        known = ~cens | (visits >= k)
        if not known.any():
            break
        alive = np.where(cens, visits >= k, visits > k)
        rows.append((k, float(alive[known].mean())))
    return rows


def verify_coupling_bounds(spec, stats, deltas=None, rel_se=0.05, alpha=0.01):
    """Empirical counterparts of the regeneration bounds.

    (a) ``theta_hat``: mean of ``sum_v`` over ``V(x1) + V(x2) + 1``;
    (b) survival of ``tau*`` past the k-th entry into the atom set against
    ``(1 - gamma2)^(k-1)``, plus the fitted per-step geometric rate;
    (c) the largest ``delta`` whose exponential-moment estimate still has
    relative standard error below ``rel_se``;
    (d) two-sample chi-square tests of the two coordinates after ``tau*``,
    Bonferroni-corrected so that ``alpha`` is the family-wise level.
    """
    if stats.uncensored_fraction < 0.5:
        raise ValueError("fewer than half of the paths regenerated; increase the horizon")
    ok = ~stats.censored
    V = spec.base.lyapunov.v_fn
    x1, x2 = stats.start.pair
    denom = V[x1] + V[x2] + 1.0
    sv = stats.sum_v[ok] / denom
    theta = float(sv.mean())
    theta_se = float(sv.std(ddof=1) / np.sqrt(sv.size)) if sv.size > 1 else 0.0

    surv = []
    respected = True
    for k, s in visit_survival(stats):
        b = (1 - spec.gamma2) ** (k - 1)
        surv.append((k, s, b))
        respected = respected and s <= b

    tau = stats.tau[ok].astype(float)
    ks = np.arange(1, int(tau.max()) + 1)
    step_surv = np.array([(stats.tau > k).mean() for k in ks])
    pos = step_surv > 0
    if pos.sum() >= 2:
        slope = np.polyfit(ks[pos], np.log(step_surv[pos]), 1)[0]
        rate = float(1 - np.exp(slope))
    else:
        rate = 1.0

    if deltas is None:
        deltas = np.geomspace(1e-4, 2.0, 60)
    delta_hat, moment = 0.0, 1.0
    for d in deltas:
        e = np.exp(d * tau)
        if not np.all(np.isfinite(e)):
            break
        se = e.std(ddof=1) / np.sqrt(e.size) if e.size > 1 else np.inf
        if se / e.mean() > rel_se:
            break
        delta_hat, moment = float(d), float(e.mean())

    pvals = {}
    for k, (a, b) in stats.post.items():
        mask = (a >= 0) & (b >= 0)
        if mask.sum() == 0:
            continue
        ca = np.bincount(a[mask], minlength=spec.n)
        cb = np.bincount(b[mask], minlength=spec.n)
        cols = (ca + cb) > 0
        if cols.sum() < 2:
            pvals[k] = 1.0
            continue
        pvals[k] = float(chi2_contingency(np.vstack([ca[cols], cb[cols]]))[1])
    exch = all(p >= alpha / len(pvals) for p in pvals.values())
    return CouplingReport(theta, theta_se, surv, bool(respected), rate, delta_hat, moment,
                          pvals, bool(exch), float(tau.mean()),
                          float(tau.std(ddof=1) / np.sqrt(tau.size)) if tau.size > 1 else 0.0)


@dataclass
class ProductDriftReport:
    passed: bool
    kappa: float
    worst_slack: float

    def to_dict(self):
        return dict(self.__dict__)


def verify_product_drift(spec, tol=1e-10):
    """Drift of ``V(x1) + V(x2)`` for the product chain, from the base drift.

    Off ``C x C`` the drift must be at most ``-(beta1/4)(V(x1) + V(x2))``;
    on it the implied additive constant ``kappa`` is reported.
    """
    model = spec.base
    lyap = model.lyapunov
    V = lyap.v_fn
    up = (model.P @ V).max(axis=1) - V  # worst single-coordinate drift
    lhs = (up[:, None] + up[None, :]).ravel()
    vbar = (V[:, None] + V[None, :]).ravel()
    small = lyap.beta1 / 4 * vbar
    off = ~spec.atom_set
    slack = lhs[off] + small[off]
    worst = float(slack.max()) if off.any() else -np.inf
    kappa = float(max((lhs + small)[spec.atom_set].max(), 0.0))
    return ProductDriftReport(bool(worst <= tol), kappa, worst)


def atom_rows_identical(K, spec):
    n2 = spec.n ** 2
    rows = K[n2:][spec.atom_set]
    return bool(np.all(rows == rows[0]))


def survival_table(report):
    return [(k, s, b) for k, s, b in report.survival]
