"""N-person ergodic games coupled through the empirical measure of the other players."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from math import comb

import numpy as np

from ergomfg.errors import BackendModeError, BudgetError
from ergomfg.ergodic import iter_deterministic_policies, rvi_table
from ergomfg.mfg import IterationTrace, damping_schedule
from ergomfg.model import as_measure
from ergomfg.rng import categorical, stream
from ergomfg.stationary import (
    StationaryControl,
    average_cost_of_table,
    control_invariant,
    mix_controls,
)
from ergomfg.transport import tv_distance

BACKEND_MODES = ("affine-exact", "enumerate", "monte-carlo")
MODE_ALIASES = {"affine": "affine-exact", "mc": "monte-carlo", "enum": "enumerate"}
VERIFY_ROUND = 2**31 - 1


@dataclass(frozen=True)
class CostBackendPolicy:
    mode: str = "affine-exact"
    sample_count: int = 4000
    seed: int = 0
    budget: int = 1_000_000

    def __post_init__(self):
        mode = MODE_ALIASES.get(self.mode, self.mode)
        if mode not in BACKEND_MODES:
            raise ValueError(f"unknown backend mode {self.mode!r}")
        if self.sample_count <= 0 or self.budget <= 0:
            raise ValueError("backend budgets must be positive")
        object.__setattr__(self, "mode", mode)


def _others(pi, i):
    return [np.asarray(p, dtype=float) for j, p in enumerate(pi) if j != i]


def _count_distribution(others, budget):
    """Law of the occupation counts of independent draws, one from each measure."""
    n = others[0].shape[0]
    k = len(others)
    if comb(k + n - 1, n - 1) > budget:
        raise BudgetError(f"{comb(k + n - 1, n - 1)} empirical measures exceed the budget {budget}")
    dist = {(0,) * n: 1.0}
    for p in others:
        nxt = {}
        support = np.flatnonzero(p > 0)
        for counts, w in dist.items():
            for y in support:
                c = list(counts)
                c[y] += 1
                c = tuple(c)
                nxt[c] = nxt.get(c, 0.0) + w * p[y]
        dist = nxt
    return dist


def integrated_cost_with_error(model, i, pi, backend=CostBackendPolicy(), round_index=0):
    """Expected cost of player ``i`` against independent draws from the other measures.

    Returns ``(table, stderr)``; ``stderr`` is zero for the exact modes.
    """
    N = len(pi)
    if N < 2:
        raise ValueError("need at least two players")
    if not 0 <= i < N:
        raise ValueError("player index out of range")
    others = [as_measure(p, model.n_states, tol=1e-9) for p in _others(pi, i)]
    zero = np.zeros((model.n_states, model.n_actions))
    cost = model.cost

    if backend.mode == "affine-exact":
        if cost.kind != "tabular-affine":
            raise BackendModeError("affine-exact mode needs a tabular-affine cost")
        mean = np.mean(others, axis=0)
        return cost.r1 + (cost.phi @ mean)[:, None], zero

    if backend.mode == "enumerate":
        dist = _count_distribution(others, backend.budget)
        total = zero.copy()
        for counts, w in dist.items():
            total += w * cost.table(np.asarray(counts, dtype=float) / (N - 1))
        return total, zero

    M = backend.sample_count
    rng = stream(backend.seed, i, round_index)
    counts = np.zeros((M, model.n_states), dtype=np.int64)
    for p in others:
        ys = categorical(rng.random(M), np.broadcast_to(p, (M, p.shape[0])))
        counts[np.arange(M), ys] += 1
    uniq, mult = np.unique(counts, axis=0, return_counts=True)
    tabs = np.stack([cost.table(c.astype(float) / (N - 1)) for c in uniq])
    w = (mult / M)[:, None, None]
    mean = np.sum(w * tabs, axis=0)
    second = np.sum(w * tabs**2, axis=0)
    var = np.maximum(second - mean**2, 0.0) * M / max(M - 1, 1)
    return mean, np.sqrt(var / M)


def integrated_cost(model, i, pi, backend=CostBackendPolicy(), round_index=0):
    return integrated_cost_with_error(model, i, pi, backend, round_index)[0]


def player_best_response(model, i, pi, backend=CostBackendPolicy(), round_index=0):
    costs = integrated_cost(model, i, pi, backend, round_index)
    sol = rvi_table(model.P, costs, model.anchor)
    return control_invariant(model, sol.selector), sol


@dataclass
class NashProfile:
    n_players: int
    controls: list
    measures: list
    values: list  # (V, rho) per player
    residuals: list = field(default_factory=list)
    certified: bool = False
    converged: bool = False
    rounds: int = 0

    def to_dict(self):
        return {
            "n_players": self.n_players,
            "controls": [c.tolist() for c in self.controls],
            "measures": [m.tolist() for m in self.measures],
            "values": [{"V": V.tolist(), "rho": rho} for V, rho in self.values],
            "residuals": list(self.residuals),
            "certified": self.certified,
            "converged": self.converged,
            "rounds": self.rounds,
        }


def asymmetric_initial(n_states, N):
    """Distinct starting measures: half mass on state ``i mod n``, half uniform."""
    out = []
    for i in range(N):
        mu = np.full(n_states, 0.5 / n_states)
        mu[i % n_states] += 0.5
        out.append(mu)
    return out


def solve_nash(model, N, initial=None, damping="harmonic", max_rounds=500, tol=1e-10,
               backend=CostBackendPolicy(), jacobi=False, threads=1, tol_inv=1e-8,
               tol_dev=1e-6):
    """Damped best-response sweeps over players, then certification.

    Gauss-Seidel by default: player ``i`` responds to the already-updated
    measures of players ``< i``. ``jacobi=True`` updates everybody against
    the previous round, and then the responses may run on ``threads`` workers.
    """
    if N < 2:
        raise ValueError("need at least two players")
    if initial is None:
        initial = asymmetric_initial(model.n_states, N)
    if len(initial) != N:
        raise ValueError("need one initial measure per player")
    sched = damping_schedule(damping)
    pi = [as_measure(p, model.n_states, tol=1e-9).copy() for p in initial]
    controls = [None] * N
    trace = IterationTrace()
    converged = False
    k = 0

    def update(i, eta, sel, lam):
        new = (1 - lam) * pi[i] + lam * eta
        new /= new.sum()
        if lam == 1.0:
            ctrl = sel
        elif controls[i] is not None:
            ctrl, _ = mix_controls(controls[i], sel, 1 - lam, model, certify=False)
        else:
            ctrl = None
        step = tv_distance(pi[i], new)
        pi[i], controls[i] = new, ctrl
        return step

    for k in range(max_rounds):
        lam = float(sched(k))
        steps, rhos = [], []
        if jacobi:
            frozen = [p.copy() for p in pi]
            jobs = lambda i: player_best_response(model, i, frozen, backend, k)  # noqa: E731
            if threads > 1:
                with ThreadPoolExecutor(max_workers=threads) as ex:
                    results = list(ex.map(jobs, range(N)))
            else:
                results = [jobs(i) for i in range(N)]
            for i, (eta, sol) in enumerate(results):
                steps.append(update(i, eta, sol.selector, lam))
                rhos.append(sol.rho)
        else:
            for i in range(N):
                eta, sol = player_best_response(model, i, pi, backend, k)
                steps.append(update(i, eta, sol.selector, lam))
                rhos.append(sol.rho)
        trace.append(k, max(steps), float(np.mean(rhos)), lam)
        if max(steps) <= tol * lam:
            converged = True
            break

    values = []
    for i in range(N):
        costs = integrated_cost(model, i, pi, backend, VERIFY_ROUND)
        sol = rvi_table(model.P, costs, model.anchor)
        if controls[i] is None:
            controls[i] = sol.selector
        values.append((sol.value, float(sol.rho)))
    profile = NashProfile(N, controls, pi, values, converged=converged, rounds=k + 1)
    report = verify_nash(model, profile, backend, tol_inv=tol_inv, tol_dev=tol_dev)
    profile.residuals = report.players
    profile.certified = report.certified
    return profile, trace


@dataclass
class NashReport:
    players: list
    certified: bool

    def to_dict(self):
        return {"players": list(self.players), "certified": self.certified}


def verify_nash(model, profile, backend=CostBackendPolicy(), tol_inv=1e-8, tol_dev=1e-6,
                budget=4096):
    """Invariance and unilateral-deviation check for every player.

    ``deviation_gap`` is the best deviation's ergodic cost minus the player's
    own; the profile is Nash iff it is >= -tol for everyone. Deviations are
    all deterministic stationary controls when they fit in ``budget``,
    otherwise the player's exact best response.
    """
    players = []
    ok = True
    n, m = model.n_states, model.n_actions
    enumerate_all = m**n <= budget
    for i in range(profile.n_players):
        costs, se = integrated_cost_with_error(model, i, profile.measures, backend, VERIFY_ROUND)
        v = profile.controls[i]
        own, eta = average_cost_of_table(model.P, costs, v.probs)
        inv = tv_distance(profile.measures[i], eta)
        if enumerate_all:
            best = min(
                average_cost_of_table(model.P, costs,
                                      StationaryControl.deterministic(a, m).probs)[0]
                for a in iter_deterministic_policies(n, m)
            )
        else:
            best = rvi_table(model.P, costs, model.anchor).rho
        gap = best - own
        slack = tol_dev + 4.0 * float(se.max())
        stated = profile.values[i][1] if profile.values else own
        passed = inv <= tol_inv and gap >= -slack
        ok = ok and passed
        players.append({
            "player": i,
            "invariance": inv,
            "deviation_gap": gap,
            "slack": slack,
            "rho_identity": abs(stated - own),
            "deviations": "enumerated" if enumerate_all else "best-response",
            "passed": bool(passed),
        })
    return NashReport(players, bool(ok))


# ---------------------------------------------------------------------------
# convergence toward the mean-field limit

TABLE_HEADER = ("N", "spread_rho", "spread_V", "spread_pi", "gap_rho", "gap_pi", "certified")


@dataclass
class ConvergenceTable:
    rows: list = field(default_factory=list)
    tie_free: list = field(default_factory=list)
    header: tuple = TABLE_HEADER

    def column(self, name, certified_only=True):
        return [r[name] for r in self.rows if r["certified"] or not certified_only]

    def __len__(self):
        return len(self.rows)


def _pairwise_max(items, dist):
    best = 0.0
    for a in range(len(items)):
        for b in range(a + 1, len(items)):
            best = max(best, dist(items[a], items[b]))
    return float(best)


def convergence_study(model, N_list, mfg_sol, backend=CostBackendPolicy(), initial_fn=None,
                      damping="harmonic", max_rounds=500, tol=1e-10):
    """Solve the N-person game for each N and compare with a mean-field solution.

    ``table.tie_free[k]`` records whether every player's frozen-cost argmin
    was strict at the k-th N; trend claims only make sense on tie-free rows.
    """
    if not mfg_sol.certified:
        raise ValueError("convergence study needs a certified mean-field solution")
    N_list = [int(N) for N in N_list]
    if any(b <= a for a, b in zip(N_list, N_list[1:])):
        raise ValueError("N_list must be increasing")
    table = ConvergenceTable()
    for N in N_list:
        init = initial_fn(N) if initial_fn else asymmetric_initial(model.n_states, N)
        prof, _ = solve_nash(model, N, init, damping, max_rounds, tol, backend)
        rhos = [rho for _, rho in prof.values]
        Vs = [V for V, _ in prof.values]
        table.rows.append({
            "N": N,
            "spread_rho": _pairwise_max(rhos, lambda a, b: abs(a - b)),
            "spread_V": _pairwise_max(Vs, lambda a, b: float(np.abs(a - b).max())),
            "spread_pi": _pairwise_max(prof.measures, tv_distance),
            "gap_rho": float(max(abs(r - mfg_sol.rho) for r in rhos)),
            "gap_pi": float(max(tv_distance(p, mfg_sol.eta) for p in prof.measures)),
            "certified": bool(prof.certified),
        })
        ties = all(
            argmin_is_unique_table(model, integrated_cost(model, i, prof.measures, backend,
                                                          VERIFY_ROUND))
            for i in range(N)
        )
        table.tie_free.append(bool(ties))
    return table


def argmin_is_unique_table(model, costs, tie_tol=1e-9):
    sol = rvi_table(model.P, costs, model.anchor)
    Q = costs + model.P @ sol.value
    if Q.shape[1] < 2:
        return True
    s = np.sort(Q, axis=1)
    return bool(np.all(s[:, 1] - s[:, 0] > tie_tol * (1 + np.abs(s[:, 0]))))


def non_increasing(values, rel_slack=0.1, atol=1e-9):
    """Each entry at most (1 + rel_slack) times its predecessor, plus ``atol``."""
    return all(b <= (1 + rel_slack) * a + atol for a, b in zip(values, values[1:]))
