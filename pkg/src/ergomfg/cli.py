"""Batch experiment runner: files in, certified results and CSV tables out.

Exit codes: 0 success, 1 model validation failure, 2 solver did not
converge or certify, 3 I/O or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ergomfg import __version__
from ergomfg.ergodic import (
    DEFAULT_ALPHAS,
    TOL_BELLMAN,
    TOL_VD,
    TOL_VI,
    solve_ergodic_rvi,
    solve_ergodic_vanishing_discount,
    verify_ergodic_equation,
)
from ergomfg.errors import IterationError, MinorizationTooTight, ModelError
from ergomfg.mfg import IterationTrace, solve_mfg
from ergomfg.model import (
    as_measure,
    check_cost_regularity,
    check_drift,
    check_minorization,
    cost_range,
    dirac,
    load_model,
)
from ergomfg.nperson import (
    ConvergenceTable,
    CostBackendPolicy,
    convergence_study,
    non_increasing,
    solve_nash,
)
from ergomfg.splitchain import (
    CouplingReport,
    SplitState,
    exact_tau_moments,
    make_split_spec,
    marginal_law_gap,
    simulate_regeneration,
    split_kernel,
    star,
    verify_coupling_bounds,
    verify_product_drift,
    verify_product_minorization,
)

EXIT_OK, EXIT_INVALID, EXIT_UNCERTIFIED, EXIT_IO = 0, 1, 2, 3
PIPELINES = ("validate", "ergodic", "mfg", "nash", "converge", "splitchain")
GAP_RHO_FRACTION = 0.05
GAP_PI_MAX = 0.05
EXCHANGE_ALPHA = 0.01


class ConfigError(Exception):
    pass


@dataclass
class ExperimentConfig:
    model_path: str
    pipeline: str
    output_dir: str
    seed: int = 0
    threads: int = 1
    tol_vi: float = TOL_VI
    tol_bellman: float = TOL_BELLMAN
    tol_vd: float = TOL_VD
    tol_fp: float = 1e-10
    tol_inv: float = 1e-8
    tol_dev: float = 1e-6
    alphas: tuple = DEFAULT_ALPHAS
    damping: str = "harmonic"
    max_iter: int = 2000
    jump: bool = True
    mu: tuple | None = None
    n_players: int = 3
    n_list: tuple = (2, 3, 5, 8, 12, 20)
    backend: str = "affine"
    mc_samples: int = 4000
    jacobi: bool = False
    relax_separation: bool = False
    horizon: int = 2000
    n_paths: int = 10_000
    gamma1: float | None = None

    def validate(self):
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"unknown pipeline {self.pipeline!r}")
        if not Path(self.model_path).is_file():
            raise ConfigError(f"model file {self.model_path!r} does not exist")
        for name in ("tol_vi", "tol_bellman", "tol_vd", "tol_fp", "tol_inv", "tol_dev"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.threads < 1 or self.mc_samples < 1 or self.n_paths < 1 or self.horizon < 1:
            raise ConfigError("threads, mc-samples, n-paths and horizon must be positive")
        if self.n_players < 2:
            raise ConfigError("nash needs at least two players")
        if not self.n_list or any(b <= a for a, b in zip(self.n_list, self.n_list[1:])):
            raise ConfigError("n-list must be a nonempty increasing list")
        if self.damping != "harmonic":
            try:
                lam = float(self.damping)
            except ValueError:
                raise ConfigError("damping must be 'harmonic' or a number in (0, 1]") from None
            if not 0 < lam <= 1:
                raise ConfigError("damping must be 'harmonic' or a number in (0, 1]")

    def manifest_dict(self):
        """Every setting that can influence results; ``threads`` is excluded on purpose."""
        d = asdict(self)
        d.pop("threads")
        d.pop("output_dir")
        d["alphas"] = list(self.alphas)
        d["n_list"] = list(self.n_list)
        d["mu"] = None if self.mu is None else list(self.mu)
        return d


# ---------------------------------------------------------------------------
# writers


def _cell(x):
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (np.integer,)):
        return str(int(x))
    return str(x)


def write_csv(path, header, rows):
    """CSV with floats written via ``repr`` so they round-trip exactly."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(x) for x in r])
    return Path(path)


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(_plain(doc), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return Path(path)


def emit_plot_data(obj, out_dir, prefix=""):
    """Write one CSV per figure and return their paths.

    * ``ConvergenceTable``: ``gap_rho.csv`` (N, gap_rho), ``gap_pi.csv``
      (N, gap_pi), ``spreads.csv`` (N, spread_rho, spread_V, spread_pi);
    * ``IterationTrace``: ``trace.csv`` (k, tv_step, rho);
    * ``CouplingReport``: ``survival.csv`` (k, empirical_survival, bound).
    """
    out = Path(out_dir)
    if isinstance(obj, ConvergenceTable):
        if not obj.rows:
            raise ValueError("refusing to emit plot data for an empty convergence table")
        rows = obj.rows
        return [
            write_csv(out / f"{prefix}gap_rho.csv", ("N", "gap_rho"),
                      [(r["N"], r["gap_rho"]) for r in rows]),
            write_csv(out / f"{prefix}gap_pi.csv", ("N", "gap_pi"),
                      [(r["N"], r["gap_pi"]) for r in rows]),
            write_csv(out / f"{prefix}spreads.csv", ("N", "spread_rho", "spread_V", "spread_pi"),
                      [(r["N"], r["spread_rho"], r["spread_V"], r["spread_pi"]) for r in rows]),
        ]
    if isinstance(obj, IterationTrace):
        if not obj.rows:
            raise ValueError("refusing to emit plot data for an empty iteration trace")
        return [write_csv(out / f"{prefix}trace.csv", ("k", "tv_step", "rho"),
                          [r[:3] for r in obj.rows])]
    if isinstance(obj, CouplingReport):
        if not obj.survival:
            raise ValueError("refusing to emit plot data for an empty survival table")
        return [write_csv(out / f"{prefix}survival.csv", ("k", "empirical_survival", "bound"),
                          obj.survival)]
    raise TypeError(f"no plot layout for {type(obj).__name__}")


# ---------------------------------------------------------------------------
# pipelines


def _mu(cfg, model):
    if cfg.mu is None:
        return np.full(model.n_states, 1.0 / model.n_states)
    try:
        return as_measure(cfg.mu, model.n_states, tol=1e-9)
    except ValueError as exc:
        raise ConfigError(f"--mu: {exc}") from None


def _damping(cfg):
    return "harmonic" if cfg.damping == "harmonic" else float(cfg.damping)


def _backend(cfg):
    return CostBackendPolicy(cfg.backend, sample_count=cfg.mc_samples, seed=cfg.seed)


def run_validate(cfg, model, out):
    drift = check_drift(model, relax_separation=cfg.relax_separation)
    minor = check_minorization(model)
    n = model.n_states
    trials = [(dirac(n, a), dirac(n, b)) for a in range(n) for b in range(n) if a != b]
    trials.append((np.full(n, 1.0 / n), dirac(n, model.anchor)))
    reg = check_cost_regularity(model, trials, seed=cfg.seed) if n > 1 else None
    ok = drift.passed and minor.passed
    write_json(out / "validation.json", {
        "drift": drift.to_dict(),
        "minorization": minor.to_dict(),
        "regularity": None if reg is None else reg.to_dict(),
        "load_notes": list(model.load_notes),
        "passed": ok,
    })
    return EXIT_OK if ok else EXIT_INVALID


def run_ergodic(cfg, model, out):
    mu = _mu(cfg, model)
    rvi = solve_ergodic_rvi(model, mu, tol=cfg.tol_vi, tol_bellman=cfg.tol_bellman)
    vd = solve_ergodic_vanishing_discount(model, mu, cfg.alphas, cfg.tol_vd, cfg.tol_bellman)
    rep = verify_ergodic_equation(model, mu, rvi)
    agree = abs(rvi.rho - vd.rho)
    write_json(out / "ergodic.json", {
        "mu": mu, "rvi": rvi.to_dict(), "vanishing_discount": vd.to_dict(),
        "bellman": rep.to_dict(), "rho_agreement": agree,
    })
    write_csv(out / "rvi_trace.csv", ("iter", "residual", "rho_estimate"), rvi.trace)
    return EXIT_OK if rvi.certified and vd.certified else EXIT_UNCERTIFIED


def run_mfg(cfg, model, out):
    sol, trace = solve_mfg(model, _mu(cfg, model), _damping(cfg), cfg.max_iter, cfg.tol_fp,
                           cfg.tol_bellman, cfg.tol_inv, jump=cfg.jump)
    write_json(out / "mfg.json", sol.to_dict())
    write_csv(out / "mfg_iterations.csv", IterationTrace.header, trace.rows)
    emit_plot_data(trace, out, "mfg_")
    return EXIT_OK if sol.certified else EXIT_UNCERTIFIED


def run_nash(cfg, model, out):
    prof, trace = solve_nash(model, cfg.n_players, None, _damping(cfg), cfg.max_iter,
                             cfg.tol_fp, _backend(cfg), jacobi=cfg.jacobi, threads=cfg.threads,
                             tol_inv=cfg.tol_inv, tol_dev=cfg.tol_dev)
    write_json(out / "nash.json", prof.to_dict())
    write_csv(out / "nash_iterations.csv", IterationTrace.header, trace.rows)
    emit_plot_data(trace, out, "nash_")
    return EXIT_OK if prof.certified else EXIT_UNCERTIFIED


def run_converge(cfg, model, out):
    mfg, _ = solve_mfg(model, _mu(cfg, model), _damping(cfg), cfg.max_iter, cfg.tol_fp,
                       cfg.tol_bellman, cfg.tol_inv, jump=cfg.jump)
    if not mfg.certified:
        write_json(out / "mfg.json", mfg.to_dict())
        return EXIT_UNCERTIFIED
    table = convergence_study(model, cfg.n_list, mfg, _backend(cfg), tol=cfg.tol_fp)
    write_csv(out / "convergence.csv", table.header,
              [tuple(r[h] for h in table.header) for r in table.rows])
    emit_plot_data(table, out, "convergence_")
    last = table.rows[-1]
    rng_r = cost_range(model)
    summary = {
        "mfg": mfg.to_dict(),
        "cost_range": rng_r,
        "gap_rho_threshold": GAP_RHO_FRACTION * rng_r,
        "gap_pi_threshold": GAP_PI_MAX,
        "gap_rho_non_increasing": non_increasing(table.column("gap_rho")),
        "gap_pi_non_increasing": non_increasing(table.column("gap_pi")),
        "final_gap_rho": last["gap_rho"],
        "final_gap_pi": last["gap_pi"],
        "all_certified": all(r["certified"] for r in table.rows),
        "tie_free": table.tie_free,
    }
    ok = (summary["all_certified"] and last["gap_rho"] <= summary["gap_rho_threshold"]
          and last["gap_pi"] <= GAP_PI_MAX)
    summary["passed"] = ok
    write_json(out / "convergence_summary.json", summary)
    return EXIT_OK if ok else EXIT_UNCERTIFIED


def run_splitchain(cfg, model, out):
    control = solve_ergodic_rvi(model, _mu(cfg, model), tol=cfg.tol_vi).selector
    spec = make_split_spec(model, control, cfg.gamma1)
    minor = verify_product_minorization(spec, seed=cfg.seed)
    drift = verify_product_drift(spec)
    try:
        K = split_kernel(spec)
    except MinorizationTooTight as exc:
        write_json(out / "splitchain.json", {"error": str(exc), "gamma1": spec.gamma1})
        return EXIT_INVALID
    n = model.n_states
    starts = [(a, b) for a in range(n) for b in range(n)]
    marg = max(marginal_law_gap(spec, a * n + b, K=K) for a, b in starts)
    per_start = []
    main_report = None
    pvalues = []
    ok = minor.passed
    for a, b in starts:
        st = SplitState((a, b))
        stats = simulate_regeneration(spec, st, cfg.horizon, cfg.n_paths, cfg.seed + a * n + b,
                                      threads=cfg.threads)
        e = np.zeros(n * n)
        e[a * n + b] = 1.0
        exact_mean, _ = exact_tau_moments(spec, star(spec, e), K=K)
        entry = {"start": [a, b], "status": stats.status,
                 "uncensored_fraction": stats.uncensored_fraction, "exact_mean_tau": exact_mean}
        if stats.uncensored_fraction >= 0.5:
            rep = verify_coupling_bounds(spec, stats)
            entry.update(rep.to_dict())
            ok = ok and rep.bound_respected
            pvalues.extend(rep.exchangeability_pvalues.values())
            if (a, b) == (model.anchor, model.anchor):
                main_report = rep
                write_csv(out / "regeneration.csv", ("path", "tau_star", "censored", "sum_V"),
                          stats.rows())
        else:
            ok = False
        per_start.append(entry)
    # family-wise 1% level across every start and lag
    exchangeable = bool(pvalues) and min(pvalues) >= EXCHANGE_ALPHA / len(pvalues)
    ok = ok and exchangeable
    if main_report is not None:
        emit_plot_data(main_report, out)
    thetas = [e["theta_hat"] for e in per_start if "theta_hat" in e]
    write_json(out / "splitchain.json", {
        "gamma1": spec.gamma1, "gamma2": spec.gamma2, "control": control.tolist(),
        "product_minorization": minor.to_dict(), "product_drift": drift.to_dict(),
        "marginal_law_gap": marg, "starts": per_start,
        "theta_hat_max": max(thetas) if thetas else None, "exchangeable": exchangeable,
        "passed": ok,
    })
    return EXIT_OK if ok else EXIT_UNCERTIFIED


RUNNERS = {
    "validate": run_validate,
    "ergodic": run_ergodic,
    "mfg": run_mfg,
    "nash": run_nash,
    "converge": run_converge,
    "splitchain": run_splitchain,
}


def run(cfg):
    """Run one pipeline, write manifest, results and tables; return the exit code."""
    t0 = time.perf_counter()
    try:
        cfg.validate()
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        model = load_model(cfg.model_path)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ModelError as exc:
        print(f"invalid model: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO

    try:
        code = RUNNERS[cfg.pipeline](cfg, model, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_IO
    except (ModelError, ValueError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        code = EXIT_INVALID
    except IterationError as exc:
        print(f"solver failed: {exc}", file=sys.stderr)
        code = EXIT_UNCERTIFIED
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_IO

    write_json(out / "manifest.json", {
        "library": "ergomfg", "version": __version__, "config": cfg.manifest_dict(),
        "exit_code": code,
    })
    # timing and worker count do not influence results and live apart from them
    write_json(out / "runtime.json", {"wall_time_s": time.perf_counter() - t0,
                                      "threads": cfg.threads})
    return code


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _floats(s):
    try:
        return tuple(float(x) for x in s.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


def _ints(s):
    try:
        return tuple(int(x) for x in s.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def build_parser():
    p = _Parser(prog="ergomfg", description=__doc__.splitlines()[0])
    p.add_argument("--model", required=True, help="model JSON file")
    p.add_argument("--pipeline", required=True, choices=PIPELINES)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="worker cap; never changes results")
    p.add_argument("--tol-vi", type=float, default=TOL_VI)
    p.add_argument("--tol-bellman", type=float, default=TOL_BELLMAN)
    p.add_argument("--tol-vd", type=float, default=TOL_VD)
    p.add_argument("--tol-fp", type=float, default=1e-10)
    p.add_argument("--tol-inv", type=float, default=1e-8)
    p.add_argument("--tol-dev", type=float, default=1e-6)
    p.add_argument("--alphas", type=_floats, default=DEFAULT_ALPHAS)
    p.add_argument("--damping", default="harmonic", help="'harmonic' or a constant in (0, 1]")
    p.add_argument("--max-iter", type=int, default=2000)
    p.add_argument("--no-jump", action="store_true",
                   help="plain damped iteration without the fixed-point jump")
    p.add_argument("--mu", type=_floats, default=None,
                   help="environment measure (ergodic, splitchain) or MFG start")
    p.add_argument("--n-players", type=int, default=3)
    p.add_argument("--n-list", type=_ints, default=(2, 3, 5, 8, 12, 20))
    p.add_argument("--backend", choices=("affine", "enumerate", "mc"), default="affine")
    p.add_argument("--mc-samples", type=int, default=4000)
    p.add_argument("--jacobi", action="store_true", help="simultaneous player updates")
    p.add_argument("--relax-separation", action="store_true")
    p.add_argument("--horizon", type=int, default=2000)
    p.add_argument("--n-paths", type=int, default=10_000)
    p.add_argument("--gamma1", type=float, default=None)
    return p


def config_from_args(argv=None):
    a = build_parser().parse_args(argv)
    return ExperimentConfig(
        model_path=a.model, pipeline=a.pipeline, output_dir=a.out, seed=a.seed,
        threads=a.threads, tol_vi=a.tol_vi, tol_bellman=a.tol_bellman, tol_vd=a.tol_vd,
        tol_fp=a.tol_fp, tol_inv=a.tol_inv, tol_dev=a.tol_dev, alphas=tuple(a.alphas),
        damping=a.damping, max_iter=a.max_iter, jump=not a.no_jump, mu=a.mu,
        n_players=a.n_players, n_list=tuple(a.n_list), backend=a.backend,
        mc_samples=a.mc_samples, jacobi=a.jacobi,
        relax_separation=a.relax_separation, horizon=a.horizon, n_paths=a.n_paths,
        gamma1=a.gamma1,
    )


def main(argv=None):
    try:
        cfg = config_from_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
