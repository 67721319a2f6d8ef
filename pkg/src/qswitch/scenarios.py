"""Bundled experiment presets, their self-checks, and parameter sweeps."""

from __future__ import annotations

import csv
import io
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import analysis, capacity
from .dynamics import SwitchState, simulate
from .mdp import LleMdp, evaluate_policy
from .model import (
    SCHEMA_VERSION,
    Config,
    ConfigError,
    RunParams,
    SwitchTopology,
    config_from_dict,
    make_arrivals,
)
from .schedulers import default_tau, parse_policy


# -- bundled configurations -------------------------------------------------------

# r0 on link 0, r1 on link 1, r2 needs one LLE from each of the three links
_SHARED_LINKS = ((0,), (1,), (0, 1, 2))


def fig2_topology() -> SwitchTopology:
    return SwitchTopology(request_links=_SHARED_LINKS, num_links=3, gamma=(1.0, 1.0, 1.0), buffer=1,
                          decoherence=(1e-5, 1e-5, 0.99999))


def fig2a_config(**run) -> Config:
    arrivals = make_arrivals([0.005, 0.005, 0.004], [0.02, 0.02, 0.01])
    return Config(fig2_topology(), arrivals, RunParams(**run))


def fig2b_config(**run) -> Config:
    arrivals = make_arrivals([0.05, 0.05, 0.04], [0.2, 0.2, 0.1])
    return Config(fig2_topology(), arrivals, RunParams(**run))


def clocked_config(lam: float = 0.4) -> Config:
    """One LLE per link every three slots (links 0, 1, 2 in turn), lifetimes approximated by
    near-zero / near-one decoherence, requests arriving just before link 0's slot."""
    top = SwitchTopology(request_links=_SHARED_LINKS, num_links=3, gamma=(1.0, 1.0, 1.0), buffer=1,
                         decoherence=(1e-5, 1e-5, 1.0))
    arrivals = make_arrivals([lam / 3] * 3, [1 / 3] * 3, "bernoulli@3+2",
                             ["deterministic@3+0", "deterministic@3+1", "deterministic@3+2"])
    return Config(top, arrivals)


SMALL_STEP_RATES = {"lambda": (4, 150, 150), "mu": (20, 200, 200)}


def small_step_config(h: float = 1e-3, **run) -> Config:
    """Type 0 needs all three links, types 1 and 2 one link each; time step h of the continuous limit."""
    lam, mu = SMALL_STEP_RATES["lambda"], SMALL_STEP_RATES["mu"]
    top = SwitchTopology(request_links=((0, 1, 2), (1,), (2,)), num_links=3, gamma=(1.0, 1.0, 1.0), buffer=1,
                         decoherence=(1 - h * h, h * h, h * h))
    arrivals = make_arrivals([v * h for v in lam], [v * h for v in mu])
    return Config(top, arrivals, RunParams(**run))


# -- exact arithmetic of the two counterexamples ---------------------------------------


def _fmt(x: Fraction, denominator: int | None = None, decimal: bool = False) -> str:
    """Exact printed form: integer, terminating decimal, or a fraction over `denominator`."""
    if x.denominator == 1:
        return str(x.numerator)
    if decimal and 10**12 % x.denominator == 0:
        return format(x.numerator / x.denominator, ".12g")
    if denominator is not None and (x * denominator).denominator == 1:
        return f"{x * denominator}/{denominator}"
    return f"{x.numerator}/{x.denominator}"


def small_step_conditions(lam=SMALL_STEP_RATES["lambda"], mu=SMALL_STEP_RATES["mu"]) -> dict[str, Any]:
    """MaxWeight instability (A) and priority-to-type-0 stability (B), (C) in the continuous-time limit.

    Returns exact Fractions plus the printed form of each inequality.
    """
    l0, l1, l2 = (Fraction(v) for v in lam)
    m0, m1, m2 = (Fraction(v) for v in mu)
    a_lhs = m0 * (1 - l1 / m1) * (1 - l2 / m2)
    inv_mu0 = 1 / m1 + 1 / m2 - 1 / (m1 + m2) + 1 / m0  # mean time to collect all three LLEs
    c_lhs = 1 - l0 * inv_mu0
    c_rhs = max(l1 / m1, l2 / m2)
    out = {
        "A_lhs": a_lhs, "A_rhs": l0, "A_holds": a_lhs < l0,
        "B_lhs": inv_mu0, "B_rhs": 1 / l0, "B_holds": inv_mu0 < 1 / l0,
        "C_lhs": c_lhs, "C_rhs": c_rhs, "C_holds": c_lhs > l1 / m1 and c_lhs > l2 / m2,
    }
    den = inv_mu0.denominator
    out["A"] = f"{_fmt(a_lhs, decimal=True)} < {_fmt(l0)}"
    out["B"] = f"{_fmt(inv_mu0)} < {_fmt(1 / l0)}"
    out["C"] = f"{_fmt(c_lhs, den)} > {_fmt(c_rhs)}"
    return out


def clocked_conditions(lam=(Fraction(2, 5),) * 3) -> dict[str, Any]:
    """Necessary condition for MaxWeight and sufficient condition for look-ahead allocation."""
    l1, l2, l3 = (Fraction(v) for v in lam)
    mw_rhs = (1 - l1) * (1 - l2)
    return {
        "maxweight_necessary": f"{_fmt(l3)} < {_fmt(mw_rhs)}",
        "maxweight_necessary_holds": l3 < mw_rhs,
        "lookahead_sufficient": f"{_fmt(l1 + l3)} < 1, {_fmt(l2 + l3)} < 1, {_fmt(l3)} < 1",
        "lookahead_sufficient_holds": l1 + l3 < 1 and l2 + l3 < 1 and l3 < 1,
    }


# -- presets ------------------------------------------------------------------------------


@dataclass
class ScenarioResult:
    name: str
    seed: int
    checks: dict[str, bool]
    summary: dict[str, Any]
    tables: dict[str, tuple[list[str], list[list[Any]]]] = field(default_factory=dict)
    files: list[Path] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(self.checks.values())


@dataclass(frozen=True)
class ScenarioPreset:
    name: str
    description: str
    config: Config
    checks: tuple[str, ...]
    params: dict[str, Any]
    runner: Callable[["ScenarioPreset", Config, dict, int, int], ScenarioResult]

    def expand(self, seed: int = 0, overrides: dict | None = None) -> tuple[Config, dict]:
        """Bundled config and parameters with `overrides` applied; run-section keys go to the config."""
        run_keys = {f.name for f in fields(RunParams)}
        params = dict(self.params)
        run_changes = {"seed": int(seed)}
        for key, value in (overrides or {}).items():
            if key in run_keys:
                run_changes[key] = tuple(value) if isinstance(value, list) else value
            elif key in params:
                params[key] = value
            else:
                raise ConfigError(f"scenario {self.name}: unknown override {key!r}")
        return self.config.replace_run(**run_changes), params


def replication_seed(seed: int, rep: int) -> int:
    """Seed shared by every policy in replication `rep`, so policies see common random numbers."""
    return int(np.random.SeedSequence([seed, rep]).generate_state(1, np.uint64)[0] >> np.uint64(1))


def _pmap(fn, items, threads: int):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


@dataclass
class _Run:
    policy: str
    rep: int
    seed: int
    times: np.ndarray
    q: np.ndarray
    z: np.ndarray
    arrivals_r: np.ndarray
    refreshes: int | None


def _replicate(config: Config, policies, replications: int, seed: int, threads: int) -> list[_Run]:
    topology, arrivals, run = config
    q0, z0 = config.initial_state()
    init = SwitchState(tuple(q0.tolist()), tuple(z0.tolist()))

    def one(job):
        rep, pol = job
        s = replication_seed(seed, rep)
        policy = parse_policy(pol, tau=run.tau, scale=run.scale, max_states=run.max_states)
        tr = simulate(topology, arrivals, policy, run.horizon, s, init, stride=run.record_stride)
        return _Run(pol, rep, s, tr.times, tr.q, tr.z, tr.arrivals_r, getattr(policy, "refreshes", None))

    jobs = [(rep, pol) for rep in range(replications) for pol in policies]
    return _pmap(one, jobs, threads)


def _quartile_means(times, values, horizon) -> tuple[float, float]:
    """(mid-run mean over [3/8, 5/8] of the horizon, final-quartile mean over [3/4, 1])."""
    return (analysis.window_mean(times, values, 0.375 * horizon, 0.625 * horizon),
            analysis.window_mean(times, values, 0.75 * horizon, horizon))


def _policy_runs(runs, pol):
    return [r for r in runs if r.policy == pol]


def _run_rows(runs: list[_Run], horizon: int, window: int) -> tuple[list[str], list[list[Any]]]:
    R = runs[0].q.shape[1]
    header = (["replication", "policy", "seed", "total_slope", "drift_median", "mid_mean_total",
               "final_quartile_mean_total"] + [f"final_q_{r}" for r in range(R)]
              + [f"arrivals_{r}" for r in range(R)])
    rows = []
    for r in runs:
        total = r.q.sum(axis=1).astype(np.float64)
        lyap = 0.5 * (r.q.astype(np.float64) ** 2).sum(axis=1)
        mid, fin = _quartile_means(r.times, total, horizon)
        rows.append([r.rep, r.policy, r.seed, analysis._slope(r.times, total),
                     float(np.median(_window_slopes(r.times, lyap, horizon, window))), mid, fin,
                     *r.q[-1].tolist(), *r.arrivals_r.tolist()])
    return header, rows


def _window_slopes(times, values, horizon, window, start_mask=None):
    out = []
    for k, s in enumerate(range(0, horizon, window)):
        sel = (times >= s) & (times <= s + window)
        if sel.sum() >= 2 and (start_mask is None or start_mask(sel)):
            out.append(analysis._slope(times[sel], values[sel]))
    return np.array(out)


def _mean_curve(runs: list[_Run], column: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    return np.mean([column(r.q) for r in runs], axis=0)


def _fig2a_drift(preset, config, params, seed, threads) -> ScenarioResult:
    run = config.run
    policies = list(run.policies)
    runs = _replicate(config, policies, run.replications, seed, threads)
    header, rows = _run_rows(runs, run.horizon, params["drift_window"])
    half_c = run.scale / 2
    mw, are = _policy_runs(runs, "maxweight"), _policy_runs(runs, "are")
    times = runs[0].times

    mw_slopes = [analysis._slope(r.times, r.q.sum(axis=1).astype(np.float64)) for r in mw]
    p_mw = analysis.sign_test(mw_slopes, "greater")
    are_total = _mean_curve(are, lambda q: q.sum(axis=1).astype(np.float64))
    are_mid, are_final = _quartile_means(times, are_total, run.horizon)

    def drift_median(rs, congested_only):
        pooled = []
        for r in rs:
            lyap = 0.5 * (r.q.astype(np.float64) ** 2).sum(axis=1)
            total = r.q.sum(axis=1)
            mask = (lambda sel, total=total: total[sel][0] >= half_c) if congested_only else None
            pooled.extend(_window_slopes(r.times, lyap, run.horizon, params["drift_window"], mask))
        return float(np.median(pooled)) if pooled else math.nan, len(pooled)

    mw_drift, _ = drift_median(mw, False)
    are_drift, are_windows = drift_median(are, True)
    mw_total = _mean_curve(mw, lambda q: q.sum(axis=1).astype(np.float64))

    checks = {
        "maxweight_slope_positive": p_mw < params["alpha"] and float(np.median(mw_slopes)) > 0,
        "are_bounded": are_final <= params["bound_ratio"] * are_mid,
        "maxweight_drift_positive": mw_drift > 0,
        "are_drift_negative_when_congested": are_windows > 0 and are_drift < 0,
    }
    summary = {
        "replications": run.replications,
        "horizon": run.horizon,
        "maxweight_median_slope": float(np.median(mw_slopes)),
        "maxweight_positive_slopes": int(sum(s > 0 for s in mw_slopes)),
        "maxweight_sign_test_p": p_mw,
        "maxweight_median_drift": mw_drift,
        "are_mid_mean_total": are_mid,
        "are_final_quartile_mean_total": are_final,
        "are_median_drift_congested": are_drift,
        "are_congested_windows": are_windows,
        "are_refreshes_per_run": are[0].refreshes if are else 0,
    }
    curve_header = ["t"] + [f"mean_total_{p}" for p in ("maxweight", "are")]
    curve = [[int(t), float(a), float(b)] for t, a, b in zip(times, mw_total, are_total)]
    return ScenarioResult(preset.name, seed, checks, summary, {"runs": (header, rows), "mean_total": (curve_header, curve)})


def _fig2b_timescale(preset, config, params, seed, threads) -> ScenarioResult:
    topology, arrivals, run = config
    c = run.scale
    runs = _replicate(config, list(run.policies), run.replications, seed, threads)
    q0, _ = config.initial_state()
    horizon_fluid = run.horizon / c
    fluid = analysis.integrate_fluid(topology, arrivals, arrivals.request_rates, q0 / c, horizon_fluid,
                                     params["dt"])
    errors, zmax, final = [], 0, []
    for r in runs:
        scaled_t = r.times / c
        errors.append(float(np.abs(r.q / c - fluid.at(scaled_t)).max()))
        zmax = max(zmax, int(r.z.max()))
        final.append(float(r.q[-1].sum()))
    err = float(np.mean(errors))
    checks = {
        "lle_within_buffer": zmax <= topology.buffer,
        "tracks_fluid": err <= params["fluid_error_bound"],
        "queues_drain": float(np.mean(final)) <= params["drain_fraction"] * float(q0.sum()),
    }
    summary = {
        "scale": c,
        "tau": run.tau or default_tau(c),
        "mean_sup_error": err,
        "max_lle": zmax,
        "max_scaled_lle": zmax / c,
        "fluid_drain_time": _first_zero(fluid),
        "mean_final_total": float(np.mean(final)),
    }
    grid = np.linspace(0.0, horizon_fluid, 61)
    ref = fluid.at(grid)
    sim = np.mean([r.q[np.rint(grid * c).astype(np.int64) // run.record_stride] / c for r in runs], axis=0)
    R = topology.num_requests
    header = ["time"] + [f"fluid_q_{r}" for r in range(R)] + [f"sim_q_{r}" for r in range(R)]
    rows = [[float(t), *ref[k].tolist(), *sim[k].tolist()] for k, t in enumerate(grid)]
    return ScenarioResult(preset.name, seed, checks, summary, {"scaled_queues": (header, rows)})


def _first_zero(traj) -> float:
    hit = np.flatnonzero(traj.qbar.sum(axis=1) == 0)
    return float(traj.times[hit[0]]) if len(hit) else math.inf


def _bounded_vs(runs, ref_runs, horizon, ratio, dominance):
    """Final-quartile mean total within `ratio` x the mid-run mean, and below `dominance` x the reference."""
    def means(rs):
        tot = _mean_curve(rs, lambda q: q.sum(axis=1).astype(np.float64))
        return _quartile_means(rs[0].times, tot, horizon)

    mid, fin = means(runs)
    _, ref_fin = means(ref_runs)
    return fin <= ratio * mid and fin <= dominance * ref_fin, mid, fin


def _counterexample_deterministic(preset, config, params, seed, threads) -> ScenarioResult:
    run = config.run
    exact = clocked_conditions()
    clocked = clocked_config()
    cq = capacity.max_min_slack(clocked.topology, clocked.arrivals, clocked.arrivals.request_rates)
    runs = _replicate(config, list(run.policies), run.replications, seed, threads)
    mw = _policy_runs(runs, "maxweight")
    q3_slopes = [analysis._slope(r.times, r.q[:, 2].astype(np.float64)) for r in mw]
    p_mw = analysis.sign_test(q3_slopes, "greater")
    checks = {
        "maxweight_necessary_fails": not exact["maxweight_necessary_holds"],
        "lookahead_sufficient_holds": exact["lookahead_sufficient_holds"],
        "clocked_rates_inside_capacity": cq.verdict == "inside-strict",
        "maxweight_q3_grows": p_mw < params["alpha"],
    }
    summary = {
        "maxweight_necessary": exact["maxweight_necessary"],
        "maxweight_necessary_holds": exact["maxweight_necessary_holds"],
        "lookahead_sufficient": exact["lookahead_sufficient"],
        "lookahead_sufficient_holds": exact["lookahead_sufficient_holds"],
        "clocked_slack": cq.slack,
        "clocked_verdict": cq.verdict,
        "maxweight_median_q3_slope": float(np.median(q3_slopes)),
        "maxweight_sign_test_p": p_mw,
    }
    for pol in run.policies:
        if pol == "maxweight":
            continue
        ok, mid, fin = _bounded_vs(_policy_runs(runs, pol), mw, run.horizon, params["bound_ratio"],
                                   params["dominance"])
        key = pol.split(":")[0].replace("-", "_")
        checks[f"{key}_bounded"] = ok
        summary[f"{key}_mid_mean_total"] = mid
        summary[f"{key}_final_quartile_mean_total"] = fin
    header, rows = _run_rows(runs, run.horizon, params["drift_window"])
    return ScenarioResult(preset.name, seed, checks, summary, {"runs": (header, rows)})


def _counterexample_small_step(preset, config, params, seed, threads) -> ScenarioResult:
    exact = small_step_conditions()
    checks = {"condition_A": exact["A_holds"], "condition_B": exact["B_holds"], "condition_C": exact["C_holds"]}
    summary = {
        "condition_A": exact["A"], "condition_B": exact["B"], "condition_C": exact["C"],
        "A_lhs": exact["A_lhs"], "B_lhs": exact["B_lhs"], "C_lhs": exact["C_lhs"],
        "h": params["h"],
    }
    tables = {}
    if params["simulate"]:
        cfg = small_step_config(params["h"], **{f.name: getattr(config.run, f.name) for f in fields(RunParams)})
        run = cfg.run
        runs = _replicate(cfg, list(run.policies), run.replications, seed, threads)
        mw = _policy_runs(runs, "maxweight")
        q0_slopes = [analysis._slope(r.times, r.q[:, 0].astype(np.float64)) for r in mw]
        p_mw = analysis.sign_test(q0_slopes, "greater")
        checks["maxweight_q0_grows"] = p_mw < params["alpha"]
        summary["maxweight_median_q0_slope"] = float(np.median(q0_slopes))
        summary["maxweight_sign_test_p"] = p_mw
        for pol in run.policies:
            if pol == "maxweight":
                continue
            ok, mid, fin = _bounded_vs(_policy_runs(runs, pol), mw, run.horizon, params["bound_ratio"],
                                       params["dominance"])
            key = pol.split(":")[0].replace("-", "_")
            checks[f"{key}_bounded"] = ok
            summary[f"{key}_mid_mean_total"] = mid
            summary[f"{key}_final_quartile_mean_total"] = fin
        tables["runs"] = _run_rows(runs, run.horizon, params["drift_window"])
    return ScenarioResult(preset.name, seed, checks, summary, tables)


def _capacity_sweep(preset, config, params, seed, threads) -> ScenarioResult:
    topology, arrivals, run = config
    mdp = LleMdp(topology, arrivals, run.max_states)
    dirs = capacity.direction_grid(topology.num_requests, params["directions"])

    def support(q):
        return capacity.support_function(topology, arrivals, q, mdp=mdp), capacity.support_lp(topology, arrivals, q, mdp=mdp)[0]

    vals = _pmap(support, dirs, threads)
    gap = max(abs(a - b) for a, b in vals)
    lam = arrivals.request_rates
    base = capacity.max_min_slack(topology, arrivals, lam, mdp=mdp)
    witness_rates = evaluate_policy(topology, arrivals, base.witness, run.max_states).service_rates
    slacks = []
    for v in params["lambda_r3"]:
        lam_v = lam.copy()
        lam_v[2] = v
        slacks.append(capacity.max_min_slack(topology, arrivals, lam_v, mdp=mdp).slack)
    exact = small_step_conditions()
    checks = {
        "rvi_matches_lp": gap <= params["support_tol"],
        "reference_inside": base.verdict == "inside-strict",
        "witness_rates_match": float(np.abs(witness_rates - base.service_rates).max()) <= params["witness_tol"],
        "slack_monotone": all(b <= a + capacity.SLACK_TOL for a, b in zip(slacks, slacks[1:])),
        "small_step_conditions": exact["A_holds"] and exact["B_holds"] and exact["C_holds"],
    }
    summary = {
        "directions": len(dirs),
        "max_support_gap": gap,
        "reference_slack": base.slack,
        "reference_verdict": base.verdict,
        "witness_rate_gap": float(np.abs(witness_rates - base.service_rates).max()),
        "condition_A": exact["A"], "condition_B": exact["B"], "condition_C": exact["C"],
    }
    R = topology.num_requests
    sup_header = [f"q_{r}" for r in range(R)] + ["support_rvi", "support_lp"]
    sup_rows = [[*q.tolist(), a, b] for q, (a, b) in zip(dirs, vals)]
    slack_rows = [[float(v), s, "inside-strict" if s > capacity.SLACK_TOL else
                   ("boundary" if s >= -capacity.SLACK_TOL else "outside")]
                  for v, s in zip(params["lambda_r3"], slacks)]
    return ScenarioResult(preset.name, seed, checks, summary, {
        "support": (sup_header, sup_rows),
        "slack": (["lambda_r3", "slack", "verdict"], slack_rows),
    })


def _fluid_convergence(preset, config, params, seed, threads) -> ScenarioResult:
    topology, arrivals, run = config
    rep = analysis.fluid_convergence_check(config, params["scales"], params["fluid_horizon"], params["seeds"],
                                           base_seed=seed, dt=params["dt"], threads=threads)
    lam = arrivals.request_rates
    cq = capacity.max_min_slack(topology, arrivals, lam)
    eps = cq.slack
    traj = rep.fluid
    L0 = float(traj.lyapunov[0])
    bound = analysis.drain_bound(L0, eps, topology.num_requests, traj.times)
    T = analysis.drain_time(L0, eps, topology.num_requests)
    after = traj.times >= T
    B = topology.buffer
    checks = {
        "errors_decreasing": rep.decreasing,
        "lle_vanishes": bool(all(m <= B / c for m, c in zip(rep.lle_max, rep.scales))),
        "drain_bound_holds": bool((traj.lyapunov <= bound + 1e-12).all()),
        "drained_by_T": bool(after.any() and (traj.qbar[after] == 0).all()) if T <= traj.times[-1]
        else bool(traj.qbar[-1].sum() == 0),
    }
    summary = {
        "scales": " ".join(map(str, rep.scales)),
        "errors": " ".join(repr(float(e)) for e in rep.errors),
        "lle_max": " ".join(repr(float(v)) for v in rep.lle_max),
        "epsilon": eps,
        "L0": L0,
        "drain_time_bound": T,
        "fluid_drain_time": _first_zero(traj),
    }
    err_rows = [[c, float(e), float(rep.per_seed[i].std(ddof=1)) if rep.per_seed.shape[1] > 1 else 0.0,
                 float(rep.lle_max[i])] for i, (c, e) in enumerate(zip(rep.scales, rep.errors))]
    R = topology.num_requests
    traj_rows = [[float(t), *traj.qbar[k].tolist(), float(traj.lyapunov[k]), float(bound[k])]
                 for k, t in enumerate(traj.times) if k % params["trajectory_every"] == 0]
    return ScenarioResult(preset.name, seed, checks, summary, {
        "errors": (["scale", "mean_sup_error", "seed_std", "max_scaled_lle"], err_rows),
        "fluid": (["time"] + [f"qbar_{r}" for r in range(R)] + ["lyapunov", "drain_bound"], traj_rows),
    })


PRESETS: dict[str, ScenarioPreset] = {
    p.name: p
    for p in (
        ScenarioPreset(
            "fig2a-drift",
            "MaxWeight against ARE on the shared-link switch, c = 200, from Q = (67, 67, 67)",
            fig2a_config(policies=("maxweight", "are"), horizon=2_000_000, scale=200.0,
                         initial_queue=(67, 67, 67), record_stride=1000, replications=20),
            ("maxweight_slope_positive", "are_bounded", "maxweight_drift_positive",
             "are_drift_negative_when_congested"),
            {"alpha": 0.05, "bound_ratio": 2.0, "drift_window": 10_000},
            _fig2a_drift,
        ),
        ScenarioPreset(
            "fig2b-timescale",
            "ARE at c = 200 against the fluid trajectory on the fast-arrival variant",
            fig2b_config(policies=("are",), horizon=12_000, scale=200.0, initial_queue=(67, 67, 67),
                         replications=5),
            ("lle_within_buffer", "tracks_fluid", "queues_drain"),
            {"dt": 0.005, "fluid_error_bound": 0.5, "drain_fraction": 0.25},
            _fig2b_timescale,
        ),
        ScenarioPreset(
            "counterexample-deterministic",
            "Clocked-link counterexample: exact conditions, and MaxWeight's r2 queue on its probabilistic variant",
            fig2a_config(policies=("maxweight", "are", "priority-reserve:2,0,1"), horizon=1_000_000,
                         scale=200.0, record_stride=1000, replications=5),
            ("maxweight_necessary_fails", "lookahead_sufficient_holds", "clocked_rates_inside_capacity",
             "maxweight_q3_grows", "are_bounded", "priority_reserve_bounded"),
            {"alpha": 0.05, "bound_ratio": 2.0, "dominance": 0.25, "drift_window": 10_000},
            _counterexample_deterministic,
        ),
        ScenarioPreset(
            "counterexample-appendixF",
            "Small-step DTMC where MaxWeight starves the three-link type and type-0 priority is stable",
            small_step_config(1e-3, policies=("maxweight", "priority-reserve:0,1,2"), horizon=2_000_000,
                              record_stride=1000, replications=5),
            ("condition_A", "condition_B", "condition_C", "maxweight_q0_grows", "priority_reserve_bounded"),
            {"h": 1e-3, "simulate": True, "alpha": 0.05, "bound_ratio": 2.0, "dominance": 0.25,
             "drift_window": 10_000},
            _counterexample_small_step,
        ),
        ScenarioPreset(
            "capacity-sweep",
            "Support function on 64 directions by RVI and by LP, and slack across the three-link type's rate",
            fig2a_config(),
            ("rvi_matches_lp", "reference_inside", "witness_rates_match", "slack_monotone",
             "small_step_conditions"),
            {"directions": 64, "support_tol": 1e-7, "witness_tol": 1e-8,
             "lambda_r3": [0.001, 0.002, 0.003, 0.004, 0.005, 0.006, 0.007, 0.008]},
            _capacity_sweep,
        ),
        ScenarioPreset(
            "fluid-convergence",
            "Scaled ARE simulations against the fluid model for c in {50, 200, 800}",
            fig2b_config(policies=("are",)),
            ("errors_decreasing", "lle_vanishes", "drain_bound_holds", "drained_by_T"),
            {"scales": [50, 200, 800], "seeds": 20, "fluid_horizon": 60.0, "dt": 0.005, "trajectory_every": 100},
            _fluid_convergence,
        ),
    )
}


def get_preset(name: str) -> ScenarioPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown scenario {name!r}; choose from {', '.join(PRESETS)}") from None


# -- output -----------------------------------------------------------------------------


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    if isinstance(v, Fraction):
        return f"{v.numerator}/{v.denominator}" if v.denominator != 1 else str(v.numerator)
    return str(v)


def table_csv(kind: str, header: list[str], rows: list[list[Any]]) -> str:
    buf = io.StringIO()
    buf.write(f"# qswitch {kind} schema v{SCHEMA_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def summary_text(result: ScenarioResult) -> str:
    lines = [f"# qswitch summary schema v{SCHEMA_VERSION}", f"scenario = {result.name}", f"seed = {result.seed}"]
    lines += [f"{k} = {_cell(v)}" for k, v in result.summary.items()]
    lines += [f"check.{k} = {'pass' if v else 'FAIL'}" for k, v in result.checks.items()]
    lines.append(f"ok = {_cell(result.ok)}")
    return "\n".join(lines) + "\n"


def run_scenario(name: str, seed: int = 0, out_dir: str | Path | None = None, overrides: dict | None = None,
                 threads: int = 1) -> ScenarioResult:
    """Run a preset, evaluate its checks and, with `out_dir`, write out_dir/<name>/{config.toml, *.csv, summary.txt}."""
    preset = get_preset(name)
    config, params = preset.expand(seed, overrides)
    result = preset.runner(preset, config, params, int(seed), max(1, int(threads)))
    if out_dir is not None:
        target = Path(out_dir) / name
        target.mkdir(parents=True, exist_ok=True)
        files = {"config.toml": config.dumps()}
        for kind, (header, rows) in result.tables.items():
            files[f"{kind}.csv"] = table_csv(kind, header, rows)
        files["summary.txt"] = summary_text(result)
        for fname, text in files.items():
            path = target / fname
            path.write_text(text)
            result.files.append(path)
    return result


# -- sweeps -------------------------------------------------------------------------------

_PATH_RE = re.compile(r"^(?P<section>[a-z_]+)\.(?P<key>[a-z_]+)(?:\[(?P<index>\d+)\])?$")


def set_config_value(config: Config, path: str, value) -> Config:
    """Copy of `config` with the entry at `path` (e.g. 'arrivals.request_rates[2]') replaced."""
    m = _PATH_RE.match(path.strip())
    if not m:
        raise ConfigError(f"invalid parameter path {path!r}; expected section.key or section.key[i]")
    doc = config.to_dict()
    section = doc.get(m["section"])
    if not isinstance(section, dict) or m["section"] == "schema":
        raise ConfigError(f"invalid parameter path {path!r}: no section [{m['section']}]")
    key = m["key"]
    if key not in section and not (m["section"] == "run" and key in {f.name for f in fields(RunParams)}):
        raise ConfigError(f"invalid parameter path {path!r}: no key {key!r} in [{m['section']}]")
    if m["index"] is None:
        section[key] = value
    else:
        seq = section.get(key)
        i = int(m["index"])
        if not isinstance(seq, list) or i >= len(seq):
            raise ConfigError(f"invalid parameter path {path!r}: index {i} out of range")
        seq[i] = value
    return config_from_dict(doc)


@dataclass
class SweepTable:
    header: list[str]
    rows: list[list[Any]]

    def to_csv(self) -> str:
        return table_csv("sweep", self.header, self.rows)


def sweep(config: Config, axis: str, values, replications: int | None = None, policies=None, seed: int = 0,
          threads: int = 1) -> SweepTable:
    """One row per (value, replication, policy); replication k uses the same seed for every policy and value."""
    values = list(values)
    policies = list(policies or config.run.policies or (config.run.policy,))
    reps = int(replications if replications is not None else config.run.replications)
    if reps < 1:
        raise ConfigError("replications must be >= 1")
    configs = [set_config_value(config, axis, v) for v in values]
    R = config.topology.num_requests
    header = (["value", "replication", "policy", "seed", "mean_total", "total_slope"]
              + [f"final_q_{r}" for r in range(R)] + [f"arrivals_{r}" for r in range(R)])
    rows = []
    for v, cfg in zip(values, configs):
        for r in _replicate(cfg, policies, reps, seed, threads):
            total = r.q.sum(axis=1).astype(np.float64)
            rows.append([v, r.rep, r.policy, r.seed, float(total.mean()), analysis._slope(r.times, total),
                         *r.q[-1].tolist(), *r.arrivals_r.tolist()])
    return SweepTable(header, rows)
