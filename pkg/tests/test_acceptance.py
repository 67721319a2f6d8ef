"""Numbered acceptance criteria. Each test records its title; the terminal summary prints one PASS/FAIL line per criterion."""

import math

import numpy as np
import pytest

from qswitch import (
    AgnosticPolicy,
    SwitchTopology,
    build_transition_matrix,
    evaluate_policy,
    make_arrivals,
    policy_iteration,
    simulate,
    solve_average_reward,
)
from qswitch.analysis import (
    dobrushin_coefficient,
    drain_bound,
    drain_time,
    integrate_fluid,
    regeneration_bound,
    tv_distance,
    verify_uniform_mixing,
)
from qswitch.capacity import max_min_slack, support_function, support_lp
from qswitch.mdp import LleMdp, stationary_distribution
from qswitch.scenarios import PRESETS, small_step_config, clocked_config, fig2a_config, fig2b_config, run_scenario
from qswitch.schedulers import parse_policy

from conftest import random_small


def _single_link():
    top = SwitchTopology(request_links=((0,),), num_links=1, gamma=(1.0,), buffer=1, decoherence=(0.5,))
    return top, make_arrivals([0.0], [0.5])


def test_criterion_1_exact_conditions(record_property, tmp_path):
    record_property("criterion", "1. Small-step counterexample conditions reproduced exactly by the capacity preset report")
    res = run_scenario("capacity-sweep", 0, tmp_path)
    lines = (tmp_path / "capacity-sweep" / "summary.txt").read_text().splitlines()
    assert "condition_A = 1.25 < 4" in lines
    assert "condition_B = 23/400 < 1/4" in lines
    assert "condition_C = 308/400 > 3/4" in lines
    assert res.ok, res.checks


@pytest.mark.slow
def test_criterion_2_maxweight_unstable_are_bounded(record_property, tmp_path):
    record_property("criterion", "2. MaxWeight queue slope positive (sign test), ARE total bounded, c = 200, 2e6 slots, 20 seeds")
    preset = PRESETS["fig2a-drift"]
    assert preset.config.run.horizon == 2_000_000 and preset.config.run.replications >= 20
    assert preset.config.run.scale == 200.0
    res = run_scenario("fig2a-drift", 0, tmp_path)
    assert res.summary["maxweight_sign_test_p"] < 0.05
    assert res.summary["maxweight_median_slope"] > 0
    assert res.summary["are_final_quartile_mean_total"] <= 2 * res.summary["are_mid_mean_total"]
    assert res.checks["maxweight_slope_positive"] and res.checks["are_bounded"]


def test_criterion_3_mdp_solver(record_property):
    record_property("criterion", "3. Bellman residual < 1e-9 on presets; RVI = PI on 50 random configs; gain homogeneity")
    models = {name: p.config for name, p in PRESETS.items()}
    models["clocked"] = clocked_config()
    models["small-step"] = small_step_config()
    for cfg in models.values():
        mdp = LleMdp(cfg.topology, cfg.arrivals)
        for q in np.random.default_rng(1).dirichlet(np.ones(cfg.topology.num_requests), size=4):
            assert solve_average_reward(cfg.topology, cfg.arrivals, q, mdp=mdp).residual < 1e-9
            assert policy_iteration(cfg.topology, cfg.arrivals, q, mdp=mdp).residual < 1e-9
    rng = np.random.default_rng(2024)
    for _ in range(50):
        top, arr = random_small(rng)
        assert top.buffer <= 2 and top.num_links <= 3
        q = rng.uniform(0.0, 1.0, top.num_requests)
        mdp = LleMdp(top, arr)
        rvi = solve_average_reward(top, arr, q, mdp=mdp)
        assert abs(rvi.gain - policy_iteration(top, arr, q, mdp=mdp).gain) < 1e-8
        for c in (2, 7):
            scaled = solve_average_reward(top, arr, c * q, mdp=mdp)
            assert abs(scaled.gain - c * rvi.gain) < 1e-8
            np.testing.assert_array_equal(scaled.table, rvi.table)


def test_criterion_4_stationary_oracle(record_property):
    record_property("criterion", "4. Single-link never-schedule chain: mu = (2/3, 1/3) within 1e-12, simulation within 3 sigma")
    top, arr = _single_link()
    P = build_transition_matrix(top, arr, AgnosticPolicy.never(top))
    # balance: mu_1 = mu_0 * 0.25 + mu_1 * 0.5, so mu_1 = mu_0 / 2
    np.testing.assert_allclose(stationary_distribution(P), [2 / 3, 1 / 3], atol=1e-12, rtol=0)
    T = 1_000_000
    freq = simulate(top, arr, parse_policy("never"), T, 99).z[1:, 0].mean()
    lam2 = 1 - 0.25 - 0.5
    sigma = math.sqrt((2 / 9) * (1 + lam2) / (1 - lam2) / T)
    assert abs(freq - 1 / 3) < 3 * sigma


def test_criterion_5_mixing(record_property):
    record_property("criterion", "5. rho <= 1 - prod d^B + 1e-12 on a 5-point grid; TV contraction on 100 pairs")
    top, arr = fig2a_config().topology, fig2a_config().arrivals
    grid = [(1 / 3, 1 / 3, 1 / 3), (0.5, 0.5, 0.0), (0.0, 0.0, 1.0), (0.1, 0.1, 0.8), (0.45, 0.45, 0.1)]
    rep = verify_uniform_mixing(top, arr, grid)
    bound = regeneration_bound(top)
    assert all(r <= bound + 1e-12 for r in rep.rhos) and all(r < 1 for r in rep.rhos)
    P = build_transition_matrix(top, arr, AgnosticPolicy.never(top))
    rho = dobrushin_coefficient(P)
    rng = np.random.default_rng(5)
    for _ in range(100):
        mu, nu = rng.dirichlet(np.ones(len(P)), size=2)
        assert tv_distance(mu @ P, nu @ P) <= rho * tv_distance(mu, nu) + 1e-15


def test_criterion_6_capacity_cross_check(record_property):
    record_property("criterion", "6. Support function by RVI = LP within 1e-7 on 20 directions; witness rates within 1e-8")
    cfg = fig2a_config()
    top, arr = cfg.topology, cfg.arrivals
    mdp = LleMdp(top, arr)
    for q in np.random.default_rng(6).dirichlet(np.ones(3), size=20):
        assert abs(support_function(top, arr, q, mdp=mdp) - support_lp(top, arr, q, mdp=mdp)[0]) < 1e-7
    cq = max_min_slack(top, arr, arr.request_rates, mdp=mdp)
    rates = evaluate_policy(top, arr, cq.witness).service_rates
    assert np.abs(rates - cq.service_rates).max() < 1e-8


@pytest.mark.slow
def test_criterion_7_fluid_convergence(record_property, tmp_path):
    record_property("criterion", "7. Fluid convergence: sup error strictly decreasing over c = 50, 200, 800; scaled LLE max <= B/c")
    preset = PRESETS["fluid-convergence"]
    assert preset.params["scales"] == [50, 200, 800] and preset.params["seeds"] >= 20
    res = run_scenario("fluid-convergence", 0, tmp_path)
    errors = [float(e) for e in res.summary["errors"].split()]
    assert errors[0] > errors[1] > errors[2]
    lle = [float(v) for v in res.summary["lle_max"].split()]
    assert all(m <= 1 / c for m, c in zip(lle, (50, 200, 800)))
    assert res.checks["errors_decreasing"] and res.checks["lle_vanishes"]


def test_criterion_8_drain_bound(record_property):
    record_property("criterion", "8. Fluid trajectory under the drain bound with LP-certified epsilon and empty by T")
    cfg = fig2b_config()
    top, arr = cfg.topology, cfg.arrivals
    eps = max_min_slack(top, arr, arr.request_rates).slack
    assert eps > 0
    q0 = np.full(3, 1 / 3)
    L0 = 0.5 * float(q0 @ q0)
    T = drain_time(L0, eps, 3)
    traj = integrate_fluid(top, arr, arr.request_rates, q0, 1.1 * T, 0.005)
    assert (traj.lyapunov <= drain_bound(L0, eps, 3, traj.times) + 1e-12).all()
    assert (traj.qbar[traj.times >= T] == 0).all()


# reduced sizes keep the whole criterion under a minute; the code path is the full preset's
DETERMINISM_OVERRIDES = {
    "fig2a-drift": {"horizon": 50_000, "replications": 2},
    "fig2b-timescale": {"horizon": 3000, "replications": 2},
    "counterexample-deterministic": {"horizon": 50_000, "replications": 2},
    "counterexample-appendixF": {"horizon": 50_000, "replications": 2},
    "capacity-sweep": {},
    "fluid-convergence": {"scales": [20, 40], "seeds": 3, "fluid_horizon": 10.0},
}


def test_criterion_9_determinism(record_property, tmp_path):
    record_property("criterion", "9. Every preset rerun with the same seed writes byte-identical CSV")
    assert set(DETERMINISM_OVERRIDES) == set(PRESETS)
    for name, overrides in DETERMINISM_OVERRIDES.items():
        first = run_scenario(name, 11, tmp_path / "first", overrides)
        second = run_scenario(name, 11, tmp_path / "second", overrides)
        csvs = sorted(p for p in first.files if p.suffix == ".csv")
        assert csvs, name
        for path in csvs:
            twin = tmp_path / "second" / name / path.name
            assert path.read_bytes() == twin.read_bytes(), (name, path.name)
        assert second.checks == first.checks
