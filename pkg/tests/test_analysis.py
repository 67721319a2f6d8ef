import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qswitch import (
    AgnosticPolicy,
    Config,
    SwitchState,
    SwitchTopology,
    build_transition_matrix,
    evaluate_policy,
    make_arrivals,
    simulate,
)
from qswitch.analysis import (
    FluidStepError,
    MixingViolation,
    dobrushin_coefficient,
    drain_bound,
    drain_time,
    fluid_convergence_check,
    integrate_fluid,
    lyapunov_drift,
    regeneration_bound,
    sign_test,
    tv_distance,
    verify_uniform_mixing,
)
from qswitch.capacity import max_min_slack
from qswitch.mdp import LleMdp, ParametricSolver
from qswitch.schedulers import parse_policy

from conftest import small_switches

FIVE_POINT_GRID = [(1 / 3, 1 / 3, 1 / 3), (0.5, 0.5, 0.0), (0.0, 0.0, 1.0), (0.1, 0.1, 0.8), (0.45, 0.45, 0.1)]


def test_dobrushin_examples():
    assert dobrushin_coefficient(np.eye(4)) == 1.0
    assert dobrushin_coefficient(np.tile([0.2, 0.3, 0.5], (3, 1))) == pytest.approx(0.0, abs=1e-15)
    assert dobrushin_coefficient([[0.75, 0.25], [0.5, 0.5]]) == pytest.approx(0.25, abs=1e-15)


def test_dobrushin_rejects_non_stochastic():
    with pytest.raises(ValueError):
        dobrushin_coefficient([[0.7, 0.2], [0.5, 0.5]])
    with pytest.raises(ValueError):
        dobrushin_coefficient([[1.1, -0.1], [0.5, 0.5]])
    with pytest.raises(ValueError):
        dobrushin_coefficient(np.ones((2, 3)) / 3)


def test_tv_contraction_on_random_pairs(fig2a):
    top, arr = fig2a
    rng = np.random.default_rng(5)
    kernels = [build_transition_matrix(top, arr, AgnosticPolicy.never(top)), rng.dirichlet(np.ones(6), size=6)]
    for k in range(100):
        P = kernels[k % 2]
        rho = dobrushin_coefficient(P)
        mu, nu = rng.dirichlet(np.ones(len(P)), size=2)
        assert tv_distance(mu @ P, nu @ P) <= rho * tv_distance(mu, nu) + 1e-15


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_tv_contraction_property(n, seed):
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.full(n, 0.5), size=n)
    mu, nu = rng.dirichlet(np.ones(n), size=2)
    assert tv_distance(mu @ P, nu @ P) <= dobrushin_coefficient(P) * tv_distance(mu, nu) + 1e-15


def test_never_schedule_single_link_bound(single_link):
    top, arr = single_link
    P = build_transition_matrix(top, arr, AgnosticPolicy.never(top))
    # rows (0.75, 0.25) and (0.5, 0.5); everything decoheres with probability 0.5
    assert dobrushin_coefficient(P) == pytest.approx(0.25, abs=1e-15)
    assert regeneration_bound(top) == pytest.approx(0.5, abs=1e-15)


def test_uniform_mixing_fig2a_grid(fig2a):
    top, arr = fig2a
    rep = verify_uniform_mixing(top, arr, FIVE_POINT_GRID)
    assert len(rep.rhos) == 5
    assert all(0 <= r < 1 for r in rep.rhos)
    assert rep.rho <= rep.rho_bound + 1e-12
    assert rep.rho == max(rep.rhos)
    # tv_curve(t) <= tv_curve(0) * rho^t
    t = np.arange(len(rep.tv_curve))
    assert (rep.tv_curve <= rep.tv_curve[0] * rep.rho**t + 1e-12).all()


def test_full_decoherence_mixes_in_one_step():
    top = SwitchTopology(request_links=((0,), (0, 1)), num_links=2, gamma=(0.9, 0.7), buffer=2, decoherence=(1.0, 1.0))
    arr = make_arrivals([0.1, 0.1], [0.4, 0.6])
    rep = verify_uniform_mixing(top, arr, [(1.0, 0.0), (0.3, 0.7), (0.0, 1.0)])
    assert rep.rhos == [0.0, 0.0, 0.0] and rep.rho_bound == 0.0


@settings(max_examples=25, deadline=None)
@given(small_switches(), st.lists(st.floats(0.0, 1.0), min_size=3, max_size=3))
def test_mixing_bound_holds_for_small_switches(sw, qs):
    top, arr = sw
    q = qs[: top.num_requests]
    rep = verify_uniform_mixing(top, arr, [q])
    assert 0 <= rep.rho <= regeneration_bound(top) + 1e-12


def test_mixing_violation_carries_context(fig2a, monkeypatch):
    top, arr = fig2a
    import qswitch.analysis as an

    monkeypatch.setattr(an, "regeneration_bound", lambda topology: 0.0)
    with pytest.raises(MixingViolation, match=r"q=.*rows"):
        verify_uniform_mixing(top, arr, [(1, 1, 1)])


def test_fluid_conservation(fig2a):
    top, arr = fig2a
    traj = integrate_fluid(top, arr, arr.request_rates, [0.3, 0.3, 0.4], 10.0, 0.01)
    resid = traj.qbar - traj.qbar[0] - np.outer(traj.times, traj.lam) + traj.dbar
    assert np.abs(resid).max() < 1e-12
    assert (traj.qbar >= 0).all()
    # departures are nondecreasing and Lipschitz with constant at most B per type
    inc = np.diff(traj.dbar, axis=0)
    assert (inc >= -1e-12).all()
    assert (inc <= top.buffer * 0.01 + 1e-12).all()


def test_fluid_drain_bound(fig2a):
    top, arr = fig2a
    cq = max_min_slack(top, arr, arr.request_rates)
    eps = cq.slack
    assert eps > 0
    q0 = np.array([0.3, 0.3, 0.4])
    L0 = 0.5 * float(q0 @ q0)
    T = drain_time(L0, eps, 3)
    traj = integrate_fluid(top, arr, arr.request_rates, q0, 1.05 * T, 0.05)
    assert (traj.lyapunov <= drain_bound(L0, eps, 3, traj.times) + 1e-12).all()
    after = traj.times >= T
    assert after.any() and (traj.qbar[after] == 0).all()


def test_fluid_with_no_arrivals_drains_at_full_rate(single_link):
    top, arr = single_link
    # serving every LLE: rate equals the link arrival probability 0.5
    traj = integrate_fluid(top, arr, [0.0], [1.0], 3.0, 0.01)
    hit = int(np.argmax(traj.qbar[:, 0] == 0))
    np.testing.assert_allclose(traj.qbar[:hit, 0], 1.0 - 0.5 * traj.times[:hit], atol=1e-12)
    assert traj.times[hit] == pytest.approx(2.0, abs=0.011)
    assert (traj.qbar[hit:] == 0).all()


@pytest.mark.parametrize("scheme", ["implicit", "explicit"])
def test_single_type_slope(scheme):
    # serve-always on one link with B = 1: w = 1 exactly when a link arrives, so throughput is gamma * p
    gamma, p, lam = 0.8, 0.5, 0.1
    top = SwitchTopology(request_links=((0,),), num_links=1, gamma=(gamma,), buffer=1, decoherence=(0.3,))
    arr = make_arrivals([lam], [p])
    traj = integrate_fluid(top, arr, [lam], [1.0], 2.0, 0.01, scheme=scheme)
    np.testing.assert_allclose(traj.qbar[:, 0], 1.0 + (lam - gamma * p) * traj.times, atol=1e-12)


def test_fluid_boundary_caps_departures_at_arrivals(single_link):
    top, arr = single_link
    traj = integrate_fluid(top, arr, [0.2], [0.0], 1.0, 0.01, scheme="explicit")
    assert (traj.qbar == 0).all()
    np.testing.assert_allclose(traj.rates, 0.2, atol=1e-12)


def test_fluid_optimality_inequality(fig2a):
    top, arr = fig2a
    traj = integrate_fluid(top, arr, arr.request_rates, [0.3, 0.3, 0.4], 20.0, 0.05)
    rng = np.random.default_rng(11)
    feasible = np.array([(top.box_sigma <= w).all(axis=1) for w in top.lle_states])
    rates = []
    for _ in range(30):
        probs = np.zeros_like(feasible, dtype=float)
        for s in range(len(probs)):
            probs[s, feasible[s]] = rng.dirichlet(np.ones(feasible[s].sum()))
        rates.append(evaluate_policy(top, arr, AgnosticPolicy(top, 1, probs)).service_rates)
    rates = np.array(rates)
    busy = (traj.qbar[1:] > 0).all(axis=1)
    assert busy.sum() > 10
    for q, d in zip(traj.qbar[1:][busy], traj.rates[busy]):
        assert q @ d >= (rates @ q).max() - 1e-9


def test_step_halving_detects_coarse_step(fig2a):
    top, arr = fig2a
    # the optimal policy switches along this path, so a 7-unit step overshoots the switch
    q0 = [0.5, 0.1, 0.4]
    with pytest.raises(FluidStepError, match="too coarse"):
        integrate_fluid(top, arr, arr.request_rates, q0, 60.0, 7.0, check_tol=1e-3)
    integrate_fluid(top, arr, arr.request_rates, q0, 60.0, 0.05, check_tol=1e-3)
    with pytest.raises(ValueError):
        integrate_fluid(top, arr, arr.request_rates, [0.3, 0.3, 0.4], 5.0, 0.0)


def test_drift_of_constant_trace_is_zero(fig2a):
    top, _ = fig2a
    arr = make_arrivals([0.0, 0.0, 0.0], [0.0, 0.0, 0.0])
    tr = simulate(top, arr, parse_policy("maxweight"), 500, 0, SwitchState((4, 2, 7), (0, 0, 0)))
    rep = lyapunov_drift(tr, 50)
    assert len(rep.slopes) == 10 and (rep.slopes == 0).all()
    with pytest.raises(ValueError):
        lyapunov_drift(tr, 0)


def test_pure_arrival_drift():
    # no service: E L(t) = 1/2 (lam^2 t^2 + lam (1 - lam) t), slope lam^2 t + lam (1 - lam) / 2
    lam, T, window = 0.5, 40_000, 2000
    top = SwitchTopology(request_links=((0,),), num_links=1, gamma=(1.0,), buffer=1, decoherence=(0.5,))
    arr = make_arrivals([lam], [0.0])
    slopes, expected = [], []
    for seed in range(10):
        rep = lyapunov_drift(simulate(top, arr, parse_policy("never"), T, seed), window)
        slopes.append(rep.slopes)
        expected = lam**2 * (rep.window_start + window / 2) + lam * (1 - lam) / 2
    mean = np.mean(slopes, axis=0)
    assert np.abs(mean / expected - 1).max() < 0.05
    assert np.mean(slopes) / np.mean(expected) == pytest.approx(1.0, abs=0.01)


def test_sign_test():
    assert sign_test([1.0] * 20) == pytest.approx(0.5**20)
    assert sign_test([-1.0] * 20, alternative="less") == pytest.approx(0.5**20)
    assert sign_test([0.0, 0.0]) == 1.0


def test_deterministic_trace_equals_fluid_line():
    # no request arrivals, one LLE every slot used immediately: Q(ct)/c = 1 - t exactly
    top = SwitchTopology(request_links=((0,),), num_links=1, gamma=(1.0,), buffer=1, decoherence=(1.0,))
    arr = make_arrivals([0.0], [1.0], "bernoulli", "deterministic")
    rep = fluid_convergence_check(Config(top, arr), scales=(100, 200), horizon=2.0, seeds=1, qbar0=[1.0])
    assert rep.errors.max() < 1e-12
    assert (rep.fluid.qbar[-1] == 0).all()


def test_fluid_convergence_check_small(fig2a):
    from qswitch.scenarios import fig2b_config

    rep = fluid_convergence_check(fig2b_config(), scales=(20, 40), horizon=5.0, seeds=2)
    assert rep.per_seed.shape == (2, 2)
    assert (rep.lle_max <= 1 / np.array([20, 40]) + 1e-15).all()
    with pytest.raises(ValueError):
        fluid_convergence_check(fig2b_config(), scales=(40, 20))
    with pytest.raises(ValueError):
        fluid_convergence_check(fig2b_config(), scales=(20,), qbar0=[1.0, 1.0, 1.0])


def test_parametric_solver_counts_resolves(fig2a):
    top, arr = fig2a
    solver = ParametricSolver(LleMdp(top, arr))
    traj = integrate_fluid(top, arr, arr.request_rates, [0.3, 0.3, 0.4], 2.0, 0.1, solver=solver)
    assert traj.resolves == solver.solves > 0
    assert math.isclose(traj.times[-1], 2.0)
