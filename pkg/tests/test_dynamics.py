import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qswitch import (
    AgnosticPolicy,
    SwitchState,
    SwitchTopology,
    build_transition_matrix,
    make_arrivals,
    simulate,
    step,
)
from qswitch.dynamics import SlotStreams
from qswitch.mdp import stationary_distribution
from qswitch.schedulers import maxweight_choose, parse_policy

from conftest import small_switches


def _python_maxweight(topology):
    return lambda q, w, t, u: maxweight_choose(topology, q, w)


def test_never_schedule_kernel(single_link):
    top, arr = single_link
    P = build_transition_matrix(top, arr, AgnosticPolicy.never(top))
    np.testing.assert_allclose(P, [[0.75, 0.25], [0.5, 0.5]], atol=1e-15)


def test_stationary_two_state(single_link):
    top, arr = single_link
    mu = stationary_distribution(build_transition_matrix(top, arr, AgnosticPolicy.never(top)))
    np.testing.assert_allclose(mu, [2 / 3, 1 / 3], atol=1e-12)


def test_step_order_of_events():
    # link arrives (deterministic), gets consumed the same slot; request arrives and waits for the next slot
    top = SwitchTopology(request_links=((0,),), num_links=1, gamma=(1.0,), buffer=1, decoherence=(1.0,))
    arr = make_arrivals([1.0], [1.0], "deterministic", "deterministic")
    streams = SlotStreams(top, arr, 0)
    out = step(top, arr, SwitchState((0,), (0,)), lambda q, w, t, u: (min(q[0], w[0]),), streams)
    assert out.scheduled.n == (0,) and out.next == SwitchState((1,), (0,))
    out = step(top, arr, out.next, lambda q, w, t, u: (min(q[0], w[0]),), streams, 1)
    assert out.scheduled.n == (1,) and out.successes == (1,) and out.next == SwitchState((1,), (0,))


def test_fast_loop_matches_step_path(fig2a):
    top, arr = fig2a
    init = SwitchState((3, 2, 5), (1, 0, 1))
    fast = simulate(top, arr, parse_policy("maxweight"), 3000, 11, init)
    slow = simulate(top, arr, _python_maxweight(top), 3000, 11, init)
    for name in ("q", "z", "n", "nhat", "a_r", "a_l", "y", "dep_r", "dep_l"):
        np.testing.assert_array_equal(getattr(fast, name), getattr(slow, name), err_msg=name)


def test_fast_loop_matches_step_path_are():
    top = SwitchTopology(request_links=((0,), (0, 1)), num_links=2, gamma=(0.9, 0.6), buffer=2,
                         decoherence=(0.3, 0.4))
    arr = make_arrivals([0.2, 0.15], [0.6, 0.5])
    fast_pol = parse_policy("are", tau=7)
    fast = simulate(top, arr, fast_pol, 500, 5, SwitchState((4, 4), (0, 0)))
    slow_pol = parse_policy("are", tau=7).bind(top, arr)

    def chooser(q, w, t, u):
        if t % 7 == 0:
            slow_pol.refresh(q, t)
        return slow_pol.action(w, t)

    slow = simulate(top, arr, chooser, 500, 5, SwitchState((4, 4), (0, 0)))
    np.testing.assert_array_equal(fast.q, slow.q)
    np.testing.assert_array_equal(fast.n, slow.n)


def test_common_random_numbers(fig2a):
    top, arr = fig2a
    a = simulate(top, arr, parse_policy("maxweight"), 2000, 3)
    b = simulate(top, arr, parse_policy("never"), 2000, 3)
    np.testing.assert_array_equal(a.a_r, b.a_r)
    np.testing.assert_array_equal(a.a_l, b.a_l)


def test_stride_records_same_states(fig2a):
    top, arr = fig2a
    full = simulate(top, arr, parse_policy("maxweight"), 1000, 2)
    coarse = simulate(top, arr, parse_policy("maxweight"), 1000, 2, stride=100)
    np.testing.assert_array_equal(full.q[::100], coarse.q)
    assert coarse.n is None


def test_trace_csv(fig2a):
    top, arr = fig2a
    text = simulate(top, arr, parse_policy("maxweight"), 5, 0).to_csv()
    lines = text.splitlines()
    assert lines[0].startswith("# qswitch trace schema v1")
    assert lines[1].startswith("t,q_0,q_1,q_2,z_0,z_1,z_2,n_0")
    assert len(lines) == 2 + 6


@settings(max_examples=25, deadline=None)
@given(small_switches(), st.integers(0, 10_000), st.sampled_from(["maxweight", "never", "are"]))
def test_trajectory_invariants(sw, seed, pol):
    top, arr = sw
    tr = simulate(top, arr, parse_policy(pol, tau=5), 300, seed, SwitchState((2,) * top.num_requests, (0,) * top.num_links))
    assert (tr.z >= 0).all() and (tr.z <= top.buffer).all()
    assert (tr.q >= 0).all()
    # conservation: departures count every success, so successes beyond the queue come back as idle corrections
    np.testing.assert_array_equal(tr.dep_r[-1], tr.nhat.sum(axis=0))
    idle = np.maximum(tr.nhat - tr.q[:-1], 0).sum(axis=0)
    np.testing.assert_array_equal(tr.q[-1], tr.q[0] + tr.a_r.sum(axis=0) - tr.dep_r[-1] + idle)
    if pol == "maxweight":
        assert (idle == 0).all()
    # schedules fit the capped post-arrival vector; successes never exceed attempts
    w = np.minimum(tr.z[:-1] + tr.a_l, top.buffer)
    assert (tr.sigma <= w).all()
    assert (tr.nhat <= tr.n).all()
    np.testing.assert_array_equal(tr.y, w - tr.sigma)
    assert (tr.z[1:] <= tr.y).all()


def test_long_run_frequencies_within_three_sigma(single_link):
    top, arr = single_link
    T = 1_000_000
    tr = simulate(top, arr, parse_policy("never"), T, 2024)
    freq = tr.z[1:, 0].mean()
    # two-state chain with second eigenvalue 1 - 0.25 - 0.5 = 0.25: asymptotic variance pi(1-pi)(1+l)/(1-l)
    lam2 = 0.25
    sigma = np.sqrt((1 / 3) * (2 / 3) * (1 + lam2) / (1 - lam2) / T)
    assert abs(freq - 1 / 3) < 3 * sigma


def test_binomial_survival_kernel():
    top = SwitchTopology(request_links=((0,),), num_links=1, gamma=(1.0,), buffer=2, decoherence=(0.25,))
    arr = make_arrivals([0.0], [0.0])
    P = build_transition_matrix(top, arr, AgnosticPolicy.never(top))
    np.testing.assert_allclose(P[2], [0.0625, 0.375, 0.5625], atol=1e-15)


def test_initial_state_validation(fig2a):
    top, arr = fig2a
    with pytest.raises(ValueError):
        simulate(top, arr, parse_policy("never"), 10, 0, SwitchState((0, 0, 0), (2, 0, 0)))
