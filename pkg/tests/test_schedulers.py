import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qswitch import AgnosticPolicy, ConfigError, SwitchState, simulate
from qswitch.schedulers import (
    ArePolicy,
    StaticPolicy,
    are_choose,
    clip_to_lle,
    default_tau,
    maxweight_choose,
    parse_policy,
    priority_choose,
    read_policy_table,
    write_policy_table,
)

from conftest import small_switches


def test_maxweight_examples(fig2a):
    top, _ = fig2a
    assert maxweight_choose(top, (1, 1, 10), (1, 1, 1)).n == (0, 0, 1)
    assert maxweight_choose(top, (6, 6, 10), (1, 1, 1)).n == (1, 1, 0)
    assert maxweight_choose(top, (6, 6, 10), (1, 0, 1)).n == (1, 0, 0)
    assert maxweight_choose(top, (0, 0, 0), (1, 1, 1)).n == (0, 0, 0)


def test_maxweight_ties_go_to_largest_schedule(fig2a):
    top, _ = fig2a
    # weight 10 either way; (1, 1, 0) is lexicographically larger than (0, 0, 1)
    assert maxweight_choose(top, (5, 5, 10), (1, 1, 1)).n == (1, 1, 0)


@settings(max_examples=40, deadline=None)
@given(small_switches(), st.data())
def test_maxweight_is_maximal(sw, data):
    top, _ = sw
    q = np.array(data.draw(st.lists(st.integers(0, 5), min_size=top.num_requests, max_size=top.num_requests)))
    w = top.lle_states[data.draw(st.integers(0, top.num_lle_states - 1))]
    got = maxweight_choose(top, q, w)
    ok = (top.box_sigma <= w).all(axis=1) & (top.box_n <= q).all(axis=1)
    assert (np.array(got.sigma) <= w).all()
    assert (np.array(got.n) <= q).all()
    assert np.dot(q, got.n) == (top.box_n[ok] @ q).max()


def test_priority_reserve_holds_links(fig2a):
    top, _ = fig2a
    # r2 first; with link 2 empty it cannot be served, and reservation keeps links 0, 1 for it
    assert priority_choose(top, (2, 0, 1), (3, 3, 3), (1, 1, 0)).n == (1, 1, 0)
    assert priority_choose(top, (2, 0, 1), (3, 3, 3), (1, 1, 0), reserve=True).n == (0, 0, 0)
    assert priority_choose(top, (2, 0, 1), (3, 3, 3), (1, 1, 1), reserve=True).n == (0, 0, 1)
    # an empty queue reserves nothing
    assert priority_choose(top, (2, 0, 1), (3, 3, 0), (1, 1, 0), reserve=True).n == (1, 1, 0)


def test_clip_to_lle(fig2a):
    top, _ = fig2a
    assert clip_to_lle(top, (1, 1, 1), (1, 1, 1)).n == (1, 1, 0)
    assert clip_to_lle(top, (1, 0, 1), (1, 1, 1)).n == (1, 0, 0)
    assert clip_to_lle(top, (0, 0, 1), (0, 1, 1)).n == (0, 0, 0)


def test_default_tau():
    assert default_tau(1) == 1
    assert default_tau(200) == math.ceil(math.log(200) ** 2) == 29
    assert default_tau(50) == 16
    with pytest.raises(ValueError):
        default_tau(0)


def test_parse_policy():
    assert parse_policy("maxweight").name == "maxweight"
    assert parse_policy("priority-reserve:2,0,1").order == (2, 0, 1)
    are = parse_policy("are", scale=200)
    assert isinstance(are, ArePolicy) and are.tau == 29
    assert parse_policy("are-rvi", tau=3).solver == "rvi"
    for bad in ("maxweigth", "priority:", "priority:a,b", "static:", "are:3"):
        with pytest.raises(ConfigError):
            parse_policy(bad)


def test_priority_order_validated(fig2a):
    top, arr = fig2a
    with pytest.raises(ConfigError, match="permutation"):
        parse_policy("priority:0,1").bind(top, arr)


def test_are_refresh_cadence(fig2a):
    top, arr = fig2a
    pol = parse_policy("are", tau=10)
    simulate(top, arr, pol, 95, 0, SwitchState((5, 5, 5), (0, 0, 0)))
    assert pol.refreshes == 10  # slots 0, 10, ..., 90
    assert pol.last_refresh == 90


def test_are_choose_refreshes_on_boundaries(fig2a):
    top, arr = fig2a
    handle = ArePolicy(tau=4).bind(top, arr)
    assert are_choose((1, 1, 10), (1, 1, 1), 0, handle).n == (0, 0, 1)
    # queue changes between refreshes are ignored until the next window
    assert are_choose((10, 10, 0), (1, 1, 1), 3, handle).n == (0, 0, 1)
    assert are_choose((10, 10, 0), (1, 1, 1), 4, handle).n == (1, 1, 0)
    fresh = ArePolicy(tau=4).bind(top, arr)
    with pytest.raises(RuntimeError):
        are_choose((1, 1, 1), (1, 1, 1), 5, fresh)


def test_are_solvers_agree(fig2a):
    top, arr = fig2a
    init = SwitchState((30, 30, 30), (0, 0, 0))
    a = simulate(top, arr, parse_policy("are", tau=50), 5000, 4, init, stride=10)
    b = simulate(top, arr, parse_policy("are-rvi", tau=50), 5000, 4, init, stride=10)
    np.testing.assert_array_equal(a.q, b.q)


def test_policy_table_round_trip(fig2a, tmp_path):
    top, arr = fig2a
    rng = np.random.default_rng(0)
    probs = np.zeros((8, len(top.box_schedules)))
    for s, w in enumerate(top.lle_states):
        ok = (top.box_sigma <= w).all(axis=1)
        probs[s, ok] = rng.dirichlet(np.ones(ok.sum()))
    pol = AgnosticPolicy(top, 1, probs)
    path = tmp_path / "table.csv"
    with open(path, "w") as fh:
        write_policy_table(pol, fh)
    back = read_policy_table(path, top)
    np.testing.assert_array_equal(back.probs, probs)


def test_static_policy_matches_frequencies(fig2a, tmp_path):
    top, arr = fig2a
    # at w = (1, 1, 1): serve r2 with prob 0.3, otherwise r0 and r1 together
    def probs_for(w):
        row = np.zeros(len(top.box_schedules))
        idx = {s.n: k for k, s in enumerate(top.box_schedules)}
        if tuple(w) == (1, 1, 1):
            row[idx[(0, 0, 1)]] = 0.3
            row[idx[(1, 1, 0)]] = 0.7
        else:
            row[0] = 1.0
        return row

    pol = AgnosticPolicy(top, 1, np.array([probs_for(w) for w in top.lle_states]))
    buf = io.StringIO()
    write_policy_table(pol, buf)
    path = tmp_path / "p.csv"
    path.write_text(buf.getvalue())
    tr = simulate(top, arr, parse_policy(f"static:{path}"), 20000, 1, SwitchState((0, 0, 0), (1, 1, 1)))
    tr2 = simulate(top, arr, StaticPolicy(pol), 20000, 1, SwitchState((0, 0, 0), (1, 1, 1)))
    np.testing.assert_array_equal(tr.n, tr2.n)


def test_policy_table_errors(fig2a, tmp_path):
    top, _ = fig2a
    bad = tmp_path / "bad.csv"
    bad.write_text("phase,w_0,n_0,prob\n")
    with pytest.raises(ConfigError, match="columns"):
        read_policy_table(bad, top)
    bad.write_text("phase,w_0,w_1,w_2,n_0,n_1,n_2,prob\n0,1,1,1,2,0,0,1.0\n")
    with pytest.raises(ConfigError, match="out of range"):
        read_policy_table(bad, top)
