"""Capacity-region membership through stationary service rates of agnostic policies.

Achievable service vectors are the linear image of the occupation measures
x(s, n) of the LLE chain (post-arrival state s, schedule n). Membership of an
arrival vector is decided by the largest uniform slack t with
service_r(x) >= lambda_r + t for all r.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import qmc

from . import lp
from .dynamics import AgnosticPolicy
from .mdp import LleMdp, solve_average_reward
from .model import DEFAULT_MAX_STATES, ArrivalSpec, SwitchTopology

SLACK_TOL = 1e-9


@dataclass
class CapacityQuery:
    lam: np.ndarray
    epsilon: float
    slack: float
    verdict: str  # "inside-strict", "boundary" or "outside"
    witness: AgnosticPolicy  # occupation-measure maximizer turned into a policy
    service_rates: np.ndarray  # the LP's service vector for the witness
    direction: np.ndarray  # separating direction q >= 0, sum 1, from the service-row duals
    occupation: np.ndarray

    @property
    def in_c_eps(self) -> bool:
        return self.slack >= self.epsilon - SLACK_TOL


class _OccupationLp:
    """Constraint rows shared by the slack and support LPs: sum x = 1 and flow balance."""

    def __init__(self, mdp: LleMdp):
        self.mdp = mdp
        S, npairs = mdp.num_states, mdp.num_pairs
        inflow = mdp.P.T  # (S, pairs)
        outflow = np.zeros((S, npairs))
        outflow[mdp.pair_state, np.arange(npairs)] = 1.0
        # balance rows sum to zero, so the last one is implied; keeping it lets rounding
        # pass near-singular bases off as regular ones and the simplex then stalls on noise
        self.A_eq = np.vstack([np.ones((1, npairs)), (outflow - inflow)[:-1]])
        self.b_eq = np.zeros(S)
        self.b_eq[0] = 1.0

    def policy(self, x: np.ndarray) -> AgnosticPolicy:
        """Condition x on the state; states with no mass get the zero schedule."""
        mdp = self.mdp
        probs = np.zeros((mdp.num_states, len(mdp.topology.box_schedules)))
        np.add.at(probs, (mdp.pair_state, mdp.pair_k), np.clip(x, 0.0, None))
        mass = probs.sum(axis=1)
        empty = mass <= 1e-15
        probs[~empty] /= mass[~empty, None]
        probs[empty, 0] = 1.0
        return AgnosticPolicy(mdp.topology, mdp.nphase, probs)


def _check(res: lp.LpResult, what: str):
    if not res.success:
        raise lp.LpError(f"{what}: simplex ended with status {res.status} after {res.iterations} pivots")


def max_min_slack(
    topology: SwitchTopology,
    arrivals: ArrivalSpec,
    lam,
    epsilon: float = 0.0,
    mdp: LleMdp | None = None,
    max_states: int = DEFAULT_MAX_STATES,
) -> CapacityQuery:
    """Largest t such that some agnostic policy serves every type at rate >= lambda_r + t."""
    lam = np.asarray(lam, dtype=np.float64)
    if (lam < 0).any():
        raise ValueError(f"arrival rates must be nonnegative, got {lam}")
    mdp = mdp or LleMdp(topology, arrivals, max_states)
    occ = _OccupationLp(mdp)
    npairs, R = mdp.num_pairs, topology.num_requests
    # variables: x (pairs), t+ , t-
    c = np.zeros(npairs + 2)
    c[npairs], c[npairs + 1] = -1.0, 1.0
    A_ub = np.hstack([-mdp.G.T, np.ones((R, 1)), -np.ones((R, 1))])
    b_ub = -lam
    A_eq = np.hstack([occ.A_eq, np.zeros((occ.A_eq.shape[0], 2))])
    res = lp.linprog(c, A_ub, b_ub, A_eq, occ.b_eq)
    _check(res, "capacity LP")
    x = np.clip(res.x[:npairs], 0.0, None)
    x /= x.sum()
    slack = -res.fun
    direction = np.clip(-res.duals_ub, 0.0, None)
    if direction.sum() > 0:
        direction /= direction.sum()
    if slack > SLACK_TOL:
        verdict = "inside-strict"
    elif slack >= -SLACK_TOL:
        verdict = "boundary"
    else:
        verdict = "outside"
    return CapacityQuery(lam, epsilon, slack, verdict, occ.policy(x), mdp.G.T @ x, direction, x)


def support_function(topology: SwitchTopology, arrivals: ArrivalSpec, q, mdp: LleMdp | None = None,
                     max_states: int = DEFAULT_MAX_STATES) -> float:
    """max over agnostic policies of sum_r q_r * service_r, via relative value iteration."""
    return solve_average_reward(topology, arrivals, q, mdp=mdp, max_states=max_states).gain


def support_lp(topology: SwitchTopology, arrivals: ArrivalSpec, q, mdp: LleMdp | None = None,
               max_states: int = DEFAULT_MAX_STATES) -> tuple[float, np.ndarray]:
    """Same maximum over occupation measures with the simplex; returns (value, service rates)."""
    mdp = mdp or LleMdp(topology, arrivals, max_states)
    occ = _OccupationLp(mdp)
    res = lp.linprog(-(mdp.G @ np.asarray(q, dtype=np.float64)), A_eq=occ.A_eq, b_eq=occ.b_eq)
    _check(res, "support LP")
    return -res.fun, mdp.G.T @ res.x


def direction_grid(num_requests: int, count: int = 64) -> np.ndarray:
    """Unit vectors first, then low-discrepancy points spread uniformly over the probability simplex."""
    dirs = list(np.eye(num_requests))
    if num_requests > 1 and count > num_requests:
        sob = qmc.Sobol(num_requests, scramble=False)
        m = int(np.ceil(np.log2(count + 1)))
        pts = sob.random_base2(m)[1:count + 1]  # the first Sobol point is the origin
        e = -np.log1p(-np.clip(pts, 0.0, 1.0 - 1e-12))
        e = e[e.sum(axis=1) > 0]
        dirs.extend(e / e.sum(axis=1, keepdims=True))
    return np.array(dirs[:count])


def support_table(topology: SwitchTopology, arrivals: ArrivalSpec, directions: np.ndarray,
                  max_states: int = DEFAULT_MAX_STATES) -> np.ndarray:
    mdp = LleMdp(topology, arrivals, max_states)
    return np.array([support_function(topology, arrivals, q, mdp=mdp) for q in directions])
