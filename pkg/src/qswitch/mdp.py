"""Average-reward MDP over the LLE process, and stationary analysis of agnostic policies.

The decision is taken after link arrivals, so the MDP state is the post-arrival
pair (phase, w) and the actions at w are the feasible schedules. Rewards are
linear in the queue parameter q: u(w, n) = sum_r q_r * gamma_r * n_r.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.csgraph import connected_components

from .dynamics import AgnosticPolicy, LleKernels, build_transition_matrix, post_decision_rows
from .model import DEFAULT_MAX_STATES, ArrivalSpec, Schedule, SwitchTopology

log = logging.getLogger(__name__)

RVI_TOL = 1e-10
TIE_TOL = 1e-9
# aperiodicity transform used only when link arrivals are periodic
APERIODIC_MIX = 0.5


class SolverError(RuntimeError):
    def __init__(self, msg, residual=None):
        super().__init__(msg)
        self.residual = residual


class LleMdp:
    """State-action structure shared by every solver.

    Pairs (state, action) are stored state-major with actions in ascending
    lexicographic order of n, so the last maximizer of a state is the
    lexicographically largest schedule.
    """

    def __init__(self, topology: SwitchTopology, arrivals: ArrivalSpec, max_states: int = DEFAULT_MAX_STATES):
        self.topology = topology
        self.arrivals = arrivals
        self.kernels = kern = LleKernels(topology, arrivals, max_states)
        self.nphase, self.nz = kern.nphase, kern.nz
        S = self.num_states = kern.num_states
        feasible = kern.residual_index >= 0  # (nz, K)
        rows = post_decision_rows(kern)  # (nz, K, nz): w, k -> pre-arrival z'
        pair_state, pair_k, blocks = [], [], []
        for s in range(S):
            phi, wi = divmod(s, self.nz)
            ks = np.flatnonzero(feasible[wi])
            pair_state.extend([s] * len(ks))
            pair_k.extend(ks.tolist())
        self.pair_state = np.array(pair_state, dtype=np.int64)
        self.pair_k = np.array(pair_k, dtype=np.int64)
        self.ptr = np.searchsorted(self.pair_state, np.arange(S + 1))
        npairs = len(self.pair_k)
        P = np.zeros((npairs, S))
        for phi in range(self.nphase):
            nxt = (phi + 1) % self.nphase
            sel = (self.pair_state // self.nz) == phi
            w_idx = self.pair_state[sel] % self.nz
            P[sel, nxt * self.nz:(nxt + 1) * self.nz] = rows[w_idx, self.pair_k[sel]] @ kern.arrival[nxt]
        del blocks
        self.P = P
        n = topology.box_n[self.pair_k]
        self.pair_n = n
        self.G = n * np.array(topology.gamma)  # reward per unit of q_r
        self.uses = n > 0
        self.zero_pair = self.ptr[:-1]  # the zero schedule is first at every state

    @property
    def num_pairs(self) -> int:
        return len(self.pair_k)

    def rewards(self, q) -> np.ndarray:
        return self.G @ np.asarray(q, dtype=np.float64)

    def segmax(self, values: np.ndarray) -> np.ndarray:
        return np.maximum.reduceat(values, self.ptr[:-1])

    def _tol(self, q) -> float:
        r = np.abs(self.G @ np.abs(np.asarray(q, dtype=np.float64)))
        return TIE_TOL * max(1.0, float(r.max(initial=0.0)))

    def greedy(self, qvals: np.ndarray, q, current: np.ndarray | None = None) -> np.ndarray:
        """Maximizing pair per state.

        Near-maximizers (within a reward-scaled tolerance) are ties. With
        `current` given, a tied current action is kept (policy-iteration rule);
        otherwise ties go to the lexicographically largest n that serves only
        types with positive weight.
        """
        tol = self._tol(q)
        best = self.segmax(qvals)
        near = qvals >= best[self.pair_state] - tol
        if current is not None:
            keep = near[current]
        weight = np.asarray(q, dtype=np.float64) * np.array(self.topology.gamma)
        wasteful = (self.uses & (weight <= 0)).any(axis=1)
        idx = np.arange(self.num_pairs)
        pick = np.maximum.reduceat(np.where(near & ~wasteful, idx, -1), self.ptr[:-1])
        fallback = np.maximum.reduceat(np.where(near, idx, -1), self.ptr[:-1])
        pick = np.where(pick >= 0, pick, fallback)
        if current is not None:
            pick = np.where(keep, current, pick)
        return pick

    def bellman(self, V: np.ndarray, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        qv = r + self.P @ V
        return self.segmax(qv), qv

    def evaluate_choice(self, choice: np.ndarray, rhs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Bias h (h[0] = 0) and gain g for a deterministic policy; rhs is (S,) or (S, m)."""
        S = self.num_states
        A = np.zeros((S + 1, S + 1))
        A[:S, :S] = np.eye(S) - self.P[choice]
        A[:S, S] = 1.0
        A[S, 0] = 1.0
        b = np.zeros((S + 1,) + rhs.shape[1:])
        b[:S] = rhs
        sol = np.linalg.solve(A, b)
        return sol[:S], sol[S]

    def policy_of(self, choice: np.ndarray) -> AgnosticPolicy:
        return AgnosticPolicy.deterministic(self.topology, self.nphase, self.pair_k[choice])

    def table_of(self, choice: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(self.pair_n[choice])


@dataclass
class MdpSolution:
    gain: float
    bias: np.ndarray  # over post-arrival states (phase, w); bias[0] = 0 at phase 0, w = 0
    choice: np.ndarray  # maximizing pair index per state
    residual: float
    iterations: int
    q: np.ndarray
    mdp: LleMdp = field(repr=False)

    def action(self, w, phase: int = 0) -> Schedule:
        s = phase * self.mdp.nz + self.mdp.topology.lle_index(w)
        return self.mdp.topology.box_schedules[self.mdp.pair_k[self.choice[s]]]

    @property
    def policy(self) -> dict[tuple[int, tuple[int, ...]], Schedule]:
        top = self.mdp.topology
        out = {}
        for s in range(self.mdp.num_states):
            phi, wi = divmod(s, self.mdp.nz)
            out[(phi, tuple(int(v) for v in top.lle_states[wi]))] = top.box_schedules[self.mdp.pair_k[self.choice[s]]]
        return out

    @property
    def table(self) -> np.ndarray:
        return self.mdp.table_of(self.choice)

    def as_policy(self) -> AgnosticPolicy:
        return self.mdp.policy_of(self.choice)


def bellman_residual(mdp: LleMdp, q, V: np.ndarray, gain: float) -> float:
    TV, _ = mdp.bellman(V, mdp.rewards(q))
    return float(np.abs(TV - V - gain).max())


def _mdp(topology, arrivals, mdp, max_states):
    if mdp is not None:
        return mdp
    return LleMdp(topology, arrivals, max_states)


def solve_average_reward(
    topology: SwitchTopology,
    arrivals: ArrivalSpec,
    q,
    tol: float = RVI_TOL,
    max_iter: int = 500_000,
    mdp: LleMdp | None = None,
    max_states: int = DEFAULT_MAX_STATES,
) -> MdpSolution:
    """Relative value iteration with span stopping, reference state (phase 0, w = 0).

    `tol` is scaled by max(1, largest one-step reward). Periodic link arrivals
    are handled with the aperiodicity transform, which leaves gain and bias unchanged.
    """
    mdp = _mdp(topology, arrivals, mdp, max_states)
    q = np.asarray(q, dtype=np.float64)
    if (q < 0).any():
        raise ValueError(f"queue parameter must be nonnegative, got {q}")
    r = mdp.rewards(q)
    scale = max(1.0, float(np.abs(r).max(initial=0.0)))
    P = mdp.P
    alpha = 1.0
    if mdp.nphase > 1:
        alpha = APERIODIC_MIX
        P = alpha * P
        P[np.arange(mdp.num_pairs), mdp.pair_state] += 1.0 - alpha
        r = alpha * r
    V = np.zeros(mdp.num_states)
    span = np.inf
    for it in range(1, max_iter + 1):
        TV = np.maximum.reduceat(r + P @ V, mdp.ptr[:-1])
        diff = TV - V
        span = float(diff.max() - diff.min())
        gain = 0.5 * float(diff.max() + diff.min()) / alpha
        V = TV - TV[0]
        if span < tol * scale:
            break
    else:
        raise SolverError(f"relative value iteration hit {max_iter} iterations, span residual {span:.3e}", span)
    _, qv = mdp.bellman(V, mdp.rewards(q))
    choice = mdp.greedy(qv, q)
    return MdpSolution(gain, V, choice, bellman_residual(mdp, q, V, gain), it, q, mdp)


def policy_iteration(
    topology: SwitchTopology,
    arrivals: ArrivalSpec,
    q,
    mdp: LleMdp | None = None,
    init: np.ndarray | None = None,
    max_states: int = DEFAULT_MAX_STATES,
) -> MdpSolution:
    """Howard policy iteration with exact evaluation; ties keep the incumbent action."""
    mdp = _mdp(topology, arrivals, mdp, max_states)
    q = np.asarray(q, dtype=np.float64)
    r = mdp.rewards(q)
    choice = mdp.greedy(r, q) if init is None else np.asarray(init)
    seen = set()
    it = 0
    while True:
        it += 1
        key = choice.tobytes()
        if key in seen:
            raise SolverError("policy iteration revisited a policy; tie handling is broken")
        seen.add(key)
        h, g = mdp.evaluate_choice(choice, r[choice])
        _, qv = mdp.bellman(h, r)
        new = mdp.greedy(qv, q, current=choice)
        if np.array_equal(new, choice):
            break
        choice = new
    final = mdp.greedy(qv, q)
    if not np.array_equal(final, choice):
        # same gain, tie-broken representative; its bias coincides with h up to a constant
        choice = final
        h, g = mdp.evaluate_choice(choice, r[choice])
    g = float(g)
    return MdpSolution(g, h, choice, bellman_residual(mdp, q, h, g), it, q, mdp)


@dataclass
class StationaryAnalysis:
    mu: np.ndarray  # pre-arrival (phase, z) distribution
    nu: np.ndarray  # post-arrival (phase, w) distribution seen by the scheduler
    service_rates: np.ndarray  # expected successful departures per slot, per type
    transition: np.ndarray

    def gain(self, q) -> float:
        return float(np.dot(q, self.service_rates))


def stationary_distribution(P: np.ndarray, start: int = 0) -> np.ndarray:
    """Stationary law of a finite chain by a direct linear solve on its recurrent class.

    With several closed classes the one reached from `start` is used (with a warning).
    """
    S = P.shape[0]
    ncomp, labels = connected_components(P > 0, directed=True, connection="strong")
    closed = []
    for c in range(ncomp):
        members = labels == c
        if P[np.ix_(members, ~members)].sum() <= 0:
            closed.append(c)
    if len(closed) == 1:
        cls = labels == closed[0]
    else:
        reach = np.zeros(S, dtype=bool)
        frontier = [start]
        reach[start] = True
        while frontier:
            i = frontier.pop()
            for j in np.flatnonzero(P[i] > 0):
                if not reach[j]:
                    reach[j] = True
                    frontier.append(j)
        cls_id = next(c for c in closed if reach[labels == c].any())
        cls = labels == cls_id
        warnings.warn(f"chain has {len(closed)} closed classes; using the one reachable from state {start}")
    idx = np.flatnonzero(cls)
    Pc = P[np.ix_(idx, idx)]
    m = len(idx)
    A = Pc.T - np.eye(m)
    A[-1, :] = 1.0
    b = np.zeros(m)
    b[-1] = 1.0
    sol = np.linalg.solve(A, b)
    sol = np.clip(sol, 0.0, None)
    mu = np.zeros(S)
    mu[idx] = sol / sol.sum()
    return mu


def evaluate_policy(
    topology: SwitchTopology,
    arrivals: ArrivalSpec,
    policy: AgnosticPolicy,
    max_states: int = DEFAULT_MAX_STATES,
) -> StationaryAnalysis:
    """Stationary LLE law and per-type service rates of an agnostic policy."""
    P = build_transition_matrix(topology, arrivals, policy, max_states)
    kern = LleKernels(topology, arrivals, max_states)
    mu = stationary_distribution(P)
    nz = kern.nz
    nu = np.concatenate([mu[phi * nz:(phi + 1) * nz] @ kern.arrival[phi] for phi in range(kern.nphase)])
    mean_n = nu @ policy.probs @ topology.box_n
    rates = mean_n * np.array(topology.gamma)
    return StationaryAnalysis(mu, nu, rates, P)


@dataclass
class _PolicyData:
    choice: np.ndarray
    M: np.ndarray  # (pairs, R): q-values per unit q_r under this policy's bias
    service: np.ndarray  # (R,) gain per unit q_r, i.e. gamma-weighted service rate
    table: np.ndarray


class ParametricSolver:
    """Optimal agnostic policy as a function of q, warm-started from the previous answer.

    Bias and gain are linear in q for a fixed policy, so a cached policy is
    re-certified with one matrix-vector product; otherwise policy iteration
    continues from it. The answer equals `policy_iteration(q)`.
    """

    def __init__(self, mdp: LleMdp):
        self.mdp = mdp
        self._cache: dict[bytes, _PolicyData] = {}
        self._last: _PolicyData | None = None
        self.solves = 0
        self.certified = 0

    def _data(self, choice: np.ndarray) -> _PolicyData:
        key = choice.tobytes()
        d = self._cache.get(key)
        if d is None:
            mdp = self.mdp
            H, g = mdp.evaluate_choice(choice, mdp.G[choice])
            d = _PolicyData(choice.copy(), mdp.G + mdp.P @ H, np.asarray(g), mdp.table_of(choice))
            self._cache[key] = d
        return d

    def solve(self, q) -> _PolicyData:
        q = np.asarray(q, dtype=np.float64)
        mdp = self.mdp
        self.solves += 1
        if self._last is not None:
            qv = self._last.M @ q
            if np.array_equal(mdp.greedy(qv, q), self._last.choice):
                self.certified += 1
                return self._last
            choice = self._last.choice
        else:
            choice = mdp.greedy(mdp.rewards(q), q)
        seen = set()
        while True:
            key = choice.tobytes()
            if key in seen:
                raise SolverError("parametric policy iteration revisited a policy")
            seen.add(key)
            d = self._data(choice)
            qv = d.M @ q
            new = mdp.greedy(qv, q, current=choice)
            if np.array_equal(new, choice):
                final = mdp.greedy(qv, q)
                if np.array_equal(final, choice):
                    break
                new = final
            choice = new
        self._last = d
        return d

    def gain(self, q) -> float:
        return float(self.solve(q).service @ np.asarray(q, dtype=np.float64))
