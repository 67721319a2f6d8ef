"""Slot dynamics of the switch: one-step transition, simulation traces, exact LLE kernels."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from . import _kernel as K
from .model import DEFAULT_MAX_STATES, ArrivalSpec, Schedule, ScheduleError, SwitchTopology

STREAM_NAMES = ("request_arrivals", "link_arrivals", "successes", "decoherence", "policy")
CHUNK_SLOTS = 8192


class StateSpaceTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class SwitchState:
    q: tuple[int, ...]
    z: tuple[int, ...]

    @classmethod
    def zeros(cls, topology: SwitchTopology) -> "SwitchState":
        return cls((0,) * topology.num_requests, (0,) * topology.num_links)


@dataclass(frozen=True)
class StepOutcome:
    scheduled: Schedule
    successes: tuple[int, ...]
    request_arrivals: tuple[int, ...]
    link_arrivals: tuple[int, ...]
    post_arrival_lle: tuple[int, ...]  # Y: after arrivals, capping and consumption, before decoherence
    next: SwitchState


class _StreamArrays:
    """Flat numeric description of a tuple of ArrivalStreams for the jitted code."""

    def __init__(self, streams):
        self.kind = np.array([("bernoulli", "binomial", "deterministic").index(s.kind) for s in streams],
                             dtype=np.int64)
        self.count = np.array([s.count for s in streams], dtype=np.int64)
        self.prob = np.array([s.prob for s in streams], dtype=np.float64)
        self.period = np.array([s.period for s in streams], dtype=np.int64)
        self.offset = np.array([s.offset for s in streams], dtype=np.int64)
        draws = [s.draws for s in streams]
        self.start = np.array(np.cumsum([0] + draws[:-1]), dtype=np.int64)
        self.draws = int(sum(draws))

    def args(self):
        return self.kind, self.count, self.prob, self.period, self.offset, self.start


class SlotStreams:
    """Named random streams, one per stochastic source, spawned from a master seed.

    Each slot consumes a fixed number of uniforms from every stream, so arrival
    realizations do not depend on the policy (common random numbers).
    """

    def __init__(self, topology: SwitchTopology, arrivals: ArrivalSpec, seed: int):
        self.seed = seed
        self._req = _StreamArrays(arrivals.requests)
        self._link = _StreamArrays(arrivals.links)
        M = max(topology.max_batch)
        self.shapes = (
            (self._req.draws,),
            (self._link.draws,),
            (topology.num_requests, M),
            (topology.num_links, topology.buffer),
            (1,),
        )
        children = np.random.SeedSequence(seed).spawn(len(STREAM_NAMES))
        self.generators = {name: np.random.Generator(np.random.PCG64(c)) for name, c in zip(STREAM_NAMES, children)}

    def draw(self, nslots: int) -> tuple[np.ndarray, ...]:
        return tuple(
            self.generators[name].random((nslots, *shape)) for name, shape in zip(STREAM_NAMES, self.shapes)
        )


class _Static:
    """Topology/arrival arrays handed to the jitted code; built once per simulation."""

    def __init__(self, topology: SwitchTopology, arrivals: ArrivalSpec):
        self.psi = topology.psi
        self.gamma = np.array(topology.gamma)
        self.decoh = np.array(topology.decoherence)
        self.B = topology.buffer
        self.max_batch = np.array(topology.max_batch, dtype=np.int64)
        self.req = _StreamArrays(arrivals.requests)
        self.link = _StreamArrays(arrivals.links)
        self.box_n = topology.box_n
        self.box_sigma = topology.box_sigma
        self.nphase = arrivals.link_period


def link_arrivals_at(topology, arrivals, t, link_u) -> np.ndarray:
    st = _StreamArrays(arrivals.links)
    out = np.zeros(topology.num_links, dtype=np.int64)
    K.stream_increments(np.asarray(link_u, dtype=np.float64), *st.args(), t, out)
    return out


def step(
    topology: SwitchTopology,
    arrivals: ArrivalSpec,
    state: SwitchState,
    chooser: Callable,
    rng: SlotStreams,
    t: int = 0,
) -> StepOutcome:
    """Advance one slot.

    Order: link arrivals capped at B, schedule choice on the capped vector W,
    consumption Y = W - sigma, Binomial successes and request arrivals
    (Q <- [Q - nhat]_+ + a), Binomial(Y, 1 - d) survival. `chooser(q, w, t, u)`
    returns a Schedule or a vector n; `u` is the slot's policy uniform.
    """
    req_u, link_u, succ_u, dec_u, pol_u = (a[0] for a in rng.draw(1))
    st = _Static(topology, arrivals)
    q = np.array(state.q, dtype=np.int64)
    z = np.array(state.z, dtype=np.int64)
    a_l = np.zeros(topology.num_links, dtype=np.int64)
    K.stream_increments(link_u, *st.link.args(), t, a_l)
    w = np.zeros_like(z)
    K.capped_add(z, a_l, st.B, w)
    choice = chooser(q.copy(), w.copy(), t, float(pol_u[0]))
    n = choice.n if isinstance(choice, Schedule) else tuple(int(v) for v in choice)
    sched = topology.check_schedule(n, w)
    a_r = np.zeros(topology.num_requests, dtype=np.int64)
    K.stream_increments(req_u, *st.req.args(), t, a_r)
    nhat = np.zeros_like(q)
    sigma = np.zeros_like(z)
    y = np.zeros_like(z)
    q_next = np.zeros_like(q)
    z_next = np.zeros_like(z)
    K.finish_slot(q, w, np.array(sched.n, dtype=np.int64), st.psi, st.gamma, st.decoh, succ_u, dec_u, a_r,
                  nhat, sigma, y, q_next, z_next)
    return StepOutcome(
        scheduled=sched,
        successes=tuple(int(v) for v in nhat),
        request_arrivals=tuple(int(v) for v in a_r),
        link_arrivals=tuple(int(v) for v in a_l),
        post_arrival_lle=tuple(int(v) for v in y),
        next=SwitchState(tuple(int(v) for v in q_next), tuple(int(v) for v in z_next)),
    )


@dataclass
class SimTrace:
    """Recorded run. `q`, `z`, `dep_r`, `dep_l` hold the state at slots 0, stride, 2*stride, ...

    Per-slot arrays (`n`, `nhat`, ...) are kept only when stride == 1.
    """

    topology: SwitchTopology
    seed: int
    horizon: int
    stride: int
    q: np.ndarray
    z: np.ndarray
    dep_r: np.ndarray
    dep_l: np.ndarray
    arrivals_r: np.ndarray  # totals over the run
    arrivals_l: np.ndarray
    n: np.ndarray | None = None
    nhat: np.ndarray | None = None
    a_r: np.ndarray | None = None
    a_l: np.ndarray | None = None
    y: np.ndarray | None = None

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.q.shape[0], dtype=np.int64) * self.stride

    @property
    def full(self) -> bool:
        return self.n is not None

    @cached_property
    def sigma(self) -> np.ndarray | None:
        return None if self.n is None else self.n @ self.topology.psi

    @property
    def lyapunov(self) -> np.ndarray:
        return 0.5 * (self.q.astype(np.float64) ** 2).sum(axis=1)

    @property
    def total_queue(self) -> np.ndarray:
        return self.q.sum(axis=1)

    def outcome(self, t: int) -> StepOutcome:
        if not self.full:
            raise ValueError("per-slot outcomes need a trace recorded with stride 1")
        sched = Schedule(tuple(int(v) for v in self.n[t]), tuple(int(v) for v in self.sigma[t]))
        return StepOutcome(
            scheduled=sched,
            successes=tuple(int(v) for v in self.nhat[t]),
            request_arrivals=tuple(int(v) for v in self.a_r[t]),
            link_arrivals=tuple(int(v) for v in self.a_l[t]),
            post_arrival_lle=tuple(int(v) for v in self.y[t]),
            next=SwitchState(tuple(int(v) for v in self.q[t + 1]), tuple(int(v) for v in self.z[t + 1])),
        )

    @property
    def steps(self) -> list[StepOutcome]:
        return [self.outcome(t) for t in range(self.horizon)]

    def to_csv(self, fh=None, schema_version: int = 1) -> str | None:
        """Write `t, q_*, z_*, n_*, nhat_*, sigma_*, lyapunov`; schedule columns are empty on the final row."""
        R, L = self.topology.num_requests, self.topology.num_links
        buf = fh if fh is not None else io.StringIO()
        buf.write(f"# qswitch trace schema v{schema_version} seed={self.seed} stride={self.stride}\n")
        writer = csv.writer(buf, lineterminator="\n")
        header = ["t"] + [f"q_{r}" for r in range(R)] + [f"z_{l}" for l in range(L)]
        if self.full:
            header += [f"n_{r}" for r in range(R)] + [f"nhat_{r}" for r in range(R)]
            header += [f"sigma_{l}" for l in range(L)]
        header.append("lyapunov")
        writer.writerow(header)
        lyap = self.lyapunov
        for k, t in enumerate(self.times):
            row = [int(t)] + self.q[k].tolist() + self.z[k].tolist()
            if self.full:
                if t < self.horizon:
                    row += self.n[t].tolist() + self.nhat[t].tolist() + self.sigma[t].tolist()
                else:
                    row += [""] * (2 * R + L)
            row.append(repr(float(lyap[k])))
            writer.writerow(row)
        if fh is None:
            return buf.getvalue()
        return None


class PythonChooser:
    """Adapts a plain callable `f(q, w, t, u) -> n` to the simulation policy protocol."""

    mode = K.MODE_PYTHON

    def __init__(self, fn):
        self.fn = fn

    def bind(self, topology, arrivals):
        pass

    def next_refresh(self, t):
        return math.inf

    def refresh(self, q, t):
        pass

    def __call__(self, q, w, t, u):
        return self.fn(q, w, t, u)


def _as_policy(policy):
    if hasattr(policy, "mode") and hasattr(policy, "bind"):
        return policy
    if callable(policy):
        return PythonChooser(policy)
    raise TypeError(f"not a policy: {policy!r}")


def simulate(
    topology: SwitchTopology,
    arrivals: ArrivalSpec,
    policy,
    horizon: int,
    seed: int,
    initial: SwitchState | None = None,
    stride: int = 1,
) -> SimTrace:
    """Run `horizon` slots from `initial` (default all-zero). Identical inputs give identical traces.

    Policies with a jitted mode run in the fast loop and are handed control
    only at their refresh points; anything else goes through `step` slot by slot.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    policy = _as_policy(policy)
    policy.bind(topology, arrivals)
    initial = initial or SwitchState.zeros(topology)
    R, L = topology.num_requests, topology.num_links
    q = np.array(initial.q, dtype=np.int64)
    z = np.array(initial.z, dtype=np.int64)
    if (z < 0).any() or (z > topology.buffer).any() or (q < 0).any():
        raise ValueError(f"initial state out of range: {initial}")
    nrec = horizon // stride + 1
    rec_q = np.zeros((nrec, R), dtype=np.int64)
    rec_z = np.zeros((nrec, L), dtype=np.int64)
    rec_dr = np.zeros((nrec, R), dtype=np.int64)
    rec_dl = np.zeros((nrec, L), dtype=np.int64)
    rec_q[0], rec_z[0] = q, z
    full = stride == 1
    shape_r = (horizon, R) if full else (0, R)
    shape_l = (horizon, L) if full else (0, L)
    f_n, f_nhat, f_ar = (np.zeros(shape_r, dtype=np.int64) for _ in range(3))
    f_al, f_y = (np.zeros(shape_l, dtype=np.int64) for _ in range(2))
    dep_r = np.zeros(R, dtype=np.int64)
    dep_l = np.zeros(L, dtype=np.int64)
    arr_r = np.zeros(R, dtype=np.int64)
    arr_l = np.zeros(L, dtype=np.int64)
    streams = SlotStreams(topology, arrivals, seed)
    st = _Static(topology, arrivals)

    if policy.mode == K.MODE_PYTHON:
        state = initial
        refresh_at = 0
        for t in range(horizon):
            if t >= refresh_at:
                policy.refresh(np.array(state.q), t)
                refresh_at = policy.next_refresh(t)
            out = step(topology, arrivals, state, policy, streams, t)
            state = out.next
            qn, zn = np.array(state.q), np.array(state.z)
            dep_r += out.successes
            dep_l += out.scheduled.sigma
            arr_r += out.request_arrivals
            arr_l += out.link_arrivals
            if full:
                f_n[t], f_nhat[t], f_ar[t] = out.scheduled.n, out.successes, out.request_arrivals
                f_al[t], f_y[t] = out.link_arrivals, out.post_arrival_lle
            if (t + 1) % stride == 0:
                k = (t + 1) // stride
                rec_q[k], rec_z[k], rec_dr[k], rec_dl[k] = qn, zn, dep_r, dep_l
    else:
        t = 0
        chunk = None
        chunk_start = 0
        refresh_at = 0
        while t < horizon:
            if chunk is None or t >= chunk_start + chunk[0].shape[0]:
                chunk_start = t
                chunk = streams.draw(min(CHUNK_SLOTS, horizon - t))
            if t >= refresh_at:
                policy.refresh(q.copy(), t)
                refresh_at = policy.next_refresh(t)
            end = int(min(horizon, chunk_start + chunk[0].shape[0], refresh_at))
            i0, i1 = t - chunk_start, end - chunk_start
            table, cum, act, order = policy.kernel_data()
            K.run_slots(
                t, end - t, q, z, dep_r, dep_l, arr_r, arr_l,
                st.psi, st.gamma, st.decoh, st.B, st.max_batch,
                *st.req.args(), *st.link.args(),
                *(c[i0:i1] for c in chunk),
                policy.mode, table, cum, act, order, st.box_n, st.box_sigma, st.nphase,
                stride, rec_q, rec_z, rec_dr, rec_dl,
                full, f_n, f_nhat, f_ar, f_al, f_y,
            )
            t = end

    return SimTrace(
        topology=topology, seed=seed, horizon=horizon, stride=stride,
        q=rec_q, z=rec_z, dep_r=rec_dr, dep_l=rec_dl, arrivals_r=arr_r, arrivals_l=arr_l,
        n=f_n if full else None, nhat=f_nhat if full else None,
        a_r=f_ar if full else None, a_l=f_al if full else None, y=f_y if full else None,
    )


# -- exact LLE kernels ----------------------------------------------------------


def _binom_row(y: int, keep: float, size: int) -> np.ndarray:
    row = np.zeros(size)
    for j in range(y + 1):
        row[j] = math.comb(y, j) * keep**j * (1.0 - keep) ** (y - j)
    return row


class LleKernels:
    """Exact one-slot pieces of the LLE process.

    States are (phase, z) with z lexicographically indexed; phase = t mod the
    link arrival period. `arrival[phi]` maps pre-arrival z to capped w at phase
    phi; `survival` maps Y to next-slot z.
    """

    def __init__(self, topology: SwitchTopology, arrivals: ArrivalSpec, max_states: int = DEFAULT_MAX_STATES):
        self.topology = topology
        self.arrivals = arrivals
        self.nphase = arrivals.link_period
        self.nz = topology.num_lle_states
        size = self.nphase * self.nz
        if size > max_states:
            raise StateSpaceTooLarge(
                f"state space too large: {self.nphase} phase(s) x {self.nz} LLE states = {size} > cap {max_states}"
            )
        B = topology.buffer
        self.survival = np.ones((1, 1))
        for d in topology.decoherence:
            per_link = np.array([_binom_row(y, 1.0 - d, B + 1) for y in range(B + 1)])
            self.survival = np.kron(self.survival, per_link)
        self.arrival = []
        for phi in range(self.nphase):
            A = np.ones((1, 1))
            for s in arrivals.links:
                pmf = s.pmf(phi)
                per_link = np.zeros((B + 1, B + 1))
                for zl in range(B + 1):
                    for a, p in enumerate(pmf):
                        per_link[zl, min(zl + a, B)] += p
                A = np.kron(A, per_link)
            self.arrival.append(A)

    @property
    def num_states(self) -> int:
        return self.nphase * self.nz

    @cached_property
    def residual_index(self) -> np.ndarray:
        """(nz, K) index of w - sigma_k for each box schedule k, or -1 when infeasible."""
        top = self.topology
        Z = top.lle_states
        out = np.full((self.nz, len(top.box_schedules)), -1, dtype=np.int64)
        base = (top.buffer + 1) ** np.arange(top.num_links - 1, -1, -1)
        for k, sig in enumerate(top.box_sigma):
            y = Z - sig
            ok = (y >= 0).all(axis=1)
            out[ok, k] = y[ok] @ base
        return out


@dataclass
class AgnosticPolicy:
    """Randomized schedule choice as a function of (phase, post-arrival LLE vector w) only.

    `probs[s, k]` is the probability of box schedule k at post-arrival state
    s = phase * |Z| + index(w); mass on infeasible schedules is not allowed.
    """

    topology: SwitchTopology
    nphase: int
    probs: np.ndarray

    def __post_init__(self):
        S = self.nphase * self.topology.num_lle_states
        if self.probs.shape != (S, len(self.topology.box_schedules)):
            raise ValueError(f"policy table has shape {self.probs.shape}, expected {(S, len(self.topology.box_schedules))}")
        if (self.probs < -1e-15).any() or not np.allclose(self.probs.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("policy rows must be probability vectors")
        sig = self.topology.box_sigma
        Z = self.topology.lle_states
        for s in range(S):
            w = Z[s % len(Z)]
            bad = (self.probs[s] > 0) & (sig > w).any(axis=1)
            if bad.any():
                k = int(np.flatnonzero(bad)[0])
                raise ScheduleError(
                    f"policy puts mass on infeasible schedule n={self.topology.box_schedules[k].n} at w={tuple(w)}"
                )

    @classmethod
    def deterministic(cls, topology, nphase, choice: Sequence[int]) -> "AgnosticPolicy":
        probs = np.zeros((len(choice), len(topology.box_schedules)))
        probs[np.arange(len(choice)), np.asarray(choice)] = 1.0
        return cls(topology, nphase, probs)

    @classmethod
    def never(cls, topology, nphase=1) -> "AgnosticPolicy":
        return cls.deterministic(topology, nphase, [0] * (nphase * topology.num_lle_states))

    @classmethod
    def from_function(cls, topology, nphase, fn) -> "AgnosticPolicy":
        """Build from `fn(phase, w) -> n` (deterministic)."""
        index = {s.n: k for k, s in enumerate(topology.box_schedules)}
        choice = []
        for phi in range(nphase):
            for w in topology.lle_states:
                choice.append(index[tuple(int(v) for v in fn(phi, tuple(int(x) for x in w)))])
        return cls.deterministic(topology, nphase, choice)


def post_decision_rows(kern: LleKernels) -> np.ndarray:
    """(nz, K, nz) next-slot pre-arrival distribution after choosing box schedule k at w (zero rows if infeasible)."""
    ridx = kern.residual_index
    rows = np.zeros((kern.nz, ridx.shape[1], kern.nz))
    ok = ridx >= 0
    rows[ok] = kern.survival[ridx[ok]]
    return rows


def build_transition_matrix(
    topology: SwitchTopology,
    arrivals: ArrivalSpec,
    policy: AgnosticPolicy,
    max_states: int = DEFAULT_MAX_STATES,
) -> np.ndarray:
    """Exact kernel of the pre-arrival LLE state (phase, Z(t)) -> (phase+1, Z(t+1)) under an agnostic policy."""
    kern = LleKernels(topology, arrivals, max_states)
    nz, nphase = kern.nz, kern.nphase
    if policy.probs.shape[0] != kern.num_states:
        raise ValueError("policy does not match the phase structure of the arrivals")
    rows = post_decision_rows(kern)
    P = np.zeros((kern.num_states, kern.num_states))
    for phi in range(nphase):
        pi = policy.probs[phi * nz:(phi + 1) * nz]  # (w, k)
        after_choice = np.einsum("wk,wkz->wz", pi, rows)  # w -> z'
        block = kern.arrival[phi] @ after_choice
        nxt = (phi + 1) % nphase
        P[phi * nz:(phi + 1) * nz, nxt * nz:(nxt + 1) * nz] = block
    return P
