"""Online schedulers: MaxWeight, ARE, fixed priority, static randomized agnostic tables, never."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from . import _kernel as K
from .dynamics import AgnosticPolicy
from .mdp import LleMdp, ParametricSolver, solve_average_reward
from .model import DEFAULT_MAX_STATES, ArrivalSpec, ConfigError, Schedule, SwitchTopology


def default_tau(scale: float) -> int:
    """Refresh period ceil((ln c)^2), at least one slot."""
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    return max(1, math.ceil(math.log(scale) ** 2)) if scale > 1 else 1


def _vec(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.int64))


def maxweight_choose(topology: SwitchTopology, q, w) -> Schedule:
    """argmax of sum_r Q_r n_r over box schedules with sigma(n) <= w and n_r <= Q_r; ties to the largest n."""
    out = np.zeros(topology.num_requests, dtype=np.int64)
    K._maxweight(_vec(q), _vec(w), topology.box_n, topology.box_sigma, out)
    return topology.make_schedule(out)


def priority_choose(topology: SwitchTopology, order, q, w, reserve: bool = False) -> Schedule:
    """Greedy allocation in `order`, each type up to min(Q_r, max batch, free LLEs on its links).

    With `reserve`, a type left with unserved requests keeps its links from lower priorities.
    """
    out = np.zeros(topology.num_requests, dtype=np.int64)
    K._priority(_vec(q), _vec(w), topology.psi, _vec(topology.max_batch), _vec(order), reserve, out)
    return topology.make_schedule(out)


def clip_to_lle(topology: SwitchTopology, n, w) -> Schedule:
    """Drop requests, highest type index first, until sigma(n) <= w."""
    n = list(n)
    psi = topology.psi
    w = np.asarray(w)
    for r in range(topology.num_requests - 1, -1, -1):
        while n[r] > 0 and (np.asarray(n) @ psi > w)[psi[r] > 0].any():
            n[r] -= 1
    return topology.make_schedule(n)


class _Policy:
    """Common plumbing of the simulation policy protocol.

    `kernel_data()` returns the arrays the jitted loop reads; calling the
    policy runs the same chooser from Python, one slot at a time.
    """

    mode = K.MODE_NEVER
    name = "never"

    def bind(self, topology: SwitchTopology, arrivals: ArrivalSpec):
        self.topology = topology
        self.arrivals = arrivals
        self.nphase = arrivals.link_period
        R = topology.num_requests
        self._table = np.zeros((1, R), dtype=np.int64)
        self._cum = np.zeros((1, 1))
        self._act = np.zeros((1, 1), dtype=np.int64)
        self._order = np.arange(R, dtype=np.int64)
        return self

    def next_refresh(self, t: int) -> float:
        return math.inf

    def refresh(self, q, t: int):
        pass

    def kernel_data(self):
        return self._table, self._cum, self._act, self._order

    def __call__(self, q, w, t, u) -> Schedule:
        top = self.topology
        out = np.zeros(top.num_requests, dtype=np.int64)
        K.choose(self.mode, _vec(q), _vec(w), t, float(u), *self.kernel_data(), top.box_n, top.box_sigma,
                 top.psi, _vec(top.max_batch), self.nphase, top.buffer, out)
        return top.make_schedule(out)


class NeverPolicy(_Policy):
    pass


class MaxWeightPolicy(_Policy):
    mode = K.MODE_MAXWEIGHT
    name = "maxweight"


class PriorityPolicy(_Policy):
    def __init__(self, order, reserve: bool = False):
        self.order = tuple(int(r) for r in order)
        self.reserve = reserve
        self.mode = K.MODE_PRIORITY_RESERVE if reserve else K.MODE_PRIORITY
        self.name = ("priority-reserve:" if reserve else "priority:") + ",".join(map(str, self.order))

    def bind(self, topology, arrivals):
        super().bind(topology, arrivals)
        if sorted(self.order) != list(range(topology.num_requests)):
            raise ConfigError(f"priority order {self.order} is not a permutation of 0..{topology.num_requests - 1}")
        self._order = _vec(self.order)
        return self


class StaticPolicy(_Policy):
    """Fixed randomized agnostic policy; the slot's policy uniform picks the schedule."""

    mode = K.MODE_STATIC

    def __init__(self, policy: AgnosticPolicy | None = None, path: str | Path | None = None):
        if (policy is None) == (path is None):
            raise ValueError("give exactly one of an AgnosticPolicy or a table file")
        self.policy = policy
        self.path = path
        self.name = f"static:{path}" if path is not None else "static"

    def bind(self, topology, arrivals):
        super().bind(topology, arrivals)
        if self.policy is None:
            self.policy = read_policy_table(self.path, topology, arrivals.link_period)
        if self.policy.nphase != self.nphase:
            raise ConfigError(f"static table has {self.policy.nphase} phase(s), arrivals need {self.nphase}")
        probs = self.policy.probs
        width = int((probs > 0).sum(axis=1).max())
        self._act = np.full((probs.shape[0], width), -1, dtype=np.int64)
        self._cum = np.zeros((probs.shape[0], width))
        for s, row in enumerate(probs):
            ks = np.flatnonzero(row > 0)
            self._act[s, :len(ks)] = ks
            c = np.cumsum(row[ks])
            c[-1] = 2.0  # absorb rounding so the last schedule catches every u < 1
            self._cum[s, :len(ks)] = c
        return self


class ArePolicy(_Policy):
    """Re-solves the average-reward MDP at the current queue vector every `tau` slots.

    Between refreshes the cached map (phase, w) -> n is applied as is, even
    when some queues are empty. `solver="rvi"` re-runs relative value
    iteration at each refresh instead of the warm-started parametric solver.
    """

    mode = K.MODE_TABLE
    name = "are"

    def __init__(self, tau: int | None = None, scale: float = 1.0, solver: str = "parametric",
                 max_states: int = DEFAULT_MAX_STATES):
        self.tau = default_tau(scale) if tau is None else int(tau)
        if self.tau < 1:
            raise ConfigError(f"tau must be >= 1, got {tau}")
        if solver not in ("parametric", "rvi"):
            raise ConfigError(f"unknown ARE solver {solver!r}")
        self.scale = scale
        self.solver = solver
        self.max_states = max_states
        self.last_refresh = None
        self.refreshes = 0

    def bind(self, topology, arrivals):
        super().bind(topology, arrivals)
        self.mdp = LleMdp(topology, arrivals, self.max_states)
        self.parametric = ParametricSolver(self.mdp)
        self.last_refresh = None
        self.refreshes = 0
        return self

    def next_refresh(self, t: int) -> int:
        return (t // self.tau + 1) * self.tau

    def refresh(self, q, t: int):
        try:
            if self.solver == "rvi":
                sol = solve_average_reward(self.topology, self.arrivals, q, mdp=self.mdp)
                self._table = sol.table
            else:
                self._table = self.parametric.solve(q).table
        except Exception as exc:
            raise RuntimeError(f"ARE refresh failed at slot {t} with q={list(q)}: {exc}") from exc
        self.cached_q = np.array(q)
        self.last_refresh = t
        self.refreshes += 1

    def action(self, w, t: int) -> Schedule:
        s = (t % self.nphase) * self.topology.num_lle_states + self.topology.lle_index(w)
        return clip_to_lle(self.topology, self._table[s], w)


def are_choose(q, w, slot: int, handle: ArePolicy) -> Schedule:
    """Refresh on window boundaries, then apply the cached map at w."""
    if slot % handle.tau == 0 and handle.last_refresh != slot:
        handle.refresh(q, slot)
    elif handle.last_refresh is None:
        raise RuntimeError(f"ARE handle has no cached policy at slot {slot}; windows start at multiples of tau")
    return handle.action(w, slot)


def parse_policy(text: str, tau: int | None = None, scale: float = 1.0, base_dir: str | Path | None = None,
                 max_states: int = DEFAULT_MAX_STATES) -> _Policy:
    """'maxweight' | 'are' | 'are-rvi' | 'never' | 'priority:2,0,1' | 'priority-reserve:2,0,1' | 'static:<file>'."""
    text = text.strip()
    kind, _, arg = text.partition(":")
    if kind == "maxweight" and not arg:
        return MaxWeightPolicy()
    if kind == "never" and not arg:
        return NeverPolicy()
    if kind in ("are", "are-rvi") and not arg:
        return ArePolicy(tau=tau, scale=scale, solver="rvi" if kind == "are-rvi" else "parametric",
                         max_states=max_states)
    if kind in ("priority", "priority-reserve") and arg:
        try:
            order = [int(v) for v in arg.split(",")]
        except ValueError:
            raise ConfigError(f"policy {text!r}: priority order must be comma-separated integers") from None
        return PriorityPolicy(order, reserve=kind == "priority-reserve")
    if kind == "static" and arg:
        path = Path(arg)
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        return StaticPolicy(path=path)
    raise ConfigError(f"unknown policy {text!r}")


# -- policy table files ---------------------------------------------------------


def write_policy_table(policy: AgnosticPolicy, fh, schema_version: int = 1):
    """CSV rows `phase, w_*, n_*, prob` for every schedule with positive probability."""
    top = policy.topology
    fh.write(f"# qswitch policy table schema v{schema_version}\n")
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["phase"] + [f"w_{l}" for l in range(top.num_links)]
                    + [f"n_{r}" for r in range(top.num_requests)] + ["prob"])
    nz = top.num_lle_states
    for s, row in enumerate(policy.probs):
        phi, wi = divmod(s, nz)
        for k in np.flatnonzero(row > 0):
            writer.writerow([phi, *top.lle_states[wi].tolist(), *top.box_schedules[k].n, repr(float(row[k]))])


def read_policy_table(path, topology: SwitchTopology, nphase: int = 1) -> AgnosticPolicy:
    """Inverse of `write_policy_table`; states missing from the file get the zero schedule."""
    index = {s.n: k for k, s in enumerate(topology.box_schedules)}
    R, L = topology.num_requests, topology.num_links
    nz = topology.num_lle_states
    probs = np.zeros((nphase * nz, len(index)))
    seen = np.zeros(nphase * nz, dtype=bool)
    with open(path, newline="") as fh:
        rows = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(rows, None)
        if header is None or len(header) != 2 + L + R:
            raise ConfigError(f"{path}: expected {2 + L + R} columns (phase, w_*, n_*, prob)")
        for lineno, row in enumerate(rows, start=3):
            try:
                vals = [int(v) for v in row[:1 + L + R]]
                p = float(row[-1])
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: non-numeric entry") from None
            phi, w, n = vals[0], tuple(vals[1:1 + L]), tuple(vals[1 + L:])
            if not 0 <= phi < nphase or n not in index:
                raise ConfigError(f"{path}:{lineno}: phase {phi} or schedule {n} out of range")
            s = phi * nz + topology.lle_index(w)
            probs[s, index[n]] += p
            seen[s] = True
    probs[~seen, 0] = 1.0
    return AgnosticPolicy(topology, nphase, probs)
