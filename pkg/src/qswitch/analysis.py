"""Mixing of the LLE chain, the fluid model, Lyapunov drift estimates and the fluid-convergence harness."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binomtest

from .dynamics import SimTrace, SwitchState, build_transition_matrix, simulate
from .mdp import LleMdp, ParametricSolver
from .model import DEFAULT_MAX_STATES, ArrivalSpec, Config, SwitchTopology

STOCHASTIC_TOL = 1e-10
EMPTY_WEIGHT = 1e-9


class MixingViolation(AssertionError):
    pass


class FluidStepError(RuntimeError):
    pass


def _check_stochastic(P: np.ndarray):
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {P.shape}")
    if (P < -STOCHASTIC_TOL).any() or np.abs(P.sum(axis=1) - 1.0).max() > STOCHASTIC_TOL:
        raise ValueError("matrix is not row-stochastic")
    return P


def _overlap(P: np.ndarray) -> tuple[float, tuple[int, int]]:
    """Smallest sum_z min(P[i, z], P[j, z]) over row pairs, with the minimizing pair."""
    best, pair = 1.0, (0, 0)
    for i in range(P.shape[0] - 1):
        ov = np.minimum(P[i], P[i + 1:]).sum(axis=1)
        j = int(ov.argmin())
        if ov[j] < best:
            best, pair = float(ov[j]), (i, i + 1 + j)
    return best, pair


def dobrushin_coefficient(P) -> float:
    """1 - min over row pairs of sum_z min(P[i, z], P[j, z])."""
    P = _check_stochastic(P)
    if P.shape[0] < 2:
        return 0.0
    return 1.0 - _overlap(P)[0]


def tv_distance(mu, nu) -> float:
    return 0.5 * float(np.abs(np.asarray(mu) - np.asarray(nu)).sum())


def regeneration_bound(topology: SwitchTopology) -> float:
    """1 - prod_l d_l^B: every stored LLE decoheres in one slot with at least this probability."""
    return 1.0 - float(np.prod(np.asarray(topology.decoherence) ** topology.buffer))


@dataclass
class MixingReport:
    rho: float  # largest coefficient over the family
    rho_bound: float
    tv_curve: np.ndarray  # for the kernel attaining `rho`, started from the all-full state
    rhos: list[float] = field(default_factory=list)
    qs: list[np.ndarray] = field(default_factory=list)


def tv_curve(P: np.ndarray, start: int, steps: int, mu: np.ndarray | None = None) -> np.ndarray:
    from .mdp import stationary_distribution

    mu = stationary_distribution(P) if mu is None else mu
    dist = np.zeros(P.shape[0])
    dist[start] = 1.0
    out = np.empty(steps + 1)
    for t in range(steps + 1):
        out[t] = tv_distance(dist, mu)
        dist = dist @ P
    return out


def verify_uniform_mixing(
    topology: SwitchTopology,
    arrivals: ArrivalSpec,
    qs,
    steps: int = 30,
    max_states: int = DEFAULT_MAX_STATES,
) -> MixingReport:
    """Dobrushin coefficient of the LLE kernel under the ARE policy at each q, checked against the regeneration bound."""
    if arrivals.link_period > 1:
        raise ValueError("mixing verification needs time-homogeneous link arrivals (the phased chain is periodic)")
    bound = regeneration_bound(topology)
    solver = ParametricSolver(LleMdp(topology, arrivals, max_states))
    rhos, kernels = [], []
    for q in qs:
        policy = solver.mdp.policy_of(solver.solve(q).choice)
        P = build_transition_matrix(topology, arrivals, policy, max_states)
        ov, (i, j) = _overlap(P) if P.shape[0] > 1 else (1.0, (0, 0))
        rho = 1.0 - ov
        if rho > bound + 1e-12:
            raise MixingViolation(
                f"rho={rho:.15g} exceeds 1 - prod d^B = {bound:.15g} at q={list(q)}, rows {i} and {j}"
            )
        rhos.append(rho)
        kernels.append(P)
    worst = int(np.argmax(rhos))
    full = topology.num_lle_states - 1
    return MixingReport(rhos[worst], bound, tv_curve(kernels[worst], full, steps), rhos,
                        [np.asarray(q, dtype=float) for q in qs])


# -- fluid model ----------------------------------------------------------------


@dataclass
class FluidState:
    time: float
    qbar: np.ndarray
    dbar: np.ndarray


@dataclass
class FluidTrajectory:
    times: np.ndarray
    qbar: np.ndarray  # (steps+1, R)
    dbar: np.ndarray
    rates: np.ndarray  # (steps, R) departure rate used on each step
    lam: np.ndarray
    resolves: int

    @property
    def states(self) -> list[FluidState]:
        return [FluidState(float(t), q, d) for t, q, d in zip(self.times, self.qbar, self.dbar)]

    @property
    def lyapunov(self) -> np.ndarray:
        return 0.5 * (self.qbar**2).sum(axis=1)

    def at(self, t) -> np.ndarray:
        """Linear interpolation of qbar at times t."""
        t = np.atleast_1d(t)
        return np.column_stack([np.interp(t, self.times, self.qbar[:, r]) for r in range(self.qbar.shape[1])])


def _service_vertex(solver: ParametricSolver, direction: np.ndarray) -> np.ndarray:
    """Vertex of the downward-closed service region maximizing direction . s."""
    pos = np.clip(direction, 0.0, None)
    s = solver.solve(pos).service.astype(np.float64)
    s[pos <= 0] = 0.0
    return s


def project_service(solver: ParametricSolver, p: np.ndarray, tol: float = 1e-13, max_iter: int = 1000) -> np.ndarray:
    """Nearest point to p >= 0 in the set of service vectors achievable with idling.

    Wolfe's minimum-norm-point iteration; the optimal agnostic policy at
    direction p - s is the linear oracle.
    """
    scale = max(1.0, float(np.abs(p).max()))
    corral = [_service_vertex(solver, p)]
    weights = np.array([1.0])
    x = corral[0].copy()
    for _ in range(max_iter):
        v = _service_vertex(solver, p - x)
        if (p - x) @ (v - x) <= tol * scale**2 or any(np.array_equal(v, c) for c in corral):
            break
        corral.append(v)
        weights = np.append(weights, 0.0)
        while True:
            M = np.array(corral) - p
            k = len(corral)
            A = np.zeros((k + 1, k + 1))
            A[:k, :k] = M @ M.T
            A[:k, k] = A[k, :k] = 1.0
            rhs = np.zeros(k + 1)
            rhs[k] = 1.0
            alpha = np.linalg.lstsq(A, rhs, rcond=None)[0][:k]
            if (alpha > 1e-14).all():
                weights = alpha
                break
            neg = alpha <= 1e-14
            theta = min(1.0, float(np.min(weights[neg] / (weights[neg] - alpha[neg]))))
            weights = (1 - theta) * weights + theta * alpha
            keep = weights > 1e-14
            corral = [c for c, kp in zip(corral, keep) if kp]
            weights = weights[keep] / weights[keep].sum()
        x = weights @ np.array(corral)
    return np.minimum(x, p)


def _implicit(solver: ParametricSolver, lam, q0, horizon, dt) -> FluidTrajectory:
    nsteps = int(math.ceil(horizon / dt - 1e-9))
    R = len(lam)
    qbar = np.empty((nsteps + 1, R))
    rates = np.empty((nsteps, R))
    qbar[0] = q = q0.copy()
    snap = 1e-12 * max(1.0, float(q0.max(initial=0.0)))
    for k in range(nsteps):
        p = q / dt + lam
        s = project_service(solver, p)
        nxt = dt * (p - s)
        nxt[nxt < snap] = 0.0
        rates[k] = (q + dt * lam - nxt) / dt
        qbar[k + 1] = q = nxt
    times = np.arange(nsteps + 1) * dt
    dbar = q0 + np.outer(times, lam) - qbar
    return FluidTrajectory(times, qbar, dbar, rates, lam, solver.solves)


def _explicit(solver: ParametricSolver, lam: np.ndarray, q0: np.ndarray, horizon: float, dt: float,
              resolve_every: int) -> FluidTrajectory:
    nsteps = int(math.ceil(horizon / dt - 1e-9))
    R = len(lam)
    qbar = np.empty((nsteps + 1, R))
    rates = np.empty((nsteps, R))
    qbar[0] = q = q0.copy()
    service = None
    empty = q <= 0
    resolves = 0
    for k in range(nsteps):
        now_empty = q <= 0
        if service is None or k % resolve_every == 0 or (now_empty != empty).any():
            # empty queues keep a vanishing weight so the policy still serves them; their
            # departures are then capped at arrivals instead of dropping to zero
            floor = EMPTY_WEIGHT * max(1.0, float(q.max()))
            service = solver.solve(np.where(now_empty, floor, q)).service
            resolves += 1
        empty = now_empty
        # a queue cannot go below zero; on the boundary departures are capped by what is there plus arrivals
        nxt = np.maximum(q + dt * (lam - service), 0.0)
        rates[k] = (q + dt * lam - nxt) / dt
        qbar[k + 1] = q = nxt
    times = np.arange(nsteps + 1) * dt
    dbar = q0 + np.outer(times, lam) - qbar
    return FluidTrajectory(times, qbar, dbar, rates, lam, resolves)


def integrate_fluid(
    topology: SwitchTopology,
    arrivals: ArrivalSpec,
    lam,
    qbar0,
    horizon: float,
    dt: float,
    scheme: str = "implicit",
    resolve_every: int = 10,
    check_tol: float | None = None,
    max_states: int = DEFAULT_MAX_STATES,
    solver: ParametricSolver | None = None,
) -> FluidTrajectory:
    """Integrate dQ/dt = lambda - service(optimal agnostic policy at Q) with Q >= 0.

    The default implicit scheme takes Q_{k+1} = Q_k + dt (lambda - s) with s
    the service vector (idling allowed) nearest to Q_k/dt + lambda. It stays
    nonnegative, makes s optimal for Q_{k+1}, and lands exactly on zero once
    the queues are within one step of draining. `scheme="explicit"` is plain
    forward Euler with clamping at zero, re-solving the policy every
    `resolve_every` steps and whenever a queue reaches or leaves zero.

    With `check_tol`, the run is repeated at dt/2 and a sup-norm disagreement
    above the tolerance raises FluidStepError.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if scheme not in ("implicit", "explicit"):
        raise ValueError(f"unknown scheme {scheme!r}")
    lam = np.asarray(lam, dtype=np.float64)
    q0 = np.asarray(qbar0, dtype=np.float64)
    if (q0 < 0).any():
        raise ValueError("initial fluid queue must be nonnegative")
    solver = solver or ParametricSolver(LleMdp(topology, arrivals, max_states))

    def run(h):
        if scheme == "implicit":
            return _implicit(solver, lam, q0, horizon, h)
        return _explicit(solver, lam, q0, horizon, h, resolve_every)

    traj = run(dt)
    if check_tol is not None:
        fine = run(dt / 2)
        gap = float(np.abs(fine.at(traj.times) - traj.qbar).max())
        if gap > check_tol:
            raise FluidStepError(f"dt={dt} too coarse: halving the step moves the trajectory by {gap:.3g}")
    return traj


def drain_bound(L0: float, epsilon: float, num_requests: int, t) -> np.ndarray:
    """(sqrt(L0) - eps t / (2 sqrt(R)))_+^2."""
    return np.maximum(math.sqrt(L0) - epsilon * np.asarray(t) / (2 * math.sqrt(num_requests)), 0.0) ** 2


def drain_time(L0: float, epsilon: float, num_requests: int) -> float:
    return 2 * math.sqrt(num_requests) * math.sqrt(L0) / epsilon


# -- drift estimates ------------------------------------------------------------


def _slope(t: np.ndarray, y: np.ndarray) -> float:
    t = t.astype(np.float64)
    tc = t - t.mean()
    den = (tc**2).sum()
    return float((tc * (y - y.mean())).sum() / den) if den > 0 else 0.0


@dataclass
class DriftReport:
    window_start: np.ndarray
    slopes: np.ndarray

    @property
    def median(self) -> float:
        return float(np.median(self.slopes))

    @property
    def positive_fraction(self) -> float:
        return float((self.slopes > 0).mean())


def lyapunov_drift(trace: SimTrace, window: int) -> DriftReport:
    """Least-squares slope of L(Q) = 1/2 sum Q_r^2 over consecutive windows of `window` slots."""
    if window < 1:
        raise ValueError("window must be >= 1")
    t = trace.times
    lyap = trace.lyapunov
    starts, slopes = [], []
    for s in range(0, trace.horizon, window):
        sel = (t >= s) & (t <= s + window)
        if sel.sum() >= 2:
            starts.append(s)
            slopes.append(_slope(t[sel], lyap[sel]))
    return DriftReport(np.array(starts, dtype=np.int64), np.array(slopes))


def queue_slope(trace: SimTrace) -> float:
    """Least-squares slope of the total queue length over the whole trace."""
    return _slope(trace.times, trace.total_queue.astype(np.float64))


def sign_test(values, alternative: str = "greater") -> float:
    """One-sided sign test p-value for a positive (or negative) median; zeros are dropped."""
    v = np.asarray(values)
    v = v[v != 0]
    if len(v) == 0:
        return 1.0
    k = int((v > 0).sum()) if alternative == "greater" else int((v < 0).sum())
    return float(binomtest(k, len(v), 0.5, alternative="greater").pvalue)


def window_mean(times: np.ndarray, values: np.ndarray, lo: float, hi: float) -> float:
    sel = (times >= lo) & (times <= hi)
    return float(values[sel].mean())


# -- fluid convergence harness ----------------------------------------------------


@dataclass
class FluidConvergenceReport:
    scales: list[int]
    errors: np.ndarray  # seed-averaged sup-norm error per scale
    per_seed: np.ndarray  # (scales, seeds)
    lle_max: np.ndarray  # max_t max_l Z_l / c per scale
    grid: np.ndarray
    fluid: FluidTrajectory

    @property
    def decreasing(self) -> bool:
        return bool((np.diff(self.errors) < 0).all())


def fluid_convergence_check(
    config: Config,
    scales=(50, 200, 800),
    horizon: float = 20.0,
    seeds: int = 20,
    qbar0=None,
    grid_points: int = 41,
    dt: float = 0.005,
    base_seed: int = 0,
    threads: int = 1,
) -> FluidConvergenceReport:
    """Scaled ARE simulations Q(ct)/c against the fluid trajectory on a fixed time grid.

    `horizon` is in fluid time, so scale c runs ceil(c * horizon) slots with
    tau(c) = ceil((ln c)^2) and initial queue round(c * qbar0).
    """
    from .schedulers import ArePolicy

    scales = [int(c) for c in scales]
    if any(b <= a for a, b in zip(scales, scales[1:])):
        raise ValueError("scales must be increasing")
    topology, arrivals, _ = config
    R = topology.num_requests
    qbar0 = np.full(R, 1.0 / R) if qbar0 is None else np.asarray(qbar0, dtype=np.float64)
    if qbar0.sum() > 1 + 1e-12:
        raise ValueError("initial fluid queue must have l1 norm at most 1")
    lam = arrivals.request_rates
    mdp = LleMdp(topology, arrivals, config.run.max_states)
    fluid = integrate_fluid(topology, arrivals, lam, qbar0, horizon, dt, solver=ParametricSolver(mdp))
    grid = np.linspace(0.0, horizon, grid_points)
    ref = fluid.at(grid)
    init0 = (0,) * topology.num_links

    def one(job):
        c, s = job
        slots = np.rint(grid * c).astype(np.int64)
        init = SwitchState(tuple(int(v) for v in np.rint(c * qbar0)), init0)
        trace = simulate(topology, arrivals, ArePolicy(scale=c), int(slots[-1]), base_seed + s, init)
        return float(np.abs(trace.q[slots] / c - ref).max()), trace.z.max() / c

    jobs = [(c, s) for c in scales for s in range(seeds)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(one, jobs))
    else:
        out = [one(j) for j in jobs]
    per_seed = np.array([e for e, _ in out]).reshape(len(scales), seeds)
    lle_max = np.array([z for _, z in out]).reshape(len(scales), seeds).max(axis=1)
    return FluidConvergenceReport(scales, per_seed.mean(axis=1), per_seed, lle_max, grid, fluid)
