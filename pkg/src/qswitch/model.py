"""Static description of a quantum switch: topology, schedules, arrival streams, config files."""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass, field, fields
from functools import cached_property
from pathlib import Path
from typing import Any, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib
import tomli_w

SCHEMA_VERSION = 1
DEFAULT_MAX_STATES = 4096


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


class ScheduleError(ValueError):
    """A schedule violates LLE feasibility or the batch box."""


@dataclass(frozen=True, order=True)
class Schedule:
    """Requests attempted per type (`n`) and LLEs consumed per link (`sigma`)."""

    n: tuple[int, ...]
    sigma: tuple[int, ...] = field(compare=False)

    @property
    def is_zero(self) -> bool:
        return not any(self.n)


@dataclass(frozen=True)
class SwitchTopology:
    request_links: tuple[tuple[int, ...], ...]
    num_links: int
    gamma: tuple[float, ...]
    buffer: int
    decoherence: tuple[float, ...]
    max_batch: tuple[int, ...] | None = None

    def __post_init__(self):
        links = tuple(tuple(int(l) for l in ls) for ls in self.request_links)
        object.__setattr__(self, "request_links", links)
        object.__setattr__(self, "gamma", tuple(float(g) for g in self.gamma))
        object.__setattr__(self, "decoherence", tuple(float(d) for d in self.decoherence))
        if self.max_batch is None:
            object.__setattr__(self, "max_batch", (int(self.buffer),) * len(links))
        else:
            object.__setattr__(self, "max_batch", tuple(int(m) for m in self.max_batch))
        self._validate()

    def _validate(self):
        R, L = len(self.request_links), self.num_links
        if R < 1:
            raise ConfigError("topology.request_links must list at least one request type")
        if L < 1:
            raise ConfigError("topology.num_links must be >= 1")
        for r, ls in enumerate(self.request_links):
            if not ls:
                raise ConfigError(f"topology.request_links[{r}] is empty")
            if len(set(ls)) != len(ls):
                raise ConfigError(f"topology.request_links[{r}] repeats a link")
            for l in ls:
                if not 0 <= l < L:
                    raise ConfigError(f"topology.request_links[{r}] has link {l} outside [0, {L})")
        if len(self.gamma) != R:
            raise ConfigError(f"topology.gamma has {len(self.gamma)} entries, expected {R}")
        for r, g in enumerate(self.gamma):
            if not 0.0 < g <= 1.0:
                raise ConfigError(f"gamma[{r}] out of (0,1]: {g}")
        if len(self.decoherence) != L:
            raise ConfigError(f"topology.decoherence has {len(self.decoherence)} entries, expected {L}")
        for l, d in enumerate(self.decoherence):
            if not 0.0 < d <= 1.0:
                raise ConfigError(f"decoherence[{l}] out of (0,1]: {d}")
        if self.buffer < 0:
            raise ConfigError(f"topology.buffer must be >= 0, got {self.buffer}")
        if len(self.max_batch) != R:
            raise ConfigError(f"topology.max_batch has {len(self.max_batch)} entries, expected {R}")
        for r, m in enumerate(self.max_batch):
            if m < 0:
                raise ConfigError(f"max_batch[{r}] must be >= 0, got {m}")

    @property
    def num_requests(self) -> int:
        return len(self.request_links)

    @cached_property
    def psi(self) -> np.ndarray:
        """(R, L) incidence matrix; row r is the LLE demand of one type-r request."""
        psi = np.zeros((self.num_requests, self.num_links), dtype=np.int64)
        for r, ls in enumerate(self.request_links):
            psi[r, list(ls)] = 1
        return psi

    def sigma(self, n: Sequence[int]) -> tuple[int, ...]:
        return tuple(int(v) for v in np.asarray(n, dtype=np.int64) @ self.psi)

    def make_schedule(self, n: Sequence[int]) -> Schedule:
        n = tuple(int(v) for v in n)
        return Schedule(n, self.sigma(n))

    @cached_property
    def box_schedules(self) -> tuple[Schedule, ...]:
        """All n in the batch box, lexicographically ascending (ignores LLE availability)."""
        ranges = [range(m + 1) for m in self.max_batch]
        return tuple(self.make_schedule(n) for n in itertools.product(*ranges))

    @cached_property
    def box_n(self) -> np.ndarray:
        return np.array([s.n for s in self.box_schedules], dtype=np.int64)

    @cached_property
    def box_sigma(self) -> np.ndarray:
        return np.array([s.sigma for s in self.box_schedules], dtype=np.int64)

    @cached_property
    def lle_states(self) -> np.ndarray:
        """Every LLE vector in prod_l {0..B}, lexicographically ascending (row i has index i)."""
        B = self.buffer
        return np.array(list(itertools.product(range(B + 1), repeat=self.num_links)), dtype=np.int64)

    @property
    def num_lle_states(self) -> int:
        return (self.buffer + 1) ** self.num_links

    def lle_index(self, z: Sequence[int]) -> int:
        idx = 0
        for v in z:
            idx = idx * (self.buffer + 1) + int(v)
        return idx

    def check_schedule(self, n: Sequence[int], w: Sequence[int]) -> Schedule:
        """Return the Schedule for `n`, raising ScheduleError if it is not allowed at LLE vector `w`."""
        n = tuple(int(v) for v in n)
        if len(n) != self.num_requests:
            raise ScheduleError(f"schedule has {len(n)} request counts, expected {self.num_requests}")
        bad = [r for r, (v, m) in enumerate(zip(n, self.max_batch)) if not 0 <= v <= m]
        if bad:
            raise ScheduleError(f"n outside batch box at types {bad}: n={n}, max_batch={self.max_batch}")
        s = self.make_schedule(n)
        over = [l for l, (sg, wl) in enumerate(zip(s.sigma, w)) if sg > wl]
        if over:
            raise ScheduleError(
                f"schedule needs more LLEs than available at links {over}: sigma={s.sigma}, w={tuple(w)}"
            )
        return s


def enumerate_feasible_schedules(topology: SwitchTopology, z: Sequence[int]) -> list[Schedule]:
    """Schedules in the batch box with sigma(n) <= z, sorted lexicographically by n."""
    z = np.asarray(z, dtype=np.int64)
    if z.shape != (topology.num_links,) or (z < 0).any() or (z > topology.buffer).any():
        raise ValueError(f"LLE vector {z.tolist()} outside [0, {topology.buffer}]^{topology.num_links}")
    ok = (topology.box_sigma <= z).all(axis=1)
    return [s for s, keep in zip(topology.box_schedules, ok) if keep]


# -- arrivals -----------------------------------------------------------------

_DIST_RE = re.compile(
    r"^\s*(?P<kind>bernoulli|binomial|deterministic)\s*(?:\(\s*(?P<k>\d+)\s*\))?"
    r"\s*(?:@\s*(?P<period>\d+)\s*(?:\+\s*(?P<offset>\d+))?)?\s*$"
)


@dataclass(frozen=True)
class ArrivalStream:
    """One bounded i.i.d. arrival stream, optionally gated to slots t = offset (mod period).

    `rate` is the mean per slot. Within an active slot the increment is
    Bernoulli(p), Binomial(k, p) or the constant k, with p (or k) chosen so the
    long-run mean per slot equals `rate`.
    """

    kind: str = "bernoulli"
    rate: float = 0.0
    trials: int = 1
    period: int = 1
    offset: int = 0

    def __post_init__(self):
        if self.kind not in ("bernoulli", "binomial", "deterministic"):
            raise ConfigError(f"unknown arrival distribution {self.kind!r}")
        if self.rate < 0:
            raise ConfigError(f"arrival rate must be >= 0, got {self.rate}")
        if self.period < 1 or not 0 <= self.offset < self.period:
            raise ConfigError(f"bad gating period={self.period} offset={self.offset}")
        if self.kind == "bernoulli" and self.active_mean > 1.0 + 1e-12:
            raise ConfigError(f"bernoulli stream needs rate*period <= 1, got {self.active_mean}")
        if self.kind == "binomial":
            if self.trials < 1:
                raise ConfigError("binomial stream needs k >= 1")
            if self.active_mean > self.trials + 1e-12:
                raise ConfigError(f"binomial({self.trials}) stream needs rate*period <= {self.trials}")
        if self.kind == "deterministic":
            k = self.active_mean
            if abs(k - round(k)) > 1e-9:
                raise ConfigError(f"deterministic stream needs rate*period integral, got {k}")

    @classmethod
    def parse(cls, text: str, rate: float) -> "ArrivalStream":
        """Parse 'bernoulli', 'binomial(4)', 'deterministic@3+1', ..."""
        m = _DIST_RE.match(text)
        if not m:
            raise ConfigError(f"cannot parse arrival distribution {text!r}")
        kind = m["kind"]
        if kind == "binomial" and m["k"] is None:
            raise ConfigError(f"binomial distribution needs a trial count: {text!r}")
        if kind != "binomial" and m["k"] is not None:
            raise ConfigError(f"only binomial takes a trial count: {text!r}")
        return cls(
            kind=kind,
            rate=float(rate),
            trials=int(m["k"]) if m["k"] else 1,
            period=int(m["period"]) if m["period"] else 1,
            offset=int(m["offset"]) if m["offset"] else 0,
        )

    def describe(self) -> str:
        base = f"binomial({self.trials})" if self.kind == "binomial" else self.kind
        if self.period > 1:
            base += f"@{self.period}+{self.offset}"
        return base

    @property
    def active_mean(self) -> float:
        return self.rate * self.period

    @property
    def prob(self) -> float:
        if self.kind == "bernoulli":
            return min(self.active_mean, 1.0)
        if self.kind == "binomial":
            return min(self.active_mean / self.trials, 1.0)
        return 1.0

    @property
    def count(self) -> int:
        """Number of Bernoulli trials in an active slot (the constant for deterministic streams)."""
        if self.kind == "deterministic":
            return int(round(self.active_mean))
        return self.trials if self.kind == "binomial" else 1

    @property
    def draws(self) -> int:
        """Uniform variates consumed per slot, active or not."""
        return 0 if self.kind == "deterministic" else self.count

    @property
    def max_increment(self) -> int:
        return self.count

    def active(self, t: int) -> bool:
        return t % self.period == self.offset

    def pmf(self, t: int) -> np.ndarray:
        """Distribution of the increment at slot t over {0..max_increment}."""
        out = np.zeros(self.max_increment + 1)
        if not self.active(t):
            out[0] = 1.0
        elif self.kind == "deterministic":
            out[self.count] = 1.0
        else:
            k, p = self.count, self.prob
            for j in range(k + 1):
                out[j] = math.comb(k, j) * p**j * (1.0 - p) ** (k - j)
        return out


@dataclass(frozen=True)
class ArrivalSpec:
    requests: tuple[ArrivalStream, ...]
    links: tuple[ArrivalStream, ...]

    @property
    def request_rates(self) -> np.ndarray:
        return np.array([s.rate for s in self.requests])

    @property
    def link_rates(self) -> np.ndarray:
        return np.array([s.rate for s in self.links])

    @property
    def link_period(self) -> int:
        """Length of the phase cycle the LLE process sees (1 unless link streams are gated)."""
        return math.lcm(*(s.period for s in self.links)) if self.links else 1

    def with_request_rates(self, rates: Sequence[float]) -> "ArrivalSpec":
        reqs = tuple(
            ArrivalStream(s.kind, float(r), s.trials, s.period, s.offset) for s, r in zip(self.requests, rates)
        )
        return ArrivalSpec(reqs, self.links)

    def check(self, topology: SwitchTopology):
        if len(self.requests) != topology.num_requests:
            raise ConfigError(
                f"arrivals.request_rates has {len(self.requests)} entries, expected {topology.num_requests}"
            )
        if len(self.links) != topology.num_links:
            raise ConfigError(f"arrivals.link_rates has {len(self.links)} entries, expected {topology.num_links}")


def make_arrivals(
    request_rates: Sequence[float],
    link_rates: Sequence[float],
    request_dist: str | Sequence[str] = "bernoulli",
    link_dist: str | Sequence[str] = "bernoulli",
) -> ArrivalSpec:
    def streams(rates, dist, name):
        dists = [dist] * len(rates) if isinstance(dist, str) else list(dist)
        if len(dists) != len(rates):
            raise ConfigError(f"arrivals.{name}_dist has {len(dists)} entries, expected {len(rates)}")
        out = []
        for i, (rate, d) in enumerate(zip(rates, dists)):
            try:
                out.append(ArrivalStream.parse(d, rate))
            except ConfigError as exc:
                raise ConfigError(f"arrivals.{name}[{i}]: {exc}") from None
        return tuple(out)

    return ArrivalSpec(streams(request_rates, request_dist, "request"), streams(link_rates, link_dist, "link"))


# -- config files -------------------------------------------------------------


@dataclass(frozen=True)
class RunParams:
    policy: str = "are"
    policies: tuple[str, ...] = ()
    horizon: int = 10_000
    seed: int = 0
    scale: float = 1.0
    tau: int | None = None
    initial_queue: tuple[int, ...] | None = None
    initial_lle: tuple[int, ...] | None = None
    max_states: int = DEFAULT_MAX_STATES
    record_stride: int = 1
    replications: int = 1

    def __post_init__(self):
        for name in ("horizon", "seed", "max_states", "record_stride", "replications", "tau"):
            v = getattr(self, name)
            if v is None and name == "tau":
                continue
            if isinstance(v, float) and v.is_integer():
                object.__setattr__(self, name, int(v))  # 1e6 from TOML or a float sweep axis
            elif isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise ConfigError(f"run.{name} must be an integer, got {v!r}")
        if self.horizon < 1:
            raise ConfigError(f"run.horizon must be >= 1, got {self.horizon}")
        if self.scale <= 0:
            raise ConfigError(f"run.scale must be > 0, got {self.scale}")
        if self.tau is not None and self.tau < 1:
            raise ConfigError(f"run.tau must be >= 1, got {self.tau}")
        if self.record_stride < 1:
            raise ConfigError("run.record_stride must be >= 1")
        if self.replications < 1:
            raise ConfigError("run.replications must be >= 1")


@dataclass(frozen=True)
class Config:
    topology: SwitchTopology
    arrivals: ArrivalSpec
    run: RunParams = RunParams()

    def __post_init__(self):
        self.arrivals.check(self.topology)
        R, L = self.topology.num_requests, self.topology.num_links
        if self.run.initial_queue is not None:
            if len(self.run.initial_queue) != R or min(self.run.initial_queue) < 0:
                raise ConfigError(f"run.initial_queue must be {R} nonnegative integers")
        if self.run.initial_lle is not None:
            z = self.run.initial_lle
            if len(z) != L or min(z) < 0 or max(z) > self.topology.buffer:
                raise ConfigError(f"run.initial_lle must be {L} integers in [0, {self.topology.buffer}]")

    def __iter__(self):
        # allows `topology, arrivals, run = load_config(path)`
        return iter((self.topology, self.arrivals, self.run))

    def initial_state(self) -> tuple[np.ndarray, np.ndarray]:
        q = self.run.initial_queue or (0,) * self.topology.num_requests
        z = self.run.initial_lle or (0,) * self.topology.num_links
        return np.array(q, dtype=np.int64), np.array(z, dtype=np.int64)

    def to_dict(self) -> dict[str, Any]:
        t, a, r = self.topology, self.arrivals, self.run
        topo = {
            "request_links": [list(ls) for ls in t.request_links],
            "num_links": t.num_links,
            "gamma": list(t.gamma),
            "buffer": t.buffer,
            "decoherence": list(t.decoherence),
            "max_batch": list(t.max_batch),
        }
        arr = {
            "request_rates": [s.rate for s in a.requests],
            "link_rates": [s.rate for s in a.links],
            "request_dist": [s.describe() for s in a.requests],
            "link_dist": [s.describe() for s in a.links],
        }
        run = {}
        for f in fields(RunParams):
            v = getattr(r, f.name)
            if v is None:
                continue
            run[f.name] = list(v) if isinstance(v, tuple) else v
        return {"schema": SCHEMA_VERSION, "topology": topo, "arrivals": arr, "run": run}

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def replace_run(self, **changes) -> "Config":
        values = {f.name: getattr(self.run, f.name) for f in fields(RunParams)}
        values.update(changes)
        return Config(self.topology, self.arrivals, RunParams(**values))


_TOPOLOGY_KEYS = {"request_links", "num_links", "gamma", "buffer", "decoherence", "max_batch"}
_ARRIVAL_KEYS = {"request_rates", "link_rates", "request_dist", "link_dist"}
_RUN_KEYS = {f.name for f in fields(RunParams)}


def _require(section: dict, name: str, key: str):
    if key not in section:
        raise ConfigError(f"missing {name}.{key}")
    return section[key]


def config_from_dict(doc: dict[str, Any]) -> Config:
    for key in doc:
        if key not in ("schema", "topology", "arrivals", "run"):
            raise ConfigError(f"unknown section [{key}]")
    if doc.get("schema", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema version {doc['schema']}")
    topo = doc.get("topology")
    arr = doc.get("arrivals")
    if not isinstance(topo, dict):
        raise ConfigError("missing [topology] section")
    if not isinstance(arr, dict):
        raise ConfigError("missing [arrivals] section")
    run = doc.get("run", {})
    for name, section, allowed in (("topology", topo, _TOPOLOGY_KEYS), ("arrivals", arr, _ARRIVAL_KEYS),
                                   ("run", run, _RUN_KEYS)):
        unknown = sorted(set(section) - allowed)
        if unknown:
            raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")

    links = _require(topo, "topology", "request_links")
    if not isinstance(links, list) or not all(isinstance(ls, list) for ls in links):
        raise ConfigError("topology.request_links must be a list of lists of link indices")
    num_links = topo.get("num_links")
    if num_links is None:
        num_links = 1 + max((l for ls in links for l in ls), default=-1)
    topology = SwitchTopology(
        request_links=tuple(tuple(ls) for ls in links),
        num_links=int(num_links),
        gamma=tuple(_require(topo, "topology", "gamma")),
        buffer=int(_require(topo, "topology", "buffer")),
        decoherence=tuple(_require(topo, "topology", "decoherence")),
        max_batch=tuple(topo["max_batch"]) if "max_batch" in topo else None,
    )
    arrivals = make_arrivals(
        _require(arr, "arrivals", "request_rates"),
        _require(arr, "arrivals", "link_rates"),
        arr.get("request_dist", "bernoulli"),
        arr.get("link_dist", "bernoulli"),
    )
    run_kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in run.items()}
    try:
        params = RunParams(**run_kwargs)
    except TypeError as exc:
        raise ConfigError(f"[run]: {exc}") from None
    return Config(topology, arrivals, params)


def loads_config(text: str) -> Config:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"parse error: {exc}") from None
    return config_from_dict(doc)


def load_config(path: str | Path) -> Config:
    """Read and validate a TOML run configuration."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    try:
        return loads_config(text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
