"""qswitch command line: simulate, mdp-solve, capacity, mixing, fluid, scenario, sweep."""

from __future__ import annotations

import argparse
import io
import sys
from pathlib import Path

import numpy as np

from . import analysis, capacity, scenarios
from .dynamics import SwitchState, simulate
from .lp import LpError
from .mdp import SolverError, policy_iteration, solve_average_reward
from .model import SCHEMA_VERSION, ConfigError, load_config
from .schedulers import parse_policy, write_policy_table

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE = 0, 1, 2


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _values(text: str) -> list:
    """Comma-separated TOML scalars, so integer axes stay integers."""
    return [_value(v.strip()) for v in text.split(",") if v.strip()]


def _grid(text: str) -> list[list[float]]:
    return [_floats(part) for part in text.split(";") if part.strip()]


def _value(text: str):
    """TOML scalar or array if it parses as one, else the bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _global_flags() -> argparse.ArgumentParser:
    # SUPPRESS lets the flags appear before or after the subcommand without clobbering each other
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=argparse.SUPPRESS, help="TOML run configuration")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (overrides run.seed)")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default: stdout)")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads for replications")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = argparse.ArgumentParser(prog="qswitch", parents=[common], description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="run one trajectory and write the trace CSV")
    p.add_argument("--policy", help="policy spec, e.g. maxweight, are, priority-reserve:2,0,1, static:table.csv")
    p.add_argument("--horizon", type=int)
    p.add_argument("--stride", type=int, help="record every k-th slot")

    p = sub.add_parser("mdp-solve", parents=[common], help="optimal agnostic policy for a queue vector")
    p.add_argument("--q", type=_floats, required=True, help="queue weights, comma-separated")
    p.add_argument("--method", choices=("rvi", "pi"), default="rvi")

    p = sub.add_parser("capacity", parents=[common], help="capacity-region membership of an arrival vector")
    p.add_argument("--lambda", dest="lam", type=_floats, help="arrival rates (default: the config's)")
    p.add_argument("--epsilon", type=float, default=0.0)

    p = sub.add_parser("mixing", parents=[common], help="Dobrushin coefficients over a grid of queue vectors")
    p.add_argument("--q-grid", type=_grid, help="semicolon-separated queue vectors (default: 5-point grid)")
    p.add_argument("--steps", type=int, default=30)

    p = sub.add_parser("fluid", parents=[common], help="integrate the fluid model")
    p.add_argument("--lambda", dest="lam", type=_floats)
    p.add_argument("--q0", type=_floats, required=True)
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--dt", type=float, default=0.01)
    p.add_argument("--scheme", choices=("implicit", "explicit"), default="implicit")

    p = sub.add_parser("scenario", parents=[common], help="run a bundled preset and evaluate its checks")
    p.add_argument("name", nargs="?", help="preset name; omit with --list")
    p.add_argument("--list", action="store_true", help="list presets")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a run key or preset parameter (repeatable)")

    p = sub.add_parser("sweep", parents=[common], help="sweep one config entry across values")
    p.add_argument("--axis", required=True, help="parameter path, e.g. arrivals.request_rates[2]")
    p.add_argument("--values", type=_values, required=True, help="comma-separated values (may be empty)")
    p.add_argument("--replications", type=int)
    p.add_argument("--policy", action="append", dest="policies",
                   help="policy spec, repeatable (default: run.policies)")
    return parser


class _Output:
    """Files go under --out when given, otherwise everything is concatenated on stdout."""

    def __init__(self, out: str | None, stdout):
        self.dir = Path(out) if out else None
        self.stdout = stdout
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)

    def write(self, name: str, text: str):
        if self.dir is None:
            self.stdout.write(text)
        else:
            (self.dir / name).write_text(text)


def _kv(pairs) -> str:
    return f"# qswitch report schema v{SCHEMA_VERSION}\n" + "".join(f"{k} = {scenarios._cell(v)}\n" for k, v in pairs)


def _policy_csv(policy) -> str:
    buf = io.StringIO()
    write_policy_table(policy, buf)
    return buf.getvalue()


def _need_config(args):
    if "config" not in args:
        raise ConfigError(f"{args.command} needs --config")
    cfg = load_config(args.config)
    if "seed" in args:
        cfg = cfg.replace_run(seed=args.seed)
    return cfg


def _cmd_simulate(args, out: _Output) -> int:
    cfg = _need_config(args)
    changes = {k: v for k, v in (("policy", args.policy), ("horizon", args.horizon),
                                 ("record_stride", args.stride)) if v is not None}
    cfg = cfg.replace_run(**changes)
    topology, arrivals, run = cfg
    policy = parse_policy(run.policy, tau=run.tau, scale=run.scale, base_dir=Path(args.config).parent,
                          max_states=run.max_states)
    q0, z0 = cfg.initial_state()
    trace = simulate(topology, arrivals, policy, run.horizon, run.seed,
                     SwitchState(tuple(q0.tolist()), tuple(z0.tolist())), stride=run.record_stride)
    out.write("trace.csv", trace.to_csv())
    if out.dir is not None:
        out.write("config.toml", cfg.dumps())
    return EXIT_OK


def _cmd_mdp(args, out: _Output) -> int:
    topology, arrivals, run = _need_config(args)
    solve = solve_average_reward if args.method == "rvi" else policy_iteration
    sol = solve(topology, arrivals, args.q, max_states=run.max_states)
    out.write("solution.txt", _kv([("method", args.method), ("gain", sol.gain), ("residual", sol.residual),
                                   ("iterations", sol.iterations)]))
    out.write("policy.csv", _policy_csv(sol.as_policy()))
    return EXIT_OK


def _cmd_capacity(args, out: _Output) -> int:
    topology, arrivals, run = _need_config(args)
    lam = args.lam if args.lam is not None else arrivals.request_rates
    cq = capacity.max_min_slack(topology, arrivals, lam, args.epsilon, max_states=run.max_states)
    out.write("capacity.txt", _kv([
        ("lambda", " ".join(repr(float(v)) for v in cq.lam)), ("epsilon", cq.epsilon), ("slack", cq.slack),
        ("verdict", cq.verdict), ("in_c_eps", cq.in_c_eps),
        ("service_rates", " ".join(repr(float(v)) for v in cq.service_rates)),
        ("direction", " ".join(repr(float(v)) for v in cq.direction)),
    ]))
    out.write("witness.csv", _policy_csv(cq.witness))
    return EXIT_OK


def default_q_grid(num_requests: int, points: int = 5) -> list[list[float]]:
    """From equal weights to all weight on the last type."""
    even = np.full(num_requests, 1.0 / num_requests)
    last = np.eye(num_requests)[-1]
    return [((1 - t) * even + t * last).tolist() for t in np.linspace(0.0, 1.0, points)]


def _cmd_mixing(args, out: _Output) -> int:
    topology, arrivals, run = _need_config(args)
    R = topology.num_requests
    qs = args.q_grid or default_q_grid(R)
    rep = analysis.verify_uniform_mixing(topology, arrivals, qs, args.steps, run.max_states)
    rows = [[*map(float, q), rho, rep.rho_bound] for q, rho in zip(rep.qs, rep.rhos)]
    out.write("rho.csv", scenarios.table_csv("rho", [f"q_{r}" for r in range(R)] + ["rho", "rho_bound"], rows))
    out.write("tv.csv", scenarios.table_csv("tv", ["step", "tv"], [[k, float(v)] for k, v in enumerate(rep.tv_curve)]))
    return EXIT_OK


def _cmd_fluid(args, out: _Output) -> int:
    topology, arrivals, run = _need_config(args)
    lam = args.lam if args.lam is not None else arrivals.request_rates
    traj = analysis.integrate_fluid(topology, arrivals, lam, args.q0, args.horizon, args.dt, scheme=args.scheme,
                                    max_states=run.max_states)
    R = topology.num_requests
    header = ["time"] + [f"qbar_{r}" for r in range(R)] + [f"dbar_{r}" for r in range(R)] + ["lyapunov"]
    rows = [[float(t), *traj.qbar[k].tolist(), *traj.dbar[k].tolist(), float(traj.lyapunov[k])]
            for k, t in enumerate(traj.times)]
    out.write("fluid.csv", scenarios.table_csv("fluid", header, rows))
    return EXIT_OK


def _cmd_scenario(args, out: _Output) -> int:
    if args.list or not args.name:
        for p in scenarios.PRESETS.values():
            out.stdout.write(f"{p.name}\t{p.description}\n")
        return EXIT_OK if args.list else EXIT_USAGE
    overrides = {}
    for item in args.set:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = _value(val.strip())
    res = scenarios.run_scenario(args.name, getattr(args, "seed", 0), out.dir, overrides,
                                 getattr(args, "threads", 1))
    if out.dir is None:
        out.stdout.write(scenarios.summary_text(res))
    return EXIT_OK if res.ok else EXIT_CHECK_FAILED


def _cmd_sweep(args, out: _Output) -> int:
    cfg = _need_config(args)
    table = scenarios.sweep(cfg, args.axis, args.values, args.replications, args.policies, cfg.run.seed,
                            getattr(args, "threads", 1))
    out.write("sweep.csv", table.to_csv())
    return EXIT_OK


COMMANDS = {
    "simulate": _cmd_simulate,
    "mdp-solve": _cmd_mdp,
    "capacity": _cmd_capacity,
    "mixing": _cmd_mixing,
    "fluid": _cmd_fluid,
    "scenario": _cmd_scenario,
    "sweep": _cmd_sweep,
}


def main(argv=None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        out = _Output(getattr(args, "out", None), stdout)
        return COMMANDS[args.command](args, out)
    except (ConfigError, ValueError) as exc:
        print(f"qswitch {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverError, LpError) as exc:
        print(f"qswitch {args.command}: solver failure: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
