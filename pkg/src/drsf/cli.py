"""Command-line front end for the robust volt/VAr pipeline.

One binary, subcommand style: generate model-error samples, certify
robust bounds, filter a single action, run closed-loop episodes, sweep
the ambiguity radius, and benchmark the filter.  All outputs are
machine-readable CSV/JSON written atomically (temp file + rename), and
every run logs its resolved configuration and seed to stderr.

Exit codes: 0 success, 1 domain error (infeasible, divergent, invalid
data), 2 usage error (bad flags, missing input files).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from . import bounds as dro
from . import conic, grid, harness, safety

log = logging.getLogger("drsf")

_KINDS = (dro.VOLTAGE, dro.CURRENT, dro.SUBSTATION)

_DOMAIN_ERRORS = (
    dro.BoxError,
    dro.InfeasibleBounds,
    dro.SizeGuard,
    safety.BoundsMissing,
    safety.InfeasibleFilter,
    safety.SolverFailure,
    conic.DimensionError,
    conic.NumericalFailure,
    grid.ParseError,
    grid.TopologyError,
    grid.UnitError,
    grid.RatingError,
    grid.NoConvergence,
    grid.VoltageCollapse,
    ValueError,
)


class UsageError(Exception):
    """Bad invocation: wrong flag values or missing input files."""


def _atomic_write(path: str, write) -> None:
    """Call write(tmp) and rename onto path; never leaves partial files."""
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    tmp = f"{path}.tmp{os.getpid()}"
    try:
        write(tmp)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.remove(tmp)
        except OSError:
            pass
        raise


def _require_file(path: str, what: str) -> str:
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def _load_net(spec: str | None) -> grid.Network:
    if spec is None:
        log.info("network: built-in ieee33 feeder")
        return grid.load_builtin("ieee33")
    parts = spec.split(",")
    if len(parts) != 2:
        raise UsageError("--network expects two paths: bus.csv,line.csv")
    bus, line = (p.strip() for p in parts)
    _require_file(bus, "bus file")
    _require_file(line, "line file")
    log.info("network: %s + %s", bus, line)
    return grid.load_network(bus, line)


def _parse_floats(text: str, flag: str) -> list[float]:
    try:
        return [float(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"{flag} expects comma-separated numbers: {exc}") from exc


class ControllerFactory:
    """Builds a fresh controller per scenario; picklable for --jobs."""

    def __init__(self, spec: dict, seed: int):
        self.spec = dict(spec)
        self.seed = int(seed)
        kind = self.spec.get("type", "random")
        if kind not in ("random", "greedy", "replay"):
            raise UsageError(f"unknown controller type {kind!r}")
        if kind == "replay":
            _require_file(str(self.spec.get("path", "")), "replay action file")

    def __call__(self, scenario: int) -> harness.Controller:
        kind = self.spec.get("type", "random")
        if kind == "greedy":
            return harness.GreedyVoltController(float(self.spec.get("gain", 5.0)))
        if kind == "replay":
            return harness.ReplayController(self.spec["path"])
        return harness.RandomController((self.seed, scenario, 101))


def _scenario_worker(payload):
    cfg, factory, net, scenario = payload
    return harness.run_scenario(cfg, factory, net, scenario)


def _run_parallel(
    cfg: harness.EpisodeConfig,
    factory: ControllerFactory,
    net: grid.Network,
    jobs: int,
) -> harness.EpisodeReport:
    jobs = min(max(jobs, 1), cfg.n_scenarios)
    if jobs == 1:
        return harness.run_episode(cfg, factory, net)
    work = [(cfg, factory, net, s) for s in range(cfg.n_scenarios)]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        reports = list(pool.map(_scenario_worker, work))
    return harness.merge_reports(reports)


# ---------------------------------------------------------------- samples


def cmd_samples(args) -> int:
    net = _load_net(args.network)
    samples = harness.generate_error_samples(net, args.sigma, args.n, args.seed)
    os.makedirs(args.out, exist_ok=True)
    for kind, ss in samples.items():
        path = os.path.join(args.out, f"{kind}.csv")
        _atomic_write(path, ss.to_csv)
        log.info("wrote %s (%d x %d)", path, ss.n, ss.dim)
    return 0


# ----------------------------------------------------------------- bounds


def _infer_kind(path: str, explicit: str | None) -> str:
    if explicit:
        return explicit
    stem = os.path.basename(path).lower()
    for kind in _KINDS:
        if kind in stem:
            return kind
    log.info("no quantity class in filename; defaulting to %s", dro.VOLTAGE)
    return dro.VOLTAGE


def cmd_bounds(args) -> int:
    _require_file(args.samples, "samples file")
    kind = _infer_kind(args.samples, args.kind)
    ss = dro.ErrorSampleSet.from_csv(args.samples, kind)
    ball = dro.WassersteinBall(args.epsilon, args.alpha)
    solver = dro.solve_bounds_mip if args.mip else dro.solve_bounds
    rb = solver(ss, ball)
    _atomic_write(args.out, rb.to_json)
    log.info(
        "wrote %s: kind=%s width=%.6g certified_prob=%.4f",
        args.out, rb.kind, rb.width, rb.certified_prob,
    )
    return 0


# ----------------------------------------------------------------- filter


def _load_bounds(spec: str | None, net: grid.Network) -> dict[str, dro.RobustBounds]:
    if spec is None:
        log.info("bounds: zero-width (nominal deterministic limits)")
        return safety.zero_bounds(net)
    paths = [p.strip() for p in spec.split(",")]
    out: dict[str, dro.RobustBounds] = {}
    for p in paths:
        _require_file(p, "bounds file")
        rb = dro.RobustBounds.from_json(p)
        out[rb.kind] = rb
    return out


def cmd_filter(args) -> int:
    net = _load_net(args.network)
    action = np.array(_parse_floats(args.action, "--action"))
    bnds = _load_bounds(args.bounds, net)
    cfg = safety.DRSFConfig(bounds=bnds, omega=args.omega)
    res = safety.filter_action(net, action, cfg, on_infeasible=args.on_infeasible)
    _atomic_write(args.out, res.to_json)
    log.info(
        "wrote %s: status=%s deviation=%.6g gap=%.3g",
        args.out, res.status, res.deviation, res.exactness_gap,
    )
    return 0


# --------------------------------------------------------------- simulate


def _load_config(path: str) -> dict:
    _require_file(path, "config file")
    try:
        if path.endswith(".toml"):
            with open(path, "rb") as fh:
                return tomllib.load(fh)
        with open(path) as fh:
            return json.load(fh)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from exc


def _build_episode(
    payload: dict, net: grid.Network, seed_override: int | None
) -> tuple[harness.EpisodeConfig, ControllerFactory]:
    try:
        horizon = int(payload["horizon"])
        sigma = float(payload["sigma"])
        seed = int(payload["seed"]) if seed_override is None else seed_override
        filter_on = bool(payload["filter_on"])
    except KeyError as exc:
        raise UsageError(f"config lacks required field {exc}") from exc

    drsf_cfg = None
    if filter_on:
        d = payload.get("drsf", {})
        bspec = d.get("bounds", "zero")
        if bspec == "zero":
            bnds = safety.zero_bounds(net)
        elif isinstance(bspec, dict) and "files" in bspec:
            bnds = {
                kind: dro.RobustBounds.from_json(_require_file(p, "bounds file"))
                for kind, p in bspec["files"].items()
            }
        elif isinstance(bspec, dict):
            try:
                ball = dro.WassersteinBall(float(bspec["epsilon"]), float(bspec["alpha"]))
                samples = harness.generate_error_samples(
                    net,
                    float(bspec["sigma"]),
                    int(bspec["n"]),
                    int(bspec.get("seed", seed)),
                )
            except KeyError as exc:
                raise UsageError(f"drsf.bounds lacks required field {exc}") from exc
            bnds = harness.solve_all_bounds(samples, ball)
        else:
            raise UsageError("drsf.bounds must be 'zero', a files map, or a sampling spec")
        kwargs = {"bounds": bnds, "omega": float(d.get("omega", 1e-5))}
        if "relaxation_tol" in d:
            kwargs["relaxation_tol"] = float(d["relaxation_tol"])
        drsf_cfg = safety.DRSFConfig(**kwargs)

    profile = payload.get("profile", "flat")
    load_scale = pv_scale = None
    if profile == "daily":
        load_scale, pv_scale = harness.daily_profile(horizon, seed)
    elif profile != "flat":
        raise UsageError("profile must be 'flat' or 'daily'")

    cfg = harness.EpisodeConfig(
        horizon=horizon,
        sigma=sigma,
        seed=seed,
        filter_on=filter_on,
        drsf=drsf_cfg,
        n_scenarios=int(payload.get("n_scenarios", 1)),
        reward_weights=tuple(payload.get("reward_weights", (2000.0, 1000.0))),
        redraw_each_step=bool(payload.get("redraw_each_step", False)),
        load_scale=load_scale,
        pv_scale=pv_scale,
    )
    factory = ControllerFactory(payload.get("controller", {"type": "random"}), seed)
    return cfg, factory


def cmd_simulate(args) -> int:
    payload = _load_config(args.config)
    net = _load_net(args.network)
    cfg, factory = _build_episode(payload, net, args.seed)
    log.info(
        "episode: horizon=%d sigma=%g seed=%d filter_on=%s scenarios=%d jobs=%d",
        cfg.horizon, cfg.sigma, cfg.seed, cfg.filter_on, cfg.n_scenarios, args.jobs,
    )
    report = _run_parallel(cfg, factory, net, args.jobs)
    prefix = args.out
    for ext in (".csv", ".json"):
        if prefix.endswith(ext):
            prefix = prefix[: -len(ext)]
    _atomic_write(prefix + ".csv", report.to_csv)
    _atomic_write(prefix + ".json", report.to_json)
    log.info(
        "wrote %s.{csv,json}: violations=%s joint_v_freq=%.4f fallback=%d/%d",
        prefix, report.violations, report.joint_voltage_violation_freq,
        report.fallback_steps, report.loss.size,
    )
    return 0


# ------------------------------------------------------------------ sweep


def cmd_sweep(args) -> int:
    net = _load_net(args.network)
    epsilons = _parse_floats(args.epsilons, "--epsilons")
    if not epsilons:
        raise UsageError("--epsilons needs at least one value")
    log.info(
        "sweep: epsilons=%s alpha=%g sigma=%g n=%d horizon=%d seed=%d jobs=%d",
        epsilons, args.alpha, args.sigma, args.n_samples, args.horizon,
        args.seed, args.jobs,
    )
    # one sample set shared across radii: trends are attributable to epsilon
    samples = harness.generate_error_samples(net, args.sigma, args.n_samples, args.seed)
    rows = []
    for eps in epsilons:
        ball = dro.WassersteinBall(eps, args.alpha)
        drsf_cfg = safety.DRSFConfig(
            bounds=harness.solve_all_bounds(samples, ball), omega=args.omega
        )
        cfg = harness.EpisodeConfig(
            horizon=args.horizon,
            sigma=args.sigma,
            seed=args.seed,
            filter_on=True,
            drsf=drsf_cfg,
            n_scenarios=args.n_scenarios,
        )
        factory = ControllerFactory({"type": "random"}, args.seed)
        report = _run_parallel(cfg, factory, net, args.jobs)
        rows.append(
            {
                "epsilon": eps,
                "violation_prob": report.joint_voltage_violation_freq,
                "violations_v": report.violations[dro.VOLTAGE],
                "violations_i": report.violations[dro.CURRENT],
                "violations_s": report.violations[dro.SUBSTATION],
                "fallback_steps": report.fallback_steps,
                "total_loss": report.total_loss,
                "mean_deviation": float(np.mean(report.deviations))
                if report.deviations.size
                else 0.0,
            }
        )
        log.info("epsilon=%g violation_prob=%.4f", eps, rows[-1]["violation_prob"])

    def write_csv(path: str) -> None:
        with open(path, "w") as fh:
            cols = list(rows[0].keys())
            fh.write(",".join(cols) + "\n")
            for row in rows:
                fh.write(",".join(f"{row[c]:.12g}" for c in cols) + "\n")

    _atomic_write(args.out, write_csv)
    log.info("wrote %s", args.out)
    return 0


# ------------------------------------------------------------------ bench


def cmd_bench(args) -> int:
    net = _load_net(args.network)
    cfg = safety.DRSFConfig(bounds=safety.zero_bounds(net))
    rng = np.random.default_rng(args.seed)
    q_max = np.array([pv.q_max for pv in net.pv_units])
    times, statuses = [], []
    for _ in range(args.trials):
        action = rng.uniform(-q_max, q_max)
        res = safety.filter_action(net, action, cfg, on_infeasible="relax")
        times.append(res.solve_time)
        statuses.append(res.status)
    payload = {
        "n_bus": net.n_bus,
        "n_line": net.n_line,
        "n_pv": net.n_pv,
        "trials": args.trials,
        "seed": args.seed,
        "solve_times": times,
        "min_s": min(times),
        "median_s": statistics.median(times),
        "max_s": max(times),
        "statuses": statuses,
    }
    text = json.dumps(payload, indent=2) + "\n"
    if args.out:
        def write_json(tmp: str) -> None:
            with open(tmp, "w") as fh:
                fh.write(text)

        _atomic_write(args.out, write_json)
        log.info("wrote %s", args.out)
    else:
        sys.stdout.write(text)
    log.info("median filter solve %.4f s over %d trials", payload["median_s"], args.trials)
    return 0


# ------------------------------------------------------------------- main


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drsf",
        description="Distributionally robust safety filter pipeline for radial feeders",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_network(p):
        p.add_argument(
            "--network",
            help="bus.csv,line.csv feeder description (default: built-in ieee33)",
        )

    p = sub.add_parser("samples", help="generate model-error samples")
    add_network(p)
    p.add_argument("--sigma", type=float, required=True, help="parameter noise level")
    p.add_argument("--n", type=int, default=50, help="number of samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory for per-class CSVs")
    p.set_defaults(func=cmd_samples)

    p = sub.add_parser("bounds", help="certify a robust error box from samples")
    p.add_argument("--samples", required=True, help="error sample CSV (N x dim)")
    p.add_argument("--kind", choices=list(_KINDS), help="quantity class (default: from filename)")
    p.add_argument("--epsilon", type=float, required=True, help="Wasserstein radius")
    p.add_argument("--alpha", type=float, required=True, help="risk level")
    p.add_argument("--mip", action="store_true", help="use the branch-and-bound reference solver")
    p.add_argument("--out", required=True, help="output bounds JSON")
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("filter", help="project one proposed action")
    add_network(p)
    p.add_argument("--action", required=True, help="comma-separated PV setpoints")
    p.add_argument("--bounds", help="comma-separated bounds JSONs (default: zero boxes)")
    p.add_argument("--omega", type=float, default=1e-5, help="current penalty weight")
    p.add_argument("--on-infeasible", choices=["raise", "relax"], default="relax")
    p.add_argument("--out", required=True, help="output result JSON")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("simulate", help="run closed-loop episodes from a config file")
    add_network(p)
    p.add_argument("--config", required=True, help="episode config (.json or .toml)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--jobs", type=int, default=1, help="parallel scenario workers")
    p.add_argument("--out", required=True, help="output prefix for .csv/.json")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="violation probability across ambiguity radii")
    add_network(p)
    p.add_argument("--epsilons", required=True, help="comma-separated radii")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--n-samples", type=int, default=50)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--n-scenarios", type=int, default=1)
    p.add_argument("--omega", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True, help="output sweep CSV")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="time the filter on random actions")
    add_network(p)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output JSON (default: stdout)")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    if not logging.getLogger().handlers:
        logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="drsf: %(message)s")
    args = _build_parser().parse_args(argv)
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    log.info("resolved config: %s", resolved)
    try:
        return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return 2
    except _DOMAIN_ERRORS as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1
    except OSError as exc:
        log.error("i/o failure: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
