"""Closed-loop experiment engine for filtered volt/VAr control.

Generates model-error samples by comparing power flows on nominal and
parameter-perturbed feeders, runs episodes of a pluggable controller whose
actions pass (or bypass) the safety filter on the nominal model while a
perturbed "true" feeder determines the actual operating point, and scores
constraint violations, losses, rewards, and filter timing per step.
"""

from __future__ import annotations

import copy
import csv
import json
from abc import ABC, abstractmethod
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from . import bounds as dro
from . import grid, safety

# absolute slop (p.u.^2) when counting violations: a filtered optimum may
# bind a limit exactly, and the relaxation gap plus solver noise can land
# the true operating point a hair past it
VIOLATION_TOL = 1e-6

_KINDS = (dro.VOLTAGE, dro.CURRENT, dro.SUBSTATION)


@dataclass
class Observation:
    """Nominal-model summary a controller acts on."""

    v: np.ndarray
    loss: float
    q_max: np.ndarray
    step: int


class Controller(ABC):
    """Maps an Observation to proposed PV reactive setpoints."""

    @abstractmethod
    def act(self, obs: Observation) -> np.ndarray:
        raise NotImplementedError


class RandomController(Controller):
    """Uniform proposals inside the rating box; seeded and stateful."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)

    def act(self, obs: Observation) -> np.ndarray:
        return self.rng.uniform(-obs.q_max, obs.q_max)


class GreedyVoltController(Controller):
    """Proportional droop on the mean voltage error: q = gain * (1 - v_mean)
    per unit, clipped to each rating."""

    def __init__(self, gain: float = 5.0):
        self.gain = gain

    def act(self, obs: Observation) -> np.ndarray:
        push = self.gain * (1.0 - float(np.mean(obs.v)))
        return np.clip(push * obs.q_max, -obs.q_max, obs.q_max)


class ReplayController(Controller):
    """Plays back actions from a CSV file, one row per step."""

    def __init__(self, path: str):
        self.actions = np.loadtxt(path, delimiter=",", ndmin=2)

    def act(self, obs: Observation) -> np.ndarray:
        if obs.step >= self.actions.shape[0]:
            raise IndexError(
                f"replay file has {self.actions.shape[0]} rows, step {obs.step} requested"
            )
        return self.actions[obs.step]


@dataclass
class EpisodeConfig:
    """One experiment: horizon steps per scenario, model-perturbation level,
    filter toggle, and reward weights."""

    horizon: int
    sigma: float
    seed: int
    filter_on: bool
    drsf: safety.DRSFConfig | None = None
    n_scenarios: int = 1
    reward_weights: tuple[float, float] = (2000.0, 1000.0)
    redraw_each_step: bool = False
    load_scale: np.ndarray | None = None
    pv_scale: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.horizon < 0:
            raise ValueError("horizon must be nonnegative")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.n_scenarios < 1:
            raise ValueError("n_scenarios must be positive")
        if any(w < 0 for w in self.reward_weights):
            raise ValueError("reward weights must be nonnegative")
        if self.filter_on and self.drsf is None:
            raise ValueError("filter_on requires a DRSFConfig")


@dataclass
class EpisodeReport:
    """Per-step metrics plus per-class violation totals.

    Arrays have length horizon * n_scenarios, scenarios concatenated in
    order.  violations maps each quantity class to the total bus-step
    (line-step, step) count over the episode.
    """

    violations: dict[str, int]
    violations_v: np.ndarray
    violations_i: np.ndarray
    violations_s: np.ndarray
    loss: np.ndarray
    rewards: np.ndarray
    deviations: np.ndarray
    filter_times: np.ndarray
    fallback_steps: int = 0
    clipped_steps: int = 0

    @property
    def total_loss(self) -> float:
        return float(np.sum(self.loss))

    @property
    def joint_voltage_violation_freq(self) -> float:
        """Fraction of steps with at least one bus outside the band."""
        if self.violations_v.size == 0:
            return 0.0
        return float(np.mean(self.violations_v > 0))

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["step", "violations_v", "violations_i", "violations_s",
                 "loss", "reward", "deviation", "filter_ms"]
            )
            for t in range(self.loss.size):
                writer.writerow(
                    [t, int(self.violations_v[t]), int(self.violations_i[t]),
                     int(self.violations_s[t]), f"{self.loss[t]:.12g}",
                     f"{self.rewards[t]:.12g}", f"{self.deviations[t]:.12g}",
                     f"{1e3 * self.filter_times[t]:.6g}"]
                )

    def to_json(self, path: str) -> None:
        payload = {
            "violations": self.violations,
            "total_loss": self.total_loss,
            "joint_voltage_violation_freq": self.joint_voltage_violation_freq,
            "fallback_steps": self.fallback_steps,
            "clipped_steps": self.clipped_steps,
            "violations_v": self.violations_v.tolist(),
            "violations_i": self.violations_i.tolist(),
            "violations_s": self.violations_s.tolist(),
            "loss": self.loss.tolist(),
            "rewards": self.rewards.tolist(),
            "deviations": self.deviations.tolist(),
            "filter_times": self.filter_times.tolist(),
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")


def _rating_limits(net: grid.Network) -> np.ndarray:
    return np.array([pv.q_max for pv in net.pv_units])


def scale_network(
    net: grid.Network, load_scale: float = 1.0, pv_scale: float = 1.0
) -> grid.Network:
    """Copy with loads and PV real output scaled (ratings unchanged)."""
    if load_scale < 0 or pv_scale < 0:
        raise ValueError("scales must be nonnegative")
    out = copy.deepcopy(net)
    for b in out.buses:
        b.p_load *= load_scale
        b.q_load *= load_scale
    for pv in out.pv_units:
        pv.p_gen = min(pv.p_gen * pv_scale, pv.s_rating)
    return out


def daily_profile(horizon: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Synthetic daily load and PV irradiance multipliers.

    Load: a sinusoid between roughly 0.6 and 1.0 peaking late in the
    horizon; PV: a half-sine "daylight" bump.  Both carry seeded noise and
    are clipped to sensible ranges.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(horizon) / max(horizon, 1)
    load = 0.8 + 0.2 * np.sin(2 * np.pi * (t - 0.35)) + 0.02 * rng.normal(size=horizon)
    pv = np.sin(np.pi * t) ** 2 + 0.05 * rng.normal(size=horizon)
    return np.clip(load, 0.3, 1.2), np.clip(pv, 0.0, 1.0)


def generate_error_samples(
    nominal: grid.Network, sigma: float, n: int, seed: int
) -> dict[str, dro.ErrorSampleSet]:
    """Sample model errors: true minus nominal power-flow quantities.

    Each sample draws a parameter-perturbed "true" feeder and a random
    feasible action, solves both networks at that action, and records the
    differences in squared voltages (per bus), squared currents (per
    line), and squared substation apparent power (scalar).
    """
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    q_max = _rating_limits(nominal)
    v_err = np.zeros((n, nominal.n_bus))
    l_err = np.zeros((n, nominal.n_line))
    s_err = np.zeros((n, 1))
    for i in range(n):
        pert_seed = int(rng.integers(0, 2**63 - 1))
        action = rng.uniform(-q_max, q_max) if q_max.size else np.zeros(0)
        true_net = grid.perturb_parameters(nominal, sigma, pert_seed)
        try:
            op_nom = grid.solve_power_flow(grid.apply_action(nominal, action))
            op_true = grid.solve_power_flow(grid.apply_action(true_net, action))
        except (grid.NoConvergence, grid.VoltageCollapse) as exc:
            raise type(exc)(f"error sample {i}: {exc}") from exc
        v_err[i] = op_true.v_sq - op_nom.v_sq
        l_err[i] = op_true.l_sq - op_nom.l_sq
        s_err[i, 0] = (op_true.p0**2 + op_true.q0**2) - (op_nom.p0**2 + op_nom.q0**2)
    return {
        dro.VOLTAGE: dro.ErrorSampleSet(dro.VOLTAGE, v_err),
        dro.CURRENT: dro.ErrorSampleSet(dro.CURRENT, l_err),
        dro.SUBSTATION: dro.ErrorSampleSet(dro.SUBSTATION, s_err),
    }


def solve_all_bounds(
    samples: dict[str, dro.ErrorSampleSet], ball: dro.WassersteinBall
) -> dict[str, dro.RobustBounds]:
    """Width-minimizing certified box per quantity class."""
    return {kind: dro.solve_bounds(samples[kind], ball) for kind in _KINDS}


def count_violations(
    true_op: grid.OperatingPoint, limits: grid.OperationalLimits
) -> dict[str, int]:
    """Bus-step / line-step violation counts at a solved point."""
    nv = int(np.sum(true_op.v_sq < limits.v_min**2 - VIOLATION_TOL))
    nv += int(np.sum(true_op.v_sq > limits.v_max**2 + VIOLATION_TOL))
    ni = int(np.sum(true_op.l_sq > limits.i_max**2 + VIOLATION_TOL))
    ns = int(true_op.p0**2 + true_op.q0**2 > limits.s0_max**2 + VIOLATION_TOL)
    return {dro.VOLTAGE: nv, dro.CURRENT: ni, dro.SUBSTATION: ns}


def compute_reward(
    deviation: float, p_loss: float, weights: tuple[float, float] = (2000.0, 1000.0)
) -> float:
    """Negative weighted sum of action deviation and real power loss."""
    if deviation < 0 or p_loss < 0:
        raise ValueError("deviation and loss must be nonnegative")
    return -weights[0] * deviation - weights[1] * p_loss


def run_scenario(
    cfg: EpisodeConfig,
    controller: Controller | Callable[[int], Controller],
    nominal: grid.Network,
    scenario: int = 0,
) -> EpisodeReport:
    """Run one closed-loop scenario of cfg.horizon steps.

    One perturbed "true" feeder is drawn from (cfg.seed, scenario) and
    held for the horizon (redraw_each_step redraws it every step).  Per
    step the controller sees the nominal model solved at the previously
    applied action, its proposal is clipped to the ratings, optionally
    filtered on the nominal model, and the true feeder is solved at the
    applied setpoints to score violations, loss, and reward.

    A callable controller is treated as a factory and built fresh from the
    scenario index, making scenarios order-independent; an instance keeps
    its state across sequential scenarios.
    """
    ctrl = controller if isinstance(controller, Controller) else controller(scenario)
    report = EpisodeReport(
        violations={k: 0 for k in _KINDS},
        violations_v=np.zeros(cfg.horizon, dtype=int),
        violations_i=np.zeros(cfg.horizon, dtype=int),
        violations_s=np.zeros(cfg.horizon, dtype=int),
        loss=np.zeros(cfg.horizon),
        rewards=np.zeros(cfg.horizon),
        deviations=np.zeros(cfg.horizon),
        filter_times=np.zeros(cfg.horizon),
    )
    q_max = _rating_limits(nominal)
    seed_root = np.random.default_rng((cfg.seed, scenario))
    pert_rng = np.random.default_rng(seed_root.integers(0, 2**63 - 1))
    true_net = grid.perturb_parameters(
        nominal, cfg.sigma, int(pert_rng.integers(0, 2**63 - 1))
    )
    q_prev = np.zeros(nominal.n_pv)
    for t in range(cfg.horizon):
        load_s = float(cfg.load_scale[t]) if cfg.load_scale is not None else 1.0
        pv_s = float(cfg.pv_scale[t]) if cfg.pv_scale is not None else 1.0
        nominal_t = (
            scale_network(nominal, load_s, pv_s)
            if (load_s != 1.0 or pv_s != 1.0)
            else nominal
        )
        true_t = (
            scale_network(true_net, load_s, pv_s)
            if (load_s != 1.0 or pv_s != 1.0)
            else true_net
        )
        if cfg.redraw_each_step and t > 0:
            true_t = grid.perturb_parameters(
                nominal_t, cfg.sigma, int(pert_rng.integers(0, 2**63 - 1))
            )

        try:
            obs_op = grid.solve_power_flow(grid.apply_action(nominal_t, q_prev))
        except (grid.NoConvergence, grid.VoltageCollapse) as exc:
            raise type(exc)(f"scenario {scenario} step {t}: {exc}") from exc
        obs = Observation(v=obs_op.v, loss=obs_op.loss, q_max=q_max, step=t)
        q_learn = np.asarray(ctrl.act(obs), dtype=float)
        clipped = np.clip(q_learn, -q_max, q_max)
        if not np.allclose(clipped, q_learn, atol=0.0):
            report.clipped_steps += 1
        q_learn = clipped

        if cfg.filter_on:
            res = safety.filter_action(
                nominal_t, q_learn, cfg.drsf, on_infeasible="relax"
            )
            if res.status == safety.FALLBACK:
                report.fallback_steps += 1
            q_applied = res.q_safe
            deviation = res.deviation
            filter_time = res.solve_time
        else:
            q_applied = q_learn
            deviation = 0.0
            filter_time = 0.0

        try:
            true_op = grid.solve_power_flow(grid.apply_action(true_t, q_applied))
        except (grid.NoConvergence, grid.VoltageCollapse) as exc:
            raise type(exc)(f"scenario {scenario} step {t}: {exc}") from exc
        counts = count_violations(true_op, nominal.limits)
        for kind in _KINDS:
            report.violations[kind] += counts[kind]
        report.violations_v[t] = counts[dro.VOLTAGE]
        report.violations_i[t] = counts[dro.CURRENT]
        report.violations_s[t] = counts[dro.SUBSTATION]
        report.loss[t] = true_op.loss
        report.deviations[t] = deviation
        report.rewards[t] = compute_reward(deviation, true_op.loss, cfg.reward_weights)
        report.filter_times[t] = filter_time
        q_prev = q_applied
    return report


def merge_reports(reports: list[EpisodeReport]) -> EpisodeReport:
    """Concatenate per-scenario reports in order."""
    if not reports:
        raise ValueError("nothing to merge")
    merged = EpisodeReport(
        violations={k: sum(r.violations[k] for r in reports) for k in _KINDS},
        violations_v=np.concatenate([r.violations_v for r in reports]),
        violations_i=np.concatenate([r.violations_i for r in reports]),
        violations_s=np.concatenate([r.violations_s for r in reports]),
        loss=np.concatenate([r.loss for r in reports]),
        rewards=np.concatenate([r.rewards for r in reports]),
        deviations=np.concatenate([r.deviations for r in reports]),
        filter_times=np.concatenate([r.filter_times for r in reports]),
        fallback_steps=sum(r.fallback_steps for r in reports),
        clipped_steps=sum(r.clipped_steps for r in reports),
    )
    return merged


def run_episode(
    cfg: EpisodeConfig,
    controller: Controller | Callable[[int], Controller],
    nominal: grid.Network,
) -> EpisodeReport:
    """Run cfg.n_scenarios scenarios sequentially and concatenate them."""
    return merge_reports(
        [run_scenario(cfg, controller, nominal, s) for s in range(cfg.n_scenarios)]
    )


def epsilon_sweep(
    nominal: grid.Network,
    epsilons: list[float],
    alpha: float,
    sigma: float,
    n_samples: int,
    horizon: int,
    seed: int,
    omega: float = 1e-5,
    n_scenarios: int = 1,
) -> dict[float, EpisodeReport]:
    """Filtered episodes across ball radii on paired seeds.

    One sample set is drawn once; only the certified boxes change with
    epsilon, so any violation-frequency trend is attributable to the
    radius alone.
    """
    samples = generate_error_samples(nominal, sigma, n_samples, seed)
    out: dict[float, EpisodeReport] = {}
    for eps in epsilons:
        ball = dro.WassersteinBall(eps, alpha)
        drsf = safety.DRSFConfig(bounds=solve_all_bounds(samples, ball), omega=omega)
        cfg = EpisodeConfig(
            horizon=horizon,
            sigma=sigma,
            seed=seed,
            filter_on=True,
            drsf=drsf,
            n_scenarios=n_scenarios,
        )
        out[eps] = run_episode(cfg, RandomController(seed), nominal)
    return out
