"""Distributionally robust safety filter for PV reactive-power setpoints.

The filter projects a proposed reactive-power action onto the feeder's
robust feasible set with minimal change: it assembles the branch-flow SOCP
(DistFlow equalities, relaxed line cones, inverter rating cones) with the
operating limits tightened by certified error boxes, minimizes the
Euclidean action deviation plus a small penalty on total squared current
that drives the relaxation exact, and reports the filtered action together
with the model-predicted operating point and diagnostics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import bounds as dro
from . import conic, grid

OPTIMAL = conic.OPTIMAL
FALLBACK = "Fallback"

# objective weight on the per-class worst-violation variables in the
# fallback program; must dominate any attainable deviation so violations
# are minimized before the action is matched
_VIOLATION_WEIGHT = 1e3

_CLASSES = (dro.VOLTAGE, dro.CURRENT, dro.SUBSTATION)


class BoundsMissing(Exception):
    """The bounds dict lacks an entry for a constrained quantity class."""


class InfeasibleFilter(Exception):
    """The robust constraint set is empty for this network and bounds.

    Carries the constraint classes that cannot be satisfied (those left
    violated at the relaxed optimum) and the total residual violation per
    class.
    """

    def __init__(self, binding: list[str], violation: dict[str, float]):
        self.binding = binding
        self.violation = violation
        detail = ", ".join(f"{k}={violation[k]:.3g}" for k in binding)
        super().__init__(f"robust constraint set is empty; binding classes: {detail}")


class SolverFailure(Exception):
    """The conic solver returned neither a solution nor a certificate."""


@dataclass
class DRSFConfig:
    """Filter parameters: certified error boxes per quantity class, the
    cone-exactness penalty weight, and diagnostic thresholds."""

    bounds: dict[str, dro.RobustBounds]
    omega: float = 1e-5
    relaxation_tol: float = 1e-5
    solver_tol: float = 1e-9

    def __post_init__(self) -> None:
        if self.omega < 0:
            raise ValueError("omega must be nonnegative")
        if self.relaxation_tol <= 0 or self.solver_tol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class FilterResult:
    """Filtered action with diagnostics.

    q_safe respects the inverter ratings; predicted is the branch-flow
    point of the relaxation at q_safe (physical when exactness_gap is at
    solver-noise level); status is the solver status, or "Fallback" for a
    slack-relaxed solve after infeasibility.
    """

    q_safe: np.ndarray
    deviation: float
    predicted: grid.OperatingPoint
    exactness_gap: float
    status: str
    solve_time: float
    info: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "q_safe": self.q_safe.tolist(),
            "deviation": self.deviation,
            "exactness_gap": self.exactness_gap,
            "status": self.status,
            "solve_time": self.solve_time,
            "predicted": {
                "v_sq": self.predicted.v_sq.tolist(),
                "l_sq": self.predicted.l_sq.tolist(),
                "p0": self.predicted.p0,
                "q0": self.predicted.q0,
                "loss": self.predicted.loss,
            },
            "info": {k: float(v) for k, v in self.info.items()},
        }

    def to_json(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


@dataclass
class DRSFProgram:
    """An assembled filter program plus the variable layout for extraction.

    violation maps each quantity class to its shared relaxation variable
    when the program was built with violation_slacks, else is empty.
    """

    program: conic.ConicProgram
    qpv: list[int]
    p_flow: list[int]
    q_flow: list[int]
    l_sq: list[int]
    v_sq: list[int]
    p0: int
    q0: int
    sub_sq: int
    deviation: int
    violation: dict[str, int]

    def summary(self) -> dict:
        prog = self.program
        n_soc = sum(1 for blk in prog.cones if isinstance(blk, conic.SOC))
        n_nonneg = sum(len(blk.indices) for blk in prog.cones if isinstance(blk, conic.Nonneg))
        return {
            "n_vars": prog.n_vars,
            "n_eq": prog.n_eq,
            "n_soc": n_soc,
            "n_nonneg": n_nonneg,
        }


def zero_bounds(net: grid.Network) -> dict[str, dro.RobustBounds]:
    """Degenerate error boxes (all zeros): the nominal deterministic limits."""
    out = {}
    for kind, dim in (
        (dro.VOLTAGE, net.n_bus),
        (dro.CURRENT, net.n_line),
        (dro.SUBSTATION, 1),
    ):
        out[kind] = dro.RobustBounds(
            kind=kind,
            lower=np.zeros(dim),
            upper=np.zeros(dim),
            epsilon=0.0,
            alpha=0.0,
            certified_prob=1.0,
        )
    return out


def robust_limits(
    net: grid.Network, bnds: dict[str, dro.RobustBounds]
) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Squared operating limits tightened by the certified error boxes.

    Returns (v_lo, v_hi) per bus, the squared-current caps per line, and
    the squared substation cap: the model-side limits whose satisfaction
    keeps the true quantities inside the nominal limits for every error in
    the boxes.
    """
    _check_bounds(net, bnds)
    limits = net.limits
    v_lo = limits.v_min**2 - bnds[dro.VOLTAGE].lower
    v_hi = limits.v_max**2 - bnds[dro.VOLTAGE].upper
    i_hi = limits.i_max**2 - bnds[dro.CURRENT].upper
    s_hi = float(limits.s0_max**2 - bnds[dro.SUBSTATION].upper[0])
    return v_lo, v_hi, i_hi, s_hi


def violation_totals(
    net: grid.Network, cfg: DRSFConfig, op: grid.OperatingPoint
) -> dict[str, float]:
    """Total robust-limit violation mass per quantity class at a point."""
    v_lo, v_hi, i_hi, s_hi = robust_limits(net, cfg.bounds)
    nv = np.sum(np.maximum(v_lo - op.v_sq, 0.0))
    nv += np.sum(np.maximum(op.v_sq - v_hi, 0.0))
    ni = np.sum(np.maximum(op.l_sq - i_hi, 0.0))
    ns = max(op.p0**2 + op.q0**2 - s_hi, 0.0)
    return {dro.VOLTAGE: float(nv), dro.CURRENT: float(ni), dro.SUBSTATION: float(ns)}


def _check_bounds(net: grid.Network, bnds: dict[str, dro.RobustBounds]) -> None:
    dims = {dro.VOLTAGE: net.n_bus, dro.CURRENT: net.n_line, dro.SUBSTATION: 1}
    for kind, dim in dims.items():
        if kind not in bnds:
            raise BoundsMissing(f"bounds dict lacks the {kind!r} entry")
        got = bnds[kind].lower.shape[0]
        if got != dim:
            raise conic.DimensionError(
                f"{kind} bounds have dim {got}, network needs {dim}"
            )


def build_drsf(
    net: grid.Network,
    q_learn: np.ndarray | list[float],
    cfg: DRSFConfig,
    violation_slacks: bool = False,
) -> DRSFProgram:
    """Assemble the filter SOCP for one proposed action.

    With violation_slacks each quantity class gets one penalized
    relaxation variable loosening all its robust limit rows, turning an
    infeasible projection into a minimax-violation program: the fallback
    keeps the operating point as deep inside the impossible robust set as
    physics allows instead of letting constant violation mass cancel out
    of the comparison.
    """
    q_learn = np.asarray(q_learn, dtype=float)
    if q_learn.shape != (net.n_pv,):
        raise conic.DimensionError(
            f"expected {net.n_pv} proposed setpoints, got shape {q_learn.shape}"
        )
    _check_bounds(net, cfg.bounds)

    oriented = grid.validate_radial(net)
    index = net.bus_index()
    parent = [index[a] for a, _ in oriented]
    child = [index[b] for _, b in oriented]
    root = index[0]
    nb, nl = net.n_bus, net.n_line
    r = np.array([ln.r for ln in net.lines])
    x = np.array([ln.x for ln in net.lines])

    # constant injections: loads and fixed PV real power; PV reactive
    # power enters as a variable
    p_inj = np.zeros(nb)
    q_load = np.zeros(nb)
    for b in net.buses:
        p_inj[index[b.id]] -= b.p_load
        q_load[index[b.id]] += b.q_load
    for pv in net.pv_units:
        p_inj[index[pv.bus]] += pv.p_gen
    pv_at_bus: dict[int, list[int]] = {}
    for m, pv in enumerate(net.pv_units):
        pv_at_bus.setdefault(index[pv.bus], []).append(m)

    prog = conic.ConicProgram()
    qpv = prog.add_vars(net.n_pv)
    P = prog.add_vars(nl)
    Q = prog.add_vars(nl)
    l = prog.add_vars(nl)
    v = prog.add_vars(nb)
    p0_var, q0_var = prog.add_vars(2)

    in_lines: dict[int, list[int]] = {}
    out_lines: dict[int, list[int]] = {}
    for k in range(nl):
        in_lines.setdefault(child[k], []).append(k)
        out_lines.setdefault(parent[k], []).append(k)

    # real / reactive balance per bus; the substation import closes the root
    for j in range(nb):
        rowp: dict[int, float] = {}
        rowq: dict[int, float] = {}
        for k in in_lines.get(j, []):
            rowp[P[k]] = 1.0
            rowp[l[k]] = -r[k]
            rowq[Q[k]] = 1.0
            rowq[l[k]] = -x[k]
        for k in out_lines.get(j, []):
            rowp[P[k]] = rowp.get(P[k], 0.0) - 1.0
            rowq[Q[k]] = rowq.get(Q[k], 0.0) - 1.0
        for m in pv_at_bus.get(j, []):
            rowq[qpv[m]] = 1.0
        if j == root:
            rowp[p0_var] = 1.0
            rowq[q0_var] = 1.0
        prog.add_eq(rowp, -p_inj[j])
        prog.add_eq(rowq, q_load[j])

    # voltage drop along each line and the fixed substation voltage
    for k in range(nl):
        prog.add_eq(
            {
                v[child[k]]: 1.0,
                v[parent[k]]: -1.0,
                P[k]: 2.0 * r[k],
                Q[k]: 2.0 * x[k],
                l[k]: -(r[k] ** 2 + x[k] ** 2),
            },
            0.0,
        )
    prog.add_eq({v[root]: 1.0}, float(net.v0))

    # branch cones ||(2P, 2Q, v - l)|| <= v + l through aux copies
    for k in range(nl):
        a = prog.add_vars(4)
        prog.add_eq({a[0]: 1.0, v[parent[k]]: -1.0, l[k]: -1.0}, 0.0)
        prog.add_eq({a[1]: 1.0, P[k]: -2.0}, 0.0)
        prog.add_eq({a[2]: 1.0, Q[k]: -2.0}, 0.0)
        prog.add_eq({a[3]: 1.0, v[parent[k]]: -1.0, l[k]: 1.0}, 0.0)
        prog.add_soc(a)

    # inverter apparent-power ratings ||(p_gen, q)|| <= s_rating
    for m, pv in enumerate(net.pv_units):
        a = prog.add_vars(3)
        prog.add_eq({a[0]: 1.0}, pv.s_rating)
        prog.add_eq({a[1]: 1.0}, pv.p_gen)
        prog.add_eq({a[2]: 1.0, qpv[m]: -1.0}, 0.0)
        prog.add_soc(a)

    # substation epigraph u >= P0^2 + Q0^2 as ||(2P0, 2Q0, u-1)|| <= u+1
    (u,) = prog.add_vars(1)
    a = prog.add_vars(4)
    prog.add_eq({a[0]: 1.0, u: -1.0}, 1.0)
    prog.add_eq({a[1]: 1.0, p0_var: -2.0}, 0.0)
    prog.add_eq({a[2]: 1.0, q0_var: -2.0}, 0.0)
    prog.add_eq({a[3]: 1.0, u: -1.0}, -1.0)
    prog.add_soc(a)

    # action deviation epigraph t >= ||q_learn - qpv||
    d = prog.add_vars(net.n_pv)
    for m in range(net.n_pv):
        prog.add_eq({d[m]: 1.0, qpv[m]: 1.0}, float(q_learn[m]))
    t = conic.add_epigraph_norm(prog, d)

    # robust operating limits, tightened by the certified error boxes
    v_lo, v_hi, i_hi, s_hi = robust_limits(net, cfg.bounds)
    slacks: list[int] = []
    violation: dict[str, int] = {}
    if violation_slacks:
        for kind in _CLASSES:
            (w_,) = prog.add_vars(1)
            violation[kind] = w_
            prog.set_objective_term(w_, _VIOLATION_WEIGHT)

    def limit_row(var: int, sense: float, rhs: float, kind: str) -> None:
        # sense +1: var + slack = rhs (upper limit); -1: var - slack = rhs
        (s_,) = prog.add_vars(1)
        row = {var: 1.0, s_: sense}
        if violation_slacks:
            row[violation[kind]] = -sense
        prog.add_eq(row, rhs)
        slacks.append(s_)

    for i in range(nb):
        limit_row(v[i], -1.0, float(v_lo[i]), dro.VOLTAGE)
        limit_row(v[i], 1.0, float(v_hi[i]), dro.VOLTAGE)
    for k in range(nl):
        limit_row(l[k], 1.0, float(i_hi[k]), dro.CURRENT)
    limit_row(u, 1.0, s_hi, dro.SUBSTATION)

    prog.add_nonneg(slacks + list(violation.values()))

    prog.set_objective_term(t, 1.0)
    for k in range(nl):
        prog.set_objective_term(l[k], cfg.omega)

    return DRSFProgram(
        program=prog,
        qpv=qpv,
        p_flow=P,
        q_flow=Q,
        l_sq=l,
        v_sq=v,
        p0=p0_var,
        q0=q0_var,
        sub_sq=u,
        deviation=t,
        violation=violation,
    )


def relaxation_gap(net: grid.Network, op: grid.OperatingPoint) -> float:
    """Largest signed cone gap v_i * l_ij - (P_ij^2 + Q_ij^2) over lines."""
    if net.n_line == 0:
        return 0.0
    oriented = grid.validate_radial(net)
    index = net.bus_index()
    parent = np.array([index[a] for a, _ in oriented])
    gaps = op.v_sq[parent] * op.l_sq - (op.p_flow**2 + op.q_flow**2)
    return float(np.max(gaps))


def _extract(net: grid.Network, built: DRSFProgram, z: np.ndarray):
    r = np.array([ln.r for ln in net.lines])
    q_safe = z[built.qpv] if net.n_pv else np.zeros(0)
    # clamp solver noise back inside the ratings
    q_safe = np.array(
        [
            float(np.clip(qi, -pv.q_max, pv.q_max))
            for qi, pv in zip(q_safe, net.pv_units)
        ]
    )
    l_sq = z[built.l_sq]
    op = grid.OperatingPoint(
        v_sq=z[built.v_sq].copy(),
        l_sq=l_sq.copy(),
        p_flow=z[built.p_flow].copy(),
        q_flow=z[built.q_flow].copy(),
        p0=float(z[built.p0]),
        q0=float(z[built.q0]),
        loss=float(r @ l_sq) if net.n_line else 0.0,
    )
    return q_safe, op


def _solve_with_exactness(net: grid.Network, built: DRSFProgram, cfg: DRSFConfig):
    """Solve a built program; escalate the current penalty until the cone
    gap closes.

    The relaxation can hide a binding upper voltage limit by inflating a
    squared current, which deflates the predicted downstream voltage; the
    inflation stops paying once the penalty weight exceeds the deviation
    it buys, so the weight is raised geometrically only when the solved
    gap exceeds relaxation_tol.  The first solve always uses the
    configured omega.
    """
    omega = cfg.omega
    total_time = 0.0
    while True:
        sol = conic.solve(built.program, tol=cfg.solver_tol)
        total_time += sol.solve_time
        if sol.status != conic.OPTIMAL:
            return sol, None, None, omega, total_time
        q_safe, op = _extract(net, built, sol.z)
        gap = relaxation_gap(net, op)
        if gap <= cfg.relaxation_tol or omega >= _OMEGA_CAP:
            return sol, (q_safe, op, gap), None, omega, total_time
        omega = min(max(100.0 * omega, 1e-5), _OMEGA_CAP)
        for idx in built.l_sq:
            built.program.set_objective_term(idx, omega)


_OMEGA_CAP = 10.0


def filter_action(
    net: grid.Network,
    q_learn: np.ndarray | list[float],
    cfg: DRSFConfig,
    on_infeasible: str = "raise",
) -> FilterResult:
    """Project a proposed action onto the robust feasible set.

    on_infeasible: "raise" raises InfeasibleFilter naming the binding
    constraint classes; "relax" returns the minimax-violation fallback
    result with status "Fallback" instead, its info carrying the residual
    violation mass per class.
    """
    if on_infeasible not in ("raise", "relax"):
        raise ValueError("on_infeasible must be 'raise' or 'relax'")
    q_learn = np.asarray(q_learn, dtype=float)
    built = build_drsf(net, q_learn, cfg)
    sol, point, _, omega_used, solve_time = _solve_with_exactness(net, built, cfg)
    if sol.status == conic.OPTIMAL:
        q_safe, op, gap = point
        if gap > cfg.relaxation_tol:
            raise SolverFailure(
                f"relaxation stayed inexact (gap {gap:.3g}) at penalty weight {omega_used}"
            )
        info = {"omega_used": omega_used} if omega_used != cfg.omega else {}
        return FilterResult(
            q_safe=q_safe,
            deviation=float(np.linalg.norm(q_learn - q_safe)),
            predicted=op,
            exactness_gap=gap,
            status=sol.status,
            solve_time=solve_time,
            info=info,
        )
    if sol.status != conic.INFEASIBLE:
        raise SolverFailure(
            f"filter solve ended with status {sol.status}: {sol.info.get('reason', '')}"
        )

    # minimax-violation relaxation: identifies the binding classes and
    # doubles as the fallback action
    relaxed = build_drsf(net, q_learn, cfg, violation_slacks=True)
    rsol, rpoint, _, omega_used, rtime = _solve_with_exactness(net, relaxed, cfg)
    if rsol.status != conic.OPTIMAL:
        raise SolverFailure(
            f"violation-relaxed solve ended with status {rsol.status}"
        )
    q_safe, op, gap = rpoint
    totals = violation_totals(net, cfg, op)
    binding = [kind for kind in _CLASSES if totals[kind] > 1e-7]
    if on_infeasible == "raise":
        raise InfeasibleFilter(binding, totals)
    info = {f"violation_{k}": totals[k] for k in _CLASSES}
    if omega_used != cfg.omega:
        info["omega_used"] = omega_used
    return FilterResult(
        q_safe=q_safe,
        deviation=float(np.linalg.norm(q_learn - q_safe)),
        predicted=op,
        exactness_gap=gap,
        status=FALLBACK,
        solve_time=solve_time + rtime,
        info=info,
    )
