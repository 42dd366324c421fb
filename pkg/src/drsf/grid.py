"""Radial distribution network model and DistFlow power flow.

The network model is the single-phase branch-flow ("DistFlow") description of
a radial feeder: squared voltage magnitudes ``v`` per bus, squared current
magnitudes ``l`` and sending-end flows ``(P, Q)`` per line.  Bus 0 is always
the substation with fixed squared voltage ``v0``.

All quantities are per-unit on the base declared in the network files.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np


class ParseError(Exception):
    """Malformed row or header in a network file."""


class TopologyError(Exception):
    """Network graph is not a tree rooted at the substation."""


class UnitError(Exception):
    """Missing or invalid per-unit base declaration."""


class RatingError(Exception):
    """Action violates an inverter apparent-power rating."""


class NoConvergence(Exception):
    """Power-flow residual above tolerance after max_iter sweeps."""


class VoltageCollapse(Exception):
    """Squared voltage dropped to zero or below during the sweep."""


@dataclass
class Bus:
    """A network bus.

    Attributes:
        id: integer index; 0 is the substation.
        p_load: real power demand (p.u.).
        q_load: reactive power demand (p.u.).
    """

    id: int
    p_load: float = 0.0
    q_load: float = 0.0

    def __post_init__(self) -> None:
        if self.id < 0:
            raise ValueError(f"bus id must be nonnegative, got {self.id}")
        if not (math.isfinite(self.p_load) and math.isfinite(self.q_load)):
            raise ValueError(f"bus {self.id}: load must be finite")


@dataclass
class Line:
    """A distribution line between two buses.

    Attributes:
        from_bus, to_bus: endpoint bus ids.  After validation the pair is
            oriented away from the substation.
        r, x: series resistance / reactance (p.u.).
    """

    from_bus: int
    to_bus: int
    r: float
    x: float

    def __post_init__(self) -> None:
        if self.from_bus == self.to_bus:
            raise ValueError(f"line ({self.from_bus},{self.to_bus}) is a self-loop")
        if self.r < 0 or self.x < 0:
            raise ValueError(f"line ({self.from_bus},{self.to_bus}): negative impedance")
        if self.r == 0 and self.x == 0:
            raise ValueError(f"line ({self.from_bus},{self.to_bus}): r and x both zero")


@dataclass
class PVUnit:
    """A PV inverter: fixed real output, controllable reactive output.

    The commanded reactive power ``q_set`` must stay inside the apparent
    rating: p_gen**2 + q_set**2 <= s_rating**2.
    """

    bus: int
    p_gen: float
    s_rating: float
    q_set: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_gen <= self.s_rating:
            raise ValueError(
                f"PV at bus {self.bus}: need 0 <= p_gen <= s_rating, "
                f"got p_gen={self.p_gen}, s_rating={self.s_rating}"
            )

    @property
    def q_max(self) -> float:
        """Largest reactive magnitude admissible at the current p_gen."""
        return math.sqrt(max(self.s_rating**2 - self.p_gen**2, 0.0))


@dataclass
class OperationalLimits:
    """Feeder operating limits: voltage band, current cap, substation cap."""

    v_min: float = 0.95
    v_max: float = 1.05
    i_max: float = 3.46
    s0_max: float = 3.46

    def __post_init__(self) -> None:
        if not 0 < self.v_min < self.v_max:
            raise ValueError("need 0 < v_min < v_max")
        if self.i_max <= 0 or self.s0_max <= 0:
            raise ValueError("i_max and s0_max must be positive")


@dataclass
class Network:
    """A radial feeder: buses, lines, PV units, substation voltage, limits.

    Treated as immutable after construction; operations that change the
    network (actions, perturbations) return modified copies.
    """

    buses: list[Bus]
    lines: list[Line]
    pv_units: list[PVUnit] = field(default_factory=list)
    v0: float = 1.0
    limits: OperationalLimits = field(default_factory=OperationalLimits)
    s_base_mva: float = 1.0
    v_base_kv: float = 1.0

    def __post_init__(self) -> None:
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise TopologyError("duplicate bus ids")
        if 0 not in ids:
            raise TopologyError("substation bus 0 missing")
        bus_set = set(ids)
        for pv in self.pv_units:
            if pv.bus not in bus_set:
                raise TopologyError(f"PV references unknown bus {pv.bus}")
        if self.v0 <= 0:
            raise ValueError("v0 must be positive")

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_line(self) -> int:
        return len(self.lines)

    @property
    def n_pv(self) -> int:
        return len(self.pv_units)

    def bus_index(self) -> dict[int, int]:
        """Map bus id -> position in self.buses."""
        return {b.id: i for i, b in enumerate(self.buses)}

    def pv_at(self) -> dict[int, PVUnit]:
        """Map bus id -> PV unit (at most one per bus)."""
        out: dict[int, PVUnit] = {}
        for pv in self.pv_units:
            if pv.bus in out:
                raise TopologyError(f"two PV units at bus {pv.bus}")
            out[pv.bus] = pv
        return out


@dataclass
class OperatingPoint:
    """A solved branch-flow state.

    Arrays are aligned with ``net.buses`` / ``net.lines`` order, flows in the
    direction away from the substation.  A point returned by
    ``solve_power_flow`` satisfies all DistFlow residuals to the solve
    tolerance; points assembled from a relaxation may carry a nonnegative
    cone gap on the quadratic equation instead.
    """

    v_sq: np.ndarray
    l_sq: np.ndarray
    p_flow: np.ndarray
    q_flow: np.ndarray
    p0: float
    q0: float
    loss: float

    @property
    def v(self) -> np.ndarray:
        """Voltage magnitudes (p.u.)."""
        return np.sqrt(self.v_sq)


def validate_radial(net: Network) -> list[tuple[int, int]]:
    """Check the line graph is a spanning tree and orient it.

    Returns one (parent, child) pair per line, aligned with ``net.lines``,
    with the parent on the substation side.  Raises TopologyError for
    cycles, disconnected buses, duplicate edges, or unknown endpoints.
    """
    index = net.bus_index()
    if net.n_line != net.n_bus - 1:
        raise TopologyError(
            f"radial feeder needs |lines| = |buses|-1, got {net.n_line} lines "
            f"for {net.n_bus} buses"
        )
    adj: dict[int, list[tuple[int, int]]] = {b.id: [] for b in net.buses}
    seen_edges = set()
    for k, ln in enumerate(net.lines):
        if ln.from_bus not in index or ln.to_bus not in index:
            raise TopologyError(f"line ({ln.from_bus},{ln.to_bus}) references unknown bus")
        key = (min(ln.from_bus, ln.to_bus), max(ln.from_bus, ln.to_bus))
        if key in seen_edges:
            raise TopologyError(f"duplicate line between buses {key[0]} and {key[1]}")
        seen_edges.add(key)
        adj[ln.from_bus].append((ln.to_bus, k))
        adj[ln.to_bus].append((ln.from_bus, k))

    oriented: list[tuple[int, int] | None] = [None] * net.n_line
    visited = {0}
    frontier = [0]
    while frontier:
        u = frontier.pop()
        for v, k in adj[u]:
            if v in visited:
                continue
            visited.add(v)
            oriented[k] = (u, v)
            frontier.append(v)
    if len(visited) != net.n_bus:
        missing = sorted(set(index) - visited)
        raise TopologyError(f"buses not reachable from substation: {missing}")
    # |lines| = |buses|-1 and spanning connectivity together rule out cycles,
    # so every line got an orientation here.
    return [o for o in oriented if o is not None]


def apply_action(net: Network, q_pv: np.ndarray | list[float]) -> Network:
    """Return a copy of ``net`` with PV reactive setpoints replaced.

    Raises RatingError if any setpoint leaves p**2 + q**2 > s_rating**2
    (boundary points are accepted).
    """
    q = np.asarray(q_pv, dtype=float)
    if q.shape != (net.n_pv,):
        raise ValueError(f"expected {net.n_pv} setpoints, got shape {q.shape}")
    out = copy.deepcopy(net)
    for unit, qi in zip(out.pv_units, q):
        margin = unit.p_gen**2 + qi**2 - unit.s_rating**2
        if margin > 1e-9:
            raise RatingError(
                f"PV at bus {unit.bus}: q_set={qi:.6g} exceeds rating by "
                f"{margin:.3g} (squared margin)"
            )
        unit.q_set = float(qi)
    return out


def _injections(net: Network) -> tuple[np.ndarray, np.ndarray]:
    """Net (generation - load) injection per bus position, excluding the grid."""
    index = net.bus_index()
    p_inj = np.zeros(net.n_bus)
    q_inj = np.zeros(net.n_bus)
    for b in net.buses:
        p_inj[index[b.id]] -= b.p_load
        q_inj[index[b.id]] -= b.q_load
    for pv in net.pv_units:
        p_inj[index[pv.bus]] += pv.p_gen
        q_inj[index[pv.bus]] += pv.q_set
    return p_inj, q_inj


def _topo_arrays(net: Network) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Oriented endpoints (as bus positions) and a root-to-leaf line order."""
    oriented = validate_radial(net)
    index = net.bus_index()
    parent = np.array([index[a] for a, _ in oriented])
    child = np.array([index[b] for _, b in oriented])
    children_of: dict[int, list[int]] = {}
    for k, (a, _) in enumerate(oriented):
        children_of.setdefault(index[a], []).append(k)
    order: list[int] = []
    stack = children_of.get(index[0], [])[::-1]
    while stack:
        k = stack.pop()
        order.append(k)
        stack.extend(children_of.get(child[k], [])[::-1])
    return parent, child, order


def solve_power_flow(net: Network, tol: float = 1e-10, max_iter: int = 200) -> OperatingPoint:
    """Solve the DistFlow equations by backward/forward sweeps.

    Backward pass aggregates flows from the leaves, forward pass propagates
    squared voltages from the substation; the squared-current update
    l = (P**2 + Q**2) / v closes the fixed point.  Stops when the largest
    residual of the five branch-flow equations is <= tol.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    parent, child, order = _topo_arrays(net)
    p_inj, q_inj = _injections(net)
    root = net.bus_index()[0]

    r = np.array([ln.r for ln in net.lines])
    x = np.array([ln.x for ln in net.lines])
    v = np.full(net.n_bus, float(net.v0))
    l = np.zeros(net.n_line)
    P = np.zeros(net.n_line)
    Q = np.zeros(net.n_line)

    for _ in range(max_iter):
        # backward: sending-end flows with the current squared currents
        P_acc = -p_inj.copy()
        Q_acc = -q_inj.copy()
        for k in reversed(order):
            P[k] = P_acc[child[k]] + r[k] * l[k]
            Q[k] = Q_acc[child[k]] + x[k] * l[k]
            P_acc[parent[k]] += P[k]
            Q_acc[parent[k]] += Q[k]
        # squared-current update at the (stale) sending-end voltage
        l = (P * P + Q * Q) / v[parent]
        # re-aggregate flows so Eqs. (1)-(2) hold exactly for the new l
        P_acc = -p_inj.copy()
        Q_acc = -q_inj.copy()
        for k in reversed(order):
            P[k] = P_acc[child[k]] + r[k] * l[k]
            Q[k] = Q_acc[child[k]] + x[k] * l[k]
            P_acc[parent[k]] += P[k]
            Q_acc[parent[k]] += Q[k]
        # forward: squared voltages from the substation
        v[root] = net.v0
        for k in order:
            v[child[k]] = v[parent[k]] - 2 * (r[k] * P[k] + x[k] * Q[k]) + (r[k] ** 2 + x[k] ** 2) * l[k]
            if v[child[k]] <= 0:
                raise VoltageCollapse(
                    f"squared voltage {v[child[k]]:.3g} at bus "
                    f"{net.buses[child[k]].id} during sweep"
                )
        residual = float(np.max(np.abs(v[parent] * l - (P * P + Q * Q)))) if net.n_line else 0.0
        if residual <= tol:
            p0 = float(P_acc[root])
            q0 = float(Q_acc[root])
            loss = float(np.dot(r, l))
            return OperatingPoint(v.copy(), l.copy(), P.copy(), Q.copy(), p0, q0, loss)
    raise NoConvergence(f"residual {residual:.3g} > tol {tol:.3g} after {max_iter} sweeps")


def distflow_residuals(net: Network, op: OperatingPoint) -> dict[str, float]:
    """Max absolute residual of each DistFlow equation class at a point.

    Keys: 'p_balance', 'q_balance', 'voltage_drop', 'quadratic' (the branch
    equation v_i*l = P**2 + Q**2; at a relaxed point this is the cone gap).
    """
    parent, child, order = _topo_arrays(net)
    p_inj, q_inj = _injections(net)
    root = net.bus_index()[0]
    r = np.array([ln.r for ln in net.lines])
    x = np.array([ln.x for ln in net.lines])

    flow_in_p = np.zeros(net.n_bus)
    flow_in_q = np.zeros(net.n_bus)
    flow_out_p = np.zeros(net.n_bus)
    flow_out_q = np.zeros(net.n_bus)
    for k in range(net.n_line):
        flow_in_p[child[k]] += op.p_flow[k] - r[k] * op.l_sq[k]
        flow_in_q[child[k]] += op.q_flow[k] - x[k] * op.l_sq[k]
        flow_out_p[parent[k]] += op.p_flow[k]
        flow_out_q[parent[k]] += op.q_flow[k]
    flow_in_p[root] += op.p0
    flow_in_q[root] += op.q0
    res_p = np.abs(flow_in_p + p_inj - flow_out_p)
    res_q = np.abs(flow_in_q + q_inj - flow_out_q)
    res_v = np.abs(
        op.v_sq[child]
        - op.v_sq[parent]
        + 2 * (r * op.p_flow + x * op.q_flow)
        - (r**2 + x**2) * op.l_sq
    ) if net.n_line else np.zeros(0)
    res_quad = np.abs(op.v_sq[parent] * op.l_sq - (op.p_flow**2 + op.q_flow**2)) if net.n_line else np.zeros(0)
    return {
        "p_balance": float(np.max(res_p)),
        "q_balance": float(np.max(res_q)),
        "voltage_drop": float(np.max(res_v)) if res_v.size else 0.0,
        "quadratic": float(np.max(res_quad)) if res_quad.size else 0.0,
    }


def perturb_parameters(net: Network, sigma: float, seed: int) -> Network:
    """Return a copy with each line's r and x scaled by independent (1 + d),
    d ~ Normal(0, sigma**2), resampled until 1 + d > 0.

    Deterministic for a fixed seed; sigma = 0 returns an identical copy.
    """
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    out = copy.deepcopy(net)
    rng = np.random.default_rng(seed)
    for ln in out.lines:
        factors = []
        for _ in range(2):
            d = rng.normal(0.0, sigma) if sigma > 0 else 0.0
            while d <= -1.0:
                d = rng.normal(0.0, sigma)
            factors.append(1.0 + d)
        ln.r *= factors[0]
        ln.x *= factors[1]
    return out


def load_network(bus_path: str, line_path: str, limits: OperationalLimits | None = None) -> Network:
    """Load a network from a bus/line CSV pair and convert to per-unit.

    Bus file: a `#base,<S_base_MVA>,<V_base_kV>` line, then a header
    `id,p_load_kw,q_load_kvar,pv_p_kw,pv_s_kva` and one row per bus (blank
    PV columns mean no unit).  Line file header: `from,to,r_ohm,x_ohm`.
    """
    with open(bus_path, newline="") as fh:
        rows = list(csv.reader(fh))
    base = None
    data_rows = []
    header = None
    for row in rows:
        if not row or all(not c.strip() for c in row):
            continue
        if row[0].strip().startswith("#base"):
            try:
                base = (float(row[1]), float(row[2]))
            except (IndexError, ValueError) as exc:
                raise UnitError(f"malformed base line in {bus_path}: {row}") from exc
            continue
        if row[0].strip().startswith("#"):
            continue
        if header is None:
            header = [c.strip() for c in row]
            continue
        data_rows.append(row)
    if base is None:
        raise UnitError(f"{bus_path}: missing '#base,S_base_MVA,V_base_kV' line")
    s_base, v_base = base
    if s_base <= 0 or v_base <= 0:
        raise UnitError(f"{bus_path}: base values must be positive")
    expected = ["id", "p_load_kw", "q_load_kvar", "pv_p_kw", "pv_s_kva"]
    if header != expected:
        raise ParseError(f"{bus_path}: expected header {expected}, got {header}")

    kw_to_pu = 1.0 / (s_base * 1000.0)
    buses = []
    pv_units = []
    for row in data_rows:
        try:
            bus_id = int(row[0])
            p_load = float(row[1]) * kw_to_pu
            q_load = float(row[2]) * kw_to_pu
        except (IndexError, ValueError) as exc:
            raise ParseError(f"{bus_path}: malformed bus row {row}") from exc
        if p_load < 0 or q_load < 0:
            raise ParseError(f"{bus_path}: negative load on bus {bus_id}")
        buses.append(Bus(bus_id, p_load, q_load))
        pv_p = row[3].strip() if len(row) > 3 else ""
        pv_s = row[4].strip() if len(row) > 4 else ""
        if pv_p or pv_s:
            try:
                pv_units.append(
                    PVUnit(bus_id, float(pv_p) * kw_to_pu, float(pv_s) * kw_to_pu)
                )
            except ValueError as exc:
                raise ParseError(f"{bus_path}: malformed PV fields on bus {bus_id}") from exc

    z_base = v_base**2 / s_base
    lines = []
    with open(line_path, newline="") as fh:
        reader = csv.reader(fh)
        line_header = None
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if row[0].strip().startswith("#"):
                continue
            if line_header is None:
                line_header = [c.strip() for c in row]
                if line_header != ["from", "to", "r_ohm", "x_ohm"]:
                    raise ParseError(
                        f"{line_path}: expected header ['from', 'to', 'r_ohm', 'x_ohm'], "
                        f"got {line_header}"
                    )
                continue
            try:
                lines.append(
                    Line(int(row[0]), int(row[1]), float(row[2]) / z_base, float(row[3]) / z_base)
                )
            except (IndexError, ValueError) as exc:
                raise ParseError(f"{line_path}: malformed line row {row}") from exc

    net = Network(
        buses=buses,
        lines=lines,
        pv_units=pv_units,
        limits=limits if limits is not None else OperationalLimits(),
        s_base_mva=s_base,
        v_base_kv=v_base,
    )
    validate_radial(net)
    return net


def load_builtin(name: str = "ieee33") -> Network:
    """Load a feeder shipped with the package (currently: 'ieee33')."""
    pkg_data = resources.files("drsf") / "data"
    bus_file = pkg_data / f"{name}_bus.csv"
    line_file = pkg_data / f"{name}_line.csv"
    if not bus_file.is_file() or not line_file.is_file():
        raise FileNotFoundError(f"no builtin feeder named {name!r}")
    return load_network(str(bus_file), str(line_file))
