"""Wasserstein distributionally robust error bounds.

From N samples of a model-error vector, compute a box [lower, upper] with
lower <= 0 <= upper whose coverage stays at or above 1 - alpha under the
worst distribution within 1-Wasserstein distance epsilon of the empirical
one (l-infinity ground metric, unbounded support).  The worst case has a
closed greedy-transport form: mass exits the box through the nearest face,
cheapest samples first, until the transport budget is spent.

Two independent solvers are provided: solve_bounds (exact window search for
scalar sample sets, coordinate descent for vector sets) and solve_bounds_mip
(the big-M mixed-integer reformulation by branch-and-bound).
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass

import numpy as np

from . import conic

VOLTAGE = "voltage"
CURRENT = "current"
SUBSTATION = "substation"

# validate_bounds passes at coverage >= 1 - alpha - _CERT_SLACK
_CERT_SLACK = 1e-12


class BoxError(Exception):
    """Box lower bound exceeds its upper bound in some coordinate."""


class InfeasibleBounds(Exception):
    """No box reaches the required coverage at this radius and risk level."""

    def __init__(self, message: str, max_coverage: float):
        super().__init__(f"{message} (max achievable coverage {max_coverage:.6f})")
        self.max_coverage = max_coverage


class SizeGuard(Exception):
    """Sample count exceeds the branch-and-bound guard."""


@dataclass(frozen=True)
class ErrorSampleSet:
    """N observed model-error vectors for one constrained quantity.

    samples has shape (N, dim); a 1-D array is treated as N scalar samples.
    The set stands for the empirical distribution placing mass 1/N on each
    row.  kind tags the quantity (VOLTAGE, CURRENT, SUBSTATION).
    """

    kind: str
    samples: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.samples, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("samples must be a nonempty (N, dim) array")
        if not np.all(np.isfinite(arr)):
            raise ValueError("samples must be finite")
        object.__setattr__(self, "samples", arr)

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def to_csv(self, path: str) -> None:
        np.savetxt(path, self.samples, delimiter=",", fmt="%.17g")

    @classmethod
    def from_csv(cls, path: str, kind: str) -> "ErrorSampleSet":
        arr = np.loadtxt(path, delimiter=",", ndmin=2)
        return cls(kind=kind, samples=arr)


@dataclass(frozen=True)
class WassersteinBall:
    """Ambiguity set: all distributions within 1-Wasserstein distance
    epsilon of the empirical one, with risk level alpha."""

    epsilon: float
    alpha: float

    def __post_init__(self) -> None:
        if not (self.epsilon >= 0.0 and math.isfinite(self.epsilon)):
            raise ValueError("epsilon must be finite and >= 0")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")


@dataclass
class RobustBounds:
    """A certified error box [lower, upper] with lower <= 0 <= upper."""

    kind: str
    lower: np.ndarray
    upper: np.ndarray
    epsilon: float
    alpha: float
    certified_prob: float

    def __post_init__(self) -> None:
        self.lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if self.lower.shape != self.upper.shape:
            raise BoxError("lower/upper shape mismatch")
        if np.any(self.lower > 0.0) or np.any(self.upper < 0.0):
            raise BoxError("bounds must satisfy lower <= 0 <= upper")

    @property
    def width(self) -> float:
        return float(np.sum(self.upper - self.lower))

    def to_json(self, path: str) -> None:
        payload = {
            "kind": self.kind,
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "epsilon": self.epsilon,
            "alpha": self.alpha,
            "certified_prob": self.certified_prob,
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_json(cls, path: str) -> "RobustBounds":
        with open(path) as fh:
            payload = json.load(fh)
        return cls(
            kind=payload["kind"],
            lower=np.asarray(payload["lower"], dtype=float),
            upper=np.asarray(payload["upper"], dtype=float),
            epsilon=float(payload["epsilon"]),
            alpha=float(payload["alpha"]),
            certified_prob=float(payload["certified_prob"]),
        )


@dataclass(frozen=True)
class BoundsCertificate:
    coverage: float
    passed: bool


# ---------------------------------------------------------------------------
# exact worst-case evaluation
# ---------------------------------------------------------------------------


def _exit_distances(samples: np.ndarray, lower, upper) -> np.ndarray:
    """Signed l-infinity distance of each sample to the box complement.

    Negative for samples outside the box; for samples inside, the cheapest
    way out is through the nearest face of any single coordinate.
    """
    with np.errstate(invalid="ignore"):
        side = np.minimum(samples - lower, upper - samples)
    return side.min(axis=1)


def _coverage(samples: np.ndarray, epsilon: float, lower, upper) -> float:
    d = _exit_distances(samples, lower, upper)
    n = samples.shape[0]
    inside = d >= 0.0
    if epsilon == 0.0:
        # the ball degenerates to the empirical distribution; the closed box
        # keeps boundary samples
        return float(np.count_nonzero(inside)) / n
    d_in = np.sort(d[inside])
    # moving mass 1/n out of the box through a face at distance d costs d/n;
    # boundary samples (d = 0) leave for free under any positive radius
    costs = np.cumsum(d_in) / n
    k = int(np.searchsorted(costs, epsilon, side="right"))
    moved = k / n
    if k < d_in.size:
        spent = costs[k - 1] if k > 0 else 0.0
        moved += (epsilon - spent) / d_in[k]
    return float(np.count_nonzero(inside)) / n - moved


def worst_case_box_probability(
    samples: ErrorSampleSet, ball: WassersteinBall, lower, upper
) -> float:
    """Exact infimum of P[xi in [lower, upper]] over the Wasserstein ball."""
    lower = np.broadcast_to(np.asarray(lower, dtype=float), (samples.dim,))
    upper = np.broadcast_to(np.asarray(upper, dtype=float), (samples.dim,))
    if np.any(lower > upper):
        raise BoxError("lower exceeds upper")
    return _coverage(samples.samples, ball.epsilon, lower, upper)


def validate_bounds(
    bounds: RobustBounds, samples: ErrorSampleSet, ball: WassersteinBall
) -> BoundsCertificate:
    """Recompute the worst-case coverage of a box and compare to 1 - alpha."""
    if bounds.lower.shape != (samples.dim,):
        raise BoxError(f"bounds dim {bounds.lower.shape[0]} != samples dim {samples.dim}")
    cov = worst_case_box_probability(samples, ball, bounds.lower, bounds.upper)
    return BoundsCertificate(coverage=cov, passed=cov >= 1.0 - ball.alpha - _CERT_SLACK)


# ---------------------------------------------------------------------------
# width-minimizing solver
# ---------------------------------------------------------------------------


def _envelope(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lower = np.minimum(samples.min(axis=0), 0.0)
    upper = np.maximum(samples.max(axis=0), 0.0)
    return lower, upper


def _required_count(n: int, alpha: float) -> int:
    # smallest integer count with count/n >= 1 - alpha
    return max(0, math.ceil(n * (1.0 - alpha) - 1e-9))


def _window_lp(xw: np.ndarray, allow: float, budget: float):
    """Minimal width of a scalar box that keeps the samples xw inside and
    survives the transport adversary.

    allow is the removable mass in sample units, budget the transport budget
    in the same units (N * epsilon).  The adversary's cheapest removal of
    `allow` samples is a fractional knapsack; by LP duality the resistance
    condition is: exist t >= 0, u_s >= 0 with allow*t - sum(u) >= budget and
    t <= d_s + u_s, where d_s is the distance of sample s to the nearer box
    edge.  Returns (width, lo, hi) or None if the window cannot resist.
    """
    lo_cap = min(0.0, float(xw.min()))
    hi_floor = max(0.0, float(xw.max()))
    prog = conic.ConicProgram()
    lo, hi, t = prog.add_vars(3)
    us = prog.add_vars(len(xw))
    s_lo, s_hi, s_bd = prog.add_vars(3)
    prog.add_eq({lo: 1.0, s_lo: 1.0}, lo_cap)
    prog.add_eq({hi: 1.0, s_hi: -1.0}, hi_floor)
    row = {t: allow, s_bd: -1.0}
    for u in us:
        row[u] = -1.0
    prog.add_eq(row, budget)
    slacks = prog.add_vars(2 * len(xw))
    for j, x in enumerate(xw):
        # t <= (hi - x) + u_j  and  t <= (x - lo) + u_j
        prog.add_eq({hi: 1.0, us[j]: 1.0, t: -1.0, slacks[2 * j]: -1.0}, float(x))
        prog.add_eq({lo: -1.0, us[j]: 1.0, t: -1.0, slacks[2 * j + 1]: -1.0}, -float(x))
    prog.add_nonneg([t, s_lo, s_hi, s_bd] + us + slacks)
    prog.set_objective_term(hi, 1.0)
    prog.set_objective_term(lo, -1.0)
    sol = conic.solve(prog, tol=1e-10)
    if sol.status == conic.INFEASIBLE:
        return None
    if sol.status != conic.OPTIMAL:
        raise conic.NumericalFailure(f"window subproblem returned {sol.status}")
    return float(sol.objective), float(sol.z[lo]), float(sol.z[hi])


def _solve_scalar(x: np.ndarray, ball: WassersteinBall) -> tuple[float, float]:
    n = x.size
    order = np.sort(x)
    if ball.epsilon == 0.0:
        need = _required_count(n, ball.alpha)
        if need == 0:
            return 0.0, 0.0
        best = (math.inf, 0.0, 0.0)
        for i in range(n - need + 1):
            lo = min(0.0, order[i])
            hi = max(0.0, order[i + need - 1])
            if hi - lo < best[0] - 1e-15:
                best = (hi - lo, lo, hi)
        return best[1], best[2]

    # every contiguous sample window is a candidate inside-set; windows are
    # tried in ascending order of their unavoidable width so the search can
    # stop once no remaining window can beat the incumbent
    budget = n * ball.epsilon
    windows = []
    for i in range(n):
        for j in range(i, n):
            allow = ball.alpha * n - (n - (j - i + 1))
            if allow <= 1e-15:
                continue
            floor = max(0.0, order[j]) - min(0.0, order[i])
            windows.append((floor, i, j, allow))
    windows.sort()
    best = (math.inf, 0.0, 0.0)
    for floor, i, j, allow in windows:
        if floor >= best[0] - 1e-15:
            break
        res = _window_lp(order[i : j + 1], allow, budget)
        if res is not None and res[0] < best[0] - 1e-15:
            best = res
    if not math.isfinite(best[0]):
        lower, upper = _envelope(x[:, None])
        raise InfeasibleBounds(
            "no scalar window resists the transport adversary",
            _coverage(x[:, None], ball.epsilon, lower, upper),
        )
    return min(best[1], 0.0), max(best[2], 0.0)


def _min_feasible_side(
    samples: np.ndarray,
    epsilon: float,
    target: float,
    lower: np.ndarray,
    upper: np.ndarray,
    coord: int,
    is_upper: bool,
) -> float:
    """Smallest magnitude for one box side keeping coverage >= target,
    holding every other side fixed.  Coverage is monotone in the side, so
    bisection applies; at epsilon = 0 it snaps to a sample coordinate."""
    vec = upper if is_upper else lower
    start = vec[coord]

    def cov_at(val: float) -> float:
        old = vec[coord]
        vec[coord] = val
        c = _coverage(samples, epsilon, lower, upper)
        vec[coord] = old
        return c

    if cov_at(0.0) >= target:
        return 0.0
    if epsilon == 0.0:
        vals = samples[:, coord]
        cands = np.unique(vals[(vals >= 0) & (vals <= start)] if is_upper
                          else -vals[(vals <= 0) & (vals >= start)])
        for c in cands:  # ascending magnitude
            v = c if is_upper else -c
            if cov_at(v) >= target:
                return v
        return start
    good, bad = start, 0.0
    for _ in range(64):
        mid = 0.5 * (good + bad)
        if cov_at(mid) >= target:
            good = mid
        else:
            bad = mid
    return good


def _solve_vector(samples: np.ndarray, ball: WassersteinBall) -> tuple[np.ndarray, np.ndarray]:
    # coordinate descent from the sample envelope: shrink one side at a time
    # to its minimal certified value until no side moves
    lower, upper = _envelope(samples)
    target = 1.0 - ball.alpha
    if ball.epsilon == 0.0:
        target -= 1e-9 / samples.shape[0]  # counting comparison guard
    for _ in range(60):
        moved = 0.0
        for k in range(samples.shape[1]):
            new_up = _min_feasible_side(samples, ball.epsilon, target, lower, upper, k, True)
            moved = max(moved, abs(upper[k] - new_up))
            upper[k] = new_up
            new_lo = _min_feasible_side(samples, ball.epsilon, target, lower, upper, k, False)
            moved = max(moved, abs(lower[k] - new_lo))
            lower[k] = new_lo
        if moved <= 1e-12:
            break
    return lower, upper


def _inflate_until_certified(
    samples: np.ndarray, ball: WassersteinBall, lower: np.ndarray, upper: np.ndarray
) -> tuple[np.ndarray, np.ndarray, float]:
    """Pad the box by growing powers of 1e-12 until the exact evaluator
    certifies it, absorbing float slack from the optimizers."""
    spread = max(1.0, float(np.max(upper) - np.min(lower)))
    for k in range(64):
        cov = _coverage(samples, ball.epsilon, lower, upper)
        if cov >= 1.0 - ball.alpha - _CERT_SLACK:
            return lower, upper, cov
        pad = (2.0**k) * 1e-12 * spread
        lower = lower - pad
        upper = upper + pad
    raise InfeasibleBounds(
        "certification failed after inflation",
        _coverage(samples, ball.epsilon, lower, upper),
    )


def solve_bounds(samples: ErrorSampleSet, ball: WassersteinBall) -> RobustBounds:
    """Minimize total box width subject to certified worst-case coverage.

    Exact for scalar sample sets (window enumeration); coordinate descent to
    a local optimum for vector sets.  The returned certified_prob is always
    recomputed by the exact evaluator.
    """
    if ball.alpha == 0.0 and ball.epsilon > 0.0:
        lower, upper = _envelope(samples.samples)
        raise InfeasibleBounds(
            "coverage 1 is unreachable at positive radius",
            _coverage(samples.samples, ball.epsilon, lower, upper),
        )
    if samples.dim == 1:
        lo, hi = _solve_scalar(samples.samples[:, 0], ball)
        lower = np.array([lo])
        upper = np.array([hi])
    else:
        lower, upper = _solve_vector(samples.samples, ball)
    lower, upper, cov = _inflate_until_certified(samples.samples, ball, lower, upper)
    return RobustBounds(
        kind=samples.kind,
        lower=np.minimum(lower, 0.0),
        upper=np.maximum(upper, 0.0),
        epsilon=ball.epsilon,
        alpha=ball.alpha,
        certified_prob=cov,
    )


# ---------------------------------------------------------------------------
# big-M mixed-integer cross-check
# ---------------------------------------------------------------------------


def _relax_bigm(samples: np.ndarray, ball: WassersteinBall, big_m: float, fixed: dict[int, int]):
    """LP relaxation of the big-M reformulation with some y_s pinned.

    Variables per sample: inclusion y_s, exit distance r_s (capped at big_m
    unless y_s = 0), hinge z_s >= gamma - r_s; the coverage condition is
    alpha*gamma - epsilon*v >= mean(z) with v >= 1.
    """
    n, dim = samples.shape
    prog = conic.ConicProgram()
    up = prog.add_vars(dim)
    ng = prog.add_vars(dim)  # ng = -lower >= 0
    gamma, vexc = prog.add_vars(2)  # v = 1 + vexc
    rs = prog.add_vars(n)
    zs = prog.add_vars(n)
    ys = prog.add_vars(n)
    cone = up + ng + [gamma, vexc] + rs + zs + ys

    s0 = prog.add_vars(1)[0]
    cone.append(s0)
    row = {gamma: ball.alpha, vexc: -ball.epsilon, s0: -1.0}
    for z in zs:
        row[z] = -1.0 / n
    prog.add_eq(row, ball.epsilon)

    for s in range(n):
        sl = prog.add_vars(3 + 2 * dim)
        cone.extend(sl)
        # z_s >= gamma - r_s
        prog.add_eq({zs[s]: 1.0, rs[s]: 1.0, gamma: -1.0, sl[0]: -1.0}, 0.0)
        # r_s <= big_m * y_s
        prog.add_eq({ys[s]: big_m, rs[s]: -1.0, sl[1]: -1.0}, 0.0)
        for k in range(dim):
            # r_s <= upper_k - xi_ks + M(1 - y_s)
            prog.add_eq(
                {up[k]: 1.0, rs[s]: -1.0, ys[s]: -big_m, sl[2 + 2 * k]: -1.0},
                float(samples[s, k]) - big_m,
            )
            # r_s <= xi_ks - lower_k + M(1 - y_s)
            prog.add_eq(
                {ng[k]: 1.0, rs[s]: -1.0, ys[s]: -big_m, sl[3 + 2 * k]: -1.0},
                -float(samples[s, k]) - big_m,
            )
        if s in fixed:
            prog.add_eq({ys[s]: 1.0}, float(fixed[s]))
        else:
            prog.add_eq({ys[s]: 1.0, sl[2 + 2 * dim]: 1.0}, 1.0)
    for v in up + ng:
        prog.set_objective_term(v, 1.0)
    prog.add_nonneg(cone)
    sol = conic.solve(prog, tol=1e-10)
    if sol.status == conic.INFEASIBLE:
        return None
    if sol.status != conic.OPTIMAL:
        raise conic.NumericalFailure(f"relaxation returned {sol.status}")
    return (
        float(sol.objective),
        np.array([sol.z[y] for y in ys]),
        (-sol.z[list(ng)].copy(), sol.z[list(up)].copy()),
    )


def _relax_counting(samples: np.ndarray, need: int, big_m: float, fixed: dict[int, int]):
    """LP relaxation of the zero-radius variant: pick at least `need`
    samples, box must contain each picked one."""
    n, dim = samples.shape
    prog = conic.ConicProgram()
    up = prog.add_vars(dim)
    ng = prog.add_vars(dim)
    ys = prog.add_vars(n)
    cone = up + ng + ys
    s0 = prog.add_vars(1)[0]
    cone.append(s0)
    row = {s0: -1.0}
    for y in ys:
        row[y] = 1.0
    prog.add_eq(row, float(need))
    for s in range(n):
        sl = prog.add_vars(1 + 2 * dim)
        cone.extend(sl)
        for k in range(dim):
            prog.add_eq(
                {up[k]: 1.0, ys[s]: -big_m, sl[2 * k]: -1.0},
                float(samples[s, k]) - big_m,
            )
            prog.add_eq(
                {ng[k]: 1.0, ys[s]: -big_m, sl[2 * k + 1]: -1.0},
                -float(samples[s, k]) - big_m,
            )
        if s in fixed:
            prog.add_eq({ys[s]: 1.0}, float(fixed[s]))
        else:
            prog.add_eq({ys[s]: 1.0, sl[2 * dim]: 1.0}, 1.0)
    for v in up + ng:
        prog.set_objective_term(v, 1.0)
    prog.add_nonneg(cone)
    sol = conic.solve(prog, tol=1e-10)
    if sol.status == conic.INFEASIBLE:
        return None
    if sol.status != conic.OPTIMAL:
        raise conic.NumericalFailure(f"relaxation returned {sol.status}")
    return (
        float(sol.objective),
        np.array([sol.z[y] for y in ys]),
        (-sol.z[list(ng)].copy(), sol.z[list(up)].copy()),
    )


def _branch_and_bound(n_bin: int, relax):
    """Best-bound branch-and-bound over binary inclusion flags.

    relax(fixed) returns (objective, y, box) of the LP relaxation or None if
    infeasible.  Deterministic: nodes ordered by (bound, creation id),
    branching on the most fractional flag (lowest index on ties)."""
    best_val, best_box = math.inf, None
    root = relax({})
    if root is None:
        return best_val, best_box
    heap = [(root[0], 0, {}, root)]
    next_id = 1
    nodes = 0
    while heap:
        bound, _, fixed, node = heapq.heappop(heap)
        if bound >= best_val - 1e-12:
            continue
        nodes += 1
        if nodes > 200000:
            raise RuntimeError("branch-and-bound node limit exceeded")
        _, y, _ = node
        frac = np.minimum(y, 1.0 - y)
        frac[list(fixed)] = 0.0
        j = int(np.argmax(frac))
        if frac[j] <= 1e-7:
            # integral assignment: re-solve with every flag pinned for an
            # exact leaf value
            pinned = dict(fixed)
            for s in range(n_bin):
                if s not in pinned:
                    pinned[s] = int(round(y[s]))
            leaf = relax(pinned)
            if leaf is not None and leaf[0] < best_val - 1e-12:
                best_val, best_box = leaf[0], leaf[2]
            continue
        for val in (0, 1):
            child_fixed = dict(fixed)
            child_fixed[j] = val
            child = relax(child_fixed)
            if child is not None and child[0] < best_val - 1e-12:
                heapq.heappush(heap, (child[0], next_id, child_fixed, child))
            next_id += 1
    return best_val, best_box


def solve_bounds_mip(
    samples: ErrorSampleSet, ball: WassersteinBall, max_samples: int = 20
) -> RobustBounds:
    """Solve the big-M mixed-integer width minimization exactly.

    Branch-and-bound over the per-sample inclusion flags with LP-relaxation
    bounding; a cross-check for solve_bounds at small N.
    """
    if samples.n > max_samples:
        raise SizeGuard(f"N = {samples.n} exceeds the exact-search guard {max_samples}")
    if ball.alpha == 0.0 and ball.epsilon > 0.0:
        lower, upper = _envelope(samples.samples)
        raise InfeasibleBounds(
            "coverage 1 is unreachable at positive radius",
            _coverage(samples.samples, ball.epsilon, lower, upper),
        )
    big_m = 2.0 * float(np.max(np.abs(samples.samples))) + 1.0
    if ball.epsilon == 0.0:
        need = _required_count(samples.n, ball.alpha)
        relax = lambda fixed: _relax_counting(samples.samples, need, big_m, fixed)
    else:
        relax = lambda fixed: _relax_bigm(samples.samples, ball, big_m, fixed)
    _, box = _branch_and_bound(samples.n, relax)
    if box is None:
        lower, upper = _envelope(samples.samples)
        raise InfeasibleBounds(
            "no inclusion assignment certifies",
            _coverage(samples.samples, ball.epsilon, lower, upper),
        )
    lower = np.minimum(box[0], 0.0)
    upper = np.maximum(box[1], 0.0)
    lower, upper, cov = _inflate_until_certified(samples.samples, ball, lower, upper)
    return RobustBounds(
        kind=samples.kind,
        lower=np.minimum(lower, 0.0),
        upper=np.maximum(upper, 0.0),
        epsilon=ball.epsilon,
        alpha=ball.alpha,
        certified_prob=cov,
    )
