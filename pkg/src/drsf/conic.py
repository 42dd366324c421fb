"""Second-order cone programming: program container and interior-point solver.

Programs are in standard conic form:

    minimize    c'z
    subject to  A z = b
                z[block] in K for each cone block,

where a block is either the nonnegative orthant over an index list or a
second-order cone Q = {(t, u): t >= ||u||_2} whose first index is the scalar
bound t.  Variables not referenced by any cone block are free.

The solver embeds the primal-dual pair in a homogeneous self-dual model and
runs a Mehrotra predictor-corrector interior-point iteration with
Nesterov-Todd scaling, which certifies optimality, primal infeasibility, and
unboundedness.  Duals follow the convention s = c + A'y with s in the cone
(zero on free variables), so the dual objective is -b'y and weak duality
reads c'z >= -b'y; the complementarity gap is c'z + b'y.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

OPTIMAL = "Optimal"
INFEASIBLE = "Infeasible"
UNBOUNDED = "Unbounded"
MAX_ITER = "MaxIter"


class NumericalFailure(Exception):
    """KKT system could not be solved to working accuracy."""


class DimensionError(Exception):
    """Program and solution dimensions disagree."""


@dataclass
class Nonneg:
    """Nonnegative-orthant membership for the listed variable indices."""

    indices: list[int]


@dataclass
class SOC:
    """Second-order cone: indices[0] >= ||indices[1:]||_2."""

    indices: list[int]

    def __post_init__(self) -> None:
        if len(self.indices) < 1:
            raise ValueError("SOC block needs at least the scalar entry")


class ConicProgram:
    """Incrementally built conic program.

    Rows are appended with add_eq; cone blocks with add_nonneg / add_soc.
    The objective defaults to zero and is set per variable.
    """

    def __init__(self, n_vars: int = 0):
        self.n_vars = int(n_vars)
        self._obj: dict[int, float] = {}
        self._rows: list[dict[int, float]] = []
        self._rhs: list[float] = []
        self.cones: list[Nonneg | SOC] = []

    def add_vars(self, count: int = 1) -> list[int]:
        """Append `count` new variables, returning their indices."""
        idx = list(range(self.n_vars, self.n_vars + count))
        self.n_vars += count
        return idx

    def add_eq(self, coeffs: dict[int, float], rhs: float) -> int:
        """Append the equality sum(coeffs[i] * z_i) = rhs; returns row index."""
        for i in coeffs:
            self._check_index(i)
        self._rows.append({int(i): float(v) for i, v in coeffs.items() if v != 0.0})
        self._rhs.append(float(rhs))
        return len(self._rows) - 1

    def add_nonneg(self, indices: list[int]) -> None:
        for i in indices:
            self._check_index(i)
        if indices:
            self.cones.append(Nonneg([int(i) for i in indices]))

    def add_soc(self, indices: list[int]) -> None:
        for i in indices:
            self._check_index(i)
        if len(indices) == 1:
            # degenerate cone t >= ||()|| is just t >= 0
            self.cones.append(Nonneg([int(indices[0])]))
        else:
            self.cones.append(SOC([int(i) for i in indices]))

    def set_objective_term(self, index: int, coeff: float) -> None:
        self._check_index(index)
        self._obj[int(index)] = float(coeff)

    @property
    def objective(self) -> np.ndarray:
        c = np.zeros(self.n_vars)
        for i, v in self._obj.items():
            c[i] = v
        return c

    @property
    def n_eq(self) -> int:
        return len(self._rows)

    def matrices(self) -> tuple[sp.csr_matrix, np.ndarray]:
        """The equality system (A, b) as sparse CSR / dense vector."""
        rows, cols, vals = [], [], []
        for r, row in enumerate(self._rows):
            for c, v in row.items():
                rows.append(r)
                cols.append(c)
                vals.append(v)
        A = sp.csr_matrix((vals, (rows, cols)), shape=(self.n_eq, self.n_vars))
        return A, np.array(self._rhs, dtype=float)

    def cone_indices(self) -> np.ndarray:
        """All variable indices referenced by cone blocks, in block order."""
        out: list[int] = []
        for blk in self.cones:
            out.extend(blk.indices)
        return np.array(out, dtype=int)

    def validate(self) -> None:
        """Check index ranges and cone disjointness."""
        seen: set[int] = set()
        for blk in self.cones:
            for i in blk.indices:
                self._check_index(i)
                if i in seen:
                    raise ValueError(
                        f"variable {i} appears in two cone blocks; duplicate it "
                        "through a slack equality instead"
                    )
                seen.add(i)

    def _check_index(self, i: int) -> None:
        if not 0 <= i < self.n_vars:
            raise DimensionError(f"variable index {i} out of range [0, {self.n_vars})")

    def dump(self, path: str) -> None:
        """Write a plain-text dump (triplet format) for external cross-checks."""
        A, b = self.matrices()
        coo = A.tocoo()
        with open(path, "w") as fh:
            fh.write(f"n_vars {self.n_vars}\nn_eq {self.n_eq}\n")
            fh.write("c " + " ".join(f"{v:.17g}" for v in self.objective) + "\n")
            fh.write("b " + " ".join(f"{v:.17g}" for v in b) + "\n")
            for r, c, v in zip(coo.row, coo.col, coo.data):
                fh.write(f"A {r} {c} {v:.17g}\n")
            for blk in self.cones:
                kind = "nonneg" if isinstance(blk, Nonneg) else "soc"
                fh.write(f"cone {kind} " + " ".join(str(i) for i in blk.indices) + "\n")


@dataclass
class ConicSolution:
    """Solver output.

    z, y, s are the primal point, equality duals, and cone duals (s is a full
    n-vector, zero on free variables).  kkt holds the residual triple
    (||A z - b||_inf, ||c + A'y - s||_inf, |c'z + b'y|) of the returned point.
    For Infeasible/Unbounded statuses the point fields are None and `info`
    carries the certificate.
    """

    status: str
    z: np.ndarray | None = None
    y: np.ndarray | None = None
    s: np.ndarray | None = None
    kkt: tuple[float, float, float] | None = None
    objective: float | None = None
    iterations: int = 0
    solve_time: float = 0.0
    info: dict = field(default_factory=dict)


def add_epigraph_norm(prog: ConicProgram, vector_indices: list[int]) -> int:
    """Append a variable t with t >= ||z[vector_indices]||_2; returns t."""
    (t,) = prog.add_vars(1)
    prog.add_soc([t] + list(vector_indices))
    return t


def kkt_residuals(
    prog: ConicProgram, sol: ConicSolution
) -> tuple[float, float, float]:
    """Residual triple (primal, dual, gap) of a solution against a program.

    primal = ||A z - b||_inf, dual = ||c + A'y - s||_inf,
    gap = |c'z + b'y|.  Raises DimensionError on shape mismatch.
    """
    if sol.z is None or sol.y is None or sol.s is None:
        raise DimensionError("solution carries no point (status %s)" % sol.status)
    A, b = prog.matrices()
    c = prog.objective
    if sol.z.shape != (prog.n_vars,) or sol.s.shape != (prog.n_vars,):
        raise DimensionError(f"z/s must have shape ({prog.n_vars},)")
    if sol.y.shape != (prog.n_eq,):
        raise DimensionError(f"y must have shape ({prog.n_eq},)")
    primal = float(np.max(np.abs(A @ sol.z - b))) if prog.n_eq else 0.0
    dual = float(np.max(np.abs(c + A.T @ sol.y - sol.s))) if prog.n_vars else 0.0
    gap = float(abs(c @ sol.z + b @ sol.y))
    return primal, dual, gap


# ---------------------------------------------------------------------------
# cone algebra
# ---------------------------------------------------------------------------


class _ConeOps:
    """Block-wise algebra over the product of nonneg and SOC cones."""

    def __init__(self, cones: list[Nonneg | SOC]):
        self.blocks: list[tuple[str, int, int]] = []  # (kind, offset, size)
        off = 0
        for blk in cones:
            kind = "nn" if isinstance(blk, Nonneg) else "soc"
            self.blocks.append((kind, off, len(blk.indices)))
            off += len(blk.indices)
        self.dim = off
        # barrier degree: one per nonneg entry, one per SOC block
        self.degree = sum(q if k == "nn" else 1 for k, _, q in self.blocks)

    def identity(self) -> np.ndarray:
        e = np.zeros(self.dim)
        for kind, off, q in self.blocks:
            if kind == "nn":
                e[off : off + q] = 1.0
            else:
                e[off] = 1.0
        return e

    def max_step(self, v: np.ndarray, dv: np.ndarray) -> float:
        """Largest alpha with v + alpha*dv still in the (closed) cone."""
        alpha = np.inf
        for kind, off, q in self.blocks:
            s_, d_ = v[off : off + q], dv[off : off + q]
            if kind == "nn":
                neg = d_ < 0
                if np.any(neg):
                    alpha = min(alpha, float(np.min(-s_[neg] / d_[neg])))
            else:
                a = d_[0] ** 2 - d_[1:] @ d_[1:]
                b = s_[0] * d_[0] - s_[1:] @ d_[1:]
                c = s_[0] ** 2 - s_[1:] @ s_[1:]
                c = max(c, 0.0)
                roots = []
                if abs(a) < 1e-14:
                    if b < 0:
                        roots.append(-c / (2 * b))
                else:
                    disc = b * b - a * c
                    if disc >= 0:
                        sq = np.sqrt(disc)
                        for r in ((-b + sq) / a, (-b - sq) / a):
                            if r > 0:
                                roots.append(r)
                    if d_[0] < 0:
                        roots.append(-s_[0] / d_[0])
                if roots:
                    alpha = min(alpha, min(roots))
        return alpha

    def centrality(self, s: np.ndarray, z: np.ndarray) -> tuple[float, float]:
        """Range (min, max) of block complementarity products: s_i z_i per
        nonneg entry, product of Jordan determinant square roots per SOC."""
        lo, hi = np.inf, 0.0
        for kind, off, q in self.blocks:
            sb, zb = s[off : off + q], z[off : off + q]
            if kind == "nn":
                prod = sb * zb
                lo = min(lo, float(np.min(prod)))
                hi = max(hi, float(np.max(prod)))
            else:
                ds_ = sb[0] ** 2 - sb[1:] @ sb[1:]
                dz_ = zb[0] ** 2 - zb[1:] @ zb[1:]
                if ds_ <= 0.0 or dz_ <= 0.0:
                    return -np.inf, np.inf
                p = float(np.sqrt(ds_ * dz_))
                lo = min(lo, p)
                hi = max(hi, p)
        return lo, hi

    def prod(self, u: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Jordan product u o w."""
        out = np.empty(self.dim)
        for kind, off, q in self.blocks:
            a, b = u[off : off + q], w[off : off + q]
            if kind == "nn":
                out[off : off + q] = a * b
            else:
                out[off] = a @ b
                out[off + 1 : off + q] = a[0] * b[1:] + b[0] * a[1:]
        return out

    def div(self, lam: np.ndarray, d: np.ndarray) -> np.ndarray:
        """Jordan division: solve lam o u = d."""
        out = np.empty(self.dim)
        for kind, off, q in self.blocks:
            l_, d_ = lam[off : off + q], d[off : off + q]
            if kind == "nn":
                out[off : off + q] = d_ / l_
            else:
                det = l_[0] ** 2 - l_[1:] @ l_[1:]
                u0 = (l_[0] * d_[0] - l_[1:] @ d_[1:]) / det
                out[off] = u0
                out[off + 1 : off + q] = (d_[1:] - u0 * l_[1:]) / l_[0]
        return out

    def nt_scaling(self, s: np.ndarray, z: np.ndarray):
        """Nesterov-Todd scaling W with W z = W^{-1} s = lambda.

        Returns (per-block data, lambda).  Nonneg blocks carry the diagonal
        of W; SOC blocks the dense pair (W, W^{-1}).  W^{-1} comes from the
        reflection identity H J H = J, so W^{-1} = (1/eta) J H J.
        """
        data = []
        lam = np.empty(self.dim)
        for kind, off, q in self.blocks:
            s_, z_ = s[off : off + q], z[off : off + q]
            if kind == "nn":
                w = np.sqrt(s_ / z_)
                data.append(("nn", off, w))
                lam[off : off + q] = np.sqrt(s_ * z_)
            else:
                J = np.diag(np.r_[1.0, -np.ones(q - 1)])
                a = np.sqrt(s_[0] ** 2 - s_[1:] @ s_[1:])
                b = np.sqrt(z_[0] ** 2 - z_[1:] @ z_[1:])
                sb, zb = s_ / a, z_ / b
                gamma = np.sqrt((1.0 + sb @ zb) / 2.0)
                wbar = (sb + J @ zb) / (2.0 * gamma)
                # W^2 = (a/b) (2 wbar wbar' - J), so W uses the Jordan
                # square root of wbar, which stays unit-determinant
                v = (wbar + np.r_[1.0, np.zeros(q - 1)]) / np.sqrt(2.0 * (wbar[0] + 1.0))
                eta = np.sqrt(a / b)
                H = 2.0 * np.outer(v, v) - J
                W = eta * H
                Winv = (J @ H @ J) / eta
                data.append(("soc", off, W, Winv))
                lam[off : off + q] = W @ z_
        return data, lam

    def apply_W(self, data, v: np.ndarray) -> np.ndarray:
        out = np.empty(self.dim)
        for blk in data:
            if blk[0] == "nn":
                off, w = blk[1], blk[2]
                out[off : off + len(w)] = w * v[off : off + len(w)]
            else:
                off, W = blk[1], blk[2]
                out[off : off + W.shape[0]] = W @ v[off : off + W.shape[0]]
        return out

    def apply_Winv(self, data, v: np.ndarray) -> np.ndarray:
        out = np.empty(self.dim)
        for blk in data:
            if blk[0] == "nn":
                off, w = blk[1], blk[2]
                out[off : off + len(w)] = v[off : off + len(w)] / w
            else:
                off, Winv = blk[1], blk[3]
                out[off : off + Winv.shape[0]] = Winv @ v[off : off + Winv.shape[0]]
        return out


# ---------------------------------------------------------------------------
# presolve
# ---------------------------------------------------------------------------


@dataclass
class _Presolved:
    """Reduced problem plus the bookkeeping to undo the reduction."""

    A: sp.csr_matrix
    b: np.ndarray
    c: np.ndarray
    keep_vars: np.ndarray  # original indices of surviving variables
    keep_rows: np.ndarray  # original indices of surviving rows
    fixed: dict[int, float]  # eliminated variable -> value
    fixed_rows: dict[int, int]  # eliminated singleton row -> its variable
    infeasible: bool = False


def presolve(prog: ConicProgram) -> _Presolved:
    """Eliminate variables fixed by singleton rows and drop dependent rows.

    Variables referenced by cone blocks are never eliminated (their cone
    membership must survive).  Dependent equality rows are dropped with a
    warning; inconsistent rows mark the program infeasible.
    """
    A, b = prog.matrices()
    c = prog.objective
    A = A.tolil()
    cone_vars = set(int(i) for i in prog.cone_indices())
    n, p = prog.n_vars, prog.n_eq
    fixed: dict[int, float] = {}
    fixed_rows: dict[int, int] = {}
    removed_rows: set[int] = set()
    infeasible = False

    changed = True
    while changed:
        changed = False
        for r in range(p):
            if r in removed_rows:
                continue
            cols = [c_ for c_ in A.rows[r] if c_ not in fixed]
            vals = [A[r, c_] for c_ in cols]
            rhs = b[r] - sum(A[r, f] * v for f, v in fixed.items() if f in A.rows[r])
            if not cols:
                if abs(rhs) > 1e-9:
                    infeasible = True
                removed_rows.add(r)
                changed = True
            elif len(cols) == 1 and cols[0] not in cone_vars:
                var, coef = cols[0], vals[0]
                val = rhs / coef
                if var in fixed:
                    if abs(fixed[var] - val) > 1e-9:
                        infeasible = True
                else:
                    fixed[var] = val
                    fixed_rows[r] = var
                removed_rows.add(r)
                changed = True

    keep_vars = np.array([i for i in range(n) if i not in fixed], dtype=int)
    keep_rows_list = [r for r in range(p) if r not in removed_rows]
    A = A.tocsr()
    b_red = b[keep_rows_list].copy()
    if fixed:
        fixed_idx = np.array(sorted(fixed), dtype=int)
        fixed_val = np.array([fixed[i] for i in fixed_idx])
        b_red = b_red - A[keep_rows_list][:, fixed_idx] @ fixed_val
    A_red = A[keep_rows_list][:, keep_vars].tocsr()

    # drop linearly dependent rows (dense QR on the reduced system)
    if A_red.shape[0] > 1:
        dense = A_red.toarray()
        q, r_fact, piv = scipy.linalg.qr(dense.T, mode="economic", pivoting=True)
        diag = np.abs(np.diag(r_fact)) if r_fact.size else np.array([])
        tol = (max(A_red.shape) * np.finfo(float).eps * (diag[0] if diag.size else 1.0))
        rank = int(np.sum(diag > max(tol, 1e-12)))
        if rank < A_red.shape[0]:
            indep = sorted(piv[:rank])
            dep = sorted(set(range(A_red.shape[0])) - set(indep))
            # consistency: dependent rows must be implied by the kept ones
            sol, *_ = np.linalg.lstsq(dense[indep].T, dense[dep].T, rcond=None)
            implied = sol.T @ b_red[indep]
            if np.max(np.abs(implied - b_red[dep])) > 1e-8 * (1 + np.max(np.abs(b_red))):
                infeasible = True
            else:
                warnings.warn(
                    f"presolve dropped {len(dep)} dependent equality row(s)",
                    stacklevel=2,
                )
            keep_rows_list = [keep_rows_list[i] for i in indep]
            A_red = A_red[indep]
            b_red = b_red[indep]

    return _Presolved(
        A=A_red.tocsr(),
        b=b_red,
        c=c[keep_vars],
        keep_vars=keep_vars,
        keep_rows=np.array(keep_rows_list, dtype=int),
        fixed=fixed,
        fixed_rows=fixed_rows,
        infeasible=infeasible,
    )


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------


def solve(prog: ConicProgram, tol: float = 1e-8, max_iter: int = 100) -> ConicSolution:
    """Solve the program to KKT residuals <= tol or a certified status.

    Deterministic for identical inputs.  Raises NumericalFailure if the KKT
    system cannot be solved to working accuracy.
    """
    t_start = time.perf_counter()
    prog.validate()
    red = presolve(prog)
    if red.infeasible:
        return ConicSolution(
            status=INFEASIBLE,
            iterations=0,
            solve_time=time.perf_counter() - t_start,
            info={"reason": "presolve found inconsistent equalities"},
        )

    # cone structure on reduced variable indices
    old_to_new = {int(o): i for i, o in enumerate(red.keep_vars)}
    cones_red: list[Nonneg | SOC] = []
    for blk in prog.cones:
        idx = [old_to_new[i] for i in blk.indices]
        cones_red.append(Nonneg(idx) if isinstance(blk, Nonneg) else SOC(idx))

    # solve the reduced problem a little tighter than requested so the
    # residuals of the reconstructed full solution still clear `tol`
    result = _solve_reduced(red.A, red.b, red.c, cones_red, 0.2 * tol, max_iter)
    result.solve_time = time.perf_counter() - t_start
    if result.status in (INFEASIBLE, UNBOUNDED):
        return result

    # undo presolve: scatter variables, reconstruct eliminated-row duals
    z = np.zeros(prog.n_vars)
    z[red.keep_vars] = result.z
    for i, v in red.fixed.items():
        z[i] = v
    y = np.zeros(prog.n_eq)
    y[red.keep_rows] = result.y
    s = np.zeros(prog.n_vars)
    s[red.keep_vars] = result.s
    if red.fixed_rows:
        A_full, _ = prog.matrices()
        c_full = prog.objective
        Acsc = A_full.tocsc()
        # eliminated singleton rows: recover the dual that zeroes the
        # stationarity residual of their (free, eliminated) variable.
        # Reverse elimination order makes the system triangular: rows
        # eliminated earlier never touch variables fixed later.
        for r, var in reversed(list(red.fixed_rows.items())):
            col = Acsc[:, [var]].toarray().ravel()
            resid = c_full[var] + col @ y - col[r] * y[r]
            y[r] = -resid / col[r]
    result.z, result.y, result.s = z, y, s
    result.kkt = kkt_residuals(prog, result)
    result.objective = float(prog.objective @ z)
    if result.status == OPTIMAL and max(result.kkt) > tol:
        # self-check failed on the full program: do not claim optimality
        result.status = MAX_ITER
        result.info["self_check"] = "post-presolve KKT residuals above tolerance"
    return result


def _solve_reduced(
    A: sp.csr_matrix,
    b: np.ndarray,
    c: np.ndarray,
    cones: list[Nonneg | SOC],
    tol: float,
    max_iter: int,
) -> ConicSolution:
    n = len(c)
    p = A.shape[0]
    ops = _ConeOps(cones)
    m = ops.dim
    if m == 0:
        return _solve_equality_only(A, b, c)

    cone_cols = []
    for blk in cones:
        cone_cols.extend(blk.indices)
    cone_cols = np.array(cone_cols, dtype=int)
    # geometric form: G z + s = 0 with G = -selector of cone entries
    G = sp.csr_matrix(
        (-np.ones(m), (np.arange(m), cone_cols)), shape=(m, n)
    )

    At = A.T.tocsr()
    Gt = G.T.tocsr()

    x = np.zeros(n)
    y = np.zeros(p)
    z = ops.identity()
    s = ops.identity()
    tau, kappa = 1.0, 1.0

    norm_b = 1.0 + np.linalg.norm(b, np.inf) if p else 1.0
    norm_c = 1.0 + np.linalg.norm(c, np.inf) if n else 1.0

    best = None
    best_metric = np.inf
    status = MAX_ITER
    info: dict = {}
    it = 0

    # constant parts of the KKT matrix in scaled form
    #   [ 0    A'   Gs']  with Gs = W^{-1} G and unknown dz~ = W dz,
    #   [ A    0    0  ]  so the cone block is -I and the conditioning is
    #   [ Gs   0   -I  ]  ~||W|| rather than ~||W||^2
    K_rows, K_cols, K_vals = [], [], []
    Acoo = A.tocoo()
    K_rows += list(Acoo.col) + list(n + Acoo.row)
    K_cols += list(n + Acoo.row) + list(Acoo.col)
    K_vals += list(Acoo.data) + list(Acoo.data)
    reg = 1e-10
    K_rows += list(range(n)) + list(range(n, n + p)) + list(range(n + p, n + p + m))
    K_cols += list(range(n)) + list(range(n, n + p)) + list(range(n + p, n + p + m))
    K_vals += [reg] * n + [-reg] * p + [-1.0 - reg] * m
    K_static = (K_rows, K_cols, K_vals)

    for it in range(1, max_iter + 1):
        # residuals of the homogeneous model
        rx = At @ y + Gt @ z + c * tau
        ry = -(A @ x) + b * tau
        rz = -(G @ x) - s
        rtau = kappa + c @ x + b @ y

        mu = (s @ z + tau * kappa) / (ops.degree + 1)

        # recovered point and its convergence metrics
        xt, yt, zt = x / tau, y / tau, z / tau
        pres = np.linalg.norm(A @ xt - b, np.inf) if p else 0.0
        # s = E' z is the dual slack of the standard form
        s_std = Gt @ (-zt)
        dres = np.linalg.norm(c + (At @ yt) - s_std, np.inf)
        gap = abs(c @ xt + b @ yt)
        metric = max(pres, dres, gap)
        if metric < best_metric:
            best_metric = metric
            best = (xt.copy(), yt.copy(), s_std.copy())
        if pres <= tol and dres <= tol and gap <= tol:
            status = OPTIMAL
            break

        # infeasibility / unboundedness certificates (homogeneous); a Farkas
        # certificate below 1e-9 relative residual is conclusive regardless
        # of how tight the optimality tolerance is, so do not scale it down
        cert_tol = max(tol, 1e-9)
        by_hz = b @ y
        if by_hz < -1e-12:
            # z stays interior to the cone, so (y, z)/(-b'y) certifies
            # primal infeasibility once the dual residual vanishes
            cert = np.linalg.norm(At @ y + Gt @ z, np.inf) / (-by_hz) / norm_c
            if cert <= cert_tol:
                status = INFEASIBLE
                info = {"certificate_residual": float(cert), "y": y / (-by_hz), "iter": it}
                break
        cx = c @ x
        if cx < -1e-12:
            cert = max(
                np.linalg.norm(A @ x, np.inf) if p else 0.0,
                np.linalg.norm(G @ x + s, np.inf),
            ) / (-cx) / norm_b
            if cert <= cert_tol:
                status = UNBOUNDED
                info = {"certificate_residual": float(cert), "ray": x / (-cx), "iter": it}
                break

        W, lam = ops.nt_scaling(s, z)

        # assemble and factor the KKT matrix with the current W^{-1} G block
        rows, cols, vals = list(K_static[0]), list(K_static[1]), list(K_static[2])
        for blk in W:
            if blk[0] == "nn":
                off, w = blk[1], blk[2]
                for j, wj in enumerate(w):
                    r_, c_ = n + p + off + j, int(cone_cols[off + j])
                    rows += [r_, c_]
                    cols += [c_, r_]
                    vals += [-1.0 / wj, -1.0 / wj]
            else:
                off, Winv = blk[1], blk[3]
                q = Winv.shape[0]
                for a_ in range(q):
                    for b_ in range(q):
                        r_, c_ = n + p + off + a_, int(cone_cols[off + b_])
                        rows += [r_, c_]
                        cols += [c_, r_]
                        vals += [-Winv[a_, b_], -Winv[a_, b_]]
        K = sp.csc_matrix(
            (vals, (rows, cols)), shape=(n + p + m, n + p + m)
        )
        try:
            lu = spla.splu(K, permc_spec="COLAMD")
        except RuntimeError as exc:
            raise NumericalFailure(
                f"KKT factorization failed at iteration {it}: {exc}"
            ) from exc

        def kkt_solve(r1, r2, r3, refine: int = 2):
            # r3 belongs to the unscaled row G dx - W^2 dz = r3
            rhs = np.concatenate([r1, r2, ops.apply_Winv(W, r3)])
            sol = lu.solve(rhs)
            for _ in range(refine):
                resid = rhs - _kkt_apply(A, At, G, Gt, ops, W, sol, n, p, m)
                corr = lu.solve(resid)
                if not np.all(np.isfinite(corr)):
                    break
                sol = sol + corr
            if not np.all(np.isfinite(sol)):
                raise NumericalFailure(f"KKT solve produced non-finite values at iteration {it}")
            return sol[:n], sol[n : n + p], ops.apply_Winv(W, sol[n + p :]), sol[n + p :]

        x1, y1, z1, zt1 = kkt_solve(-c, b, np.zeros(m))
        cby1 = c @ x1 + b @ y1

        def direction(eta: float, ds_rhs: np.ndarray, dtau_rhs: float):
            dsc = ops.div(lam, ds_rhs)
            x2, y2, z2, zt2 = kkt_solve(
                -eta * rx, eta * ry, eta * rz - ops.apply_W(W, dsc)
            )
            denom = kappa / tau - cby1
            if abs(denom) < 1e-16:
                denom = 1e-16 if denom >= 0 else -1e-16
            dtau = (eta * rtau + dtau_rhs / tau + c @ x2 + b @ y2) / denom
            dx = x2 + dtau * x1
            dy = y2 + dtau * y1
            dz = z2 + dtau * z1
            dzt = zt2 + dtau * zt1
            ds = ops.apply_W(W, dsc - dzt)
            dkappa = (dtau_rhs - kappa * dtau) / tau
            return dx, dy, dz, dtau, ds, dkappa, dzt

        # predictor (affine)
        aff = direction(1.0, -ops.prod(lam, lam), -tau * kappa)
        dxa, dya, dza, dtaua, dsa, dkappaa, dzta = aff
        alpha_aff = min(
            ops.max_step(s, dsa),
            ops.max_step(z, dza),
            (tau / -dtaua) if dtaua < 0 else np.inf,
            (kappa / -dkappaa) if dkappaa < 0 else np.inf,
            1.0,
        )
        mu_aff = (
            (s + alpha_aff * dsa) @ (z + alpha_aff * dza)
            + (tau + alpha_aff * dtaua) * (kappa + alpha_aff * dkappaa)
        ) / (ops.degree + 1)
        sigma = min(1.0, max(0.0, (mu_aff / mu))) ** 3

        # corrector (combined)
        corr_s = (
            -ops.prod(lam, lam)
            - ops.prod(ops.apply_Winv(W, dsa), dzta)
            + sigma * mu * ops.identity()
        )
        corr_tau = -tau * kappa - dtaua * dkappaa + sigma * mu
        dx, dy, dz, dtau, ds, dkappa, _ = direction(1.0 - sigma, corr_s, corr_tau)

        # keep iterates in a wide centrality neighborhood: second-order
        # terms can otherwise crush a single complementarity product
        # (usually tau*kappa) and the centering corrections then blow up
        theta = 0.05

        def backtracked(ds_, dz_, dtau_, dkappa_):
            """Largest feasible step kept inside the neighborhood, by
            repeated shrinking; flags whether the condition was met."""
            a = min(
                ops.max_step(s, ds_),
                ops.max_step(z, dz_),
                (tau / -dtau_) if dtau_ < 0 else np.inf,
                (kappa / -dkappa_) if dkappa_ < 0 else np.inf,
            )
            a = min(0.99 * a, 1.0)
            for _ in range(60):
                s_t = s + a * ds_
                z_t = z + a * dz_
                tau_t = tau + a * dtau_
                kappa_t = kappa + a * dkappa_
                mu_t = (s_t @ z_t + tau_t * kappa_t) / (ops.degree + 1)
                lo, _ = ops.centrality(s_t, z_t)
                lo = min(lo, tau_t * kappa_t)
                if mu_t > 0 and lo >= theta * mu_t:
                    return a, True
                a *= 0.8
            return a, False

        alpha, ok = backtracked(ds, dz, dtau, dkappa)
        if not ok or alpha < max(0.01, 0.05 * alpha_aff):
            # the corrector step cannot move without leaving the
            # neighborhood (degenerate faces pin a product at the theta
            # boundary); recenter with progressively stronger sigma
            for sigma_c in (max(0.5, sigma), 1.0):
                cand = direction(
                    1.0 - sigma_c,
                    -ops.prod(lam, lam) + sigma_c * mu * ops.identity(),
                    -tau * kappa + sigma_c * mu,
                )
                alpha_c, ok_c = backtracked(cand[4], cand[2], cand[3], cand[5])
                if (ok_c and not ok) or (ok_c == ok and alpha_c > alpha):
                    dx, dy, dz, dtau, ds, dkappa = cand[:6]
                    alpha, ok = alpha_c, ok_c
                    sigma = sigma_c
                if ok and alpha >= 0.01:
                    break
        if not np.isfinite(alpha) or alpha <= 1e-13:
            status = MAX_ITER
            info["reason"] = f"step length collapsed at iteration {it}"
            break

        x += alpha * dx
        y += alpha * dy
        z += alpha * dz
        s += alpha * ds
        tau += alpha * dtau
        kappa += alpha * dkappa

        # the embedding is homogeneous: rescale uniformly if the iterate
        # drifts to large magnitudes (exactly preserves the recovered point)
        scale = max(tau, kappa, float(np.max(np.abs(s))), float(np.max(np.abs(z))))
        if scale > 1e4:
            x /= scale
            y /= scale
            z /= scale
            s /= scale
            tau /= scale
            kappa /= scale

    if status == OPTIMAL:
        xt, yt = x / tau, y / tau
        s_std = Gt @ (-(z / tau))
        return ConicSolution(
            status=OPTIMAL,
            z=xt,
            y=yt,
            s=s_std,
            kkt=(float(pres), float(dres), float(gap)),
            objective=float(c @ xt),
            iterations=it,
            info={"mu": float(mu)},
        )
    if status in (INFEASIBLE, UNBOUNDED):
        return ConicSolution(status=status, iterations=it, info=info)
    xt, yt, s_std = best if best is not None else (x / tau, y / tau, Gt @ (-(z / tau)))
    return ConicSolution(
        status=MAX_ITER,
        z=xt,
        y=yt,
        s=s_std,
        kkt=None,
        objective=float(c @ xt),
        iterations=it,
        info=info or {"best_metric": float(best_metric)},
    )


def _kkt_apply(A, At, G, Gt, ops: _ConeOps, W, vec, n, p, m):
    """Unregularized scaled-KKT product for iterative refinement.

    The system solved is [0 A' Gs'; A 0 0; Gs 0 -I] with Gs = W^{-1} G and
    the cone unknown in scaled form.
    """
    vx, vy, vzt = vec[:n], vec[n : n + p], vec[n + p :]
    top = (At @ vy if p else 0.0) + Gt @ ops.apply_Winv(W, vzt)
    mid = A @ vx if p else np.zeros(0)
    bot = ops.apply_Winv(W, G @ vx) - vzt
    return np.concatenate([np.asarray(top), np.asarray(mid), bot])


def _solve_equality_only(A: sp.csr_matrix, b: np.ndarray, c: np.ndarray) -> ConicSolution:
    """Cone-free program: plain linear algebra on A z = b."""
    n = len(c)
    if A.shape[0] == 0:
        if np.any(c):
            return ConicSolution(status=UNBOUNDED, info={"reason": "free objective direction"})
        return ConicSolution(
            status=OPTIMAL, z=np.zeros(n), y=np.zeros(0), s=np.zeros(n),
            objective=0.0, iterations=0,
        )
    dense = A.toarray()
    z, *_ = np.linalg.lstsq(dense, b, rcond=None)
    if np.linalg.norm(dense @ z - b, np.inf) > 1e-9 * (1 + np.max(np.abs(b))):
        return ConicSolution(status=INFEASIBLE, info={"reason": "inconsistent equalities"})
    # bounded iff c lies in the row space, i.e. some y has c + A'y = 0
    y, *_ = np.linalg.lstsq(dense.T, -c, rcond=None)
    if np.linalg.norm(dense.T @ y + c, np.inf) > 1e-9 * (1 + np.max(np.abs(c))):
        return ConicSolution(status=UNBOUNDED, info={"reason": "objective direction in nullspace"})
    return ConicSolution(
        status=OPTIMAL, z=z, y=y, s=np.zeros(n),
        objective=float(c @ z), iterations=0,
    )
