"""Tests for the conic program container and interior-point solver."""

import warnings

import numpy as np
import pytest
from scipy.linalg import null_space
from scipy.optimize import linprog

from drsf import conic

# Frozen oracle value for the 20-variable instance built by `frozen_socp`
# below: nullspace parameterization (17 equalities leave 3 effective
# dimensions) minimized with multistart Nelder-Mead at fatol 1e-16.
FROZEN_SOCP_OBJECTIVE = 7.800531583625608


def frozen_socp():
    rng = np.random.default_rng(2024)
    n, p = 20, 17
    A = rng.normal(size=(p, n))
    b = A @ rng.uniform(0.5, 1.5, size=n)
    prog = conic.ConicProgram()
    xs = prog.add_vars(n)
    for i in range(p):
        prog.add_eq({j: A[i, j] for j in range(n)}, float(b[i]))
    t1 = conic.add_epigraph_norm(prog, xs[:6])
    t2 = conic.add_epigraph_norm(prog, xs[6:14])
    prog.add_nonneg(xs[14:])
    prog.set_objective_term(t1, 1.0)
    prog.set_objective_term(t2, 2.5)
    for j in range(14, 20):
        prog.set_objective_term(j, 0.1)
    return prog


def test_lp_scalar_bound():
    # min x subject to x - 1 >= 0 via an explicit slack
    prog = conic.ConicProgram()
    x, slack = prog.add_vars(2)
    prog.add_eq({x: 1.0, slack: -1.0}, 1.0)
    prog.add_nonneg([slack])
    prog.set_objective_term(x, 1.0)
    sol = conic.solve(prog)
    assert sol.status == conic.OPTIMAL
    assert sol.z[x] == pytest.approx(1.0, abs=1e-7)
    assert max(sol.kkt) <= 1e-8


def test_soc_hypotenuse():
    # min t subject to t >= ||(3, 4)|| gives 5
    prog = conic.ConicProgram()
    u1, u2 = prog.add_vars(2)
    prog.add_eq({u1: 1.0}, 3.0)
    prog.add_eq({u2: 1.0}, 4.0)
    t = conic.add_epigraph_norm(prog, [u1, u2])
    prog.set_objective_term(t, 1.0)
    sol = conic.solve(prog)
    assert sol.status == conic.OPTIMAL
    assert sol.z[t] == pytest.approx(5.0, abs=1e-7)


def test_epigraph_of_empty_vector_is_nonneg():
    prog = conic.ConicProgram()
    t = conic.add_epigraph_norm(prog, [])
    prog.set_objective_term(t, 1.0)
    sol = conic.solve(prog)
    assert sol.status == conic.OPTIMAL
    assert sol.z[t] == pytest.approx(0.0, abs=1e-7)


def test_kkt_residuals_on_hand_solution():
    # min x s.t. x - s = 1, s >= 0: optimum x=1 with equality dual y=-1,
    # cone dual s=(0, 1); all three residuals vanish exactly
    prog = conic.ConicProgram()
    x, slack = prog.add_vars(2)
    prog.add_eq({x: 1.0, slack: -1.0}, 1.0)
    prog.add_nonneg([slack])
    prog.set_objective_term(x, 1.0)
    sol = conic.ConicSolution(
        status=conic.OPTIMAL,
        z=np.array([1.0, 0.0]),
        y=np.array([-1.0]),
        s=np.array([0.0, 1.0]),
    )
    assert conic.kkt_residuals(prog, sol) == (0.0, 0.0, 0.0)

    # perturbing the dual by 1e-3 shows up as exactly that dual residual
    sol.y = np.array([-1.0 + 1e-3])
    primal, dual, gap = conic.kkt_residuals(prog, sol)
    assert primal == 0.0
    assert dual == pytest.approx(1e-3, rel=1e-12)
    assert gap == pytest.approx(1e-3, rel=1e-12)


def test_frozen_instance_matches_oracle():
    sol = conic.solve(frozen_socp(), tol=1e-10)
    assert sol.status == conic.OPTIMAL
    assert sol.objective == pytest.approx(FROZEN_SOCP_OBJECTIVE, abs=1e-5)
    assert max(sol.kkt) <= 1e-8


def test_weak_duality_and_cone_duals():
    sol = conic.solve(frozen_socp(), tol=1e-10)
    prog = frozen_socp()
    # dual objective -b'y never exceeds the primal objective
    _, b = prog.matrices()
    assert prog.objective @ sol.z >= -(b @ sol.y) - 1e-8
    # cone duals vanish on free variables
    cone_vars = set(int(i) for i in prog.cone_indices())
    free = [j for j in range(prog.n_vars) if j not in cone_vars]
    assert np.all(sol.s[free] == 0.0)


def test_objective_scaling_keeps_optimizer():
    base = conic.solve(frozen_socp(), tol=1e-10)
    scaled_prog = frozen_socp()
    for j, cj in enumerate(scaled_prog.objective):
        if cj != 0.0:
            scaled_prog.set_objective_term(j, 7.5 * cj)
    scaled = conic.solve(scaled_prog, tol=1e-10)
    assert scaled.status == conic.OPTIMAL
    assert np.max(np.abs(scaled.z - base.z)) < 1e-6
    assert scaled.objective == pytest.approx(7.5 * base.objective, rel=1e-8)


def test_random_lps_match_reference():
    rng = np.random.default_rng(42)
    for _ in range(20):
        n, p = int(rng.integers(4, 10)), int(rng.integers(2, 4))
        A = rng.normal(size=(p, n))
        b = A @ rng.uniform(0.5, 2.0, size=n)
        c = rng.normal(size=n)
        ref = linprog(c, A_eq=A, b_eq=b, bounds=[(0, None)] * n, method="highs")
        prog = conic.ConicProgram()
        xs = prog.add_vars(n)
        for i in range(p):
            prog.add_eq({j: A[i, j] for j in range(n)}, float(b[i]))
        prog.add_nonneg(xs)
        for j in range(n):
            prog.set_objective_term(j, float(c[j]))
        sol = conic.solve(prog)
        if ref.status == 0:
            assert sol.status == conic.OPTIMAL
            assert sol.objective == pytest.approx(ref.fun, abs=1e-6, rel=1e-6)
        elif ref.status == 3:
            assert sol.status == conic.UNBOUNDED


def test_infeasible_certificate():
    prog = conic.ConicProgram()
    (x,) = prog.add_vars(1)
    prog.add_nonneg([x])
    prog.add_eq({x: 1.0}, -1.0)
    sol = conic.solve(prog)
    assert sol.status == conic.INFEASIBLE
    assert sol.z is None


def test_unbounded_certificate():
    prog = conic.ConicProgram()
    (x,) = prog.add_vars(1)
    prog.add_nonneg([x])
    prog.set_objective_term(x, -1.0)
    sol = conic.solve(prog)
    assert sol.status == conic.UNBOUNDED


def test_max_iter_status():
    sol = conic.solve(frozen_socp(), max_iter=2)
    assert sol.status == conic.MAX_ITER
    assert sol.z is not None  # best iterate still reported


def test_determinism():
    s1 = conic.solve(frozen_socp())
    s2 = conic.solve(frozen_socp())
    assert np.array_equal(s1.z, s2.z)
    assert np.array_equal(s1.y, s2.y)
    assert s1.iterations == s2.iterations


def test_presolve_singleton_chain():
    # fixing a=2 turns the middle rows into singletons on b, which in turn
    # fix c; presolve resolves the whole chain and still reports exact duals
    prog = conic.ConicProgram()
    a, b_, c_ = prog.add_vars(3)
    prog.add_eq({a: 2.0}, 4.0)
    prog.add_eq({a: 1.0, b_: 1.0}, 5.0)
    prog.add_eq({a: 1.0, b_: 1.0}, 5.0)  # redundant copy
    prog.add_eq({c_: 1.0, b_: -1.0}, 0.0)
    prog.add_nonneg([c_])
    prog.set_objective_term(c_, 1.0)
    sol = conic.solve(prog)
    assert sol.status == conic.OPTIMAL
    assert sol.z == pytest.approx([2.0, 3.0, 3.0], abs=1e-6)
    assert max(sol.kkt) <= 1e-8  # duals reconstructed for eliminated rows


def test_presolve_drops_dependent_rows():
    prog = conic.ConicProgram()
    x, y = prog.add_vars(2)
    prog.add_eq({x: 1.0, y: 1.0}, 2.0)
    prog.add_eq({x: 2.0, y: 2.0}, 4.0)  # scaled copy, consistent
    prog.add_eq({x: 1.0, y: -1.0}, 0.0)
    prog.add_nonneg([x, y])
    prog.set_objective_term(x, 1.0)
    with pytest.warns(UserWarning, match="dependent"):
        sol = conic.solve(prog)
    assert sol.status == conic.OPTIMAL
    assert sol.z == pytest.approx([1.0, 1.0], abs=1e-7)
    assert max(sol.kkt) <= 1e-8


def test_presolve_detects_inconsistency():
    prog = conic.ConicProgram()
    a, b_ = prog.add_vars(2)
    prog.add_eq({a: 1.0, b_: 1.0}, 1.0)
    prog.add_eq({a: 2.0, b_: 2.0}, 3.0)  # contradicts the first row
    sol = conic.solve(prog)
    assert sol.status == conic.INFEASIBLE


def test_equality_only_programs():
    prog = conic.ConicProgram()
    prog.add_vars(3)
    prog.add_eq({0: 1.0, 1: 1.0}, 2.0)
    prog.add_eq({1: 1.0, 2: -1.0}, 0.0)
    prog.set_objective_term(0, 1.0)
    prog.set_objective_term(1, 1.0)  # constant on the feasible set
    sol = conic.solve(prog)
    assert sol.status == conic.OPTIMAL
    assert sol.objective == pytest.approx(2.0, abs=1e-9)

    prog.set_objective_term(1, -1.0)  # now decreasing along the nullspace
    assert conic.solve(prog).status == conic.UNBOUNDED


def test_nt_scaling_identity():
    # the scaling must map both cone points onto the same scaled point
    rng = np.random.default_rng(5)
    ops = conic._ConeOps([conic.Nonneg([0, 1]), conic.SOC([2, 3, 4, 5])])
    for _ in range(10):
        s = np.empty(6)
        z = np.empty(6)
        s[:2] = rng.uniform(0.1, 3.0, 2)
        z[:2] = rng.uniform(0.1, 3.0, 2)
        for v in (s, z):
            tail = rng.normal(size=3)
            v[3:] = tail
            v[2] = np.linalg.norm(tail) + rng.uniform(0.1, 2.0)
        W, lam = ops.nt_scaling(s, z)
        assert ops.apply_W(W, z) == pytest.approx(lam, rel=1e-10)
        assert ops.apply_Winv(W, s) == pytest.approx(lam, rel=1e-10)


def test_cone_overlap_rejected():
    prog = conic.ConicProgram()
    xs = prog.add_vars(3)
    prog.add_nonneg(xs[:2])
    prog.add_soc(xs[1:])
    with pytest.raises(ValueError, match="two cone blocks"):
        conic.solve(prog)


def test_dimension_errors():
    prog = conic.ConicProgram()
    prog.add_vars(2)
    with pytest.raises(conic.DimensionError):
        prog.add_eq({5: 1.0}, 0.0)
    sol = conic.ConicSolution(
        status=conic.OPTIMAL, z=np.zeros(3), y=np.zeros(0), s=np.zeros(3)
    )
    with pytest.raises(conic.DimensionError):
        conic.kkt_residuals(prog, sol)


def test_dump_roundtrippable_text(tmp_path):
    prog = frozen_socp()
    path = tmp_path / "prog.txt"
    prog.dump(str(path))
    text = path.read_text().splitlines()
    assert text[0] == f"n_vars {prog.n_vars}"
    assert sum(1 for line in text if line.startswith("cone ")) == len(prog.cones)
