"""Tests for the robust safety filter."""

import json
import time

import numpy as np
import pytest

from drsf import bounds, conic, grid, safety


def two_bus(p_gen=0.8, s_rating=1.0, p_load=0.1, q_load=0.05, r=0.05, x=0.05):
    return grid.Network(
        buses=[grid.Bus(0), grid.Bus(1, p_load, q_load)],
        lines=[grid.Line(0, 1, r, x)],
        pv_units=[grid.PVUnit(1, p_gen, s_rating)],
    )


def voltage_box(net, pad):
    return bounds.RobustBounds(
        bounds.VOLTAGE,
        -pad * np.ones(net.n_bus),
        pad * np.ones(net.n_bus),
        0.0,
        0.1,
        1.0,
    )


def test_feasible_action_passes_through():
    # zero is the norm's minimum, so a robust-feasible proposal is returned
    net = two_bus()
    cfg = safety.DRSFConfig(bounds=safety.zero_bounds(net), omega=0.0)
    res = safety.filter_action(net, [0.0], cfg)
    assert res.status == safety.OPTIMAL
    assert res.deviation <= 1e-6
    assert abs(res.q_safe[0]) <= 1e-6


def test_overvoltage_clamp_matches_power_flow_oracle():
    # reverse-flow scenario: q_learn at +max lifts v1 over the cap; the
    # filtered setpoint must equal the largest q that exact power flow
    # keeps at the limit
    net = two_bus()
    qmax = net.pv_units[0].q_max
    cfg = safety.DRSFConfig(bounds=safety.zero_bounds(net))
    res = safety.filter_action(net, [qmax], cfg)
    vmax2 = net.limits.v_max**2

    lo_q, hi_q = 0.0, qmax
    for _ in range(60):
        mid = 0.5 * (lo_q + hi_q)
        op = grid.solve_power_flow(grid.apply_action(net, [mid]))
        if op.v_sq[1] <= vmax2:
            lo_q = mid
        else:
            hi_q = mid

    assert res.q_safe[0] < qmax
    assert res.q_safe[0] == pytest.approx(lo_q, abs=1e-5)
    assert res.predicted.v_sq[1] == pytest.approx(vmax2, abs=1e-4)
    assert res.exactness_gap <= 1e-5
    assert res.deviation == pytest.approx(qmax - lo_q, abs=1e-5)


def test_robust_tightening_shifts_the_binding_limit():
    # a nonzero upper voltage bound moves the effective cap down by
    # exactly that amount
    net = two_bus()
    qmax = net.pv_units[0].q_max
    b = safety.zero_bounds(net)
    b[bounds.VOLTAGE] = voltage_box(net, 0.01)
    cfg = safety.DRSFConfig(bounds=b)
    res = safety.filter_action(net, [qmax], cfg)
    assert res.predicted.v_sq[1] == pytest.approx(net.limits.v_max**2 - 0.01, abs=1e-4)


def test_structural_snapshot_two_bus():
    net = two_bus()
    cfg = safety.DRSFConfig(bounds=safety.zero_bounds(net))
    built = safety.build_drsf(net, [0.0], cfg)
    assert built.summary() == {"n_vars": 28, "n_eq": 24, "n_soc": 4, "n_nonneg": 6}
    # identical input builds an identical program
    again = safety.build_drsf(net, [0.0], cfg)
    assert again.summary() == built.summary()
    np.testing.assert_array_equal(
        again.program.matrices()[1], built.program.matrices()[1]
    )


def test_zero_bounds_reduce_to_nominal_limits():
    # the limit rows (built last) carry the untightened squared limits
    net = two_bus()
    cfg = safety.DRSFConfig(bounds=safety.zero_bounds(net))
    built = safety.build_drsf(net, [0.0], cfg)
    rhs = built.program.matrices()[1][-6:]
    lim = net.limits
    np.testing.assert_allclose(
        rhs,
        [lim.v_min**2, lim.v_max**2, lim.v_min**2, lim.v_max**2, lim.i_max**2, lim.s0_max**2],
    )


def test_minimality_against_random_feasible_candidates():
    net = two_bus()
    qmax = net.pv_units[0].q_max
    cfg = safety.DRSFConfig(bounds=safety.zero_bounds(net))
    res = safety.filter_action(net, [qmax], cfg)
    best = res.deviation + cfg.omega * float(np.sum(res.predicted.l_sq))
    rng = np.random.default_rng(4)
    lim = net.limits
    for _ in range(100):
        q = rng.uniform(-qmax, qmax)
        op = grid.solve_power_flow(grid.apply_action(net, [q]))
        if lim.v_min**2 <= op.v_sq.min() and op.v_sq.max() <= lim.v_max**2:
            cand = abs(qmax - q) + cfg.omega * float(np.sum(op.l_sq))
            assert best <= cand + 1e-6


def test_monotone_conservatism():
    # componentwise-larger error boxes never decrease the deviation
    net = two_bus()
    qmax = net.pv_units[0].q_max
    devs = []
    for pad in (0.0, 0.01, 0.02):
        b = safety.zero_bounds(net)
        b[bounds.VOLTAGE] = voltage_box(net, pad)
        devs.append(safety.filter_action(net, [qmax], safety.DRSFConfig(bounds=b)).deviation)
    assert devs[0] <= devs[1] + 1e-9 <= devs[2] + 2e-9


def test_projection_idempotence():
    net = two_bus()
    qmax = net.pv_units[0].q_max
    cfg = safety.DRSFConfig(bounds=safety.zero_bounds(net), omega=0.0)
    first = safety.filter_action(net, [qmax], cfg)
    second = safety.filter_action(net, first.q_safe, cfg)
    assert second.deviation <= 1e-6
    assert second.q_safe[0] == pytest.approx(first.q_safe[0], abs=1e-6)


def test_infeasible_reports_binding_class():
    # 0.15 p.u.^2 voltage boxes empty the 0.2-wide squared-voltage band
    net = two_bus()
    b = safety.zero_bounds(net)
    b[bounds.VOLTAGE] = voltage_box(net, 0.15)
    cfg = safety.DRSFConfig(bounds=b)
    with pytest.raises(safety.InfeasibleFilter) as err:
        safety.filter_action(net, [0.0], cfg)
    assert bounds.VOLTAGE in err.value.binding
    assert err.value.violation[bounds.VOLTAGE] > 0.19


def test_fallback_recenters_inside_crossed_band():
    # band deficit is 0.1 per bus; the labeled fallback attains it exactly
    # and parks the bus voltage in the crossed bounds' overlap, near band
    # center, rather than anywhere of equal violation mass
    net = two_bus()
    b = safety.zero_bounds(net)
    b[bounds.VOLTAGE] = voltage_box(net, 0.15)
    cfg = safety.DRSFConfig(bounds=b)
    res = safety.filter_action(net, [0.0], cfg, on_infeasible="relax")
    assert res.status == safety.FALLBACK
    assert res.info["violation_voltage"] == pytest.approx(0.2, abs=1e-6)
    assert abs(res.q_safe[0]) <= net.pv_units[0].q_max + 1e-9
    assert 0.999 <= res.predicted.v_sq[1] <= 1.006
    assert res.exactness_gap <= cfg.relaxation_tol


def test_fallback_blocks_unsafe_passthrough():
    # boxes so wide the padded bounds cross beyond the whole band: every
    # profile carries the same violation mass, so a mass-only objective
    # would pass the raw action through; the fallback must still recenter
    net = two_bus()
    qmax = net.pv_units[0].q_max
    b = safety.zero_bounds(net)
    b[bounds.VOLTAGE] = voltage_box(net, 0.5)
    cfg = safety.DRSFConfig(bounds=b)
    res = safety.filter_action(net, [qmax], cfg, on_infeasible="relax")
    assert res.status == safety.FALLBACK
    assert res.deviation > 1.0
    true_op = grid.solve_power_flow(grid.apply_action(net, res.q_safe))
    assert net.limits.v_min <= true_op.v[1] <= net.limits.v_max
    assert res.info["violation_voltage"] == pytest.approx(1.6, abs=1e-6)


def test_unreachable_voltage_band_is_infeasible():
    # a valid but unreachable band: no setpoint lifts every bus to 1.04 p.u.
    net = two_bus()
    net.limits = grid.OperationalLimits(v_min=1.04, v_max=1.05)
    cfg = safety.DRSFConfig(bounds=safety.zero_bounds(net))
    with pytest.raises(safety.InfeasibleFilter) as err:
        safety.filter_action(net, [0.0], cfg)
    assert err.value.binding == [bounds.VOLTAGE]


def test_bounds_and_dimension_validation():
    net = two_bus()
    b = safety.zero_bounds(net)
    del b[bounds.CURRENT]
    with pytest.raises(safety.BoundsMissing):
        safety.build_drsf(net, [0.0], safety.DRSFConfig(bounds=b))

    b = safety.zero_bounds(net)
    b[bounds.VOLTAGE] = bounds.RobustBounds(
        bounds.VOLTAGE, np.zeros(5), np.zeros(5), 0.0, 0.1, 1.0
    )
    with pytest.raises(conic.DimensionError):
        safety.build_drsf(net, [0.0], safety.DRSFConfig(bounds=b))

    cfg = safety.DRSFConfig(bounds=safety.zero_bounds(net))
    with pytest.raises(conic.DimensionError):
        safety.build_drsf(net, [0.0, 0.0], cfg)


def test_config_validation():
    net = two_bus()
    with pytest.raises(ValueError):
        safety.DRSFConfig(bounds=safety.zero_bounds(net), omega=-1.0)
    with pytest.raises(ValueError):
        safety.DRSFConfig(bounds=safety.zero_bounds(net), relaxation_tol=0.0)
    with pytest.raises(ValueError):
        safety.filter_action(net, [0.0], safety.DRSFConfig(bounds=safety.zero_bounds(net)),
                             on_infeasible="retry")


def test_relaxation_gap_measures_current_inflation():
    net = two_bus()
    op = grid.solve_power_flow(net)
    assert abs(safety.relaxation_gap(net, op)) <= 1e-8
    inflated = grid.OperatingPoint(
        v_sq=op.v_sq,
        l_sq=op.l_sq + 0.01,
        p_flow=op.p_flow,
        q_flow=op.q_flow,
        p0=op.p0,
        q0=op.q0,
        loss=op.loss,
    )
    assert safety.relaxation_gap(net, inflated) == pytest.approx(0.01 * op.v_sq[0], abs=1e-9)


def test_result_json_roundtrip(tmp_path):
    net = two_bus()
    cfg = safety.DRSFConfig(bounds=safety.zero_bounds(net))
    res = safety.filter_action(net, [0.1], cfg)
    path = tmp_path / "result.json"
    res.to_json(path)
    with open(path) as fh:
        payload = json.load(fh)
    assert payload["status"] == safety.OPTIMAL
    assert payload["q_safe"] == res.q_safe.tolist()
    assert payload["exactness_gap"] == res.exactness_gap
    assert payload["solve_time"] == res.solve_time
    assert payload["predicted"]["v_sq"] == res.predicted.v_sq.tolist()


def test_33bus_filter_is_optimal_exact_and_safe():
    net = grid.load_builtin()
    cfg = safety.DRSFConfig(bounds=safety.zero_bounds(net))
    qmax = np.array([pv.q_max for pv in net.pv_units])
    rng = np.random.default_rng(9)
    lim = net.limits
    elapsed = []
    for _ in range(3):
        q_learn = rng.uniform(-qmax, qmax)
        t0 = time.perf_counter()
        res = safety.filter_action(net, q_learn, cfg)
        elapsed.append(time.perf_counter() - t0)
        assert res.status == safety.OPTIMAL
        assert res.exactness_gap <= 1e-5
        assert -1e-8 <= res.exactness_gap
        op = grid.solve_power_flow(grid.apply_action(net, res.q_safe))
        assert op.v_sq.min() >= lim.v_min**2 - 1e-7
        assert op.v_sq.max() <= lim.v_max**2 + 1e-7
        assert op.l_sq.max() <= lim.i_max**2 + 1e-7
        assert op.p0**2 + op.q0**2 <= lim.s0_max**2 + 1e-6
    assert sorted(elapsed)[1] < 1.0
