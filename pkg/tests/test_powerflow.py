import math

import numpy as np
import pytest

from conftest import twin
from gridtwin import cases
from gridtwin.netmodel import NetworkError, model_from_dict, model_to_dict, with_slack_voltage
from gridtwin.powerflow import (
    Network,
    PowerFlowError,
    linearize,
    mismatch,
    mismatch_jacobian,
    predict_voltages,
    slack_from_line_voltages,
    solve_powerflow,
    with_injection,
)


def _unloaded(doc):
    doc = dict(doc)
    doc["loads"], doc["generators"] = [], []
    return model_from_dict(doc)


def test_no_load_flat_profile():
    model = _unloaded(cases.radial_chain(5))
    model = with_slack_voltage(model, [1.0, np.exp(-2j * np.pi / 3), np.exp(2j * np.pi / 3)])
    sol = solve_powerflow(model)
    assert sol.iterations <= 1
    star = np.exp(1j * np.deg2rad([0, -120, 120]))
    for bus in model.bus_ids:
        # cable charging alone moves the profile by well under 1e-4 pu
        assert np.max(np.abs(sol.state.bus(bus) - star)) < 1e-4


def test_two_bus_closed_form():
    for r, x, p, q in [(0.01, 0.02, 0.1, 0.05), (0.03, 0.01, 0.4, -0.1), (0.02, 0.05, 0.0, 0.2)]:
        sol = solve_powerflow(model_from_dict(cases.two_bus(z_pu=(r, x), load_pu=(p, q))))
        b = 2 * (r * p + x * q) - 1
        c = (r * r + x * x) * (p * p + q * q)
        v2 = math.sqrt((-b + math.sqrt(b * b - 4 * c)) / 2)
        assert np.max(np.abs(np.abs(sol.state.bus("b1")) - v2)) < 1e-8


def test_twin_baseload(twin_model, twin_solution):
    assert twin_solution.iterations <= 15
    for bus in twin_model.buses:
        if bus.base_voltage == 11000.0:
            vm = np.abs(twin_solution.state.bus(bus.id))
            assert np.all((vm >= 0.94) & (vm <= 1.06))


def test_power_balance(solar_twin):
    sol = solve_powerflow(solar_twin)
    supplied = sol.slack_injection.sum()
    gen = sum(sol.device_powers[g.id].sum() for g in solar_twin.generators)
    load = sum(sol.device_powers[d.id].sum() for d in solar_twin.loads)
    lost = sum(f.sum() + t.sum() for f, t in sol.branch_flows.values())
    assert abs(supplied + gen - load - lost) < 1e-8
    assert lost.real > 0


def test_branch_flows_match_state(twin_model, twin_solution):
    from gridtwin.netmodel import build_admittance

    idx = twin_solution.state.index()
    v = twin_solution.state.values
    for bid, br in build_admittance(twin_model).items():
        uf = np.array([v[idx[(br.from_bus, p)]] for p in br.from_phases])
        ut = np.array([v[idx[(br.to_bus, p)]] for p in br.to_phases])
        sf = uf * np.conj(br.y_ff @ uf + br.y_ft @ ut)
        st = ut * np.conj(br.y_tf @ uf + br.y_tt @ ut)
        f, t = twin_solution.branch_flows[bid]
        assert np.max(np.abs(sf - f)) < 1e-10
        assert np.max(np.abs(st - t)) < 1e-10


def test_gauge_rotation(twin_model, twin_solution):
    theta = np.deg2rad(30.0)
    rotated = with_slack_voltage(twin_model, np.array(twin_model.slack_voltage) * np.exp(1j * theta))
    sol = solve_powerflow(rotated)
    assert np.allclose(sol.state.values, twin_solution.state.values * np.exp(1j * theta), atol=1e-9)
    for k, (f, t) in twin_solution.branch_flows.items():
        f2, t2 = sol.branch_flows[k]
        assert np.allclose(f, f2, atol=1e-9) and np.allclose(t, t2, atol=1e-9)


def test_jacobian_finite_differences(solar_twin):
    net = Network.build(solar_twin)
    rng = np.random.default_rng(4)
    s = net.specified_injections()
    n = len(net.pq)
    for _ in range(3):
        v = net.no_load_voltages(np.asarray(solar_twin.slack_voltage))
        v[net.pq] *= 1 + 0.02 * (rng.normal(size=n) + 1j * rng.normal(size=n))
        jac = mismatch_jacobian(net, v)
        fd = np.empty_like(jac)
        h = 1e-6
        for j in range(2 * n):
            dv = np.zeros(len(v), complex)
            dv[net.pq[j % n]] = h if j < n else 1j * h
            fd[:, j] = (mismatch(net, v + dv, s) - mismatch(net, v - dv, s)) / (2 * h)
        assert np.linalg.norm(fd - jac) / np.linalg.norm(jac) < 1e-6


def test_sensitivity_signs_and_shape(twin_model, twin_solution):
    m = linearize(twin_model, twin_solution, cases.SOLAR_BUS)
    assert m.matrix.shape == (len(twin_model.nodes()), 2)
    rows = m.rows(cases.SOLAR_BUS)
    assert np.all(m.matrix[rows, 0] > 0)
    assert np.all(m.matrix[rows, 1] > 0)
    # the slack does not move
    slack_rows = m.rows(twin_model.slack_bus)
    assert np.all(m.matrix[slack_rows] == 0)


def test_linearization_error_shrinks(twin_model, twin_solution):
    m = linearize(twin_model, twin_solution, cases.SOLAR_BUS)
    v0 = twin_solution.state.magnitudes
    err = []
    for kw in (200.0, 100.0):
        p = kw * 1e3 / twin_model.power_base
        exact = solve_powerflow(with_injection(twin_model, cases.SOLAR_BUS, p, 0.0)).state.magnitudes - v0
        pred = predict_voltages(m, v0, p, 0.0) - v0
        err.append(np.linalg.norm(pred - exact))
        assert err[-1] / np.linalg.norm(exact) <= 0.10
    # second-order remainder: halving the step at least halves the error
    assert err[1] <= err[0] / 2


def test_predict_voltages_affine(twin_model, twin_solution):
    m = linearize(twin_model, twin_solution, cases.SOLAR_BUS)
    v = twin_solution.state.magnitudes
    assert np.array_equal(predict_voltages(m, v, 0.0, 0.0), v)
    zero = np.zeros_like(v)
    one = predict_voltages(m, zero, 0.3, -0.1)
    assert np.array_equal(predict_voltages(m, zero, 0.6, -0.2), 2 * one)
    shifted = predict_voltages(m, v, 0.6, -0.2) - v
    assert np.allclose(shifted, 2 * (predict_voltages(m, v, 0.3, -0.1) - v), rtol=0, atol=1e-15)
    with pytest.raises(ValueError, match="dimension"):
        predict_voltages(m, v[:-1], 0.1, 0.0)


def test_linearize_requires_converged(twin_model, twin_solution):
    from dataclasses import replace

    bad = replace(twin_solution, converged=False)
    with pytest.raises(PowerFlowError):
        linearize(twin_model, bad, cases.SOLAR_BUS)


def test_slack_from_line_voltages():
    v = slack_from_line_voltages(11000, 11000, 11000, base_voltage=11000)
    assert np.allclose(np.abs(v), 1.0, atol=1e-12)
    assert np.allclose(np.degrees(np.angle(v)), [0, -120, 120], atol=1e-9)
    with pytest.raises(ValueError):
        slack_from_line_voltages(0, 11000, 11000)
    with pytest.raises(ValueError, match="triangle"):
        slack_from_line_voltages(1000, 5000, 11000)
    lines = np.array([11050.0, 10980.0, 11010.0])
    v = slack_from_line_voltages(*lines)
    back = np.abs([v[0] - v[1], v[1] - v[2], v[2] - v[0]])
    assert np.max(np.abs(back / lines - 1)) < 1e-3


def test_non_convergence_reports_history():
    doc = cases.two_bus(load_pu=(30.0, 15.0))
    with pytest.raises(PowerFlowError) as info:
        solve_powerflow(model_from_dict(doc), max_iter=20)
    assert len(info.value.history) == 21
    assert "b1" in str(info.value)


def test_injection_override_keys():
    model = twin()
    with pytest.raises(NetworkError, match="undeclared"):
        solve_powerflow(model, injections={"nosuch": [0, 0, 0]})


def test_tap_moves_lv_voltage():
    base = twin()
    moved = twin(taps={"tx10": 2})
    lv = base.transformer("tx10").to_bus
    v0 = np.abs(solve_powerflow(base).state.bus(lv))
    v2 = np.abs(solve_powerflow(moved).state.bus(lv))
    assert np.all(v2 < v0)
    assert model_to_dict(moved)["transformers"][9]["tap"]["position"] == 2
