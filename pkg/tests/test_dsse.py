import math
import warnings

import numpy as np
import pytest

from conftest import chain, fd_rank_oracle, measure, stamps, tap_fixture, twin
from gridtwin import cases
from gridtwin.cli import default_meters
from gridtwin.dsse import (
    DsseError,
    MissingChannelError,
    assemble_problem,
    estimate_state,
    objective,
    objective_gradient,
    observability_analysis,
    residual_report,
    tap_sweep,
)
from gridtwin.netmodel import model_from_dict
from gridtwin.powerflow import solve_powerflow
from gridtwin.telemetry import (
    PHASE_VOLTAGE_CHANNELS,
    RAW_MEASURANDS,
    SYNTHETIC_MEASURANDS,
    MeasurementSeries,
    MeterSpec,
    detect_quality_issues,
    phase_power_tolerance,
)

VPH = 11000 / math.sqrt(3)


def _two_bus(load_pu=(0.1, 0.05)):
    return model_from_dict(cases.two_bus(load_pu=load_pu))


def _two_bus_meters(measurands=SYNTHETIC_MEASURANDS, rated=20.0):
    return {"src": MeterSpec("src", "b0", VPH, rated, measurands),
            "ld": MeterSpec("ld", "b1", VPH, rated, measurands, device="ld1")}


def _full(k, measurands=SYNTHETIC_MEASURANDS):
    return MeterSpec(f"m{k}", f"n{k}", VPH, 50.0, measurands, device=(f"d{k}" if k else None))


def _volts(k):
    return MeterSpec(f"m{k}", f"n{k}", VPH, 50.0, PHASE_VOLTAGE_CHANNELS)


def _problem(model, meters, seed=0, sigma_scale=1.0, mode="synthetic", **kw):
    series = measure(model, meters, seed=seed, sigma_scale=sigma_scale)
    return assemble_problem(model, series, series.timestamps[0], meters, mode=mode, **kw)


@pytest.fixture(scope="module")
def chain_full():
    model = chain(5)
    return model, {f"m{k}": _full(k) for k in range(5)}


# --------------------------------------------------------------------------
# assembly


def test_measurement_counts():
    model = _two_bus()
    p = _problem(model, _two_bus_meters())
    # three phase voltages and six per-phase powers at each meter
    assert len(p.measurements) == 18
    kinds = [m.kind for m in p.measurements]
    assert kinds.count("phase_voltage_magnitude") == 6
    assert {m.device for m in p.measurements if m.kind == "p_phase"} == {"grid", "ld1"}
    raw = _problem(model, _two_bus_meters(RAW_MEASURANDS), mode="raw_send")
    assert len(raw.measurements) == 18
    assert raw.gauge == "zero_sequence" and p.gauge == "star"


def test_stuck_current_noted_in_provenance():
    model = _two_bus()
    meters = _two_bus_meters(RAW_MEASURANDS)
    sol = solve_powerflow(model)
    ts = stamps(40, freq="2min")
    series = measure(model, meters, seed=3, solutions=[sol] * 40, timestamps=ts)
    frame = series.frame.copy()
    frame[("ld", "i_a")] = frame[("ld", "i_a")].iloc[0]
    series = MeasurementSeries(frame, cadence=120.0)
    quality = detect_quality_issues(series)
    assert "stuck" in quality.flags("ld", "i_a")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        p = assemble_problem(model, series, ts[5], meters, mode="raw_send", quality=quality)
    split = [m for m in p.measurements if m.meter_id == "ld" and m.kind == "p_phase"]
    assert len(split) == 3
    assert all("(i_a stuck)" in m.provenance for m in split)


def test_power_sigma_floored_at_low_current():
    model = _two_bus(load_pu=(1e-4, 0.0))
    meters = _two_bus_meters()
    p = _problem(model, meters, sigma_scale=0.0)
    sb = model.power_base / 3
    floor = phase_power_tolerance(meters["ld"], 0.0) / 3 / sb
    ps = [m for m in p.measurements if m.meter_id == "ld" and m.kind == "p_phase"]
    assert floor > 0
    assert all(m.sigma == pytest.approx(floor, rel=1e-12) for m in ps)


def test_missing_nan_sample_excluded_with_warning():
    model = _two_bus()
    meters = _two_bus_meters()
    series = measure(model, meters)
    series.frame.iloc[0, series.frame.columns.get_loc(("ld", "v_b"))] = np.nan
    with pytest.warns(RuntimeWarning, match="v_b excluded"):
        p = assemble_problem(model, series, series.timestamps[0], meters)
    assert len(p.measurements) == 17
    assert p.excluded == [("ld", "v_b", "missing")]


def test_missing_channel_raises():
    model = _two_bus()
    series = measure(model, _two_bus_meters(PHASE_VOLTAGE_CHANNELS))
    with pytest.raises(MissingChannelError, match="p_a"):
        assemble_problem(model, series, series.timestamps[0], _two_bus_meters())
    with pytest.raises(MissingChannelError, match="timestamp"):
        assemble_problem(model, series, "1999-01-01", _two_bus_meters(PHASE_VOLTAGE_CHANNELS))


# --------------------------------------------------------------------------
# estimation


def test_noiseless_recovery(chain_full):
    model, meters = chain_full
    truth = solve_powerflow(model, tol=1e-12)
    series = measure(model, meters, sigma_scale=0.0, solutions=[truth])
    p = assemble_problem(model, series, series.timestamps[0], meters)
    est = estimate_state(p)
    assert est.converged and est.objective < 1e-12
    assert np.max(np.abs(est.state.values - truth.state.values)) < 1e-7
    df = residual_report(est)
    assert np.max(np.abs(df["residual_pu"])) <= 1e-8
    for load in model.loads:
        assert np.allclose(est.device_powers[load.id], truth.device_powers[load.id], atol=1e-7)


def test_corrupted_measurement_stands_out(chain_full):
    model, meters = chain_full
    series = measure(model, meters, seed=5)
    col = series.frame.columns.get_loc(("m3", "v_b"))
    series.frame.iloc[0, col] *= 1.10
    p = assemble_problem(model, series, series.timestamps[0], meters)
    est = estimate_state(p)
    worst = int(np.argmax(np.abs(est.residuals)))
    assert (p.measurements[worst].meter_id, p.measurements[worst].channel) == ("m3", "v_b")


def test_gradient_vanishes_at_solution(chain_full):
    model, meters = chain_full
    p = _problem(model, meters, seed=2)
    est = estimate_state(p)
    assert est.converged
    # weighted Jacobian entries are O(1e4), so judge the gradient against its start
    assert est.gradient_norm < 1e-10 * est.history[0]["gradient_norm"]
    assert est.history[-1]["gradient_norm"] == est.gradient_norm
    assert objective(p, est.x) == pytest.approx(est.objective, rel=1e-12)
    assert objective_gradient(p, est.x).shape == est.x.shape


def test_weight_scaling_keeps_minimiser(chain_full):
    model, meters = chain_full
    p = _problem(model, meters, seed=4)
    est = estimate_state(p)
    k = 3.0
    scaled = estimate_state(p.with_sigma_scale(k))
    assert np.max(np.abs(scaled.x - est.x)) < 1e-8
    assert scaled.objective == pytest.approx(est.objective / k**2, rel=1e-8)


def test_line_voltage_measurement_function():
    model = twin()
    meters = default_meters(model, "raw")
    p = _problem(model, meters, seed=1, mode="raw_send")
    est = estimate_state(p)
    pairs = ("ab", "bc", "ca")
    lines = [(k, m) for k, m in enumerate(p.measurements) if m.kind == "line_voltage_magnitude"]
    assert lines
    for k, m in lines:
        u = est.state.line_voltages(m.bus)[pairs.index(m.phase)]
        assert est.estimated[k] == pytest.approx(abs(u) / math.sqrt(3), rel=1e-12)


def test_reference_angle_only_rotates(chain_full):
    model, meters = chain_full
    p = _problem(model, meters, seed=6)
    a = estimate_state(p)
    b = estimate_state(p.with_reference_angle(30.0))
    assert b.objective == pytest.approx(a.objective, rel=1e-9, abs=1e-12)
    assert np.allclose(b.state.values, a.state.values * np.exp(1j * np.deg2rad(30.0)), atol=1e-8)
    for dev, s in a.device_powers.items():
        assert np.allclose(b.device_powers[dev], s, atol=1e-8)


def test_non_convergence_reports_gradient_history(chain_full):
    model, meters = chain_full
    p = _problem(model, meters, seed=1)
    with pytest.raises(DsseError) as info:
        estimate_state(p, max_iter=1, tol=1e-30)
    assert len(info.value.history) >= 2
    est = estimate_state(p, max_iter=1, tol=1e-30, raise_on_failure=False)
    assert not est.converged


# --------------------------------------------------------------------------
# observability


def test_fully_metered_chain_is_observable(chain_full):
    model, meters = chain_full
    p = _problem(model, meters)
    rep = observability_analysis(p)
    assert rep.unobservable == set() == fd_rank_oracle(p)
    assert set(rep.observable) == set(model.bus_ids)


def test_leaf_behind_voltage_only_bus():
    model = chain(5)
    meters = {**{f"m{k}": _full(k) for k in range(3)}, "m3": _volts(3)}
    p = _problem(model, meters)
    rep = observability_analysis(p)
    assert rep.unobservable == {"n4"} == fd_rank_oracle(p)


def test_metered_islands_keep_their_own_angle():
    model = chain(9)
    meters = {f"m{k}": _full(k) for k in (0, 1, 2, 6, 7, 8)}
    p = _problem(model, meters)
    rep = observability_analysis(p)
    assert rep.unobservable == {"n4"} == fd_rank_oracle(p)
    est = estimate_state(p, max_iter=300)
    assert est.converged
    observability_analysis(p, est)
    assert est.labels["n4"] == "unobservable" and est.labels["n7"] == "observable"
    doc = rep.to_dict()
    assert doc["n_parameters"] == rep.n_parameters
    assert {b["bus"] for b in doc["buses"] if b["label"] == "unobservable"} == {"n4"}


# --------------------------------------------------------------------------
# tap sweep


def test_tap_sweep_fixed_point_at_true_taps():
    model, series, meters = tap_fixture({})
    fitted, rep = tap_sweep(model, series, meters)
    assert all(v == 0 for v in rep.taps_after.values())
    assert rep.rms_after == rep.rms_before
    assert fitted is model


def test_tap_sweep_two_feeders():
    offsets = {"tx05": 3, "tx10": -2}
    model, series, meters = tap_fixture(offsets)
    fitted, rep = tap_sweep(model, series, meters)
    assert {k: v for k, v in rep.taps_after.items() if v} == offsets
    assert rep.improvement > 5
    assert fitted.transformer("tx10").tap_position == -2
    assert set(rep.scatter.columns) >= {"measured", "simulated_before", "simulated_after"}


def test_tap_sweep_respects_bounds():
    model, series, meters = tap_fixture({"tx05": 3})
    _, rep = tap_sweep(model, series, meters, transformer_subset=["tx05"], tap_bounds=(-1, 1))
    assert rep.taps_after == {"tx05": 1}
