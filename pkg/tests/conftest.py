"""Shared fixtures and builders for the test suite."""

import dataclasses

import numpy as np
import pandas as pd
import pytest

from gridtwin import cases
from gridtwin.cli import default_meters, synthetic_solutions
from gridtwin.dsse import _evaluate, _measurement_arrays, flat_start
from gridtwin.netmodel import model_from_dict
from gridtwin.powerflow import solve_powerflow
from gridtwin.telemetry import (
    PHASE_VOLTAGE_CHANNELS,
    RAW_MEASURANDS,
    SYNTHETIC_MEASURANDS,
    MeasurementSeries,
    MeterSpec,
    synthesize_measurements,
)

# acceptance results collected by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, float, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, secs, text = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} ({secs:.2f} s) {text}")


# --------------------------------------------------------------------------
# builders


def twin(solar_kw=0.0, load_scale=1.0, taps=None):
    return model_from_dict(cases.twin33(solar_kw=solar_kw, load_scale=load_scale, tap_offsets=taps))


def chain(n=6, **kw):
    return model_from_dict(cases.radial_chain(n, **kw))


def stamps(n, start="2024-06-01 10:00", freq="30min"):
    return pd.date_range(start, periods=n, freq=freq, tz="UTC")


def measure(model, meters, seed=0, sigma_scale=1.0, solutions=None, timestamps=None):
    """Synthetic meter readings of the model's own power flow (one timestamp by default)."""
    if solutions is None:
        solutions = [solve_powerflow(model)]
    if timestamps is None:
        timestamps = stamps(len(solutions))
    return synthesize_measurements(solutions, meters, seed=seed, timestamps=timestamps, sigma_scale=sigma_scale)


def tail_meters(model):
    """Chain meters: full at n0 and n1, voltage only at n2, n4, n5; n3 unmetered."""
    vph = 11000 / np.sqrt(3)
    m = {
        "m0": MeterSpec("m0", "n0", vph, 200.0, SYNTHETIC_MEASURANDS),
        "m1": MeterSpec("m1", "n1", vph, 50.0, SYNTHETIC_MEASURANDS, device="d1"),
    }
    for k in (2, 4, 5):
        m[f"m{k}"] = MeterSpec(f"m{k}", f"n{k}", vph, 50.0, PHASE_VOLTAGE_CHANNELS)
    return m


def tap_fixture_meters(model):
    """Raw meters everywhere; the ld14 meter records line voltages only."""
    meters = default_meters(model, "raw")
    meters["m_ld14"] = dataclasses.replace(meters["m_ld14"], device=None, measurands=RAW_MEASURANDS[:3])
    return meters


def tap_fixture(offsets, sigma_scale=0.0, seed=1):
    """Measurements of a twin whose taps are ``offsets``, to fit with all taps at zero."""
    truth = twin(solar_kw=2000, taps=offsets)
    meters = tap_fixture_meters(truth)
    ts = pd.date_range("2024-06-01 06:00", periods=3, freq="4h", tz="UTC")
    sols = synthetic_solutions(truth, ts)
    series = synthesize_measurements(sols, meters, seed=seed, timestamps=ts, sigma_scale=sigma_scale)
    return twin(solar_kw=2000), series, meters


def quality_frame(seed, n=720, meter="m1"):
    """One clean raw meter: daily shapes plus small independent noise on every channel."""
    rng = np.random.default_rng(seed)
    ts = pd.date_range("2024-03-01", periods=n, freq="120s", tz="UTC")
    h = np.arange(n) * 120 / 3600
    shape = 1 + 0.3 * np.sin(2 * np.pi * (h - 6) / 24) + 0.05 * np.sin(2 * np.pi * h / 3.1 + seed)
    cols = {}
    for ch in RAW_MEASURANDS:
        if ch.startswith("v_"):
            x = 11000 * (1 + 0.01 * np.sin(2 * np.pi * h / 24 + rng.uniform(0, 6))) + rng.normal(0, 8, n)
        elif ch.startswith("i_"):
            x = 60 * shape * rng.uniform(0.9, 1.1) + rng.normal(0, 0.3, n)
        elif ch == "p_tot":
            x = 1.1e6 * shape + rng.normal(0, 4e3, n)
        else:
            x = 3.5e5 * shape + rng.normal(0, 2e3, n)
        cols[(meter, ch)] = x
    frame = pd.DataFrame(cols, index=ts)
    frame.columns = pd.MultiIndex.from_tuples(frame.columns)
    return frame


def stuck_fixture(seed=7):
    f = quality_frame(seed)
    col = f.columns.get_loc(("m1", "i_a"))
    f.iloc[200:500, col] = f.iloc[200, col]
    return MeasurementSeries(f, cadence=120.0)


def stepped_fixture(seed=8, deadband=0.03):
    """p_tot reported only when it moves by more than the deadband."""
    f = quality_frame(seed)
    x = f[("m1", "p_tot")].to_numpy()
    y = x.copy()
    last = x[0]
    for k in range(len(x)):
        if abs(x[k] - last) >= deadband * abs(last):
            last = x[k]
        y[k] = last
    f[("m1", "p_tot")] = y
    return MeasurementSeries(f, cadence=120.0)


def gross_fixture(seed=9, at=333):
    f = quality_frame(seed)
    f.iloc[at, f.columns.get_loc(("m1", "v_ab"))] *= 1.3
    return MeasurementSeries(f, cadence=120.0)


def fd_rank_oracle(problem, step=1e-6):
    """Unobservable buses by brute force.

    Finite-difference Jacobian of measurements and constraints at a generic
    point; a bus is unobservable when appending its voltage-change rows (with
    the common-rotation direction removed) raises the rank.
    """
    lay = problem.layout
    z, sigma = _measurement_arrays(problem)
    rng = np.random.default_rng(7)
    x0 = flat_start(problem) + rng.normal(0, 1e-2, lay.nx)

    def stacked(x):
        r, _, c, _, _ = _evaluate(lay, x, z, np.ones_like(sigma), jacobian=False)
        return np.concatenate([r, c])

    def voltages(x):
        return lay.voltages(x)

    cols, vcols = [], []
    for i in range(lay.nx):
        e = np.zeros(lay.nx)
        e[i] = step
        cols.append((stacked(x0 + e) - stacked(x0 - e)) / (2 * step))
        vcols.append((voltages(x0 + e) - voltages(x0 - e)) / (2 * step))
    G = np.column_stack(cols)
    G = G[np.linalg.norm(G, axis=1) > 0]
    G = G / np.linalg.norm(G, axis=1)[:, None]
    dV = np.column_stack(vcols)  # complex node voltage change per parameter
    v0 = voltages(x0)
    tol = 1e-7
    base = np.linalg.matrix_rank(G, tol=tol)
    unobs = set()
    index = lay.net.index
    for bus in problem.model.bus_ids:
        k = [index[(bus, p)] for p in problem.model.bus(bus).phases]
        rows = np.vstack([dV[k].real, dV[k].imag])
        rot = np.concatenate([(1j * v0[k]).real, (1j * v0[k]).imag])
        rot /= np.linalg.norm(rot)
        rows = rows - np.outer(rot, rot @ rows)
        rows = rows[np.linalg.norm(rows, axis=1) > 1e-9]
        if len(rows) == 0:
            continue
        rows = rows / np.linalg.norm(rows, axis=1)[:, None]
        if np.linalg.matrix_rank(np.vstack([G, rows]), tol=tol) > base:
            unobs.add(bus)
    return unobs


# --------------------------------------------------------------------------
# fixtures


@pytest.fixture(scope="session")
def twin_model():
    return twin()


@pytest.fixture(scope="session")
def twin_solution(twin_model):
    return solve_powerflow(twin_model)


@pytest.fixture(scope="session")
def solar_twin():
    return twin(solar_kw=3000)


@pytest.fixture(scope="session")
def synthetic_meters(twin_model):
    return default_meters(twin_model, "synthetic")


@pytest.fixture(scope="session")
def raw_meters(twin_model):
    return default_meters(twin_model, "raw")
