"""Weighted-least-squares distribution state estimation.

The state is the vector of real and imaginary node voltages (with a gauge-fixed
parameterisation of the slack phasors) plus the powers of devices that are not
eliminated. At every bus that hosts devices one device is *dependent*: its power is
whatever the bus power balance requires, so the power-flow equations hold by
construction. Buses without devices get exact zero-injection constraints, handled
in a KKT system inside a Levenberg-Marquardt loop.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .netmodel import NetworkModel, apply_tap
from .powerflow import (
    Network,
    PowerFlowError,
    VoltageState,
    power_jacobian,
    slack_from_line_voltages,
    solve_powerflow,
)
from .telemetry import (
    MeasurementSeries,
    MeterSpec,
    QualityReport,
    TelemetryError,
    phase_power_tolerance,
    split_total_power,
    voltage_tolerance,
)

log = logging.getLogger(__name__)

KINDS = ("line_voltage_magnitude", "phase_voltage_magnitude", "p_phase", "q_phase")
GRID = "grid"  # implicit device supplying the slack bus
RESIDUAL_ZERO_THRESHOLD = 6e-5
NULL_SPACE_THRESHOLD = 1e-6
_SQRT3 = math.sqrt(3.0)
_SHIFT = {"a": 0.0, "b": -120.0, "c": 120.0}
# slack parameterisations: "star" fixes every slack angle to the reference star and
# frees the magnitudes; "angle" fixes only phase a's angle; "zero_sequence" also
# ties phase c to -(a + b), for data that carries line voltages only
GAUGES = ("star", "angle", "zero_sequence")


class DsseError(RuntimeError):
    """Estimation failed; ``history`` holds the gradient-norm trajectory."""

    def __init__(self, message: str, history=()):
        super().__init__(message)
        self.history = list(history)


class MissingChannelError(TelemetryError):
    pass


@dataclass(frozen=True)
class MeasurementFunction:
    kind: str
    bus: str
    phase: str  # "a".."c", or "ab"/"bc"/"ca" for line voltages
    value: float  # pu
    sigma: float  # pu
    device: str | None = None
    meter_id: str = ""
    channel: str = ""
    provenance: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown measurement kind {self.kind!r}")
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ValueError(f"invalid sigma {self.sigma!r} for {self.meter_id}/{self.channel}")
        if not math.isfinite(self.value):
            raise ValueError(f"non-finite value for {self.meter_id}/{self.channel}")
        if self.kind == "line_voltage_magnitude" and self.phase not in ("ab", "bc", "ca"):
            raise ValueError(f"line voltage pair must be ab, bc or ca, not {self.phase!r}")
        if self.kind != "line_voltage_magnitude" and self.phase not in "abc":
            raise ValueError(f"bad phase {self.phase!r}")
        if self.kind in ("p_phase", "q_phase") and self.device is None:
            raise ValueError("power measurement needs a device")

    def scaled(self, factor: float) -> "MeasurementFunction":
        return MeasurementFunction(self.kind, self.bus, self.phase, self.value, self.sigma * factor,
                                   self.device, self.meter_id, self.channel, self.provenance)


# --------------------------------------------------------------------------
# problem layout


@dataclass(eq=False)
class DsseProblem:
    model: NetworkModel
    measurements: list[MeasurementFunction]
    gauge: str = "star"  # see GAUGES
    reference_angle: float = 0.0  # degrees, phase a of the slack
    timestamp: pd.Timestamp | None = None
    mode: str = "synthetic"
    excluded: list[tuple[str, str, str]] = field(default_factory=list)  # meter, channel, reason
    _layout: "_Layout | None" = field(default=None, repr=False)

    def __post_init__(self):
        if self.gauge not in GAUGES:
            raise ValueError(f"unknown gauge {self.gauge!r}")
        buses = set(self.model.bus_ids)
        for m in self.measurements:
            if m.bus not in buses:
                raise ValueError(f"measurement {m.meter_id}/{m.channel}: unknown bus {m.bus!r}")
            if m.device not in (None, GRID):
                self.model.device(m.device)
        if not self.measurements:
            warnings.warn("state estimation problem has no measurements", RuntimeWarning, stacklevel=2)

    @property
    def layout(self) -> "_Layout":
        if self._layout is None:
            self._layout = _Layout(self)
        return self._layout

    def with_sigma_scale(self, factor: float) -> "DsseProblem":
        return DsseProblem(self.model, [m.scaled(factor) for m in self.measurements], self.gauge,
                           self.reference_angle, self.timestamp, self.mode, list(self.excluded))

    def with_reference_angle(self, angle_deg: float) -> "DsseProblem":
        return DsseProblem(self.model, list(self.measurements), self.gauge, angle_deg,
                           self.timestamp, self.mode, list(self.excluded))


class _Layout:
    """Maps the parameter vector to node voltages and device powers."""

    def __init__(self, problem: DsseProblem):
        model = problem.model
        net = Network.build(model)
        self.net = net
        n = len(net.nodes)
        self.n = n
        slack = list(net.slack)
        self.slack_nodes = slack
        theta = math.radians(problem.reference_angle)
        cols: list[np.ndarray] = []

        def col():
            c = np.zeros(2 * n)
            cols.append(c)
            return c

        if problem.gauge == "star":
            for k in slack:
                ang = theta + math.radians(_SHIFT[net.nodes[k][1]])
                c = col()
                c[k], c[n + k] = math.cos(ang), math.sin(ang)
            slack = []
        # slack: phase a pinned to the reference angle, magnitude free
        a = slack[0] if slack else None
        if a is not None:
            c = col()
            c[a], c[n + a] = math.cos(theta), math.sin(theta)
            rho_col = len(cols) - 1
        rest = slack[1:]
        if problem.gauge == "zero_sequence" and len(slack) == 3:
            b, cc = rest
            ce, cf = col(), col()
            ce[b], ce[cc] = 1.0, -1.0
            cf[n + b], cf[n + cc] = 1.0, -1.0
            cols[rho_col][cc] -= math.cos(theta)
            cols[rho_col][n + cc] -= math.sin(theta)
        else:
            for k in rest:
                ce, cf = col(), col()
                ce[k], cf[n + k] = 1.0, 1.0
        slack = self.slack_nodes
        self.slack_params = len(cols)
        self.node_cols = {}
        for k in net.pq:
            self.node_cols[int(k)] = len(cols)
            ce, cf = col(), col()
            ce[k], cf[n + k] = 1.0, 1.0
        self.T = np.column_stack(cols)
        self.nv = self.T.shape[1]

        # devices: sign +1 for generation, -1 for demand
        measured = {(m.device, m.phase) for m in problem.measurements if m.kind in ("p_phase", "q_phase")}
        at_node: dict[int, list[tuple[str, int]]] = {}
        for k in slack:
            at_node[k] = [(GRID, 1)]
        for dev, sign in [(d, -1) for d in model.loads] + [(g, 1) for g in model.generators]:
            for p, k in zip(dev.phases, net.device_nodes(dev)):
                at_node.setdefault(k, []).append((dev.id, sign))
        self.dependent: dict[tuple[str, str], tuple[int, int]] = {}  # (dev, phase) -> (node, sign)
        self.explicit: dict[tuple[str, str], int] = {}  # (dev, phase) -> index of P in x
        self.node_explicit: dict[int, list[tuple[int, int]]] = {}  # node -> [(x index, sign)]
        nd = 0
        for k in sorted(at_node):
            phase = net.nodes[k][1]
            devs = at_node[k]
            dep = next((d for d in devs if (d[0], phase) not in measured), devs[0])
            self.dependent[(dep[0], phase)] = (k, dep[1])
            for d in devs:
                if d is dep:
                    continue
                self.explicit[(d[0], phase)] = self.nv + nd
                self.node_explicit.setdefault(k, []).append((self.nv + nd, d[1]))
                nd += 2
        self.nd = nd
        self.nx = self.nv + nd
        self.zero_nodes = np.array([k for k in range(n) if k not in at_node], dtype=int)
        self.bus_cols: dict[str, list[int]] = {}
        for bus in model.bus_ids:
            if bus == model.slack_bus:
                self.bus_cols[bus] = list(range(self.slack_params))
            else:
                ks = [net.index[(bus, p)] for p in model.bus(bus).phases]
                self.bus_cols[bus] = [j for k in ks for j in (self.node_cols[k], self.node_cols[k] + 1)]
        self._compile(problem.measurements)

    def _compile(self, measurements):
        idx = self.net.index
        self.rows = []
        for m in measurements:
            if m.kind == "phase_voltage_magnitude":
                self.rows.append(("v", idx[(m.bus, m.phase)], None))
            elif m.kind == "line_voltage_magnitude":
                self.rows.append(("vll", idx[(m.bus, m.phase[0])], idx[(m.bus, m.phase[1])]))
            else:
                dev = GRID if m.device is None else m.device
                part = 0 if m.kind == "p_phase" else 1
                key = (dev, m.phase)
                if key in self.explicit:
                    self.rows.append(("x", self.explicit[key] + part, None))
                elif key in self.dependent:
                    self.rows.append(("dep", key, part))
                else:
                    raise ValueError(f"measurement {m.meter_id}/{m.channel}: device {dev} has no phase {m.phase}")

    def voltages(self, x: np.ndarray) -> np.ndarray:
        ef = self.T @ x[: self.nv]
        return ef[: self.n] + 1j * ef[self.n :]

    def params_from_voltages(self, v: np.ndarray) -> np.ndarray:
        ef = np.concatenate([v.real, v.imag])
        sol, *_ = np.linalg.lstsq(self.T, ef, rcond=None)
        return sol

    def device_power(self, x, s, key) -> complex:
        """Per-phase pu power of a device (device sign convention)."""
        if key in self.explicit:
            j = self.explicit[key]
            return complex(x[j], x[j + 1])
        k, sign = self.dependent[key]
        total = s[k] - sum(sg * complex(x[j], x[j + 1]) for j, sg in self.node_explicit.get(k, []))
        return sign * total


def _evaluate(layout: _Layout, x: np.ndarray, z: np.ndarray, sigma: np.ndarray, jacobian: bool = True):
    """Weighted residuals, their Jacobian, constraint values and constraint Jacobian."""
    v = layout.voltages(x)
    ybus = layout.net.ybus
    s = v * np.conj(ybus @ v)
    n, nv, nx = layout.n, layout.nv, layout.nx
    h = np.empty(len(layout.rows))
    H = np.zeros((len(layout.rows), nx)) if jacobian else None
    if jacobian:
        dS_de, dS_df = power_jacobian(ybus, v)
        T = layout.T
        dS = dS_de @ T[:n] + dS_df @ T[n:]  # complex (n, nv)
    for r, (kind, a, b) in enumerate(layout.rows):
        if kind == "v":
            mag = abs(v[a])
            h[r] = mag
            if jacobian:
                H[r, :nv] = (v[a].real * layout.T[a] + v[a].imag * layout.T[n + a]) / mag
        elif kind == "vll":
            d = v[a] - v[b]
            mag = abs(d)
            h[r] = mag / _SQRT3
            if jacobian:
                H[r, :nv] = (d.real * (layout.T[a] - layout.T[b]) + d.imag * (layout.T[n + a] - layout.T[n + b])) / (mag * _SQRT3)
        elif kind == "x":
            h[r] = x[a]
            if jacobian:
                H[r, a] = 1.0
        else:
            key, part = a, b
            val = layout.device_power(x, s, key)
            h[r] = val.real if part == 0 else val.imag
            if jacobian:
                k, sign = layout.dependent[key]
                row = dS[k].real if part == 0 else dS[k].imag
                H[r, :nv] = sign * row
                for j, sg in layout.node_explicit.get(k, []):
                    H[r, j + part] -= sign * sg
    res = (h - z) / sigma
    zn = layout.zero_nodes
    c = np.concatenate([s[zn].real, s[zn].imag])
    if not jacobian:
        return res, None, c, None, h
    J = H / sigma[:, None]
    A = np.zeros((2 * len(zn), nx))
    A[: len(zn), :nv] = dS[zn].real
    A[len(zn) :, :nv] = dS[zn].imag
    return res, J, c, A, h


def _measurement_arrays(problem: DsseProblem):
    z = np.array([m.value for m in problem.measurements], dtype=float)
    sigma = np.array([m.sigma for m in problem.measurements], dtype=float)
    return z, sigma


# --------------------------------------------------------------------------
# assembly from meter data


def _vbase(model: NetworkModel, bus: str) -> float:
    return model.bus(bus).base_voltage


def assemble_problem(
    model: NetworkModel,
    series: MeasurementSeries,
    timestamp,
    meters: Mapping[str, MeterSpec],
    mode: str = "synthetic",
    quality: QualityReport | None = None,
    gauge: str | None = None,
    reference_angle: float = 0.0,
) -> DsseProblem:
    """Measurement functions for one timestamp.

    ``raw_send`` uses line-voltage magnitudes and three-phase totals split between
    phases by current magnitude; ``synthetic`` uses phase voltages and per-phase
    powers. Quality-flagged or missing samples are left out with a warning.
    """
    if mode not in ("raw_send", "synthetic"):
        raise ValueError(f"mode must be 'raw_send' or 'synthetic', not {mode!r}")
    ts = pd.Timestamp(timestamp)
    if ts.tzinfo is None:
        ts = ts.tz_localize("UTC")
    if ts not in series.frame.index:
        raise MissingChannelError(f"timestamp {ts} not in series")
    row = series.frame.loc[ts]
    sb = model.power_base / 3
    out: list[MeasurementFunction] = []
    excluded: list[tuple[str, str, str]] = []

    def fetch(meter: MeterSpec, ch: str):
        if (meter.meter_id, ch) not in row.index:
            raise MissingChannelError(f"meter {meter.meter_id}: channel {ch} missing from series")
        val = float(row[(meter.meter_id, ch)])
        if math.isnan(val):
            excluded.append((meter.meter_id, ch, "missing"))
            return None
        if quality is not None and quality.is_excluded(meter.meter_id, ch, ts):
            excluded.append((meter.meter_id, ch, ",".join(sorted(quality.flags(meter.meter_id, ch))) or "flagged"))
            return None
        return val

    def current_note(meter: MeterSpec, chans) -> str:
        if quality is None:
            return ""
        notes = [f"{c} {','.join(sorted(quality.flags(meter.meter_id, c)))}" for c in chans
                 if quality.flags(meter.meter_id, c) - {"missing"}]
        return "; ".join(notes)

    for meter in meters.values():
        if meter.bus not in model.bus_ids:
            raise ValueError(f"meter {meter.meter_id}: unknown bus {meter.bus!r}")
        phases = model.bus(meter.bus).phases
        vll = _vbase(model, meter.bus)
        vph = vll / _SQRT3
        device = meter.device
        if device is None and meter.bus == model.slack_bus:
            device = GRID
        chans = meter.measurands
        if mode == "raw_send":
            for pq in ("ab", "bc", "ca"):
                ch = f"v_{pq}"
                if ch not in chans:
                    continue
                val = fetch(meter, ch)
                if val is None:
                    continue
                sigma = voltage_tolerance(meter, val) / 3 / vll
                out.append(MeasurementFunction("line_voltage_magnitude", meter.bus, pq, val / vll, sigma,
                                               None, meter.meter_id, ch, "measured"))
            if device is None or not {"p_tot", "q_tot"} & set(chans):
                continue
            currents = []
            for p in "abc":
                ch = f"i_{p}"
                val = float(row[(meter.meter_id, ch)]) if ch in chans and (meter.meter_id, ch) in row.index else math.nan
                currents.append(val)
            have_i = all(math.isfinite(i) for i in currents)
            note = current_note(meter, [f"i_{p}" for p in "abc"])
            for tot, kind, name in (("p_tot", "active", "p_phase"), ("q_tot", "reactive", "q_phase")):
                if tot not in chans:
                    continue
                val = fetch(meter, tot)
                if val is None:
                    continue
                # noise can push a near-zero current reading below zero
                split = split_total_power(val, [abs(i) for i in currents] if have_i else [0.0, 0.0, 0.0])
                prov = f"split {tot} by " + ("i_a,i_b,i_c" if have_i else "equal shares")
                if note:
                    prov += f" ({note})"
                for p, share, cur in zip("abc", split, currents):
                    if p not in phases:
                        continue
                    cur = abs(cur) if math.isfinite(cur) else abs(val) / 3 / vph
                    sigma = phase_power_tolerance(meter, cur, kind) / 3 / sb
                    out.append(MeasurementFunction(name, meter.bus, p, share / sb, sigma, device,
                                                   meter.meter_id, tot, prov))
        else:
            for p in phases:
                ch = f"v_{p}"
                if ch not in chans:
                    continue
                val = fetch(meter, ch)
                if val is None:
                    continue
                sigma = voltage_tolerance(meter, val) / 3 / vph
                out.append(MeasurementFunction("phase_voltage_magnitude", meter.bus, p, val / vph, sigma,
                                               None, meter.meter_id, ch, "measured"))
            if device is None:
                continue
            for p in phases:
                cur = None
                ich = f"i_{p}"
                if ich in chans and (meter.meter_id, ich) in row.index:
                    cur = float(row[(meter.meter_id, ich)])
                for kind, name, prefix in (("active", "p_phase", "p"), ("reactive", "q_phase", "q")):
                    ch = f"{prefix}_{p}"
                    if ch not in chans:
                        continue
                    val = fetch(meter, ch)
                    if val is None:
                        continue
                    if cur is None or not math.isfinite(cur):
                        cur_est = abs(val) / vph
                    else:
                        cur_est = abs(cur)
                    sigma = phase_power_tolerance(meter, cur_est, kind) / 3 / sb
                    out.append(MeasurementFunction(name, meter.bus, p, val / sb, sigma, device,
                                                   meter.meter_id, ch, "measured"))
    for mid, ch, why in excluded:
        warnings.warn(f"meter {mid}: {ch} excluded at {ts} ({why})", RuntimeWarning, stacklevel=2)
    if gauge is None:
        gauge = "zero_sequence" if mode == "raw_send" else "star"
    return DsseProblem(model, out, gauge, reference_angle, ts, mode, excluded)


# --------------------------------------------------------------------------
# estimation


@dataclass(eq=False)
class StateEstimate:
    problem: DsseProblem
    x: np.ndarray
    state: VoltageState
    device_powers: dict[str, np.ndarray]  # per-phase pu in device sign; "grid" for the slack supply
    estimated: np.ndarray  # h(x), pu
    residuals: np.ndarray  # (h - z) / sigma
    objective: float
    iterations: int
    converged: bool
    gradient_norm: float
    constraint_violation: float
    history: list[dict] = field(default_factory=list)
    labels: dict[str, str] = field(default_factory=dict)  # bus -> observable / unobservable

    @property
    def rho(self) -> np.ndarray:
        return self.residuals**2


def _kkt_step(J, r, A, c, lam):
    nx = J.shape[1]
    g = J.T @ r
    K = J.T @ J
    K[np.diag_indices(nx)] += lam
    m = A.shape[0]
    if m == 0:
        try:
            return np.linalg.solve(K, -g), np.zeros(0)
        except np.linalg.LinAlgError:
            return np.linalg.lstsq(K, -g, rcond=None)[0], np.zeros(0)
    kkt = np.block([[K, A.T], [A, np.zeros((m, m))]])
    rhs = np.concatenate([-g, -c])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    return sol[:nx], sol[nx:]


# geodesic acceleration: second-order correction along curved valleys, e.g. the
# free rotation of a metered island cut off by unmetered buses
_ACCEL_H = 0.1
_ACCEL_RATIO = 0.75
_ACCEL_MIN_STEP = 1e-7
# well-posed problems finish before this; only slow valleys pay for the extra evaluation
_ACCEL_AFTER = 25


def _acceleration(lay, x, dx, r, J, c, A, z, sigma, lam):
    h = _ACCEL_H
    rh, _, ch, _, _ = _evaluate(lay, x + h * dx, z, sigma, jacobian=False)
    r2 = 2 / h * ((rh - r) / h - J @ dx)
    c2 = 2 / h * ((ch - c) / h - A @ dx)
    acc, _ = _kkt_step(J, r2, A, c2, lam)
    return acc


def _reduced_gradient(J, r, A) -> float:
    """Norm of the objective gradient projected onto the constraint null space."""
    g = 2 * J.T @ r
    if A.shape[0] == 0:
        return float(np.linalg.norm(g))
    lam, *_ = np.linalg.lstsq(A.T, g, rcond=None)
    return float(np.linalg.norm(g - A.T @ lam))


def flat_start(problem: DsseProblem) -> np.ndarray:
    """No-load voltages from a balanced 1 pu slack at the reference angle; measured device powers."""
    lay = problem.layout
    theta = math.radians(problem.reference_angle)
    phases = [lay.net.nodes[i][1] for i in lay.slack_nodes]
    shifts = np.deg2rad([_SHIFT[p] for p in phases])
    v = lay.net.no_load_voltages(np.exp(1j * (theta + shifts)))
    x = np.zeros(lay.nx)
    x[: lay.nv] = lay.params_from_voltages(v)
    for m in problem.measurements:
        if m.kind in ("p_phase", "q_phase"):
            key = (GRID if m.device is None else m.device, m.phase)
            if key in lay.explicit:
                x[lay.explicit[key] + (0 if m.kind == "p_phase" else 1)] = m.value
    return x


def objective_gradient(problem: DsseProblem, x: np.ndarray) -> np.ndarray:
    """Gradient of the sum of rho over the parameter vector (analytic)."""
    z, sigma = _measurement_arrays(problem)
    r, J, *_ = _evaluate(problem.layout, np.asarray(x, float), z, sigma)
    return 2 * J.T @ r


def objective(problem: DsseProblem, x: np.ndarray) -> float:
    z, sigma = _measurement_arrays(problem)
    r, *_ = _evaluate(problem.layout, np.asarray(x, float), z, sigma, jacobian=False)
    return float(r @ r)


def estimate_state(
    problem: DsseProblem,
    init: np.ndarray | VoltageState | None = None,
    tol: float = 1e-9,
    max_iter: int = 100,
    damping: float = 1e-6,
    raise_on_failure: bool = True,
) -> StateEstimate:
    """Minimise the sum of squared weighted residuals by constrained Levenberg-Marquardt.

    Each step solves the damped normal equations with the linearised
    zero-injection constraints as a KKT system; identity damping keeps steps
    minimum-norm in directions the measurements do not see. Steps are accepted on
    an exact-penalty merit function. Runs that are still going after a few
    dozen steps switch on geodesic acceleration.
    """
    lay = problem.layout
    z, sigma = _measurement_arrays(problem)
    if isinstance(init, VoltageState):
        x = flat_start(problem)
        x[: lay.nv] = lay.params_from_voltages(init.values)
    elif init is None:
        x = flat_start(problem)
    else:
        x = np.array(init, dtype=float)
        if x.shape != (lay.nx,):
            raise ValueError(f"init must have {lay.nx} parameters")

    r, J, c, A, h = _evaluate(lay, x, z, sigma)
    scale = max(1.0, float(np.max(np.sum(J * J, axis=0)))) if J.size else 1.0
    lam = damping * scale
    lam_min = 1e-16 * scale
    nu = 1.0
    history: list[dict] = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        f = 0.5 * float(r @ r)
        cn = float(np.abs(c).sum())
        gnorm = _reduced_gradient(J, r, A)
        history.append({"iteration": it - 1, "objective": 2 * f, "gradient_norm": gnorm,
                        "constraint": float(np.max(np.abs(c), initial=0.0)), "damping": lam})
        accepted = False
        for _ in range(40):
            dx, mu = _kkt_step(J, r, A, c, lam)
            nu = max(nu, 2.0 * float(np.max(np.abs(mu), initial=0.0)))
            if it > _ACCEL_AFTER and np.max(np.abs(dx)) > _ACCEL_MIN_STEP:
                acc = _acceleration(lay, x, dx, r, J, c, A, z, sigma, lam)
                if 2 * np.linalg.norm(acc) > _ACCEL_RATIO * np.linalg.norm(dx):
                    lam *= 4
                    continue
                dx = dx + 0.5 * acc
            xn = x + dx
            rn, _, cnew, _, _ = _evaluate(lay, xn, z, sigma, jacobian=False)
            fn = 0.5 * float(rn @ rn)
            if not math.isfinite(fn):
                lam *= 10
                continue
            merit, merit_new = f + nu * cn, fn + nu * float(np.abs(cnew).sum())
            if merit_new <= merit or np.max(np.abs(dx)) < tol:
                accepted = True
                break
            lam *= 4
        if not accepted:
            break
        x = xn
        lam = max(lam / 3, lam_min)
        r, J, c, A, h = _evaluate(lay, x, z, sigma)
        step = float(np.max(np.abs(dx), initial=0.0))
        if step < tol and float(np.max(np.abs(c), initial=0.0)) < 1e-10:
            converged = True
            break
    gnorm = _reduced_gradient(J, r, A)
    cmax = float(np.max(np.abs(c), initial=0.0))
    history.append({"iteration": it, "objective": float(r @ r), "gradient_norm": gnorm,
                    "constraint": cmax, "damping": lam})
    if not converged:
        # a stalled step with a flat projected gradient is still an optimum
        converged = cmax < 1e-8 and gnorm < max(1e-6, 1e-8 * math.sqrt(max(float(r @ r), 1.0)))
    if not converged and raise_on_failure:
        raise DsseError(
            f"state estimation did not converge in {it} iterations (gradient norm {gnorm:.3e})",
            [hh["gradient_norm"] for hh in history],
        )
    v = lay.voltages(x)
    s = v * np.conj(lay.net.ybus @ v)
    powers: dict[str, list[complex]] = {}
    model = problem.model
    for dev in list(model.loads) + list(model.generators):
        powers[dev.id] = np.array([lay.device_power(x, s, (dev.id, p)) for p in dev.phases])
    slack_phases = [lay.net.nodes[k][1] for k in lay.slack_nodes]
    powers[GRID] = np.array([lay.device_power(x, s, (GRID, p)) for p in slack_phases])
    return StateEstimate(
        problem=problem, x=x, state=VoltageState(tuple(lay.net.nodes), v), device_powers=powers,
        estimated=h, residuals=r, objective=float(r @ r), iterations=it, converged=converged,
        gradient_norm=gnorm, constraint_violation=cmax, history=history,
    )


# --------------------------------------------------------------------------
# reporting and observability


def _unit(model: NetworkModel, m: MeasurementFunction) -> float:
    """Multiplier from pu to measurement units (V, W, var)."""
    if m.kind == "line_voltage_magnitude":
        return model.bus(m.bus).base_voltage
    if m.kind == "phase_voltage_magnitude":
        return model.bus(m.bus).base_voltage / _SQRT3
    return model.power_base / 3


def residual_report(estimate: StateEstimate, problem: DsseProblem | None = None,
                    threshold: float = RESIDUAL_ZERO_THRESHOLD) -> pd.DataFrame:
    """Per-measurement residuals sorted by bus (model order) then phase.

    Labels come from a prior observability analysis when one was run on the
    estimate, otherwise from the residual-zero criterion.
    """
    problem = problem or estimate.problem
    model = problem.model
    order = {b: i for i, b in enumerate(model.bus_ids)}
    zero = residual_zero_buses(estimate, threshold)
    recs = []
    for k, m in enumerate(problem.measurements):
        u = _unit(model, m)
        est = float(estimate.estimated[k])
        recs.append({
            "bus": m.bus, "phase": m.phase, "meter_id": m.meter_id, "channel": m.channel,
            "kind": m.kind, "device": m.device or "",
            "measured": m.value * u, "estimated": est * u, "residual": (est - m.value) * u,
            "residual_pu": est - m.value, "sigma_pu": m.sigma,
            "weighted_residual": float(estimate.residuals[k]),
            "label": estimate.labels.get(m.bus) or ("unobservable" if m.bus in zero else "observable"),
            "provenance": m.provenance,
            "_order": order[m.bus],
        })
    cols = ["bus", "phase", "meter_id", "channel", "kind", "device", "measured", "estimated", "residual",
            "residual_pu", "sigma_pu", "weighted_residual", "label", "provenance"]
    if not recs:
        return pd.DataFrame(columns=cols)
    df = pd.DataFrame(recs).sort_values(["_order", "phase", "kind", "meter_id"], kind="stable")
    return df[cols].reset_index(drop=True)


def residual_zero_buses(estimate: StateEstimate, threshold: float = RESIDUAL_ZERO_THRESHOLD) -> set[str]:
    """Buses with voltage measurements whose voltage residuals are all below ``threshold`` pu."""
    per_bus: dict[str, list[float]] = {}
    for k, m in enumerate(estimate.problem.measurements):
        if m.kind in ("line_voltage_magnitude", "phase_voltage_magnitude"):
            per_bus.setdefault(m.bus, []).append(abs(estimate.estimated[k] - m.value))
    return {b for b, rs in per_bus.items() if max(rs) < threshold}


@dataclass
class ObservabilityReport:
    observable: set[str]
    unobservable: set[str]
    evidence: dict[str, float]  # null-space voltage motion of each bus beyond a common rotation
    residual_zero: set[str]
    rank: int
    n_parameters: int
    threshold: float = NULL_SPACE_THRESHOLD

    def label(self, bus: str) -> str:
        return "unobservable" if bus in self.unobservable else "observable"

    def to_dict(self) -> dict:
        buses = list(self.evidence)
        return {
            "rank": self.rank,
            "n_parameters": self.n_parameters,
            "threshold": self.threshold,
            "buses": [{"bus": b, "label": self.label(b), "null_space_component": self.evidence[b],
                       "residual_zero": b in self.residual_zero} for b in buses],
        }


def bus_motion(problem: DsseProblem, bus: str, x: np.ndarray) -> np.ndarray:
    """Linear map from a parameter step to the bus's voltage change, minus common rotation.

    Rows are real and imaginary parts per phase; the component along ``j V`` (all
    phases turning together) is projected out.
    """
    lay = problem.layout
    idx = [lay.net.index[(bus, p)] for p in problem.model.bus(bus).phases]
    T = lay.T
    P = np.zeros((2 * len(idx), lay.nx))
    P[: len(idx), : lay.nv] = T[idx]
    P[len(idx):, : lay.nv] = T[[lay.n + k for k in idx]]
    v = lay.voltages(x)[idx]
    r = np.concatenate([(1j * v).real, (1j * v).imag])
    nr = np.linalg.norm(r)
    if nr > 0:
        r = r / nr
        P = P - np.outer(r, r @ P)
    return P


def observability_analysis(
    problem: DsseProblem,
    estimate: StateEstimate | None = None,
    threshold: float = NULL_SPACE_THRESHOLD,
    residual_threshold: float = RESIDUAL_ZERO_THRESHOLD,
) -> ObservabilityReport:
    """Numerical null space of the stacked measurement and constraint Jacobian at flat start.

    A bus is unobservable when some first-order-invisible direction moves its
    phase voltages other than by one common rotation. A metered island cut off
    from the slack by unmetered buses keeps its own angle reference, so it
    counts as observable.
    """
    lay = problem.layout
    z, sigma = _measurement_arrays(problem)
    x0 = flat_start(problem)
    _, J, _, A, _ = _evaluate(lay, x0, z, np.ones_like(sigma))
    G = np.vstack([J, A])
    norms = np.linalg.norm(G, axis=1)
    G = G[norms > 0] / norms[norms > 0, None]
    if G.shape[0]:
        _, sv, vt = np.linalg.svd(G, full_matrices=True)
        tol = max(G.shape) * np.finfo(float).eps * (sv[0] if len(sv) else 0.0) * 1e3
        rank = int(np.sum(sv > tol))
    else:
        vt = np.eye(lay.nx)
        rank = 0
    null = vt[rank:].T
    evidence = {}
    for bus in problem.model.bus_ids:
        q = bus_motion(problem, bus, x0)
        evidence[bus] = float(np.linalg.norm(q @ null, 2)) if null.size else 0.0
    unobs = {b for b, e in evidence.items() if e > threshold}
    zero = residual_zero_buses(estimate, residual_threshold) if estimate is not None else set()
    if estimate is not None:
        estimate.labels = {b: ("unobservable" if b in unobs else "observable") for b in evidence}
        disagree = {b for b in zero - unobs}
        if disagree:
            log.info("residual-zero buses judged observable by rank: %s", ", ".join(sorted(disagree)))
    return ObservabilityReport(set(evidence) - unobs, unobs, evidence, zero, rank, lay.nx, threshold)


# --------------------------------------------------------------------------
# export


def write_estimate(estimate: StateEstimate, path) -> None:
    model = estimate.problem.model
    labels = estimate.labels
    with open(path, "w", newline="") as fh:
        fh.write(f"# power_base_va={model.power_base:.6g} voltage_base=phase-to-neutral\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bus", "phase", "vm_pu", "va_deg", "label"])
        for (b, p), v in zip(estimate.state.nodes, estimate.state.values):
            w.writerow([b, p, f"{abs(v):.10f}", f"{math.degrees(np.angle(v)):.8f}", labels.get(b, "")])


def write_residuals(df: pd.DataFrame, path, model: NetworkModel | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if model is not None:
            fh.write(f"# power_base_va={model.power_base:.6g} residual in V, W or var\n")
        df.to_csv(fh, index=False, float_format="%.10g", lineterminator="\n")


def write_observability(report: ObservabilityReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


# --------------------------------------------------------------------------
# tap sweep


def powerflow_inputs(
    model: NetworkModel,
    series: MeasurementSeries,
    meters: Mapping[str, MeterSpec],
    timestamp,
    seed: int = 0,
    slack_meter: str | None = None,
):
    """Slack phasors and device powers (pu) for one timestamp of meter data.

    The slack comes from the slack meter's line voltages; metered devices take
    their measured powers and the rest of the supply-point power is allocated to
    unmetered loads.
    """
    from .exportlimit import allocate_loads

    ts = pd.Timestamp(timestamp)
    if ts.tzinfo is None:
        ts = ts.tz_localize("UTC")
    row = series.frame.loc[ts]
    if slack_meter is None:
        cands = [m for m in meters.values() if m.bus == model.slack_bus and m.device is None]
        if not cands:
            raise MissingChannelError("no meter at the slack bus")
        slack_meter = cands[0].meter_id
    sm = meters[slack_meter]
    missing = [f"v_{pq}" for pq in ("ab", "bc", "ca") if (sm.meter_id, f"v_{pq}") not in row.index]
    if missing:
        raise MissingChannelError(f"slack meter {sm.meter_id}: needs line voltages, {', '.join(missing)} missing"
                                  " (the tap sweep works on raw_send data)")
    vll = [float(row[(sm.meter_id, f"v_{pq}")]) for pq in ("ab", "bc", "ca")]
    slack = slack_from_line_voltages(*vll, base_voltage=model.bus(model.slack_bus).base_voltage)

    def total(m: MeterSpec) -> complex | None:
        if (m.meter_id, "p_tot") in row.index and (m.meter_id, "q_tot") in row.index:
            p, q = float(row[(m.meter_id, "p_tot")]), float(row[(m.meter_id, "q_tot")])
        else:
            ps = [f"p_{p}" for p in "abc"]
            if not all((m.meter_id, c) in row.index for c in ps):
                return None
            p = sum(float(row[(m.meter_id, f"p_{x}")]) for x in "abc")
            q = sum(float(row[(m.meter_id, f"q_{x}")]) for x in "abc")
        if not (math.isfinite(p) and math.isfinite(q)):
            return None
        return complex(p, q)

    pcc = total(sm)
    if pcc is None:
        raise MissingChannelError(f"slack meter {sm.meter_id}: no power totals")
    metered = {}
    for m in meters.values():
        if m.device is None:
            continue
        t = total(m)
        if t is not None:
            metered[m.device] = t
    alloc = allocate_loads(model, metered, pcc, seed=seed)
    sb = model.power_base / 3
    injections = {k: np.asarray(v) / sb for k, v in alloc.powers.items()}
    return slack, injections


@dataclass
class TapSweepReport:
    taps_before: dict[str, int]
    taps_after: dict[str, int]
    rms_before: float  # pu on the line-to-line base
    rms_after: float
    passes: int
    history: list[tuple[str, int, float]]  # transformer, tap, cost
    scatter: pd.DataFrame  # meter, channel, timestamp, measured, simulated_before, simulated_after
    skipped: list[tuple[str, int, str]] = field(default_factory=list)

    @property
    def improvement(self) -> float:
        return self.rms_before / self.rms_after if self.rms_after > 0 else math.inf


def _simulated_lines(model, scenarios, channels):
    out = []
    for slack, inj in scenarios:
        sol = solve_powerflow(model, injections=inj, slack=slack)
        for bus, pq in channels:
            u = sol.state.line_voltages(bus)
            out.append(abs(u[("ab", "bc", "ca").index(pq)]) / _SQRT3)
    return np.array(out)


def tap_sweep(
    model: NetworkModel,
    series: MeasurementSeries,
    meters: Mapping[str, MeterSpec],
    timestamps=None,
    transformer_subset: Sequence[str] | None = None,
    tap_bounds: Mapping[str, tuple[int, int]] | tuple[int, int] | None = None,
    seed: int = 0,
    max_passes: int = 10,
    slack_meter: str | None = None,
) -> tuple[NetworkModel, TapSweepReport]:
    """Coordinate descent over discrete tap positions against metered line voltages."""
    if timestamps is None:
        timestamps = series.timestamps
    timestamps = list(pd.DatetimeIndex(pd.to_datetime(timestamps, utc=True)))
    if not timestamps:
        raise ValueError("no timestamps to fit")
    if slack_meter is None:
        cands = [m.meter_id for m in meters.values() if m.bus == model.slack_bus and m.device is None]
        slack_meter = cands[0] if cands else None
    subset = list(transformer_subset) if transformer_subset is not None else [t.id for t in model.transformers]
    scenarios = [powerflow_inputs(model, series, meters, ts, seed, slack_meter) for ts in timestamps]
    channels, measured = [], []
    for m in meters.values():
        if m.meter_id == slack_meter:
            continue
        for pq in ("ab", "bc", "ca"):
            if f"v_{pq}" in m.measurands:
                channels.append((m.meter_id, m.bus, pq))
    if not channels:
        raise ValueError("no metered line voltages to fit")
    for ts in timestamps:
        row = series.frame.loc[ts]
        for mid, bus, pq in channels:
            measured.append(float(row[(mid, f"v_{pq}")]) / model.bus(bus).base_voltage)
    measured = np.array(measured)
    ok = np.isfinite(measured)
    bus_pq = [(b, pq) for _, b, pq in channels]

    cache: dict[tuple, float] = {}
    sims: dict[tuple, np.ndarray] = {}

    def key_of(m: NetworkModel):
        return tuple(m.transformer(t).tap_position for t in subset)

    def cost(m: NetworkModel) -> float:
        k = key_of(m)
        if k not in cache:
            sim = _simulated_lines(m, scenarios, bus_pq)
            sims[k] = sim
            d = (sim - measured)[ok]
            cache[k] = float(d @ d)
        return cache[k]

    def bounds(tid: str) -> tuple[int, int]:
        lo, hi = model.transformer(tid).tap_range
        if tap_bounds is None:
            return lo, hi
        b = tap_bounds.get(tid, (lo, hi)) if isinstance(tap_bounds, Mapping) else tap_bounds
        return max(lo, int(b[0])), min(hi, int(b[1]))

    current = model
    best = cost(current)
    before_key = key_of(current)
    history = [("start", 0, best)]
    skipped = []
    passes = 0
    for passes in range(1, max_passes + 1):
        improved = False
        for tid in subset:
            lo, hi = bounds(tid)
            here = current.transformer(tid).tap_position
            for tap in range(lo, hi + 1):
                if tap == here:
                    continue
                cand = apply_tap(current, tid, tap)
                try:
                    val = cost(cand)
                except PowerFlowError as exc:
                    log.warning("tap sweep: %s at tap %d skipped (%s)", tid, tap, exc)
                    skipped.append((tid, tap, str(exc)))
                    continue
                if val < best * (1 - 1e-12):
                    best, current, here, improved = val, cand, tap, True
                    history.append((tid, tap, val))
        if not improved:
            break
    after_key = key_of(current)
    nobs = max(int(ok.sum()), 1)
    recs = []
    k = 0
    for ts in timestamps:
        for mid, bus, pq in channels:
            recs.append({"meter_id": mid, "channel": f"v_{pq}", "timestamp": ts,
                         "measured": measured[k], "simulated_before": sims[before_key][k],
                         "simulated_after": sims[after_key][k]})
            k += 1
    report = TapSweepReport(
        taps_before={t: model.transformer(t).tap_position for t in subset},
        taps_after={t: current.transformer(t).tap_position for t in subset},
        rms_before=math.sqrt(cache[before_key] / nobs),
        rms_after=math.sqrt(cache[after_key] / nobs),
        passes=passes,
        history=history,
        scatter=pd.DataFrame(recs),
        skipped=skipped,
    )
    return current, report
