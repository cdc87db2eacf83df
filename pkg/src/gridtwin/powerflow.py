"""Unbalanced three-phase power flow (rectangular Newton) and voltage sensitivities."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import least_squares

from .netmodel import (
    PHASES,
    BranchAdmittance,
    Device,
    NetworkError,
    NetworkModel,
    build_admittance,
    with_devices,
)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 50


class PowerFlowError(RuntimeError):
    """Newton iteration failed. Carries the mismatch history and worst node."""

    def __init__(self, message: str, history=(), worst_bus: str | None = None):
        super().__init__(message)
        self.history = list(history)
        self.worst_bus = worst_bus


@dataclass(frozen=True, eq=False)
class VoltageState:
    """Complex per-unit phasors, one per (bus, phase) node."""

    nodes: tuple[tuple[str, str], ...]
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex)
        if v.shape != (len(self.nodes),):
            raise ValueError("one phasor per node required")
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite voltage phasor")
        object.__setattr__(self, "values", v)

    @property
    def magnitudes(self) -> np.ndarray:
        return np.abs(self.values)

    def index(self) -> dict[tuple[str, str], int]:
        return {n: i for i, n in enumerate(self.nodes)}

    def bus(self, bus_id: str) -> np.ndarray:
        return np.array([v for (b, _), v in zip(self.nodes, self.values) if b == bus_id])

    def line_voltages(self, bus_id: str) -> np.ndarray:
        """Phase-to-phase phasors ab, bc, ca (phase-voltage per-unit)."""
        u = dict(((p, v) for (b, p), v in zip(self.nodes, self.values) if b == bus_id))
        return np.array([u["a"] - u["b"], u["b"] - u["c"], u["c"] - u["a"]])


ComplexVoltageState = VoltageState


@dataclass(frozen=True, eq=False)
class PowerFlowSolution:
    model: NetworkModel
    state: VoltageState
    branch_flows: dict[str, tuple[np.ndarray, np.ndarray]]
    injections: np.ndarray  # specified net injection per node, pu
    slack_injection: np.ndarray  # power delivered by the slack, per slack phase, pu
    iterations: int
    max_mismatch: float
    history: list[float] = field(default_factory=list)
    converged: bool = True
    device_powers: dict[str, np.ndarray] = field(default_factory=dict)  # per-phase pu, device sign

    def losses(self) -> complex:
        return complex(sum(f.sum() + t.sum() for f, t in self.branch_flows.values()))


@dataclass
class Network:
    """Assembled node admittance matrix and node bookkeeping for one model."""

    model: NetworkModel
    nodes: list[tuple[str, str]]
    index: dict[tuple[str, str], int]
    branches: dict[str, BranchAdmittance]
    ybus: np.ndarray
    slack: np.ndarray  # node indices of the slack bus
    pq: np.ndarray  # all other node indices

    @classmethod
    def build(cls, model: NetworkModel) -> "Network":
        nodes = model.nodes()
        index = {n: i for i, n in enumerate(nodes)}
        branches = build_admittance(model)
        y = np.zeros((len(nodes), len(nodes)), dtype=complex)
        for br in branches.values():
            fi = [index[(br.from_bus, p)] for p in br.from_phases]
            ti = [index[(br.to_bus, p)] for p in br.to_phases]
            y[np.ix_(fi, fi)] += br.y_ff
            y[np.ix_(fi, ti)] += br.y_ft
            y[np.ix_(ti, fi)] += br.y_tf
            y[np.ix_(ti, ti)] += br.y_tt
        slack = np.array([i for i, (b, _) in enumerate(nodes) if b == model.slack_bus])
        pq = np.array([i for i, (b, _) in enumerate(nodes) if b != model.slack_bus], dtype=int)
        return cls(model, nodes, index, branches, y, slack, pq)

    def device_nodes(self, device: Device) -> list[int]:
        return [self.index[(device.bus, p)] for p in device.phases]

    def device_powers(self, injections: Mapping[str, Sequence[complex]] | None = None) -> dict[str, np.ndarray]:
        """Per-phase pu power of every device (demand for loads, output for generators)."""
        sb = self.model.power_base / 3
        injections = injections or {}
        unknown = set(injections) - {d.id for d in self.model.loads + self.model.generators}
        if unknown:
            raise NetworkError(f"injections for undeclared device(s): {', '.join(sorted(unknown))}")
        out = {}
        for dev in self.model.loads + self.model.generators:
            power = injections.get(dev.id)
            out[dev.id] = np.asarray(power, dtype=complex) if power is not None else np.asarray(dev.power) / sb
        return out

    def specified_injections(self, injections: Mapping[str, Sequence[complex]] | None = None) -> np.ndarray:
        """Net injection per node in pu: generation minus demand."""
        s = np.zeros(len(self.nodes), dtype=complex)
        powers = self.device_powers(injections)
        for dev, sign in [(d, -1) for d in self.model.loads] + [(g, 1) for g in self.model.generators]:
            s[self.device_nodes(dev)] += sign * powers[dev.id]
        return s

    def no_load_voltages(self, vslack: np.ndarray) -> np.ndarray:
        v = np.zeros(len(self.nodes), dtype=complex)
        v[self.slack] = vslack
        if len(self.pq):
            ynn = self.ybus[np.ix_(self.pq, self.pq)]
            rhs = -self.ybus[np.ix_(self.pq, self.slack)] @ vslack
            try:
                v[self.pq] = np.linalg.solve(ynn, rhs)
            except np.linalg.LinAlgError as exc:
                raise PowerFlowError("singular admittance matrix: suspected isolated island") from exc
        return v

    def branch_flows(self, v: np.ndarray) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        out = {}
        for bid, br in self.branches.items():
            uf = v[[self.index[(br.from_bus, p)] for p in br.from_phases]]
            ut = v[[self.index[(br.to_bus, p)] for p in br.to_phases]]
            out[bid] = br.flows(uf, ut)
        return out


def power_jacobian(ybus: np.ndarray, v: np.ndarray):
    """Complex derivatives of nodal S = V conj(Y V) w.r.t. real and imaginary parts of V."""
    i = ybus @ v
    dS_de = np.diag(np.conj(i)) + v[:, None] * np.conj(ybus)
    dS_df = 1j * np.diag(np.conj(i)) - 1j * v[:, None] * np.conj(ybus)
    return dS_de, dS_df


def _real_jacobian(net: Network, v: np.ndarray) -> np.ndarray:
    dS_de, dS_df = power_jacobian(net.ybus, v)
    rows, cols = net.pq, net.pq
    a = dS_de[np.ix_(rows, cols)]
    b = dS_df[np.ix_(rows, cols)]
    # Jacobian of calculated injections; the mismatch Jacobian is its negative
    return np.block([[a.real, b.real], [a.imag, b.imag]])


def mismatch(net: Network, v: np.ndarray, s_spec: np.ndarray) -> np.ndarray:
    s_calc = v * np.conj(net.ybus @ v)
    d = (s_spec - s_calc)[net.pq]
    return np.concatenate([d.real, d.imag])


def mismatch_jacobian(net: Network, v: np.ndarray) -> np.ndarray:
    return -_real_jacobian(net, v)


def solve_powerflow(
    model: NetworkModel,
    injections: Mapping[str, Sequence[complex]] | None = None,
    slack: Sequence[complex] | None = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    network: Network | None = None,
) -> PowerFlowSolution:
    """Newton-Raphson on the rectangular power mismatch equations.

    ``injections`` overrides device powers (per-phase pu, keyed by device id);
    ``slack`` overrides the slack phasors (pu). Starts from the no-load solution,
    which carries the slack through transformer ratios and phase shifts.
    """
    net = network or Network.build(model)
    vslack = np.asarray(model.slack_voltage if slack is None else slack, dtype=complex)
    if vslack.shape != net.slack.shape:
        raise NetworkError("slack: one phasor per slack phase required")
    s_spec = net.specified_injections(injections)
    v = net.no_load_voltages(vslack)
    n = len(net.pq)
    history: list[float] = []
    it = 0
    while True:
        f = mismatch(net, v, s_spec)
        worst = float(np.max(np.hypot(f[:n], f[n:]))) if n else 0.0
        history.append(worst)
        if worst <= tol:
            break
        if it >= max_iter or not math.isfinite(worst):
            k = int(np.argmax(np.hypot(f[:n], f[n:])))
            bus = net.nodes[net.pq[k]][0]
            raise PowerFlowError(
                f"power flow did not converge in {it} iterations (max mismatch {worst:.3e} pu at bus {bus})",
                history,
                bus,
            )
        jac = mismatch_jacobian(net, v)
        try:
            dx = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowError(
                "singular power-flow Jacobian: suspected isolated island", history
            ) from exc
        v[net.pq] += dx[:n] + 1j * dx[n:]
        it += 1

    s_calc = v * np.conj(net.ybus @ v)
    state = VoltageState(tuple(net.nodes), v)
    return PowerFlowSolution(
        model=model,
        state=state,
        branch_flows=net.branch_flows(v),
        injections=s_spec,
        slack_injection=s_calc[net.slack] - s_spec[net.slack],
        iterations=it,
        max_mismatch=history[-1],
        history=history,
        device_powers=net.device_powers(injections),
    )


def slack_from_line_voltages(
    v_ab: float, v_bc: float, v_ca: float, base_voltage: float | None = None
) -> np.ndarray:
    """Phase phasors at 0, -120, +120 degrees reproducing measured line magnitudes.

    Magnitudes are fitted in a least-squares sense; the fit is exact whenever the
    triple is consistent with a 120-degree star. Returned in per-unit of
    ``base_voltage / sqrt(3)`` when a line-to-line base is given, else in volts.
    """
    lines = np.array([v_ab, v_bc, v_ca], dtype=float)
    if np.any(~np.isfinite(lines)) or np.any(lines <= 0):
        raise ValueError("line voltages must be positive")
    for k in range(3):
        if lines[k] >= lines[(k + 1) % 3] + lines[(k + 2) % 3]:
            raise ValueError("line voltages violate the triangle inequality")
    scale = lines.mean()
    target = lines / scale

    def resid(m):
        # |m_p e^{j0} - m_q e^{-j120}|^2 = m_p^2 + m_q^2 + m_p m_q
        ma, mb, mc = m
        return np.sqrt([ma * ma + mb * mb + ma * mb, mb * mb + mc * mc + mb * mc, mc * mc + ma * ma + mc * ma]) - target

    fit = least_squares(resid, np.full(3, 1 / math.sqrt(3)), bounds=(0, np.inf), xtol=1e-15, ftol=1e-15, gtol=1e-15)
    mags = fit.x * scale
    if base_voltage is not None:
        mags = mags / (base_voltage / math.sqrt(3))
    angles = np.deg2rad([0.0, -120.0, 120.0])
    return mags * np.exp(1j * angles)


# --------------------------------------------------------------------------
# linear sensitivity model


@dataclass(frozen=True, eq=False)
class SensitivityMatrix:
    """First-order |V| response (pu) to balanced three-phase P and Q (pu on the system base)."""

    matrix: np.ndarray  # (nodes, 2): columns dV/dP, dV/dQ
    nodes: tuple[tuple[str, str], ...]
    reference: VoltageState
    injection_bus: str
    power_base: float

    def rows(self, bus_id: str) -> np.ndarray:
        return np.array([i for i, (b, _) in enumerate(self.nodes) if b == bus_id])


def linearize(model: NetworkModel, reference: PowerFlowSolution, injection_bus: str) -> SensitivityMatrix:
    """Voltage-magnitude sensitivities from the Newton Jacobian at a converged solution."""
    if not reference.converged or reference.max_mismatch > max(10 * DEFAULT_TOL, 1e-6):
        raise PowerFlowError("reference power flow is not converged")
    model.bus(injection_bus)
    net = Network.build(model)
    v = reference.state.values
    n = len(net.pq)
    jac = mismatch_jacobian(net, v)
    inj = np.zeros(len(net.nodes), dtype=complex)
    for p in model.bus(injection_bus).phases:
        inj[net.index[(injection_bus, p)]] = 1.0
    # d(mismatch)/dP and d(mismatch)/dQ for a unit injection on every phase
    fp = np.concatenate([inj.real[net.pq], inj.imag[net.pq]])
    fq = np.concatenate([(1j * inj).real[net.pq], (1j * inj).imag[net.pq]])
    sens = np.zeros((len(net.nodes), 2))
    if n:
        dx = np.linalg.solve(jac, -np.column_stack([fp, fq]))
        vp = v[net.pq]
        dmag = (vp.real[:, None] * dx[:n] + vp.imag[:, None] * dx[n:]) / np.abs(vp)[:, None]
        sens[net.pq] = dmag
    return SensitivityMatrix(sens, tuple(net.nodes), reference.state, injection_bus, model.power_base)


def predict_voltages(m: SensitivityMatrix | np.ndarray, v_twin, p_solar: float, q_solar: float) -> np.ndarray:
    """Affine voltage prediction ``M [p; q] + v_twin``."""
    mat = m.matrix if isinstance(m, SensitivityMatrix) else np.asarray(m)
    v_twin = np.asarray(v_twin, dtype=float)
    if mat.ndim != 2 or mat.shape[1] != 2 or mat.shape[0] != v_twin.shape[-1]:
        raise ValueError(f"dimension mismatch: M {mat.shape} vs v_twin {v_twin.shape}")
    return mat @ np.array([p_solar, q_solar], dtype=float) + v_twin


def with_injection(model: NetworkModel, bus_id: str, p: float, q: float, device_id: str = "probe") -> NetworkModel:
    """Add a balanced three-phase injection of ``p + jq`` pu (system base) at ``bus_id``."""
    bus = model.bus(bus_id)
    per_phase = complex(p, q) * model.power_base / 3
    probe = Device(device_id, bus_id, bus.phases, tuple(per_phase for _ in bus.phases))
    return with_devices(model, generators=model.generators + (probe,))


# --------------------------------------------------------------------------
# export


def write_solution(solution: PowerFlowSolution, voltage_path, flow_path=None) -> None:
    with open(voltage_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bus", "phase", "vm_pu", "va_deg"])
        for (b, p), v in zip(solution.state.nodes, solution.state.values):
            w.writerow([b, p, f"{abs(v):.10f}", f"{math.degrees(np.angle(v)):.8f}"])
    if flow_path is None:
        return
    sb = solution.model.power_base / 3
    with open(flow_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["branch", "end", "phase", "p_kw", "q_kvar"])
        for bid, (sf, st) in solution.branch_flows.items():
            br = [x for x in solution.model.lines + solution.model.transformers if x.id == bid][0]
            phases = getattr(br, "phases", PHASES)
            for end, s in (("from", sf), ("to", st)):
                for p, val in zip(phases, s):
                    w.writerow([bid, end, p, f"{val.real * sb / 1e3:.6f}", f"{val.imag * sb / 1e3:.6f}"])


def write_sensitivity(m: SensitivityMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bus", "phase", "dv_dp", "dv_dq"])
        for (b, p), row in zip(m.nodes, m.matrix):
            w.writerow([b, p, f"{row[0]:.12e}", f"{row[1]:.12e}"])
