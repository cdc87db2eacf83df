"""Dynamic export limits: load allocation, sensitivity arithmetic, curtailment and benefit."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .netmodel import NetworkModel
from .powerflow import SensitivityMatrix

log = logging.getLogger(__name__)

PF_MIN = 0.1
DEFAULT_PRICE = 100.0  # currency per MWh
DEFAULT_CARBON_INTENSITY = 400.0  # kgCO2e per MWh
DEFAULT_CADENCE = 120.0  # seconds


# --------------------------------------------------------------------------
# load allocation


@dataclass(frozen=True, eq=False)
class LoadAllocation:
    """Per-phase complex power (VA, device sign) for every load and generator."""

    powers: dict[str, np.ndarray]
    residual_power: complex
    seed: int | None
    metered: tuple[str, ...]
    weights: dict[str, float] = field(default_factory=dict)

    def net_demand(self, model: NetworkModel) -> complex:
        loads = sum(self.powers[d.id].sum() for d in model.loads)
        gens = sum(self.powers[g.id].sum() for g in model.generators)
        return complex(loads - gens)


def allocate_loads(
    model: NetworkModel,
    metered_powers: Mapping[str, complex],
    pcc_injection: complex,
    seed: int | None = 0,
    slack_load: str | None = None,
) -> LoadAllocation:
    """Share the unmetered part of the supply-point power among unmetered loads.

    ``metered_powers`` maps device id to its measured three-phase total (VA, demand
    positive for loads, output positive for generators); metered devices are split
    equally among their phases. The residual (supply power minus metered net
    demand) goes to unmetered loads with weights drawn uniformly from [0, 2] times
    the mean and renormalised. Unmetered generators are taken as idle.
    """
    loads = {d.id: d for d in model.loads}
    gens = {g.id: g for g in model.generators}
    unknown = set(metered_powers) - set(loads) - set(gens)
    if unknown:
        raise ValueError(f"metered power for unknown device(s): {', '.join(sorted(unknown))}")
    powers: dict[str, np.ndarray] = {}
    net = 0j
    for dev in list(model.loads) + list(model.generators):
        total = complex(metered_powers.get(dev.id, 0j))
        powers[dev.id] = np.full(len(dev.phases), total / len(dev.phases), dtype=complex)
        if dev.id in metered_powers:
            net += total if dev.id in loads else -total
    residual = complex(pcc_injection) - net
    free = [d for d in model.loads if d.id not in metered_powers]
    weights: dict[str, float] = {}
    if residual.real < 0:
        log.warning("metered demand exceeds the supply-point power; allocating %.3g W as negative demand", residual.real)
    if not free:
        if residual != 0:
            target = slack_load or (model.loads[0].id if model.loads else None)
            if target is None:
                raise ValueError("no load to take the residual power")
            log.warning("no unmetered loads: residual %.3g VA assigned to %s", abs(residual), target)
            dev = loads[target]
            powers[target] = powers[target] + residual / len(dev.phases)
            weights[target] = 1.0
    else:
        rng = np.random.default_rng(seed)
        mean = 1.0 / len(free)
        w = rng.uniform(0.0, 2.0, len(free)) * mean
        if w.sum() <= 0:
            w = np.full(len(free), mean)
        share = w / w.sum()
        parts = residual * share
        parts[-1] = residual - parts[:-1].sum()
        for dev, part, s in zip(free, parts, share):
            powers[dev.id] = np.full(len(dev.phases), part / len(dev.phases), dtype=complex)
            weights[dev.id] = float(s)
    return LoadAllocation(powers, residual, seed, tuple(metered_powers), weights)


# --------------------------------------------------------------------------
# voltage-rise arithmetic


def pf_coefficient(power_factor: float) -> float:
    """Reactive absorption per unit active power at the given power factor."""
    pf = float(power_factor)
    if not (PF_MIN <= pf <= 1.0):
        raise ValueError(f"power factor must lie in [{PF_MIN}, 1], got {power_factor!r}")
    return math.sqrt(1.0 - pf * pf) / pf


def injection_voltage_sensitivity(R: float, X: float, power_factor: float = 1.0, power_base: float = 1e6) -> float:
    """MW of injection per 1 % voltage rise; ``math.inf`` when the rise never binds.

    ``R`` and ``X`` are per-unit on ``power_base`` (VA).
    """
    denom = R - X * pf_coefficient(power_factor)
    if denom <= 0:
        return math.inf
    return 0.01 / denom * power_base / 1e6


def safety_factor(tolerance_pct: float, sensitivity_mw: float) -> float:
    """Export headroom in MW reserved for a voltage tolerance of ``tolerance_pct`` percent."""
    if tolerance_pct < 0:
        raise ValueError("tolerance must be non-negative")
    if tolerance_pct == 0:
        return 0.0
    return tolerance_pct * sensitivity_mw


def thevenin_from_sensitivity(m: SensitivityMatrix, bus: str | None = None) -> tuple[float, float]:
    """Per-unit R and X seen from a bus: mean dV/dP and dV/dQ over its phases."""
    rows = m.rows(bus or m.injection_bus)
    if len(rows) == 0:
        raise ValueError(f"bus {bus!r} not in sensitivity matrix")
    return float(m.matrix[rows, 0].mean()), float(m.matrix[rows, 1].mean())


def max_injection(
    m: SensitivityMatrix | np.ndarray,
    v_twin,
    u_max: float,
    power_factor: float = 1.0,
    power_base: float | None = None,
) -> float:
    """Largest active injection (MW) before any node reaches ``u_max``.

    Nodes whose combined sensitivity is not positive do not rise with injection
    and are skipped; returns ``math.inf`` when no node rises. A negative result
    means some node is already above the limit.
    """
    if isinstance(m, SensitivityMatrix):
        mat = m.matrix
        base = m.power_base if power_base is None else power_base
    else:
        mat = np.asarray(m, dtype=float)
        base = 1e6 if power_base is None else power_base
    v = np.asarray(v_twin, dtype=float)
    if mat.ndim != 2 or mat.shape[1] != 2 or v.shape != (mat.shape[0],):
        raise ValueError(f"dimension mismatch: M {mat.shape} vs v_twin {v.shape}")
    s = mat @ np.array([1.0, -pf_coefficient(power_factor)])
    rising = s > 0
    if not rising.any():
        return math.inf
    p_pu = float(np.min((u_max - v[rising]) / s[rising]))
    return p_pu * base / 1e6


# --------------------------------------------------------------------------
# curtailment


@dataclass(frozen=True, eq=False)
class CurtailmentSeries:
    frame: pd.DataFrame  # columns potential, measured, curtailment (MW)

    @property
    def curtailment(self) -> pd.Series:
        return self.frame["curtailment"]

    def __len__(self) -> int:
        return len(self.frame)


def _as_series(x, name: str, index=None) -> pd.Series:
    if isinstance(x, pd.Series):
        return x.astype(float).rename(name)
    arr = np.asarray(x, dtype=float)
    return pd.Series(arr, index=index if index is not None else pd.RangeIndex(len(arr)), name=name)


def fit_offset(measured, reference, capacity_mw: float, mask=None) -> float:
    """Least-squares constant offset over samples known to be uncurtailed."""
    meas = np.asarray(measured, dtype=float)
    ref = np.asarray(reference, dtype=float)
    sel = np.ones(len(meas), bool) if mask is None else np.asarray(mask, bool)
    sel &= np.isfinite(meas) & np.isfinite(ref)
    if not sel.any():
        raise ValueError("no uncurtailed samples to fit the offset")
    return float(np.mean(meas[sel] - ref[sel] * capacity_mw))


def estimate_curtailment(measured_solar, reference_profile, capacity_mw: float, offset: float = 0.0) -> CurtailmentSeries:
    """Potential output from a normalised reference profile, minus what was measured."""
    meas = _as_series(measured_solar, "measured")
    ref = _as_series(reference_profile, "reference", meas.index if not isinstance(reference_profile, pd.Series) else None)
    if not ref.index.equals(meas.index):
        if isinstance(meas.index, pd.DatetimeIndex) and isinstance(ref.index, pd.DatetimeIndex):
            overlap = (ref.index.min() <= meas.index.max()) and (ref.index.max() >= meas.index.min())
            if not overlap:
                raise ValueError("reference profile does not overlap the measured series")
            joined = ref.reindex(ref.index.union(meas.index)).interpolate(method="time", limit_area="inside")
            ref = joined.reindex(meas.index)
        else:
            raise ValueError("measured and reference series are not aligned")
    if ref.isna().any():
        raise ValueError("reference profile cannot be aligned to every measured sample")
    potential = ref * capacity_mw + offset
    curt = (potential - meas).clip(lower=0.0)
    frame = pd.DataFrame({"potential": potential.to_numpy(), "measured": meas.to_numpy(),
                          "curtailment": curt.to_numpy()}, index=meas.index)
    return CurtailmentSeries(frame)


# --------------------------------------------------------------------------
# schemes and benefit


SCHEME_KINDS = ("dynamic_unity", "q_control", "conservative")


@dataclass(frozen=True)
class ExportScheme:
    kind: str
    power_factor: float = 1.0
    tolerance_pct: float = 0.0
    u_max: float = 1.06
    name: str = ""

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise ValueError(f"unknown scheme kind {self.kind!r}")
        if not (0 < self.power_factor <= 1):
            raise ValueError("power factor must be in (0, 1]")
        pf_coefficient(self.power_factor)
        if self.tolerance_pct < 0:
            raise ValueError("tolerance must be non-negative")
        if not self.u_max > 1:
            raise ValueError("upper voltage limit must exceed 1 pu")
        if self.kind == "dynamic_unity" and self.power_factor != 1.0:
            raise ValueError("dynamic_unity runs at unity power factor")
        if not self.name:
            label = {"dynamic_unity": "unity", "q_control": f"q_control_{self.power_factor:g}",
                     "conservative": f"conservative_{self.tolerance_pct:g}"}[self.kind]
            object.__setattr__(self, "name", label)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ExportScheme":
        allowed = {"kind", "power_factor", "tolerance_pct", "u_max", "name"}
        unknown = set(doc) - allowed
        if unknown:
            raise ValueError(f"scheme: unknown key(s) {', '.join(sorted(unknown))}")
        return cls(**dict(doc))


def default_schemes(u_max: float = 1.06) -> list[ExportScheme]:
    return [
        ExportScheme("conservative", 1.0, 0.5, u_max),
        ExportScheme("dynamic_unity", 1.0, 0.0, u_max),
        ExportScheme("q_control", 0.9, 0.0, u_max),
    ]


@dataclass(eq=False)
class BenefitReport:
    series: dict[str, pd.DataFrame]  # scheme name -> curtailment, p_max, recovered (MW)
    summary: pd.DataFrame  # scheme, energy_mwh, revenue, emissions_tco2e
    price: float
    carbon_intensity: float
    cadence: float

    def energy(self, scheme: str) -> float:
        return float(self.summary.set_index("scheme").loc[scheme, "energy_mwh"])


def economics(energy_mwh: float, price: float = DEFAULT_PRICE,
              carbon_intensity: float = DEFAULT_CARBON_INTENSITY) -> tuple[float, float]:
    """Revenue and avoided tCO2e for an amount of recovered energy."""
    return energy_mwh * price, energy_mwh * carbon_intensity / 1000.0


def scheme_benefit(
    curtailment: CurtailmentSeries,
    schemes: Sequence[ExportScheme],
    m: SensitivityMatrix | np.ndarray,
    v_twin,
    price: float = DEFAULT_PRICE,
    carbon_intensity: float = DEFAULT_CARBON_INTENSITY,
    cadence: float = DEFAULT_CADENCE,
    power_base: float | None = None,
    injection_rows=None,
) -> BenefitReport:
    """Energy each scheme would have recovered from the estimated curtailment.

    ``v_twin`` holds one row of node voltage magnitudes per timestep (or a single
    row used throughout). Recovered power per step is the curtailment capped by
    the scheme's maximum injection, never below zero.
    """
    if cadence <= 0:
        raise ValueError("cadence must be positive")
    curt = curtailment.frame["curtailment"].to_numpy(dtype=float)
    nt = len(curt)
    mat = m.matrix if isinstance(m, SensitivityMatrix) else np.asarray(m, dtype=float)
    base = (m.power_base if isinstance(m, SensitivityMatrix) else 1e6) if power_base is None else power_base
    v = np.asarray(v_twin.to_numpy() if isinstance(v_twin, pd.DataFrame) else v_twin, dtype=float)
    if v.ndim == 1:
        v = np.broadcast_to(v, (nt, v.shape[0]))
    if v.shape[0] != nt:
        raise ValueError(f"v_twin has {v.shape[0]} rows for {nt} timesteps")
    if injection_rows is None:
        if isinstance(m, SensitivityMatrix):
            injection_rows = m.rows(m.injection_bus)
        else:
            injection_rows = [int(np.argmax(mat[:, 0]))]
    r_pu = float(np.mean(mat[injection_rows, 0]))
    x_pu = float(np.mean(mat[injection_rows, 1]))
    series, rows = {}, []
    for sc in schemes:
        p_max = np.array([max_injection(mat, v[t], sc.u_max, sc.power_factor, base) for t in range(nt)])
        if sc.kind == "conservative":
            sens = injection_voltage_sensitivity(r_pu, x_pu, sc.power_factor, base)
            psf = safety_factor(sc.tolerance_pct, sens)
            p_max = np.maximum(p_max - psf, 0.0)
        recovered = np.minimum(curt, np.maximum(p_max, 0.0)) if nt else np.zeros(0)
        energy = float(np.sum(recovered) * cadence / 3600.0)
        revenue, tco2 = economics(energy, price, carbon_intensity)
        series[sc.name] = pd.DataFrame(
            {"curtailment": curt, "p_max": p_max, "recovered": recovered},
            index=curtailment.frame.index,
        )
        rows.append({"scheme": sc.name, "kind": sc.kind, "power_factor": sc.power_factor,
                     "tolerance_pct": sc.tolerance_pct, "energy_mwh": energy, "revenue": revenue,
                     "emissions_tco2e": tco2})
    summary = pd.DataFrame(rows, columns=["scheme", "kind", "power_factor", "tolerance_pct",
                                          "energy_mwh", "revenue", "emissions_tco2e"])
    return BenefitReport(series, summary, price, carbon_intensity, cadence)


def write_benefit(report: BenefitReport, outdir, plot: bool = False) -> list[str]:
    """Per-scheme series CSVs plus ``summary.csv``; an SVG bar chart when asked and available."""
    import os

    os.makedirs(outdir, exist_ok=True)
    written = []
    for name, df in report.series.items():
        path = os.path.join(outdir, f"scheme_{name}.csv")
        out = df.copy()
        out.index.name = "timestamp"
        if isinstance(out.index, pd.DatetimeIndex):
            out.index = out.index.strftime("%Y-%m-%dT%H:%M:%SZ")
        out.to_csv(path, float_format="%.9f", lineterminator="\n")
        written.append(path)
    path = os.path.join(outdir, "summary.csv")
    report.summary.to_csv(path, index=False, float_format="%.9f", lineterminator="\n")
    written.append(path)
    if plot:
        try:
            import matplotlib

            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
        except ImportError:
            log.warning("matplotlib not installed; skipping plot")
        else:
            fig, ax = plt.subplots(figsize=(5, 3))
            total = sum(float(df["curtailment"].sum()) for df in report.series.values()) / max(len(report.series), 1)
            names = ["curtailment"] + list(report.summary["scheme"])
            vals = [total * report.cadence / 3600.0] + list(report.summary["energy_mwh"])
            ax.bar(names, vals)
            ax.set_ylabel("MWh")
            fig.tight_layout()
            svg = os.path.join(outdir, "summary.svg")
            fig.savefig(svg, metadata={"Date": None})
            plt.close(fig)
            written.append(svg)
    return written
