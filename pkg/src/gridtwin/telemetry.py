"""Meter data: tolerance models, CSV ingestion, quality screening and synthesis.

Series values are held in SI units (V, A, W, var); the CSV carries kW and kVAr.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)

LINE_CHANNELS = ("v_ab", "v_bc", "v_ca")
CURRENT_CHANNELS = ("i_a", "i_b", "i_c")
TOTAL_CHANNELS = ("p_tot", "q_tot")
PHASE_VOLTAGE_CHANNELS = ("v_a", "v_b", "v_c")
PHASE_P_CHANNELS = ("p_a", "p_b", "p_c")
PHASE_Q_CHANNELS = ("q_a", "q_b", "q_c")
CSV_COLUMNS = ("timestamp", "meter_id") + LINE_CHANNELS + CURRENT_CHANNELS + TOTAL_CHANNELS
EXTRA_COLUMNS = PHASE_VOLTAGE_CHANNELS + PHASE_P_CHANNELS + PHASE_Q_CHANNELS
CHANNELS = CSV_COLUMNS[2:] + EXTRA_COLUMNS
POWER_CHANNELS = TOTAL_CHANNELS + PHASE_P_CHANNELS + PHASE_Q_CHANNELS

# long measurand names accepted in meter-spec files
MEASURAND_ALIASES = {
    **{f"line_voltage_{pq}": f"v_{pq}" for pq in ("ab", "bc", "ca")},
    **{f"phase_current_{p}": f"i_{p}" for p in "abc"},
    **{f"phase_voltage_{p}": f"v_{p}" for p in "abc"},
    **{f"p_phase_{p}": f"p_{p}" for p in "abc"},
    **{f"q_phase_{p}": f"q_{p}" for p in "abc"},
    "p_total": "p_tot",
    "q_total": "q_tot",
}

RAW_MEASURANDS = LINE_CHANNELS + CURRENT_CHANNELS + TOTAL_CHANNELS
SYNTHETIC_MEASURANDS = PHASE_VOLTAGE_CHANNELS + CURRENT_CHANNELS + PHASE_P_CHANNELS + PHASE_Q_CHANNELS


class TelemetryError(ValueError):
    """Bad measurement input."""


def canonical_channel(name: str) -> str:
    name = MEASURAND_ALIASES.get(name, name)
    if name not in CHANNELS:
        raise TelemetryError(f"unknown measurand {name!r}")
    return name


@dataclass(frozen=True)
class MeterSpec:
    """Power meter with datasheet operational tolerances (percent).

    ``rated_voltage`` is the phase-to-neutral rating used in the power tolerance;
    ``device`` names the load or generator whose powers and currents are measured
    (``None`` at the slack bus means the grid supply).
    """

    meter_id: str
    bus: str
    rated_voltage: float
    rated_current: float
    measurands: tuple[str, ...] = RAW_MEASURANDS
    device: str | None = None
    voltage_tol_pct: float = 0.5
    current_tol_pct: float = 0.2
    p_tol_pct: float = 1.0
    q_tol_pct: float = 2.0
    valid_current_floor_pct: float = 20.0

    def __post_init__(self):
        if not (self.rated_voltage > 0 and self.rated_current > 0):
            raise TelemetryError(f"meter {self.meter_id}: rated values must be positive")
        for name in ("voltage_tol_pct", "current_tol_pct", "p_tol_pct", "q_tol_pct"):
            if not getattr(self, name) > 0:
                raise TelemetryError(f"meter {self.meter_id}: {name} must be positive")
        object.__setattr__(self, "measurands", tuple(dict.fromkeys(canonical_channel(m) for m in self.measurands)))

    @property
    def current_floor(self) -> float:
        return self.valid_current_floor_pct / 100 * self.rated_current


def load_meter_specs(path) -> dict[str, MeterSpec]:
    """Sidecar JSON: ``{meter_id: {bus, rated_voltage_v, rated_current_a, measurands, device, ...}}``."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return meter_specs_from_dict(doc)


_METER_KEYS = {
    "bus", "rated_voltage_v", "rated_current_a", "measurands", "device",
    "voltage_tol_pct", "current_tol_pct", "p_tol_pct", "q_tol_pct", "valid_current_floor_pct",
}


def meter_specs_from_dict(doc: Mapping) -> dict[str, MeterSpec]:
    out = {}
    for mid, spec in doc.items():
        unknown = set(spec) - _METER_KEYS
        if unknown:
            raise TelemetryError(f"meter {mid}: unknown key(s) {', '.join(sorted(unknown))}")
        extra = {k: float(spec[k]) for k in spec if k.endswith("_pct")}
        out[mid] = MeterSpec(
            meter_id=mid,
            bus=spec["bus"],
            rated_voltage=float(spec["rated_voltage_v"]),
            rated_current=float(spec["rated_current_a"]),
            measurands=tuple(spec.get("measurands", RAW_MEASURANDS)),
            device=spec.get("device"),
            **extra,
        )
    return out


def meter_specs_to_dict(meters: Mapping[str, MeterSpec]) -> dict:
    return {
        m.meter_id: {
            "bus": m.bus,
            "rated_voltage_v": m.rated_voltage,
            "rated_current_a": m.rated_current,
            "measurands": list(m.measurands),
            "device": m.device,
            "voltage_tol_pct": m.voltage_tol_pct,
            "current_tol_pct": m.current_tol_pct,
            "p_tol_pct": m.p_tol_pct,
            "q_tol_pct": m.q_tol_pct,
            "valid_current_floor_pct": m.valid_current_floor_pct,
        }
        for m in meters.values()
    }


# --------------------------------------------------------------------------
# tolerance models


def current_tolerance(meter: MeterSpec, measured_current: float) -> float:
    """Absolute current tolerance; held at its value at the valid-range floor below it."""
    if measured_current < 0:
        raise ValueError("current magnitude must be non-negative")
    return meter.current_tol_pct / 100 * max(measured_current, meter.current_floor)


def phase_power_tolerance(meter: MeterSpec, measured_current_phase: float, kind: str = "active") -> float:
    """Per-phase power tolerance in W (active) or var (reactive)."""
    if measured_current_phase < 0:
        raise ValueError("current magnitude must be non-negative")
    if kind == "active":
        pct = meter.p_tol_pct
    elif kind == "reactive":
        pct = meter.q_tol_pct
    else:
        raise ValueError(f"kind must be 'active' or 'reactive', not {kind!r}")
    return pct / 100 * meter.rated_voltage * max(measured_current_phase, meter.current_floor)


def voltage_tolerance(meter: MeterSpec, measured_voltage: float) -> float:
    return meter.voltage_tol_pct / 100 * abs(measured_voltage)


def split_total_power(p_total: float, phase_currents: Sequence[float]) -> tuple[float, float, float]:
    """Share a three-phase total between phases in proportion to current magnitude.

    Falls back to an equal split when no current flows. Phase c takes the
    remainder so the three shares add back to ``p_total``.
    """
    currents = [float(i) for i in phase_currents]
    if len(currents) != 3:
        raise ValueError("three phase currents required")
    if any(i < 0 or math.isnan(i) for i in currents):
        raise ValueError("phase currents must be non-negative numbers")
    total_i = currents[0] + currents[1] + currents[2]
    if total_i == 0:
        pa = pb = p_total / 3
    else:
        pa = p_total * currents[0] / total_i
        pb = p_total * currents[1] / total_i
    # snap to the ulp grid of the total so the remainder is exact
    q = math.ulp(p_total)
    pa = round(pa / q) * q
    pb = round(pb / q) * q
    pc = p_total - (pa + pb)
    return pa, pb, pc


# --------------------------------------------------------------------------
# series container and CSV


@dataclass(frozen=True, eq=False)
class MeasurementSeries:
    """Wide table: UTC timestamp index, ``(meter_id, channel)`` columns, SI values."""

    frame: pd.DataFrame
    cadence: float = 30.0  # seconds

    def __post_init__(self):
        f = self.frame
        if not isinstance(f.columns, pd.MultiIndex) or f.columns.nlevels != 2:
            raise TelemetryError("series columns must be (meter_id, channel)")
        for _, ch in f.columns:
            if ch not in CHANNELS:
                raise TelemetryError(f"unknown channel {ch!r}")

    @property
    def meters(self) -> list[str]:
        return list(dict.fromkeys(self.frame.columns.get_level_values(0)))

    @property
    def timestamps(self) -> pd.DatetimeIndex:
        return self.frame.index

    def channels(self, meter_id: str) -> list[str]:
        return [ch for m, ch in self.frame.columns if m == meter_id]

    def channel(self, meter_id: str, channel: str) -> pd.Series:
        return self.frame[(meter_id, channel)]

    def has(self, meter_id: str, channel: str) -> bool:
        return (meter_id, channel) in self.frame.columns

    def value(self, meter_id: str, channel: str, timestamp) -> float:
        return float(self.frame.at[pd.Timestamp(timestamp), (meter_id, channel)])

    def at(self, timestamp) -> pd.Series:
        return self.frame.loc[pd.Timestamp(timestamp)]

    def stride(self, step: int) -> "MeasurementSeries":
        if step < 1:
            raise ValueError("stride must be >= 1")
        return MeasurementSeries(self.frame.iloc[::step], self.cadence * step)

    def equals(self, other: "MeasurementSeries") -> bool:
        return self.cadence == other.cadence and self.frame.equals(other.frame)


def _long_to_series(df: pd.DataFrame, cadence: float | None) -> MeasurementSeries:
    value_cols = [c for c in df.columns if c not in ("timestamp", "meter_id")]
    wide = df.pivot(index="timestamp", columns="meter_id", values=value_cols)
    wide = wide.swaplevel(0, 1, axis=1)
    order = [(m, c) for m in dict.fromkeys(df["meter_id"]) for c in value_cols]
    wide = wide.reindex(columns=pd.MultiIndex.from_tuples(order, names=["meter_id", "channel"]))
    wide = wide.dropna(axis=1, how="all") if len(wide) else wide
    wide.index.name = "timestamp"
    if cadence is None:
        cadence = float(np.median(np.diff(wide.index.asi8)) / 1e9) if len(wide) > 1 else 30.0
    return MeasurementSeries(wide.astype(float), cadence)


def ingest_csv(path, meters: Mapping[str, MeterSpec] | None = None, cadence: float | None = None) -> MeasurementSeries:
    """Read a long-format meter CSV (one row per timestamp and meter).

    Required header: ``timestamp,meter_id,v_ab,v_bc,v_ca,i_a,i_b,i_c,p_tot,q_tot``;
    the per-phase columns ``v_a..q_c`` may follow. Empty cells and ``NaN`` are missing.
    """
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False)
    except pd.errors.ParserError as exc:
        raise TelemetryError(f"malformed row: {exc}") from exc
    except pd.errors.EmptyDataError as exc:
        raise TelemetryError("empty measurement file") from exc
    cols = list(df.columns)
    if tuple(cols[: len(CSV_COLUMNS)]) != CSV_COLUMNS:
        raise TelemetryError(f"header must start with {','.join(CSV_COLUMNS)}")
    for c in cols[len(CSV_COLUMNS):]:
        if c not in EXTRA_COLUMNS:
            raise TelemetryError(f"unknown column {c!r}")

    ts = pd.to_datetime(df["timestamp"], utc=True, format="ISO8601", errors="coerce")
    bad = ts.isna()
    if bad.any():
        line = int(np.flatnonzero(bad.to_numpy())[0]) + 2
        raise TelemetryError(f"malformed row at line {line}: bad timestamp {df['timestamp'][line - 2]!r}")
    df["timestamp"] = ts
    if meters is not None:
        unknown = sorted(set(df["meter_id"]) - set(meters))
        if unknown:
            raise TelemetryError(f"unknown meter id(s): {', '.join(unknown)}")

    scale = {c: (1e3 if c in POWER_CHANNELS else 1.0) for c in cols[2:]}
    for c in cols[2:]:
        raw = df[c].str.strip()
        missing = raw.isin(["", "NaN", "nan", "NA"])
        num = pd.to_numeric(raw.where(~missing), errors="coerce")
        bad = num.isna() & ~missing
        if bad.any():
            line = int(np.flatnonzero(bad.to_numpy())[0]) + 2
            raise TelemetryError(f"malformed row at line {line}: non-numeric {c} value {raw.iloc[line - 2]!r}")
        df[c] = num * scale[c]

    if not df.groupby("meter_id", sort=False)["timestamp"].apply(lambda s: s.is_monotonic_increasing).all():
        warnings.warn("timestamps are not monotone within a meter; rows were sorted", stacklevel=2)
    if df.duplicated(["timestamp", "meter_id"]).any():
        raise TelemetryError("duplicate (timestamp, meter_id) rows")
    return _long_to_series(df, cadence)


def write_csv(series: MeasurementSeries, path) -> None:
    """Write the long CSV format; per-phase columns are emitted only when present."""
    f = series.frame
    present = set(f.columns.get_level_values(1))
    extra = [c for c in EXTRA_COLUMNS if c in present]
    columns = list(CSV_COLUMNS[2:]) + extra
    long = f.stack(level=0, future_stack=True).reindex(columns=columns)
    long.index.names = ["timestamp", "meter_id"]
    long = long.reset_index()
    for c in columns:
        if c in POWER_CHANNELS:
            long[c] = long[c] / 1e3
    long["timestamp"] = long["timestamp"].dt.strftime("%Y-%m-%dT%H:%M:%SZ")
    long.to_csv(path, index=False, float_format="%.12g", na_rep="NaN", lineterminator="\n")


def series_from_records(records: Iterable[tuple], cadence: float = 30.0) -> MeasurementSeries:
    """Build a series from ``(timestamp, meter_id, channel, value)`` tuples (SI units)."""
    df = pd.DataFrame(list(records), columns=["timestamp", "meter_id", "channel", "value"])
    df["timestamp"] = pd.to_datetime(df["timestamp"], utc=True)
    wide = df.pivot_table(index="timestamp", columns=["meter_id", "channel"], values="value",
                          aggfunc="last", dropna=False, sort=False)
    wide.columns = wide.columns.set_names(["meter_id", "channel"])
    return MeasurementSeries(wide.sort_index().astype(float), cadence)


# --------------------------------------------------------------------------
# quality screening


@dataclass
class ChannelQuality:
    flags: set[str] = field(default_factory=set)
    gross_error: list[pd.Timestamp] = field(default_factory=list)
    missing: list[pd.Timestamp] = field(default_factory=list)
    stuck_runs: list[tuple[pd.Timestamp, pd.Timestamp]] = field(default_factory=list)
    step_size: float | None = None  # smallest relative change of a stepped channel

    @property
    def ok(self) -> bool:
        return not self.flags


@dataclass
class QualityReport:
    channels: dict[tuple[str, str], ChannelQuality]

    def flags(self, meter_id: str, channel: str) -> set[str]:
        q = self.channels.get((meter_id, channel))
        return set(q.flags) if q else set()

    def is_excluded(self, meter_id: str, channel: str, timestamp=None) -> bool:
        """Stuck and stepped flags exclude a whole channel; gross errors and gaps only their samples."""
        q = self.channels.get((meter_id, channel))
        if q is None:
            return False
        if q.flags & {"stuck", "stepped"}:
            return True
        if timestamp is not None:
            ts = pd.Timestamp(timestamp)
            return ts in q.gross_error or ts in q.missing
        return False

    def summary(self) -> dict[str, int]:
        counts = {k: 0 for k in ("ok", "stuck", "stepped", "gross_error", "missing")}
        for q in self.channels.values():
            if q.ok:
                counts["ok"] += 1
            for f in q.flags:
                counts[f] += 1
        return counts

    def to_dict(self) -> dict:
        iso = lambda t: t.strftime("%Y-%m-%dT%H:%M:%SZ")  # noqa: E731
        return {
            "summary": self.summary(),
            "channels": [
                {
                    "meter_id": m,
                    "channel": c,
                    "flags": sorted(q.flags) or ["ok"],
                    "gross_error": [iso(t) for t in q.gross_error],
                    "missing_count": len(q.missing),
                    "stuck_runs": [[iso(a), iso(b)] for a, b in q.stuck_runs],
                    "step_size": q.step_size,
                }
                for (m, c), q in self.channels.items()
            ],
        }


def _runs(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Start index and length of runs of identical consecutive values."""
    if len(x) == 0:
        return np.array([], int), np.array([], int)
    change = np.flatnonzero(x[1:] != x[:-1]) + 1
    starts = np.concatenate([[0], change])
    lengths = np.diff(np.concatenate([starts, [len(x)]]))
    return starts, lengths


def _varies(x: np.ndarray) -> bool:
    x = x[~np.isnan(x)]
    return len(x) > 1 and np.ptp(x) > 0


def _robust_outliers(x: np.ndarray, window: int, threshold: float) -> np.ndarray:
    half = window // 2
    pad = np.concatenate([np.full(half, np.nan), x, np.full(half, np.nan)])
    win = sliding_window_view(pad, window)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        med = np.nanmedian(win, axis=1)
        mad = np.nanmedian(np.abs(win - med[:, None]), axis=1)
    scale = np.maximum(1.4826 * mad, 1e-9 * np.maximum(np.abs(med), 1.0))
    z = np.abs(x - med) / scale
    cand = np.nan_to_num(z, nan=0.0) > threshold
    # only isolated spikes: runs of at most two consecutive candidates
    out = np.zeros_like(cand)
    starts, lengths = _runs(cand.astype(np.int8))
    for s, n in zip(starts, lengths):
        if cand[s] and n <= 2:
            out[s : s + n] = True
    return out


def detect_quality_issues(
    series: MeasurementSeries,
    stuck_min_len: int = 20,
    gross_z_threshold: float = 8.0,
    step_detect: bool = True,
    step_threshold: float = 0.01,
    window: int = 61,
    min_steps: int = 3,
    min_plateau: float = 3.0,
) -> QualityReport:
    """Flag stuck, stepped, gross-error and missing samples per channel.

    * stuck: a run of at least ``stuck_min_len`` identical values while a sibling
      channel of the same meter varies over the same span;
    * stepped: piecewise-constant with at least ``min_steps`` changes, nearly all of
      relative size ``>= step_threshold``, and a median plateau at least
      ``min_plateau`` samples long and ``min_plateau`` times the siblings' median;
    * gross_error: isolated samples whose median/MAD z-score in a centred window
      exceeds ``gross_z_threshold``;
    * missing: NaN samples.
    """
    frame = series.frame
    index = frame.index
    report: dict[tuple[str, str], ChannelQuality] = {}
    for meter in series.meters:
        chans = series.channels(meter)
        data = {c: frame[(meter, c)].to_numpy(dtype=float) for c in chans}
        plateau = {}
        for c, x in data.items():
            v = x[~np.isnan(x)]
            _, lengths = _runs(v)
            plateau[c] = float(np.median(lengths)) if len(lengths) else 0.0
        for c, x in data.items():
            q = ChannelQuality()
            report[(meter, c)] = q
            nan = np.isnan(x)
            if nan.any():
                q.flags.add("missing")
                q.missing = list(index[nan])
            if nan.all():
                continue
            valid = np.flatnonzero(~nan)
            v = x[valid]
            siblings = [s for s in chans if s != c]

            if step_detect:
                d = np.diff(v)
                changed = np.flatnonzero(d != 0)
                if len(changed) >= min_steps:
                    rel = np.abs(d[changed]) / np.maximum(np.abs(v[changed]), 1e-12)
                    sib = [plateau[s] for s in siblings if plateau[s] > 0]
                    sib_med = float(np.median(sib)) if sib else 1.0
                    if (
                        np.mean(rel >= step_threshold) >= 0.9
                        and plateau[c] >= min_plateau
                        and plateau[c] >= min_plateau * sib_med
                    ):
                        q.flags.add("stepped")
                        q.step_size = float(np.min(rel))

            if "stepped" not in q.flags:
                starts, lengths = _runs(v)
                for s, n in zip(starts, lengths):
                    if n < stuck_min_len:
                        continue
                    span = slice(valid[s], valid[s + n - 1] + 1)
                    if not siblings or any(_varies(data[sb][span]) for sb in siblings):
                        q.flags.add("stuck")
                        q.stuck_runs.append((index[valid[s]], index[valid[s + n - 1]]))

            spikes = _robust_outliers(v, window, gross_z_threshold)
            if spikes.any():
                q.flags.add("gross_error")
                q.gross_error = list(index[valid[spikes]])
    return QualityReport(report)


# --------------------------------------------------------------------------
# synthetic measurements


def _true_values(solution, meter: MeterSpec) -> dict[str, tuple[float, float | None]]:
    """True SI value of every measurand, plus the per-phase current used for tolerances."""
    model = solution.model
    bus = model.bus(meter.bus)
    vph = bus.base_voltage / math.sqrt(3)
    sb = model.power_base / 3
    idx = solution.state.index()
    u = {p: solution.state.values[idx[(meter.bus, p)]] for p in bus.phases}
    out: dict[str, float] = {}
    for pq in ("ab", "bc", "ca"):
        if pq[0] in u and pq[1] in u:
            out[f"v_{pq}"] = abs(u[pq[0]] - u[pq[1]]) * vph
    for p in bus.phases:
        out[f"v_{p}"] = abs(u[p]) * vph
    if meter.device is not None:
        dev = model.device(meter.device)
        powers = dict(zip(dev.phases, solution.device_powers[dev.id] * sb))
    elif meter.bus == model.slack_bus:
        powers = dict(zip(bus.phases, solution.slack_injection * sb))
    else:
        powers = {}
    for p, s in powers.items():
        out[f"p_{p}"] = s.real
        out[f"q_{p}"] = s.imag
        out[f"i_{p}"] = abs(s) / (abs(u[p]) * vph)
    if powers:
        out["p_tot"] = sum(s.real for s in powers.values())
        out["q_tot"] = sum(s.imag for s in powers.values())
    return out


def measurement_sigma(meter: MeterSpec, channel: str, values: Mapping[str, float]) -> float:
    """Standard deviation (one third of the operational tolerance) for one channel."""
    if channel.startswith("v_"):
        return voltage_tolerance(meter, values[channel]) / 3
    if channel.startswith("i_"):
        return current_tolerance(meter, abs(values[channel])) / 3
    if channel in ("p_tot", "q_tot"):
        kind = "active" if channel == "p_tot" else "reactive"
        return sum(phase_power_tolerance(meter, abs(values.get(f"i_{p}", 0.0)), kind) for p in "abc") / 3
    kind = "active" if channel.startswith("p_") else "reactive"
    return phase_power_tolerance(meter, abs(values.get(f"i_{channel[-1]}", 0.0)), kind) / 3


def synthesize_measurements(
    solutions,
    meters: Mapping[str, MeterSpec] | Sequence[MeterSpec],
    seed: int | None = 0,
    timestamps=None,
    sigma_scale: float = 1.0,
    cadence: float = 30.0,
) -> MeasurementSeries:
    """Meter readings from power-flow solutions plus zero-mean Gaussian noise.

    ``solutions`` is one solution or a sequence (one per timestamp). Noise on each
    channel has a standard deviation of a third of its operational tolerance,
    multiplied by ``sigma_scale`` (0 gives the exact solved values).
    """
    if not isinstance(solutions, (list, tuple)):
        solutions = [solutions]
    if isinstance(meters, Mapping):
        meters = list(meters.values())
    if timestamps is None:
        timestamps = pd.date_range("2024-01-01", periods=len(solutions), freq=f"{int(cadence)}s", tz="UTC")
    timestamps = pd.DatetimeIndex(pd.to_datetime(timestamps, utc=True))
    if len(timestamps) != len(solutions):
        raise ValueError("one timestamp per solution required")
    rng = np.random.default_rng(seed)
    columns = [(m.meter_id, c) for m in meters for c in m.measurands]
    values = np.empty((len(solutions), len(columns)))
    for t, sol in enumerate(solutions):
        k = 0
        for m in meters:
            if m.bus not in sol.model.bus_ids:
                raise TelemetryError(f"meter {m.meter_id}: bus {m.bus!r} is not in the solution")
            true = _true_values(sol, m)
            for c in m.measurands:
                if c not in true:
                    raise TelemetryError(f"meter {m.meter_id}: cannot synthesize {c} (no device measured)")
                sigma = measurement_sigma(m, c, true) * sigma_scale
                values[t, k] = true[c] + sigma * rng.standard_normal()
                k += 1
    frame = pd.DataFrame(values, index=timestamps, columns=pd.MultiIndex.from_tuples(columns, names=["meter_id", "channel"]))
    frame.index.name = "timestamp"
    return MeasurementSeries(frame, cadence)
