"""Built-in network documents used by the tests, the acceptance suite and the CLI demos.

``twin33`` is a synthetic 11 kV campus network: 33 MV buses on a radial cable
tree (13.1 km in total), 14 MV/LV substations with Dyn11 11000/433 V
transformers feeding LV busbars, a three-phase solar plant on the MV network,
and a 4.03 MVA baseload at 0.95 power factor spread unevenly over the LV busbars.
"""

from __future__ import annotations

import json
import sys

import numpy as np
import pandas as pd

# 185 mm2 Al XLPE, ohm/km and microsiemens/km
CABLE = {"r1": 0.164, "x1": 0.103, "r0": 0.67, "x0": 0.08, "b1": 100.0, "b0": 100.0}

# (from, to, metres); the 32 segments add up to 13.1 km
_TREE = [
    ("mv00", "mv01", 820), ("mv01", "mv02", 420), ("mv02", "mv03", 380), ("mv03", "mv04", 510),
    ("mv04", "mv05", 300), ("mv05", "mv06", 460), ("mv06", "mv07", 350), ("mv07", "mv08", 290),
    ("mv08", "mv09", 410), ("mv09", "mv10", 330), ("mv03", "mv11", 520), ("mv11", "mv12", 280),
    ("mv12", "mv13", 360), ("mv13", "mv14", 450), ("mv14", "mv15", 310), ("mv15", "mv16", 390),
    ("mv06", "mv17", 610), ("mv17", "mv18", 340), ("mv18", "mv19", 300), ("mv19", "mv20", 720),
    ("mv20", "mv21", 270), ("mv21", "mv22", 330), ("mv01", "mv23", 480), ("mv23", "mv24", 350),
    ("mv24", "mv25", 420), ("mv25", "mv26", 290), ("mv26", "mv27", 380), ("mv08", "mv28", 460),
    ("mv28", "mv29", 310), ("mv29", "mv30", 370), ("mv30", "mv31", 400), ("mv31", "mv32", 490),
]

# MV bus hosting each substation, transformer kVA, share of the baseload, phase imbalance
_SUBSTATIONS = [
    ("mv02", 1000, 0.10, (1.00, 1.05, 0.95)),
    ("mv04", 800, 0.06, (1.08, 0.96, 0.96)),
    ("mv05", 1000, 0.09, (0.97, 1.01, 1.02)),
    ("mv07", 500, 0.04, (1.10, 0.95, 0.95)),
    ("mv09", 800, 0.07, (0.94, 1.03, 1.03)),
    ("mv10", 1000, 0.08, (1.00, 0.98, 1.02)),
    ("mv12", 1000, 0.09, (1.04, 1.00, 0.96)),
    ("mv14", 800, 0.06, (0.95, 1.06, 0.99)),
    ("mv16", 500, 0.05, (1.02, 0.97, 1.01)),
    ("mv18", 1000, 0.08, (0.98, 0.98, 1.04)),
    ("mv24", 800, 0.06, (1.03, 1.03, 0.94)),
    ("mv26", 1000, 0.08, (0.96, 1.00, 1.04)),
    ("mv29", 800, 0.07, (1.01, 0.96, 1.03)),
    ("mv31", 1000, 0.07, (1.05, 0.99, 0.96)),
]

BASELOAD_KVA = 4030.0
BASELOAD_PF = 0.95
SOLAR_BUS = "mv20"
SOLAR_CAPACITY_KW = 5000.0
SLACK_BUS = "mv00"


def twin33(solar_kw: float = 0.0, load_scale: float = 1.0, tap_offsets: dict | None = None) -> dict:
    """Synthetic 33-MV-bus twin as a network document.

    ``tap_offsets`` maps transformer id to its tap position (default 0).
    """
    tap_offsets = tap_offsets or {}
    buses = [{"id": f"mv{k:02d}", "base_voltage_v": 11000.0, "phases": "abc",
              "voltage_limits_pu": [0.94, 1.06]} for k in range(33)]
    lines = [
        {"id": f"cab_{f}_{t}", "from": f, "to": t, "length_m": float(m),
         "impedance": {"units": "ohm_per_km", "sequence": dict(CABLE)}}
        for f, t, m in _TREE
    ]
    transformers, loads = [], []
    p_total = BASELOAD_KVA * BASELOAD_PF * load_scale
    q_total = BASELOAD_KVA * np.sqrt(1 - BASELOAD_PF**2) * load_scale
    for k, (mv, kva, share, imb) in enumerate(_SUBSTATIONS, start=1):
        lv = f"lv{k:02d}"
        buses.append({"id": lv, "base_voltage_v": 433.0, "phases": "abc",
                      "voltage_limits_pu": [0.94, 1.10]})
        tid = f"tx{k:02d}"
        transformers.append({
            "id": tid, "from": mv, "to": lv, "rated_kva": float(kva),
            "rated_voltages_v": [11000.0, 433.0], "impedance_pu": [0.01, 0.05],
            "connection": ["delta", "wye-g"],
            "tap": {"step_pct": 1.25, "position": int(tap_offsets.get(tid, 0)), "range": [-4, 4]},
        })
        w = np.asarray(imb) / np.sum(imb)
        loads.append({"id": f"ld{k:02d}", "bus": lv, "phases": "abc",
                      "p_kw": (p_total * share * w).round(6).tolist(),
                      "q_kvar": (q_total * share * w).round(6).tolist()})
    generators = [{"id": "solar", "bus": SOLAR_BUS, "phases": "abc", "p_kw": float(solar_kw), "q_kvar": 0.0}]
    return {
        "bases": {"power_kva": 1000.0},
        "slack": {"bus": SLACK_BUS, "voltage_pu": 1.0, "angle_deg": 0.0},
        "buses": buses, "lines": lines, "transformers": transformers,
        "loads": loads, "generators": generators,
    }


def two_bus(z_pu=(0.01, 0.02), load_pu=(0.1, 0.05), power_kva: float = 1000.0, base_v: float = 11000.0) -> dict:
    """Two buses, one phase-decoupled line given in per-unit, one balanced load."""
    r, x = z_pu
    zero = [[0.0] * 3 for _ in range(3)]
    diag = lambda v: [[v if i == j else 0.0 for j in range(3)] for i in range(3)]  # noqa: E731
    p_kw = load_pu[0] * power_kva / 3
    q_kvar = load_pu[1] * power_kva / 3
    return {
        "bases": {"power_kva": power_kva},
        "slack": {"bus": "b0", "voltage_pu": 1.0},
        "buses": [{"id": "b0", "base_voltage_v": base_v}, {"id": "b1", "base_voltage_v": base_v}],
        "lines": [{"id": "l01", "from": "b0", "to": "b1", "length_m": 100.0,
                   "impedance": {"units": "pu", "matrix": {"r": diag(r), "x": diag(x), "b": zero}}}],
        "loads": [{"id": "ld1", "bus": "b1", "p_kw": [p_kw] * 3, "q_kvar": [q_kvar] * 3}],
    }


def radial_chain(n: int = 5, length_m: float = 800.0, load_kw: float = 150.0, pf: float = 0.95,
                 imbalance=(1.0, 1.1, 0.9), generator_bus: int | None = None, gen_kw: float = 0.0) -> dict:
    """Slack ``n0`` followed by ``n - 1`` MV buses in a chain, each with one load ``d<k>``."""
    q_kw = load_kw * np.sqrt(1 - pf**2) / pf
    w = np.asarray(imbalance) / np.sum(imbalance)
    buses = [{"id": f"n{k}", "base_voltage_v": 11000.0} for k in range(n)]
    lines = [{"id": f"c{k}", "from": f"n{k}", "to": f"n{k + 1}", "length_m": length_m,
              "impedance": {"units": "ohm_per_km", "sequence": dict(CABLE)}} for k in range(n - 1)]
    loads = [{"id": f"d{k}", "bus": f"n{k}", "p_kw": (load_kw * w * (1 + 0.1 * k)).tolist(),
              "q_kvar": (q_kw * w * (1 + 0.1 * k)).tolist()} for k in range(1, n)]
    doc = {"bases": {"power_kva": 1000.0}, "slack": {"bus": "n0", "voltage_pu": 1.01},
           "buses": buses, "lines": lines, "loads": loads}
    if generator_bus is not None:
        doc["generators"] = [{"id": "g", "bus": f"n{generator_bus}", "p_kw": gen_kw, "q_kvar": 0.0}]
    return doc


def clear_sky(timestamps, sunrise_h: float = 5.0, sunset_h: float = 21.0) -> np.ndarray:
    """Normalised solar shape in [0, 1]: a sine-squared bell between sunrise and sunset (UTC hours)."""
    ts = pd.DatetimeIndex(timestamps)
    hours = ts.hour + ts.minute / 60 + ts.second / 3600
    x = (np.asarray(hours, dtype=float) - sunrise_h) / (sunset_h - sunrise_h)
    return np.where((x > 0) & (x < 1), np.sin(np.pi * np.clip(x, 0, 1)) ** 2, 0.0)


def load_shape(timestamps) -> np.ndarray:
    """Daily demand multiplier around 1: low overnight, peaking in the early evening."""
    ts = pd.DatetimeIndex(timestamps)
    hours = np.asarray(ts.hour + ts.minute / 60 + ts.second / 3600, dtype=float)
    return 0.85 + 0.15 * np.cos(2 * np.pi * (hours - 18.0) / 24.0) + 0.05 * np.cos(4 * np.pi * (hours - 9.0) / 24.0)


def main(argv=None) -> int:
    """Write the twin document to stdout or a path: ``python -m gridtwin.cases [path]``."""
    argv = sys.argv[1:] if argv is None else argv
    text = json.dumps(twin33(), indent=1) + "\n"
    if argv:
        with open(argv[0], "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
