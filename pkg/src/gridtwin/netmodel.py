"""Unbalanced network model: document parsing, validation and branch admittances.

All solver-facing quantities are per-unit on a single system base:

* voltage base: phase-to-neutral, ``V_LL / sqrt(3)`` of the bus,
* power base: the three-phase system base ``S_base``; each phase carries
  ``S_base / 3``, so a balanced three-phase injection of ``P`` pu puts ``P``
  pu on every phase,
* impedance base: ``V_LL**2 / S_base``.
"""

from __future__ import annotations

import json
import math
import warnings
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

PHASES = ("a", "b", "c")
CONNECTIONS = ("wye-g", "delta")
DELTA_GROUNDING = 1e-6  # relative shunt keeping delta-side zero sequence non-singular

# line-to-line incidence: winding k spans phases k and k+1
_DELTA = np.array([[1, -1, 0], [0, 1, -1], [-1, 0, 1]], dtype=float)


class NetworkError(ValueError):
    """Invalid network description or model operation."""


class ParseError(NetworkError):
    """Malformed network document. ``position`` is ``(line, column)`` when known."""

    def __init__(self, message: str, position: tuple[int, int] | None = None):
        if position is not None:
            message = f"{message} (line {position[0]}, column {position[1]})"
        super().__init__(message)
        self.position = position


def normalize_phases(phases: str | Iterable[str]) -> tuple[str, ...]:
    items = list(phases)
    if not items:
        raise NetworkError("empty phase set")
    if len(set(items)) != len(items):
        raise NetworkError(f"duplicate phase in {''.join(items)!r}")
    for p in items:
        if p not in PHASES:
            raise NetworkError(f"unknown phase {p!r}")
    return tuple(p for p in PHASES if p in items)


def impedance_base(base_voltage_ll: float, power_base: float) -> float:
    return base_voltage_ll**2 / power_base


def impedance_to_pu(z_ohm, base_voltage_ll: float, power_base: float):
    return np.asarray(z_ohm) / impedance_base(base_voltage_ll, power_base)


def impedance_from_pu(z_pu, base_voltage_ll: float, power_base: float):
    return np.asarray(z_pu) * impedance_base(base_voltage_ll, power_base)


def admittance_to_pu(y_siemens, base_voltage_ll: float, power_base: float):
    return np.asarray(y_siemens) * impedance_base(base_voltage_ll, power_base)


def admittance_from_pu(y_pu, base_voltage_ll: float, power_base: float):
    return np.asarray(y_pu) / impedance_base(base_voltage_ll, power_base)


def sequence_to_phase(z1: complex, z0: complex) -> np.ndarray:
    """3x3 phase-frame matrix of a transposed element from its sequence values."""
    zs = (z0 + 2 * z1) / 3
    zm = (z0 - z1) / 3
    return np.full((3, 3), zm, dtype=complex) + np.eye(3) * (zs - zm)


@dataclass(frozen=True)
class Bus:
    id: str
    base_voltage: float
    phases: tuple[str, ...] = PHASES
    voltage_limits: tuple[float, float] = (0.94, 1.06)

    def __post_init__(self):
        if not self.base_voltage > 0:
            raise NetworkError(f"bus {self.id}: base voltage must be positive")
        lo, hi = self.voltage_limits
        if not lo < hi:
            raise NetworkError(f"bus {self.id}: voltage limits must satisfy lower < upper")


@dataclass(frozen=True, eq=False)
class LineSegment:
    """Pi-model line; admittances in siemens, one k x k block per phase set."""

    id: str
    from_bus: str
    to_bus: str
    phases: tuple[str, ...]
    series_admittance: np.ndarray
    shunt_from: np.ndarray
    shunt_to: np.ndarray
    length: float

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise NetworkError(f"line {self.id}: from and to bus are identical")
        if not self.length > 0:
            raise NetworkError(f"line {self.id}: length must be positive")
        k = len(self.phases)
        for name in ("series_admittance", "shunt_from", "shunt_to"):
            m = np.asarray(getattr(self, name), dtype=complex)
            if m.shape != (k, k):
                raise NetworkError(f"line {self.id}: {name} must be {k}x{k}")
            m.setflags(write=False)
            object.__setattr__(self, name, m)
        if not np.allclose(self.series_admittance, self.series_admittance.T, rtol=1e-12, atol=0):
            raise NetworkError(f"line {self.id}: series admittance is not symmetric")

    def __eq__(self, other):
        if not isinstance(other, LineSegment):
            return NotImplemented
        return (
            (self.id, self.from_bus, self.to_bus, self.phases, self.length)
            == (other.id, other.from_bus, other.to_bus, other.phases, other.length)
            and np.array_equal(self.series_admittance, other.series_admittance)
            and np.array_equal(self.shunt_from, other.shunt_from)
            and np.array_equal(self.shunt_to, other.shunt_to)
        )

    __hash__ = None


@dataclass(frozen=True)
class TransformerBranch:
    """Three-phase two-winding transformer: ideal ratio on the HV side in series
    with a leakage impedance (per-unit on its own rating)."""

    id: str
    from_bus: str
    to_bus: str
    rated_power: float
    impedance: complex
    connection: tuple[str, str]
    rated_voltages: tuple[float, float]
    tap_step_pct: float = 0.0
    tap_position: int = 0
    tap_range: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if not self.rated_power > 0:
            raise NetworkError(f"transformer {self.id}: rated power must be positive")
        if self.from_bus == self.to_bus:
            raise NetworkError(f"transformer {self.id}: from and to bus are identical")
        for c in self.connection:
            if c not in CONNECTIONS:
                raise NetworkError(f"transformer {self.id}: unknown winding connection {c!r}")
        if min(self.rated_voltages) <= 0:
            raise NetworkError(f"transformer {self.id}: rated voltages must be positive")
        if self.impedance == 0:
            raise NetworkError(f"transformer {self.id}: zero leakage impedance")
        lo, hi = self.tap_range
        if lo > hi:
            raise NetworkError(f"transformer {self.id}: empty tap range")
        if not lo <= self.tap_position <= hi:
            raise NetworkError(
                f"transformer {self.id}: tap position {self.tap_position} outside range [{lo}, {hi}]"
            )

    @property
    def nominal_ratio(self) -> float:
        return self.rated_voltages[0] / self.rated_voltages[1]

    @property
    def effective_ratio(self) -> float:
        return self.nominal_ratio * (1 + self.tap_position * self.tap_step_pct / 100)


@dataclass(frozen=True)
class Device:
    """Load or generator; ``power`` is complex VA per phase in ``phases`` order.

    Loads consume ``power``; generators produce it.
    """

    id: str
    bus: str
    phases: tuple[str, ...]
    power: tuple[complex, ...]
    kind: str = "fixed"

    def __post_init__(self):
        if len(self.power) != len(self.phases):
            raise NetworkError(f"device {self.id}: one power value per phase required")
        if self.kind not in ("fixed", "allocated"):
            raise NetworkError(f"device {self.id}: kind must be 'fixed' or 'allocated'")

    @property
    def total_power(self) -> complex:
        return complex(sum(self.power))


LoadSpec = Device
GeneratorSpec = Device


@dataclass(frozen=True)
class NetworkModel:
    buses: tuple[Bus, ...]
    lines: tuple[LineSegment, ...]
    transformers: tuple[TransformerBranch, ...]
    loads: tuple[Device, ...]
    generators: tuple[Device, ...]
    slack_bus: str
    power_base: float
    slack_voltage: tuple[complex, ...] = field(
        default=tuple(complex(np.exp(-2j * np.pi * k / 3)) for k in range(3))
    )

    def __post_init__(self):
        validate(self)

    def bus(self, bus_id: str) -> Bus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise NetworkError(f"unknown bus {bus_id!r}")

    def transformer(self, transformer_id: str) -> TransformerBranch:
        for t in self.transformers:
            if t.id == transformer_id:
                return t
        raise NetworkError(f"unknown transformer {transformer_id!r}")

    def device(self, device_id: str) -> Device:
        for d in self.loads + self.generators:
            if d.id == device_id:
                return d
        raise NetworkError(f"unknown load or generator {device_id!r}")

    @property
    def bus_ids(self) -> list[str]:
        return [b.id for b in self.buses]

    def nodes(self) -> list[tuple[str, str]]:
        """All (bus, phase) pairs in bus order then a, b, c."""
        return [(b.id, p) for b in self.buses for p in b.phases]


def _branches(model: NetworkModel):
    yield from ((l.id, l.from_bus, l.to_bus) for l in model.lines)
    yield from ((t.id, t.from_bus, t.to_bus) for t in model.transformers)


def unreachable_buses(model: NetworkModel) -> list[str]:
    """Buses with no branch path to the slack, in model order."""
    adj: dict[str, list[str]] = {b.id: [] for b in model.buses}
    for _, f, t in _branches(model):
        adj[f].append(t)
        adj[t].append(f)
    seen = {model.slack_bus}
    queue = deque([model.slack_bus])
    while queue:
        for nxt in adj[queue.popleft()]:
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return [b.id for b in model.buses if b.id not in seen]


def validate(model: NetworkModel) -> list[str]:
    """Check cross-references and uniqueness; return (and warn about) unreachable buses."""
    ids = [b.id for b in model.buses]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise NetworkError(f"duplicate bus id(s): {', '.join(dup)}")
    known = set(ids)
    branch_ids = [i for i, _, _ in _branches(model)]
    if len(set(branch_ids)) != len(branch_ids):
        raise NetworkError("duplicate branch id")
    device_ids = [d.id for d in model.loads + model.generators]
    if len(set(device_ids)) != len(device_ids):
        raise NetworkError("duplicate load/generator id")
    for bid, f, t in _branches(model):
        for end in (f, t):
            if end not in known:
                raise NetworkError(f"branch {bid}: unknown bus {end!r}")
    for d in model.loads + model.generators:
        if d.bus not in known:
            raise NetworkError(f"device {d.id}: unknown bus {d.bus!r}")
        if not set(d.phases) <= set(model.bus(d.bus).phases):
            raise NetworkError(f"device {d.id}: phases not present at bus {d.bus}")
    if model.slack_bus not in known:
        raise NetworkError(f"slack: unknown bus {model.slack_bus!r}")
    if len(model.slack_voltage) != len(model.bus(model.slack_bus).phases):
        raise NetworkError("slack: one voltage phasor per slack phase required")
    if not model.power_base > 0:
        raise NetworkError("power base must be positive")
    lost = unreachable_buses(model)
    if lost:
        warnings.warn(f"buses not connected to the slack: {', '.join(lost)}", stacklevel=3)
    return lost


# --------------------------------------------------------------------------
# document parsing

_TOP_KEYS = {"buses", "lines", "transformers", "loads", "generators", "slack", "bases"}
_BUS_KEYS = {"id", "base_voltage_v", "phases", "voltage_limits_pu"}
_LINE_KEYS = {"id", "from", "to", "length_m", "phases", "impedance"}
_IMPEDANCE_KEYS = {"units", "sequence", "matrix"}
_SEQ_KEYS = {"r1", "x1", "r0", "x0", "b1", "b0"}
_MATRIX_KEYS = {"r", "x", "b"}
_TRAFO_KEYS = {"id", "from", "to", "rated_kva", "rated_voltages_v", "impedance_pu", "connection", "tap"}
_TAP_KEYS = {"step_pct", "position", "range"}
_DEVICE_KEYS = {"id", "bus", "phases", "p_kw", "q_kvar", "kind"}
_SLACK_KEYS = {"bus", "voltage_pu", "angle_deg"}
_BASE_KEYS = {"power_kva"}


def _check_keys(obj, allowed: set[str], where: str, required: Iterable[str] = ()):
    if not isinstance(obj, Mapping):
        raise ParseError(f"{where}: expected an object")
    unknown = set(obj) - allowed
    if unknown:
        raise ParseError(f"{where}: unknown key(s) {', '.join(sorted(unknown))}")
    missing = [k for k in required if k not in obj]
    if missing:
        raise ParseError(f"{where}: missing key(s) {', '.join(missing)}")


def _per_phase(value, phases: Sequence[str], where: str) -> list[float]:
    if isinstance(value, (int, float)):
        return [float(value) / len(phases)] * len(phases)
    if len(value) != len(phases):
        raise ParseError(f"{where}: expected {len(phases)} per-phase values")
    return [float(v) for v in value]


def _line_from_doc(doc, buses: Mapping[str, Bus], power_base: float) -> LineSegment:
    where = f"line {doc.get('id', '?')}"
    _check_keys(doc, _LINE_KEYS, where, ("id", "from", "to", "length_m", "impedance"))
    for end in ("from", "to"):
        if doc[end] not in buses:
            raise NetworkError(f"{where}: unknown bus {doc[end]!r}")
    phases = normalize_phases(doc.get("phases", buses[doc["from"]].phases))
    length = float(doc["length_m"])
    if not length > 0:
        raise NetworkError(f"{where}: length must be positive")
    imp = doc["impedance"]
    _check_keys(imp, _IMPEDANCE_KEYS, f"{where} impedance", ("units",))
    units = imp["units"]
    if units not in ("ohm_per_km", "ohm", "pu"):
        raise ParseError(f"{where}: impedance units must be ohm_per_km, ohm or pu")
    if ("sequence" in imp) == ("matrix" in imp):
        raise ParseError(f"{where}: give exactly one of 'sequence' or 'matrix'")
    k = len(phases)
    if "sequence" in imp:
        seq = imp["sequence"]
        _check_keys(seq, _SEQ_KEYS, f"{where} sequence", ("r1", "x1", "r0", "x0"))
        z = sequence_to_phase(complex(seq["r1"], seq["x1"]), complex(seq["r0"], seq["x0"]))
        b = sequence_to_phase(seq.get("b1", 0.0), seq.get("b0", seq.get("b1", 0.0))).real
        if k != 3:
            idx = [PHASES.index(p) for p in phases]
            z, b = z[np.ix_(idx, idx)], b[np.ix_(idx, idx)]
    else:
        mat = imp["matrix"]
        _check_keys(mat, _MATRIX_KEYS, f"{where} matrix", ("r", "x"))
        z = np.asarray(mat["r"], dtype=float) + 1j * np.asarray(mat["x"], dtype=float)
        b = np.asarray(mat.get("b", np.zeros((k, k))), dtype=float)
        if z.shape != (k, k) or b.shape != (k, k):
            raise ParseError(f"{where}: matrices must be {k}x{k}")
    # b is in microsiemens (per km / total) or per-unit, matching the impedance units
    if units == "ohm_per_km":
        z = z * length / 1000
        b = b * 1e-6 * length / 1000
    elif units == "ohm":
        b = b * 1e-6
    else:
        vbase = buses[doc["from"]].base_voltage
        z = impedance_from_pu(z, vbase, power_base)
        b = admittance_from_pu(b, vbase, power_base)
    try:
        y = np.linalg.inv(z)
    except np.linalg.LinAlgError as exc:
        raise NetworkError(f"{where}: singular impedance matrix") from exc
    y = (y + y.T) / 2
    shunt = 0.5j * b
    return LineSegment(doc["id"], doc["from"], doc["to"], phases, y, shunt, shunt.copy(), length)


def _transformer_from_doc(doc, buses: Mapping[str, Bus]) -> TransformerBranch:
    where = f"transformer {doc.get('id', '?')}"
    _check_keys(
        doc,
        _TRAFO_KEYS,
        where,
        ("id", "from", "to", "rated_kva", "rated_voltages_v", "impedance_pu", "connection"),
    )
    for end in ("from", "to"):
        if doc[end] not in buses:
            raise NetworkError(f"{where}: unknown bus {doc[end]!r}")
    tap = doc.get("tap", {})
    _check_keys(tap, _TAP_KEYS, f"{where} tap")
    r, x = doc["impedance_pu"]
    pos = int(tap.get("position", 0))
    return TransformerBranch(
        id=doc["id"],
        from_bus=doc["from"],
        to_bus=doc["to"],
        rated_power=float(doc["rated_kva"]) * 1e3,
        impedance=complex(r, x),
        connection=tuple(doc["connection"]),
        rated_voltages=tuple(float(v) for v in doc["rated_voltages_v"]),
        tap_step_pct=float(tap.get("step_pct", 0.0)),
        tap_position=pos,
        tap_range=tuple(int(v) for v in tap.get("range", (pos, pos))),
    )


def _device_from_doc(doc, buses: Mapping[str, Bus], what: str) -> Device:
    where = f"{what} {doc.get('id', '?')}"
    _check_keys(doc, _DEVICE_KEYS, where, ("id", "bus", "p_kw"))
    if doc["bus"] not in buses:
        raise NetworkError(f"{where}: unknown bus {doc['bus']!r}")
    phases = normalize_phases(doc.get("phases", buses[doc["bus"]].phases))
    p = _per_phase(doc["p_kw"], phases, where)
    q = _per_phase(doc.get("q_kvar", 0.0), phases, where)
    power = tuple(complex(pi * 1e3, qi * 1e3) for pi, qi in zip(p, q))
    return Device(doc["id"], doc["bus"], phases, power, doc.get("kind", "fixed"))


def model_from_dict(doc: Mapping) -> NetworkModel:
    _check_keys(doc, _TOP_KEYS, "document", ("buses", "slack", "bases"))
    _check_keys(doc["bases"], _BASE_KEYS, "bases", ("power_kva",))
    power_base = float(doc["bases"]["power_kva"]) * 1e3
    if not power_base > 0:
        raise NetworkError("bases: power_kva must be positive")

    buses: dict[str, Bus] = {}
    for bdoc in doc["buses"]:
        _check_keys(bdoc, _BUS_KEYS, f"bus {bdoc.get('id', '?')}", ("id", "base_voltage_v"))
        if bdoc["id"] in buses:
            raise NetworkError(f"duplicate bus id {bdoc['id']!r}")
        buses[bdoc["id"]] = Bus(
            bdoc["id"],
            float(bdoc["base_voltage_v"]),
            normalize_phases(bdoc.get("phases", "abc")),
            tuple(bdoc.get("voltage_limits_pu", (0.94, 1.06))),
        )
    if any(not (b.base_voltage > 0) for b in buses.values()):
        raise NetworkError("bus base voltages must be positive")

    seen: set[str] = set()

    def unique(kind: str, item_id: str):
        if item_id in seen:
            raise NetworkError(f"duplicate {kind} id {item_id!r}")
        seen.add(item_id)

    lines = []
    for ldoc in doc.get("lines", []):
        unique("branch", ldoc.get("id"))
        lines.append(_line_from_doc(ldoc, buses, power_base))
    trafos = []
    for tdoc in doc.get("transformers", []):
        unique("branch", tdoc.get("id"))
        trafos.append(_transformer_from_doc(tdoc, buses))
    seen = set()
    loads = []
    for d in doc.get("loads", []):
        unique("device", d.get("id"))
        loads.append(_device_from_doc(d, buses, "load"))
    gens = []
    for d in doc.get("generators", []):
        unique("device", d.get("id"))
        gens.append(_device_from_doc(d, buses, "generator"))

    slack = doc["slack"]
    if isinstance(slack, str):
        slack = {"bus": slack}
    _check_keys(slack, _SLACK_KEYS, "slack", ("bus",))
    if slack["bus"] not in buses:
        raise NetworkError(f"slack: unknown bus {slack['bus']!r}")
    sphases = buses[slack["bus"]].phases
    mags = _expand(slack.get("voltage_pu", 1.0), len(sphases))
    default_angles = [{"a": 0.0, "b": -120.0, "c": 120.0}[p] for p in sphases]
    angles = slack.get("angle_deg", 0.0)
    if isinstance(angles, (int, float)):
        angles = [a + angles for a in default_angles]
    angles = _expand(angles, len(sphases))
    vslack = tuple(complex(m * np.exp(1j * np.deg2rad(a))) for m, a in zip(mags, angles))

    return NetworkModel(
        buses=tuple(buses.values()),
        lines=tuple(lines),
        transformers=tuple(trafos),
        loads=tuple(loads),
        generators=tuple(gens),
        slack_bus=slack["bus"],
        power_base=power_base,
        slack_voltage=vslack,
    )


def _expand(value, n: int) -> list[float]:
    if isinstance(value, (int, float)):
        return [float(value)] * n
    if len(value) != n:
        raise ParseError(f"slack: expected {n} values")
    return [float(v) for v in value]


def parse_network(text: str) -> NetworkModel:
    """Parse a JSON network document into a validated :class:`NetworkModel`."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"syntax error: {exc.msg}", (exc.lineno, exc.colno)) from exc
    return model_from_dict(doc)


def load_network(path) -> NetworkModel:
    with open(path, encoding="utf-8") as fh:
        return parse_network(fh.read())


def model_to_dict(model: NetworkModel) -> dict:
    """Serialise back to the document schema (lines as ohm matrices)."""

    def dev(d: Device):
        return {
            "id": d.id,
            "bus": d.bus,
            "phases": "".join(d.phases),
            "p_kw": [s.real / 1e3 for s in d.power],
            "q_kvar": [s.imag / 1e3 for s in d.power],
            "kind": d.kind,
        }

    lines = []
    for l in model.lines:
        z = np.linalg.inv(l.series_admittance)
        lines.append(
            {
                "id": l.id,
                "from": l.from_bus,
                "to": l.to_bus,
                "length_m": l.length,
                "phases": "".join(l.phases),
                "impedance": {
                    "units": "ohm",
                    "matrix": {
                        "r": z.real.tolist(),
                        "x": z.imag.tolist(),
                        "b": (2 * l.shunt_from.imag * 1e6).tolist(),
                    },
                },
            }
        )
    sphases = model.bus(model.slack_bus).phases
    return {
        "bases": {"power_kva": model.power_base / 1e3},
        "slack": {
            "bus": model.slack_bus,
            "voltage_pu": [abs(v) for v in model.slack_voltage],
            "angle_deg": [float(np.degrees(np.angle(v))) for v in model.slack_voltage][: len(sphases)],
        },
        "buses": [
            {
                "id": b.id,
                "base_voltage_v": b.base_voltage,
                "phases": "".join(b.phases),
                "voltage_limits_pu": list(b.voltage_limits),
            }
            for b in model.buses
        ],
        "lines": lines,
        "transformers": [
            {
                "id": t.id,
                "from": t.from_bus,
                "to": t.to_bus,
                "rated_kva": t.rated_power / 1e3,
                "rated_voltages_v": list(t.rated_voltages),
                "impedance_pu": [t.impedance.real, t.impedance.imag],
                "connection": list(t.connection),
                "tap": {"step_pct": t.tap_step_pct, "position": t.tap_position, "range": list(t.tap_range)},
            }
            for t in model.transformers
        ],
        "loads": [dev(d) for d in model.loads],
        "generators": [dev(d) for d in model.generators],
    }


def dump_network(model: NetworkModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=1)
        fh.write("\n")


# --------------------------------------------------------------------------
# model edits


def apply_tap(model: NetworkModel, transformer_id: str, tap_position: int) -> NetworkModel:
    """Copy of ``model`` with one transformer moved to ``tap_position``."""
    old = model.transformer(transformer_id)
    lo, hi = old.tap_range
    if not lo <= tap_position <= hi:
        raise NetworkError(
            f"transformer {transformer_id}: tap {tap_position} outside range [{lo}, {hi}]"
        )
    trafos = tuple(
        replace(t, tap_position=int(tap_position)) if t.id == transformer_id else t
        for t in model.transformers
    )
    return replace(model, transformers=trafos)


def with_devices(model: NetworkModel, loads=None, generators=None) -> NetworkModel:
    return replace(
        model,
        loads=model.loads if loads is None else tuple(loads),
        generators=model.generators if generators is None else tuple(generators),
    )


def with_slack_voltage(model: NetworkModel, phasors: Sequence[complex]) -> NetworkModel:
    return replace(model, slack_voltage=tuple(complex(v) for v in phasors))


# --------------------------------------------------------------------------
# branch admittances


@dataclass(frozen=True, eq=False)
class BranchAdmittance:
    """Two-port admittance of a branch in per-unit.

    ``I_from = y_ff U_from + y_ft U_to`` and ``I_to = y_tf U_from + y_tt U_to``.
    The Pi-model view (``series``, ``shunt_from``, ``shunt_to``) is read off the
    from-side row; it is exact for lines, where ``y_ft == y_tf``.
    """

    id: str
    from_bus: str
    to_bus: str
    from_phases: tuple[str, ...]
    to_phases: tuple[str, ...]
    y_ff: np.ndarray
    y_ft: np.ndarray
    y_tf: np.ndarray
    y_tt: np.ndarray

    @property
    def series(self) -> np.ndarray:
        return -self.y_ft

    @property
    def shunt_from(self) -> np.ndarray:
        return self.y_ff + self.y_ft

    @property
    def shunt_to(self) -> np.ndarray:
        return self.y_tt + self.y_tf

    def two_port(self) -> np.ndarray:
        return np.block([[self.y_ff, self.y_ft], [self.y_tf, self.y_tt]])

    def flows(self, u_from: np.ndarray, u_to: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-phase complex power entering the branch at each end (diagonal of S_ij)."""
        i_f = self.y_ff @ u_from + self.y_ft @ u_to
        i_t = self.y_tf @ u_from + self.y_tt @ u_to
        return u_from * np.conj(i_f), u_to * np.conj(i_t)


def line_admittance(line: LineSegment, bus: Bus, power_base: float) -> BranchAdmittance:
    ys = admittance_to_pu(line.series_admittance, bus.base_voltage, power_base)
    yf = admittance_to_pu(line.shunt_from, bus.base_voltage, power_base)
    yt = admittance_to_pu(line.shunt_to, bus.base_voltage, power_base)
    return BranchAdmittance(line.id, line.from_bus, line.to_bus, line.phases, line.phases,
                            ys + yf, -ys, -ys, ys + yt)


def _winding_matrix(connection: str) -> np.ndarray:
    return np.eye(3) if connection == "wye-g" else _DELTA / math.sqrt(3)


def transformer_admittance(
    trafo: TransformerBranch, hv: Bus, lv: Bus, power_base: float
) -> BranchAdmittance:
    if hv.phases != PHASES or lv.phases != PHASES:
        raise NetworkError(f"transformer {trafo.id}: both buses must carry phases abc")
    ratio = trafo.effective_ratio
    if not ratio > 0:
        raise NetworkError(f"transformer {trafo.id}: non-positive effective ratio {ratio}")
    z = trafo.impedance * (power_base / trafo.rated_power) * (trafo.rated_voltages[1] / lv.base_voltage) ** 2
    y = 1 / z
    t = ratio / (hv.base_voltage / lv.base_voltage)
    ch = _winding_matrix(trafo.connection[0])
    cl = _winding_matrix(trafo.connection[1])
    y_ff = y * ch.T @ ch / t**2
    y_ft = -y * ch.T @ cl / t
    y_tf = -y * cl.T @ ch / t
    y_tt = y * cl.T @ cl
    if trafo.connection[0] == "delta":
        y_ff = y_ff + DELTA_GROUNDING * abs(y) / t**2 * np.eye(3)
    if trafo.connection[1] == "delta":
        y_tt = y_tt + DELTA_GROUNDING * abs(y) * np.eye(3)
    return BranchAdmittance(trafo.id, trafo.from_bus, trafo.to_bus, PHASES, PHASES,
                            y_ff.astype(complex), y_ft.astype(complex),
                            y_tf.astype(complex), y_tt.astype(complex))


def build_admittance(model: NetworkModel) -> dict[str, BranchAdmittance]:
    """Per-unit two-port admittances for every line and transformer, keyed by id."""
    out: dict[str, BranchAdmittance] = {}
    for line in model.lines:
        fb, tb = model.bus(line.from_bus), model.bus(line.to_bus)
        if not (set(line.phases) <= set(fb.phases) and set(line.phases) <= set(tb.phases)):
            raise NetworkError(f"line {line.id}: phase-set mismatch across the branch")
        if not math.isclose(fb.base_voltage, tb.base_voltage, rel_tol=1e-9):
            raise NetworkError(f"line {line.id}: base voltage differs between its ends")
        out[line.id] = line_admittance(line, fb, model.power_base)
    for trafo in model.transformers:
        out[trafo.id] = transformer_admittance(
            trafo, model.bus(trafo.from_bus), model.bus(trafo.to_bus), model.power_base
        )
    return out
