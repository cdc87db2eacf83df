"""Command-line entry point: ``gridtwin <command> [options]``.

Every command reads an optional JSON config (``--config``) whose keys are the
long option names with dashes replaced by underscores; explicit flags win over
the config, which wins over built-in defaults. The resolved config is echoed to
``config.json`` in the output directory.

Exit codes: 0 success, 1 input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pandas as pd

from . import __version__, cases
from .dsse import (
    DsseError,
    assemble_problem,
    estimate_state,
    observability_analysis,
    residual_report,
    tap_sweep,
)
from .exportlimit import (
    DEFAULT_CARBON_INTENSITY,
    DEFAULT_PRICE,
    CurtailmentSeries,
    ExportScheme,
    default_schemes,
    estimate_curtailment,
    scheme_benefit,
    write_benefit,
)
from .netmodel import NetworkError, dump_network, load_network
from .powerflow import PowerFlowError, linearize, solve_powerflow, write_sensitivity, write_solution
from .telemetry import (
    RAW_MEASURANDS,
    SYNTHETIC_MEASURANDS,
    MeterSpec,
    TelemetryError,
    detect_quality_issues,
    ingest_csv,
    load_meter_specs,
    meter_specs_to_dict,
    synthesize_measurements,
    write_csv,
)

log = logging.getLogger("gridtwin")

ISO = "%Y-%m-%dT%H:%M:%SZ"

DEFAULTS = {
    "common": {"out": "out", "seed": 0, "jobs": 1},
    "powerflow": {"network": None, "linearize": None, "tol": 1e-8, "max_iter": 50},
    "synth": {"network": None, "meters": None, "mode": "synthetic", "periods": 96, "cadence": 30.0,
              "start": "2024-06-21T00:00:00Z", "sigma_scale": 1.0, "curtail_mw": None, "solar_kw": None},
    "quality": {"measurements": None, "meters": None, "stuck_min_len": 20, "gross_z_threshold": 8.0},
    "dsse": {"network": None, "measurements": None, "meters": None, "mode": "synthetic", "timestamp": None,
             "start": None, "end": None, "stride": 4, "quality": False, "tap_sweep": False,
             "residual_threshold": 6e-5, "tol": 1e-9, "max_iter": 100},
    "tap-sweep": {"network": None, "measurements": None, "meters": None, "start": None, "end": None,
                  "stride": 4, "transformers": None, "tap_min": None, "tap_max": None},
    "export-limit": {"network": None, "measurements": None, "meters": None, "estimates": None,
                     "curtailment": None, "reference": None, "solar_meter": None, "injection_bus": None,
                     "capacity_mw": None, "offset": 0.0, "stride": 4, "cadence": None,
                     "price": DEFAULT_PRICE, "carbon": DEFAULT_CARBON_INTENSITY, "u_max": 1.06,
                     "schemes": None, "plot": False},
}


class InputError(Exception):
    pass


# --------------------------------------------------------------------------
# config handling


def _resolve(args: argparse.Namespace, command: str) -> dict:
    cfg = dict(DEFAULTS["common"])
    cfg.update(DEFAULTS[command])
    if args.config:
        if not os.path.exists(args.config):
            raise InputError(f"config file not found: {args.config}")
        with open(args.config, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InputError(f"config: {exc}") from exc
        section = doc.get(command, {}) if isinstance(doc.get(command), dict) else {}
        shared = {k: v for k, v in doc.items() if not isinstance(v, dict) or k == "schemes"}
        for src in (shared, section):
            for k, v in src.items():
                key = k.replace("-", "_")
                if key in cfg:
                    cfg[key] = v
    for k, v in vars(args).items():
        if k in cfg and v is not None:
            cfg[k] = v
    return cfg


def _echo(cfg: dict, out: str) -> None:
    os.makedirs(out, exist_ok=True)
    echo = {k: v for k, v in cfg.items() if k not in ("out", "jobs")}
    with open(os.path.join(out, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(echo, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _need(cfg: dict, *keys: str) -> None:
    for k in keys:
        if cfg.get(k) is None:
            raise InputError(f"missing required option --{k.replace('_', '-')}")
        if k in ("network", "measurements", "meters", "estimates", "curtailment", "reference") and not os.path.exists(cfg[k]):
            raise InputError(f"file not found: {cfg[k]}")


def _utc(ts) -> pd.Timestamp:
    t = pd.Timestamp(ts)
    return t.tz_localize("UTC") if t.tzinfo is None else t.tz_convert("UTC")


def _select(series, cfg) -> list[pd.Timestamp]:
    if cfg.get("timestamp"):
        ts = _utc(cfg["timestamp"])
        if ts not in series.frame.index:
            raise InputError(f"timestamp {cfg['timestamp']} not in measurements")
        return [ts]
    stride = int(cfg.get("stride") or 1)
    if stride < 1:
        raise InputError("stride must be >= 1")
    idx = series.timestamps
    if cfg.get("start"):
        idx = idx[idx >= _utc(cfg["start"])]
    if cfg.get("end"):
        idx = idx[idx <= _utc(cfg["end"])]
    return list(idx[::stride])


def default_meters(model, mode: str = "synthetic") -> dict[str, MeterSpec]:
    """One meter at the slack (grid supply) and one per load and generator."""
    measurands = SYNTHETIC_MEASURANDS if mode == "synthetic" else RAW_MEASURANDS
    out = {}

    def rating(bus, va):
        vph = model.bus(bus).base_voltage / math.sqrt(3)
        return vph, max(2.0 * va / vph, 1.0)

    total = sum(abs(d.total_power) for d in model.loads) / 3 + sum(abs(g.total_power) for g in model.generators) / 3
    vph, irated = rating(model.slack_bus, total)
    out["pcc"] = MeterSpec("pcc", model.slack_bus, vph, irated, measurands)
    for dev in list(model.loads) + list(model.generators):
        vph, irated = rating(dev.bus, abs(dev.total_power) / max(len(dev.phases), 1))
        mid = f"m_{dev.id}"
        out[mid] = MeterSpec(mid, dev.bus, vph, irated, measurands, device=dev.id)
    return out


def _meters(cfg, model=None) -> dict[str, MeterSpec]:
    if cfg.get("meters"):
        return load_meter_specs(cfg["meters"])
    if model is None:
        raise InputError("missing required option --meters")
    return default_meters(model, cfg.get("mode", "synthetic"))


# --------------------------------------------------------------------------
# commands


def cmd_powerflow(cfg: dict) -> int:
    _need(cfg, "network")
    model = load_network(cfg["network"])
    out = cfg["out"]
    _echo(cfg, out)
    try:
        sol = solve_powerflow(model, tol=float(cfg["tol"]), max_iter=int(cfg["max_iter"]))
    except PowerFlowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print("mismatch history: " + " ".join(f"{h:.3e}" for h in exc.history), file=sys.stderr)
        return 2
    write_solution(sol, os.path.join(out, "voltages.csv"), os.path.join(out, "flows.csv"))
    if cfg.get("linearize"):
        write_sensitivity(linearize(model, sol, cfg["linearize"]), os.path.join(out, "sensitivity.csv"))
    print(f"converged in {sol.iterations} iterations (max mismatch {sol.max_mismatch:.2e} pu)")
    return 0


def synthetic_solutions(model, timestamps, curtail_mw=None, solar_kw=None):
    """One power flow per timestamp with daily load and solar shapes applied."""
    sb = model.power_base / 3
    lshape = cases.load_shape(timestamps)
    sshape = cases.clear_sky(timestamps)
    sols = []
    for t in range(len(timestamps)):
        inj = {d.id: np.asarray(d.power) * lshape[t] / sb for d in model.loads}
        for g in model.generators:
            cap = np.asarray(g.power, dtype=complex)
            if solar_kw is not None:
                cap = np.full(len(g.phases), solar_kw * 1e3 / len(g.phases), dtype=complex)
            p = cap * sshape[t]
            if curtail_mw is not None:
                total = p.real.sum()
                limit = curtail_mw * 1e6
                if total > limit:
                    p = p * (limit / total)
            inj[g.id] = p / sb
        sols.append(solve_powerflow(model, injections=inj))
    return sols


def cmd_synth(cfg: dict) -> int:
    _need(cfg, "network")
    model = load_network(cfg["network"])
    meters = _meters(cfg, model)
    out = cfg["out"]
    _echo(cfg, out)
    periods = int(cfg["periods"])
    if periods < 1:
        raise InputError("periods must be >= 1")
    cadence = float(cfg["cadence"])
    ts = pd.date_range(_utc(cfg["start"]), periods=periods, freq=pd.Timedelta(seconds=cadence))
    sols = synthetic_solutions(model, ts, cfg.get("curtail_mw"), cfg.get("solar_kw"))
    series = synthesize_measurements(sols, meters, seed=int(cfg["seed"]), timestamps=ts,
                                     sigma_scale=float(cfg["sigma_scale"]), cadence=cadence)
    write_csv(series, os.path.join(out, "measurements.csv"))
    with open(os.path.join(out, "meters.json"), "w", encoding="utf-8") as fh:
        json.dump(meter_specs_to_dict(meters), fh, indent=1, sort_keys=True)
        fh.write("\n")
    rows = []
    for t, sol in zip(ts, sols):
        for (b, p), v in zip(sol.state.nodes, sol.state.values):
            rows.append((t.strftime(ISO), b, p, f"{abs(v):.10f}", f"{math.degrees(np.angle(v)):.8f}"))
    pd.DataFrame(rows, columns=["timestamp", "bus", "phase", "vm_pu", "va_deg"]).to_csv(
        os.path.join(out, "truth.csv"), index=False, lineterminator="\n")
    pd.DataFrame({"timestamp": ts.strftime(ISO), "reference": cases.clear_sky(ts)}).to_csv(
        os.path.join(out, "solar_reference.csv"), index=False, float_format="%.10f", lineterminator="\n")
    print(f"wrote {periods} timestamps for {len(meters)} meters")
    return 0


def cmd_quality(cfg: dict) -> int:
    _need(cfg, "measurements")
    meters = load_meter_specs(cfg["meters"]) if cfg.get("meters") else None
    series = ingest_csv(cfg["measurements"], meters)
    out = cfg["out"]
    _echo(cfg, out)
    report = detect_quality_issues(series, stuck_min_len=int(cfg["stuck_min_len"]),
                                   gross_z_threshold=float(cfg["gross_z_threshold"]))
    with open(os.path.join(out, "quality.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(" ".join(f"{k}={v}" for k, v in report.summary().items()))
    return 0


def _estimate_one(job):
    model, series, ts, meters, mode, quality, tol, max_iter, threshold = job
    problem = assemble_problem(model, series, ts, meters, mode, quality)
    est = estimate_state(problem, tol=tol, max_iter=max_iter)
    obs = observability_analysis(problem, est, residual_threshold=threshold)
    return ts, est, residual_report(est, problem, threshold), obs


def _run_tap_sweep(model, series, meters, timestamps, cfg):
    subset = cfg.get("transformers")
    if isinstance(subset, str):
        subset = [s for s in subset.split(",") if s]
    bounds = None
    if cfg.get("tap_min") is not None or cfg.get("tap_max") is not None:
        bounds = (int(cfg.get("tap_min") if cfg.get("tap_min") is not None else -99),
                  int(cfg.get("tap_max") if cfg.get("tap_max") is not None else 99))
    new_model, report = tap_sweep(model, series, meters, timestamps, subset, bounds, seed=int(cfg["seed"]))
    out = cfg["out"]
    dump_network(new_model, os.path.join(out, "network_tapped.json"))
    scatter = report.scatter.copy()
    scatter["timestamp"] = scatter["timestamp"].dt.strftime(ISO)
    scatter.to_csv(os.path.join(out, "tap_scatter.csv"), index=False, float_format="%.10f", lineterminator="\n")
    with open(os.path.join(out, "tap_report.json"), "w", encoding="utf-8") as fh:
        json.dump({"taps_before": report.taps_before, "taps_after": report.taps_after,
                   "rms_before_pu": report.rms_before, "rms_after_pu": report.rms_after,
                   "passes": report.passes, "skipped": [list(s) for s in report.skipped]},
                  fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"tap sweep: rms {report.rms_before:.5f} -> {report.rms_after:.5f} pu; taps {report.taps_after}")
    return new_model


def cmd_tap_sweep(cfg: dict) -> int:
    _need(cfg, "network", "measurements", "meters")
    model = load_network(cfg["network"])
    meters = load_meter_specs(cfg["meters"])
    series = ingest_csv(cfg["measurements"], meters)
    _echo(cfg, cfg["out"])
    _run_tap_sweep(model, series, meters, _select(series, cfg), cfg)
    return 0


def cmd_dsse(cfg: dict) -> int:
    _need(cfg, "network", "measurements", "meters")
    model = load_network(cfg["network"])
    meters = load_meter_specs(cfg["meters"])
    series = ingest_csv(cfg["measurements"], meters)
    out = cfg["out"]
    _echo(cfg, out)
    stamps = _select(series, cfg)
    if not stamps:
        raise InputError("no timestamps selected")
    if cfg.get("tap_sweep"):
        model = _run_tap_sweep(model, series, meters, stamps, cfg)
    quality = detect_quality_issues(series) if cfg.get("quality") else None
    jobs = [(model, series, ts, meters, cfg["mode"], quality, float(cfg["tol"]), int(cfg["max_iter"]),
             float(cfg["residual_threshold"])) for ts in stamps]
    n = max(1, int(cfg.get("jobs") or 1))
    if n > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(_estimate_one, jobs, chunksize=max(1, len(jobs) // (4 * n))))
    else:
        results = [_estimate_one(j) for j in jobs]

    header = f"# power_base_va={model.power_base:.6g} voltages in pu of phase-to-neutral base\n"
    est_rows, res_frames, obs_doc, conv = [], [], {}, []
    for ts, est, res, obs in results:
        stamp = ts.strftime(ISO)
        for (b, p), v in zip(est.state.nodes, est.state.values):
            est_rows.append((stamp, b, p, f"{abs(v):.10f}", f"{math.degrees(np.angle(v)):.8f}", obs.label(b)))
        res = res.copy()
        res.insert(0, "timestamp", stamp)
        res_frames.append(res)
        obs_doc[stamp] = obs.to_dict()
        conv.append((stamp, est.iterations, f"{est.objective:.10g}", f"{est.gradient_norm:.6g}", int(est.converged)))
    with open(os.path.join(out, "estimates.csv"), "w", newline="") as fh:
        fh.write(header)
        pd.DataFrame(est_rows, columns=["timestamp", "bus", "phase", "vm_pu", "va_deg", "label"]).to_csv(
            fh, index=False, lineterminator="\n")
    with open(os.path.join(out, "residuals.csv"), "w", newline="") as fh:
        fh.write(f"# power_base_va={model.power_base:.6g} residual in V, W or var; residual_pu per unit\n")
        pd.concat(res_frames, ignore_index=True).to_csv(fh, index=False, float_format="%.10g", lineterminator="\n")
    with open(os.path.join(out, "observability.json"), "w", encoding="utf-8") as fh:
        json.dump(obs_doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    pd.DataFrame(conv, columns=["timestamp", "iterations", "objective", "gradient_norm", "converged"]).to_csv(
        os.path.join(out, "convergence.csv"), index=False, lineterminator="\n")
    worst = max(float(np.max(np.abs(r["weighted_residual"].to_numpy()), initial=0.0)) for _, _, r, _ in results)
    print(f"estimated {len(results)} timestamps; max |weighted residual| {worst:.3f}")
    return 0


def _read_table(path) -> pd.DataFrame:
    df = pd.read_csv(path, comment="#")
    if "timestamp" not in df.columns:
        raise InputError(f"{path}: no timestamp column")
    df["timestamp"] = pd.to_datetime(df["timestamp"], utc=True)
    return df


def cmd_export_limit(cfg: dict) -> int:
    _need(cfg, "network")
    model = load_network(cfg["network"])
    out = cfg["out"]
    gens = list(model.generators)
    bus = cfg.get("injection_bus") or (gens[0].bus if gens else None)
    if bus is None:
        raise InputError("no generator in the network; give --injection-bus")
    model.bus(bus)
    schemes = [ExportScheme.from_dict(s) for s in cfg["schemes"]] if cfg.get("schemes") else default_schemes(float(cfg["u_max"]))
    cfg["schemes"] = [dict(kind=s.kind, power_factor=s.power_factor, tolerance_pct=s.tolerance_pct,
                           u_max=s.u_max, name=s.name) for s in schemes]
    stride = int(cfg["stride"])
    if stride < 1:
        raise InputError("stride must be >= 1")

    if cfg.get("curtailment"):
        _need(cfg, "curtailment")
        df = _read_table(cfg["curtailment"]).set_index("timestamp")
        if "curtailment" in df.columns:
            frame = pd.DataFrame({"potential": df.get("potential", df["curtailment"]),
                                  "measured": df.get("measured", 0.0), "curtailment": df["curtailment"].clip(lower=0)})
            curt = CurtailmentSeries(frame)
        else:
            curt = estimate_curtailment(df["measured"], df["potential"], 1.0, 0.0)
        cadence = float(cfg["cadence"]) if cfg.get("cadence") else float(
            np.median(np.diff(curt.frame.index.asi8)) / 1e9) if len(curt) > 1 else 120.0
    else:
        _need(cfg, "measurements", "meters", "reference")
        meters = load_meter_specs(cfg["meters"])
        series = ingest_csv(cfg["measurements"], meters).stride(stride)
        mid = cfg.get("solar_meter")
        if mid is None:
            cands = [m.meter_id for m in meters.values() if m.device in {g.id for g in gens}]
            if not cands:
                raise InputError("no generator meter; give --solar-meter")
            mid = cands[0]
        chans = series.channels(mid)
        if "p_tot" in chans:
            measured = series.channel(mid, "p_tot") / 1e6
        else:
            measured = sum(series.channel(mid, f"p_{p}") for p in "abc") / 1e6
        ref = _read_table(cfg["reference"]).set_index("timestamp")["reference"]
        cap = cfg.get("capacity_mw")
        if cap is None:
            cap = sum(g.total_power.real for g in gens) / 1e6
        curt = estimate_curtailment(measured, ref, float(cap), float(cfg["offset"]))
        cadence = float(cfg["cadence"]) if cfg.get("cadence") else series.cadence
    _echo(cfg, out)

    sol = solve_powerflow(model)
    m = linearize(model, sol, bus)
    base = sol.state.magnitudes
    if cfg.get("estimates"):
        _need(cfg, "estimates")
        est = _read_table(cfg["estimates"])
        order = {n: i for i, n in enumerate(m.nodes)}
        est["k"] = [order.get((b, p), -1) for b, p in zip(est["bus"], est["phase"])]
        est = est[est["k"] >= 0]
        wide = est.pivot(index="timestamp", columns="k", values="vm_pu").reindex(columns=range(len(m.nodes)))
        wide = wide.reindex(curt.frame.index).ffill()
        v_twin = wide.to_numpy(dtype=float)
        fill = np.isnan(v_twin)
        v_twin[fill] = np.broadcast_to(base, v_twin.shape)[fill]
    else:
        v_twin = base
    report = scheme_benefit(curt, schemes, m, v_twin, float(cfg["price"]), float(cfg["carbon"]), cadence)
    write_benefit(report, out, plot=bool(cfg.get("plot")))
    for row in report.summary.itertuples():
        print(f"{row.scheme}: {row.energy_mwh:.3f} MWh, revenue {row.revenue:.2f}, {row.emissions_tco2e:.3f} tCO2e")
    return 0


COMMANDS = {
    "powerflow": cmd_powerflow,
    "synth": cmd_synth,
    "quality": cmd_quality,
    "dsse": cmd_dsse,
    "tap-sweep": cmd_tap_sweep,
    "export-limit": cmd_export_limit,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridtwin", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"gridtwin {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, help="worker processes for per-timestamp work")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("powerflow", parents=[common], help="solve one power flow")
    p.add_argument("--network")
    p.add_argument("--linearize", metavar="BUS", help="also write voltage sensitivities to injection at BUS")
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", type=int)

    p = sub.add_parser("synth", parents=[common], help="synthesize a day of meter data")
    p.add_argument("--network")
    p.add_argument("--meters")
    p.add_argument("--mode", choices=["synthetic", "raw_send"])
    p.add_argument("--periods", type=int)
    p.add_argument("--cadence", type=float)
    p.add_argument("--start")
    p.add_argument("--sigma-scale", type=float)
    p.add_argument("--curtail-mw", type=float, help="clip total generator output at this many MW")
    p.add_argument("--solar-kw", type=float, help="generator capacity override (kW, three-phase)")

    p = sub.add_parser("quality", parents=[common], help="screen meter data")
    p.add_argument("--measurements")
    p.add_argument("--meters")
    p.add_argument("--stuck-min-len", type=int)
    p.add_argument("--gross-z-threshold", type=float)

    for name in ("dsse", "tap-sweep"):
        p = sub.add_parser(name, parents=[common], help="state estimation" if name == "dsse" else "fit tap positions")
        p.add_argument("--network")
        p.add_argument("--measurements")
        p.add_argument("--meters")
        p.add_argument("--start")
        p.add_argument("--end")
        p.add_argument("--stride", type=int)
        p.add_argument("--transformers", help="comma-separated transformer ids for the tap sweep")
        p.add_argument("--tap-min", type=int)
        p.add_argument("--tap-max", type=int)
        if name == "dsse":
            p.add_argument("--mode", choices=["synthetic", "raw_send"])
            p.add_argument("--timestamp")
            p.add_argument("--quality", action="store_true", default=None)
            p.add_argument("--tap-sweep", action="store_true", default=None)
            p.add_argument("--residual-threshold", type=float)
            p.add_argument("--tol", type=float)
            p.add_argument("--max-iter", type=int)

    p = sub.add_parser("export-limit", parents=[common], help="curtailment and export-limit benefit")
    p.add_argument("--network")
    p.add_argument("--measurements")
    p.add_argument("--meters")
    p.add_argument("--estimates", help="estimates.csv from dsse (v_twin per timestep)")
    p.add_argument("--curtailment", help="CSV with timestamp and curtailment (MW), or potential and measured")
    p.add_argument("--reference", help="CSV with timestamp and normalised reference profile")
    p.add_argument("--solar-meter")
    p.add_argument("--injection-bus")
    p.add_argument("--capacity-mw", type=float)
    p.add_argument("--offset", type=float)
    p.add_argument("--stride", type=int)
    p.add_argument("--cadence", type=float)
    p.add_argument("--price", type=float)
    p.add_argument("--carbon", type=float)
    p.add_argument("--u-max", type=float)
    p.add_argument("--plot", action="store_true", default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args, args.command)
        return COMMANDS[args.command](cfg)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return 1
    except (InputError, NetworkError, TelemetryError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except PowerFlowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.history:
            print("mismatch history: " + " ".join(f"{h:.3e}" for h in exc.history), file=sys.stderr)
        return 2
    except (DsseError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        hist = getattr(exc, "history", None)
        if hist:
            print("gradient norm history: " + " ".join(f"{h:.3e}" for h in hist), file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
