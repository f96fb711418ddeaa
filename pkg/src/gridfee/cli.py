"""``gridfee`` command line.

Exit codes: 0 success, 2 configuration or input error, 3 degenerate
computation (a share denominator is zero), 4 invalid scenario spec.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from collections.abc import Sequence
from pathlib import Path

from gridfee import runs
from gridfee.config import RunConfig
from gridfee.errors import DegenerateTotal, GridFeeError, SpecError
from gridfee.scenarios import ScenarioResult, aggregate_customers, evaluate_fleet
from gridfee.synth import FleetSpec, materialize_fleet, write_fleet
from gridfee.timeseries import load_meter_csv, resample_fleet

EXIT_OK, EXIT_CONFIG, EXIT_DEGENERATE, EXIT_SPEC = 0, 2, 3, 4


def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file (key=value or JSON); defaults to $GRIDFEE_CONFIG")


def _add_peak(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("peak indicator")
    g.add_argument("--peak-mode", choices=("percentile", "absolute"))
    g.add_argument("--peak-fraction", type=float, help="share of slots above the threshold (0.25 = 75th percentile)")
    g.add_argument("--peak-absolute-kw", type=float, help="absolute threshold in kW, e.g. a feeder rating")
    g.add_argument("--k-kw", type=float, help="logistic strictness in kW (0 gives a step)")
    g.add_argument("--k-relative", type=float, help="strictness as a fraction of |threshold|")
    g = p.add_argument_group("impact factors")
    g.add_argument("--clamp-negative-w", action="store_true", default=None)
    g.add_argument("--leave-one-out", action="store_true", default=None)
    g.add_argument("--resample", type=int, metavar="SECONDS", help="average the fleet to this interval first")


def _add_tariff(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("tariff")
    g.add_argument("--rate", type=float, help="volumetric $/kWh")
    g.add_argument("--export-rate", type=float, help="net-metering $/kWh")
    g.add_argument("--export-mode", choices=("credit", "verbatim"))
    g.add_argument("--pi-w", type=float, help="fraction of revenue allocated by W")
    g.add_argument("--pi-v", type=float, help="fraction of revenue allocated by V")
    g.add_argument("--revenue", type=float, help="explicit target revenue in $ (default: match legacy bills)")
    g.add_argument("--period-start", help="assessment period start (ISO 8601)")
    g.add_argument("--period-end", help="assessment period end, exclusive")
    g.add_argument("--bin-width", type=float, help="histogram bin width in percentage points")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridfee", description="Grid-access fees from smart-meter demand data.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a seeded synthetic fleet")
    _add_config(p)
    p.add_argument("--homes", type=int)
    p.add_argument("--ev", type=float, help="EV fraction")
    p.add_argument("--pv", type=float, help="PV fraction")
    p.add_argument("--days", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--interval", type=int, help="seconds per sample")
    p.add_argument("--start", help="first timestamp (UTC, ISO 8601)")
    p.add_argument("--utc-offset", type=float, help="local time zone offset in hours")
    p.add_argument("--ev-mode", choices=("evening", "offpeak"))
    p.add_argument("--format", choices=("csv", "npz"), default="csv")
    p.add_argument("--out", required=True)

    p = sub.add_parser("ingest", help="validate a meter CSV and store it as a canonical fleet")
    _add_config(p)
    p.add_argument("input")
    p.add_argument("--timestamp-col", default="timestamp")
    p.add_argument("--customer-col", default="customer_id")
    p.add_argument("--kw-col", default="kw")
    p.add_argument("--interval", type=int, help="expected seconds per sample (inferred when absent)")
    p.add_argument("--resample", type=int, metavar="SECONDS")
    p.add_argument("--format", choices=("csv", "npz"), default="npz")
    p.add_argument("--out", required=True)

    for name, helptext in (("impacts", "compute W and V impact factors"), ("bill", "legacy and grid-access bills")):
        p = sub.add_parser(name, help=helptext)
        _add_config(p)
        p.add_argument("fleet", nargs="?", help="fleet CSV or .npz (or fleet.path in the config)")
        _add_peak(p)
        if name == "bill":
            _add_tariff(p)
        p.add_argument("--out", required=True)

    p = sub.add_parser("scenario", help="run a scenario spec file")
    _add_config(p)
    p.add_argument("spec")
    p.add_argument("--out", required=True)

    p = sub.add_parser("aggregate", help="bill groups of customers as single entities")
    _add_config(p)
    p.add_argument("fleet", nargs="?")
    p.add_argument("--group", action="append", required=True, metavar="ID,ID[,...]", help="repeat for each group")
    _add_peak(p)
    _add_tariff(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="summarise a results directory")
    p.add_argument("results")
    p.add_argument("--json", action="store_true", help="print machine-readable JSON")
    return parser


def _overrides(a: argparse.Namespace) -> dict:
    get = lambda name: getattr(a, name, None)  # noqa: E731
    return {
        "peak.mode": get("peak_mode"),
        "peak.fraction": get("peak_fraction"),
        "peak.absolute_kw": get("peak_absolute_kw"),
        "peak.k_kw": get("k_kw"),
        "peak.k_relative": get("k_relative"),
        "impacts.clamp_negative_w": get("clamp_negative_w"),
        "impacts.leave_one_out": get("leave_one_out"),
        "tariff.volumetric_rate": get("rate"),
        "tariff.export_rate": get("export_rate"),
        "tariff.export_mode": get("export_mode"),
        "tariff.pi_w": get("pi_w"),
        "tariff.pi_v": get("pi_v"),
        "tariff.period_start": get("period_start"),
        "tariff.period_end": get("period_end"),
        "revenue.amount": get("revenue"),
        "output.bin_width": get("bin_width"),
        "fleet.path": get("fleet"),
        "fleet.resample_s": get("resample"),
        "fleet.seed": get("seed"),
        "fleet.n_homes": get("homes"),
        "fleet.ev_fraction": get("ev"),
        "fleet.pv_fraction": get("pv"),
        "fleet.days": get("days"),
        "fleet.interval_s": get("interval") if a.command == "synth" else None,
        "fleet.start": get("start"),
        "fleet.utc_offset_hours": get("utc_offset"),
        "fleet.ev_mode": get("ev_mode"),
    }


def _config(a: argparse.Namespace) -> RunConfig:
    return RunConfig.resolve(getattr(a, "config", None), _overrides(a))


def _out(a: argparse.Namespace) -> Path:
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(a: argparse.Namespace) -> int:
    cfg = _config(a)
    spec = FleetSpec.from_dict(cfg.fleet_fields())
    fleet, cats = materialize_fleet(spec)
    out = _out(a)
    data = write_fleet(fleet, out, categories=cats, spec=spec, fmt=a.format)
    files = [data, out / "fleet.manifest.json"]
    runs.write_manifest(out, "synth", files, config=cfg.echo(), seed=spec.seed, extra={"fleet": spec.to_dict()})
    print(f"wrote {len(fleet)} homes x {fleet.grid.count} samples to {data}")
    return EXIT_OK


def cmd_ingest(a: argparse.Namespace) -> int:
    cfg = _config(a)
    schema = {"timestamp": a.timestamp_col, "customer_id": a.customer_col, "kw": a.kw_col}
    fleet = load_meter_csv(a.input, schema, interval_s=a.interval)
    if a.resample is not None and a.resample != fleet.grid.interval_s:
        fleet = resample_fleet(fleet, a.resample)
    out = _out(a)
    extra = {"source": Path(a.input).name}
    data = write_fleet(fleet, out, fmt=a.format, extra=extra)
    runs.write_manifest(out, "ingest", [data, out / "fleet.manifest.json"], config=cfg.echo(), seed=None, extra=extra)
    print(f"ingested {len(fleet)} customers x {fleet.grid.count} samples ({fleet.grid.interval_s}s) into {data}")
    return EXIT_OK


def _evaluate(cfg: RunConfig, scenario_id: str) -> ScenarioResult:
    path = cfg.get("fleet.path")
    if path is None:
        raise GridFeeError("no fleet given (pass a path or set fleet.path)")
    fleet, cats = runs.load_fleet_with_categories(path, cfg.get("fleet.resample_s"))
    return evaluate_fleet(
        fleet, cfg.peak(), cfg.tariff(), scenario_id=scenario_id,
        revenue=cfg.revenue(), options=cfg.impacts(), categories=cats,
    )


def _config_echo(cfg: RunConfig) -> dict:
    echo = cfg.echo()
    path = echo["values"].get("fleet.path")
    if path is not None:
        # only the file name; absolute paths would make manifests location-dependent
        echo["values"]["fleet.path"] = Path(path).name
    return echo


def cmd_impacts(a: argparse.Namespace) -> int:
    cfg = _config(a)
    result = _evaluate(cfg, "impacts")
    out = _out(a)
    files = runs.write_impacts(result, out)
    runs.write_manifest(out, "impacts", files, config=_config_echo(cfg), seed=None, result=result)
    r = result.report
    print(f"threshold {result.indicator.threshold_kw:.6g} kW, k {result.indicator.k_kw:.6g} kW; "
          f"sum w_share {math.fsum(r.w_share):.12f}, sum v_share {math.fsum(r.v_share):.12f}")
    return EXIT_OK


def cmd_bill(a: argparse.Namespace) -> int:
    cfg = _config(a)
    result = _evaluate(cfg, "bill")
    out = _out(a)
    bw = cfg.get("output.bin_width", 10.0)
    files = runs.write_impacts(result, out) + runs.write_bills(result, out, bw)
    runs.write_manifest(out, "bill", files, config=_config_echo(cfg), seed=None, result=result)
    t = result.statement.summary()
    print(f"legacy total ${t['sum_bill_old']:.2f}, grid-access total ${t['sum_bill_new']:.2f} "
          f"(relative gap {t['revenue_conserved_rel_err']:.2e})")
    return EXIT_OK


def cmd_scenario(a: argparse.Namespace) -> int:
    config = RunConfig.resolve(a.config)
    spec = runs.load_scenario(a.spec, config)
    run = runs.execute(spec)
    runs.write_run(run, a.out)
    t = run.result.statement.summary()
    print(f"{spec.scenario_id}: {len(run.result.fleet)} homes, threshold {run.result.indicator.threshold_kw:.6g} kW, "
          f"grid-access total ${t['sum_bill_new']:.2f}")
    for g in run.aggregated.aggregation if run.aggregated is not None else ():
        print(f"  {g.group_id}: saves ${g.savings:.2f} ({g.savings_pct:.2f}%) by aggregating")
    return EXIT_OK


def cmd_aggregate(a: argparse.Namespace) -> int:
    cfg = _config(a)
    groups = [tuple(m.strip() for m in g.split(",") if m.strip()) for g in a.group]
    if any(not g for g in groups):
        raise GridFeeError("empty --group")
    base = _evaluate(cfg, "aggregate")
    agg = aggregate_customers(base, groups)
    out = _out(a)
    bw = cfg.get("output.bin_width", 10.0)
    files = runs.write_aggregation(agg, out) + runs.write_bills(agg, out, bw, prefix="aggregated_")
    runs.write_manifest(out, "aggregate", files, config=_config_echo(cfg), seed=None, result=base,
                        extra={"groups": [list(g) for g in groups]})
    for g in agg.aggregation:
        print(f"{g.group_id}: individual ${g.individual_total:.2f}, aggregated ${g.group_bill_new:.2f}, "
              f"savings {g.savings_pct:.2f}%")
    return EXIT_OK


def _read_json(path: Path) -> dict | None:
    return json.loads(path.read_text()) if path.exists() else None


def cmd_report(a: argparse.Namespace) -> int:
    d = Path(a.results)
    manifest = _read_json(d / "manifest.json")
    if manifest is None:
        raise GridFeeError(f"{d} has no manifest.json")
    summary = _read_json(d / "summary.json") or _read_json(d / "aggregated_summary.json")
    payload = {"manifest": manifest, "summary": summary}
    if (d / "aggregation.csv").exists():
        payload["aggregation"] = (d / "aggregation.csv").read_text().splitlines()
    if a.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
        return EXIT_OK
    print(f"command: {manifest['command']}")
    if "threshold_kw" in manifest:
        print(f"peak threshold: {manifest['threshold_kw']:.6g} kW (k = {manifest['k_kw']:.6g} kW)")
    if manifest.get("seed") is not None:
        print(f"seed: {manifest['seed']}")
    if summary is not None:
        t = summary["totals"]
        print(f"customers: {t['customers']}  legacy ${t['sum_bill_old']:.2f}  grid-access ${t['sum_bill_new']:.2f}")
        for cat, s in sorted(summary.get("categories", {}).items()):
            pc = s["pct_change"]
            if pc.get("count"):
                print(f"  {cat:<12} n={s['customers']:<4} mean change {pc['mean']:+7.2f}%  "
                      f"up {pc['n_increase']:<4} down {pc['n_decrease']}")
    for row in payload.get("aggregation", [])[1:]:
        parts = row.split(",")
        if parts[1] == "aggregated":
            print(f"  {parts[0]}: savings ${parts[5]} ({float(parts[6]):.2f}%)")
    print("files:")
    for name, digest in manifest["files"].items():
        print(f"  {name}  {digest[:16]}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "impacts": cmd_impacts,
    "bill": cmd_bill,
    "scenario": cmd_scenario,
    "aggregate": cmd_aggregate,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except SpecError as exc:
        print(f"gridfee: spec error: {exc}", file=sys.stderr)
        return EXIT_SPEC
    except DegenerateTotal as exc:
        print(f"gridfee: degenerate computation: {exc}. "
              "The impact-factor total is zero, so shares are undefined; "
              "check the fleet or choose a different peak threshold.", file=sys.stderr)
        return EXIT_DEGENERATE
    except (GridFeeError, OSError) as exc:
        print(f"gridfee: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
