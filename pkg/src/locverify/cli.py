"""Command-line entry point; every subcommand reads files and writes files."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .adversary import AttackConfig, apply_attack, assign_claims, framing_attack, random_attack
from .confidence import LOWER_FWD, LOWER_REV, UPPER_FWD, UPPER_REV, all_pair_flags, decide
from .constants import DEFAULT_GRID_DEG, DEFAULT_PROBES, DEFAULT_THRESHOLD, DEFAULT_TOLERANCE, WILD_TOLERANCE
from .geo import GeoPoint, haversine
from .harness import (
    ConfigError,
    ExperimentConfig,
    World,
    analyze,
    breaking_point_table,
    reference_count_sensitivity,
    resolve_model,
    resolve_zone_map,
    run_attack,
    run_baseline,
    sweep_breaking_point,
    write_csv,
    write_json,
    write_report,
)
from .ingest import (
    IngestError,
    analyze_input,
    build_analysis_input,
    consistency_report,
    fetch_payloads,
    load_cities,
    load_default_cities,
    load_descriptors,
    load_external_locations,
    load_payload_dir,
    DEFAULT_URL_TEMPLATE,
)
from .netgen import MeasurementSet, Network, ProbeNoise, generate_network, simulate_measurements, write_record_dir
from .propagation import ModelError, build_default_model, build_model, read_samples_csv
from .schedule import ReferenceSchedule, build_schedule

log = logging.getLogger("locverify")


def _emit_rows(path, rows: list[dict], columns: list[str]) -> None:
    """CSV unless the path ends in ``.json``."""
    if str(path).lower().endswith(".json"):
        write_json(path, [{c: r.get(c) for c in columns} for r in rows])
    else:
        write_csv(path, rows, columns)


def _node_list(text: str | None, n: int) -> np.ndarray | None:
    if not text:
        return None
    nodes = np.array(sorted({int(x) for x in text.split(",") if x.strip()}), dtype=np.int64)
    if len(nodes) and (nodes[0] < 0 or nodes[-1] >= n):
        raise ValueError(f"node ids must lie in [0, {n})")
    return nodes


def _load_world(args) -> tuple[Network, MeasurementSet]:
    zones = resolve_zone_map(args.zones)
    net = Network.load(args.network, zones)
    ms = MeasurementSet.load(args.measurements)
    if ms.n != net.n:
        raise ValueError(f"measurement set covers {ms.n} nodes, network has {net.n}")
    return net, ms


def _beacon(args) -> bytes:
    if args.beacon_file:
        data = Path(args.beacon_file).read_bytes()
        text = data.strip()
        try:
            return bytes.fromhex(text.decode("ascii"))
        except (UnicodeDecodeError, ValueError):
            return data
    return bytes.fromhex(args.beacon)


def _read_config(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return doc


def _experiment(doc: dict, args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_dict(doc.get("experiment", doc))
    over = {}
    for name in ("repetitions", "master_seed", "workers"):
        v = getattr(args, name, None)
        if v is not None:
            over[name] = v
    return replace(cfg, **over) if over else cfg


# subcommands ----------------------------------------------------------------

def cmd_generate_network(args) -> int:
    zones = resolve_zone_map(args.zones)
    net = generate_network(args.n, zones, args.seed)
    net = replace(net, zone_map_id=args.zones)
    net.save(args.out)
    log.info("wrote %d nodes to %s", net.n, args.out)
    return 0


def cmd_schedule(args) -> int:
    net = Network.load(args.network, resolve_zone_map(args.zones))
    sched = build_schedule(_beacon(args), net.keys(), args.t)
    sched.save(args.out)
    sizes = sched.sizes()
    log.info("schedule: n=%d, references per node min %d / median %d / max %d",
             sched.n, sizes.min(), int(np.median(sizes)), sizes.max())
    return 0


def cmd_simulate(args) -> int:
    net = Network.load(args.network, resolve_zone_map(args.zones))
    sched = ReferenceSchedule.load(args.schedule)
    if sched.n != net.n:
        raise ValueError("schedule and network sizes differ")
    model = resolve_model(args.model)
    noise = ProbeNoise(args.queue_mean, args.hash_latency_ms)
    ms = simulate_measurements(net, sched, model, args.seed, args.probes, noise)
    ms.save(args.out)
    if args.records:
        write_record_dir(ms, args.records)
    log.info("wrote %d pairs to %s", len(ms.pairs), args.out)
    return 0


def cmd_localize(args) -> int:
    net, ms = _load_world(args)
    model = resolve_model(args.model)
    zones = net.zone_map
    nodes = _node_list(args.nodes, net.n)
    rng = np.random.default_rng(args.seed)
    an = analyze(World(net, None, ms), model, zones, nodes, r_target=args.r_target, subset_rng=rng, verify=False)
    true = net.true_coords()
    err = haversine(true[an.nodes, 0], true[an.nodes, 1], an.est[:, 0], an.est[:, 1])
    rows = [{
        "node": int(i),
        "est_lat": float(an.est[k, 0]),
        "est_lon": float(an.est[k, 1]),
        "residual_km": float(an.residual[k]),
        "error_km_vs_truth": float(err[k]),
        "converged": bool(an.converged[k]),
    } for k, i in enumerate(an.nodes)]
    _emit_rows(args.out, rows, ["node", "est_lat", "est_lon", "residual_km", "error_km_vs_truth", "converged"])
    log.info("localized %d nodes, median error %.1f km", len(rows), float(np.median(err)) if len(err) else float("nan"))
    return 0


def cmd_verify_zone(args) -> int:
    net, ms = _load_world(args)
    model = resolve_model(args.model)
    zones = net.zone_map
    nodes = _node_list(args.nodes, net.n)
    an = analyze(World(net, None, ms), model, zones, nodes, grid_deg=args.grid)
    claimed = net.claimed_coords()
    cz = zones.classify(claimed[an.nodes, 0], claimed[an.nodes, 1])
    rows = [{
        "node": int(i),
        "claimed_zone": zones.ids[cz[k]] if cz[k] >= 0 else "",
        "winner_zone": an.winner[k] or "",
        "winner_mass": float(an.winner_mass[k]),
        "verified": bool(an.verified[k]),
    } for k, i in enumerate(an.nodes)]
    _emit_rows(args.out, rows, ["node", "claimed_zone", "winner_zone", "winner_mass", "verified"])
    if args.dump:
        write_json(args.dump, {"grid_deg": args.grid, "nodes": rows})
    log.info("zone verification rate %.3f", float(np.mean(an.verified)) if len(rows) else float("nan"))
    return 0


def cmd_confidence(args) -> int:
    net, ms = _load_world(args)
    model = resolve_model(args.model)
    flags = all_pair_flags(ms, net.claimed_coords(), model, args.tau)
    a, b = ms.pairs[:, 0], ms.pairs[:, 1]

    def per_node(mask):
        m = mask.astype(float)
        return np.bincount(a, m, net.n) + np.bincount(b, m, net.n)

    deg = per_node(np.ones(len(flags), dtype=bool))
    n_pass = per_node(flags == 0)
    n_low = per_node((flags & (LOWER_FWD | LOWER_REV)) != 0)
    n_up = per_node((flags & (UPPER_FWD | UPPER_REV)) != 0)
    nodes = _node_list(args.nodes, net.n)
    nodes = np.flatnonzero(deg > 0) if nodes is None else nodes
    rows = []
    for i in nodes:
        if deg[i] == 0:
            raise ValueError(f"node {i} has no measured references")
        score = float(n_pass[i] / deg[i])
        rows.append({
            "node": int(i),
            "score": score,
            "decision": decide(score, args.threshold),
            "n_pass": int(n_pass[i]),
            "n_fail_lower": int(n_low[i]),
            "n_fail_upper": int(n_up[i]),
        })
    _emit_rows(args.out, rows, ["node", "score", "decision", "n_pass", "n_fail_lower", "n_fail_upper"])
    return 0


def cmd_attack(args) -> int:
    net, ms = _load_world(args)
    model = resolve_model(args.model)
    if args.config:
        cfg = AttackConfig.load(args.config, net.n)
    else:
        if args.adversarial is None:
            raise ValueError("give --config or --adversarial")
        cfg = random_attack(net.n, args.adversarial, args.claiming, args.seed,
                            jitter=args.jitter, slowdown=args.slowdown)
    net2 = assign_claims(net, cfg)
    ms2 = apply_attack(net2, ms, cfg, model)
    if cfg.framing_targets:
        ms2 = framing_attack(net2, ms2, cfg, model, args.tau)
    net2.save(args.out_network)
    ms2.save(args.out_measurements)
    if args.save_config:
        cfg.save(args.save_config)
    log.info("attack applied: %d adversarial, %d claiming", len(cfg.adversarial), len(cfg.claiming))
    return 0


def cmd_sweep(args) -> int:
    cfg = _experiment(_read_config(args.config), args) if args.config else ExperimentConfig(
        n=args.n, repetitions=args.repetitions or 4, master_seed=args.master_seed or 0, workers=args.workers or 1)
    fractions = [float(x) for x in args.fractions.split(",")]
    reports = sweep_breaking_point(cfg, fractions)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = breaking_point_table(reports)
    write_csv(out / "breaking_point.csv", table, ["claimed", "reject", "TP", "FP", "FN", "TN", "HW", "recall"])
    write_json(out / "sweep.json", [{k: v for k, v in r.items() if k != "nodes"} for r in reports])
    for row in table:
        log.info("claimed=%.2f reject=%s TP=%s FP=%s FN=%s recall=%s", row["claimed"], row["reject"],
                 row["TP"], row["FP"], row["FN"], row["recall"])
    return 0


def cmd_run_all(args) -> int:
    """Execute a config document: ``{"experiment": {...}, "runs": [...], ...}``."""
    doc = _read_config(args.config)
    cfg = _experiment(doc, args)
    runs = doc.get("runs") or (["baseline"] if not cfg.adversarial else ["attack"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", {**doc, "experiment": cfg.to_dict()})
    for kind in runs:
        log.info("running %s", kind)
        if kind == "baseline":
            write_report(run_baseline(replace(cfg, adversarial=0, claiming=None, framing=0)), out / "baseline")
        elif kind == "attack":
            write_report(run_attack(cfg), out / "attack")
        elif kind == "sweep":
            fr = doc.get("fractions", [0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35])
            reports = sweep_breaking_point(cfg, fr)
            (out / "sweep").mkdir(exist_ok=True)
            write_csv(out / "sweep" / "breaking_point.csv", breaking_point_table(reports),
                      ["claimed", "reject", "TP", "FP", "FN", "TN", "HW", "recall"])
            write_json(out / "sweep" / "sweep.json", [{k: v for k, v in r.items() if k != "nodes"} for r in reports])
        elif kind == "references":
            rv = doc.get("r_values", [10, 20, 40, 80, 160])
            rows = reference_count_sensitivity(cfg, rv, verify=bool(doc.get("verify", True)))
            write_json(out / "references.json", rows)
            write_csv(out / "references.csv", rows, ["R", "median_error_km", "zone_rate"])
        else:
            raise ConfigError(f"unknown run kind {kind!r}")
    return 0


def cmd_ingest(args) -> int:
    pd = load_payload_dir(args.payloads)
    descriptors = load_descriptors(args.descriptors)
    cities = load_cities(args.cities) if args.cities else load_default_cities()
    inp = build_analysis_input(pd.files, descriptors, args.r, args.seed, cities)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    zones = resolve_zone_map(args.zones)
    inp.network(zones).save(out / "network.json")
    inp.measurements.save(out / "measurements.json")
    write_csv(out / "quality.csv", inp.quality_rows(),
              ["node", "identity", "included", "references", "mirrored", "unknown_refs", "reason"])
    write_json(out / "subsets.json", {inp.identities[i]: [inp.identities[j] for j in s] for i, s in inp.subsets.items()})
    summary = {
        "payloads": len(pd.files),
        "payload_errors": pd.errors,
        "dropped_entries": {k: v.dropped for k, v in pd.files.items() if v.dropped},
        "nodes": len(descriptors),
        "included": len(inp.subsets),
        "excluded": {inp.identities[i]: r for i, r in sorted(inp.excluded.items())},
        "mirrored_pairs": int(inp.mirrored.sum()),
        "pairs": int(len(inp.mirrored)),
        "r": args.r,
        "seed": args.seed,
    }
    if args.analyze:
        model = resolve_model(args.model)
        rows = analyze_input(inp, model, zones, args.tau, args.threshold, args.grid)
        cols = ["node", "identity", "lat", "lon", "est_lat", "est_lon", "error_km", "confidence", "decision",
                "references", "claimed_zone", "winner_zone", "verified"]
        write_csv(out / "analysis.csv", rows, cols)
        hi = [r["error_km"] for r in rows if r["decision"] == "accept"]
        lo = [r["error_km"] for r in rows if r["decision"] != "accept"]
        summary["median_error_km_accepted"] = float(np.median(hi)) if hi else None
        summary["median_error_km_rejected"] = float(np.median(lo)) if lo else None
    if args.external:
        ext = load_external_locations(args.external)
        selfs = {ident: GeoPoint(float(inp.coords[i, 0]), float(inp.coords[i, 1])) for i, ident in enumerate(inp.identities) if not np.isnan(inp.coords[i, 0])}
        rep = consistency_report(selfs, ext, zones)
        write_json(out / "consistency.json", rep.to_dict())
        write_csv(out / "consistency.csv", [r.__dict__ for r in rep.rows],
                  ["node", "distance_km", "self_zone", "external_zone", "conflict"])
    write_json(out / "ingest.json", summary)
    log.info("ingested %d payloads; %d nodes included, %d excluded", len(pd.files), len(inp.subsets), len(inp.excluded))
    return 0


def cmd_fetch(args) -> int:
    entries = load_descriptors(args.nodes)
    results = fetch_payloads(entries, args.out, args.url_template, args.timeout, args.concurrency)
    write_csv(Path(args.out) / "fetch_log.csv", [r.__dict__ for r in results],
              ["identity", "url", "ok", "path", "error"])
    ok = sum(r.ok for r in results)
    log.info("fetched %d of %d payloads", ok, len(results))
    return 0 if ok or not results else 1


def cmd_build_model(args) -> int:
    if args.samples:
        m = build_model(read_samples_csv(args.samples), lower_method=args.lower)
    else:
        m = build_default_model(lower_method=args.lower)
    m.save(args.out)
    log.info("model: v_max=%.2f km/ms, d_half=%.1f km", m.v_max, m.d_half)
    return 0


# parser -----------------------------------------------------------------------

def _common_world(p: argparse.ArgumentParser, need_meas: bool = True) -> None:
    p.add_argument("--network", required=True, help="network JSON")
    if need_meas:
        p.add_argument("--measurements", required=True, help="measurement JSON")
    p.add_argument("--zones", default="europe15", help="zone map: europe15 or a GeoJSON path")


def _model_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", default="default", help="propagation model: default or a JSON path")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="locverify", description="Decentralized location verification toolkit.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-network", help="place nodes uniformly over a zone map")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--zones", default="europe15")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_network)

    p = sub.add_parser("schedule", help="derive reference sets from a beacon")
    p.add_argument("--network", required=True)
    p.add_argument("--zones", default="europe15")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--beacon", help="beacon as hex")
    g.add_argument("--beacon-file", help="file holding the beacon (hex text or raw bytes)")
    p.add_argument("--t", type=int, default=50, help="initial references per node")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("simulate", help="simulate probe measurements for a schedule")
    _common_world(p, need_meas=False)
    _model_arg(p)
    p.add_argument("--schedule", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probes", type=int, default=DEFAULT_PROBES)
    p.add_argument("--queue-mean", type=float, default=0.05, help="mean relative queueing delay per probe")
    p.add_argument("--hash-latency-ms", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.add_argument("--records", help="also write 5-byte records per node to this directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("localize", help="estimate node positions")
    _common_world(p)
    _model_arg(p)
    p.add_argument("--nodes", help="comma-separated node ids (default: all)")
    p.add_argument("--r-target", type=int, help="use a random subset of this many references")
    p.add_argument("--seed", type=int, default=0, help="seed for subset selection")
    p.add_argument("--out", required=True, help="CSV (or .json) output")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("verify-zone", help="check claimed zones against the measurement mass")
    _common_world(p)
    _model_arg(p)
    p.add_argument("--nodes")
    p.add_argument("--grid", type=float, default=DEFAULT_GRID_DEG, help="grid resolution in degrees")
    p.add_argument("--out", required=True)
    p.add_argument("--dump", help="optional JSON dump of verdicts")
    p.set_defaults(func=cmd_verify_zone)

    p = sub.add_parser("confidence", help="score measurement consistency with claimed locations")
    _common_world(p)
    _model_arg(p)
    p.add_argument("--nodes")
    p.add_argument("--tau", type=float, default=DEFAULT_TOLERANCE)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_confidence)

    p = sub.add_parser("attack", help="apply a location-spoofing coalition to measurements")
    _common_world(p)
    _model_arg(p)
    p.add_argument("--config", help="attack config JSON")
    p.add_argument("--adversarial", type=int)
    p.add_argument("--claiming", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jitter", type=float, default=0.02)
    p.add_argument("--slowdown", choices=("max", "estimate"), default="max")
    p.add_argument("--tau", type=float, default=DEFAULT_TOLERANCE)
    p.add_argument("--out-network", required=True)
    p.add_argument("--out-measurements", required=True)
    p.add_argument("--save-config", help="write the resolved attack config here")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("sweep", help="breaking-point table over claiming fractions")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--fractions", default="0.05,0.10,0.15,0.20,0.25,0.30,0.35")
    p.add_argument("--repetitions", type=int)
    p.add_argument("--master-seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("run-all", help="execute a full experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--repetitions", type=int)
    p.add_argument("--master-seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run_all)

    p = sub.add_parser("ingest", help="turn saved payloads into analysis-ready files")
    p.add_argument("--payloads", required=True, help="directory of JSON payloads")
    p.add_argument("--descriptors", required=True, help="node list (JSON or CSV)")
    p.add_argument("--cities", help="cities CSV (name, country, lat, lon); default: packaged table")
    p.add_argument("--r", type=int, default=40, help="references per node")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--zones", default="europe15")
    p.add_argument("--external", help="external locations CSV (node, lat, lon)")
    p.add_argument("--analyze", action="store_true", help="also run the per-node analysis")
    _model_arg(p)
    p.add_argument("--tau", type=float, default=WILD_TOLERANCE)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--grid", type=float, default=DEFAULT_GRID_DEG)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("fetch", help="download payloads for a node list")
    p.add_argument("--nodes", required=True, help="node list (JSON or CSV with identity, address)")
    p.add_argument("--out", required=True)
    p.add_argument("--url-template", default=DEFAULT_URL_TEMPLATE)
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--concurrency", type=int, default=16)
    p.set_defaults(func=cmd_fetch)

    p = sub.add_parser("build-model", help="fit a propagation model")
    p.add_argument("--samples", help="calibration CSV (distance_km, min_rtt_ms); default: synthetic set")
    p.add_argument("--lower", choices=("fit_ci", "percentile"), default="fit_ci")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_model)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, ConfigError, ModelError, IngestError, OSError, KeyError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
