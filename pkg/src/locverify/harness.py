"""End-to-end experiments, from a single baseline run up to attack sweeps.

Seed derivation: the master seed roots a ``numpy.random.SeedSequence``;
repetition ``k`` uses child ``k`` and spawns five grandchildren in fixed
order (network, beacon, measurements, attack, analysis).  Every report
records the master seed and the spawn keys, which is enough to replay any
single repetition.
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .adversary import AttackConfig, affected_nodes, apply_attack, assign_claims, framing_attack
from .confidence import ACCEPT, confidence_scores, decide
from .constants import DEFAULT_GRID_DEG, DEFAULT_INITIAL_REFS, DEFAULT_PROBES, DEFAULT_THRESHOLD, DEFAULT_TOLERANCE
from .geo import ZoneMap, haversine, load_default_zones
from .localize import SolverConfig, localize_batch, pad_references
from .netgen import MeasurementSet, Network, ProbeNoise, generate_network, simulate_measurements
from .propagation import PropagationModel, load_default_model
from .schedule import ReferenceSchedule, build_schedule
from .zoneverify import verify_node

OUTCOMES = ("TP", "TN", "FP", "FN", "HW")  # HW: honest, accepted, wrong zone


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    n: int = 1000
    t: int = DEFAULT_INITIAL_REFS
    r_target: int | None = None  # localize from a random subset of this size; None uses every reference
    zone_map: str = "europe15"
    model: str = "default"
    tau: float = DEFAULT_TOLERANCE
    upsilon: float = DEFAULT_THRESHOLD
    probes: int = DEFAULT_PROBES
    grid_deg: float = DEFAULT_GRID_DEG
    repetitions: int = 64
    master_seed: int = 0
    adversarial: int = 0
    claiming: int | None = None  # defaults to all adversarial nodes
    framing: int = 0
    jitter: float = 0.02
    slowdown: str = "max"
    workers: int = 1

    def validate(self) -> None:
        if self.n < 2:
            raise ConfigError("n must be >= 2")
        if not 0 < self.t < self.n:
            raise ConfigError("t must satisfy 0 < t < n")
        if self.r_target is not None and self.r_target < 3:
            raise ConfigError("r_target must be >= 3")
        for name in ("tau", "upsilon"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.probes < 1 or self.grid_deg <= 0 or self.repetitions < 1:
            raise ConfigError("probes, grid_deg, repetitions: each must be positive")
        if not 0 <= self.adversarial < self.n:
            raise ConfigError("adversarial count out of range")
        if self.claiming is not None and not 0 <= self.claiming <= self.adversarial:
            raise ConfigError("claiming count must not exceed the adversarial count")
        if self.framing < 0 or self.framing > self.n - self.adversarial:
            raise ConfigError("framing count out of range")

    @property
    def n_claiming(self) -> int:
        return self.adversarial if self.claiming is None else self.claiming

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)


def resolve_zone_map(name: str) -> ZoneMap:
    if name in ("europe15", "default"):
        return load_default_zones()
    return ZoneMap.from_geojson(name)


def resolve_model(name: str) -> PropagationModel:
    if name == "default":
        return load_default_model()
    return PropagationModel.load(name)


def rep_seeds(master: int, k: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(master, spawn_key=(k,)).spawn(5)


def _int_seed(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class World:
    net: Network
    schedule: ReferenceSchedule
    ms: MeasurementSet
    attack: AttackConfig | None = None


def build_world(cfg: ExperimentConfig, k: int, model: PropagationModel, zones: ZoneMap) -> World:
    s_net, s_beacon, s_meas, s_attack, _ = rep_seeds(cfg.master_seed, k)
    net = generate_network(cfg.n, zones, _int_seed(s_net))
    beacon = np.random.default_rng(s_beacon).bytes(32)
    sched = build_schedule(beacon, net.keys(), cfg.t)
    ms = simulate_measurements(net, sched, model, s_meas, cfg.probes, ProbeNoise())
    attack = None
    if cfg.adversarial:
        rng = np.random.default_rng(s_attack)
        adv = rng.choice(cfg.n, cfg.adversarial, replace=False)
        claim = adv[: cfg.n_claiming]
        honest = np.setdiff1d(np.arange(cfg.n), adv)
        frame = rng.choice(honest, cfg.framing, replace=False) if cfg.framing else []
        attack = AttackConfig(
            tuple(sorted(int(x) for x in adv)),
            tuple(sorted(int(x) for x in claim)),
            _int_seed(s_attack),
            tuple(sorted(int(x) for x in frame)),
            cfg.jitter,
            cfg.slowdown,
        )
        net = assign_claims(net, attack)
        ms = apply_attack(net, ms, attack, model)
        if cfg.framing:
            ms = framing_attack(net, ms, attack, model, cfg.tau)
    return World(net, sched, ms, attack)


@dataclass
class Analysis:
    nodes: np.ndarray
    est: np.ndarray
    residual: np.ndarray
    converged: np.ndarray
    winner: list
    winner_mass: np.ndarray
    verified: np.ndarray
    score: np.ndarray


def analyze(world: World, model: PropagationModel, zones: ZoneMap, nodes=None, tau: float = DEFAULT_TOLERANCE,
            grid_deg: float = DEFAULT_GRID_DEG, r_target: int | None = None, subset_rng=None,
            solver: SolverConfig = SolverConfig(), verify: bool = True) -> Analysis:
    """Localize, zone-verify and score ``nodes`` (default: all) of a world."""
    net, ms = world.net, world.ms
    nodes = np.arange(net.n) if nodes is None else np.asarray(nodes, dtype=np.int64)
    claimed = net.claimed_coords()
    adj = ms.adjacency()
    sym = (adj.out_rtt + adj.in_rtt) / 2.0
    groups = []
    for i in nodes:
        sl = adj.of(i)
        refs = adj.ref[sl]
        rtt = sym[sl]
        if r_target is not None and len(refs) > r_target:
            pick = np.sort(subset_rng.permutation(len(refs))[:r_target])
            refs, rtt = refs[pick], rtt[pick]
        groups.append((claimed[refs, 0], claimed[refs, 1], rtt))
    rl, ro, rt, mask = pad_references(groups)
    loc = localize_batch(rl, ro, rt, mask, model, solver)
    winners: list = [None] * len(nodes)
    mass = np.zeros(len(nodes))
    verified = np.zeros(len(nodes), dtype=bool)
    if verify:
        cz = zones.classify(claimed[nodes, 0], claimed[nodes, 1])
        ids = zones.ids
        for k, (la, lo, t) in enumerate(groups):
            claim_zone = ids[cz[k]] if cz[k] >= 0 else None
            v = verify_node(la, lo, t, claim_zone, model, zones, grid_deg)
            winners[k], mass[k], verified[k] = v.winner, v.winner_mass, v.verified
    scores = confidence_scores(ms, claimed, model, tau)[nodes]
    return Analysis(nodes, np.column_stack([loc.lat, loc.lon]), loc.residual, loc.converged, winners, mass, verified, scores)


def outcome(claims_false: bool, accepted: bool, verified: bool) -> str:
    """Decision bucket; for a false claim ``verified`` means the winner equals the claimed zone."""
    if claims_false:
        return "FP" if (accepted and verified) else "TN"
    if not accepted:
        return "FN"
    return "TP" if verified else "HW"


def _summ(x: np.ndarray) -> dict:
    if len(x) == 0:
        return {"median": None, "mean": None}
    return {"median": float(np.median(x)), "mean": float(np.mean(x))}


def run_once(cfg: ExperimentConfig, k: int, model: PropagationModel | None = None,
             zones: ZoneMap | None = None) -> dict:
    """One repetition; returns aggregates plus per-node rows."""
    model = model or resolve_model(cfg.model)
    zones = zones or resolve_zone_map(cfg.zone_map)
    t0 = time.perf_counter()
    world = build_world(cfg, k, model, zones)
    nodes = affected_nodes(world.net, world.schedule) if cfg.adversarial else None
    if cfg.framing and world.attack is not None:
        nodes = np.union1d(nodes, np.array(world.attack.framing_targets, dtype=np.int64))
    sub_rng = np.random.default_rng(rep_seeds(cfg.master_seed, k)[4])
    an = analyze(world, model, zones, nodes, cfg.tau, cfg.grid_deg, cfg.r_target, sub_rng)
    net = world.net
    true = net.true_coords()
    claimed = net.claimed_coords()
    claim_mask = net.claiming_mask()[an.nodes]
    adv_mask = net.adversarial_mask()[an.nodes]
    err = haversine(true[an.nodes, 0], true[an.nodes, 1], an.est[:, 0], an.est[:, 1])
    decisions = [decide(float(s), cfg.upsilon) for s in an.score]
    outs = [outcome(bool(c), d == ACCEPT, bool(v)) for c, d, v in zip(claim_mask, decisions, an.verified)]
    tz = zones.classify(true[an.nodes, 0], true[an.nodes, 1])
    cz = zones.classify(claimed[an.nodes, 0], claimed[an.nodes, 1])
    ids = zones.ids
    rows = []
    for j, i in enumerate(an.nodes):
        rows.append({
            "rep": k,
            "node": int(i),
            "adversarial": bool(adv_mask[j]),
            "claims_false": bool(claim_mask[j]),
            "true_lat": float(true[i, 0]), "true_lon": float(true[i, 1]),
            "claimed_lat": float(claimed[i, 0]), "claimed_lon": float(claimed[i, 1]),
            "est_lat": float(an.est[j, 0]), "est_lon": float(an.est[j, 1]),
            "error_km": float(err[j]),
            "residual_km": float(an.residual[j]),
            "true_zone": ids[tz[j]] if tz[j] >= 0 else "",
            "claimed_zone": ids[cz[j]] if cz[j] >= 0 else "",
            "winner_zone": an.winner[j] or "",
            "winner_mass": float(an.winner_mass[j]),
            "verified": bool(an.verified[j]),
            "confidence": float(an.score[j]),
            "decision": decisions[j],
            "outcome": outs[j],
        })
    honest = ~adv_mask
    counts = {o: int(sum(1 for x in outs if x == o)) for o in OUTCOMES}
    tp, fn = counts["TP"], counts["FN"]
    agg = {
        "rep": k,
        "analyzed": int(len(an.nodes)),
        "error_km": _summ(err[honest]),
        "zone_rate": float(np.mean(an.verified[honest])) if honest.any() else None,
        "reject": int(sum(1 for d in decisions if d != ACCEPT)),
        **counts,
        "recall": tp / (tp + fn) if tp + fn else None,
        "unprotected_success": float(np.mean(an.verified[claim_mask])) if claim_mask.any() else None,
        "max_adversarial_score": float(an.score[claim_mask].max()) if claim_mask.any() else None,
        "min_benign_score": float(an.score[honest].min()) if honest.any() else None,
        "benign_score": _summ(an.score[honest]),
        "adversarial_score": _summ(an.score[claim_mask]),
        "converged_fraction": float(np.mean(an.converged)),
        "seconds": time.perf_counter() - t0,
    }
    return {"aggregate": agg, "nodes": rows}


def _median_of(runs: list[dict], key) -> float | None:
    vals = [key(r) for r in runs]
    vals = [v for v in vals if v is not None]
    return float(np.median(vals)) if vals else None


def _summary(runs: list[dict]) -> dict:
    return {
        "median_error_km": _median_of(runs, lambda r: r["error_km"]["median"]),
        "mean_error_km": _median_of(runs, lambda r: r["error_km"]["mean"]),
        "zone_rate": _median_of(runs, lambda r: r["zone_rate"]),
        "reject": _median_of(runs, lambda r: r["reject"]),
        **{o: _median_of(runs, lambda r, o=o: r[o]) for o in OUTCOMES},
        "recall": _median_of(runs, lambda r: r["recall"]),
        "unprotected_success": _median_of(runs, lambda r: r["unprotected_success"]),
    }


def _run_reps(cfg: ExperimentConfig, keep_nodes: bool) -> list[dict]:
    model = resolve_model(cfg.model)
    zones = resolve_zone_map(cfg.zone_map)
    if cfg.workers > 1 and cfg.repetitions > 1:
        with ProcessPoolExecutor(cfg.workers) as ex:
            results = list(ex.map(run_once, [cfg] * cfg.repetitions, range(cfg.repetitions)))
    else:
        results = [run_once(cfg, k, model, zones) for k in range(cfg.repetitions)]
    if not keep_nodes:
        for r in results:
            r["nodes"] = []
    return results


def _report(cfg: ExperimentConfig, results: list[dict], kind: str) -> dict:
    runs = [r["aggregate"] for r in results]
    return {
        "kind": kind,
        "config": cfg.to_dict(),
        "seeds": {
            "master": cfg.master_seed,
            "derivation": "SeedSequence(master, spawn_key=(rep,)).spawn(5): network, beacon, measurements, attack, analysis",
            "reps": list(range(cfg.repetitions)),
        },
        "runs": runs,
        "summary": _summary(runs),
        "nodes": [row for r in results for row in r["nodes"]],
    }


def run_baseline(cfg: ExperimentConfig, keep_nodes: bool = True) -> dict:
    cfg.validate()
    if cfg.adversarial:
        raise ConfigError("baseline runs take no adversaries")
    return _report(cfg, _run_reps(cfg, keep_nodes), "baseline")


def run_attack(cfg: ExperimentConfig, keep_nodes: bool = True) -> dict:
    cfg.validate()
    if not cfg.adversarial:
        raise ConfigError("attack runs need adversarial > 0")
    return _report(cfg, _run_reps(cfg, keep_nodes), "attack")


def sweep_breaking_point(cfg: ExperimentConfig, fractions, keep_nodes: bool = False) -> list[dict]:
    """One attack report per claiming fraction with |A| = |C|, sharing seeds."""
    out = []
    for frac in fractions:
        if not 0 < frac < 1:
            raise ConfigError("fractions must lie in (0, 1)")
        k = int(round(frac * cfg.n))
        c = replace(cfg, adversarial=k, claiming=k)
        rep = run_attack(c, keep_nodes)
        rep["fraction"] = float(frac)
        out.append(rep)
    return out


def breaking_point_table(reports: list[dict]) -> list[dict]:
    rows = []
    for r in reports:
        s = r["summary"]
        rows.append({
            "claimed": r["fraction"],
            "reject": s["reject"],
            "TP": s["TP"], "FP": s["FP"], "FN": s["FN"], "TN": s["TN"], "HW": s["HW"],
            "recall": s["recall"],
        })
    return rows


def reference_count_sensitivity(cfg: ExperimentConfig, r_values, verify: bool = True) -> list[dict]:
    """Median error and zone rate versus the number of references used.

    The schedule is built with ``t = max(r_values)`` so every node has
    enough references; each node then uses nested random prefixes of one
    permutation of its reference list.
    """
    cfg.validate()
    r_values = [int(r) for r in r_values]
    if any(r < 3 for r in r_values):
        raise ConfigError("R values must be >= 3")
    if not r_values:
        return []
    model = resolve_model(cfg.model)
    zones = resolve_zone_map(cfg.zone_map)
    t = min(max(r_values), cfg.n - 1)
    base = replace(cfg, t=t, adversarial=0, claiming=None, framing=0)
    per_r: dict[int, list] = {r: [] for r in r_values}
    for k in range(cfg.repetitions):
        world = build_world(base, k, model, zones)
        for r in r_values:
            sub = np.random.default_rng(rep_seeds(cfg.master_seed, k)[4])
            an = analyze(world, model, zones, None, cfg.tau, cfg.grid_deg, r, sub, verify=verify)
            true = world.net.true_coords()
            err = haversine(true[:, 0], true[:, 1], an.est[:, 0], an.est[:, 1])
            per_r[r].append((float(np.median(err)), float(np.mean(an.verified)) if verify else None))
    out = []
    for r in r_values:
        errs = [e for e, _ in per_r[r]]
        rates = [z for _, z in per_r[r] if z is not None]
        out.append({
            "R": r,
            "median_error_km": float(np.median(errs)),
            "zone_rate": float(np.median(rates)) if rates else None,
            "per_rep_median_error_km": errs,
        })
    return out


# report emission ------------------------------------------------------------

NODE_COLUMNS = [
    "rep", "node", "adversarial", "claims_false", "true_lat", "true_lon", "claimed_lat", "claimed_lon",
    "est_lat", "est_lon", "error_km", "residual_km", "true_zone", "claimed_zone", "winner_zone",
    "winner_mass", "verified", "confidence", "decision", "outcome",
]


def _clean(o):
    if isinstance(o, float) and not math.isfinite(o):
        return None
    if isinstance(o, dict):
        return {k: _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, np.generic):
        return o.item()
    return o


def write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n")


def write_csv(path, rows: list[dict], columns: list[str] | None = None) -> None:
    cols = columns or (list(rows[0].keys()) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def write_report(report: dict, out_dir) -> None:
    """JSON report, per-node CSV and per-run CSV into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "report.json", {k: v for k, v in report.items() if k != "nodes"})
    write_csv(out / "nodes.csv", report.get("nodes", []), NODE_COLUMNS)
    flat = []
    for r in report["runs"]:
        row = {k: v for k, v in r.items() if not isinstance(v, dict)}
        row["median_error_km"] = r["error_km"]["median"]
        row["mean_error_km"] = r["error_km"]["mean"]
        flat.append(row)
    write_csv(out / "runs.csv", flat)
