"""Real-world data path: measurement payloads, city lookup, subset selection.

Payload schema (version 1)::

    {"version": 1,
     "node": "<identity>",
     "location": "<city[, CC]>",          # optional
     "measurements": [{"ref": "<identity>", "min_rtt_ms": <number>}, ...]}

Everything here works offline on saved payload directories; ``fetch_payloads``
is a thin convenience for collecting them.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import re
import statistics
import unicodedata
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .confidence import decide, pair_flags
from .constants import DEFAULT_GRID_DEG, DEFAULT_THRESHOLD, WILD_TOLERANCE
from .geo import GeoPoint, ZoneMap, haversine
from .localize import SolverConfig, localize_batch, pad_references
from .netgen import MeasurementSet, Network, NodeDescriptor
from .propagation import PropagationModel
from .zoneverify import verify_node

SCHEMA_VERSION = 1
DEFAULT_URL_TEMPLATE = "http://{address}:8000/measurements"


class IngestError(ValueError):
    """Structured parse failure; ``where`` points at the first violation."""

    def __init__(self, message: str, where: str = "$"):
        super().__init__(f"{where}: {message}")
        self.reason = message
        self.where = where


# payload parsing ------------------------------------------------------------

@dataclass(frozen=True)
class MeasurementEntry:
    ref: str
    min_rtt_ms: float


@dataclass(frozen=True)
class RawMeasurementFile:
    node: str
    measurements: tuple[MeasurementEntry, ...] = ()
    location: str | None = None
    dropped: int = 0

    def to_dict(self) -> dict:
        doc: dict = {"version": SCHEMA_VERSION, "node": self.node}
        if self.location is not None:
            doc["location"] = self.location
        doc["measurements"] = [{"ref": e.ref, "min_rtt_ms": e.min_rtt_ms} for e in self.measurements]
        return doc

    def to_bytes(self) -> bytes:
        """Canonical serialization; parsing it yields an equal record."""
        return (json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n").encode("utf-8")


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def parse_measurement_file(data) -> RawMeasurementFile:
    """Parse one payload; malformed entries are dropped and counted.

    Raises :class:`IngestError` for anything that is not a payload at the
    top level, and for nothing else.
    """
    if isinstance(data, str):
        data = data.encode("utf-8", "surrogatepass")
    if not isinstance(data, (bytes, bytearray, memoryview)):
        raise IngestError("payload must be bytes")
    try:
        text = bytes(data).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise IngestError(f"not UTF-8 ({exc.reason} at byte {exc.start})") from None
    try:
        doc = json.loads(text)
    except (ValueError, RecursionError) as exc:
        raise IngestError(f"not JSON ({type(exc).__name__})") from None
    if not isinstance(doc, dict):
        raise IngestError("top level must be an object")
    version = doc.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION or isinstance(version, bool):
        raise IngestError(f"unsupported schema version {version!r}", "$.version")
    node = doc.get("node")
    if not isinstance(node, str) or not node.strip():
        raise IngestError("missing or empty node identity", "$.node")
    location = doc.get("location")
    if location is not None and not isinstance(location, str):
        raise IngestError("location must be a string", "$.location")
    items = doc.get("measurements")
    if not isinstance(items, list):
        raise IngestError("measurements must be an array", "$.measurements")

    best: dict[str, float] = {}
    dropped = 0
    for item in items:
        if not isinstance(item, dict):
            dropped += 1
            continue
        ref, rtt = item.get("ref"), item.get("min_rtt_ms")
        if not isinstance(ref, str) or not ref.strip() or not _is_number(rtt):
            dropped += 1
            continue
        try:
            rtt = float(rtt)
        except OverflowError:
            dropped += 1
            continue
        if not math.isfinite(rtt) or rtt <= 0:
            dropped += 1
            continue
        if ref in best:
            # repeated reference: keep the minimum, count the extra
            dropped += 1
            best[ref] = min(best[ref], rtt)
        else:
            best[ref] = rtt
    entries = tuple(MeasurementEntry(r, t) for r, t in best.items())
    return RawMeasurementFile(node, entries, location, dropped)


def safe_filename(identity: str) -> str:
    stem = re.sub(r"[^A-Za-z0-9._-]", "_", identity)[:48]
    tag = hashlib.sha3_256(identity.encode("utf-8", "surrogatepass")).hexdigest()[:8]
    return f"{stem}-{tag}.json"


@dataclass
class PayloadDirectory:
    files: dict[str, RawMeasurementFile]
    errors: dict[str, str]


def load_payload_dir(directory) -> PayloadDirectory:
    """Parse every ``*.json`` file; the first file (by name) per identity wins."""
    files: dict[str, RawMeasurementFile] = {}
    errors: dict[str, str] = {}
    for path in sorted(Path(directory).glob("*.json")):
        try:
            raw = parse_measurement_file(path.read_bytes())
        except IngestError as exc:
            errors[path.name] = str(exc)
            continue
        if raw.node in files:
            errors[path.name] = f"duplicate payload for node {raw.node!r}"
            continue
        files[raw.node] = raw
    return PayloadDirectory(files, errors)


# node descriptors -----------------------------------------------------------

@dataclass(frozen=True)
class NodeEntry:
    identity: str
    address: str = ""
    location: str | None = None


def load_descriptors(path) -> list[NodeEntry]:
    """JSON list of ``{"identity", "address"?, "location"?}`` or a CSV with those columns."""
    p = Path(path)
    if p.suffix.lower() == ".csv":
        with open(p, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    else:
        rows = json.loads(p.read_text(encoding="utf-8"))
        if isinstance(rows, dict):
            rows = rows.get("nodes", [])
    out, seen = [], set()
    for k, r in enumerate(rows):
        ident = str(r.get("identity") or "").strip()
        if not ident:
            raise ValueError(f"descriptor {k} has no identity")
        if ident in seen:
            raise ValueError(f"duplicate descriptor identity {ident!r}")
        seen.add(ident)
        out.append(NodeEntry(ident, str(r.get("address") or ""), r.get("location") or None))
    return out


def save_descriptors(entries, path) -> None:
    doc = [{"identity": e.identity, "address": e.address, **({"location": e.location} if e.location else {})}
           for e in entries]
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


# city lookup ----------------------------------------------------------------

# letters that carry no combining mark under NFKD
_FOLD = str.maketrans({"ł": "l", "ø": "o", "đ": "d", "ħ": "h", "ı": "i", "æ": "ae", "œ": "oe"})


def normalize_name(text: str) -> str:
    """Case-fold, strip accents and collapse whitespace."""
    decomposed = unicodedata.normalize("NFKD", text)
    bare = "".join(c for c in decomposed if not unicodedata.combining(c))
    return " ".join(bare.casefold().translate(_FOLD).split())


@dataclass(frozen=True)
class CityRecord:
    name: str
    country: str
    center: GeoPoint


class CityTable:
    def __init__(self, records):
        self.records = tuple(records)
        if not self.records:
            raise ValueError("empty cities table")
        self._by_name: dict[str, list[CityRecord]] = {}
        keys = set()
        for r in self.records:
            key = (r.name, r.country)
            if key in keys:
                raise ValueError(f"duplicate city {key}")
            keys.add(key)
            self._by_name.setdefault(r.name, []).append(r)

    def __len__(self) -> int:
        return len(self.records)

    def lookup(self, normalized: str) -> list[CityRecord]:
        return self._by_name.get(normalized, [])


def load_cities(path) -> CityTable:
    """CSV with columns ``name, country, lat, lon``."""
    recs = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            recs.append(CityRecord(normalize_name(row["name"]), row["country"].strip().upper(),
                                   GeoPoint(float(row["lat"]), float(row["lon"]))))
    return CityTable(recs)


def load_default_cities() -> CityTable:
    from importlib import resources

    with resources.as_file(resources.files("locverify.data").joinpath("cities.csv")) as p:
        return load_cities(p)


RESOLVED, UNRESOLVED, AMBIGUOUS = "resolved", "unresolved", "ambiguous"


@dataclass(frozen=True)
class CityMatch:
    point: GeoPoint | None
    status: str
    candidates: tuple[str, ...] = ()

    @property
    def resolved(self) -> bool:
        return self.point is not None


def resolve_city(name: str, cities: CityTable, country_hint: str | None = None) -> CityMatch:
    """Exact match on the normalized name; several countries need a hint."""
    if not len(cities):
        raise ValueError("empty cities table")
    hits = cities.lookup(normalize_name(name or ""))
    if country_hint:
        hint = country_hint.strip().upper()
        narrowed = [r for r in hits if r.country == hint]
        hits = narrowed or hits
    if not hits:
        return CityMatch(None, UNRESOLVED)
    countries = tuple(sorted({r.country for r in hits}))
    if len(countries) > 1:
        return CityMatch(None, AMBIGUOUS, countries)
    return CityMatch(hits[0].center, RESOLVED, countries)


_HINT = re.compile(r"^(?P<name>.*?)[,;/]\s*(?P<cc>[A-Za-z]{2})\s*$")


def resolve_location(text: str | None, cities: CityTable | None) -> CityMatch:
    """Resolve a free-form location such as ``"Lyon, FR"`` or ``"48.85, 2.35"``.

    Without a cities table only coordinate strings resolve.
    """
    if text is None or not text.strip():
        return CityMatch(None, UNRESOLVED)
    parts = [p.strip() for p in text.split(",")]
    if len(parts) == 2:
        try:
            lat, lon = float(parts[0]), float(parts[1])
        except ValueError:
            pass
        else:
            if math.isfinite(lat) and math.isfinite(lon) and -90 <= lat <= 90 and -180 <= lon <= 180:
                return CityMatch(GeoPoint(lat, lon), RESOLVED)
    if cities is None:
        return CityMatch(None, UNRESOLVED)
    m = _HINT.match(text)
    if m:
        hit = resolve_city(m["name"], cities, m["cc"])
        if hit.status != UNRESOLVED:
            return hit
    return resolve_city(text, cities)


# analysis input -------------------------------------------------------------

@dataclass
class AnalysisInput:
    identities: list[str]
    coords: np.ndarray  # self-reported location per node, NaN when unresolved
    measurements: MeasurementSet
    subsets: dict[int, np.ndarray]
    mirrored: np.ndarray  # per pair of ``measurements``
    excluded: dict[int, str]
    dropped_unknown_refs: dict[int, int] = field(default_factory=dict)

    @property
    def included(self) -> np.ndarray:
        return np.array(sorted(self.subsets), dtype=np.int64)

    def network(self, zones: ZoneMap) -> Network:
        """Network document whose locations are the self-reported ones."""
        descs = []
        for i, ident in enumerate(self.identities):
            lat, lon = self.coords[i]
            p = GeoPoint(0.0, 0.0) if np.isnan(lat) else GeoPoint(float(lat), float(lon))
            key = hashlib.sha3_256(ident.encode("utf-8", "surrogatepass")).digest()
            descs.append(NodeDescriptor(i, key, ident, p, p))
        return Network(tuple(descs), zones, None, "ingested", strict=False)

    def quality_rows(self) -> list[dict]:
        adj = self.measurements.adjacency()
        mir = self.mirrored[adj.pair]
        rows = []
        for i, ident in enumerate(self.identities):
            sl = adj.of(i)
            rows.append({
                "node": i,
                "identity": ident,
                "included": i in self.subsets,
                "references": int(sl.stop - sl.start),
                "mirrored": int(mir[sl].sum()),
                "unknown_refs": self.dropped_unknown_refs.get(i, 0),
                "reason": self.excluded.get(i, ""),
            })
        return rows


def _distinct_subset(cands: np.ndarray, coords: np.ndarray, r: int, rng: np.random.Generator) -> np.ndarray | None:
    """Draw references in random order, skipping repeats of an already-used location."""
    seen: set[tuple[float, float]] = set()
    out = []
    for j in rng.permutation(cands):
        loc = (round(float(coords[j, 0]), 6), round(float(coords[j, 1]), 6))
        if loc in seen:
            continue
        seen.add(loc)
        out.append(int(j))
        if len(out) == r:
            return np.array(sorted(out), dtype=np.int64)
    return None


def build_analysis_input(files: dict[str, RawMeasurementFile], descriptors, r: int, seed: int,
                         cities: CityTable | None = None) -> AnalysisInput:
    """Select ``r`` distinct-location references per node and assemble pairs.

    Node ``i``'s subset uses its own reported RTTs outward; the inward RTT
    comes from the reference's payload when present, otherwise the outward
    value is mirrored and the pair is flagged.
    """
    if r < 1:
        raise ValueError("r must be positive")
    idents = [d.identity for d in descriptors]
    index = {ident: k for k, ident in enumerate(idents)}
    n = len(idents)
    coords = np.full((n, 2), np.nan)
    excluded: dict[int, str] = {}
    for k, d in enumerate(descriptors):
        raw = files.get(d.identity)
        text = raw.location if raw is not None and raw.location else d.location
        if text is None:
            excluded[k] = "no self-reported location"
            continue
        match = resolve_location(text, cities)
        if match.resolved:
            coords[k] = match.point.as_tuple()
        else:
            excluded[k] = f"location {match.status}: {text!r}"

    directed: dict[tuple[int, int], float] = {}
    unknown: dict[int, int] = {}
    for ident, raw in files.items():
        i = index.get(ident)
        if i is None:
            continue
        for e in raw.measurements:
            j = index.get(e.ref)
            if j is None or j == i:
                unknown[i] = unknown.get(i, 0) + 1
                continue
            directed[(i, j)] = e.min_rtt_ms

    subsets: dict[int, np.ndarray] = {}
    located = ~np.isnan(coords[:, 0])
    out_refs: dict[int, list[int]] = {}
    for (i, j) in directed:
        out_refs.setdefault(i, []).append(j)
    for i in range(n):
        if i in excluded:
            continue
        if idents[i] not in files:
            excluded[i] = "no measurement payload"
            continue
        cands = np.array(sorted(j for j in out_refs.get(i, []) if located[j]), dtype=np.int64)
        rng = np.random.default_rng([seed, i])
        pick = _distinct_subset(cands, coords, r, rng) if len(cands) >= r else None
        if pick is None:
            excluded[i] = f"fewer than {r} usable references with distinct locations"
            continue
        subsets[i] = pick

    pairs = sorted({(min(i, j), max(i, j)) for i, js in subsets.items() for j in js})
    fwd, rev, mirrored = [], [], []
    for a, b in pairs:
        ab, ba = directed.get((a, b)), directed.get((b, a))
        mirrored.append(ab is None or ba is None)
        fwd.append(ab if ab is not None else ba)
        rev.append(ba if ba is not None else ab)
    m = len(pairs)
    ms = MeasurementSet(n, np.array(pairs, dtype=np.int64).reshape(-1, 2), np.array(fwd, dtype=float),
                        np.array(rev, dtype=float), np.zeros(m, np.int8), np.zeros(m, np.int8))
    return AnalysisInput(idents, coords, ms, subsets, np.array(mirrored, dtype=bool), excluded, unknown)


def analyze_input(inp: AnalysisInput, model: PropagationModel, zones: ZoneMap | None = None,
                  tau: float = WILD_TOLERANCE, threshold: float = DEFAULT_THRESHOLD,
                  grid_deg: float = DEFAULT_GRID_DEG, solver: SolverConfig = SolverConfig()) -> list[dict]:
    """Localize, score and (with ``zones``) zone-verify every included node on its subset.

    ``error_km`` is measured against the self-reported location, the only
    reference point wild data offers.
    """
    nodes = inp.included
    if len(nodes) == 0:
        return []
    ms = inp.measurements
    idx = ms.index()
    groups, flags = [], []
    for i in nodes:
        refs = inp.subsets[int(i)]
        out_rtt = np.array([_directed(ms, idx, int(i), int(j)) for j in refs])
        in_rtt = np.array([_directed(ms, idx, int(j), int(i)) for j in refs])
        la, lo = inp.coords[refs, 0], inp.coords[refs, 1]
        groups.append((la, lo, (out_rtt + in_rtt) / 2.0))
        d = haversine(inp.coords[i, 0], inp.coords[i, 1], la, lo)
        flags.append(pair_flags(out_rtt, in_rtt, d, model, tau))
    rl, ro, rt, mask = pad_references(groups)
    loc = localize_batch(rl, ro, rt, mask, model, solver)
    err = haversine(inp.coords[nodes, 0], inp.coords[nodes, 1], loc.lat, loc.lon)
    rows = []
    for k, i in enumerate(nodes):
        score = float(np.mean(flags[k] == 0))
        row = {
            "node": int(i),
            "identity": inp.identities[i],
            "lat": float(inp.coords[i, 0]), "lon": float(inp.coords[i, 1]),
            "est_lat": float(loc.lat[k]), "est_lon": float(loc.lon[k]),
            "error_km": float(err[k]),
            "confidence": score,
            "decision": decide(score, threshold),
            "references": len(groups[k][0]),
        }
        if zones is not None:
            claim = zones.zone_of(GeoPoint(*inp.coords[i]))
            v = verify_node(groups[k][0], groups[k][1], groups[k][2], claim, model, zones, grid_deg)
            row.update(claimed_zone=claim or "", winner_zone=v.winner or "", verified=v.verified)
        rows.append(row)
    return rows


def _directed(ms: MeasurementSet, idx: dict, i: int, j: int) -> float:
    if i < j:
        return float(ms.fwd[idx[(i, j)]])
    return float(ms.rev[idx[(j, i)]])


def payloads_from_simulation(net: Network, ms: MeasurementSet, locations: dict[int, str] | None = None,
                             drop_fraction: float = 0.0, seed: int = 0) -> tuple[list[RawMeasurementFile], list[NodeEntry]]:
    """Turn a simulated world into payloads plus a descriptor list.

    Identities are the hex keys.  ``locations`` overrides the reported
    location string per node (default: the claimed coordinates as
    ``"lat, lon"``); ``drop_fraction`` removes that share of directed
    entries to exercise the mirroring path.
    """
    rng = np.random.default_rng(seed)
    locations = locations or {}
    idents = [k.hex() for k in net.keys()]
    claimed = net.claimed_coords()
    adj = ms.adjacency()
    files, entries = [], []
    for i in range(net.n):
        sl = adj.of(i)
        keep = rng.random(sl.stop - sl.start) >= drop_fraction
        meas = tuple(MeasurementEntry(idents[j], float(t))
                     for j, t, k in zip(adj.ref[sl], adj.out_rtt[sl], keep) if k)
        loc = locations.get(i, f"{claimed[i, 0]:.4f}, {claimed[i, 1]:.4f}")
        files.append(RawMeasurementFile(idents[i], meas, loc))
        entries.append(NodeEntry(idents[i], net.descriptors[i].address))
    return files, entries


# self-reported vs external locations ----------------------------------------

@dataclass(frozen=True)
class ConsistencyRow:
    node: str
    distance_km: float
    self_zone: str | None
    external_zone: str | None
    conflict: bool


def location_consistency(self_loc: GeoPoint, external_loc: GeoPoint, zones: ZoneMap, node: str = "") -> ConsistencyRow:
    d = float(haversine(self_loc.lat, self_loc.lon, external_loc.lat, external_loc.lon))
    a, b = zones.zone_of(self_loc), zones.zone_of(external_loc)
    return ConsistencyRow(node, d, a, b, a != b)


@dataclass(frozen=True)
class ConsistencyReport:
    rows: tuple[ConsistencyRow, ...]

    @property
    def median_km(self) -> float | None:
        return statistics.median(r.distance_km for r in self.rows) if self.rows else None

    @property
    def mean_km(self) -> float | None:
        return statistics.fmean(r.distance_km for r in self.rows) if self.rows else None

    @property
    def conflict_fraction(self) -> float | None:
        return sum(r.conflict for r in self.rows) / len(self.rows) if self.rows else None

    def to_dict(self) -> dict:
        return {
            "nodes": len(self.rows),
            "median_km": self.median_km,
            "mean_km": self.mean_km,
            "conflict_fraction": self.conflict_fraction,
            "rows": [r.__dict__ for r in self.rows],
        }


def consistency_report(self_locs: dict[str, GeoPoint], external: dict[str, GeoPoint], zones: ZoneMap) -> ConsistencyReport:
    """Rows for every node present in both mappings, in sorted identity order."""
    common = sorted(set(self_locs) & set(external))
    return ConsistencyReport(tuple(location_consistency(self_locs[k], external[k], zones, k) for k in common))


def load_external_locations(path) -> dict[str, GeoPoint]:
    """CSV with columns ``node, lat, lon``."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out[row["node"].strip()] = GeoPoint(float(row["lat"]), float(row["lon"]))
    return out


# fetching -------------------------------------------------------------------

@dataclass(frozen=True)
class FetchResult:
    identity: str
    url: str
    ok: bool
    path: str | None = None
    error: str | None = None


def _fetch_one(entry: NodeEntry, out: Path, url_template: str, timeout: float, max_bytes: int) -> FetchResult:
    url = url_template.format(address=entry.address, identity=entry.identity)
    try:
        with urllib.request.urlopen(url, timeout=timeout) as resp:
            body = resp.read(max_bytes + 1)
        if len(body) > max_bytes:
            raise IngestError(f"payload exceeds {max_bytes} bytes")
        raw = parse_measurement_file(body)
        if raw.node != entry.identity:
            raise IngestError(f"payload is for {raw.node!r}", "$.node")
    except Exception as exc:  # one node's failure never affects the others
        return FetchResult(entry.identity, url, False, error=f"{type(exc).__name__}: {exc}")
    path = out / safe_filename(entry.identity)
    path.write_bytes(body)
    return FetchResult(entry.identity, url, True, str(path))


def fetch_payloads(entries, out_dir, url_template: str = DEFAULT_URL_TEMPLATE, timeout: float = 10.0,
                   max_concurrency: int = 16, max_bytes: int = 64 << 20) -> list[FetchResult]:
    """Download and validate payloads with at most ``max_concurrency`` requests in flight."""
    if max_concurrency < 1:
        raise ValueError("max_concurrency must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = list(entries)
    with ThreadPoolExecutor(max_workers=max_concurrency) as ex:
        return list(ex.map(lambda e: _fetch_one(e, out, url_template, timeout, max_bytes), entries))
