import csv
import http.server
import json
import statistics
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from locverify.geo import GeoPoint, haversine
from locverify.ingest import (
    AMBIGUOUS,
    DEFAULT_URL_TEMPLATE,
    RESOLVED,
    UNRESOLVED,
    CityRecord,
    CityTable,
    IngestError,
    MeasurementEntry,
    NodeEntry,
    RawMeasurementFile,
    analyze_input,
    build_analysis_input,
    consistency_report,
    fetch_payloads,
    load_default_cities,
    load_descriptors,
    load_payload_dir,
    location_consistency,
    normalize_name,
    parse_measurement_file,
    payloads_from_simulation,
    resolve_city,
    resolve_location,
    safe_filename,
    save_descriptors,
)


@pytest.fixture(scope="module")
def cities():
    return load_default_cities()


# parsing --------------------------------------------------------------------

def test_fixture_round_trips_bytes(fixtures_dir):
    blob = (fixtures_dir / "payload_3refs.json").read_bytes()
    raw = parse_measurement_file(blob)
    assert len(raw.measurements) == 3 and raw.dropped == 0
    assert raw.to_bytes() == blob
    assert parse_measurement_file(raw.to_bytes()) == raw


def test_empty_measurement_list():
    raw = parse_measurement_file(b'{"node": "x", "measurements": []}')
    assert raw.measurements == () and raw.dropped == 0


@pytest.mark.parametrize("rtt", [0, -1.5, "3", True, None, 1e400])
def test_bad_entries_dropped(rtt):
    doc = {"node": "x", "measurements": [{"ref": "a", "min_rtt_ms": rtt}, {"ref": "b", "min_rtt_ms": 4.0}]}
    raw = parse_measurement_file(json.dumps(doc))
    assert [e.ref for e in raw.measurements] == ["b"] and raw.dropped == 1


def test_non_finite_and_huge_numbers_dropped():
    raw = parse_measurement_file(b'{"node":"x","measurements":[{"ref":"a","min_rtt_ms":NaN},'
                                 b'{"ref":"b","min_rtt_ms":Infinity},{"ref":"c","min_rtt_ms":1e999},'
                                 b'{"ref":"d","min_rtt_ms":' + b"9" * 400 + b"}]}")
    assert raw.measurements == () and raw.dropped == 4


def test_repeated_reference_keeps_minimum():
    doc = {"node": "x", "measurements": [{"ref": "a", "min_rtt_ms": 5}, {"ref": "a", "min_rtt_ms": 3}]}
    raw = parse_measurement_file(json.dumps(doc))
    assert raw.measurements == (MeasurementEntry("a", 3.0),) and raw.dropped == 1


@pytest.mark.parametrize(
    "blob,where",
    [
        (b"\xff\xfe", "$"),
        (b"[1, 2]", "$"),
        (b"{", "$"),
        (b'{"version": 2, "node": "x", "measurements": []}', "$.version"),
        (b'{"node": "", "measurements": []}', "$.node"),
        (b'{"node": "x"}', "$.measurements"),
        (b'{"node": "x", "location": 5, "measurements": []}', "$.location"),
        (b"[" * 100000, "$"),
    ],
)
def test_structured_errors(blob, where):
    with pytest.raises(IngestError) as exc:
        parse_measurement_file(blob)
    assert exc.value.where == where


def test_non_bytes_rejected():
    with pytest.raises(IngestError):
        parse_measurement_file(12)


@given(st.binary(max_size=300))
def test_parse_is_total_over_bytes(blob):
    try:
        parse_measurement_file(blob)
    except IngestError:
        pass


json_values = st.recursive(
    st.none() | st.booleans() | st.integers() | st.floats() | st.text(max_size=8),
    lambda inner: st.lists(inner, max_size=4) | st.dictionaries(st.text(max_size=8), inner, max_size=4),
    max_leaves=20,
)


@given(st.dictionaries(st.sampled_from(["node", "location", "version", "measurements", "x"]), json_values),
       st.lists(st.dictionaries(st.sampled_from(["ref", "min_rtt_ms"]), json_values), max_size=6))
def test_parse_is_total_over_json_shapes(top, entries):
    top = dict(top)
    if "measurements" not in top:
        top["measurements"] = entries
    try:
        raw = parse_measurement_file(json.dumps(top))
    except IngestError:
        return
    assert all(e.min_rtt_ms > 0 for e in raw.measurements)


def test_safe_filename():
    a, b = safe_filename("../../etc/passwd"), safe_filename("..\\..\\etc\\passwd")
    assert "/" not in a and "\\" not in b and a != b
    assert a.endswith(".json")


def test_payload_directory(tmp_path):
    (tmp_path / "a.json").write_bytes(RawMeasurementFile("n1", (MeasurementEntry("n2", 1.0),)).to_bytes())
    (tmp_path / "b.json").write_bytes(RawMeasurementFile("n1").to_bytes())
    (tmp_path / "c.json").write_bytes(b"nope")
    d = load_payload_dir(tmp_path)
    assert list(d.files) == ["n1"] and len(d.files["n1"].measurements) == 1
    assert set(d.errors) == {"b.json", "c.json"}


def test_descriptor_formats(tmp_path):
    entries = [NodeEntry("a", "10.0.0.1", "Lyon, FR"), NodeEntry("b", "10.0.0.2")]
    save_descriptors(entries, tmp_path / "d.json")
    assert load_descriptors(tmp_path / "d.json") == entries
    with open(tmp_path / "d.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerows([["identity", "address", "location"], ["a", "10.0.0.1", "Lyon, FR"], ["b", "10.0.0.2", ""]])
    assert load_descriptors(tmp_path / "d.csv") == entries
    (tmp_path / "dup.json").write_text('[{"identity": "a"}, {"identity": "a"}]')
    with pytest.raises(ValueError):
        load_descriptors(tmp_path / "dup.json")


# city resolution ------------------------------------------------------------

def test_normalization():
    assert normalize_name("  BERLIN ") == "berlin"
    assert normalize_name("Łódź") == "lodz"
    assert normalize_name("Zürich") == normalize_name("zurich")


def test_padded_uppercase_name(cities):
    m = resolve_city("  BERLIN ", cities)
    assert m.status == RESOLVED and m.point == GeoPoint(52.52, 13.405)


def test_misspelling_unresolved(cities):
    assert resolve_city("Berlinn", cities).status == UNRESOLVED


def test_ambiguous_name(cities):
    m = resolve_city("Paris", cities)
    assert m.status == AMBIGUOUS and not m.resolved and m.candidates == ("FR", "US")
    hinted = resolve_location("Paris, FR", cities)
    assert hinted.status == RESOLVED and hinted.point.lon == pytest.approx(2.35, abs=0.01)
    assert resolve_city("Paris", cities, "fr").resolved


def test_location_strings(cities):
    assert resolve_location("48.5, 9.25", cities).point == GeoPoint(48.5, 9.25)
    assert resolve_location("48.5, 9.25", None).resolved
    assert resolve_location("Lyon", None).status == UNRESOLVED
    assert resolve_location("", cities).status == UNRESOLVED
    assert resolve_location("95, 10", cities).status == UNRESOLVED


def test_city_table_validation():
    with pytest.raises(ValueError):
        CityTable([])
    r = CityRecord("x", "DE", GeoPoint(0, 0))
    with pytest.raises(ValueError):
        CityTable([r, r])


def test_default_cities_resolve_inside_their_zone(cities, zones):
    inside = sum(zones.zone_of(r.center) == r.country for r in cities.records if r.country in zones.ids)
    total = sum(r.country in zones.ids for r in cities.records)
    assert inside / total > 0.95


# analysis input -------------------------------------------------------------

def _star_input(n_refs, dup_group=0, r=40, seed=1):
    rng = np.random.default_rng(0)
    descs = [NodeEntry("target", location="50.0, 10.0")]
    entries = []
    for k in range(n_refs):
        if k < dup_group:
            loc = "47.0, 8.0"
        else:
            loc = f"{rng.uniform(40, 58):.5f}, {rng.uniform(-5, 25):.5f}"
        descs.append(NodeEntry(f"r{k:04d}", location=loc))
        entries.append(MeasurementEntry(f"r{k:04d}", float(rng.uniform(5, 40))))
    files = {"target": RawMeasurementFile("target", tuple(entries))}
    return build_analysis_input(files, descs, r, seed), descs


def test_902_references_give_40_distinct():
    inp, _ = _star_input(902)
    sub = inp.subsets[0]
    assert len(sub) == 40 and len(set(sub.tolist())) == 40
    locs = {tuple(np.round(inp.coords[j], 6)) for j in sub}
    assert len(locs) == 40


def test_duplicate_locations_are_resampled():
    inp, _ = _star_input(40, dup_group=20, r=21)
    sub = inp.subsets[0]
    assert len(sub) == 21
    assert sum(1 for j in sub if j <= 20) == 1  # one member of the co-located group
    ai2, _ = _star_input(40, dup_group=20, r=22)
    assert 0 not in ai2.subsets
    assert ai2.excluded[0] == "fewer than 22 usable references with distinct locations"


def test_subsets_are_deterministic():
    a, _ = _star_input(300, seed=4)
    b, _ = _star_input(300, seed=4)
    c, _ = _star_input(300, seed=5)
    assert np.array_equal(a.subsets[0], b.subsets[0])
    assert not np.array_equal(a.subsets[0], c.subsets[0])


def test_exclusion_reasons(cities):
    descs = [
        NodeEntry("a", location="Berlin"),
        NodeEntry("b", location="Paris"),
        NodeEntry("c"),
        NodeEntry("d", location="Lyon, FR"),
        NodeEntry("e", location="Nowhereville"),
    ]
    files = {
        "a": RawMeasurementFile("a", (MeasurementEntry("d", 5.0), MeasurementEntry("zz", 1.0), MeasurementEntry("a", 1.0))),
        "b": RawMeasurementFile("b"),
        "c": RawMeasurementFile("c"),
    }
    inp = build_analysis_input(files, descs, 1, 0, cities)
    assert inp.excluded[1].startswith("location ambiguous")
    assert inp.excluded[2] == "no self-reported location"
    assert inp.excluded[3] == "no measurement payload"
    assert inp.excluded[4].startswith("location unresolved")
    assert list(inp.subsets) == [0]
    assert inp.dropped_unknown_refs == {0: 2}
    # d never reported a -> d, so the pair is mirrored and flagged
    assert inp.mirrored.tolist() == [True]
    assert inp.measurements.fwd[0] == inp.measurements.rev[0] == 5.0
    rows = {r["identity"]: r for r in inp.quality_rows()}
    assert rows["a"]["mirrored"] == 1 and rows["a"]["unknown_refs"] == 2 and rows["b"]["reason"]


def test_simulated_payloads_round_trip(small_world, zones):
    net, sched, ms = small_world
    files, descs = payloads_from_simulation(net, ms)
    inp = build_analysis_input({f.node: f for f in files}, descs, 15, 3)
    assert len(inp.subsets) == net.n and not inp.mirrored.any()
    a, b = inp.measurements.pairs[0]
    assert inp.measurements.fwd[0] == ms.directed(int(a), int(b))
    assert inp.network(zones).n == net.n


def test_mirroring_when_directions_missing(small_world):
    net, _, ms = small_world
    files, descs = payloads_from_simulation(net, ms, drop_fraction=0.3, seed=2)
    inp = build_analysis_input({f.node: f for f in files}, descs, 10, 3)
    assert inp.mirrored.any()
    m = inp.mirrored
    assert np.array_equal(inp.measurements.fwd[m], inp.measurements.rev[m])


def test_confident_nodes_localize_better(small_world, model):
    """Misreported locations should drag confidence and accuracy down together."""
    net, _, ms = small_world
    rng = np.random.default_rng(8)
    liars = rng.choice(net.n, 30, replace=False)
    far = {int(i): "40.4168, -3.7038" if net.true_coords()[i, 1] > 5 else "52.2297, 21.0122" for i in liars}
    files, descs = payloads_from_simulation(net, ms, far)
    inp = build_analysis_input({f.node: f for f in files}, descs, 20, 1)
    rows = analyze_input(inp, model, tau=0.2)
    true = net.true_coords()
    acc = [haversine(*true[r["node"]], r["est_lat"], r["est_lon"]) for r in rows if r["decision"] == "accept"]
    rej = [r["error_km"] for r in rows if r["decision"] == "reject"]
    acc_self = [r["error_km"] for r in rows if r["decision"] == "accept"]
    assert rej and acc
    assert statistics.median(acc_self) < statistics.median(rej)
    assert statistics.median(acc) < 300


# consistency ----------------------------------------------------------------

def test_identical_points_are_consistent(zones):
    row = location_consistency(GeoPoint(48.2, 16.37), GeoPoint(48.2, 16.37), zones)
    assert row.distance_km == 0 and not row.conflict


def test_different_countries_conflict(zones):
    row = location_consistency(GeoPoint(48.2, 16.37), GeoPoint(50.08, 14.44), zones)
    assert row.conflict and row.self_zone == "AT" and row.external_zone == "CZ"


def test_population_aggregate_recomputes(fixtures_dir, zones):
    with open(fixtures_dir / "consistency_population.csv") as fh:
        rows = list(csv.DictReader(fh))
    own = {r["node"]: GeoPoint(float(r["self_lat"]), float(r["self_lon"])) for r in rows}
    ext = {r["node"]: GeoPoint(float(r["ext_lat"]), float(r["ext_lon"])) for r in rows}
    rep = consistency_report(own, ext, zones)
    dists = sorted(
        float(haversine(float(r["self_lat"]), float(r["self_lon"]), float(r["ext_lat"]), float(r["ext_lon"])))
        for r in rows
    )
    mid = (dists[4] + dists[5]) / 2
    assert rep.median_km == pytest.approx(mid, rel=1e-12)
    assert rep.mean_km == pytest.approx(sum(dists) / len(dists), rel=1e-12)
    assert 0 < rep.conflict_fraction < 1
    assert json.loads(json.dumps(rep.to_dict()))["nodes"] == 10


def test_empty_population(zones):
    rep = consistency_report({}, {}, zones)
    assert rep.median_km is None and rep.conflict_fraction is None


# fetching -------------------------------------------------------------------

class _Handler(http.server.BaseHTTPRequestHandler):
    def do_GET(self):
        name = self.path.rsplit("/", 1)[-1]
        bodies = {
            "good": RawMeasurementFile("good", (MeasurementEntry("x", 2.0),)).to_bytes(),
            "other": RawMeasurementFile("someone-else").to_bytes(),
            "junk": b"<html>",
            "big": b" " * 5000,
        }
        if name not in bodies:
            self.send_error(404)
            return
        body = bodies[name]
        self.send_response(200)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    srv = http.server.ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    th = threading.Thread(target=srv.serve_forever, daemon=True)
    th.start()
    yield f"127.0.0.1:{srv.server_address[1]}"
    srv.shutdown()
    srv.server_close()


def test_fetch_isolates_failures(server, tmp_path):
    entries = [NodeEntry(name, server) for name in ("good", "other", "junk", "missing", "big")]
    entries.append(NodeEntry("down", "127.0.0.1:1"))
    res = fetch_payloads(entries, tmp_path, "http://{address}/p/{identity}", timeout=5, max_concurrency=3, max_bytes=1000)
    by = {r.identity: r for r in res}
    assert [r.identity for r in res] == [e.identity for e in entries]
    assert by["good"].ok and not any(by[k].ok for k in ("other", "junk", "missing", "big", "down"))
    assert "HTTPError" in by["missing"].error
    saved = load_payload_dir(tmp_path)
    assert list(saved.files) == ["good"] and not saved.errors


def test_fetch_defaults():
    assert DEFAULT_URL_TEMPLATE.format(address="1.2.3.4") == "http://1.2.3.4:8000/measurements"
    with pytest.raises(ValueError):
        fetch_payloads([], "unused", max_concurrency=0)
