import itertools
import json

import numpy as np
import pytest
import shapely
import shapely.ops
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from locverify.constants import MAX_SPEED, RECORD_BYTES
from locverify.geo import GeoPoint, haversine
from locverify.netgen import (
    ID_MAX,
    RTT_US_MAX,
    MeasurementSet,
    Network,
    NodeDescriptor,
    ProbeNoise,
    decode_record,
    decode_record_us,
    decode_records,
    encode_record,
    encode_record_us,
    encode_records,
    export_records,
    generate_network,
    light_floor,
    measure_many,
    measure_pair,
    pair_path_rtts,
    propagation_matrix,
    read_record_dir,
    simulate_measurements,
    symmetric_rtt,
    write_record_dir,
)
from locverify.schedule import build_schedule


def test_descriptor_invariants():
    p, q = GeoPoint(50, 10), GeoPoint(48, 2)
    with pytest.raises(ValueError):
        NodeDescriptor(0, b"k", "a", p, p, is_adversarial=False, claims_false_location=True)
    with pytest.raises(ValueError):
        NodeDescriptor(0, b"k", "a", p, q)
    NodeDescriptor(0, b"k", "a", p, q, is_adversarial=True, claims_false_location=True)


def test_generated_nodes_lie_in_zones(small_world):
    net, _, _ = small_world
    lat, lon = net.true_coords().T
    assert np.all(net.zone_map.classify(lat, lon) >= 0)
    assert len(set(net.keys())) == net.n
    assert net.keys() == sorted(net.keys())


def test_generation_is_deterministic(zones):
    a = generate_network(50, zones, seed=4)
    b = generate_network(50, zones, seed=4)
    assert a.to_dict() == b.to_dict()
    assert generate_network(50, zones, seed=5).to_dict() != a.to_dict()


def test_generation_preconditions(zones):
    with pytest.raises(ValueError):
        generate_network(1, zones)


def _equal_area(geom):
    dense = shapely.segmentize(geom, 0.05)
    return shapely.ops.transform(lambda x, y: (np.radians(x), np.sin(np.radians(y))), dense).area


def test_zone_counts_follow_area(zones):
    net = generate_network(1000, zones, seed=8)
    lat, lon = net.true_coords().T
    counts = np.bincount(zones.classify(lat, lon), minlength=len(zones))
    areas = np.array([_equal_area(z.geometry) for z in zones.zones])
    exp = areas / areas.sum() * 1000
    # pool zones with small expectations
    small = exp < 5
    obs, ex = counts[~small], exp[~small]
    if small.any():
        obs, ex = np.append(obs, counts[small].sum()), np.append(ex, exp[small].sum())
    _, p = stats.chisquare(obs, ex)
    assert p > 0.01


def test_network_json_round_trip(tmp_path, small_world):
    net, _, _ = small_world
    net.save(tmp_path / "n.json")
    back = Network.load(tmp_path / "n.json", net.zone_map)
    assert back.to_dict() == net.to_dict()


def test_network_accepts_bare_descriptor_array(small_world):
    net, _, _ = small_world
    doc = net.to_dict()["nodes"]
    back = Network.from_dict(json.loads(json.dumps(doc)), net.zone_map)
    assert back.n == net.n


def test_network_requires_zone_membership(zones):
    p = GeoPoint(40.0, -35.0)
    d = NodeDescriptor(0, b"k", "a", p, p)
    with pytest.raises(ValueError):
        Network((d,), zones)
    assert Network((d,), zones, strict=False).n == 1


def test_matrix_properties(small_world, model):
    net, _, _ = small_world
    m = propagation_matrix(net, model, seed=1)
    d = haversine(*net.true_coords()[:, None, :].T, *net.true_coords()[None, :, :].T)
    off = ~np.eye(net.n, dtype=bool)
    assert np.all(np.diag(m) == 0)
    assert np.all(d[off] / m[off] <= MAX_SPEED + 1e-9)
    assert np.mean(m[off] != m.T[off]) > 0.99


def test_lazy_pairs_are_stable(small_world, model):
    net, _, _ = small_world
    pairs = np.array([[0, 1], [2, 3], [4, 5]])
    a = pair_path_rtts(net, model, 7, pairs)
    b = pair_path_rtts(net, model, 7, pairs[1:])
    assert np.array_equal(a[1:], b)


def test_min_of_200_redraws_near_curve(model):
    """Monte-Carlo: repeated path draws at a fixed distance bottom out near d / f(d)."""
    rng = np.random.default_rng(5)
    d = 800.0
    draws = model.sample_rtt(np.full((2000, 200), d), rng).min(axis=1)
    f_rtt = d / model.speed(d)
    assert np.all(draws <= f_rtt * 1.02)
    assert np.median(draws) > f_rtt * 0.6


def test_single_probe_is_one_draw():
    m = np.array([[0.0, 10.0], [10.0, 0.0]])
    rng = np.random.default_rng(3)
    want = 10.0 * (1 + rng.exponential(0.05, 1)[0])
    assert measure_pair(0, 1, m, probes=1, seed=np.random.default_rng(3)) == pytest.approx(want)


def test_more_probes_never_slower():
    m = np.array([[0.0, 10.0], [10.0, 0.0]])
    a = measure_pair(0, 1, m, probes=200, seed=9)
    b = measure_pair(0, 1, m, probes=50, seed=9)
    assert a <= b


def test_probe_floor(small_world, model):
    net, sched, ms = small_world
    d = haversine(*net.true_coords()[ms.pairs[:, 0]].T, *net.true_coords()[ms.pairs[:, 1]].T)
    assert np.all(ms.fwd >= light_floor(d))
    assert np.all(ms.rev >= light_floor(d))


def test_measure_many_matches_probe_loop_in_distribution():
    rng = np.random.default_rng(0)
    base = np.full(20000, 10.0)
    fast = measure_many(base, 200, rng)
    slow = np.array([measure_pair(0, 1, np.array([[0, 10.0], [10.0, 0]]), 200, rng) for _ in range(2000)])
    assert stats.ks_2samp(fast, slow).pvalue > 0.001


def test_probe_validation():
    with pytest.raises(ValueError):
        measure_pair(0, 1, np.ones((2, 2)), probes=0)


def test_hash_latency_adds_time():
    base = np.full(100, 10.0)
    a = measure_many(base, 200, np.random.default_rng(1))
    b = measure_many(base, 200, np.random.default_rng(1), ProbeNoise(hash_latency_ms=0.5))
    assert np.allclose(b - a, 0.5)


def test_symmetric_rtt():
    assert symmetric_rtt(10, 10) == 10
    assert symmetric_rtt(8, 12) == 10
    assert symmetric_rtt(3.5, 9.25) == symmetric_rtt(9.25, 3.5)
    with pytest.raises(ValueError):
        symmetric_rtt(0, 1)


def test_measurements_cover_schedule(small_world):
    _, sched, ms = small_world
    assert ms.matches_schedule(sched)
    assert np.all(ms.fwd > 0) and np.all(ms.rev > 0)


@given(st.integers(10, 60), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_coverage_property(n, t, seed):
    from locverify.geo import load_default_zones
    from locverify.propagation import load_default_model

    t = min(t, n - 1)
    net = generate_network(n, load_default_zones(), seed)
    sched = build_schedule(seed.to_bytes(4, "big") + b"b", net.keys(), t)
    ms = simulate_measurements(net, sched, load_default_model(), seed)
    assert set(map(tuple, ms.pairs.tolist())) == {(i, j) for i, r in enumerate(sched.refs) for j in r if i < j}


def test_measurements_reproducible(small_world, model):
    net, sched, ms = small_world
    again = simulate_measurements(net, sched, model, seed=5)
    assert again.fwd.tobytes() == ms.fwd.tobytes()
    assert again.rev.tobytes() == ms.rev.tobytes()


def test_lazy_path_used_beyond_matrix_limit(small_world, model, monkeypatch):
    import locverify.netgen as ng

    net, sched, _ = small_world
    monkeypatch.setattr(ng, "MATRIX_MAX_NODES", 10)
    ms = simulate_measurements(net, sched, model, seed=5)
    assert ms.matches_schedule(sched)


def test_measurement_json_round_trip(tmp_path, small_world):
    _, _, ms = small_world
    ms.save(tmp_path / "m.json")
    back = MeasurementSet.load(tmp_path / "m.json")
    assert np.array_equal(back.fwd, ms.fwd) and np.array_equal(back.pairs, ms.pairs)


def test_directed_lookup(small_world):
    _, _, ms = small_world
    a, b = ms.pairs[3]
    assert ms.directed(a, b) == ms.fwd[3]
    assert ms.directed(b, a) == ms.rev[3]


def test_adjacency_is_consistent(small_world):
    _, sched, ms = small_world
    adj = ms.adjacency()
    assert np.array_equal(adj.degree(), sched.sizes())
    i = 17
    sl = adj.of(i)
    assert tuple(adj.ref[sl]) == sched.refs[i]
    for j, out, inn in zip(adj.ref[sl], adj.out_rtt[sl], adj.in_rtt[sl]):
        assert out == ms.directed(i, j) and inn == ms.directed(j, i)


# records ------------------------------------------------------------------------

BOUNDARY_IDS = [0, 1, 2, 0x7FFFF, 0x80000, ID_MAX - 1, ID_MAX]
BOUNDARY_RTTS = [0, 1, 2, 999, 1000, 0x7FFFF, 0x80000, RTT_US_MAX - 1, RTT_US_MAX]


@pytest.mark.parametrize("ref,us", list(itertools.product(BOUNDARY_IDS, BOUNDARY_RTTS)))
def test_record_boundaries(ref, us):
    blob = encode_record_us(ref, us)
    assert len(blob) == RECORD_BYTES
    assert decode_record_us(blob) == (ref, us)


def test_record_layout_is_big_endian():
    assert encode_record_us(1, 2) == bytes([0x00, 0x00, 0x10, 0x00, 0x02])
    assert encode_record_us(ID_MAX, RTT_US_MAX) == b"\xff" * 5


@pytest.mark.parametrize("ref,us", [(-1, 0), (ID_MAX + 1, 0), (0, -1), (0, RTT_US_MAX + 1)])
def test_record_out_of_range(ref, us):
    with pytest.raises(ValueError):
        encode_record_us(ref, us)


def test_record_length_checked():
    with pytest.raises(ValueError):
        decode_record_us(b"\0" * 4)
    with pytest.raises(ValueError):
        decode_records(b"\0" * 7)


@given(st.integers(0, ID_MAX), st.integers(0, RTT_US_MAX))
def test_record_round_trip_property(ref, us):
    assert decode_record_us(encode_record_us(ref, us)) == (ref, us)


def test_millisecond_helpers():
    assert decode_record(encode_record(5, 12.3456)) == (5, 12.346)
    entries = [(1, 2.5), (3, 4.25)]
    assert decode_records(encode_records(entries)) == entries


def test_record_directory_round_trip(tmp_path, small_world):
    _, _, ms = small_world
    write_record_dir(ms, tmp_path / "rec")
    back = read_record_dir(tmp_path / "rec", ms.n)
    assert np.array_equal(back.pairs, ms.pairs)
    assert np.allclose(back.fwd, ms.fwd, atol=5e-4)
    assert (tmp_path / "rec" / "mirror.json").exists()
    blobs = export_records(ms)
    assert sum(len(b) for b in blobs.values()) == 2 * len(ms.pairs) * RECORD_BYTES
