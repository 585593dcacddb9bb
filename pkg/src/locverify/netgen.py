"""Synthetic worlds: node placement, ground-truth latencies and probe measurements."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .constants import (
    DEFAULT_PROBES,
    MAX_SPEED,
    RECORD_BYTES,
    RECORD_ID_BITS,
    RECORD_RTT_BITS,
)
from .geo import GeoPoint, ZoneMap, haversine, load_default_zones
from .propagation import PropagationModel
from .schedule import ReferenceSchedule

NETWORK_FORMAT = "locverify.network"
MEASUREMENT_FORMAT = "locverify.measurements"

# measurement annotations
BENIGN, SPOOFED, DELAYED, FRAMED = 0, 1, 2, 3
ANNOTATIONS = ("benign", "spoofed", "delayed", "framed")

MATRIX_MAX_NODES = 4000
KEY_BYTES = 32


@dataclass(frozen=True)
class NodeDescriptor:
    index: int
    public_key: bytes
    address: str
    true_location: GeoPoint
    claimed_location: GeoPoint
    is_adversarial: bool = False
    claims_false_location: bool = False

    def __post_init__(self):
        if self.claims_false_location and not self.is_adversarial:
            raise ValueError(f"node {self.index}: false claim requires adversarial membership")
        if not self.is_adversarial and self.claimed_location != self.true_location:
            raise ValueError(f"node {self.index}: honest node must claim its true location")

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "key": self.public_key.hex(),
            "address": self.address,
            "true": [self.true_location.lat, self.true_location.lon],
            "claimed": [self.claimed_location.lat, self.claimed_location.lon],
            "adversarial": self.is_adversarial,
            "claims_false": self.claims_false_location,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NodeDescriptor":
        return cls(
            index=int(d["index"]),
            public_key=bytes.fromhex(d["key"]),
            address=str(d.get("address", "")),
            true_location=GeoPoint(*d["true"]),
            claimed_location=GeoPoint(*d.get("claimed", d["true"])),
            is_adversarial=bool(d.get("adversarial", False)),
            claims_false_location=bool(d.get("claims_false", False)),
        )


@dataclass(frozen=True, eq=False)
class Network:
    descriptors: tuple[NodeDescriptor, ...]
    zone_map: ZoneMap
    seed: int | None = None
    zone_map_id: str = "europe15"
    # ingested networks may hold nodes outside every zone
    strict: bool = True

    def __post_init__(self):
        for k, d in enumerate(self.descriptors):
            if d.index != k:
                raise ValueError("descriptor indices must be 0..N-1 in order")
        lat, lon = self.true_coords().T
        if self.strict and len(lat) and np.any(self.zone_map.classify(lat, lon) < 0):
            raise ValueError("every true location must lie inside a zone")

    @property
    def n(self) -> int:
        return len(self.descriptors)

    def true_coords(self) -> np.ndarray:
        return np.array([d.true_location.as_tuple() for d in self.descriptors], dtype=float).reshape(-1, 2)

    def claimed_coords(self) -> np.ndarray:
        return np.array([d.claimed_location.as_tuple() for d in self.descriptors], dtype=float).reshape(-1, 2)

    def adversarial_mask(self) -> np.ndarray:
        return np.array([d.is_adversarial for d in self.descriptors], dtype=bool)

    def claiming_mask(self) -> np.ndarray:
        return np.array([d.claims_false_location for d in self.descriptors], dtype=bool)

    def keys(self) -> list[bytes]:
        return [d.public_key for d in self.descriptors]

    def with_descriptors(self, descriptors) -> "Network":
        return replace(self, descriptors=tuple(descriptors))

    def to_dict(self) -> dict:
        doc = {
            "format": NETWORK_FORMAT,
            "version": 1,
            "seed": self.seed,
            "zone_map": self.zone_map_id,
            "nodes": [d.to_dict() for d in self.descriptors],
        }
        if not self.strict:
            doc["strict"] = False
        return doc

    @classmethod
    def from_dict(cls, doc: dict, zone_map: ZoneMap | None = None) -> "Network":
        strict = True
        if isinstance(doc, list):
            nodes, seed, zid = doc, None, "europe15"
        else:
            if doc.get("format") != NETWORK_FORMAT:
                raise ValueError("not a network document")
            nodes, seed, zid = doc["nodes"], doc.get("seed"), doc.get("zone_map", "europe15")
            strict = bool(doc.get("strict", True))
        zm = zone_map or load_default_zones()
        return cls(tuple(NodeDescriptor.from_dict(d) for d in nodes), zm, seed, zid, strict)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path, zone_map: ZoneMap | None = None) -> "Network":
        return cls.from_dict(json.loads(Path(path).read_text()), zone_map)


def _address(i: int) -> str:
    return f"10.{(i >> 16) & 255}.{(i >> 8) & 255}.{i & 255}"


def generate_network(n: int, zone_map: ZoneMap | None = None, seed: int = 0) -> Network:
    """``n`` honest nodes placed uniformly (by area) over the zone union."""
    if n < 2:
        raise ValueError("need at least two nodes")
    zm = zone_map or load_default_zones()
    if len(zm) == 0:
        raise ValueError("empty zone map")
    rng = np.random.default_rng(seed)
    pts = zm.sample_uniform(n, rng)
    keys = [rng.bytes(KEY_BYTES) for _ in range(n)]
    order = sorted(range(n), key=lambda k: keys[k])
    descs = []
    for idx, k in enumerate(order):
        p = GeoPoint(pts[k, 0], pts[k, 1])
        descs.append(NodeDescriptor(idx, keys[k], _address(idx), p, p))
    return Network(tuple(descs), zm, seed)


def distance_matrix(coords: np.ndarray) -> np.ndarray:
    lat, lon = coords[:, 0], coords[:, 1]
    return haversine(lat[:, None], lon[:, None], lat[None, :], lon[None, :])


def propagation_matrix(net: Network, model: PropagationModel, seed) -> np.ndarray:
    """Ground-truth directed path RTTs for every ordered pair; zero diagonal.

    ``rtt[i, j]`` is the base round-trip time seen by ``i`` probing ``j``.
    The two directions are drawn independently.
    """
    rng = np.random.default_rng(seed)
    d = distance_matrix(net.true_coords())
    n = net.n
    off = ~np.eye(n, dtype=bool)
    out = np.zeros((n, n))
    out[off] = model.sample_rtt(np.maximum(d[off], 1e-3), rng)
    return out


def pair_path_rtts(net: Network, model: PropagationModel, seed, pairs: np.ndarray) -> np.ndarray:
    """Lazy alternative to the full matrix: ``(P, 2)`` directed RTTs per pair.

    Each pair draws from its own stream derived from ``(seed, i, j)``, so the
    result does not depend on which other pairs are requested.
    """
    coords = net.true_coords()
    out = np.empty((len(pairs), 2))
    for k, (i, j) in enumerate(pairs):
        rng = np.random.default_rng([int(seed), int(i), int(j)])
        d = max(float(haversine(*coords[i], *coords[j])), 1e-3)
        out[k] = model.sample_rtt(np.array([d, d]), rng)
    return out


@dataclass(frozen=True)
class ProbeNoise:
    """Per-probe queueing on top of the path RTT, as a relative exponential delay."""

    queue_mean: float = 0.05
    hash_latency_ms: float = 0.0


def measure_pair(i: int, j: int, matrix: np.ndarray, probes: int = DEFAULT_PROBES, seed=None,
                 noise: ProbeNoise = ProbeNoise()) -> float:
    """Minimum over ``probes`` draws of ``i`` probing ``j``.

    Draws never fall below the path RTT: a response cannot precede its request.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    base = float(matrix[i, j])
    draws = base * (1.0 + rng.exponential(noise.queue_mean, probes)) + noise.hash_latency_ms
    return float(np.min(draws))


def measure_many(base: np.ndarray, probes: int, rng: np.random.Generator, noise: ProbeNoise = ProbeNoise()) -> np.ndarray:
    """Vectorized :func:`measure_pair` over an array of path RTTs.

    The minimum of ``k`` exponential delays with mean ``q`` is exponential
    with mean ``q / k``, so one draw per entry has the same distribution as
    the explicit probe loop.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    base = np.asarray(base, dtype=float)
    return base * (1.0 + rng.exponential(noise.queue_mean / probes, base.shape)) + noise.hash_latency_ms


def symmetric_rtt(fwd, rev):
    f = np.asarray(fwd, dtype=float)
    r = np.asarray(rev, dtype=float)
    if np.any(f <= 0) or np.any(r <= 0):
        raise ValueError("RTTs must be positive")
    out = (f + r) / 2.0
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class MeasurementSet:
    """Directed minimum RTTs for each scheduled pair ``(a, b)`` with ``a < b``.

    ``fwd`` is ``a`` probing ``b`` (reported by ``a``); ``rev`` is ``b``
    probing ``a``.
    """

    n: int
    pairs: np.ndarray
    fwd: np.ndarray
    rev: np.ndarray
    ann_fwd: np.ndarray
    ann_rev: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "pairs", p)
        for name, dt in (("fwd", float), ("rev", float), ("ann_fwd", np.int8), ("ann_rev", np.int8)):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=dt).reshape(len(p)))
        if np.any(p[:, 0] >= p[:, 1]):
            raise ValueError("pairs must be stored as (a, b) with a < b")
        if np.any(self.fwd <= 0) or np.any(self.rev <= 0):
            raise ValueError("RTTs must be positive")

    @property
    def symmetric(self) -> np.ndarray:
        return (self.fwd + self.rev) / 2.0

    def copy_with(self, **kw) -> "MeasurementSet":
        base = dict(n=self.n, pairs=self.pairs, fwd=self.fwd.copy(), rev=self.rev.copy(),
                    ann_fwd=self.ann_fwd.copy(), ann_rev=self.ann_rev.copy())
        base.update(kw)
        return MeasurementSet(**base)

    def index(self) -> dict[tuple[int, int], int]:
        return {(int(a), int(b)): k for k, (a, b) in enumerate(self.pairs)}

    def directed(self, i: int, j: int) -> float:
        """RTT measured by ``i`` probing ``j``."""
        if i < j:
            return float(self.fwd[self.index()[(i, j)]])
        return float(self.rev[self.index()[(j, i)]])

    def adjacency(self) -> "Adjacency":
        return Adjacency.build(self)

    def matches_schedule(self, schedule: ReferenceSchedule) -> bool:
        return self.n == schedule.n and np.array_equal(self.pairs, schedule.pairs())

    def to_dict(self) -> dict:
        return {
            "format": MEASUREMENT_FORMAT,
            "version": 1,
            "n": self.n,
            "annotations": list(ANNOTATIONS),
            "pairs": [
                [int(a), int(b), float(f), float(r), int(af), int(ar)]
                for (a, b), f, r, af, ar in zip(self.pairs, self.fwd, self.rev, self.ann_fwd, self.ann_rev)
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MeasurementSet":
        if doc.get("format") != MEASUREMENT_FORMAT:
            raise ValueError("not a measurement document")
        rows = doc["pairs"]
        arr = np.array(rows, dtype=float).reshape(-1, 6)
        return cls(int(doc["n"]), arr[:, :2].astype(np.int64), arr[:, 2], arr[:, 3],
                   arr[:, 4].astype(np.int8), arr[:, 5].astype(np.int8))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "MeasurementSet":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Adjacency:
    """Per-node view of a measurement set in CSR layout.

    For node ``i`` the slice ``ptr[i]:ptr[i+1]`` lists its references with
    ``out_rtt`` (``i`` probing the reference) and ``in_rtt`` (reference
    probing ``i``), plus the pair index into the parent set.
    """

    ptr: np.ndarray
    ref: np.ndarray
    out_rtt: np.ndarray
    in_rtt: np.ndarray
    pair: np.ndarray

    @classmethod
    def build(cls, ms: MeasurementSet) -> "Adjacency":
        a, b = ms.pairs[:, 0], ms.pairs[:, 1]
        k = np.arange(len(a))
        node = np.concatenate([a, b])
        ref = np.concatenate([b, a])
        out_rtt = np.concatenate([ms.fwd, ms.rev])
        in_rtt = np.concatenate([ms.rev, ms.fwd])
        pair = np.concatenate([k, k])
        order = np.lexsort((ref, node))
        counts = np.bincount(node, minlength=ms.n)
        ptr = np.concatenate([[0], np.cumsum(counts)])
        return cls(ptr, ref[order], out_rtt[order], in_rtt[order], pair[order])

    def of(self, i: int) -> slice:
        return slice(self.ptr[i], self.ptr[i + 1])

    def degree(self) -> np.ndarray:
        return np.diff(self.ptr)


def simulate_measurements(net: Network, schedule: ReferenceSchedule, model: PropagationModel, seed,
                          probes: int = DEFAULT_PROBES, noise: ProbeNoise = ProbeNoise(),
                          matrix: np.ndarray | None = None) -> MeasurementSet:
    """Measure every scheduled pair in both directions.

    ``seed`` may be an int or a ``SeedSequence``; the path-latency and the
    probing stages draw from independent children of it.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    path_ss, probe_ss = ss.spawn(2)
    pairs = schedule.pairs()
    if matrix is None:
        if net.n <= MATRIX_MAX_NODES:
            matrix = propagation_matrix(net, model, path_ss)
        else:
            base = pair_path_rtts(net, model, int(path_ss.generate_state(1)[0]), pairs)
    if matrix is not None:
        base = np.column_stack([matrix[pairs[:, 0], pairs[:, 1]], matrix[pairs[:, 1], pairs[:, 0]]])
    rng = np.random.default_rng(probe_ss)
    meas = measure_many(base, probes, rng, noise)
    z = np.zeros(len(pairs), dtype=np.int8)
    return MeasurementSet(net.n, pairs, meas[:, 0], meas[:, 1], z, z.copy())


# 5-byte record ----------------------------------------------------------------

ID_MAX = (1 << RECORD_ID_BITS) - 1
RTT_US_MAX = (1 << RECORD_RTT_BITS) - 1


def encode_record_us(ref_id: int, rtt_us: int) -> bytes:
    """Pack a 20-bit reference id and a 20-bit RTT in microseconds, big-endian."""
    if not 0 <= ref_id <= ID_MAX:
        raise ValueError(f"reference id {ref_id} does not fit in {RECORD_ID_BITS} bits")
    if not 0 <= rtt_us <= RTT_US_MAX:
        raise ValueError(f"rtt {rtt_us} us does not fit in {RECORD_RTT_BITS} bits")
    word = (int(ref_id) << RECORD_RTT_BITS) | int(rtt_us)
    return word.to_bytes(RECORD_BYTES, "big")


def decode_record_us(data: bytes) -> tuple[int, int]:
    if len(data) != RECORD_BYTES:
        raise ValueError(f"record must be {RECORD_BYTES} bytes")
    word = int.from_bytes(data, "big")
    return word >> RECORD_RTT_BITS, word & RTT_US_MAX


def encode_record(ref_id: int, rtt_ms: float) -> bytes:
    return encode_record_us(ref_id, int(round(rtt_ms * 1000.0)))


def decode_record(data: bytes) -> tuple[int, float]:
    ref, us = decode_record_us(data)
    return ref, us / 1000.0


def encode_records(entries) -> bytes:
    return b"".join(encode_record(r, t) for r, t in entries)


def decode_records(blob: bytes) -> list[tuple[int, float]]:
    if len(blob) % RECORD_BYTES:
        raise ValueError("record stream length is not a multiple of 5")
    return [decode_record(blob[k:k + RECORD_BYTES]) for k in range(0, len(blob), RECORD_BYTES)]


def export_records(ms: MeasurementSet) -> dict[int, bytes]:
    """Per-node record streams: what node ``i`` measured towards each reference."""
    adj = ms.adjacency()
    return {i: encode_records(zip(adj.ref[adj.of(i)], adj.out_rtt[adj.of(i)])) for i in range(ms.n)}


def write_record_dir(ms: MeasurementSet, directory) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for i, blob in export_records(ms).items():
        (out / f"{i:07d}.bin").write_bytes(blob)
    ms.save(out / "mirror.json")


def read_record_dir(directory, n: int) -> MeasurementSet:
    """Rebuild a measurement set from per-node record files (µs resolution)."""
    src = Path(directory)
    directed: dict[tuple[int, int], float] = {}
    for i in range(n):
        path = src / f"{i:07d}.bin"
        if path.exists():
            for ref, rtt in decode_records(path.read_bytes()):
                directed[(i, ref)] = rtt
    pairs = sorted({(min(i, j), max(i, j)) for i, j in directed})
    fwd, rev = [], []
    for a, b in pairs:
        if (a, b) not in directed or (b, a) not in directed:
            raise ValueError(f"pair ({a}, {b}) lacks one direction")
        fwd.append(directed[(a, b)])
        rev.append(directed[(b, a)])
    z = np.zeros(len(pairs), dtype=np.int8)
    return MeasurementSet(n, np.array(pairs, dtype=np.int64).reshape(-1, 2), fwd, rev, z, z.copy())


def light_floor(distance_km) -> np.ndarray:
    return np.asarray(distance_km, dtype=float) / MAX_SPEED

