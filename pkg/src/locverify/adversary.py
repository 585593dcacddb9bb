"""Measurement manipulation by a coalition of nodes.

A claiming node ``c`` with false location ``c'`` treats each scheduled
reference ``r`` in one of three ways:

* ``r`` is a coalition member: both directions are fabricated to match the
  model exactly for ``dist(c', r')`` (perfect manipulation);
* ``r`` is honest and ``c'`` lies farther from ``r`` than the truth: ``c``
  fabricates its own report and delays its replies to ``r``'s probes
  (slow-down);
* ``r`` is honest and ``c'`` is closer: nothing can be done, since probes
  cannot be sped up.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .constants import DEFAULT_TOLERANCE
from .geo import GeoPoint, haversine
from .netgen import DELAYED, FRAMED, SPOOFED, MeasurementSet, Network, NodeDescriptor
from .propagation import PropagationModel
from .schedule import ReferenceSchedule

ATTACK_FORMAT = "locverify.attack"


class ManipulationClass(enum.Enum):
    PERFECT = "PerfectManipulation"
    SLOWDOWN = "SlowDown"
    NONE = "NoManipulation"


@dataclass(frozen=True)
class AttackConfig:
    adversarial: tuple[int, ...]
    claiming: tuple[int, ...]
    seed: int = 0
    framing_targets: tuple[int, ...] = ()
    jitter: float = 0.02
    slowdown: str = "max"  # "max": delayed = max(original, target); "estimate": see apply_attack
    framing_slowdown: float = 0.5
    claimed_locations: dict[int, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        a = set(self.adversarial)
        if not set(self.claiming) <= a:
            raise ValueError("claiming set must be a subset of the adversarial set")
        if set(self.framing_targets) & a:
            raise ValueError("framing targets must be honest")
        if not 0 <= self.jitter < 1:
            raise ValueError("jitter must lie in [0, 1)")
        if self.slowdown not in ("max", "estimate"):
            raise ValueError(f"unknown slowdown model {self.slowdown!r}")
        if not 0 < self.framing_slowdown < 1:
            raise ValueError("framing_slowdown must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {
            "format": ATTACK_FORMAT,
            "version": 1,
            "adversarial": list(self.adversarial),
            "claiming": list(self.claiming),
            "seed": self.seed,
            "framing_targets": list(self.framing_targets),
            "jitter": self.jitter,
            "slowdown": self.slowdown,
            "framing_slowdown": self.framing_slowdown,
            "claimed_locations": {str(k): list(v) for k, v in self.claimed_locations.items()},
        }

    @classmethod
    def from_dict(cls, doc: dict, n: int | None = None) -> "AttackConfig":
        """Accepts explicit index lists or fractions (which need ``n``)."""
        seed = int(doc.get("seed", 0))
        rng = np.random.default_rng(seed)
        adv = doc.get("adversarial")
        if adv is None:
            if n is None:
                raise ValueError("fractions need the network size")
            k = int(round(float(doc["adversarial_fraction"]) * n))
            adv = sorted(int(x) for x in rng.choice(n, k, replace=False))
        claim = doc.get("claiming")
        if claim is None:
            frac = doc.get("claiming_fraction")
            if frac is None:
                claim = list(adv)
            else:
                k = int(round(float(frac) * n)) if n is not None else 0
                if k > len(adv):
                    raise ValueError("claiming set larger than adversarial set")
                claim = sorted(adv[:k]) if k == len(adv) else sorted(int(x) for x in rng.choice(adv, k, replace=False))
        frame = doc.get("framing_targets", [])
        if isinstance(frame, (int, float)) and n is not None:
            honest = np.setdiff1d(np.arange(n), adv)
            frame = sorted(int(x) for x in rng.choice(honest, int(frame), replace=False))
        locs = {int(k): tuple(v) for k, v in doc.get("claimed_locations", {}).items()}
        return cls(tuple(int(x) for x in adv), tuple(int(x) for x in claim), seed, tuple(int(x) for x in frame),
                   float(doc.get("jitter", 0.02)), doc.get("slowdown", "max"),
                   float(doc.get("framing_slowdown", 0.5)), locs)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path, n: int | None = None) -> "AttackConfig":
        return cls.from_dict(json.loads(Path(path).read_text()), n)


def random_attack(n: int, n_adversarial: int, n_claiming: int | None = None, seed: int = 0, **kw) -> AttackConfig:
    rng = np.random.default_rng(seed)
    adv = rng.choice(n, n_adversarial, replace=False)
    k = n_adversarial if n_claiming is None else n_claiming
    claim = adv[:k]
    return AttackConfig(tuple(sorted(int(x) for x in adv)), tuple(sorted(int(x) for x in claim)), seed, **kw)


def assign_claims(net: Network, cfg: AttackConfig) -> Network:
    """Mark the coalition and give every claiming node a location in another zone.

    Locations listed in ``cfg.claimed_locations`` are used as given; the rest
    are drawn uniformly over the zone union, re-drawing until the zone
    differs from the node's true zone.
    """
    rng = np.random.default_rng([cfg.seed, 0xC1A1])
    zm = net.zone_map
    adv = set(cfg.adversarial)
    claim = set(cfg.claiming)
    true = net.true_coords()
    zones = zm.classify(true[:, 0], true[:, 1])
    out = []
    for d in net.descriptors:
        i = d.index
        if i in claim:
            if i in cfg.claimed_locations:
                lat, lon = cfg.claimed_locations[i]
                p = GeoPoint(lat, lon)
                if zm.zone_of(p) == zm.ids[zones[i]]:
                    raise ValueError(f"claimed location for node {i} lies in its true zone")
            else:
                lat, lon = zm.sample_uniform(1, rng, exclude=zm.ids[zones[i]])[0]
                p = GeoPoint(lat, lon)
            out.append(NodeDescriptor(i, d.public_key, d.address, d.true_location, p, True, True))
        elif i in adv:
            out.append(NodeDescriptor(i, d.public_key, d.address, d.true_location, d.true_location, True, False))
        else:
            out.append(NodeDescriptor(i, d.public_key, d.address, d.true_location, d.true_location, False, False))
    return net.with_descriptors(out)


def classify(target: NodeDescriptor, reference: NodeDescriptor) -> ManipulationClass:
    if not target.claims_false_location:
        raise ValueError("target does not claim a false location")
    if reference.is_adversarial:
        return ManipulationClass.PERFECT
    r = reference.claimed_location
    d_claim = haversine(target.claimed_location.lat, target.claimed_location.lon, r.lat, r.lon)
    d_true = haversine(target.true_location.lat, target.true_location.lon, r.lat, r.lon)
    return ManipulationClass.SLOWDOWN if d_claim > d_true else ManipulationClass.NONE


def spoofed_rtt(claimed_distance, model: PropagationModel, rng: np.random.Generator | None = None,
                jitter: float = 0.02):
    """Model-consistent RTT for a claimed distance, with multiplicative jitter."""
    d = np.asarray(claimed_distance, dtype=float)
    if np.any(d <= 0):
        raise ValueError("claimed distance must be positive")
    t = model.time(d)
    if rng is not None and jitter > 0:
        t = t * (1.0 + rng.uniform(-jitter, jitter, d.shape))
    return float(t) if t.ndim == 0 else t


def pair_classes(net: Network, ms: MeasurementSet) -> tuple[np.ndarray, np.ndarray]:
    """Manipulation class codes per pair (0 none, 1 perfect, 2 slow-down).

    Returns the codes and, for slow-down pairs, which endpoint (0 = first,
    1 = second) is the manipulating node.
    """
    a, b = ms.pairs[:, 0], ms.pairs[:, 1]
    adv = net.adversarial_mask()
    claim = net.claiming_mask()
    true = net.true_coords()
    cl = net.claimed_coords()
    cls = np.zeros(len(a), dtype=np.int8)
    side = np.zeros(len(a), dtype=np.int8)
    perfect = (claim[a] & adv[b]) | (claim[b] & adv[a])
    cls[perfect] = 1
    for s, (t, r) in enumerate(((a, b), (b, a))):
        cand = claim[t] & ~adv[r]
        d_claim = haversine(cl[t, 0], cl[t, 1], cl[r, 0], cl[r, 1])
        d_true = haversine(true[t, 0], true[t, 1], cl[r, 0], cl[r, 1])
        slow = cand & (d_claim > d_true)
        cls[slow] = 2
        side[slow] = s
    return cls, side


def apply_attack(net: Network, ms: MeasurementSet, cfg: AttackConfig, model: PropagationModel,
                 rng: np.random.Generator | None = None) -> MeasurementSet:
    """Rewrite measurements touched by claiming nodes.

    With ``cfg.slowdown == "max"`` the delayed direction becomes
    ``max(original, target)``.  With ``"estimate"`` the attacker does not
    know the honest direction exactly and adds ``max(0, target - own)``,
    using its own honest measurement of the pair as the estimate.
    """
    if rng is None:
        rng = np.random.default_rng([cfg.seed, 0xA77A])
    cls, side = pair_classes(net, ms)
    cl = net.claimed_coords()
    a, b = ms.pairs[:, 0], ms.pairs[:, 1]
    d_claim = np.maximum(haversine(cl[a, 0], cl[a, 1], cl[b, 0], cl[b, 1]), 1e-3)
    out = ms.copy_with()
    fwd, rev, af, ar = out.fwd, out.rev, out.ann_fwd, out.ann_rev

    p = np.flatnonzero(cls == 1)
    fwd[p] = spoofed_rtt(d_claim[p], model, rng, cfg.jitter)
    rev[p] = spoofed_rtt(d_claim[p], model, rng, cfg.jitter)
    af[p] = SPOOFED
    ar[p] = SPOOFED

    s = np.flatnonzero(cls == 2)
    own_t = spoofed_rtt(d_claim[s], model, rng, cfg.jitter)
    dly_t = spoofed_rtt(d_claim[s], model, rng, cfg.jitter)
    first = side[s] == 0  # manipulating node is the pair's first endpoint: it reports fwd
    own_orig = np.where(first, ms.fwd[s], ms.rev[s])
    hon_orig = np.where(first, ms.rev[s], ms.fwd[s])
    if cfg.slowdown == "max":
        delayed = np.maximum(hon_orig, dly_t)
    else:
        delayed = hon_orig + np.maximum(0.0, dly_t - own_orig)
    fwd[s] = np.where(first, own_t, delayed)
    rev[s] = np.where(first, delayed, own_t)
    af[s] = np.where(first, SPOOFED, DELAYED)
    ar[s] = np.where(first, DELAYED, SPOOFED)
    return out


def framing_attack(net: Network, ms: MeasurementSet, cfg: AttackConfig, model: PropagationModel,
                   tau: float = DEFAULT_TOLERANCE) -> MeasurementSet:
    """Coalition references report implausibly slow RTTs towards framed nodes.

    The reported speed is ``framing_slowdown`` times the tolerated lower
    bound at the claimed distance, so the pair fails for both endpoints.
    """
    adv = net.adversarial_mask()
    targets = np.zeros(net.n, dtype=bool)
    targets[list(cfg.framing_targets)] = True
    if np.any(targets & adv):
        raise ValueError("framing targets must be honest")
    cl = net.claimed_coords()
    a, b = ms.pairs[:, 0], ms.pairs[:, 1]
    d = np.maximum(haversine(cl[a, 0], cl[a, 1], cl[b, 0], cl[b, 1]), 1e-3)
    slow = d / (model.lower_bound(d, tau) * cfg.framing_slowdown)
    out = ms.copy_with()
    k1 = np.flatnonzero(targets[b] & adv[a])  # attacker is a, reports fwd
    k2 = np.flatnonzero(targets[a] & adv[b])  # attacker is b, reports rev
    out.fwd[k1] = slow[k1]
    out.ann_fwd[k1] = FRAMED
    out.rev[k2] = slow[k2]
    out.ann_rev[k2] = FRAMED
    return out


def affected_nodes(net: Network, schedule: ReferenceSchedule) -> np.ndarray:
    """Claiming nodes plus every honest node that has one of them as a reference."""
    claim = net.claiming_mask()
    adv = net.adversarial_mask()
    hit = claim.copy()
    for c in np.flatnonzero(claim):
        for r in schedule.refs[c]:
            if not adv[r]:
                hit[r] = True
    return np.flatnonzero(hit)
