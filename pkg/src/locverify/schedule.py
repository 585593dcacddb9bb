"""Beacon-seeded, publicly verifiable reference sets.

Every node derives ``h = H(beacon || pk)``, walks a hash chain from it to
pick ``t`` initial references, and the sets are then closed under symmetry.
Node indices follow ascending public-key order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .constants import DIGEST_BYTES, HASH_NAME, protocol_hash


def node_hash(beacon: bytes, pk: bytes) -> bytes:
    if not beacon or not pk:
        raise ValueError("beacon and public key must be non-empty")
    return protocol_hash(bytes(beacon) + bytes(pk))


def initial_references(h: bytes, self_index: int, n: int, t: int) -> list[int]:
    """Hash-chain walk: ``r = y mod n``; keep new non-self values; ``y = H(y)``.

    ``y`` is read as a big-endian unsigned integer; the chain re-hashes the
    raw digest bytes.
    """
    if n < 2:
        raise ValueError("need at least two nodes")
    if not 0 < t < n:
        raise ValueError("t must satisfy 0 < t < n")
    if not 0 <= self_index < n:
        raise ValueError("self index out of range")
    if len(h) != DIGEST_BYTES:
        raise ValueError(f"digest must be {DIGEST_BYTES} bytes")
    out: list[int] = []
    seen = {self_index}
    y = bytes(h)
    while len(out) < t:
        r = int.from_bytes(y, "big") % n
        if r not in seen:
            seen.add(r)
            out.append(r)
        y = protocol_hash(y)
    return out


@dataclass(frozen=True)
class ReferenceSchedule:
    refs: tuple[tuple[int, ...], ...]  # sorted per node
    initial: tuple[tuple[int, ...], ...]  # hash-chain order per node

    @property
    def n(self) -> int:
        return len(self.refs)

    def sizes(self) -> np.ndarray:
        return np.array([len(r) for r in self.refs])

    def pairs(self) -> np.ndarray:
        """Unordered scheduled pairs ``(i, j)`` with ``i < j``, sorted."""
        out = [(i, j) for i, rs in enumerate(self.refs) for j in rs if i < j]
        return np.array(out, dtype=np.int64).reshape(-1, 2)

    def from_initial(self, i: int, j: int) -> bool:
        return j in self.initial[i]

    def is_symmetric(self) -> bool:
        sets = [set(r) for r in self.refs]
        return all(i in sets[j] for i, s in enumerate(sets) for j in s) and all(i not in s for i, s in enumerate(sets))

    def to_dict(self) -> dict:
        return {
            "hash": HASH_NAME,
            "n": self.n,
            "references": {str(i): list(r) for i, r in enumerate(self.refs)},
            "initial": {str(i): list(r) for i, r in enumerate(self.initial)},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ReferenceSchedule":
        n = int(doc["n"])
        refs = tuple(tuple(int(x) for x in doc["references"][str(i)]) for i in range(n))
        init = tuple(tuple(int(x) for x in doc.get("initial", {}).get(str(i), [])) for i in range(n))
        return cls(refs, init)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "ReferenceSchedule":
        return cls.from_dict(json.loads(Path(path).read_text()))


def complete_references(initial_sets) -> ReferenceSchedule:
    n = len(initial_sets)
    full = [set(s) for s in initial_sets]
    for i, s in enumerate(initial_sets):
        for j in s:
            if j == i or not 0 <= j < n:
                raise ValueError(f"invalid initial reference {j} for node {i}")
            full[j].add(i)
    return ReferenceSchedule(
        tuple(tuple(sorted(s)) for s in full),
        tuple(tuple(s) for s in initial_sets),
    )


def sort_keys(pks) -> list[bytes]:
    return sorted(bytes(k) for k in pks)


def build_schedule(beacon: bytes, pks, t: int) -> ReferenceSchedule:
    """Full schedule for a key list; indices refer to ascending key order."""
    keys = sort_keys(pks)
    if len(set(keys)) != len(keys):
        raise ValueError("duplicate public keys")
    n = len(keys)
    init = [initial_references(node_hash(beacon, k), i, n, t) for i, k in enumerate(keys)]
    return complete_references(init)


def reference_size_tail(n: int, t: int, r: int) -> float:
    """P(t + t' >= r) with t' ~ Binomial(n - t, t / n)."""
    if n < 2 or not 0 < t < n or r < 0:
        raise ValueError("invalid parameters")
    k = r - t
    if k <= 0:
        return 1.0
    # survival function works in log space internally; sf(k-1) = P(X >= k)
    return float(np.exp(stats.binom.logsf(k - 1, n - t, t / n)))


def expected_extra(n: int, t: int) -> float:
    return (n - t) * t / n
