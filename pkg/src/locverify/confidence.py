"""Speed-bound consistency of a node's measurements with everyone's claimed locations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .constants import DEFAULT_THRESHOLD, DEFAULT_TOLERANCE, MAX_SPEED
from .geo import haversine
from .netgen import MeasurementSet
from .propagation import PropagationModel

# violation tags as bit flags, per direction
LOWER_FWD, UPPER_FWD, LOWER_REV, UPPER_REV = 1, 2, 4, 8

ACCEPT, REJECT = "accept", "reject"


def _direction_flags(rtt, dist, model: PropagationModel, tau: float):
    s = np.asarray(dist, dtype=float) / np.asarray(rtt, dtype=float)
    low = s < model.lower_bound(dist, tau)
    high = s > MAX_SPEED
    return low, high


def pair_flags(rtt_fwd, rtt_rev, claimed_distance, model: PropagationModel, tau: float = DEFAULT_TOLERANCE) -> np.ndarray:
    """Vectorized violation bit mask; zero means the pair passes."""
    f = np.asarray(rtt_fwd, dtype=float)
    r = np.asarray(rtt_rev, dtype=float)
    if np.any(f <= 0) or np.any(r <= 0):
        raise ValueError("RTTs must be positive")
    d = np.asarray(claimed_distance, dtype=float)
    if np.any(d < 0):
        raise ValueError("distance must be non-negative")
    lf, hf = _direction_flags(f, d, model, tau)
    lr, hr = _direction_flags(r, d, model, tau)
    return (lf * LOWER_FWD) | (hf * UPPER_FWD) | (lr * LOWER_REV) | (hr * UPPER_REV)


def describe_flags(flags: int) -> list[str]:
    names = {LOWER_FWD: "fwd:lower", UPPER_FWD: "fwd:upper", LOWER_REV: "rev:lower", UPPER_REV: "rev:upper"}
    return [v for k, v in names.items() if flags & k]


def pair_within_bounds(rtt_fwd: float, rtt_rev: float, claimed_distance: float, model: PropagationModel,
                       tau: float = DEFAULT_TOLERANCE) -> tuple[bool, list[str]]:
    flags = int(pair_flags(rtt_fwd, rtt_rev, claimed_distance, model, tau))
    return flags == 0, describe_flags(flags)


def decide(score: float, threshold: float = DEFAULT_THRESHOLD) -> str:
    if not 0.0 <= score <= 1.0 or not 0.0 <= threshold <= 1.0:
        raise ValueError("score and threshold must lie in [0, 1]")
    # accept on equality; the small slack absorbs k/R rounding
    return ACCEPT if score >= threshold - 1e-12 else REJECT


@dataclass(frozen=True)
class ConfidenceResult:
    node: int
    score: float
    refs: np.ndarray
    flags: np.ndarray
    decision: str

    @property
    def n_pass(self) -> int:
        return int(np.sum(self.flags == 0))

    @property
    def n_fail_lower(self) -> int:
        return int(np.sum((self.flags & (LOWER_FWD | LOWER_REV)) != 0))

    @property
    def n_fail_upper(self) -> int:
        return int(np.sum((self.flags & (UPPER_FWD | UPPER_REV)) != 0))


def all_pair_flags(ms: MeasurementSet, claimed: np.ndarray, model: PropagationModel, tau: float = DEFAULT_TOLERANCE) -> np.ndarray:
    """Violation mask for every scheduled pair, judged on claimed locations."""
    a, b = ms.pairs[:, 0], ms.pairs[:, 1]
    d = haversine(claimed[a, 0], claimed[a, 1], claimed[b, 0], claimed[b, 1])
    return pair_flags(ms.fwd, ms.rev, d, model, tau)


def scores_from_flags(ms: MeasurementSet, flags: np.ndarray) -> np.ndarray:
    ok = (flags == 0).astype(float)
    a, b = ms.pairs[:, 0], ms.pairs[:, 1]
    passed = np.bincount(a, ok, ms.n) + np.bincount(b, ok, ms.n)
    deg = np.bincount(a, minlength=ms.n) + np.bincount(b, minlength=ms.n)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(deg > 0, passed / np.maximum(deg, 1), np.nan)


def confidence_scores(ms: MeasurementSet, claimed: np.ndarray, model: PropagationModel,
                      tau: float = DEFAULT_TOLERANCE) -> np.ndarray:
    return scores_from_flags(ms, all_pair_flags(ms, claimed, model, tau))


def confidence_score(node: int, ms: MeasurementSet, claimed: np.ndarray, model: PropagationModel,
                     tau: float = DEFAULT_TOLERANCE, threshold: float = DEFAULT_THRESHOLD) -> ConfidenceResult:
    adj = ms.adjacency()
    sl = adj.of(node)
    refs = adj.ref[sl]
    if len(refs) == 0:
        raise ValueError(f"node {node} has no scheduled references")
    out_rtt, in_rtt = adj.out_rtt[sl], adj.in_rtt[sl]
    d = haversine(claimed[node, 0], claimed[node, 1], claimed[refs, 0], claimed[refs, 1])
    flags = pair_flags(out_rtt, in_rtt, d, model, tau)
    score = float(np.sum(flags == 0)) / len(refs)
    return ConfidenceResult(node, score, refs, flags, decide(score, threshold))
