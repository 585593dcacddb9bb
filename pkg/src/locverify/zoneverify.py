"""Zone verification from a scored feasible region.

Each reference bounds the node to a spherical cap of radius
``(2/3) c * rtt``.  Caps are intersected smallest-first on a lattice of
``resolution`` degrees until a new cap removes less than 1% of the
surviving points; survivors are then scored with the trilateration
objective and their mass is summed per zone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .constants import DEFAULT_GRID_DEG, MAX_SPEED, SHRINK_STOP_FRACTION
from .geo import BBox, GeoPoint, ZoneMap, cap_bbox, haversine
from .localize import objective
from .propagation import PropagationModel


def max_distance(rtt) -> float | np.ndarray:
    t = np.asarray(rtt, dtype=float)
    if np.any(t <= 0):
        raise ValueError("rtt must be positive")
    out = MAX_SPEED * t
    return float(out) if out.ndim == 0 else out


@dataclass
class TargetArea:
    used: np.ndarray  # reference positions (into the caller's list), in processing order
    bbox: BBox | None
    points: np.ndarray  # (n, 2) lat/lon members
    scores: np.ndarray | None = None
    resolution: float = DEFAULT_GRID_DEG

    @property
    def empty(self) -> bool:
        return len(self.points) == 0


@dataclass
class ZoneScoreTable:
    mass: dict[str, float] = field(default_factory=dict)
    outside: float = 0.0
    winner: str | None = None


def _snap_grid(box: BBox, res: float) -> np.ndarray:
    """Lattice points of the global ``res`` grid that fall inside ``box``."""
    i0, i1 = int(np.ceil(box.lat_min / res - 1e-9)), int(np.floor(box.lat_max / res + 1e-9))
    j0, j1 = int(np.ceil(box.lon_min / res - 1e-9)), int(np.floor(box.lon_max / res + 1e-9))
    if i1 < i0 or j1 < j0:
        return np.empty((0, 2))
    ii, jj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1), indexing="ij")
    return np.column_stack([ii.ravel() * res, jj.ravel() * res])


def _intersect(a: BBox, b: BBox) -> BBox:
    return BBox(max(a.lat_min, b.lat_min), min(a.lat_max, b.lat_max), max(a.lon_min, b.lon_min), min(a.lon_max, b.lon_max))


def target_area(ref_lat, ref_lon, rtt, resolution: float = DEFAULT_GRID_DEG,
                shrink_stop: float = SHRINK_STOP_FRACTION, clip: BBox | None = None) -> TargetArea:
    """Feasible lattice points for one node.

    ``clip`` optionally restricts the lattice (for instance to the zone map's
    bounding box) so points far outside any zone are never generated.
    """
    ref_lat = np.asarray(ref_lat, dtype=float)
    ref_lon = np.asarray(ref_lon, dtype=float)
    r = max_distance(np.asarray(rtt, dtype=float))
    r = np.atleast_1d(r)
    if len(r) == 0:
        raise ValueError("need at least one reference")
    order = np.argsort(r, kind="stable")
    first = order[0]
    box = cap_bbox(ref_lat[first], ref_lon[first], r[first])
    if clip is not None:
        box = _intersect(box, clip)
    pts = _snap_grid(box, resolution)
    used = [first]
    if len(pts):
        pts = pts[haversine(pts[:, 0], pts[:, 1], ref_lat[first], ref_lon[first]) <= r[first]]
    for k in order[1:]:
        if len(pts) == 0:
            break
        inside = haversine(pts[:, 0], pts[:, 1], ref_lat[k], ref_lon[k]) <= r[k]
        removed = len(pts) - int(inside.sum())
        if removed < shrink_stop * len(pts):
            break
        pts = pts[inside]
        used.append(k)
    if len(pts):
        box = BBox(pts[:, 0].min(), pts[:, 0].max(), pts[:, 1].min(), pts[:, 1].max())
    else:
        box = None
    return TargetArea(np.array(used, dtype=np.int64), box, pts, None, resolution)


def score_grid(area: TargetArea, ref_lat, ref_lon, rtt, model: PropagationModel, use_weights: bool = True) -> TargetArea:
    """Attach ``exp(-F)`` scores, normalized to sum to one.

    Scores are shifted by the area minimum before exponentiating; the shift
    cancels in the normalization and keeps the exponent from underflowing.
    """
    if area.empty:
        raise ValueError("cannot score an empty area")
    t = np.asarray(rtt, dtype=float)[None, :]
    meas = model.distance(t)
    w = model.omega(meas) if use_weights else np.ones_like(meas)
    pts = area.points
    ones = np.ones_like(t, dtype=bool)
    f = np.empty(len(pts))
    # chunk to bound memory on large areas
    step = max(1, 400_000 // max(t.shape[1], 1))
    rl, ro = np.asarray(ref_lat, dtype=float)[None, :], np.asarray(ref_lon, dtype=float)[None, :]
    for s in range(0, len(pts), step):
        e = slice(s, s + step)
        f[e] = objective(pts[e, 0], pts[e, 1], rl, ro, meas, w, ones)
    raw = np.exp(-(f - f.min()))
    area.scores = raw / raw.sum()
    return area


def zone_scores(area: TargetArea, zones: ZoneMap) -> ZoneScoreTable:
    if area.empty or area.scores is None:
        return ZoneScoreTable({}, 0.0, None)
    codes = zones.lattice_classify(area.points[:, 0], area.points[:, 1], area.resolution)
    masses = np.bincount(codes[codes >= 0], weights=area.scores[codes >= 0], minlength=len(zones))
    ids = zones.ids
    table = {ids[k]: float(masses[k]) for k in range(len(ids)) if masses[k] > 0}
    winner = None
    if table:
        best = max(table.values())
        winner = min(z for z, v in table.items() if v == best)
    return ZoneScoreTable(table, float(area.scores[codes < 0].sum()), winner)


def verify_zone(claimed_zone: str | None, table: ZoneScoreTable) -> bool:
    return table.winner is not None and table.winner == claimed_zone


@dataclass(frozen=True)
class ZoneVerdict:
    winner: str | None
    winner_mass: float
    verified: bool
    table: ZoneScoreTable
    area_points: int


def verify_node(ref_lat, ref_lon, rtt, claimed_zone, model: PropagationModel, zones: ZoneMap,
                resolution: float = DEFAULT_GRID_DEG, keep_area: bool = False):
    area = target_area(ref_lat, ref_lon, rtt, resolution, clip=_padded_bounds(zones, resolution))
    if area.empty:
        v = ZoneVerdict(None, 0.0, False, ZoneScoreTable(), 0)
        return (v, area) if keep_area else v
    score_grid(area, ref_lat, ref_lon, rtt, model)
    table = zone_scores(area, zones)
    v = ZoneVerdict(table.winner, table.mass.get(table.winner, 0.0), verify_zone(claimed_zone, table), table, len(area.points))
    return (v, area) if keep_area else v


def _padded_bounds(zones: ZoneMap, resolution: float) -> BBox:
    b = zones.bounds
    return BBox(b.lat_min - resolution, b.lat_max + resolution, b.lon_min - resolution, b.lon_max + resolution)


def grid_argmax(area: TargetArea) -> GeoPoint | None:
    if area.empty or area.scores is None:
        return None
    k = int(np.argmax(area.scores))
    return GeoPoint(*area.points[k])
