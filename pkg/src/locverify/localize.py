"""Weighted-RMSE trilateration by batched gradient descent.

Every candidate is scored by

    F(p) = sqrt( sum_j (w_j * (dist(p, ref_j) - m_j))^2 / R )

with ``m_j`` the model distance for reference ``j``'s RTT and ``w_j`` the
noise weight at ``m_j``.  Steps are taken in local east/north kilometres
around the current iterate and mapped back onto the sphere along the
geodesic, so there is no longitude wrap or pole singularity in the update.

All nodes of a network (times all restarts) are optimized as one padded
batch, which keeps the per-iteration cost in numpy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .constants import EARTH_RADIUS_KM
from .geo import GeoPoint
from .propagation import PropagationModel


@dataclass(frozen=True)
class SolverConfig:
    max_iter: int = 500
    step_tol_km: float = 0.1
    improve_tol_km: float = 1e-6
    restart_offsets_deg: tuple[tuple[float, float], ...] = ((2.0, 2.0), (2.0, -2.0), (-2.0, 2.0), (-2.0, -2.0))
    armijo: float = 1e-4
    max_halvings: int = 60
    max_step_km: float = 2000.0
    use_weights: bool = True


@dataclass(frozen=True)
class LocalizationEstimate:
    estimate: GeoPoint
    residual: float
    iterations: int
    converged: bool
    underdetermined: bool = False


def destination(lat, lon, east_km, north_km):
    """Point reached by walking ``(east, north)`` km along the geodesic."""
    dist = np.hypot(east_km, north_km)
    theta = np.arctan2(east_km, north_km)
    ang = dist / EARTH_RADIUS_KM
    p1 = np.radians(lat)
    l1 = np.radians(lon)
    sp = np.sin(p1) * np.cos(ang) + np.cos(p1) * np.sin(ang) * np.cos(theta)
    p2 = np.arcsin(np.clip(sp, -1.0, 1.0))
    l2 = l1 + np.arctan2(np.sin(theta) * np.sin(ang) * np.cos(p1), np.cos(ang) - np.sin(p1) * sp)
    lon2 = (np.degrees(l2) + 180.0) % 360.0 - 180.0
    return np.degrees(p2), lon2


def unit_vectors(lat, lon):
    """Cartesian unit vectors ``(x, y, z)`` for degree coordinates."""
    p = np.radians(lat)
    l = np.radians(lon)
    c = np.cos(p)
    return c * np.cos(l), c * np.sin(l), np.sin(p)


def _chord_distance(cx, cy, cz, rx, ry, rz):
    # chord from coordinate differences keeps precision at short range
    ch = np.sqrt((cx - rx) ** 2 + (cy - ry) ** 2 + (cz - rz) ** 2)
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.minimum(ch * 0.5, 1.0))


@dataclass(frozen=True)
class Refs:
    """Reference positions as unit vectors plus model distances and weights, ``(B, K)``."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    meas: np.ndarray
    weight: np.ndarray
    mask: np.ndarray

    @classmethod
    def build(cls, ref_lat, ref_lon, meas, weight, mask):
        x, y, z = unit_vectors(np.asarray(ref_lat, dtype=float), np.asarray(ref_lon, dtype=float))
        mask = np.asarray(mask, dtype=bool)
        return cls(x, y, z, np.asarray(meas, dtype=float), np.where(mask, weight, 0.0), mask)

    def take(self, idx) -> "Refs":
        return Refs(self.x[idx], self.y[idx], self.z[idx], self.meas[idx], self.weight[idx], self.mask[idx])

    def tile(self, s: int) -> "Refs":
        t = lambda a: np.tile(a, (s, 1))
        return Refs(t(self.x), t(self.y), t(self.z), t(self.meas), t(self.weight), t(self.mask))

    @property
    def count(self) -> np.ndarray:
        return np.maximum(self.mask.sum(axis=-1), 1)


def _objective(lat, lon, refs: Refs):
    cx, cy, cz = unit_vectors(np.asarray(lat)[..., None], np.asarray(lon)[..., None])
    d = _chord_distance(cx, cy, cz, refs.x, refs.y, refs.z)
    r = refs.weight * (d - refs.meas)
    return np.sqrt(np.sum(r * r, axis=-1) / refs.count)


def objective(lat, lon, ref_lat, ref_lon, meas, weight, mask):
    """Batched objective; candidate arrays are ``(B,)``, reference arrays ``(B, K)``."""
    return _objective(lat, lon, Refs.build(ref_lat, ref_lon, meas, weight, mask))


def _objective_and_gradient(lat, lon, refs: Refs):
    """Objective and its gradient in local (east, north) km coordinates.

    Moving the candidate one km along a unit tangent ``e`` changes the
    distance to a reference by ``-cos`` of the angle between ``e`` and the
    direction towards that reference, so the gradient of each distance is
    minus the unit tangent pointing at the reference.
    """
    la = np.radians(np.asarray(lat))[..., None]
    lo = np.radians(np.asarray(lon))[..., None]
    sp, cp, sl, cl = np.sin(la), np.cos(la), np.sin(lo), np.cos(lo)
    cx, cy, cz = cp * cl, cp * sl, sp
    d = _chord_distance(cx, cy, cz, refs.x, refs.y, refs.z)
    resid = refs.weight * (d - refs.meas)
    n = refs.count
    f = np.sqrt(np.sum(resid * resid, axis=-1) / n)
    # reference vector projected on the local east and north axes
    ve = -refs.x * sl + refs.y * cl
    vn = -refs.x * sp * cl - refs.y * sp * sl + refs.z * cp
    norm = np.hypot(ve, vn)
    coef = np.where(norm > 1e-15, refs.weight * resid / np.maximum(norm, 1e-300), 0.0)
    ge = -np.sum(coef * ve, axis=-1)
    gn = -np.sum(coef * vn, axis=-1)
    scale = np.where(f > 0, 1.0 / (n * np.maximum(f, 1e-300)), 0.0)
    return f, ge * scale, gn * scale


def objective_and_gradient(lat, lon, ref_lat, ref_lon, meas, weight, mask):
    return _objective_and_gradient(lat, lon, Refs.build(ref_lat, ref_lon, meas, weight, mask))


def _descend(lat, lon, refs: Refs, cfg: SolverConfig):
    """Gradient descent with backtracking from every row's start point."""
    b = len(lat)
    lat = lat.astype(float).copy()
    lon = lon.astype(float).copy()
    f, ge, gn = _objective_and_gradient(lat, lon, refs)
    gnorm2 = ge * ge + gn * gn
    alpha = np.where(gnorm2 > 0, f / np.maximum(gnorm2, 1e-300), 0.0)
    iters = np.zeros(b, dtype=np.int64)
    converged = gnorm2 == 0
    active = np.flatnonzero(~converged)
    it = 0
    while active.size and it < cfg.max_iter:
        it += 1
        a = active
        ra = refs.take(a)
        g2 = gnorm2[a]
        step = np.minimum(alpha[a], cfg.max_step_km / np.sqrt(np.maximum(g2, 1e-300)))
        fa = f[a]
        new_lat = np.empty(len(a))
        new_lon = np.empty(len(a))
        new_f = np.full(len(a), np.inf)
        pending = np.arange(len(a))
        sub = ra
        for _ in range(cfg.max_halvings):
            if not pending.size:
                break
            s = step[pending]
            tl, tn = destination(lat[a[pending]], lon[a[pending]], -s * ge[a[pending]], -s * gn[a[pending]])
            tf = _objective(tl, tn, sub)
            ok = tf <= fa[pending] - cfg.armijo * s * g2[pending]
            idx = pending[ok]
            new_lat[idx], new_lon[idx], new_f[idx] = tl[ok], tn[ok], tf[ok]
            step[pending[~ok]] *= 0.5
            pending = pending[~ok]
            if pending.size and not ok.all():
                sub = sub.take(~ok)
        moved = np.isfinite(new_f)
        iters[a] += 1
        # rows whose line search found no decrease sit at a numerical minimum
        converged[a[~moved]] = True
        m = a[moved]
        mv = np.flatnonzero(moved)
        step_len = step[mv] * np.sqrt(g2[mv])
        improve = f[m] - new_f[mv]
        lat[m], lon[m] = new_lat[mv], new_lon[mv]
        f_new, ge_new, gn_new = _objective_and_gradient(lat[m], lon[m], ra.take(mv))
        f[m], ge[m], gn[m] = f_new, ge_new, gn_new
        gnorm2[m] = ge_new * ge_new + gn_new * gn_new
        alpha[m] = step[mv] * 2.0
        done = (step_len < cfg.step_tol_km) | (improve < cfg.improve_tol_km) | (gnorm2[m] == 0)
        converged[m[done]] = True
        active = a[~converged[a]]
    return lat, lon, f, iters, converged


def pad_references(groups) -> tuple[np.ndarray, ...]:
    """Pack ragged per-node reference data into ``(B, K)`` arrays plus a mask."""
    k = max((len(g[0]) for g in groups), default=0)
    b = len(groups)
    out = [np.zeros((b, k)) for _ in range(3)]
    mask = np.zeros((b, k), dtype=bool)
    for r, (la, lo, t) in enumerate(groups):
        n = len(la)
        out[0][r, :n], out[1][r, :n], out[2][r, :n] = la, lo, t
        mask[r, :n] = True
    # padding references sit at harmless coordinates with positive rtt
    out[2][~mask] = 1.0
    return out[0], out[1], out[2], mask


def weighted_centroid(ref_lat, ref_lon, weight, mask):
    """Centroid on the unit sphere; rows are nodes."""
    p = np.radians(ref_lat)
    l = np.radians(ref_lon)
    w = np.where(mask, weight, 0.0)
    x = np.sum(w * np.cos(p) * np.cos(l), axis=-1)
    y = np.sum(w * np.cos(p) * np.sin(l), axis=-1)
    z = np.sum(w * np.sin(p), axis=-1)
    lat = np.degrees(np.arctan2(z, np.hypot(x, y)))
    lon = np.degrees(np.arctan2(y, x))
    return lat, lon


@dataclass(frozen=True)
class BatchResult:
    lat: np.ndarray
    lon: np.ndarray
    residual: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    underdetermined: np.ndarray


def localize_batch(ref_lat, ref_lon, rtt, mask, model: PropagationModel, cfg: SolverConfig = SolverConfig()) -> BatchResult:
    """Localize ``B`` nodes at once from padded ``(B, K)`` reference arrays."""
    ref_lat = np.asarray(ref_lat, dtype=float)
    ref_lon = np.asarray(ref_lon, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    rtt = np.where(mask, np.asarray(rtt, dtype=float), 1.0)
    count = mask.sum(axis=1)
    if np.any(count == 0):
        raise ValueError("every node needs at least one reference")
    meas = model.distance(rtt)
    weight = model.omega(meas) if cfg.use_weights else np.ones_like(meas)
    lat0, lon0 = weighted_centroid(ref_lat, ref_lon, 1.0 / meas, mask)

    starts = [(lat0, lon0)]
    for dlat, dlon in cfg.restart_offsets_deg:
        starts.append((np.clip(lat0 + dlat, -90.0, 90.0), lon0 + dlon))
    s = len(starts)
    b = len(lat0)
    sl = np.concatenate([p[0] for p in starts])
    so = np.concatenate([p[1] for p in starts])
    refs = Refs.build(ref_lat, ref_lon, meas, weight, mask).tile(s)
    lat, lon, f, it, conv = _descend(sl, so, refs, cfg)
    f = f.reshape(s, b)
    best = np.argmin(f, axis=0)  # first start wins ties
    pick = best * b + np.arange(b)
    under = count < 3
    return BatchResult(
        lat=lat[pick],
        lon=lon[pick],
        residual=f[best, np.arange(b)],
        iterations=it.reshape(s, b).sum(axis=0),
        converged=conv[pick] & ~under,
        underdetermined=under,
    )


def initial_guess(refs, model: PropagationModel) -> GeoPoint:
    """Weighted centroid of references, weight ``1 / model_distance(rtt)``."""
    if not refs:
        raise ValueError("need at least one reference")
    la = np.array([[p.lat for p, _ in refs]])
    lo = np.array([[p.lon for p, _ in refs]])
    t = np.array([[rtt for _, rtt in refs]], dtype=float)
    lat, lon = weighted_centroid(la, lo, 1.0 / model.distance(t), np.ones_like(t, dtype=bool))
    return GeoPoint(float(lat[0]), float(lon[0]))


def estimate_location(refs, model: PropagationModel, cfg: SolverConfig = SolverConfig()) -> LocalizationEstimate:
    """Localize one node from ``(GeoPoint, symmetric_rtt_ms)`` pairs."""
    if not refs:
        raise ValueError("need at least one reference")
    la = np.array([[p.lat for p, _ in refs]])
    lo = np.array([[p.lon for p, _ in refs]])
    t = np.array([[rtt for _, rtt in refs]], dtype=float)
    res = localize_batch(la, lo, t, np.ones_like(t, dtype=bool), model, cfg)
    return LocalizationEstimate(
        GeoPoint(float(res.lat[0]), float(res.lon[0])),
        float(res.residual[0]),
        int(res.iterations[0]),
        bool(res.converged[0]),
        bool(res.underdetermined[0]),
    )


def residual_at(p: GeoPoint, refs, model: PropagationModel, use_weights: bool = True) -> float:
    la = np.array([[q.lat for q, _ in refs]])
    lo = np.array([[q.lon for q, _ in refs]])
    t = np.array([[rtt for _, rtt in refs]], dtype=float)
    meas = model.distance(t)
    w = model.omega(meas) if use_weights else np.ones_like(meas)
    return float(objective(np.array([p.lat]), np.array([p.lon]), la, lo, meas, w, np.ones_like(t, dtype=bool))[0])
