"""Coordinates, great-circle distances and zone maps, plus sampling grids."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np
import shapely
from shapely.geometry import shape

from .constants import EARTH_RADIUS_KM


def _normalize_lon(lon: float) -> float:
    lon = float(lon)
    if -180.0 < lon <= 180.0:
        return lon
    lon = ((lon + 180.0) % 360.0) - 180.0
    return 180.0 if lon == -180.0 else lon


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        lat = float(self.lat)
        if not np.isfinite(lat) or not -90.0 <= lat <= 90.0:
            raise ValueError(f"latitude out of range: {self.lat}")
        if not np.isfinite(float(self.lon)):
            raise ValueError(f"longitude not finite: {self.lon}")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", _normalize_lon(self.lon))

    def as_tuple(self) -> tuple[float, float]:
        return (self.lat, self.lon)


def haversine(lat1, lon1, lat2, lon2):
    """Vectorized great-circle distance in km; inputs in degrees, broadcastable."""
    p1 = np.radians(lat1)
    p2 = np.radians(lat2)
    dphi = p2 - p1
    dlam = np.radians(np.subtract(lon2, lon1))
    h = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlam / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def great_circle_distance(a: GeoPoint, b: GeoPoint) -> float:
    return float(haversine(a.lat, a.lon, b.lat, b.lon))


def bearing(lat1, lon1, lat2, lon2):
    """Initial bearing (radians, clockwise from north) from point 1 towards point 2."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dlam = np.radians(np.subtract(lon2, lon1))
    y = np.sin(dlam) * np.cos(p2)
    x = np.cos(p1) * np.sin(p2) - np.sin(p1) * np.cos(p2) * np.cos(dlam)
    return np.arctan2(y, x)


@dataclass(frozen=True)
class BBox:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    @property
    def degenerate(self) -> bool:
        return not (self.lat_max > self.lat_min and self.lon_max > self.lon_min)


def make_grid(bbox: BBox, resolution: float) -> np.ndarray:
    """Row-major (lat outer, lon inner) lattice including the corners.

    Returns an ``(n, 2)`` array of ``[lat, lon]`` rows; a degenerate box yields
    an empty array.
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    if bbox.degenerate:
        return np.empty((0, 2))
    n_lat = int(np.floor((bbox.lat_max - bbox.lat_min) / resolution + 1e-9)) + 1
    n_lon = int(np.floor((bbox.lon_max - bbox.lon_min) / resolution + 1e-9)) + 1
    lats = bbox.lat_min + resolution * np.arange(n_lat)
    lons = bbox.lon_min + resolution * np.arange(n_lon)
    la, lo = np.meshgrid(lats, lons, indexing="ij")
    return np.column_stack([la.ravel(), lo.ravel()])


@dataclass(frozen=True)
class Zone:
    id: str
    name: str
    geometry: object  # shapely (Multi)Polygon in lon/lat

    def __post_init__(self):
        if not self.id:
            raise ValueError("zone id must be non-empty")
        if not self.geometry.is_valid:
            raise ValueError(f"zone {self.id}: invalid polygon")


@dataclass(frozen=True, eq=False)
class ZoneMap:
    """Non-overlapping named zones, kept sorted by id.

    Points on a shared border go to the lexicographically smallest id, which
    falls out of testing zones in sorted order with boundary-inclusive
    predicates.
    """

    zones: tuple[Zone, ...]
    _raster_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        ordered = tuple(sorted(self.zones, key=lambda z: z.id))
        ids = [z.id for z in ordered]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate zone ids")
        object.__setattr__(self, "zones", ordered)

    @property
    def ids(self) -> list[str]:
        return [z.id for z in self.zones]

    def __len__(self):
        return len(self.zones)

    def __getitem__(self, zid: str) -> Zone:
        for z in self.zones:
            if z.id == zid:
                return z
        raise KeyError(zid)

    @cached_property
    def union(self):
        return shapely.union_all([z.geometry for z in self.zones])

    @property
    def bounds(self) -> BBox:
        lon0, lat0, lon1, lat1 = self.union.bounds
        return BBox(lat0, lat1, lon0, lon1)

    def check_disjoint(self, tol: float = 1e-9) -> None:
        for a in range(len(self.zones)):
            for b in range(a + 1, len(self.zones)):
                za, zb = self.zones[a], self.zones[b]
                if za.geometry.intersection(zb.geometry).area > tol:
                    raise ValueError(f"zones {za.id} and {zb.id} overlap")

    def classify(self, lat, lon) -> np.ndarray:
        """Zone index (into ``ids``) per point, -1 outside every zone."""
        lat = np.atleast_1d(np.asarray(lat, dtype=float))
        lon = np.atleast_1d(np.asarray(lon, dtype=float))
        out = np.full(lat.shape, -1, dtype=np.int64)
        for k, z in enumerate(self.zones):
            todo = out < 0
            if not todo.any():
                break
            hit = shapely.intersects_xy(z.geometry, lon[todo], lat[todo])
            idx = np.flatnonzero(todo)[hit]
            out[idx] = k
        return out

    def zone_of(self, p: GeoPoint) -> str | None:
        k = int(self.classify(p.lat, p.lon)[0])
        return None if k < 0 else self.zones[k].id

    def lattice_classify(self, lat, lon, resolution: float) -> np.ndarray:
        """Like :meth:`classify` for points on the global ``resolution`` lattice.

        The lattice covering the map bounds is classified once and cached, so
        repeated grid lookups cost an index operation.
        """
        key = round(float(resolution), 9)
        ras = self._raster_cache.get(key)
        if ras is None:
            b = self.bounds
            i0 = int(np.floor(b.lat_min / resolution)) - 1
            i1 = int(np.ceil(b.lat_max / resolution)) + 1
            j0 = int(np.floor(b.lon_min / resolution)) - 1
            j1 = int(np.ceil(b.lon_max / resolution)) + 1
            ii, jj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1), indexing="ij")
            codes = self.classify(ii.ravel() * resolution, jj.ravel() * resolution)
            ras = (i0, j0, codes.reshape(ii.shape))
            self._raster_cache[key] = ras
        i0, j0, grid = ras
        lat = np.asarray(lat, dtype=float)
        lon = np.asarray(lon, dtype=float)
        i = np.rint(lat / resolution).astype(np.int64) - i0
        j = np.rint(lon / resolution).astype(np.int64) - j0
        inside = (i >= 0) & (i < grid.shape[0]) & (j >= 0) & (j < grid.shape[1])
        out = np.full(lat.shape, -1, dtype=np.int64)
        out[inside] = grid[i[inside], j[inside]]
        return out

    def sample_uniform(self, n: int, rng: np.random.Generator, exclude: str | None = None) -> np.ndarray:
        """``n`` points uniform on the sphere restricted to the zone union.

        Rejection sampling over the bounding box with longitude uniform and
        sin(latitude) uniform, which is the equal-area measure.  Returns an
        ``(n, 2)`` array of ``[lat, lon]``.
        """
        if n <= 0:
            return np.empty((0, 2))
        b = self.bounds
        s0, s1 = np.sin(np.radians(b.lat_min)), np.sin(np.radians(b.lat_max))
        ex = -2 if exclude is None else self.ids.index(exclude)
        got: list[np.ndarray] = []
        have = 0
        while have < n:
            m = max(64, 4 * (n - have))
            lon = rng.uniform(b.lon_min, b.lon_max, m)
            lat = np.degrees(np.arcsin(rng.uniform(s0, s1, m)))
            k = self.classify(lat, lon)
            keep = (k >= 0) & (k != ex)
            pts = np.column_stack([lat[keep], lon[keep]])
            got.append(pts)
            have += len(pts)
        return np.concatenate(got)[:n]

    @classmethod
    def from_geojson(cls, source) -> "ZoneMap":
        if isinstance(source, (str, Path)):
            doc = json.loads(Path(source).read_text())
        else:
            doc = source
        zones = []
        for feat in doc["features"]:
            props = feat.get("properties", {})
            zid = props.get("id")
            zones.append(Zone(zid, props.get("name", zid), shape(feat["geometry"])))
        return cls(tuple(zones))


_DEFAULT_ZONES: ZoneMap | None = None


def load_default_zones() -> ZoneMap:
    """The packaged fifteen-country European map."""
    global _DEFAULT_ZONES
    if _DEFAULT_ZONES is None:
        text = resources.files("locverify.data").joinpath("europe15.geojson").read_text()
        _DEFAULT_ZONES = ZoneMap.from_geojson(json.loads(text))
    return _DEFAULT_ZONES


def zone_of(p: GeoPoint, zones: ZoneMap) -> str | None:
    return zones.zone_of(p)


def cap_bbox(lat: float, lon: float, radius_km: float) -> BBox:
    """Bounding box of a spherical cap, widened to the full sphere near poles."""
    ang = radius_km / EARTH_RADIUS_KM
    if ang >= np.pi:
        return BBox(-90.0, 90.0, -180.0, 180.0)
    dlat = np.degrees(ang)
    lat0, lat1 = lat - dlat, lat + dlat
    if lat0 <= -90.0 or lat1 >= 90.0:
        return BBox(max(lat0, -90.0), min(lat1, 90.0), -180.0, 180.0)
    s = np.sin(ang) / np.cos(np.radians(lat))
    if s >= 1.0:
        return BBox(lat0, lat1, -180.0, 180.0)
    dlon = np.degrees(np.arcsin(s))
    return BBox(lat0, lat1, lon - dlon, lon + dlon)
