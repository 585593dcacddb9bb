import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from shapely.geometry import box

from locverify.constants import EARTH_RADIUS_KM
from locverify.geo import (
    BBox,
    GeoPoint,
    Zone,
    ZoneMap,
    bearing,
    cap_bbox,
    great_circle_distance,
    haversine,
    make_grid,
    zone_of,
)

lats = st.floats(-90, 90, allow_nan=False)
lons = st.floats(-180, 180, allow_nan=False)


def test_identity_distance_is_zero():
    p = GeoPoint(45.0, 7.0)
    assert great_circle_distance(p, p) == 0.0


def _reference_haversine(lat1, lon1, lat2, lon2):
    # written out with the math module only
    p1, p2 = math.radians(lat1), math.radians(lat2)
    a = math.sin((p2 - p1) / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(math.radians(lon2 - lon1) / 2) ** 2
    return 2 * 6371.0 * math.asin(math.sqrt(a))


def test_paris_berlin():
    d = great_circle_distance(GeoPoint(48.8566, 2.3522), GeoPoint(52.5200, 13.4050))
    assert d == pytest.approx(_reference_haversine(48.8566, 2.3522, 52.52, 13.405), abs=1e-9)
    assert d == pytest.approx(878, abs=1.0)


def test_antipodal():
    assert great_circle_distance(GeoPoint(0, 0), GeoPoint(0, 180)) == pytest.approx(math.pi * EARTH_RADIUS_KM, abs=1e-6)
    assert math.pi * EARTH_RADIUS_KM == pytest.approx(20015.1, abs=0.1)


@pytest.mark.parametrize("lat", [-91, 90.5, float("nan")])
def test_geopoint_rejects_bad_latitude(lat):
    with pytest.raises(ValueError):
        GeoPoint(lat, 0)


@pytest.mark.parametrize("lon,expected", [(180, 180), (-180, 180), (190, -170), (540, 180), (-181, 179)])
def test_longitude_normalization(lon, expected):
    assert GeoPoint(0, lon).lon == pytest.approx(expected)


@given(lats, lons, lats, lons)
def test_distance_symmetric_nonnegative(a, b, c, d):
    x, y = haversine(a, b, c, d), haversine(c, d, a, b)
    assert x >= 0
    assert x == pytest.approx(y, abs=1e-9)


@given(lats, lons, lats, lons, lats, lons)
def test_triangle_inequality(a, b, c, d, e, f):
    ab, bc, ac = haversine(a, b, c, d), haversine(c, d, e, f), haversine(a, b, e, f)
    assert ac <= ab + bc + 1e-6


def test_bearing_east_along_equator():
    assert bearing(0, 0, 0, 10) == pytest.approx(math.pi / 2)


def test_rome_is_italy(zones):
    assert zone_of(GeoPoint(41.9028, 12.4964), zones) == "IT"


def test_rome_against_polygon_oracle(zones):
    from shapely.geometry import Point

    it = zones["IT"].geometry
    assert it.contains(Point(12.4964, 41.9028))


def test_mid_atlantic_is_nowhere(zones):
    assert zone_of(GeoPoint(40.0, -35.0), zones) is None


def test_shipped_map_has_fifteen_disjoint_zones(zones):
    assert len(zones) == 15
    zones.check_disjoint()


def test_border_tie_break_picks_smallest_id():
    zm = ZoneMap((Zone("ZB", "b", box(1, 0, 2, 1)), Zone("ZA", "a", box(0, 0, 1, 1))))
    # x = 1 is the shared edge
    assert zm.zone_of(GeoPoint(0.5, 1.0)) == "ZA"
    assert zm.zone_of(GeoPoint(0.0, 1.0)) == "ZA"  # shared vertex
    assert zm.zone_of(GeoPoint(0.5, 1.5)) == "ZB"


def test_duplicate_zone_ids_rejected():
    with pytest.raises(ValueError):
        ZoneMap((Zone("A", "a", box(0, 0, 1, 1)), Zone("A", "b", box(2, 2, 3, 3))))


def test_every_grid_point_gets_at_most_one_zone(zones):
    pts = make_grid(BBox(35, 59, -10, 41), 0.5)
    a = zones.classify(pts[:, 0], pts[:, 1])
    b = zones.classify(pts[:, 0], pts[:, 1])
    assert np.array_equal(a, b)
    assert a.min() >= -1 and a.max() < len(zones)
    # the brute-force count per point never exceeds one
    from shapely import intersects_xy

    hits = sum(intersects_xy(z.geometry, pts[:, 1], pts[:, 0]).astype(int) for z in zones.zones)
    on_border = hits > 1
    assert np.all(hits[~on_border] == (a[~on_border] >= 0))


def test_lattice_classify_matches_classify(zones):
    res = 0.2
    pts = make_grid(BBox(40.0, 50.0, 0.0, 10.0), res)
    assert np.array_equal(zones.lattice_classify(pts[:, 0], pts[:, 1], res), zones.classify(pts[:, 0], pts[:, 1]))


def test_grid_counts():
    assert len(make_grid(BBox(0, 1, 0, 1), 0.5)) == 9
    assert len(make_grid(BBox(0, 2, 0, 1), 0.25)) == 45


def test_grid_is_row_major_with_corners():
    g = make_grid(BBox(10, 11, 20, 21), 0.5)
    assert tuple(g[0]) == (10, 20)
    assert tuple(g[1]) == (10, 20.5)
    assert tuple(g[-1]) == (11, 21)


def test_degenerate_grid_is_empty():
    assert make_grid(BBox(1, 1, 0, 5), 0.1).shape == (0, 2)


def test_grid_rejects_bad_resolution():
    with pytest.raises(ValueError):
        make_grid(BBox(0, 1, 0, 1), 0)


def test_uniform_sampling_stays_in_zones(zones, rng):
    pts = zones.sample_uniform(500, rng)
    assert np.all(zones.classify(pts[:, 0], pts[:, 1]) >= 0)


def test_sampling_exclusion(zones, rng):
    pts = zones.sample_uniform(200, rng, exclude="DE")
    ids = np.array(zones.ids)[zones.classify(pts[:, 0], pts[:, 1])]
    assert "DE" not in set(ids)


def test_cap_bbox_contains_cap(rng):
    lat, lon, r = 50.0, 10.0, 800.0
    b = cap_bbox(lat, lon, r)
    brg = rng.uniform(0, 2 * np.pi, 2000)
    ang = r / EARTH_RADIUS_KM
    p1, l1 = np.radians(lat), np.radians(lon)
    p2 = np.arcsin(np.sin(p1) * np.cos(ang) + np.cos(p1) * np.sin(ang) * np.cos(brg))
    l2 = l1 + np.arctan2(np.sin(brg) * np.sin(ang) * np.cos(p1), np.cos(ang) - np.sin(p1) * np.sin(p2))
    la, lo = np.degrees(p2), np.degrees(l2)
    assert np.all((la >= b.lat_min - 1e-9) & (la <= b.lat_max + 1e-9))
    assert np.all((lo >= b.lon_min - 1e-9) & (lo <= b.lon_max + 1e-9))
