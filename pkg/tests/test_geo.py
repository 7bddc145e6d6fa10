import math

import numpy as np
import pytest
from geographiclib.geodesic import Geodesic
from hypothesis import given
from hypothesis import strategies as st

from trinoloc.errors import ValidationError
from trinoloc.geo import (
    GeoTag,
    destination,
    haversine_distance,
    haversine_many,
    initial_bearing,
    normalize_heading,
    within_threshold,
)

A = GeoTag(41.8781, -87.6298)
B = GeoTag(41.8781, -87.6288)

# Independent references for the A-B pair, computed once and frozen:
#   WGS84 ellipsoidal geodesic (geographiclib): 83.00869834655056 m
#   spherical law of cosines, R = 6371 km:       82.79207131028753 m
GEODESIC_AB = 83.00869834655056
COSINE_LAW_AB = 82.79207131028753

lats = st.floats(-89.9, 89.9)
lons = st.floats(-180.0, 179.999)


def test_identical_points_are_zero_apart():
    assert haversine_distance(A, A) == 0.0


def test_heading_does_not_change_distance():
    assert haversine_distance(GeoTag(A.lat, A.lon, 10.0), GeoTag(A.lat, A.lon, 250.0)) == 0.0


def test_reference_pair_about_83_m():
    d = haversine_distance(A, B)
    assert d == pytest.approx(82.9, abs=0.5)
    assert d == pytest.approx(COSINE_LAW_AB, abs=1e-3)
    # sphere vs ellipsoid differ by well under a percent at this scale
    assert d == pytest.approx(GEODESIC_AB, rel=5e-3)


def test_frozen_geodesic_value_matches_library():
    g = Geodesic.WGS84.Inverse(A.lat, A.lon, B.lat, B.lon)["s12"]
    assert g == pytest.approx(GEODESIC_AB, abs=1e-9)


@pytest.mark.parametrize(
    "threshold, expected",
    [(10.0, False), (100.0, True)],
)
def test_within_threshold_reference_pair(threshold, expected):
    assert within_threshold(A, B, threshold) is expected


def test_within_threshold_identical():
    assert within_threshold(A, A, 10.0)


@pytest.mark.parametrize("bad", [0.0, -1.0, float("nan")])
def test_within_threshold_rejects_nonpositive(bad):
    with pytest.raises(ValidationError) as exc:
        within_threshold(A, B, bad)
    assert exc.value.field == "threshold"


@pytest.mark.parametrize(
    "kwargs, field",
    [
        (dict(lat=90.5, lon=0.0), "lat"),
        (dict(lat=-91.0, lon=0.0), "lat"),
        (dict(lat=0.0, lon=180.0), "lon"),
        (dict(lat=0.0, lon=-180.1), "lon"),
        (dict(lat=float("nan"), lon=0.0), "lat"),
        (dict(lat=0.0, lon=0.0, heading=float("inf")), "heading"),
    ],
)
def test_geotag_validation_names_field(kwargs, field):
    with pytest.raises(ValidationError) as exc:
        GeoTag(**kwargs)
    assert exc.value.field == field


@pytest.mark.parametrize("raw, norm", [(0.0, 0.0), (360.0, 0.0), (-90.0, 270.0), (725.0, 5.0), (-1e-17, 0.0)])
def test_heading_normalization(raw, norm):
    assert normalize_heading(raw) == pytest.approx(norm)
    assert 0.0 <= normalize_heading(raw) < 360.0


@given(lats, lons, lats, lons)
def test_distance_symmetric_and_nonnegative(la1, lo1, la2, lo2):
    a, b = GeoTag(la1, lo1), GeoTag(la2, lo2)
    d = haversine_distance(a, b)
    assert d >= 0.0
    assert d == pytest.approx(haversine_distance(b, a), abs=1e-6)
    assert d <= math.pi * 6_371_000.0 + 1e-6


@given(lats, lons, lats, lons, lats, lons)
def test_triangle_inequality(la1, lo1, la2, lo2, la3, lo3):
    a, b, c = GeoTag(la1, lo1), GeoTag(la2, lo2), GeoTag(la3, lo3)
    assert haversine_distance(a, c) <= haversine_distance(a, b) + haversine_distance(b, c) + 1e-6


@given(lats, lons, st.floats(0.0, 359.9), st.floats(0.0, 5000.0))
def test_destination_travels_requested_distance(la, lo, bearing, dist):
    a = GeoTag(la, lo)
    b = destination(a, bearing, dist)
    assert haversine_distance(a, b) == pytest.approx(dist, abs=1e-6)


def test_destination_heading_is_forward_bearing():
    b = destination(A, 90.0, 1000.0)
    # moving east at mid latitudes the forward bearing drifts slightly past 90
    assert b.heading == pytest.approx(90.0, abs=0.01)
    assert initial_bearing(A.lat, A.lon, B.lat, B.lon) == pytest.approx(90.0, abs=1e-3)


def test_vectorized_matches_scalar(rng):
    la = rng.uniform(-60, 60, 50)
    lo = rng.uniform(-179, 179, 50)
    many = haversine_many(A.lat, A.lon, la, lo)
    single = [haversine_distance(A, GeoTag(x, y)) for x, y in zip(la, lo)]
    np.testing.assert_allclose(many, single, rtol=1e-12)
