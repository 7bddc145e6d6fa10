"""Geodetic primitives: GPS tags, great-circle distance and threshold tests."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from trinoloc.errors import ValidationError

# Mean Earth radius in meters
EARTH_RADIUS_M = 6_371_000.0


@dataclass(frozen=True)
class GeoTag:
    """WGS84 position plus camera heading.

    Heading is normalized to [0, 360) on construction; it does not take part in
    distance computations.
    """

    lat: float
    lon: float
    heading: float = 0.0

    def __post_init__(self):
        lat, lon, heading = float(self.lat), float(self.lon), float(self.heading)
        if not math.isfinite(lat) or not -90.0 <= lat <= 90.0:
            raise ValidationError(f"lat {self.lat!r} outside [-90, 90]", field="lat")
        if not math.isfinite(lon) or not -180.0 <= lon < 180.0:
            raise ValidationError(f"lon {self.lon!r} outside [-180, 180)", field="lon")
        if not math.isfinite(heading):
            raise ValidationError(f"heading {self.heading!r} is not finite", field="heading")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", lon)
        object.__setattr__(self, "heading", normalize_heading(heading))


def normalize_heading(deg: float) -> float:
    h = math.fmod(deg, 360.0)
    if h < 0:
        h += 360.0
    # fmod(-1e-17, 360) + 360 rounds to 360.0
    return 0.0 if h >= 360.0 else h


def haversine_distance(a: GeoTag, b: GeoTag) -> float:
    """Great-circle distance in meters between two tags on a spherical Earth."""
    lat1 = math.radians(a.lat)
    lat2 = math.radians(b.lat)
    dlat = lat2 - lat1
    dlon = math.radians(b.lon - a.lon)
    h = math.sin(dlat / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def haversine_many(lat: float, lon: float, lats, lons) -> np.ndarray:
    """Vectorized distance from one point to arrays of points, in meters."""
    lat1 = np.radians(lat)
    lat2 = np.radians(np.asarray(lats, dtype=float))
    dlat = lat2 - lat1
    dlon = np.radians(np.asarray(lons, dtype=float) - lon)
    h = np.sin(dlat / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.minimum(1.0, np.sqrt(h)))


def within_threshold(pred: GeoTag, truth: GeoTag, threshold: float) -> bool:
    """True iff ``pred`` lies at most ``threshold`` meters from ``truth``."""
    if not threshold > 0:
        raise ValidationError(f"threshold must be positive, got {threshold!r}", field="threshold")
    return haversine_distance(pred, truth) <= threshold


def destination(origin: GeoTag, bearing: float, distance: float) -> GeoTag:
    """Point reached by travelling ``distance`` meters along ``bearing`` from ``origin``.

    The returned heading is the forward bearing at the destination.
    """
    phi1 = math.radians(origin.lat)
    lam1 = math.radians(origin.lon)
    theta = math.radians(bearing)
    delta = distance / EARTH_RADIUS_M

    sin_phi2 = math.sin(phi1) * math.cos(delta) + math.cos(phi1) * math.sin(delta) * math.cos(theta)
    phi2 = math.asin(max(-1.0, min(1.0, sin_phi2)))
    lam2 = lam1 + math.atan2(
        math.sin(theta) * math.sin(delta) * math.cos(phi1),
        math.cos(delta) - math.sin(phi1) * math.sin(phi2),
    )
    lon2 = (math.degrees(lam2) + 540.0) % 360.0 - 180.0
    # final bearing = reverse of the initial bearing from destination back to origin
    back = initial_bearing(math.degrees(phi2), lon2, origin.lat, origin.lon)
    return GeoTag(math.degrees(phi2), lon2, back + 180.0)


def initial_bearing(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Initial bearing in degrees (0 = north, clockwise) from point 1 to point 2."""
    p1 = math.radians(lat1)
    p2 = math.radians(lat2)
    dlon = math.radians(lon2 - lon1)
    x = math.sin(dlon) * math.cos(p2)
    y = math.cos(p1) * math.sin(p2) - math.sin(p1) * math.cos(p2) * math.cos(dlon)
    return normalize_heading(math.degrees(math.atan2(x, y)))
