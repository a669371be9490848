"""Geodesy primitives on a spherical Earth.

Points are stored as latitude/longitude in degrees; all metric work goes
through 3D unit vectors so nothing breaks at the poles or the antimeridian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

# IUGG mean Earth radius. Every range threshold in the package is measured with it.
EARTH_RADIUS_KM = 6371.0088

DEGENERATE_NORM = 1e-9


class InvalidCoordinate(ValueError):
    """Latitude or longitude outside the accepted range."""


class DegenerateMean(ArithmeticError):
    """The unit vectors cancel out (e.g. exact antipodes); no mean direction exists."""


def normalize_lon(lon: float) -> float:
    if not -180.0 <= lon <= 180.0 or math.isnan(lon):
        raise InvalidCoordinate(f"longitude {lon!r} outside [-180, 180]")
    return -180.0 if lon == 180.0 else float(lon)


@dataclass(frozen=True)
class GeoPoint:
    """A location on the unit sphere. ``lon == 180`` is stored as ``-180``."""

    lat: float
    lon: float

    def __post_init__(self) -> None:
        lat = float(self.lat)
        if not -90.0 <= lat <= 90.0:
            raise InvalidCoordinate(f"latitude {self.lat!r} outside [-90, 90]")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", normalize_lon(float(self.lon)))

    @classmethod
    def from_vector(cls, v: Sequence[float]) -> "GeoPoint":
        lat, lon = latlon_from_vectors(np.asarray(v, dtype=np.float64)[None, :])
        return cls(float(lat[0]), float(lon[0]))

    def as_tuple(self) -> tuple[float, float]:
        return (self.lat, self.lon)


def unit_vector(p: GeoPoint) -> np.ndarray:
    """(cos lat cos lon, cos lat sin lon, sin lat)."""
    return unit_vectors(np.array([p.lat]), np.array([p.lon]))[0]


def unit_vectors(lat: np.ndarray, lon: np.ndarray) -> np.ndarray:
    """Vectorised :func:`unit_vector` for degree arrays; returns shape (n, 3)."""
    phi = np.radians(np.asarray(lat, dtype=np.float64))
    lam = np.radians(np.asarray(lon, dtype=np.float64))
    cphi = np.cos(phi)
    return np.stack([cphi * np.cos(lam), cphi * np.sin(lam), np.sin(phi)], axis=-1)


def latlon_from_vectors(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`unit_vectors` for non-zero vectors (need not be unit length)."""
    v = np.asarray(v, dtype=np.float64)
    lat = np.degrees(np.arctan2(v[..., 2], np.hypot(v[..., 0], v[..., 1])))
    lon = np.degrees(np.arctan2(v[..., 1], v[..., 0]))
    lon = np.where(lon >= 180.0, -180.0, lon)
    return lat, lon


def gcd_km(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in km, via atan2(|u_a x u_b|, u_a . u_b)."""
    ua, ub = unit_vector(a), unit_vector(b)
    return float(EARTH_RADIUS_KM * math.atan2(np.linalg.norm(np.cross(ua, ub)), float(ua @ ub)))


def gcd_km_vectors(ua: np.ndarray, ub: np.ndarray) -> np.ndarray:
    """Row-wise great-circle distance between unit vectors (broadcasting)."""
    cross = np.linalg.norm(np.cross(ua, ub), axis=-1)
    dot = np.sum(ua * ub, axis=-1)
    return EARTH_RADIUS_KM * np.arctan2(cross, dot)


def gcd_km_arrays(lat1, lon1, lat2, lon2) -> np.ndarray:
    return gcd_km_vectors(unit_vectors(lat1, lon1), unit_vectors(lat2, lon2))


def pairwise_gcd_km(u: np.ndarray) -> np.ndarray:
    """Full distance matrix between the rows of ``u`` (n, 3)."""
    return gcd_km_vectors(u[:, None, :], u[None, :, :])


def mean_direction(u: np.ndarray) -> np.ndarray:
    """Normalised vector sum of unit vectors; raises DegenerateMean when it cancels."""
    u = np.asarray(u, dtype=np.float64).reshape(-1, 3)
    # fixed summation order makes the result independent of input order
    s = np.sum(u[np.lexsort(u.T[::-1])], axis=0)
    norm = float(np.linalg.norm(s))
    if norm < DEGENERATE_NORM:
        raise DegenerateMean(f"resultant norm {norm:.3g} below {DEGENERATE_NORM}")
    return s / norm


def spherical_mean(points: Iterable[GeoPoint]) -> GeoPoint:
    """Mean location: sum the unit vectors in 3D, renormalise, convert back."""
    pts = list(points)
    if not pts:
        raise ValueError("spherical_mean of an empty list")
    u = unit_vectors(np.array([p.lat for p in pts]), np.array([p.lon for p in pts]))
    return GeoPoint.from_vector(mean_direction(u))
