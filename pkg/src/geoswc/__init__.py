"""Image geolocation by classification, contrastive retrieval and search within cell.

Operates on precomputed feature vectors: adaptive sphere partitioning, flat /
hierarchical / vMF-mixture classification heads, a residual retrieval module
trained with infoNCE, and DBSCAN-aggregated search within the predicted cell.
"""

from geoswc.geo import EARTH_RADIUS_KM, GeoPoint, gcd_km, spherical_mean, unit_vector

__version__ = "0.1.0"

__all__ = ["EARTH_RADIUS_KM", "GeoPoint", "gcd_km", "spherical_mean", "unit_vector"]
