"""Three-view feature-voting visual localization."""

from trinoloc.descriptor import VIEWS, LocalFeatureMap, View
from trinoloc.geo import GeoTag, haversine_distance, within_threshold
from trinoloc.library import LibraryConfig, LocationLibrary, build_library, load_library, save_library
from trinoloc.retrieval import QueryFrame, RetrievalResult, localize_frame, localize_sequence
from trinoloc.voting import AdaptiveWeight, total_cost, voting_cost

__version__ = "0.1.0"

__all__ = [
    "VIEWS",
    "AdaptiveWeight",
    "GeoTag",
    "LibraryConfig",
    "LocalFeatureMap",
    "LocationLibrary",
    "QueryFrame",
    "RetrievalResult",
    "View",
    "build_library",
    "haversine_distance",
    "load_library",
    "localize_frame",
    "localize_sequence",
    "save_library",
    "total_cost",
    "voting_cost",
    "within_threshold",
]
