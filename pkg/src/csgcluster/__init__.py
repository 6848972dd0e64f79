"""Streaming person-identity clustering for open checkout-free retail floors.

The package turns a time-ordered stream of camera sightings into person
records.  Each query is matched against nearby records with a pick / link /
weight pipeline: a time-space pick over an indexed record store, trajectory
link prediction with a small attention network, and cluster-feature link
weights from von Mises-Fisher divergences.  A graph convolutional network
embeds the resulting crowded sub-graph before nearest-neighbour assignment
and merging.
"""

from csgcluster.stream_core import (
    CFVector,
    PersonRecord,
    Query,
    RecordStore,
    Sighting,
    cf_from_features,
    cf_mean,
    cf_merge,
    cf_radius,
    time_space_distance,
)

__version__ = "0.1.0"

__all__ = [
    "CFVector",
    "PersonRecord",
    "Query",
    "RecordStore",
    "Sighting",
    "cf_from_features",
    "cf_mean",
    "cf_merge",
    "cf_radius",
    "time_space_distance",
    "__version__",
]
