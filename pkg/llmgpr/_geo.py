"""Great-circle distances."""

from typing import Union

import numpy

EARTH_RADIUS_KM = 6371.0

ArrayLike = Union[float, numpy.ndarray]


def haversine_km(
    lat1: ArrayLike, lon1: ArrayLike, lat2: ArrayLike, lon2: ArrayLike
) -> ArrayLike:
    """Return the haversine distance in kilometers; broadcasts over arrays."""
    lat1, lon1, lat2, lon2 = (
        numpy.radians(numpy.asarray(v, dtype=numpy.float64))
        for v in (lat1, lon1, lat2, lon2)
    )
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    a = numpy.sin(dlat / 2) ** 2 + numpy.cos(lat1) * numpy.cos(lat2) * numpy.sin(
        dlon / 2
    ) ** 2
    c = 2 * numpy.arcsin(numpy.sqrt(numpy.clip(a, 0.0, 1.0)))
    return EARTH_RADIUS_KM * c
