"""Protocol and physical constants shared across modules."""

import hashlib

EARTH_RADIUS_KM = 6371.0

# Speed of light in km/ms; speeds throughout are great-circle km per ms of full RTT.
C_KM_PER_MS = 299792.458 / 1000.0
FIBER_FRACTION = 2.0 / 3.0
MAX_SPEED = FIBER_FRACTION * C_KM_PER_MS

# Reference-selection hash.  Changing it breaks every published schedule vector.
HASH_NAME = "sha3_256"
DIGEST_BYTES = 32


def protocol_hash(data: bytes) -> bytes:
    return hashlib.new(HASH_NAME, data).digest()


DEFAULT_PROBES = 200
DEFAULT_TOLERANCE = 0.01
WILD_TOLERANCE = 0.2
DEFAULT_THRESHOLD = 0.2
DEFAULT_INITIAL_REFS = 50
DEFAULT_GRID_DEG = 0.2
SHRINK_STOP_FRACTION = 0.01

# 5-byte record layout
RECORD_BYTES = 5
RECORD_ID_BITS = 20
RECORD_RTT_BITS = 20
RECORD_RTT_UNIT_MS = 0.001
