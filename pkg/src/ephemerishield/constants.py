"""Physical and format constants shared by every module.

Values are WGS-84 class; all modules import from here so that validation,
propagation and conjunction screening agree bit-for-bit.
"""

import math

MU_EARTH = 398600.4418          # km^3 / s^2
R_EARTH = 6378.137              # km, equatorial radius
J2 = 1.08262668e-3

TWO_PI = 2.0 * math.pi
SECONDS_PER_DAY = 86400.0
MICROS_PER_SECOND = 1_000_000
MICROS_PER_DAY = 86_400 * MICROS_PER_SECOND

# Angles that evolve under propagation are held as integer fractions of a
# revolution, so the secular drift is exact integer arithmetic.
ANGLE_TICKS = 1 << 96

# Default data retention / prediction horizon (3 days).
RETENTION_SECONDS = 259_200
