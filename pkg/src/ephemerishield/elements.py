"""Core orbital types: epochs and Keplerian mean-element sets."""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone

from .encoding import register
from .constants import (
    ANGLE_TICKS,
    MICROS_PER_DAY,
    MICROS_PER_SECOND,
    MU_EARTH,
    R_EARTH,
    TWO_PI,
)

_UNIX = datetime(1970, 1, 1, tzinfo=timezone.utc)


class InfeasibleElementsError(ValueError):
    """Raised when an element set cannot describe a physical Earth orbit."""


# -- angle helpers ---------------------------------------------------------

def rad_to_ticks(angle: float) -> int:
    """Map an angle in radians onto the integer circle ``[0, ANGLE_TICKS)``."""
    if not math.isfinite(angle):
        raise ValueError(f"angle must be finite, got {angle!r}")
    frac = math.fmod(angle, TWO_PI) / TWO_PI
    return round(frac * ANGLE_TICKS) % ANGLE_TICKS


def ticks_to_rad(ticks: int) -> float:
    rad = (ticks / ANGLE_TICKS) * TWO_PI
    # ticks just below a full turn can round up to exactly 2*pi
    return rad if rad < TWO_PI else 0.0


def wrap_angle(angle: float) -> float:
    """Canonicalise an angle in radians to ``[0, 2*pi)``."""
    a = math.fmod(angle, TWO_PI)
    if a < 0.0:
        a += TWO_PI
    return a if a < TWO_PI else 0.0


def circular_ticks_distance(t1: int, t2: int) -> int:
    d = (t1 - t2) % ANGLE_TICKS
    return min(d, ANGLE_TICKS - d)


# -- epochs ----------------------------------------------------------------

@register("Epoch")
@dataclass(frozen=True, order=True)
class Epoch:
    """An instant in UTC, held as integer microseconds since 1970-01-01.

    Leap seconds are ignored (POSIX time scale).
    """

    micros: int

    def __post_init__(self):
        if not isinstance(self.micros, int) or isinstance(self.micros, bool):
            raise TypeError("Epoch.micros must be an int")

    @classmethod
    def from_seconds(cls, seconds: float) -> Epoch:
        return cls(round(seconds * MICROS_PER_SECOND))

    @classmethod
    def from_datetime(cls, dt: datetime) -> Epoch:
        if dt.tzinfo is None:
            dt = dt.replace(tzinfo=timezone.utc)
        delta = dt - _UNIX
        return cls((delta.days * 86_400 + delta.seconds) * MICROS_PER_SECOND + delta.microseconds)

    @classmethod
    def from_iso(cls, text: str) -> Epoch:
        return cls.from_datetime(datetime.fromisoformat(text.replace("Z", "+00:00")))

    @classmethod
    def from_year_day(cls, year: int, day: float) -> Epoch:
        """Epoch from a full year and a 1-based fractional day of year."""
        start = cls.from_datetime(datetime(year, 1, 1, tzinfo=timezone.utc))
        return cls(start.micros + round((day - 1.0) * MICROS_PER_DAY))

    @property
    def seconds(self) -> float:
        return self.micros / MICROS_PER_SECOND

    @property
    def whole_seconds(self) -> int:
        return self.micros // MICROS_PER_SECOND

    @property
    def fraction(self) -> float:
        return (self.micros % MICROS_PER_SECOND) / MICROS_PER_SECOND

    def to_datetime(self) -> datetime:
        return _UNIX + timedelta(microseconds=self.micros)

    def to_year_day(self) -> tuple[int, float]:
        year = self.to_datetime().year
        start = Epoch.from_datetime(datetime(year, 1, 1, tzinfo=timezone.utc))
        return year, 1.0 + (self.micros - start.micros) / MICROS_PER_DAY

    def plus_seconds(self, seconds: float) -> Epoch:
        return Epoch(self.micros + round(seconds * MICROS_PER_SECOND))

    def seconds_since(self, other: Epoch) -> float:
        return (self.micros - other.micros) / MICROS_PER_SECOND

    def isoformat(self) -> str:
        return self.to_datetime().isoformat().replace("+00:00", "Z")

    def __str__(self) -> str:
        return self.isoformat()


# -- element sets ----------------------------------------------------------

@register("OrbitalElements")
@dataclass(frozen=True)
class OrbitalElements:
    """Keplerian mean elements.

    RAAN, argument of perigee and mean anomaly are stored as integer ticks
    on ``[0, ANGLE_TICKS)``; use the ``*_rad`` properties for radians or
    :meth:`from_angles` to build from radians.
    """

    semi_major_axis_km: float
    eccentricity: float
    inclination_rad: float
    raan_ticks: int
    argp_ticks: int
    mean_anomaly_ticks: int
    mean_motion_dot_half: float = 0.0   # rev/day^2, TLE convention

    def __post_init__(self):
        a, e, i = self.semi_major_axis_km, self.eccentricity, self.inclination_rad
        if not (math.isfinite(a) and a > 0.0):
            raise ValueError(f"semi-major axis must be positive, got {a!r}")
        if not (math.isfinite(e) and 0.0 <= e < 1.0):
            raise ValueError(f"eccentricity must be in [0, 1), got {e!r}")
        if not (math.isfinite(i) and 0.0 <= i <= math.pi):
            raise ValueError(f"inclination must be in [0, pi], got {i!r}")
        for name in ("raan_ticks", "argp_ticks", "mean_anomaly_ticks"):
            t = getattr(self, name)
            if not isinstance(t, int) or not 0 <= t < ANGLE_TICKS:
                raise ValueError(f"{name} out of range: {t!r}")
        if not math.isfinite(self.mean_motion_dot_half):
            raise ValueError("mean_motion_dot_half must be finite")

    @classmethod
    def from_angles(
        cls,
        semi_major_axis_km: float,
        eccentricity: float,
        inclination_rad: float,
        raan_rad: float,
        argp_rad: float,
        mean_anomaly_rad: float,
        mean_motion_dot_half: float = 0.0,
    ) -> OrbitalElements:
        return cls(
            float(semi_major_axis_km),
            float(eccentricity),
            float(inclination_rad),
            rad_to_ticks(raan_rad),
            rad_to_ticks(argp_rad),
            rad_to_ticks(mean_anomaly_rad),
            float(mean_motion_dot_half),
        )

    @property
    def raan_rad(self) -> float:
        return ticks_to_rad(self.raan_ticks)

    @property
    def argp_rad(self) -> float:
        return ticks_to_rad(self.argp_ticks)

    @property
    def mean_anomaly_rad(self) -> float:
        return ticks_to_rad(self.mean_anomaly_ticks)

    @property
    def mean_motion_rad_s(self) -> float:
        return math.sqrt(MU_EARTH / self.semi_major_axis_km ** 3)

    @property
    def period_s(self) -> float:
        return TWO_PI / self.mean_motion_rad_s

    @property
    def perigee_km(self) -> float:
        return self.semi_major_axis_km * (1.0 - self.eccentricity)

    @property
    def apogee_km(self) -> float:
        return self.semi_major_axis_km * (1.0 + self.eccentricity)

    def is_feasible(self) -> bool:
        return self.perigee_km > R_EARTH

    def check_feasible(self) -> OrbitalElements:
        if not self.is_feasible():
            raise InfeasibleElementsError(
                f"perigee radius {self.perigee_km:.3f} km is below the Earth radius {R_EARTH} km"
            )
        return self

    def replace(self, **changes) -> OrbitalElements:
        """Copy with fields replaced; angle keywords ending in ``_rad`` are accepted."""
        fields = {
            "semi_major_axis_km": self.semi_major_axis_km,
            "eccentricity": self.eccentricity,
            "inclination_rad": self.inclination_rad,
            "raan_ticks": self.raan_ticks,
            "argp_ticks": self.argp_ticks,
            "mean_anomaly_ticks": self.mean_anomaly_ticks,
            "mean_motion_dot_half": self.mean_motion_dot_half,
        }
        for key, value in changes.items():
            if key in ("raan_rad", "argp_rad", "mean_anomaly_rad"):
                fields[key[:-4] + "_ticks"] = rad_to_ticks(value)
            elif key in fields:
                fields[key] = value
            else:
                raise TypeError(f"unknown element field {key!r}")
        return OrbitalElements(**fields)

    def as_dict(self) -> dict:
        return {
            "semi_major_axis_km": self.semi_major_axis_km,
            "eccentricity": self.eccentricity,
            "inclination_deg": math.degrees(self.inclination_rad),
            "raan_deg": math.degrees(self.raan_rad),
            "argp_deg": math.degrees(self.argp_rad),
            "mean_anomaly_deg": math.degrees(self.mean_anomaly_rad),
            "mean_motion_dot_half": self.mean_motion_dot_half,
        }

    @classmethod
    def from_dict(cls, d: dict) -> OrbitalElements:
        return cls.from_angles(
            d["semi_major_axis_km"],
            d["eccentricity"],
            math.radians(d["inclination_deg"]),
            math.radians(d["raan_deg"]),
            math.radians(d["argp_deg"]),
            math.radians(d["mean_anomaly_deg"]),
            d.get("mean_motion_dot_half", 0.0),
        )
