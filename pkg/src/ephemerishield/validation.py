"""Entry check for submitted ephemerides.

An entry is compared against the most recent accepted entry for the same
object, propagated to the new epoch. It is accepted only if every element
residual is strictly below its tolerance; otherwise a warning is raised and
the element history is left alone.

The catalog argument of the functions here only needs a
``history(object_id)`` method returning accepted :class:`HistoryEntry`
records in epoch order, which keeps this module independent of the ledger.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Protocol, Sequence

from . import crypto
from .constants import ANGLE_TICKS, RETENTION_SECONDS, SECONDS_PER_DAY, TWO_PI
from .elements import Epoch, OrbitalElements, circular_ticks_distance
from .encoding import encode, register
from .propagation import DEFAULT_CONFIG, PropagatorConfig, propagate

ELEMENT_NAMES = ("a", "e", "i", "raan", "argp", "M")


@register("EphemerisEntry")
@dataclass(frozen=True)
class EphemerisEntry:
    object_id: int
    epoch: Epoch
    elements: OrbitalElements
    provider: str
    submitted_at: Epoch
    signature: bytes = b""

    def payload(self) -> bytes:
        """Canonical bytes covered by the provider signature."""
        return encode(("EphemerisEntry", self.object_id, self.epoch, self.elements,
                       self.provider, self.submitted_at))

    def signed(self, keys: crypto.KeyPair) -> EphemerisEntry:
        return replace(self, signature=keys.sign(self.payload()))

    def verify(self, public_key: bytes) -> bool:
        return crypto.verify(public_key, self.payload(), self.signature)


@register("HistoryEntry")
@dataclass(frozen=True)
class HistoryEntry:
    """An accepted element set as stored in the catalog."""

    epoch: Epoch
    elements: OrbitalElements
    provider: str


class CatalogView(Protocol):
    def history(self, object_id: int) -> Sequence[HistoryEntry]: ...


@register("ElementTolerance")
@dataclass(frozen=True)
class ElementTolerance:
    semi_major_axis_km: float = 5.0
    eccentricity: float = 5e-4
    inclination_rad: float = math.radians(0.05)
    raan_rad: float = math.radians(0.05)
    argp_rad: float = math.radians(0.05)
    mean_anomaly_rad_per_day: float = math.radians(0.3)

    def __post_init__(self):
        for v in self._raw():
            if not (math.isfinite(v) and v > 0.0):
                raise ValueError("every tolerance component must be positive")

    def _raw(self) -> tuple[float, ...]:
        return (self.semi_major_axis_km, self.eccentricity, self.inclination_rad,
                self.raan_rad, self.argp_rad, self.mean_anomaly_rad_per_day)

    def vector(self, gap_seconds: float) -> tuple[float, ...]:
        """Tolerances for a given epoch gap; the mean-anomaly bound grows
        linearly with the gap in days, never below one day's worth."""
        days = max(1.0, abs(gap_seconds) / SECONDS_PER_DAY)
        raw = self._raw()
        return raw[:5] + (raw[5] * days,)


@register("ValidationConfig")
@dataclass(frozen=True)
class ValidationConfig:
    epsilon: ElementTolerance = field(default_factory=ElementTolerance)
    weights: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    max_staleness: float = float(RETENTION_SECONDS)
    cross_source_min_agreement: int = 0
    propagator: PropagatorConfig = DEFAULT_CONFIG

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        if len(w) != 6 or any(not math.isfinite(x) or x < 0.0 for x in w) or not any(w):
            raise ValueError("weights must be six non-negative reals, not all zero")
        object.__setattr__(self, "weights", w)
        if not self.max_staleness > 0:
            raise ValueError("max_staleness must be positive")
        if self.cross_source_min_agreement < 0:
            raise ValueError("cross_source_min_agreement must be >= 0")


DEFAULT_VALIDATION = ValidationConfig()


@register("Verdict")
class Verdict(enum.Enum):
    ACCEPTED = "Accepted"
    WARNING = "Warning"


@register("Reason")
class Reason(enum.Enum):
    FIRST_ENTRY = "FirstEntry"
    WITHIN_ENVELOPE = "WithinEnvelope"
    STALE_PRIOR = "StalePrior"
    ENVELOPE_EXCEEDED = "EnvelopeExceeded"
    NON_MONOTONIC_EPOCH = "NonMonotonicEpoch"
    CROSS_SOURCE_DISAGREEMENT = "CrossSourceDisagreement"
    INFEASIBLE_ELEMENTS = "InfeasibleElements"


ACCEPTING_REASONS = frozenset({Reason.FIRST_ENTRY, Reason.WITHIN_ENVELOPE, Reason.STALE_PRIOR})


@register("ValidationOutcome")
@dataclass(frozen=True)
class ValidationOutcome:
    verdict: Verdict
    reason: Reason
    residual: Optional[tuple[float, ...]] = None
    tolerance: Optional[tuple[float, ...]] = None
    exceeded: tuple[str, ...] = ()
    review: bool = False           # accepted without an envelope check

    def __post_init__(self):
        if (self.verdict is Verdict.ACCEPTED) != (self.reason in ACCEPTING_REASONS):
            raise ValueError(f"inconsistent outcome {self.verdict.value}/{self.reason.value}")

    @property
    def accepted(self) -> bool:
        return self.verdict is Verdict.ACCEPTED

    def as_dict(self) -> dict:
        d = {"verdict": self.verdict.value, "reason": self.reason.value}
        if self.residual is not None:
            d["residual"] = dict(zip(ELEMENT_NAMES, self.residual))
        if self.exceeded:
            d["exceeded"] = list(self.exceeded)
        if self.review:
            d["review"] = True
        return d


def _ticks_angle(t1: int, t2: int) -> float:
    return circular_ticks_distance(t1, t2) / ANGLE_TICKS * TWO_PI


def element_residual(a: OrbitalElements, b: OrbitalElements) -> tuple[float, ...]:
    return (
        abs(a.semi_major_axis_km - b.semi_major_axis_km),
        abs(a.eccentricity - b.eccentricity),
        abs(a.inclination_rad - b.inclination_rad),
        _ticks_angle(a.raan_ticks, b.raan_ticks),
        _ticks_angle(a.argp_ticks, b.argp_ticks),
        _ticks_angle(a.mean_anomaly_ticks, b.mean_anomaly_ticks),
    )


def element_distance(a: OrbitalElements, b: OrbitalElements,
                     epsilon: Sequence[float] | None = None,
                     weights: Sequence[float] | None = None) -> tuple[tuple[float, ...], float]:
    """Per-element residual vector and the weighted, tolerance-normalised sum.

    Angles are compared on the circle. ``epsilon`` defaults to the one-day
    default tolerance vector and ``weights`` to all ones.
    """
    residual = element_residual(a, b)
    eps = tuple(epsilon) if epsilon is not None else ElementTolerance().vector(0.0)
    w = tuple(weights) if weights is not None else (1.0,) * 6
    scalar = math.fsum(wi * (r / e) for wi, r, e in zip(w, residual, eps))
    return residual, scalar


def retrieve_last_ephemeris(catalog: CatalogView, object_id: int) -> Optional[tuple[OrbitalElements, Epoch]]:
    history = catalog.history(object_id)
    if not history:
        return None
    last = history[-1]
    return last.elements, last.epoch


def _exceeded(residual: Sequence[float], eps: Sequence[float]) -> tuple[str, ...]:
    """Names of components that are NOT strictly below tolerance."""
    return tuple(n for n, r, e in zip(ELEMENT_NAMES, residual, eps) if not r < e)


def _cross_source_ok(history: Sequence[HistoryEntry], entry: EphemerisEntry,
                     config: ValidationConfig) -> bool:
    latest: dict[str, HistoryEntry] = {}
    for h in history:
        if h.provider == entry.provider or h.epoch >= entry.epoch:
            continue
        if entry.epoch.seconds_since(h.epoch) > config.max_staleness:
            continue
        latest[h.provider] = h      # history is epoch ordered
    if not latest:
        return True
    needed = min(config.cross_source_min_agreement, len(latest))
    agree = 0
    for provider in sorted(latest):
        h = latest[provider]
        prop = propagate(h.elements, h.epoch, entry.epoch, config.propagator)
        eps = config.epsilon.vector(entry.epoch.seconds_since(h.epoch))
        if not _exceeded(element_residual(entry.elements, prop), eps):
            agree += 1
    return agree >= needed


def check_entry(catalog: CatalogView, entry: EphemerisEntry,
                config: ValidationConfig = DEFAULT_VALIDATION) -> ValidationOutcome:
    """Decide whether ``entry`` is consistent with the catalog history.

    The signature is assumed to have been checked by the caller.
    """
    if not entry.elements.is_feasible():
        return ValidationOutcome(Verdict.WARNING, Reason.INFEASIBLE_ELEMENTS)

    history = catalog.history(entry.object_id)
    if not history:
        return ValidationOutcome(Verdict.ACCEPTED, Reason.FIRST_ENTRY)
    prior = history[-1]
    if entry.epoch <= prior.epoch:
        return ValidationOutcome(Verdict.WARNING, Reason.NON_MONOTONIC_EPOCH)

    gap = entry.epoch.seconds_since(prior.epoch)
    if gap > config.max_staleness:
        return ValidationOutcome(Verdict.ACCEPTED, Reason.STALE_PRIOR, review=True)

    propagated = propagate(prior.elements, prior.epoch, entry.epoch, config.propagator)
    residual = element_residual(entry.elements, propagated)
    eps = config.epsilon.vector(gap)
    exceeded = _exceeded(residual, eps)
    if exceeded:
        return ValidationOutcome(Verdict.WARNING, Reason.ENVELOPE_EXCEEDED,
                                 residual, eps, exceeded)
    if config.cross_source_min_agreement > 0 and not _cross_source_ok(history, entry, config):
        return ValidationOutcome(Verdict.WARNING, Reason.CROSS_SOURCE_DISAGREEMENT, residual, eps)
    return ValidationOutcome(Verdict.ACCEPTED, Reason.WITHIN_ENVELOPE, residual, eps)
