import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from ephemerishield.crypto import KeyPair
from ephemerishield.elements import OrbitalElements
from ephemerishield.propagation import propagate
from ephemerishield.validation import (
    ElementTolerance,
    EphemerisEntry,
    Reason,
    ValidationConfig,
    ValidationOutcome,
    Verdict,
    check_entry,
    element_distance,
    element_residual,
    retrieve_last_ephemeris,
)

import entry_oracle
from valkit import T0, Catalog, boundary_probe, entry, leo, run_case, to_impl, with_prior
DAY = 86400.0


# -- configuration ---------------------------------------------------------------------

def test_tolerance_must_be_positive():
    with pytest.raises(ValueError):
        ElementTolerance(semi_major_axis_km=0.0)
    with pytest.raises(ValueError):
        ElementTolerance(eccentricity=float("nan"))


def test_weights_validation():
    with pytest.raises(ValueError):
        ValidationConfig(weights=(0,) * 6)
    with pytest.raises(ValueError):
        ValidationConfig(weights=(1, 1, 1, 1, 1, -1))
    with pytest.raises(ValueError):
        ValidationConfig(weights=(1, 1))


def test_mean_anomaly_tolerance_scales_with_gap():
    tol = ElementTolerance()
    assert tol.vector(3600)[5] == tol.mean_anomaly_rad_per_day
    assert tol.vector(2.5 * DAY)[5] == pytest.approx(2.5 * tol.mean_anomaly_rad_per_day)
    assert tol.vector(DAY)[:5] == tol.vector(3 * DAY)[:5]


def test_outcome_invariant_enforced():
    with pytest.raises(ValueError):
        ValidationOutcome(Verdict.ACCEPTED, Reason.ENVELOPE_EXCEEDED)
    with pytest.raises(ValueError):
        ValidationOutcome(Verdict.WARNING, Reason.WITHIN_ENVELOPE)


# -- retrieve_last_ephemeris --------------------------------------------------------------

def test_retrieve_empty():
    assert retrieve_last_ephemeris(Catalog(), 5) is None


def test_retrieve_single_and_latest():
    cat = Catalog()
    a, b = leo(1), leo(2)
    cat.add(5, T0, a)
    assert retrieve_last_ephemeris(cat, 5) == (a, T0)
    cat.add(5, T0.plus_seconds(60), b)
    assert retrieve_last_ephemeris(cat, 5) == (b, T0.plus_seconds(60))


# -- element_distance -------------------------------------------------------------------------

def test_distance_of_identical_elements():
    oe = leo(3)
    residual, scalar = element_distance(oe, oe)
    assert residual == (0.0,) * 6 and scalar == 0.0


def test_distance_wraps_angles():
    a = OrbitalElements.from_angles(7000, 0.001, 0.5, math.radians(359.9), 0, 0)
    b = a.replace(raan_ticks=OrbitalElements.from_angles(7000, 0.001, 0.5, math.radians(0.1), 0, 0).raan_ticks)
    residual, _ = element_distance(a, b)
    assert residual[3] == pytest.approx(math.radians(0.2), abs=1e-12)


def test_distance_normalisation():
    eps = ElementTolerance().vector(0)
    a = leo(4)
    b = a.replace(semi_major_axis_km=a.semi_major_axis_km + eps[0])
    _, scalar = element_distance(a, b, eps, (1,) * 6)
    assert scalar == pytest.approx(1.0, rel=1e-12)
    _, weighted = element_distance(a, b, eps, (3, 0, 0, 0, 0, 0))
    assert weighted == pytest.approx(3.0, rel=1e-12)


# -- check_entry examples ------------------------------------------------------------------------

def test_first_entry_accepted():
    out = check_entry(Catalog(), entry(leo(5), T0))
    assert out.verdict is Verdict.ACCEPTED and out.reason is Reason.FIRST_ENTRY


def test_exact_propagation_within_envelope():
    cat, prior, t1, prop = with_prior()
    out = check_entry(cat, entry(prop, t1))
    assert out.reason is Reason.WITHIN_ENVELOPE and out.accepted
    assert out.residual == (0.0,) * 6


def test_semi_major_axis_offset_exceeds():
    cat, prior, t1, prop = with_prior()
    eps_a = ElementTolerance().semi_major_axis_km
    bad = prop.replace(semi_major_axis_km=prop.semi_major_axis_km + 10 * eps_a)
    out = check_entry(cat, entry(bad, t1))
    assert out.verdict is Verdict.WARNING and out.reason is Reason.ENVELOPE_EXCEEDED
    assert out.residual[0] == pytest.approx(10 * eps_a, rel=1e-12)
    assert out.exceeded == ("a",)


def test_non_monotonic_and_replay():
    cat, prior, t1, prop = with_prior()
    assert check_entry(cat, entry(prior, T0)).reason is Reason.NON_MONOTONIC_EPOCH
    assert check_entry(cat, entry(prop, T0.plus_seconds(-1))).reason is Reason.NON_MONOTONIC_EPOCH
    # accepted once, then replayed verbatim
    first = entry(prop, t1)
    assert check_entry(cat, first).accepted
    cat.add(1, t1, prop)
    replay = check_entry(cat, first)
    assert replay.verdict is Verdict.WARNING and replay.reason is Reason.NON_MONOTONIC_EPOCH


def test_stale_prior_accepted_for_review():
    cat, prior, _, _ = with_prior()
    far = T0.plus_seconds(3 * DAY + 1)
    out = check_entry(cat, entry(leo(99), far))
    assert out.verdict is Verdict.ACCEPTED and out.reason is Reason.STALE_PRIOR and out.review
    # exactly at the staleness limit the envelope still applies
    at = T0.plus_seconds(3 * DAY)
    assert check_entry(cat, entry(leo(99), at)).reason is Reason.ENVELOPE_EXCEEDED


def test_infeasible_elements_warned():
    cat, *_ = with_prior()
    low = OrbitalElements.from_angles(6500, 0.1, 0.5, 0, 0, 0)
    out = check_entry(cat, entry(low, T0.plus_seconds(60)))
    assert out.verdict is Verdict.WARNING and out.reason is Reason.INFEASIBLE_ELEMENTS


def shifted(oe, km):
    return oe.replace(semi_major_axis_km=oe.semi_major_axis_km + km)


def test_cross_source_agreement():
    cfg = ValidationConfig(cross_source_min_agreement=1)
    base = leo(7)
    t1, t2 = T0.plus_seconds(600), T0.plus_seconds(1200)
    cat = Catalog()
    cat.add(1, T0, base, "other")
    cat.add(1, t1, propagate(base, T0, t1), "p1")
    assert check_entry(cat, entry(propagate(base, T0, t2), t2), cfg).reason is Reason.WITHIN_ENVELOPE
    # 3 km from its own prior but 6 km from the other provider's track
    own = shifted(propagate(base, T0, t1), 3.0)
    cat = Catalog()
    cat.add(1, T0, base, "other")
    cat.add(1, t1, own, "p1")
    new = shifted(propagate(own, t1, t2), 3.0)
    out = check_entry(cat, entry(new, t2), cfg)
    assert out.verdict is Verdict.WARNING and out.reason is Reason.CROSS_SOURCE_DISAGREEMENT
    assert check_entry(cat, entry(new, t2)).reason is Reason.WITHIN_ENVELOPE   # off by default


def test_cross_source_needs_only_available_providers():
    cfg = ValidationConfig(cross_source_min_agreement=3)
    cat, prior, t1, prop = with_prior()
    assert check_entry(cat, entry(prop, t1), cfg).accepted     # no other providers at all


# -- boundary: strict comparison -------------------------------------------------------------

def test_boundary_semi_major_axis_exact_epsilon():
    cat, prior, t1, prop = with_prior()
    bad = prop.replace(semi_major_axis_km=prop.semi_major_axis_km + 5.0)
    r = element_residual(bad, prop)[0]
    for eps_a, verdict in ((r, Verdict.WARNING),
                           (math.nextafter(r, 0), Verdict.WARNING),
                           (math.nextafter(r, math.inf), Verdict.ACCEPTED)):
        cfg = ValidationConfig(epsilon=ElementTolerance(semi_major_axis_km=eps_a))
        assert check_entry(cat, entry(bad, t1), cfg).verdict is verdict


@pytest.mark.parametrize("component", range(6))
def test_boundary_every_component(component):
    for want, got in boundary_probe(component):
        assert got is want, component


# -- oracle equivalence -------------------------------------------------------------------------

def test_oracle_agreement_thousand_cases():
    rng = random.Random(2024)
    verdicts = {"Accepted": 0, "Warning": 0}
    for _ in range(1000):
        got, want = run_case(entry_oracle.random_case(rng))
        assert got == want
        verdicts[got] += 1
    # the generator must exercise both branches substantially
    assert min(verdicts.values()) > 200


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2 ** 32))
def test_oracle_agreement_property(seed):
    got, want = run_case(entry_oracle.random_case(random.Random(seed)))
    assert got == want


def test_oracle_first_entry():
    case = entry_oracle.random_case(random.Random(1))
    assert entry_oracle.decide(None, 0, case.new, 1) == "Accepted"
    assert check_entry(Catalog(), entry(to_impl(case.new), T0)).verdict.value == "Accepted"


# -- properties -------------------------------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(1.0, 3 * DAY), st.floats(-1.0, 1.0))
def test_determinism_and_sensitivity(seed, gap, frac):
    cat, prior, t1, prop = with_prior(seed % 1000, gap)
    eps = ElementTolerance().vector(gap)
    new = prop.replace(semi_major_axis_km=prop.semi_major_axis_km + frac * 2 * eps[0])
    a = check_entry(cat, entry(new, t1))
    b = check_entry(cat, entry(new, t1))
    assert a == b
    assert a.accepted == (element_residual(new, prop)[0] < eps[0])


def test_signatures():
    keys = KeyPair.from_seed("validation")
    e = entry(leo(1), T0).signed(keys)
    assert e.verify(keys.public_key)
    tampered = EphemerisEntry(e.object_id, e.epoch, leo(2), e.provider, e.submitted_at, e.signature)
    assert not tampered.verify(keys.public_key)
    assert not e.verify(KeyPair.from_seed("other").public_key)


def test_outcome_as_dict():
    cat, prior, t1, prop = with_prior()
    d = check_entry(cat, entry(prop.replace(semi_major_axis_km=prop.semi_major_axis_km + 50), t1)).as_dict()
    assert d["verdict"] == "Warning" and d["reason"] == "EnvelopeExceeded"
    assert d["exceeded"] == ["a"] and set(d["residual"]) == {"a", "e", "i", "raan", "argp", "M"}
