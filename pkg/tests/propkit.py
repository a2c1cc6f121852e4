"""Reference numbers for the propagator tests, measured once with the RK4 oracle."""

import math

import numpy as np

from ephemerishield.elements import Epoch, OrbitalElements
from ephemerishield.propagation import (
    elements_to_state,
    propagate,
    reference_propagate,
    state_to_elements,
)

T0 = Epoch.from_iso("2024-01-01T00:00:00Z")

# (a km, e, i deg) -> (short-period RAAN envelope rad, secular RAAN drift rad) over one day,
# RK4 at 10 s steps sampled every 60 s. Frozen at first measurement.
ENVELOPE_CASES = {
    (6878.0, 0.001, 51.6): (0.0008710661157174115, -0.00010074174667067912),
    (7200.0, 0.01, 98.7): (0.00019892149059730357, 1.304138826149347e-07),
    (7000.0, 0.05, 30.0): (0.0013436404151336845, -0.0002715728864773079),
    (26560.0, 0.01, 55.0): (5.529648027957634e-05, -2.6529140792101925e-08),
}


def raan_envelope(a: float, e: float, inc_deg: float, span: float = 86400.0,
                  sample: float = 60.0, step: float = 10.0) -> tuple[float, float]:
    """Return (envelope, drift) of osculating-minus-mean RAAN.

    The envelope is the peak-to-peak spread over the first orbit; the drift is
    the difference of the orbit-averaged offsets over the last and first orbits.
    """
    oe = OrbitalElements.from_angles(a, e, math.radians(inc_deg), 1.0, 0.5, 0.2)
    st = elements_to_state(oe, T0)
    ts = np.arange(0.0, span + 1.0, sample)
    d = []
    for k, t in enumerate(ts):
        if k:
            st = reference_propagate(st, sample, step)
        osc = state_to_elements(st)
        mean = propagate(oe, T0, T0.plus_seconds(float(t)))
        d.append((osc.raan_rad - mean.raan_rad + math.pi) % (2 * math.pi) - math.pi)
    d = np.array(d)
    per_orbit = int(oe.period_s // sample)
    envelope = float(d[:per_orbit].max() - d[:per_orbit].min())
    drift = float(d[-per_orbit:].mean() - d[:per_orbit].mean())
    return envelope, drift
