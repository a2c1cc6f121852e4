"""Mean-element propagation (two-body + J2 secular) and a Cowell reference integrator.

:func:`propagate` is the model the entry check and conjunction screening
rely on. It only drifts RAAN, argument of perigee and mean anomaly; the
drift is applied in integer angle ticks, so composing two propagations
gives exactly the same result as one propagation over the summed
interval. :func:`reference_propagate` integrates the full two-body + J2
acceleration with fixed-step RK4 and is used as an independent oracle.

Any callable with the signature of :func:`propagate` can stand in for a
higher-fidelity model (SGP4 for instance); the ledger only ever calls it
through :class:`PropagatorConfig` and :func:`propagate`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .constants import ANGLE_TICKS, J2, MU_EARTH, R_EARTH, SECONDS_PER_DAY, TWO_PI
from .encoding import register
from .elements import Epoch, InfeasibleElementsError, OrbitalElements, rad_to_ticks, wrap_angle

Vector = tuple[float, float, float]


class KeplerConvergenceError(ArithmeticError):
    def __init__(self, mean_anomaly: float, eccentricity: float, residual: float):
        self.mean_anomaly = mean_anomaly
        self.eccentricity = eccentricity
        self.residual = residual
        super().__init__(
            f"Kepler solve did not converge for M={mean_anomaly!r}, e={eccentricity!r} "
            f"(residual {residual:.3e})"
        )


@register("PropagatorConfig")
@dataclass(frozen=True)
class PropagatorConfig:
    include_j2: bool = True
    include_ndot: bool = False
    kepler_tolerance: float = 1e-12
    kepler_max_iterations: int = 50

    def __post_init__(self):
        if not self.kepler_tolerance > 0.0:
            raise ValueError("kepler_tolerance must be positive")
        if self.kepler_max_iterations < 1:
            raise ValueError("kepler_max_iterations must be at least 1")


DEFAULT_CONFIG = PropagatorConfig()
KEPLERIAN = PropagatorConfig(include_j2=False, include_ndot=False)


@dataclass(frozen=True)
class StateVector:
    position: Vector    # km, inertial
    velocity: Vector    # km/s
    epoch: Epoch

    @property
    def radius(self) -> float:
        return math.sqrt(sum(c * c for c in self.position))

    @property
    def speed(self) -> float:
        return math.sqrt(sum(c * c for c in self.velocity))

    @property
    def specific_energy(self) -> float:
        return 0.5 * self.speed ** 2 - MU_EARTH / self.radius


# -- Kepler's equation ----------------------------------------------------------

def kepler_solve(mean_anomaly: float, eccentricity: float,
                 config: PropagatorConfig = DEFAULT_CONFIG) -> float:
    """Eccentric anomaly E with ``|E - e sin E - M| <= config.kepler_tolerance``.

    Newton iteration from ``E0 = M`` (e < 0.8) or ``E0 = pi`` (e >= 0.8); a
    step leaving the bracket that must contain the root is replaced by
    bisection. The returned angle lies in the same turn as ``M``.
    """
    e = eccentricity
    if not 0.0 <= e < 1.0:
        raise ValueError(f"eccentricity must be in [0, 1), got {e!r}")
    if not math.isfinite(mean_anomaly):
        raise ValueError("mean anomaly must be finite")
    turns = math.floor(mean_anomaly / TWO_PI)
    M = mean_anomaly - turns * TWO_PI
    if M >= TWO_PI:
        M -= TWO_PI
        turns += 1
    offset = turns * TWO_PI
    tol = config.kepler_tolerance

    # E - e sin E is monotone, and E lies within e of M
    lo, hi = max(0.0, M - e), min(TWO_PI, M + e)
    if abs(e * math.sin(M)) <= tol:
        # M already solves the equation (M near 0 or pi, or e = 0)
        return M + offset
    E = M if e < 0.8 else math.pi
    residual = E - e * math.sin(E) - M
    for _ in range(config.kepler_max_iterations):
        if abs(residual) <= tol:
            return E + offset
        if residual > 0.0:
            hi = min(hi, E)
        else:
            lo = max(lo, E)
        step = residual / (1.0 - e * math.cos(E))
        E_next = E - step
        if not lo <= E_next <= hi:
            E_next = 0.5 * (lo + hi)
        E = E_next
        residual = E - e * math.sin(E) - M
    if abs(residual) <= tol:
        return E + offset
    raise KeplerConvergenceError(mean_anomaly, e, residual)


def kepler_solve_array(mean_anomaly: np.ndarray, eccentricity: np.ndarray,
                       tolerance: float = 1e-12, max_iterations: int = 50) -> np.ndarray:
    """Vectorised counterpart of :func:`kepler_solve` for angles in ``[0, 2*pi)``."""
    M = np.mod(np.asarray(mean_anomaly, dtype=float), TWO_PI)
    e = np.broadcast_to(np.asarray(eccentricity, dtype=float), M.shape)
    lo = np.maximum(0.0, M - e)
    hi = np.minimum(TWO_PI, M + e)
    E = np.where(e < 0.8, M, math.pi)
    for _ in range(max_iterations):
        residual = E - e * np.sin(E) - M
        if np.all(np.abs(residual) <= tolerance):
            return E
        hi = np.where(residual > 0.0, np.minimum(hi, E), hi)
        lo = np.where(residual < 0.0, np.maximum(lo, E), lo)
        E_next = E - residual / (1.0 - e * np.cos(E))
        outside = (E_next < lo) | (E_next > hi)
        E = np.where(outside, 0.5 * (lo + hi), E_next)
    residual = E - e * np.sin(E) - M
    worst = int(np.argmax(np.abs(residual)))
    if abs(residual.flat[worst]) > tolerance:
        raise KeplerConvergenceError(float(M.flat[worst]), float(e.flat[worst]),
                                     float(residual.flat[worst]))
    return E


# -- secular model ---------------------------------------------------------------

def secular_rates(a, e, i, include_j2: bool = True, xp=math):
    """Return (raan_dot, argp_dot, mean_anomaly_dot) in rad/s.

    ``xp`` is :mod:`math` for scalars or :mod:`numpy` for arrays.
    """
    n = xp.sqrt(MU_EARTH / (a * a * a))
    if not include_j2:
        zero = n * 0.0
        return zero, zero, n
    p = a * (1.0 - e * e)
    k = J2 * n * (R_EARTH / p) ** 2
    cos_i = xp.cos(i)
    c2 = cos_i * cos_i
    raan_dot = -1.5 * k * cos_i
    argp_dot = 0.75 * k * (5.0 * c2 - 1.0)
    m_dot = n + 0.75 * k * xp.sqrt(1.0 - e * e) * (3.0 * c2 - 1.0)
    return raan_dot, argp_dot, m_dot


def _ticks_per_micro(rate_rad_s: float) -> int:
    return round(rate_rad_s / TWO_PI * (ANGLE_TICKS / 1e6))


def ndot_mean_anomaly_rad(mean_motion_dot_half: float, dt_seconds: float) -> float:
    """Mean-anomaly contribution of a constant mean-motion derivative.

    With ndot/2 in rev/day^2 the angle gained is ``ndot/2 * dt^2`` revolutions.
    """
    days = dt_seconds / SECONDS_PER_DAY
    return TWO_PI * mean_motion_dot_half * days * days


def propagate(oe_old: OrbitalElements, epoch_old: Epoch, epoch_new: Epoch,
              config: PropagatorConfig = DEFAULT_CONFIG) -> OrbitalElements:
    """Advance mean elements from ``epoch_old`` to ``epoch_new``.

    Semi-major axis, eccentricity and inclination are returned unchanged.
    Backward intervals are allowed here; the ledger rejects them separately.
    """
    if not oe_old.is_feasible():
        raise InfeasibleElementsError(
            f"perigee {oe_old.perigee_km:.3f} km below Earth radius; refusing to propagate")
    dt_us = epoch_new.micros - epoch_old.micros
    if dt_us == 0:
        return oe_old
    raan_dot, argp_dot, m_dot = secular_rates(
        oe_old.semi_major_axis_km, oe_old.eccentricity, oe_old.inclination_rad, config.include_j2)
    raan = (oe_old.raan_ticks + _ticks_per_micro(raan_dot) * dt_us) % ANGLE_TICKS
    argp = (oe_old.argp_ticks + _ticks_per_micro(argp_dot) * dt_us) % ANGLE_TICKS
    mean = oe_old.mean_anomaly_ticks + _ticks_per_micro(m_dot) * dt_us
    if config.include_ndot and oe_old.mean_motion_dot_half != 0.0:
        extra = ndot_mean_anomaly_rad(oe_old.mean_motion_dot_half, dt_us / 1e6)
        mean += rad_to_ticks(extra) if extra >= 0.0 else -rad_to_ticks(-extra)
    return OrbitalElements(
        oe_old.semi_major_axis_km,
        oe_old.eccentricity,
        oe_old.inclination_rad,
        raan,
        argp,
        mean % ANGLE_TICKS,
        oe_old.mean_motion_dot_half,
    )


# -- Cartesian conversion --------------------------------------------------------

def _perifocal_to_inertial(raan, argp, inc, xp=math):
    cO, sO = xp.cos(raan), xp.sin(raan)
    cw, sw = xp.cos(argp), xp.sin(argp)
    ci, si = xp.cos(inc), xp.sin(inc)
    # columns P and Q of Rz(raan) Rx(inc) Rz(argp)
    P = (cO * cw - sO * sw * ci, sO * cw + cO * sw * ci, sw * si)
    Q = (-cO * sw - sO * cw * ci, -sO * sw + cO * cw * ci, cw * si)
    return P, Q


def elements_to_state(oe: OrbitalElements, epoch: Epoch,
                      config: PropagatorConfig = DEFAULT_CONFIG) -> StateVector:
    """Inertial position/velocity of the osculating two-body orbit at ``epoch``."""
    oe.check_feasible()
    a, e = oe.semi_major_axis_km, oe.eccentricity
    E = kepler_solve(oe.mean_anomaly_rad, e, config)
    cE, sE = math.cos(E), math.sin(E)
    root = math.sqrt(1.0 - e * e)
    n = math.sqrt(MU_EARTH / a ** 3)
    x_p, y_p = a * (cE - e), a * root * sE
    denom = 1.0 - e * cE
    vx_p, vy_p = -a * n * sE / denom, a * n * root * cE / denom
    P, Q = _perifocal_to_inertial(oe.raan_rad, oe.argp_rad, oe.inclination_rad)
    pos = tuple(x_p * P[k] + y_p * Q[k] for k in range(3))
    vel = tuple(vx_p * P[k] + vy_p * Q[k] for k in range(3))
    return StateVector(pos, vel, epoch)


def state_to_elements(state: StateVector) -> OrbitalElements:
    """Osculating Keplerian elements of a bound state (inverse of elements_to_state)."""
    r = np.asarray(state.position, dtype=float)
    v = np.asarray(state.velocity, dtype=float)
    rn, vn = np.linalg.norm(r), np.linalg.norm(v)
    h = np.cross(r, v)
    hn = np.linalg.norm(h)
    energy = 0.5 * vn * vn - MU_EARTH / rn
    if energy >= 0.0:
        raise InfeasibleElementsError("state is not on a bound orbit")
    a = -MU_EARTH / (2.0 * energy)
    e_vec = np.cross(v, h) / MU_EARTH - r / rn
    e = float(np.linalg.norm(e_vec))
    inc = math.acos(max(-1.0, min(1.0, h[2] / hn)))
    node = np.array([-h[1], h[0], 0.0])
    nn = np.linalg.norm(node)
    raan = math.atan2(node[1], node[0]) if nn > 1e-12 else 0.0
    node_dir = node / nn if nn > 1e-12 else np.array([1.0, 0.0, 0.0])
    w_dir = np.cross(h / hn, node_dir)
    if e > 1e-12:
        argp = math.atan2(float(np.dot(e_vec, w_dir)), float(np.dot(e_vec, node_dir)))
        p_dir = e_vec / e
    else:
        argp = 0.0
        p_dir = node_dir
    q_dir = np.cross(h / hn, p_dir)
    nu = math.atan2(float(np.dot(r, q_dir)), float(np.dot(r, p_dir)))
    E = 2.0 * math.atan2(math.sqrt(1.0 - e) * math.sin(nu / 2.0),
                         math.sqrt(1.0 + e) * math.cos(nu / 2.0))
    M = E - e * math.sin(E)
    return OrbitalElements.from_angles(a, min(e, 1.0 - 1e-16), inc, wrap_angle(raan),
                                       wrap_angle(argp), wrap_angle(M))


# -- vectorised evaluation (conjunction screening) --------------------------------

@dataclass(frozen=True)
class ElementArrays:
    """Column-wise element sets, all referred to a common reference epoch."""

    a: np.ndarray
    e: np.ndarray
    i: np.ndarray
    raan0: np.ndarray
    argp0: np.ndarray
    m0: np.ndarray
    ndot_half: np.ndarray
    raan_dot: np.ndarray
    argp_dot: np.ndarray
    m_dot: np.ndarray
    include_ndot: bool

    @classmethod
    def from_elements(cls, elements: Sequence[OrbitalElements], epochs: Sequence[Epoch],
                      reference: Epoch, config: PropagatorConfig = DEFAULT_CONFIG) -> ElementArrays:
        """Propagate each set to ``reference`` and collect rates for vector evaluation."""
        moved = [propagate(oe, ep, reference, config) for oe, ep in zip(elements, epochs)]
        a = np.array([m.semi_major_axis_km for m in moved], dtype=float)
        e = np.array([m.eccentricity for m in moved], dtype=float)
        i = np.array([m.inclination_rad for m in moved], dtype=float)
        raan_dot, argp_dot, m_dot = secular_rates(a, e, i, config.include_j2, xp=np)
        return cls(
            a=a, e=e, i=i,
            raan0=np.array([m.raan_rad for m in moved], dtype=float),
            argp0=np.array([m.argp_rad for m in moved], dtype=float),
            m0=np.array([m.mean_anomaly_rad for m in moved], dtype=float),
            ndot_half=np.array([m.mean_motion_dot_half for m in moved], dtype=float),
            raan_dot=np.asarray(raan_dot, dtype=float) + np.zeros_like(a),
            argp_dot=np.asarray(argp_dot, dtype=float) + np.zeros_like(a),
            m_dot=np.asarray(m_dot, dtype=float),
            include_ndot=config.include_ndot,
        )

    def __len__(self) -> int:
        return len(self.a)

    def states(self, index: np.ndarray, dt: np.ndarray, tolerance: float = 1e-12,
               with_velocity: bool = True):
        """Positions (and velocities) of objects ``index`` at ``dt`` seconds past the reference.

        ``index`` and ``dt`` broadcast against each other; the result has a
        trailing axis of length 3.
        """
        index = np.asarray(index)
        dt = np.asarray(dt, dtype=float)
        a, e, inc = self.a[index], self.e[index], self.i[index]
        raan = self.raan0[index] + self.raan_dot[index] * dt
        argp = self.argp0[index] + self.argp_dot[index] * dt
        M = self.m0[index] + self.m_dot[index] * dt
        if self.include_ndot:
            days = dt / SECONDS_PER_DAY
            M = M + TWO_PI * self.ndot_half[index] * days * days
        a, e, inc, raan, argp, M = np.broadcast_arrays(a, e, inc, raan, argp, M)
        E = kepler_solve_array(M, e, tolerance)
        cE, sE = np.cos(E), np.sin(E)
        root = np.sqrt(1.0 - e * e)
        x_p, y_p = a * (cE - e), a * root * sE
        P, Q = _perifocal_to_inertial(raan, argp, inc, xp=np)
        pos = np.stack([x_p * P[k] + y_p * Q[k] for k in range(3)], axis=-1)
        if not with_velocity:
            return pos
        n = np.sqrt(MU_EARTH / a ** 3)
        denom = 1.0 - e * cE
        vx_p, vy_p = -a * n * sE / denom, a * n * root * cE / denom
        vel = np.stack([vx_p * P[k] + vy_p * Q[k] for k in range(3)], axis=-1)
        return pos, vel


# -- reference integrator --------------------------------------------------------

def _acceleration(x: float, y: float, z: float, include_j2: bool) -> Vector:
    r2 = x * x + y * y + z * z
    r = math.sqrt(r2)
    k = -MU_EARTH / (r2 * r)
    ax, ay, az = k * x, k * y, k * z
    if include_j2:
        f = 1.5 * J2 * MU_EARTH * R_EARTH * R_EARTH / (r2 * r2 * r)
        zz = 5.0 * z * z / r2
        ax += f * x * (zz - 1.0)
        ay += f * y * (zz - 1.0)
        az += f * z * (zz - 3.0)
    return ax, ay, az


def reference_propagate(state: StateVector, dt: float, step: float = 30.0,
                        include_j2: bool = True) -> StateVector:
    """Fixed-step RK4 Cowell integration of two-body (+ J2) motion.

    The interval is split into ``ceil(|dt| / step)`` equal steps.
    """
    if not step > 0.0:
        raise ValueError("step must be positive")
    if dt == 0.0:
        return state
    count = max(1, math.ceil(abs(dt) / step))
    h = dt / count
    x, y, z = state.position
    vx, vy, vz = state.velocity
    for _ in range(count):
        a1 = _acceleration(x, y, z, include_j2)
        x2, y2, z2 = x + 0.5 * h * vx, y + 0.5 * h * vy, z + 0.5 * h * vz
        v2 = (vx + 0.5 * h * a1[0], vy + 0.5 * h * a1[1], vz + 0.5 * h * a1[2])
        a2 = _acceleration(x2, y2, z2, include_j2)
        x3, y3, z3 = x + 0.5 * h * v2[0], y + 0.5 * h * v2[1], z + 0.5 * h * v2[2]
        v3 = (vx + 0.5 * h * a2[0], vy + 0.5 * h * a2[1], vz + 0.5 * h * a2[2])
        a3 = _acceleration(x3, y3, z3, include_j2)
        x4, y4, z4 = x + h * v3[0], y + h * v3[1], z + h * v3[2]
        v4 = (vx + h * a3[0], vy + h * a3[1], vz + h * a3[2])
        a4 = _acceleration(x4, y4, z4, include_j2)
        x += h / 6.0 * (vx + 2.0 * v2[0] + 2.0 * v3[0] + v4[0])
        y += h / 6.0 * (vy + 2.0 * v2[1] + 2.0 * v3[1] + v4[1])
        z += h / 6.0 * (vz + 2.0 * v2[2] + 2.0 * v3[2] + v4[2])
        vx += h / 6.0 * (a1[0] + 2.0 * a2[0] + 2.0 * a3[0] + a4[0])
        vy += h / 6.0 * (a1[1] + 2.0 * a2[1] + 2.0 * a3[1] + a4[1])
        vz += h / 6.0 * (a1[2] + 2.0 * a2[2] + 2.0 * a3[2] + a4[2])
        if not (math.isfinite(x) and math.isfinite(vx)):
            raise OverflowError("reference integration diverged")
    return StateVector((x, y, z), (vx, vy, vz), state.epoch.plus_seconds(dt))
