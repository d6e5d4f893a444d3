"""Benchmark system models: coordinated-turn tracking and unicycle navigation.

Both systems expose exact discrete dynamics, measurement maps, and analytic
Jacobians wrapped in a :class:`NonlinearSystem`. The filter layer only sees
that interface, so other models can be plugged in for tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .ambiguity import CurvatureConstants
from .errors import SingularMeasurementError

RANGE_FLOOR = 1e-6
# Below this |omega * dt| the coordinated-turn trig ratios switch to their
# second-order Taylor expansions, removing the 0/0 singularity.
CT_SMALL_PHI = 1e-6


@dataclass(frozen=True)
class NonlinearSystem:
    """Discrete nonlinear system with analytic Jacobians.

    ``angular_meas`` lists measurement components that live on the circle;
    innovation residuals wrap those components to (-pi, pi].
    """

    name: str
    n_x: int
    n_u: int
    n_y: int
    f: Callable
    h: Callable
    jac_f: Callable
    jac_h: Callable
    curvature: CurvatureConstants
    angular_meas: tuple = ()
    jac_f_u: Callable = None
    operating_region: tuple = None

    def in_region(self, x):
        if self.operating_region is None:
            return True
        lo, hi = self.operating_region
        return bool(np.all(x >= lo) and np.all(x <= hi))


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    return np.mod(a - np.pi, -2.0 * np.pi) + np.pi


def wrap_residual(residual, angular_indices):
    """Wrap the angular components of an innovation residual to (-pi, pi]."""
    if not angular_indices:
        return residual
    out = np.array(residual, copy=True)
    for i in angular_indices:
        out[i] = wrap_angle(out[i])
    return out


# ---------------------------------------------------------------------------
# Coordinated-turn target tracking: state [px, py, vx, vy, omega].
# ---------------------------------------------------------------------------

def _ct_ratios(omega, dt):
    """sin(w dt)/w and (1 - cos(w dt))/w with a Taylor branch near w = 0.

    The cosine term uses 2 sin^2(phi/2), which is cancellation-free, so the
    two branches agree to machine precision at the threshold.
    """
    phi = omega * dt
    if abs(phi) < CT_SMALL_PHI:
        a = dt * (1.0 - phi * phi / 6.0)
        b = 0.5 * dt * phi * (1.0 - phi * phi / 12.0)
    else:
        a = math.sin(phi) / omega
        s_half = math.sin(0.5 * phi)
        b = 2.0 * s_half * s_half / omega
    return a, b


# The omega-derivatives of the turn ratios subtract nearly equal trig terms;
# below this |phi| the fourth-order Taylor forms are the more accurate branch
# (truncation O(phi^4) beats the O(eps/phi^2) cancellation of the closed form).
CT_DERIV_PHI = 1e-3


def ct_dynamics(x, dt):
    """Exact discrete coordinated-turn propagation; turn rate unchanged."""
    px, py, vx, vy, omega = x
    phi = omega * dt
    a, b = _ct_ratios(omega, dt)
    c, s = math.cos(phi), math.sin(phi)
    return np.array(
        [
            px + a * vx - b * vy,
            py + b * vx + a * vy,
            c * vx - s * vy,
            s * vx + c * vy,
            omega,
        ]
    )


def ct_jacobian(x, dt):
    """State Jacobian of :func:`ct_dynamics` (5x5), small-omega safe."""
    _, _, vx, vy, omega = x
    phi = omega * dt
    a, b = _ct_ratios(omega, dt)
    c, s = math.cos(phi), math.sin(phi)
    if abs(phi) < CT_DERIV_PHI:
        da = -omega * dt**3 / 3.0 + omega**3 * dt**5 / 30.0
        db = 0.5 * dt * dt - omega**2 * dt**4 / 8.0 + omega**4 * dt**6 / 144.0
    else:
        s_half = math.sin(0.5 * phi)
        da = (dt * c * omega - s) / omega**2
        db = (dt * s * omega - 2.0 * s_half * s_half) / omega**2
    dc = -dt * s
    ds = dt * c
    return np.array(
        [
            [1.0, 0.0, a, -b, vx * da - vy * db],
            [0.0, 1.0, b, a, vx * db + vy * da],
            [0.0, 0.0, c, -s, vx * dc - vy * ds],
            [0.0, 0.0, s, c, vx * ds + vy * dc],
            [0.0, 0.0, 0.0, 0.0, 1.0],
        ]
    )


def ct_measurement(x, range_floor=RANGE_FLOOR):
    """Range and four-quadrant bearing of the planar position."""
    r = math.hypot(x[0], x[1])
    if r <= range_floor:
        raise SingularMeasurementError(
            f"position norm {r:.3e} at or below range floor {range_floor:.1e}"
        )
    return np.array([r, math.atan2(x[1], x[0])])


def ct_measurement_jacobian(x, range_floor=RANGE_FLOOR):
    """Measurement Jacobian (2x5) of :func:`ct_measurement`."""
    px, py = x[0], x[1]
    r = math.hypot(px, py)
    if r <= range_floor:
        raise SingularMeasurementError(
            f"position norm {r:.3e} at or below range floor {range_floor:.1e}"
        )
    r2 = r * r
    return np.array(
        [
            [px / r, py / r, 0.0, 0.0, 0.0],
            [-py / r2, px / r2, 0.0, 0.0, 0.0],
        ]
    )


def _ct_meas_guarded(x, range_floor):
    # Filter-facing evaluation: below the floor (a measure-zero set the
    # nominal initial mean happens to sit on) the measurement degrades to
    # an uninformative reading instead of aborting the run.
    r = math.hypot(x[0], x[1])
    if r <= range_floor:
        return np.array([r, 0.0])
    return np.array([r, math.atan2(x[1], x[0])])


def _ct_meas_jac_guarded(x, range_floor):
    r = math.hypot(x[0], x[1])
    if r <= range_floor:
        return np.zeros((2, 5))
    return ct_measurement_jacobian(x, range_floor)


def ct_system(dt=0.2, range_floor=RANGE_FLOOR, operating_region=None) -> NonlinearSystem:
    """Coordinated-turn system with range-bearing measurements."""
    return NonlinearSystem(
        name="ct",
        n_x=5,
        n_u=0,
        n_y=2,
        f=lambda x, u=None: ct_dynamics(x, dt),
        h=lambda x: _ct_meas_guarded(x, range_floor),
        jac_f=lambda x, u=None: ct_jacobian(x, dt),
        jac_h=lambda x: _ct_meas_jac_guarded(x, range_floor),
        curvature=curvature_constants("ct"),
        angular_meas=(1,),
        operating_region=operating_region,
    )


# ---------------------------------------------------------------------------
# Unicycle navigation: state [px, py, psi], input [speed, turn rate].
# ---------------------------------------------------------------------------

def unicycle_dynamics(x, u, dt):
    """Euler-discretized unicycle step; heading re-wrapped to (-pi, pi]."""
    px, py, psi = x
    s, omega = u
    return np.array(
        [
            px + s * math.cos(psi) * dt,
            py + s * math.sin(psi) * dt,
            wrap_angle(psi + omega * dt),
        ]
    )


def unicycle_jacobian(x, u, dt):
    """State Jacobian (3x3) of :func:`unicycle_dynamics`."""
    psi = x[2]
    s = u[0]
    return np.array(
        [
            [1.0, 0.0, -s * math.sin(psi) * dt],
            [0.0, 1.0, s * math.cos(psi) * dt],
            [0.0, 0.0, 1.0],
        ]
    )


def unicycle_input_jacobian(x, u, dt):
    """Input Jacobian (3x2), used by the receding-horizon controller."""
    psi = x[2]
    return np.array(
        [
            [math.cos(psi) * dt, 0.0],
            [math.sin(psi) * dt, 0.0],
            [0.0, dt],
        ]
    )


def beacon_measurement(x, beacons, range_floor=RANGE_FLOOR):
    """Ranges to each beacon followed by the heading."""
    p = np.asarray(x[:2], dtype=float)
    out = np.empty(len(beacons) + 1)
    for i, b in enumerate(beacons):
        d = p - np.asarray(b, dtype=float)
        r = math.hypot(d[0], d[1])
        if r <= range_floor:
            raise SingularMeasurementError(
                f"beacon {i} coincides with position (range {r:.3e})"
            )
        out[i] = r
    out[-1] = x[2]
    return out


def beacon_measurement_jacobian(x, beacons, range_floor=RANGE_FLOOR):
    """Measurement Jacobian ((n_b + 1) x 3) of :func:`beacon_measurement`."""
    p = np.asarray(x[:2], dtype=float)
    jac = np.zeros((len(beacons) + 1, 3))
    for i, b in enumerate(beacons):
        d = p - np.asarray(b, dtype=float)
        r = math.hypot(d[0], d[1])
        if r <= range_floor:
            raise SingularMeasurementError(
                f"beacon {i} coincides with position (range {r:.3e})"
            )
        jac[i, 0] = d[0] / r
        jac[i, 1] = d[1] / r
    jac[-1, 2] = 1.0
    return jac


def unicycle_system(
    dt=0.2,
    beacons=((1.0, 1.0), (14.0, 1.0), (7.5, 9.0)),
    range_floor=RANGE_FLOOR,
    operating_region=None,
) -> NonlinearSystem:
    """Unicycle with beacon-range plus heading measurements."""
    beacons = tuple(tuple(float(v) for v in b) for b in beacons)
    n_y = len(beacons) + 1
    return NonlinearSystem(
        name="unicycle",
        n_x=3,
        n_u=2,
        n_y=n_y,
        f=lambda x, u: unicycle_dynamics(x, u, dt),
        h=lambda x: beacon_measurement(x, beacons, range_floor),
        jac_f=lambda x, u: unicycle_jacobian(x, u, dt),
        jac_h=lambda x: beacon_measurement_jacobian(x, beacons, range_floor),
        curvature=curvature_constants("safe_nav"),
        angular_meas=(n_y - 1,),
        jac_f_u=lambda x, u: unicycle_input_jacobian(x, u, dt),
        operating_region=operating_region,
    )


_CURVATURE_TABLE = {
    "ct": (0.3, 0.2),
    "safe_nav": (0.3, 0.5),
    "unicycle": (0.3, 0.5),
}


def curvature_constants(system_id) -> CurvatureConstants:
    """Benchmark curvature constants; moment ratios default to sqrt(3)."""
    try:
        l_f, l_h = _CURVATURE_TABLE[system_id]
    except KeyError:
        raise ValueError(f"unknown system id '{system_id}'") from None
    return CurvatureConstants(l_f=l_f, l_h=l_h)
